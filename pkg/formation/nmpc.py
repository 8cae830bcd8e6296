"""
Decentralized nonlinear MPC for leader-follower formation flying.

The optimal control problem over a horizon of N steps is

    min  sum_k  l(x_k, u_k, ref_k) + l_N(x_N, ref_N) + collision penalty
    s.t. x_{k+1} = f(x_k, u_k),  |u| <= u_max

with ``f`` the RK4 discretization from ``dynamics``. Every cost term is a
squared residual, so the problem is solved with a Gauss-Newton SQP over
multiple shooting nodes: dynamics are linearized with batched central
finite differences, the node deviations are condensed onto the inputs and
each subproblem is a bounded linear least-squares solve
(``scipy.optimize.lsq_linear``). Inter-agent separation constraints are
softened with an exterior quadratic penalty whose weight doubles per outer
iteration.
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, NamedTuple, Optional, Sequence, Union

import numpy as np
from scipy.optimize import lsq_linear

from .dynamics import (
    BodyParams,
    INPUT_DIM,
    STATE_DIM,
    RigidBodyState,
    Wrench,
    quat_from_axis_angle,
    quat_multiply,
    quat_normalize,
    rk4_step,
)


logger = logging.getLogger(__name__)

QUAT_SLICE = slice(6, 10)
NODE_RESIDUALS = 10
DEFAULT_HORIZON = 30
DEFAULT_DT = 0.2
DEFAULT_FORCE_MAX = 3.0
DEFAULT_TORQUE_MAX = 0.51
DEFAULT_D_MIN = 0.4
TERMINAL_FACTOR = 20.0
STALE_PERIODS = 2

StateLike = Union[RigidBodyState, np.ndarray, Sequence[float]]


class NmpcError(Exception):
    """Base exception for NMPC errors."""
    pass


class OcpDefinitionError(NmpcError):
    """Raised when an OCP violates its structural invariants."""
    pass


class ReferenceLengthError(NmpcError):
    """Raised when reference or prediction lengths do not match the horizon."""
    pass


class SolverStatus(str, Enum):
    CONVERGED = 'Converged'
    MAX_ITER = 'MaxIter'
    INFEASIBLE = 'Infeasible'


def _as_state(x: StateLike) -> np.ndarray:
    if isinstance(x, RigidBodyState):
        return x.to_vector()
    return np.asarray(x, dtype=float)


def _as_input(u) -> np.ndarray:
    if isinstance(u, Wrench):
        return u.to_vector()
    return np.asarray(u, dtype=float)


def _psd_sqrt(matrix: np.ndarray) -> np.ndarray:
    eigenvalues, vectors = np.linalg.eigh(matrix)
    return (vectors * np.sqrt(np.clip(eigenvalues, 0.0, None))) @ vectors.T


def _is_psd(matrix: np.ndarray) -> bool:
    matrix = np.asarray(matrix, dtype=float)
    if not np.allclose(matrix, matrix.T, atol=1e-12):
        return False
    return np.linalg.eigvalsh(matrix).min() >= -1e-12


class OcpWeights(NamedTuple):
    """Stage weights; the terminal weight P uses the same structure."""
    Q_p: np.ndarray
    Q_v: np.ndarray
    Q_q: float
    Q_omega: np.ndarray
    R: np.ndarray

    @classmethod
    def from_diagonal(cls, q_p: float = 1.0, q_v: float = 30.0, q_q: float = 1000.0,
                      q_omega: float = 10.0, r_force: float = 0.2, r_torque: float = 100.0) -> 'OcpWeights':
        """Diagonal weights; the defaults are the demonstration tuning."""
        return cls(
            Q_p=np.eye(3) * q_p,
            Q_v=np.eye(3) * q_v,
            Q_q=float(q_q),
            Q_omega=np.eye(3) * q_omega,
            R=np.diag([r_force] * 3 + [r_torque] * 3),
        )

    def scaled(self, factor: float) -> 'OcpWeights':
        """State blocks multiplied by ``factor`` (used for P = 20 Q)."""
        return OcpWeights(Q_p=self.Q_p * factor, Q_v=self.Q_v * factor, Q_q=self.Q_q * factor,
                          Q_omega=self.Q_omega * factor, R=self.R)

    def validate(self) -> 'OcpWeights':
        for name in ('Q_p', 'Q_v', 'Q_omega'):
            block = np.asarray(getattr(self, name), dtype=float)
            if block.shape != (3, 3) or not _is_psd(block):
                raise OcpDefinitionError(f"Weight {name} must be a 3x3 PSD matrix")
        if np.asarray(self.R).shape != (INPUT_DIM, INPUT_DIM) or not _is_psd(self.R):
            raise OcpDefinitionError("Weight R must be a 6x6 PSD matrix")
        if self.Q_q < 0:
            raise OcpDefinitionError("Weight Q_q must be non-negative")
        return self


class FormationOffset(NamedTuple):
    """Desired follower pose relative to the leader."""
    dp: np.ndarray
    dq: np.ndarray

    @classmethod
    def translation(cls, dp: Sequence[float]) -> 'FormationOffset':
        return cls(dp=np.asarray(dp, dtype=float), dq=np.array([1.0, 0.0, 0.0, 0.0]))

    @classmethod
    def from_yaw(cls, dp: Sequence[float], yaw: float) -> 'FormationOffset':
        return cls(dp=np.asarray(dp, dtype=float), dq=quat_from_axis_angle((0.0, 0.0, 1.0), yaw))


class Obstacle(NamedTuple):
    """Predicted positions of another agent over the horizon."""
    agent_id: str
    positions: np.ndarray
    d_min: float = DEFAULT_D_MIN


class SolverSettings(NamedTuple):
    max_iterations: int = 50
    kkt_tol: float = 1e-4
    rho_init: float = 1e3
    rho_max: float = 1e9
    collision_tol: float = 0.01
    defect_weight: float = 1e4
    velocity_weight: float = 1e4
    regularization: float = 1e-8
    fd_step: float = 1e-5
    max_backtracks: int = 12


@dataclass
class OcpProblem:
    """
    One instance of the finite-horizon optimal control problem.

    ``refs`` holds N+1 reference states as a (N+1, 13) array. Input bounds are
    symmetric per axis; ``v_max`` adds soft per-axis velocity limits.
    """
    x0: np.ndarray
    refs: np.ndarray
    weights: OcpWeights
    body: BodyParams
    n: float
    horizon: int = DEFAULT_HORIZON
    dt: float = DEFAULT_DT
    u_max: np.ndarray = field(default_factory=lambda: np.array([DEFAULT_FORCE_MAX] * 3 + [DEFAULT_TORQUE_MAX] * 3))
    v_max: Optional[np.ndarray] = None
    obstacles: List[Obstacle] = field(default_factory=list)
    terminal_weights: Optional[OcpWeights] = None

    def __post_init__(self):
        self.x0 = _as_state(self.x0)
        self.refs = np.asarray([_as_state(ref) for ref in self.refs], dtype=float)
        self.u_max = np.asarray(self.u_max, dtype=float)
        if self.v_max is not None:
            self.v_max = np.asarray(self.v_max, dtype=float)
        if self.terminal_weights is None:
            self.terminal_weights = self.weights.scaled(TERMINAL_FACTOR)

    @property
    def lower_bounds(self) -> np.ndarray:
        return np.tile(-self.u_max, (self.horizon, 1))

    @property
    def upper_bounds(self) -> np.ndarray:
        return np.tile(self.u_max, (self.horizon, 1))

    def validate(self) -> 'OcpProblem':
        """
        Raises:
            OcpDefinitionError: On shape, weight, bound or quaternion violations
            ReferenceLengthError: If refs or obstacles do not have N+1 entries
        """
        if self.horizon < 1 or self.dt <= 0:
            raise OcpDefinitionError("Horizon must be >= 1 and dt > 0")
        if self.x0.shape != (STATE_DIM,):
            raise OcpDefinitionError(f"x0 must have {STATE_DIM} components")
        if self.refs.shape != (self.horizon + 1, STATE_DIM):
            raise ReferenceLengthError(
                f"Expected {self.horizon + 1} reference states, got array of shape {self.refs.shape}"
            )
        if np.any(np.abs(np.linalg.norm(self.refs[:, QUAT_SLICE], axis=1) - 1.0) > 1e-6):
            raise OcpDefinitionError("Reference quaternions must be unit-norm")
        if abs(np.linalg.norm(self.x0[QUAT_SLICE]) - 1.0) > 1e-6:
            raise OcpDefinitionError("Initial quaternion must be unit-norm")
        if self.u_max.shape != (INPUT_DIM,) or np.any(self.u_max < 0):
            raise OcpDefinitionError("u_max must hold 6 non-negative bounds")
        if self.v_max is not None and (self.v_max.shape != (3,) or np.any(self.v_max < 0)):
            raise OcpDefinitionError("v_max must hold 3 non-negative bounds")
        for obstacle in self.obstacles:
            if np.asarray(obstacle.positions).shape != (self.horizon + 1, 3):
                raise ReferenceLengthError(f"Obstacle '{obstacle.agent_id}' needs {self.horizon + 1} positions")
            if obstacle.d_min < 0:
                raise OcpDefinitionError("d_min must be non-negative")
        self.weights.validate()
        self.terminal_weights.validate()
        return self


@dataclass
class OcpSolution:
    """Optimal input sequence and the dynamically feasible predicted states."""
    u_seq: np.ndarray
    x_pred: np.ndarray
    cost: float
    kkt_residual: float
    iterations: int
    status: SolverStatus
    penalty: float = 0.0
    penalty_weight: float = 0.0
    max_violation: float = 0.0
    merit_history: List[float] = field(default_factory=list)
    penalty_history: List[float] = field(default_factory=list)

    @property
    def first_wrench(self) -> Wrench:
        return Wrench.from_vector(self.u_seq[0])

    def shifted(self, body: BodyParams, n: float, dt: float, steps: int = 1,
                zero_tail: bool = False) -> 'OcpSolution':
        """Solution advanced by ``steps``; the tail repeats the last input (or zero)."""
        u_seq = self.u_seq.copy()
        x_pred = self.x_pred.copy()
        for _ in range(max(0, steps)):
            tail = np.zeros(INPUT_DIM) if zero_tail else u_seq[-1]
            u_seq = np.vstack([u_seq[1:], tail])
            x_pred = np.vstack([x_pred[1:], rk4_step(x_pred[-1], tail, n, body, dt)])
        return OcpSolution(u_seq=u_seq, x_pred=x_pred, cost=self.cost, kkt_residual=self.kkt_residual,
                           iterations=0, status=self.status, penalty_weight=self.penalty_weight)


# Cost terms

def _state_residual(x: np.ndarray, ref: np.ndarray, weights: OcpWeights) -> np.ndarray:
    dot = float(np.dot(x[QUAT_SLICE], ref[QUAT_SLICE]))
    return np.concatenate([
        _psd_sqrt(weights.Q_p) @ (x[0:3] - ref[0:3]),
        _psd_sqrt(weights.Q_v) @ (x[3:6] - ref[3:6]),
        [math.sqrt(weights.Q_q) * (1.0 - dot * dot)],
        _psd_sqrt(weights.Q_omega) @ (x[10:13] - ref[10:13]),
    ])


def stage_cost(x: StateLike, u, ref: StateLike, weights: OcpWeights) -> float:
    """
    Stage cost of one horizon step.

    The attitude term ``Q_q (1 - (q.q_ref)^2)^2`` is invariant to the sign of
    either quaternion.
    """
    x = _as_state(x)
    u = _as_input(u)
    residual = _state_residual(x, _as_state(ref), weights)
    return float(residual @ residual + u @ weights.R @ u)


def terminal_cost(x_n: StateLike, ref_n: StateLike, terminal_weights: OcpWeights) -> float:
    residual = _state_residual(_as_state(x_n), _as_state(ref_n), terminal_weights)
    return float(residual @ residual)


def build_follower_refs(leader_pred, offset: FormationOffset) -> np.ndarray:
    """
    Follower references from the leader's predicted states.

    Position is shifted by ``dp``, attitude composed as ``dq ⊗ q_leader``;
    velocity and rate follow the leader.

    Raises:
        ReferenceLengthError: If the prediction is empty or not (M, 13)
    """
    leader = np.asarray([_as_state(x) for x in leader_pred], dtype=float)
    if leader.ndim != 2 or leader.shape[0] == 0 or leader.shape[1] != STATE_DIM:
        raise ReferenceLengthError(f"Leader prediction must be a non-empty (M, {STATE_DIM}) array")

    refs = leader.copy()
    refs[:, 0:3] += np.asarray(offset.dp, dtype=float)
    refs[:, QUAT_SLICE] = quat_normalize(quat_multiply(np.asarray(offset.dq, dtype=float), leader[:, QUAT_SLICE]))
    return refs


def collision_residuals(positions: np.ndarray, obstacles: Sequence[Obstacle]) -> np.ndarray:
    """
    Separation residuals ``|p(n) - p_b(n)| - d_min``, shape (N+1, number of obstacles).

    The constraint holds where the residual is non-negative.
    """
    positions = np.asarray(positions, dtype=float)
    if not obstacles:
        return np.zeros((positions.shape[0], 0))
    columns = []
    for obstacle in obstacles:
        other = np.asarray(obstacle.positions, dtype=float)
        if other.shape != positions.shape:
            raise ReferenceLengthError(f"Obstacle '{obstacle.agent_id}' trajectory length mismatch")
        columns.append(np.linalg.norm(positions - other, axis=1) - obstacle.d_min)
    return np.stack(columns, axis=1)


def rollout(x0: np.ndarray, u_seq: np.ndarray, n: float, body: BodyParams, dt: float) -> np.ndarray:
    """States obtained by applying ``u_seq`` from ``x0``."""
    x_pred = np.zeros((len(u_seq) + 1, STATE_DIM))
    x_pred[0] = x0
    for k, u in enumerate(u_seq):
        x_pred[k + 1] = rk4_step(x_pred[k], u, n, body, dt)
    return x_pred


# Solver

class _Evaluation(NamedTuple):
    residual: np.ndarray
    cost: float
    penalty: float
    defects: np.ndarray
    node_jac: np.ndarray
    collision_jac: np.ndarray
    velocity_jac: np.ndarray


class GaussNewtonSqp:
    """
    Gauss-Newton SQP over direct multiple shooting.

    The node states ``s_0..s_N`` (``s_0 = x0``) and inputs are iterated
    jointly; each QP step closes the linearized defects. Accepted steps never
    increase the merit ``cost + penalty + nu * |defects|_1``.
    """

    def __init__(self, settings: Optional[SolverSettings] = None):
        self.settings = settings or SolverSettings()
        self.logger = logging.getLogger(f"{__name__}.{self.__class__.__name__}")

    def solve(self, problem: OcpProblem, warm_start: Optional[OcpSolution] = None) -> OcpSolution:
        """
        Solve the OCP.

        Args:
            problem: Validated problem definition
            warm_start: Previous solution already shifted to this instant

        Returns:
            OcpSolution that is dynamically and input feasible whatever its status
        """
        problem.validate()
        settings = self.settings
        N = problem.horizon
        lb, ub = problem.lower_bounds, problem.upper_bounds
        factors = self._factors(problem)

        if warm_start is not None and warm_start.u_seq.shape == (N, INPUT_DIM):
            u = np.clip(warm_start.u_seq, lb, ub)
            s = warm_start.x_pred.copy()
            s[0] = problem.x0
            rho = max(settings.rho_init, min(warm_start.penalty_weight or settings.rho_init, settings.rho_max))
        else:
            u = np.zeros((N, INPUT_DIM))
            s = rollout(problem.x0, u, problem.n, problem.body, problem.dt)
            rho = settings.rho_init

        merit_history: List[float] = []
        penalty_history: List[float] = []
        iterations = 0
        kkt = math.inf
        status = SolverStatus.MAX_ITER
        previous_violation = math.inf

        try:
            while True:
                evaluation = self._evaluate(problem, factors, s, u, rho)
                merit = self._merit(evaluation)
                merit_history.append(merit)
                penalty_history.append(rho)

                inner_converged = False
                while iterations < settings.max_iterations:
                    A, B = self._linearize(problem, s, u)
                    S, c = self._condense(A, B, evaluation.defects, N)
                    M, r_lin = self._condensed_model(problem, evaluation, S, c)
                    kkt = self._kkt(M, r_lin, u, lb, ub, evaluation)
                    if kkt < settings.kkt_tol:
                        inner_converged = True
                        break

                    du = self._qp_step(M, r_lin, u, lb, ub)
                    ds = (S @ du.ravel()) + c
                    accepted = self._line_search(problem, factors, s, u, du, ds, rho, merit, lb, ub)
                    iterations += 1
                    if accepted is None:
                        self.logger.debug(f"Line search stalled at iteration {iterations} (kkt={kkt:.3e})")
                        break
                    s, u, evaluation, merit = accepted
                    merit_history.append(merit)
                    penalty_history.append(rho)

                violation = self._max_violation(problem, s)
                if violation <= settings.collision_tol:
                    status = SolverStatus.CONVERGED if inner_converged else SolverStatus.MAX_ITER
                    break
                if rho >= settings.rho_max and violation >= previous_violation - 1e-9:
                    status = SolverStatus.INFEASIBLE
                    break
                if iterations >= settings.max_iterations:
                    status = SolverStatus.MAX_ITER
                    break
                previous_violation = min(previous_violation, violation)
                rho = min(2.0 * rho, settings.rho_max)
        except (np.linalg.LinAlgError, ValueError, FloatingPointError) as exc:
            self.logger.warning(f"Solver failed numerically: {exc}")
            status = SolverStatus.INFEASIBLE

        if not np.all(np.isfinite(u)):
            u = np.zeros((N, INPUT_DIM))
            status = SolverStatus.INFEASIBLE

        u = np.clip(u, lb, ub)
        x_pred = rollout(problem.x0, u, problem.n, problem.body, problem.dt)
        final = self._evaluate(problem, factors, x_pred, u, rho)
        violation = self._max_violation(problem, x_pred)

        return OcpSolution(
            u_seq=u,
            x_pred=x_pred,
            cost=final.cost,
            kkt_residual=float(kkt),
            iterations=iterations,
            status=status,
            penalty=final.penalty,
            penalty_weight=rho,
            max_violation=violation,
            merit_history=merit_history,
            penalty_history=penalty_history,
        )

    def objective(self, problem: OcpProblem, u_seq: np.ndarray, rho: Optional[float] = None) -> float:
        """Cost plus penalty of the rollout of ``u_seq``."""
        rho = self.settings.rho_init if rho is None else rho
        x_pred = rollout(problem.x0, u_seq, problem.n, problem.body, problem.dt)
        evaluation = self._evaluate(problem, self._factors(problem), x_pred, np.asarray(u_seq, float), rho)
        return evaluation.cost + evaluation.penalty

    def cost_gradient(self, problem: OcpProblem, u_seq: np.ndarray, rho: Optional[float] = None) -> np.ndarray:
        """Gradient of ``objective`` with respect to the input sequence, shape (N, 6)."""
        rho = self.settings.rho_init if rho is None else rho
        u = np.asarray(u_seq, dtype=float)
        x_pred = rollout(problem.x0, u, problem.n, problem.body, problem.dt)
        evaluation = self._evaluate(problem, self._factors(problem), x_pred, u, rho)
        A, B = self._linearize(problem, x_pred, u)
        S, c = self._condense(A, B, np.zeros((problem.horizon, STATE_DIM)), problem.horizon)
        M, r_lin = self._condensed_model(problem, evaluation, S, c)
        return (2.0 * M.T @ r_lin).reshape(problem.horizon, INPUT_DIM)

    # internals

    @staticmethod
    def _factors(problem: OcpProblem) -> Dict[str, np.ndarray]:
        N = problem.horizon
        stage, terminal = problem.weights, problem.terminal_weights

        def stacked(name):
            block = _psd_sqrt(np.asarray(getattr(stage, name), dtype=float))
            final = _psd_sqrt(np.asarray(getattr(terminal, name), dtype=float))
            return np.concatenate([np.repeat(block[None], N, axis=0), final[None]], axis=0)

        return {
            'Lp': stacked('Q_p'),
            'Lv': stacked('Q_v'),
            'Lw': stacked('Q_omega'),
            'sq': np.array([math.sqrt(stage.Q_q)] * N + [math.sqrt(terminal.Q_q)]),
            'LR': _psd_sqrt(np.asarray(stage.R, dtype=float)),
        }

    def _evaluate(self, problem: OcpProblem, factors, s: np.ndarray, u: np.ndarray, rho: float) -> _Evaluation:
        refs = problem.refs
        N = problem.horizon
        error = s - refs
        dot = np.einsum('ki,ki->k', s[:, QUAT_SLICE], refs[:, QUAT_SLICE])

        node_res = np.concatenate([
            np.einsum('kij,kj->ki', factors['Lp'], error[:, 0:3]),
            np.einsum('kij,kj->ki', factors['Lv'], error[:, 3:6]),
            (factors['sq'] * (1.0 - dot * dot))[:, None],
            np.einsum('kij,kj->ki', factors['Lw'], error[:, 10:13]),
        ], axis=1)

        node_jac = np.zeros((N + 1, NODE_RESIDUALS, STATE_DIM))
        node_jac[:, 0:3, 0:3] = factors['Lp']
        node_jac[:, 3:6, 3:6] = factors['Lv']
        node_jac[:, 6, QUAT_SLICE] = (-2.0 * factors['sq'] * dot)[:, None] * refs[:, QUAT_SLICE]
        node_jac[:, 7:10, 10:13] = factors['Lw']

        input_res = u @ factors['LR'].T

        sqrt_rho = math.sqrt(rho)
        if problem.obstacles:
            others = np.stack([np.asarray(o.positions, dtype=float)[1:] for o in problem.obstacles])
            d_min = np.array([o.d_min for o in problem.obstacles])[:, None]
            diff = s[None, 1:, 0:3] - others
            dist = np.linalg.norm(diff, axis=2)
            active = dist < d_min
            direction = np.where(dist[..., None] > 1e-9, diff / np.maximum(dist, 1e-9)[..., None],
                                 np.array([0.0, 1.0, 0.0]))
            collision_res = sqrt_rho * np.minimum(0.0, dist - d_min)
            collision_jac = sqrt_rho * direction * active[..., None]
        else:
            collision_res = np.zeros((0, N))
            collision_jac = np.zeros((0, N, 3))

        if problem.v_max is not None:
            speed = np.abs(s[1:, 3:6])
            excess = np.maximum(0.0, speed - problem.v_max)
            sqrt_w = math.sqrt(self.settings.velocity_weight)
            velocity_res = sqrt_w * excess
            velocity_jac = sqrt_w * np.sign(s[1:, 3:6]) * (excess > 0)
        else:
            velocity_res = np.zeros((0, 3))
            velocity_jac = np.zeros((0, 3))

        f_nom = rk4_step(s[:N], u, problem.n, problem.body, problem.dt)
        defects = f_nom - s[1:]

        residual = np.concatenate([node_res.ravel(), input_res.ravel(), collision_res.ravel(),
                                   velocity_res.ravel()])
        cost = float(np.sum(node_res ** 2) + np.sum(input_res ** 2))
        penalty = float(np.sum(collision_res ** 2) + np.sum(velocity_res ** 2))
        return _Evaluation(residual=residual, cost=cost, penalty=penalty, defects=defects,
                           node_jac=node_jac, collision_jac=collision_jac, velocity_jac=velocity_jac)

    def _merit(self, evaluation: _Evaluation) -> float:
        return evaluation.cost + evaluation.penalty + self.settings.defect_weight * float(
            np.sum(np.abs(evaluation.defects)))

    def _linearize(self, problem: OcpProblem, s: np.ndarray, u: np.ndarray):
        """Central-difference Jacobians of all shooting intervals in one batched call."""
        N = problem.horizon
        h = self.settings.fd_step
        width = STATE_DIM + INPUT_DIM
        z = np.concatenate([s[:N], u], axis=1)
        perturbation = np.eye(width) * h
        batch = np.concatenate([z[:, None, :] + perturbation[None], z[:, None, :] - perturbation[None]], axis=1)
        f = rk4_step(batch[..., :STATE_DIM], batch[..., STATE_DIM:], problem.n, problem.body, problem.dt)
        jac = ((f[:, :width] - f[:, width:]) / (2.0 * h)).transpose(0, 2, 1)
        return jac[:, :, :STATE_DIM], jac[:, :, STATE_DIM:]

    @staticmethod
    def _condense(A: np.ndarray, B: np.ndarray, defects: np.ndarray, N: int):
        """Node deviations as ``ds_k = S_k du + c_k`` with ``ds_0 = 0``."""
        S = np.zeros((N + 1, STATE_DIM, N * INPUT_DIM))
        c = np.zeros((N + 1, STATE_DIM))
        for k in range(N):
            S[k + 1] = A[k] @ S[k]
            S[k + 1][:, k * INPUT_DIM:(k + 1) * INPUT_DIM] += B[k]
            c[k + 1] = A[k] @ c[k] + defects[k]
        return S.reshape((N + 1) * STATE_DIM, N * INPUT_DIM), c.ravel()

    @staticmethod
    def _condensed_model(problem: OcpProblem, evaluation: _Evaluation, S_flat: np.ndarray, c_flat: np.ndarray):
        """Residual model ``r_lin + M du`` of the condensed subproblem."""
        N = problem.horizon
        width = N * INPUT_DIM
        S = S_flat.reshape(N + 1, STATE_DIM, width)
        c = c_flat.reshape(N + 1, STATE_DIM)
        jac = evaluation.node_jac

        blocks = [np.einsum('kij,kjl->kil', jac, S).reshape(-1, width)]
        offsets = [np.einsum('kij,kj->ki', jac, c).ravel()]

        # Input residuals depend on u only.
        LR = _psd_sqrt(np.asarray(problem.weights.R, dtype=float))
        blocks.append(np.kron(np.eye(N), LR))
        offsets.append(np.zeros(N * INPUT_DIM))

        if evaluation.collision_jac.shape[0]:
            col = evaluation.collision_jac
            blocks.append(np.einsum('bnj,njl->bnl', col, S[1:, 0:3, :]).reshape(-1, width))
            offsets.append(np.einsum('bnj,nj->bn', col, c[1:, 0:3]).ravel())
        if evaluation.velocity_jac.shape[0]:
            vel = evaluation.velocity_jac
            blocks.append((vel[..., None] * S[1:, 3:6, :]).reshape(-1, width))
            offsets.append((vel * c[1:, 3:6]).ravel())

        M = np.vstack(blocks)
        r_lin = evaluation.residual + np.concatenate(offsets)
        return M, r_lin

    def _kkt(self, M, r_lin, u, lb, ub, evaluation: _Evaluation) -> float:
        gradient = (2.0 * M.T @ r_lin).reshape(u.shape)
        projected = gradient.copy()
        at_lower = (u - lb <= 1e-9) & (gradient > 0)
        at_upper = (ub - u <= 1e-9) & (gradient < 0)
        projected[at_lower | at_upper] = 0.0
        scale = max(1.0, evaluation.cost + evaluation.penalty)
        stationarity = float(np.max(np.abs(projected))) / scale if projected.size else 0.0
        feasibility = float(np.max(np.abs(evaluation.defects))) if evaluation.defects.size else 0.0
        return max(stationarity, feasibility)

    def _qp_step(self, M, r_lin, u, lb, ub) -> np.ndarray:
        """Bounded least-squares step with variables of zero-width bounds eliminated."""
        width = M.shape[1]
        lower = (lb - u).ravel()
        upper = (ub - u).ravel()
        free = (ub - lb).ravel() > 1e-12
        du = np.zeros(width)
        if not np.any(free):
            return du.reshape(u.shape)

        regularization = math.sqrt(self.settings.regularization) * np.eye(int(free.sum()))
        A = np.vstack([M[:, free], regularization])
        b = np.concatenate([-r_lin, np.zeros(int(free.sum()))])
        lower_free = np.minimum(lower[free], 0.0)
        upper_free = np.maximum(upper[free], 0.0)
        # lsq_linear needs lb < ub; a variable sitting on both bounds stays put.
        pinned = upper_free - lower_free <= 1e-15
        upper_free[pinned] += 1e-15
        result = lsq_linear(A, b, bounds=(lower_free, upper_free), method='bvls', max_iter=10 * A.shape[1])
        du[free] = np.clip(result.x, lower_free, np.maximum(lower_free, upper[free]))
        return du.reshape(u.shape)

    def _line_search(self, problem, factors, s, u, du, ds, rho, merit, lb, ub):
        N = problem.horizon
        ds = ds.reshape(N + 1, STATE_DIM)
        alpha = 1.0
        for _ in range(self.settings.max_backtracks):
            u_new = np.clip(u + alpha * du, lb, ub)
            s_new = s + alpha * ds
            s_new[0] = problem.x0
            s_new[1:, QUAT_SLICE] = quat_normalize(s_new[1:, QUAT_SLICE])
            evaluation = self._evaluate(problem, factors, s_new, u_new, rho)
            candidate = self._merit(evaluation)
            if np.isfinite(candidate) and candidate <= merit:
                return s_new, u_new, evaluation, candidate
            alpha *= 0.5
        return None

    @staticmethod
    def _max_violation(problem: OcpProblem, s: np.ndarray) -> float:
        if not problem.obstacles:
            return 0.0
        residuals = collision_residuals(s[:, 0:3], problem.obstacles)[1:]
        return float(max(0.0, -residuals.min()))


_default_solver = GaussNewtonSqp()


def solve_ocp(problem: OcpProblem, warm_start: Optional[OcpSolution] = None,
              settings: Optional[SolverSettings] = None) -> OcpSolution:
    """Solve ``problem`` with the Gauss-Newton SQP (default settings unless given)."""
    solver = _default_solver if settings is None else GaussNewtonSqp(settings)
    return solver.solve(problem, warm_start)


# Receding-horizon agent

class TrajectorySnapshot(NamedTuple):
    """A predicted trajectory received from another agent."""
    agent_id: str
    stamp_ns: int
    dt: float
    states: np.ndarray


def align_trajectory(snapshot: TrajectorySnapshot, t_ns: int, horizon: int) -> np.ndarray:
    """
    Re-index a broadcast trajectory to start at ``t_ns``.

    The trajectory is shifted by the elapsed whole steps and padded by
    holding its final state.
    """
    states = np.asarray(snapshot.states, dtype=float)
    if states.ndim != 2 or states.shape[0] == 0:
        raise ReferenceLengthError(f"Empty trajectory from '{snapshot.agent_id}'")
    step_ns = snapshot.dt * 1e9
    shift = max(0, int(round((t_ns - snapshot.stamp_ns) / step_ns))) if step_ns > 0 else 0
    aligned = states[min(shift, len(states) - 1):]
    if len(aligned) < horizon + 1:
        aligned = np.vstack([aligned, np.repeat(aligned[-1:], horizon + 1 - len(aligned), axis=0)])
    return aligned[:horizon + 1].copy()


class MpcConfig(NamedTuple):
    """Per-agent controller configuration."""
    role: str = 'leader'
    offset: Optional[FormationOffset] = None
    weights: Optional[OcpWeights] = None
    terminal_factor: float = TERMINAL_FACTOR
    horizon: int = DEFAULT_HORIZON
    dt: float = DEFAULT_DT
    u_max: Optional[np.ndarray] = None
    v_max: Optional[np.ndarray] = None
    d_min: float = DEFAULT_D_MIN
    settings: SolverSettings = SolverSettings()

    @property
    def input_bounds(self) -> np.ndarray:
        """Per-axis force and torque bounds; the default thruster limits when unset."""
        if self.u_max is None:
            return np.array([DEFAULT_FORCE_MAX] * 3 + [DEFAULT_TORQUE_MAX] * 3)
        return np.asarray(self.u_max, dtype=float)


class MpcStepResult(NamedTuple):
    wrench: Wrench
    solution: OcpSolution
    refs: np.ndarray
    degraded: bool
    stale_neighbors: List[str]


class FormationMpc:
    """
    Receding-horizon controller of one agent.

    The leader holds the active waypoint; followers track the leader's
    broadcast prediction shifted by their formation offset. Predictions of
    all other agents become collision obstacles.
    """

    def __init__(self, agent_id: str, config: MpcConfig, body: BodyParams, n: float):
        if config.role not in ('leader', 'follower'):
            raise NmpcError(f"Unknown role '{config.role}'")
        if config.role == 'follower' and config.offset is None:
            raise NmpcError(f"Follower '{agent_id}' needs a formation offset")
        self.agent_id = agent_id
        self.config = config
        self.body = body
        self.n = n
        self.weights = (config.weights or OcpWeights.from_diagonal()).validate()
        self.solver = GaussNewtonSqp(config.settings)
        self.previous: Optional[OcpSolution] = None
        self.previous_t_ns: Optional[int] = None
        self.logger = logging.getLogger(f"{__name__}.{self.__class__.__name__}")

    @property
    def period_ns(self) -> int:
        return int(round(self.config.dt * 1e9))

    def mpc_step(self, state: StateLike, t_ns: int, leader_pred: Optional[TrajectorySnapshot] = None,
                 waypoint: Optional[StateLike] = None,
                 neighbor_preds: Optional[Dict[str, TrajectorySnapshot]] = None) -> MpcStepResult:
        """
        Compute the wrench to apply at ``t_ns`` and the solution to broadcast.

        Args:
            state: Current state estimate
            t_ns: Simulation time of the estimate
            leader_pred: Leader broadcast (followers only)
            waypoint: Hold reference (leader only)
            neighbor_preds: Snapshot of other agents' broadcasts
        """
        x0 = _as_state(state)
        N = self.config.horizon
        neighbor_preds = dict(neighbor_preds or {})
        degraded = False
        stale = []

        if self.config.role == 'leader':
            hold = _as_state(waypoint) if waypoint is not None else _rest_pose(x0)
            refs = np.repeat(hold[None], N + 1, axis=0)
        elif leader_pred is None:
            self.logger.warning(f"{self.agent_id}: no leader prediction yet, holding position")
            refs = np.repeat(_rest_pose(x0)[None], N + 1, axis=0)
            degraded = True
        else:
            if self._is_stale(leader_pred, t_ns):
                stale.append(leader_pred.agent_id)
            refs = build_follower_refs(align_trajectory(leader_pred, t_ns, N), self.config.offset)
            neighbor_preds.setdefault(leader_pred.agent_id, leader_pred)

        obstacles = []
        for agent_id, snapshot in sorted(neighbor_preds.items()):
            if agent_id == self.agent_id:
                continue
            if self._is_stale(snapshot, t_ns) and agent_id not in stale:
                stale.append(agent_id)
            positions = align_trajectory(snapshot, t_ns, N)[:, 0:3]
            obstacles.append(Obstacle(agent_id=agent_id, positions=positions, d_min=self.config.d_min))
        if stale:
            self.logger.warning(f"{self.agent_id}: stale predictions from {', '.join(stale)}, holding final states")

        problem = OcpProblem(
            x0=x0, refs=refs, weights=self.weights, body=self.body, n=self.n, horizon=N, dt=self.config.dt,
            u_max=self.config.input_bounds, v_max=self.config.v_max, obstacles=obstacles,
            terminal_weights=self.weights.scaled(self.config.terminal_factor),
        )

        warm = None
        if self.previous is not None and self.previous_t_ns is not None:
            steps = max(1, int(round((t_ns - self.previous_t_ns) / self.period_ns)))
            warm = self.previous.shifted(self.body, self.n, self.config.dt, steps)

        solution = self.solver.solve(problem, warm)
        if solution.status == SolverStatus.INFEASIBLE:
            degraded = True
            if warm is not None:
                self.logger.warning(f"{self.agent_id}: solver infeasible at t={t_ns}ns, reusing shifted plan")
                fallback = self.previous.shifted(self.body, self.n, self.config.dt,
                                                 max(1, int(round((t_ns - self.previous_t_ns) / self.period_ns))),
                                                 zero_tail=True)
                fallback.x_pred = rollout(x0, fallback.u_seq, self.n, self.body, self.config.dt)
                fallback.status = SolverStatus.INFEASIBLE
                solution = fallback
            else:
                self.logger.warning(f"{self.agent_id}: solver infeasible at t={t_ns}ns without a previous plan")

        self.previous = solution
        self.previous_t_ns = t_ns
        self.logger.debug(f"{self.agent_id}: t={t_ns}ns status={solution.status.value} "
                          f"iterations={solution.iterations} cost={solution.cost:.4g}")
        return MpcStepResult(wrench=solution.first_wrench, solution=solution, refs=refs,
                             degraded=degraded, stale_neighbors=stale)

    def _is_stale(self, snapshot: TrajectorySnapshot, t_ns: int) -> bool:
        return t_ns - snapshot.stamp_ns > STALE_PERIODS * self.period_ns


def _rest_pose(x: np.ndarray) -> np.ndarray:
    hold = np.asarray(x, dtype=float).copy()
    hold[3:6] = 0.0
    hold[10:13] = 0.0
    return hold
