"""
Relative orbital and rigid-body dynamics for spacecraft formation flying.

This module provides the Hill frame construction, Clohessy-Wiltshire
translational dynamics, quaternion attitude dynamics and the fixed-step
RK4 integrator used both by the plant simulation and by the NMPC
prediction model.

Conventions used throughout:
    - Quaternions are scalar-first ``[w, x, y, z]`` and composed with the
      Hamilton product.
    - ``q_hb`` rotates body-frame vectors into the Hill frame.
    - The 13-component state vector is ``[p_h, v_h, q_hb, omega_b]`` and the
      6-component input vector is ``[force_b, torque_b]``.

The array kernels (``rigid_body_rhs``, ``rk4_step``) accept arrays with any
number of leading batch dimensions.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence, Tuple

import numpy as np


logger = logging.getLogger(__name__)

MU_EARTH = 3.986004418e14
STATE_DIM = 13
INPUT_DIM = 6
QUAT_NORM_TOL = 1e-6
IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


class DynamicsError(Exception):
    """Base exception for dynamics errors."""
    pass


class DegenerateOrbitError(DynamicsError):
    """Raised when a Hill frame cannot be built from a radial or zero state."""
    pass


class DomainError(DynamicsError):
    """Raised when a physical parameter is outside its valid domain."""
    pass


class SingularInertiaError(DynamicsError):
    """Raised when an inertia matrix is not invertible."""
    pass


class InertialState(NamedTuple):
    """Position and velocity of a spacecraft in the ECI frame."""
    p: np.ndarray
    v: np.ndarray


class HillFrame(NamedTuple):
    """Rotating Hill frame axes expressed in ECI, centered at ``origin``."""
    x_hat: np.ndarray
    y_hat: np.ndarray
    z_hat: np.ndarray
    origin: np.ndarray

    def dcm(self) -> np.ndarray:
        """Matrix whose rows are the Hill axes (maps ECI vectors into Hill)."""
        return np.vstack([self.x_hat, self.y_hat, self.z_hat])

    def to_hill(self, position_eci: np.ndarray) -> np.ndarray:
        return self.dcm() @ (np.asarray(position_eci, dtype=float) - self.origin)

    def to_inertial(self, position_hill: np.ndarray) -> np.ndarray:
        return self.origin + self.dcm().T @ np.asarray(position_hill, dtype=float)


class RigidBodyState(NamedTuple):
    """13-component spacecraft state in the leader's Hill frame."""
    p_h: np.ndarray
    v_h: np.ndarray
    q_hb: np.ndarray
    omega_b: np.ndarray

    @classmethod
    def at_rest(cls, position: Sequence[float] = (0.0, 0.0, 0.0),
                q_hb: Optional[Sequence[float]] = None) -> 'RigidBodyState':
        """Build a state with zero velocity and rate at the given pose."""
        quat = IDENTITY_QUAT if q_hb is None else quat_normalize(np.asarray(q_hb, dtype=float))
        return cls(
            p_h=np.asarray(position, dtype=float).copy(),
            v_h=np.zeros(3),
            q_hb=np.array(quat, dtype=float),
            omega_b=np.zeros(3),
        )

    @classmethod
    def from_vector(cls, x: np.ndarray) -> 'RigidBodyState':
        x = np.asarray(x, dtype=float)
        if x.shape != (STATE_DIM,):
            raise DomainError(f"State vector must have {STATE_DIM} components, got shape {x.shape}")
        return cls(p_h=x[0:3].copy(), v_h=x[3:6].copy(), q_hb=x[6:10].copy(), omega_b=x[10:13].copy())

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.p_h, self.v_h, self.q_hb, self.omega_b]).astype(float)


class Wrench(NamedTuple):
    """Body-frame force [N] and torque [N m] command."""
    force_b: np.ndarray
    torque_b: np.ndarray

    @classmethod
    def zero(cls) -> 'Wrench':
        return cls(force_b=np.zeros(3), torque_b=np.zeros(3))

    @classmethod
    def from_vector(cls, u: np.ndarray) -> 'Wrench':
        u = np.asarray(u, dtype=float)
        if u.shape != (INPUT_DIM,):
            raise DomainError(f"Wrench vector must have {INPUT_DIM} components, got shape {u.shape}")
        return cls(force_b=u[0:3].copy(), torque_b=u[3:6].copy())

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.force_b, self.torque_b]).astype(float)


class OrbitalElements(NamedTuple):
    """Classical orbital elements of the leader; angles in radians."""
    a: float
    e: float
    i: float
    raan: float
    argp: float

    @classmethod
    def from_degrees(cls, a: float, e: float, i: float, raan: float, argp: float) -> 'OrbitalElements':
        return cls(a=a, e=e, i=math.radians(i), raan=math.radians(raan), argp=math.radians(argp))


class OrbitParams(NamedTuple):
    """Leader orbit parameters; ``n`` is derived from ``mu`` and ``a``."""
    mu: float
    a: float
    n: float

    @classmethod
    def circular(cls, a: float, mu: float = MU_EARTH) -> 'OrbitParams':
        return cls(mu=mu, a=a, n=mean_motion(mu, a))

    @classmethod
    def from_elements(cls, elements: OrbitalElements, mu: float = MU_EARTH) -> 'OrbitParams':
        # The relative model only needs n; eccentricity is treated as zero.
        return cls.circular(elements.a, mu)


@dataclass(frozen=True)
class BodyParams:
    """Rigid-body mass [kg] and inertia matrix [kg m^2]."""
    mass: float
    inertia: np.ndarray
    inertia_inv: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.mass <= 0:
            raise DomainError(f"Mass must be positive, got {self.mass}")

        inertia = np.asarray(self.inertia, dtype=float)
        if inertia.shape != (3, 3):
            raise DomainError(f"Inertia must be 3x3, got shape {inertia.shape}")
        if not np.allclose(inertia, inertia.T, rtol=0.0, atol=1e-12):
            raise DomainError("Inertia matrix must be symmetric")
        if np.linalg.eigvalsh(inertia).min() <= 0.0:
            raise SingularInertiaError("Inertia matrix must be positive definite")

        object.__setattr__(self, 'inertia', inertia)
        object.__setattr__(self, 'inertia_inv', np.linalg.inv(inertia))

    @classmethod
    def symmetric(cls, mass: float, moment: float) -> 'BodyParams':
        return cls(mass=mass, inertia=np.eye(3) * moment)


# Quaternion algebra

def quat_multiply(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Hamilton product ``p ⊗ q`` of scalar-first quaternions (batched)."""
    pw, px, py, pz = np.moveaxis(np.asarray(p, dtype=float), -1, 0)
    qw, qx, qy, qz = np.moveaxis(np.asarray(q, dtype=float), -1, 0)
    return np.stack([
        pw * qw - px * qx - py * qy - pz * qz,
        pw * qx + px * qw + py * qz - pz * qy,
        pw * qy - px * qz + py * qw + pz * qx,
        pw * qz + px * qy - py * qx + pz * qw,
    ], axis=-1)


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm == 0.0):
        raise DomainError("Cannot normalize a zero quaternion")
    return q / norm


def quat_to_dcm(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of ``q``; ``q`` and ``-q`` give the same matrix."""
    w, x, y, z = np.moveaxis(np.asarray(q, dtype=float), -1, 0)
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=-1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=-1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=-1),
    ], axis=-2)


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate ``v`` by unit quaternion ``q`` (batched), i.e. ``R(q) v``."""
    q = np.asarray(q, dtype=float)
    v = np.asarray(v, dtype=float)
    w = q[..., 0:1]
    u = q[..., 1:4]
    t = 2.0 * np.cross(u, v)
    return v + w * t + np.cross(u, t)


def quat_from_axis_angle(axis: Sequence[float], angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    norm = np.linalg.norm(axis)
    if norm == 0.0:
        raise DomainError("Rotation axis must be non-zero")
    half = 0.5 * angle
    return np.concatenate([[math.cos(half)], math.sin(half) * axis / norm])


def quat_from_yaw(yaw: float) -> np.ndarray:
    return quat_from_axis_angle((0.0, 0.0, 1.0), yaw)


def yaw_from_quat(q: np.ndarray) -> float:
    w, x, y, z = np.asarray(q, dtype=float)
    return math.atan2(2.0 * (w * z + x * y), 1.0 - 2.0 * (y * y + z * z))


def attitude_error_angle(q: np.ndarray, q_ref: np.ndarray) -> float:
    """Rotation angle [rad] between two attitudes, insensitive to quaternion sign."""
    dot = abs(float(np.dot(quat_normalize(q), quat_normalize(q_ref))))
    return 2.0 * math.acos(min(1.0, dot))


# Frames and orbit

def build_hill_frame(state: InertialState, tol: float = 1e-12) -> HillFrame:
    """
    Build the Hill frame centered on a spacecraft from its inertial state.

    Args:
        state: Inertial position [m] and velocity [m/s] of the frame origin
        tol: Relative tolerance on ``|p x v|`` below which the orbit is
            considered radial

    Returns:
        HillFrame with x radial, z along the orbital angular momentum and
        y completing the right-handed triad

    Raises:
        DegenerateOrbitError: If the position is zero or the trajectory is radial
    """
    p = np.asarray(state.p, dtype=float)
    v = np.asarray(state.v, dtype=float)

    p_norm = np.linalg.norm(p)
    if p_norm == 0.0:
        raise DegenerateOrbitError("Position must be non-zero to build a Hill frame")

    h = np.cross(p, v)
    h_norm = np.linalg.norm(h)
    if h_norm <= tol * max(p_norm * np.linalg.norm(v), np.finfo(float).tiny):
        raise DegenerateOrbitError("Angular momentum vanishes (radial trajectory)")

    x_hat = p / p_norm
    z_hat = h / h_norm
    y_hat = np.cross(z_hat, x_hat)
    return HillFrame(x_hat=x_hat, y_hat=y_hat, z_hat=z_hat, origin=p.copy())


def mean_motion(mu: float, a: float) -> float:
    """Mean motion sqrt(mu / a^3) [rad/s]."""
    if mu <= 0 or a <= 0:
        raise DomainError(f"mean_motion requires mu > 0 and a > 0, got mu={mu}, a={a}")
    return math.sqrt(mu / a ** 3)


def elements_to_inertial(elements: OrbitalElements, mu: float = MU_EARTH,
                         true_anomaly: float = 0.0) -> InertialState:
    """
    Convert classical orbital elements to an ECI position and velocity.

    Args:
        elements: Semi-major axis [m], eccentricity and angles [rad]
        mu: Gravitational parameter [m^3/s^2]
        true_anomaly: True anomaly [rad] of the returned state

    Returns:
        InertialState of the spacecraft

    Raises:
        DomainError: For non-elliptic or non-positive inputs
    """
    if elements.a <= 0 or mu <= 0:
        raise DomainError("Semi-major axis and mu must be positive")
    if not 0.0 <= elements.e < 1.0:
        raise DomainError(f"Eccentricity must be in [0, 1), got {elements.e}")

    semi_latus = elements.a * (1.0 - elements.e ** 2)
    radius = semi_latus / (1.0 + elements.e * math.cos(true_anomaly))
    speed = math.sqrt(mu / semi_latus)

    r_pf = radius * np.array([math.cos(true_anomaly), math.sin(true_anomaly), 0.0])
    v_pf = speed * np.array([-math.sin(true_anomaly), elements.e + math.cos(true_anomaly), 0.0])

    rotation = _rot_z(elements.raan) @ _rot_x(elements.i) @ _rot_z(elements.argp)
    return InertialState(p=rotation @ r_pf, v=rotation @ v_pf)


def _rot_x(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _rot_z(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


# Continuous dynamics

def cw_accel(state: RigidBodyState, wrench: Wrench, n: float, mass: float) -> np.ndarray:
    """
    Clohessy-Wiltshire acceleration in the Hill frame.

    The body-frame force is rotated into the Hill frame with ``q_hb``
    before it enters the equations.

    Args:
        state: Relative state of the spacecraft
        wrench: Body-frame force and torque command
        n: Mean motion of the leader orbit [rad/s]
        mass: Spacecraft mass [kg]

    Returns:
        Acceleration vector [m/s^2] in the Hill frame
    """
    if mass <= 0:
        raise DomainError(f"Mass must be positive, got {mass}")
    force_h = quat_rotate(state.q_hb, wrench.force_b)
    return _cw_accel_array(np.asarray(state.p_h, dtype=float), np.asarray(state.v_h, dtype=float),
                           force_h, n, mass)


def _cw_accel_array(p, v, force_h, n, mass):
    return np.stack([
        2.0 * n * v[..., 1] + 3.0 * n * n * p[..., 0],
        -2.0 * n * v[..., 0],
        -n * n * p[..., 2],
    ], axis=-1) + force_h / mass


def attitude_deriv(q_hb: np.ndarray, omega_b: np.ndarray, torque_b: np.ndarray,
                   inertia: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Quaternion kinematics and Euler rotational dynamics.

    Args:
        q_hb: Unit attitude quaternion (scalar-first)
        omega_b: Body angular rate [rad/s]
        torque_b: Body torque [N m]
        inertia: 3x3 inertia matrix [kg m^2]

    Returns:
        Tuple of (quaternion rate, angular acceleration)

    Raises:
        DomainError: If the quaternion is not unit-norm
        SingularInertiaError: If the inertia matrix is not invertible
    """
    q_hb = np.asarray(q_hb, dtype=float)
    if abs(np.linalg.norm(q_hb) - 1.0) > QUAT_NORM_TOL:
        raise DomainError("Attitude quaternion must be unit-norm")

    inertia = np.asarray(inertia, dtype=float)
    try:
        inertia_inv = np.linalg.inv(inertia)
    except np.linalg.LinAlgError as exc:
        raise SingularInertiaError("Inertia matrix is singular") from exc
    if not np.all(np.isfinite(inertia_inv)) or np.linalg.cond(inertia) > 1.0 / np.finfo(float).eps:
        raise SingularInertiaError("Inertia matrix is singular")

    return _attitude_deriv_array(q_hb, np.asarray(omega_b, dtype=float),
                                 np.asarray(torque_b, dtype=float), inertia, inertia_inv)


def _attitude_deriv_array(q, omega, torque, inertia, inertia_inv):
    q_omega = np.concatenate([np.zeros(omega.shape[:-1] + (1,)), omega], axis=-1)
    q_dot = 0.5 * quat_multiply(q, q_omega)
    j_omega = omega @ inertia.T
    omega_dot = (torque - np.cross(omega, j_omega)) @ inertia_inv.T
    return q_dot, omega_dot


def rigid_body_rhs(x: np.ndarray, u: np.ndarray, n: float, body: BodyParams) -> np.ndarray:
    """Time derivative of the 13-state under input ``u`` (batched over leading axes)."""
    p, v, q, omega = x[..., 0:3], x[..., 3:6], x[..., 6:10], x[..., 10:13]
    force_h = quat_rotate(q, u[..., 0:3])
    accel = _cw_accel_array(p, v, force_h, n, body.mass)
    q_dot, omega_dot = _attitude_deriv_array(q, omega, u[..., 3:6], body.inertia, body.inertia_inv)
    return np.concatenate([v, accel, q_dot, omega_dot], axis=-1)


def rk4_step(x: np.ndarray, u: np.ndarray, n: float, body: BodyParams, dt: float) -> np.ndarray:
    """One RK4 step of the 13-state array with zero-order-hold input; renormalizes ``q``."""
    k1 = rigid_body_rhs(x, u, n, body)
    k2 = rigid_body_rhs(x + 0.5 * dt * k1, u, n, body)
    k3 = rigid_body_rhs(x + 0.5 * dt * k2, u, n, body)
    k4 = rigid_body_rhs(x + dt * k3, u, n, body)
    x_next = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    q = x_next[..., 6:10]
    x_next[..., 6:10] = q / np.linalg.norm(q, axis=-1, keepdims=True)
    return x_next


def step_rk4(state: RigidBodyState, wrench: Wrench, orbit: OrbitParams, body: BodyParams,
             dt: float) -> RigidBodyState:
    """
    Advance a spacecraft state by one classical RK4 step.

    Args:
        state: State at the start of the step
        wrench: Body wrench held constant over the step
        orbit: Leader orbit parameters (only ``n`` is used)
        body: Mass and inertia
        dt: Step length [s]

    Returns:
        State after ``dt`` with a unit-norm quaternion
    """
    if dt <= 0:
        raise DomainError(f"Time step must be positive, got {dt}")
    if abs(np.linalg.norm(state.q_hb) - 1.0) > QUAT_NORM_TOL:
        raise DomainError("Attitude quaternion must be unit-norm")
    x_next = rk4_step(state.to_vector(), wrench.to_vector(), orbit.n, body, dt)
    return RigidBodyState.from_vector(x_next)


def cw_stm(n: float, dt: float) -> np.ndarray:
    """
    Closed-form 6x6 state transition matrix of the unforced CW equations.

    Propagates ``(x, y, z, vx, vy, vz)`` over ``dt`` seconds; used as an
    independent oracle for the integrator.
    """
    if n <= 0:
        raise DomainError(f"Mean motion must be positive, got {n}")

    nt = n * dt
    s = math.sin(nt)
    c = math.cos(nt)

    phi_rr = np.array([
        [4.0 - 3.0 * c, 0.0, 0.0],
        [6.0 * (s - nt), 1.0, 0.0],
        [0.0, 0.0, c],
    ])
    phi_rv = np.array([
        [s / n, 2.0 * (1.0 - c) / n, 0.0],
        [-2.0 * (1.0 - c) / n, (4.0 * s - 3.0 * nt) / n, 0.0],
        [0.0, 0.0, s / n],
    ])
    phi_vr = np.array([
        [3.0 * n * s, 0.0, 0.0],
        [6.0 * n * (c - 1.0), 0.0, 0.0],
        [0.0, 0.0, -n * s],
    ])
    phi_vv = np.array([
        [c, 2.0 * s, 0.0],
        [-2.0 * s, 4.0 * c - 3.0, 0.0],
        [0.0, 0.0, c],
    ])
    return np.block([[phi_rr, phi_rv], [phi_vr, phi_vv]])
