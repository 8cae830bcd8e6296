"""
Plant-side simulation of a spacecraft formation.

This module provides the thruster layouts and wrench allocation, PWM
quantization with a minimum on-time, the sub-stepped plant integration,
the leader waypoint schedule, scenario configuration loading and the
lockstep simulator that exchanges states and commands with the NMPC agents
over the bridge and writes the run log.
"""

import json
import logging
import math
import threading
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import yaml
from scipy.optimize import lsq_linear

from .bridge import (
    BridgeClient,
    BridgeEndpointConfig,
    ClientRole,
    Direction,
    ReceivedMessage,
    TopicRegistration,
)
from .dynamics import (
    BodyParams,
    DynamicsError,
    INPUT_DIM,
    MU_EARTH,
    OrbitParams,
    OrbitalElements,
    RigidBodyState,
    Wrench,
    build_hill_frame,
    elements_to_inertial,
    quat_from_yaw,
    quat_multiply,
    quat_normalize,
    rk4_step,
)
from .msgs import SchemaRegistry
from .nmpc import FormationOffset, MpcConfig, OcpWeights, SolverSettings


logger = logging.getLogger(__name__)

DEFAULT_ARM_M = 0.17
DEFAULT_NOMINAL_THRUST = 1.5
DEFAULT_MIN_ON_S = 0.001
DEFAULT_PLANT_STEP_S = 0.02
ALLOCATION_REGULARIZATION = 1e-6
ALLOCATION_TOL = 1e-6
STARTUP_REPUBLISH_S = 0.5

SC_STATES_TOPIC = 'sc_states'
THR_ON_TIME_TOPIC = 'thr_on_time'
CMD_FORCE_TOPIC = 'cmd_force'
CMD_TORQUE_TOPIC = 'cmd_torque'
PREDICTION_TOPIC = 'predicted_trajectory'


class SimulationError(Exception):
    """Base exception for simulation errors."""
    pass


class ScenarioConfigError(SimulationError):
    """Raised when a scenario file or configuration is invalid."""

    def __init__(self, message: str, errors: Optional[Dict[str, Any]] = None):
        self.errors = errors or {}
        super().__init__(message)


class BridgeLostError(SimulationError):
    """Raised when the bridge link stays Lost beyond the grace period."""
    pass


class AllocationWarning(UserWarning):
    """Commanded wrench is not achievable by the thruster layout."""
    pass


def _setting(key: str, default):
    try:
        from django.conf import settings
        if settings.configured:
            return getattr(settings, 'FORMATION', {}).get(key, default)
    except ImportError:
        pass
    return default


# Thrusters and allocation

@dataclass(frozen=True)
class ThrusterLayout:
    """Body-frame thruster positions [m], unit directions and max thrust [N]."""
    name: str
    positions: np.ndarray
    directions: np.ndarray
    max_thrust: np.ndarray

    def __post_init__(self):
        positions = np.asarray(self.positions, dtype=float)
        directions = np.asarray(self.directions, dtype=float)
        max_thrust = np.broadcast_to(np.asarray(self.max_thrust, dtype=float), (len(positions),)).copy()
        if positions.ndim != 2 or positions.shape[1] != 3 or directions.shape != positions.shape:
            raise ScenarioConfigError(f"Layout '{self.name}': positions and directions must be (k, 3)")
        if np.any(np.abs(np.linalg.norm(directions, axis=1) - 1.0) > 1e-9):
            raise ScenarioConfigError(f"Layout '{self.name}': thrust directions must be unit vectors")
        if np.any(max_thrust <= 0):
            raise ScenarioConfigError(f"Layout '{self.name}': max thrust must be positive")
        object.__setattr__(self, 'positions', positions)
        object.__setattr__(self, 'directions', directions)
        object.__setattr__(self, 'max_thrust', max_thrust)

    @property
    def count(self) -> int:
        return len(self.positions)

    @property
    def wrench_matrix(self) -> np.ndarray:
        """6 x k matrix mapping thrust levels to the body wrench."""
        torques = np.cross(self.positions, self.directions)
        return np.vstack([self.directions.T, torques.T])

    @property
    def rank(self) -> int:
        return int(np.linalg.matrix_rank(self.wrench_matrix))

    @classmethod
    def cube12(cls, arm: float = DEFAULT_ARM_M, max_thrust: float = DEFAULT_NOMINAL_THRUST) -> 'ThrusterLayout':
        """
        Twelve thrusters in opposing pairs along each body axis.

        x-thrusters sit at +-arm along y, y-thrusters at +-arm along z and
        z-thrusters at +-arm along x, so each pair also spans one torque axis.
        """
        positions, directions = [], []
        for axis, lever in ((0, 1), (1, 2), (2, 0)):
            for sign in (1.0, -1.0):
                for side in (1.0, -1.0):
                    position = np.zeros(3)
                    position[lever] = side * arm
                    direction = np.zeros(3)
                    direction[axis] = sign
                    positions.append(position)
                    directions.append(direction)
        return cls(name='cube12', positions=np.array(positions), directions=np.array(directions),
                   max_thrust=np.full(12, max_thrust))

    @classmethod
    def planar8(cls, arm: float = DEFAULT_ARM_M, max_thrust: float = DEFAULT_NOMINAL_THRUST) -> 'ThrusterLayout':
        """Eight in-plane thrusters spanning F_x, F_y and tau_z."""
        positions, directions = [], []
        for axis, lever in ((0, 1), (1, 0)):
            for sign in (1.0, -1.0):
                for side in (1.0, -1.0):
                    position = np.zeros(3)
                    position[lever] = side * arm
                    direction = np.zeros(3)
                    direction[axis] = sign
                    positions.append(position)
                    directions.append(direction)
        return cls(name='planar8', positions=np.array(positions), directions=np.array(directions),
                   max_thrust=np.full(8, max_thrust))

    @classmethod
    def by_name(cls, name: str, arm: float = DEFAULT_ARM_M,
                max_thrust: float = DEFAULT_NOMINAL_THRUST) -> 'ThrusterLayout':
        builders = {'cube12': cls.cube12, 'planar8': cls.planar8}
        if name not in builders:
            raise ScenarioConfigError(f"Unknown thruster layout '{name}'. Available: {', '.join(builders)}")
        return builders[name](arm=arm, max_thrust=max_thrust)


class AllocationResult(NamedTuple):
    thrust: np.ndarray
    achieved: Wrench
    residual_norm: float
    saturated: bool
    out_of_range: bool


def allocate(wrench: Wrench, layout: ThrusterLayout) -> AllocationResult:
    """
    Map a body wrench to per-thruster thrust levels.

    Solves ``min |B t - w|^2`` subject to ``0 <= t <= t_max`` with a tiny
    Tikhonov term so the solution is unique (zero wrench gives all-zero
    thrust). Unachievable commands are flagged, never raised.

    Args:
        wrench: Commanded body force and torque
        layout: Thruster layout providing ``B`` and ``t_max``

    Returns:
        AllocationResult with the thrust vector and the wrench it produces
    """
    command = wrench.to_vector() if isinstance(wrench, Wrench) else np.asarray(wrench, dtype=float)
    B = layout.wrench_matrix
    k = layout.count

    if not np.any(command):
        thrust = np.zeros(k)
    else:
        A = np.vstack([B, ALLOCATION_REGULARIZATION * np.eye(k)])
        b = np.concatenate([command, np.zeros(k)])
        result = lsq_linear(A, b, bounds=(np.zeros(k), layout.max_thrust), method='bvls', tol=1e-14,
                            max_iter=10 * k)
        thrust = np.clip(result.x, 0.0, layout.max_thrust)

    achieved = B @ thrust
    residual = float(np.linalg.norm(achieved - command))
    out_of_range = False
    saturated = False
    if residual > ALLOCATION_TOL:
        projection = B @ np.linalg.lstsq(B, command, rcond=None)[0]
        out_of_range = bool(np.linalg.norm(command - projection) > ALLOCATION_TOL)
        saturated = not out_of_range
        if out_of_range:
            message = (f"Wrench {np.round(command, 4).tolist()} has components outside the range of "
                       f"layout '{layout.name}' (residual {residual:.3g})")
            logger.warning(message)
            warnings.warn(message, AllocationWarning, stacklevel=2)
        else:
            logger.debug(f"Wrench saturated on layout '{layout.name}' (residual {residual:.3g})")

    return AllocationResult(thrust=thrust, achieved=Wrench.from_vector(achieved), residual_norm=residual,
                            saturated=saturated, out_of_range=out_of_range)


class PwmSchedule(NamedTuple):
    """Per-thruster on-times [s] measured from the start of a PWM window."""
    on_times: np.ndarray
    window: float
    nominal: float = DEFAULT_NOMINAL_THRUST

    @classmethod
    def empty(cls, count: int, window: float, nominal: float = DEFAULT_NOMINAL_THRUST) -> 'PwmSchedule':
        return cls(on_times=np.zeros(count), window=window, nominal=nominal)

    @property
    def mean_thrust(self) -> np.ndarray:
        return self.nominal * self.on_times / self.window


def pwm_quantize(thrust: Sequence[float], window: float, min_on: float = DEFAULT_MIN_ON_S,
                 nominal: float = DEFAULT_NOMINAL_THRUST) -> PwmSchedule:
    """
    Convert thrust levels into PWM on-times.

    The duty cycle is ``thrust / nominal`` clamped to [0, 1]. On-times below
    ``min_on`` are rounded to 0 under ``min_on / 2`` and to ``min_on`` above.

    Raises:
        SimulationError: If the window is not longer than ``min_on``
    """
    if window <= min_on or min_on < 0 or nominal <= 0:
        raise SimulationError(f"Invalid PWM parameters: window={window}, min_on={min_on}, nominal={nominal}")

    on_times = np.clip(np.asarray(thrust, dtype=float) / nominal, 0.0, 1.0) * window
    short = (on_times > 0.0) & (on_times < min_on)
    on_times[short & (on_times < 0.5 * min_on)] = 0.0
    on_times[short & (on_times >= 0.5 * min_on)] = min_on
    return PwmSchedule(on_times=on_times, window=window, nominal=nominal)


def plant_step(x: np.ndarray, schedule: PwmSchedule, layout: ThrusterLayout, n: float, body: BodyParams,
               dt: float, substep: float = DEFAULT_PLANT_STEP_S, offset: float = 0.0) -> np.ndarray:
    """
    Integrate one agent over ``dt`` seconds of a PWM window.

    Thruster ``i`` fires at its nominal level during ``[0, on_times[i])`` of
    the window. The interval is split at the plant sub-step grid and at every
    thruster-off instant, so each RK4 step sees a constant wrench.

    Args:
        x: 13-component state at ``offset`` seconds into the window
        schedule: PWM schedule of the window
        layout: Thruster layout
        n: Mean motion [rad/s]
        body: Mass and inertia
        dt: Integration span [s]; ``offset + dt`` must not exceed the window
        substep: Plant integration step [s]
        offset: Time since the window start [s]

    Returns:
        State at ``offset + dt``
    """
    if dt <= 0 or offset < 0 or offset + dt > schedule.window + 1e-9:
        raise SimulationError(f"Plant step [{offset}, {offset + dt}] outside the PWM window {schedule.window}")

    end = offset + dt
    grid = offset + substep * np.arange(1, int(math.ceil(dt / substep - 1e-9)))
    events = schedule.on_times[(schedule.on_times > offset + 1e-12) & (schedule.on_times < end - 1e-12)]
    boundaries = np.unique(np.concatenate([grid, events, [end]]))

    B = layout.wrench_matrix
    state = np.asarray(x, dtype=float).copy()
    start = offset
    for stop in boundaries:
        if stop - start <= 1e-12:
            continue
        active = schedule.on_times >= stop - 1e-12
        wrench = B @ np.where(active, schedule.nominal, 0.0)
        state = rk4_step(state, wrench, n, body, stop - start)
        start = stop
    return state


# Leader waypoints

class WaypointPlan(NamedTuple):
    """Ordered poses the leader holds for ``dwell_s`` seconds each."""
    positions: np.ndarray
    attitudes: np.ndarray
    dwell_s: float = 20.0
    cyclic: bool = True

    @classmethod
    def from_poses(cls, poses: Sequence[Tuple[Sequence[float], float]], dwell_s: float = 20.0,
                   cyclic: bool = True) -> 'WaypointPlan':
        """Build a plan from ``(position, yaw)`` pairs."""
        positions = np.array([pose[0] for pose in poses], dtype=float).reshape(-1, 3)
        attitudes = np.array([quat_from_yaw(pose[1]) for pose in poses], dtype=float).reshape(-1, 4)
        return cls(positions=positions, attitudes=attitudes, dwell_s=dwell_s, cyclic=cyclic).validate()

    def validate(self) -> 'WaypointPlan':
        if len(self.positions) == 0 or len(self.positions) != len(self.attitudes):
            raise ScenarioConfigError("Waypoint plan must hold at least one pose")
        if self.dwell_s <= 0:
            raise ScenarioConfigError(f"Waypoint dwell must be positive, got {self.dwell_s}")
        if np.any(np.abs(np.linalg.norm(self.attitudes, axis=1) - 1.0) > 1e-9):
            raise ScenarioConfigError("Waypoint attitudes must be unit quaternions")
        return self

    @property
    def period_s(self) -> float:
        return self.dwell_s * len(self.positions)


def waypoint_reference(plan: WaypointPlan, sim_time_s: float) -> RigidBodyState:
    """Active waypoint pose at ``sim_time_s`` with zero velocity and rate."""
    index = int(math.floor(max(0.0, sim_time_s) / plan.dwell_s + 1e-9))
    if plan.cyclic:
        index %= len(plan.positions)
    else:
        index = min(index, len(plan.positions) - 1)
    return RigidBodyState.at_rest(plan.positions[index], plan.attitudes[index])


# Scenario configuration

@dataclass
class AgentConfig:
    """One agent; leaders track waypoints, followers hold an offset from their leader."""
    namespace: str
    role: str
    initial_state: RigidBodyState
    offset: Optional[FormationOffset] = None
    leader: Optional[str] = None
    waypoints: Optional[WaypointPlan] = None


@dataclass
class ScenarioConfig:
    """Everything the simulator and the agents need to run one scenario."""
    name: str
    orbit: OrbitalElements
    body: BodyParams
    layout: ThrusterLayout
    agents: List[AgentConfig]
    waypoints: WaypointPlan
    mu: float = MU_EARTH
    nominal_thrust: float = DEFAULT_NOMINAL_THRUST
    min_on_s: float = DEFAULT_MIN_ON_S
    pwm_hz: float = 10.0
    control_hz: float = 5.0
    plant_step_s: float = DEFAULT_PLANT_STEP_S
    horizon: int = 30
    weights: OcpWeights = field(default_factory=OcpWeights.from_diagonal)
    terminal_factor: float = 20.0
    force_max: float = 3.0
    torque_max: float = 0.51
    v_max: Optional[np.ndarray] = None
    d_min: float = 0.4
    solver: SolverSettings = field(default_factory=SolverSettings)
    sim_speed: float = 1.0
    duration_s: float = 120.0

    @property
    def control_period_s(self) -> float:
        return 1.0 / self.control_hz

    @property
    def control_period_ns(self) -> int:
        return int(round(1e9 / self.control_hz))

    @property
    def pwm_window_s(self) -> float:
        return 1.0 / self.pwm_hz

    @property
    def windows_per_period(self) -> int:
        return int(round(self.pwm_hz / self.control_hz))

    @property
    def substeps_per_window(self) -> int:
        return int(round(self.pwm_window_s / self.plant_step_s))

    @property
    def steps(self) -> int:
        return int(math.floor(self.duration_s * self.control_hz + 1e-9))

    @property
    def orbit_params(self) -> OrbitParams:
        return OrbitParams.from_elements(self.orbit, self.mu)

    @property
    def namespaces(self) -> List[str]:
        return [agent.namespace for agent in self.agents]

    @property
    def leaders(self) -> List[AgentConfig]:
        return [agent for agent in self.agents if agent.role == 'leader']

    def leader_of(self, namespace: str) -> AgentConfig:
        """The agent a follower tracks (the agent itself for a leader)."""
        agent = self.agent(namespace)
        if agent.role == 'leader':
            return agent
        return self.agent(agent.leader or self.leaders[0].namespace)

    def plan_for(self, namespace: str) -> WaypointPlan:
        return self.agent(namespace).waypoints or self.waypoints

    def agent(self, namespace: str) -> AgentConfig:
        for agent in self.agents:
            if agent.namespace == namespace:
                return agent
        raise ScenarioConfigError(f"Scenario '{self.name}' has no agent '{namespace}'")

    def mpc_config(self, namespace: str) -> MpcConfig:
        agent = self.agent(namespace)
        return MpcConfig(
            role=agent.role,
            offset=agent.offset,
            weights=self.weights,
            terminal_factor=self.terminal_factor,
            horizon=self.horizon,
            dt=self.control_period_s,
            u_max=np.array([self.force_max] * 3 + [self.torque_max] * 3),
            v_max=self.v_max,
            d_min=self.d_min,
            settings=self.solver,
        )

    def reference_for(self, namespace: str, states: Dict[str, np.ndarray], t_s: float) -> np.ndarray:
        """Pose the agent should hold: its waypoint for a leader, its slot for a follower."""
        agent = self.agent(namespace)
        if agent.role == 'leader':
            return waypoint_reference(self.plan_for(namespace), t_s).to_vector()
        ref = np.asarray(states[self.leader_of(namespace).namespace], dtype=float).copy()
        ref[0:3] += agent.offset.dp
        ref[6:10] = quat_normalize(quat_multiply(agent.offset.dq, ref[6:10]))
        return ref

    def validate(self) -> 'ScenarioConfig':
        """
        Raises:
            ScenarioConfigError: On rates, roles or namespaces that cannot run
        """
        if min(self.pwm_hz, self.control_hz, self.plant_step_s, self.duration_s) <= 0 or self.sim_speed < 0:
            raise ScenarioConfigError("Rates, plant step and duration must be positive; speed must be >= 0")
        ratio = self.pwm_hz / self.control_hz
        if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
            raise ScenarioConfigError(
                f"PWM rate {self.pwm_hz} Hz must be an integer multiple of the control rate {self.control_hz} Hz"
            )
        substeps = self.pwm_window_s / self.plant_step_s
        if abs(substeps - round(substeps)) > 1e-9 or round(substeps) < 1:
            raise ScenarioConfigError(
                f"Plant step {self.plant_step_s} s must divide the PWM window {self.pwm_window_s} s"
            )
        if self.pwm_window_s <= self.min_on_s:
            raise ScenarioConfigError("PWM window must be longer than the minimum on-time")
        namespaces = self.namespaces
        if len(set(namespaces)) != len(namespaces):
            raise ScenarioConfigError(f"Agent namespaces must be unique: {namespaces}")
        leaders = {agent.namespace for agent in self.leaders}
        if not leaders:
            raise ScenarioConfigError("Scenario needs at least one leader")
        for agent in self.agents:
            if agent.role == 'follower' and agent.offset is None:
                raise ScenarioConfigError(f"Follower '{agent.namespace}' needs a formation offset")
            if agent.role == 'follower' and agent.leader is not None and agent.leader not in leaders:
                raise ScenarioConfigError(f"Follower '{agent.namespace}' tracks unknown leader '{agent.leader}'")
            if agent.waypoints is not None:
                agent.waypoints.validate()
        self.waypoints.validate()
        return self

    @classmethod
    def from_validated(cls, data: Dict[str, Any]) -> 'ScenarioConfig':
        """Build a config from ``ScenarioConfigSerializer.validated_data``."""
        orbit = data['orbit']
        body = data['body']
        thrusters = data['thrusters']
        control = data['control']
        plan = data['waypoints']
        simulation = data['simulation']

        inertia = np.asarray(body['inertia'], dtype=float)
        inertia = np.diag(inertia) if inertia.shape == (3,) else inertia.reshape(3, 3)
        waypoints = _plan_from_section(plan)
        own_plans = {
            entry['namespace']: _plan_from_section(entry['waypoints'])
            for entry in data['agents'] if entry.get('waypoints')
        }
        first_leader = next(entry['namespace'] for entry in data['agents'] if entry['role'] == 'leader')

        agents = []
        for entry in data['agents']:
            own_plan = own_plans.get(entry['namespace'])
            offset = None
            if entry.get('offset') is not None:
                offset = FormationOffset.from_yaw(entry['offset'], math.radians(entry.get('offset_yaw_deg', 0.0)))
            if entry.get('initial_position') is not None:
                position = entry['initial_position']
            elif entry['role'] == 'leader':
                position = (own_plan or waypoints).positions[0]
            else:
                leader_plan = own_plans.get(entry.get('leader') or first_leader, waypoints)
                position = leader_plan.positions[0] + offset.dp
            initial_q = quat_from_yaw(math.radians(entry.get('initial_yaw_deg', 0.0)))
            agents.append(AgentConfig(namespace=entry['namespace'], role=entry['role'],
                                      initial_state=RigidBodyState.at_rest(position, initial_q), offset=offset,
                                      leader=entry.get('leader'), waypoints=own_plan))

        weights = control['weights']
        v_max = control.get('v_max_mps')
        try:
            config = cls(
                name=data['name'],
                orbit=OrbitalElements.from_degrees(orbit['a_km'] * 1e3, orbit['e'], orbit['i_deg'],
                                                   orbit['raan_deg'], orbit['argp_deg']),
                body=BodyParams(mass=body['mass_kg'], inertia=inertia),
                layout=ThrusterLayout.by_name(thrusters['layout'], arm=thrusters['arm_m'],
                                              max_thrust=thrusters['nominal_thrust_n']),
                agents=agents,
                waypoints=waypoints,
                mu=orbit.get('mu', _setting('GRAVITATIONAL_PARAMETER', MU_EARTH)),
                nominal_thrust=thrusters['nominal_thrust_n'],
                min_on_s=thrusters['min_on_ms'] / 1e3,
                pwm_hz=thrusters['pwm_hz'],
                control_hz=control['rate_hz'],
                plant_step_s=simulation.get('plant_step_s') or _setting('PLANT_STEP_S', DEFAULT_PLANT_STEP_S),
                horizon=control['horizon'],
                weights=OcpWeights.from_diagonal(**weights),
                terminal_factor=control['terminal_factor'],
                force_max=control['force_max_n'],
                torque_max=control['torque_max_nm'],
                v_max=None if v_max is None else np.full(3, float(v_max)),
                d_min=control['d_min_m'],
                solver=SolverSettings(max_iterations=control['max_iterations']),
                sim_speed=simulation['speed'],
                duration_s=simulation['duration_s'],
            )
        except DynamicsError as exc:
            raise ScenarioConfigError(f"Invalid scenario '{data['name']}': {exc}") from exc
        return config.validate()


def _plan_from_section(section: Dict[str, Any]) -> WaypointPlan:
    return WaypointPlan.from_poses(
        [(point['position'], math.radians(point['yaw_deg'])) for point in section['points']],
        dwell_s=section['dwell_s'], cyclic=section['cyclic'],
    )


def load_scenario(path, **overrides) -> ScenarioConfig:
    """
    Load and validate a YAML scenario file.

    Args:
        path: Scenario file path
        **overrides: Values replacing the ``simulation`` section entries
            (``duration_s``, ``speed``, ``plant_step_s``); ``None`` is ignored

    Raises:
        ScenarioConfigError: If the file is missing, unparsable or invalid
    """
    from .serializers import ScenarioConfigSerializer

    path = Path(path)
    if not path.is_file():
        raise ScenarioConfigError(f"Scenario file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ScenarioConfigError(f"Scenario file {path} is not valid YAML: {exc}") from exc
    if not isinstance(data, dict):
        raise ScenarioConfigError(f"Scenario file {path} must hold a mapping")

    data.setdefault('name', path.stem)
    simulation = dict(data.get('simulation') or {})
    simulation.update({key: value for key, value in overrides.items() if value is not None})
    data['simulation'] = simulation

    serializer = ScenarioConfigSerializer(data=data)
    if not serializer.is_valid():
        raise ScenarioConfigError(f"Invalid scenario {path}: {serializer.errors}", errors=serializer.errors)
    return ScenarioConfig.from_validated(serializer.validated_data)


# Lockstep simulator

class SimulationResult(NamedTuple):
    log_path: Path
    steps: int
    held_commands: Dict[str, int]
    final_states: Dict[str, np.ndarray]
    min_separation: float


class _AgentPlant:
    def __init__(self, agent: AgentConfig, layout: ThrusterLayout, window: float, nominal: float):
        self.namespace = agent.namespace
        self.role = agent.role
        self.x = agent.initial_state.to_vector()
        self.command = np.zeros(INPUT_DIM)
        self.schedule = PwmSchedule.empty(layout.count, window, nominal)
        self.achieved = np.zeros(INPUT_DIM)
        self.held = 0


class FormationSimulator:
    """
    Plant process of a formation scenario.

    Each control period the simulator publishes every agent's state stamped
    with the current simulation time, waits for that agent's force and torque
    commands carrying the same stamp, then integrates all agents through the
    PWM windows of the period while publishing ``/clock`` at the plant rate.
    Agents that do not answer within the command timeout keep their last
    command and are logged as degraded.
    """

    def __init__(self, config: ScenarioConfig, client: BridgeClient, log_path,
                 command_timeout_s: Optional[float] = None, lost_grace_s: Optional[float] = None,
                 startup_timeout_s: float = 30.0):
        self.config = config.validate()
        self.client = client
        self.log_path = Path(log_path)
        self.command_timeout_s = command_timeout_s if command_timeout_s is not None \
            else float(_setting('COMMAND_TIMEOUT_S', 5.0))
        self.lost_grace_s = lost_grace_s if lost_grace_s is not None \
            else float(_setting('BRIDGE_LOST_GRACE_S', 2.0))
        self.startup_timeout_s = startup_timeout_s
        self.logger = logging.getLogger(f"{__name__}.{self.__class__.__name__}")

        self.orbit = config.orbit_params
        self.plants = {agent.namespace: _AgentPlant(agent, config.layout, config.pwm_window_s,
                                                    config.nominal_thrust)
                       for agent in config.agents}
        self._cv = threading.Condition()
        self._commands: Dict[str, Dict[str, Tuple[int, np.ndarray]]] = {ns: {} for ns in self.plants}
        self._degraded: Dict[str, Tuple[int, bool]] = {}
        self._state_publishers = {}
        self._thr_publishers = {}
        self._registered = False
        self._wall_start = 0.0
        self.min_separation = math.inf

    def register(self) -> None:
        """Register state publishers and command subscriptions for every agent."""
        if self._registered:
            return
        for ns in self.plants:
            self._state_publishers[ns] = self.client.register_publisher(
                TopicRegistration(ns, Direction.OUT, SC_STATES_TOPIC, 'SCStates'))
            self._thr_publishers[ns] = self.client.register_publisher(
                TopicRegistration(ns, Direction.OUT, THR_ON_TIME_TOPIC, 'ThrOnTime'))
            self.client.subscribe(TopicRegistration(ns, Direction.IN, CMD_FORCE_TOPIC, 'CmdForce'),
                                  self._command_sink(ns, 'force', 'force_b'))
            self.client.subscribe(TopicRegistration(ns, Direction.IN, CMD_TORQUE_TOPIC, 'CmdTorque'),
                                  self._command_sink(ns, 'torque', 'torque_b'))
            self.client.subscribe(TopicRegistration(ns, Direction.IN, PREDICTION_TOPIC, 'PredictedTrajectory'),
                                  self._prediction_sink(ns))
        self._registered = True

    def _command_sink(self, ns: str, kind: str, field_name: str):
        def sink(message: ReceivedMessage) -> None:
            with self._cv:
                self._commands[ns][kind] = (message.stamp_ns, np.asarray(message.value[field_name], dtype=float))
                self._cv.notify_all()
        return sink

    def _prediction_sink(self, ns: str):
        def sink(message: ReceivedMessage) -> None:
            with self._cv:
                self._degraded[ns] = (message.stamp_ns, bool(message.value.get('degraded', False)))
        return sink

    def _check_link(self) -> None:
        lost_for = self.client.lost_for()
        if lost_for > self.lost_grace_s:
            raise BridgeLostError(f"Bridge link lost for {lost_for:.2f} s (grace {self.lost_grace_s:.2f} s)")

    def _answered(self, t_ns: int) -> List[str]:
        return [ns for ns, received in self._commands.items()
                if all(kind in received and received[kind][0] == t_ns for kind in ('force', 'torque'))]

    def _wait_commands(self, t_ns: int, timeout_s: float, republish: bool = False) -> List[str]:
        """Wait for commands stamped ``t_ns``; returns the namespaces that answered."""
        deadline = time.monotonic() + timeout_s
        next_publish = time.monotonic() + STARTUP_REPUBLISH_S
        while True:
            with self._cv:
                answered = self._answered(t_ns)
                if len(answered) == len(self.plants):
                    return answered
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    return answered
                self._cv.wait(timeout=min(remaining, 0.05))
            self._check_link()
            if republish and time.monotonic() >= next_publish:
                self._publish_states(t_ns)
                next_publish = time.monotonic() + STARTUP_REPUBLISH_S

    def _publish_states(self, t_ns: int) -> None:
        for ns, plant in self.plants.items():
            x = plant.x
            self._state_publishers[ns].publish_fields({
                'p_h': x[0:3], 'v_h': x[3:6], 'q_hb': x[6:10], 'omega_b': x[10:13], 'stamp_ns': t_ns,
            }, t_ns)

    def _pace(self, sim_time_s: float) -> None:
        if self.config.sim_speed <= 0:
            return
        delay = self._wall_start + sim_time_s / self.config.sim_speed - time.monotonic()
        if delay > 0:
            time.sleep(delay)

    def _meta(self) -> Dict[str, Any]:
        frame = build_hill_frame(elements_to_inertial(self.config.orbit, self.config.mu))
        return {
            'kind': 'meta',
            'scenario': self.config.name,
            'control_period_ns': self.config.control_period_ns,
            'pwm_window_s': self.config.pwm_window_s,
            'plant_step_s': self.config.plant_step_s,
            'sim_speed': self.config.sim_speed,
            'n': self.orbit.n,
            'layout': self.config.layout.name,
            'thrusters': self.config.layout.count,
            'hill_frame': {'x_hat': frame.x_hat.tolist(), 'y_hat': frame.y_hat.tolist(),
                           'z_hat': frame.z_hat.tolist(), 'origin': frame.origin.tolist()},
            'agents': [{
                'ns': agent.namespace,
                'role': agent.role,
                'leader': None if agent.role == 'leader' else self.config.leader_of(agent.namespace).namespace,
                'offset': None if agent.offset is None else agent.offset.dp.tolist(),
                'offset_q': None if agent.offset is None else agent.offset.dq.tolist(),
            } for agent in self.config.agents],
        }

    def run(self, steps: Optional[int] = None) -> SimulationResult:
        """
        Run the scenario for ``steps`` control periods (default: its duration).

        Raises:
            BridgeLostError: If the bridge stays Lost beyond the grace period
            SimulationError: If no agent answers the first state within the startup timeout
        """
        steps = self.config.steps if steps is None else steps
        self.register()
        self.log_path.parent.mkdir(parents=True, exist_ok=True)
        period_ns = self.config.control_period_ns
        self.logger.info(f"Simulating '{self.config.name}' for {steps} control steps "
                         f"({len(self.plants)} agents, speed {self.config.sim_speed}x)")

        with self.log_path.open('w') as log:
            log.write(json.dumps(self._meta()) + '\n')
            self.client.publish_clock(0)
            self._wall_start = time.monotonic()

            for k in range(steps):
                t_ns = k * period_ns
                t_s = t_ns / 1e9
                self._publish_states(t_ns)

                if k == 0:
                    answered = self._wait_commands(t_ns, self.startup_timeout_s, republish=True)
                    if not answered:
                        raise SimulationError(f"No controller answered within {self.startup_timeout_s:.1f} s")
                    self._wall_start = time.monotonic()
                else:
                    answered = self._wait_commands(t_ns, self.command_timeout_s)

                states = {ns: plant.x.copy() for ns, plant in self.plants.items()}
                with self._cv:
                    commands = {ns: dict(received) for ns, received in self._commands.items()}
                    degraded_flags = dict(self._degraded)
                for ns, plant in self.plants.items():
                    degraded = ns not in answered
                    if degraded:
                        plant.held += 1
                        self.logger.warning(f"No command from '{ns}' for t={t_ns}ns, holding last command")
                    else:
                        plant.command = np.concatenate([commands[ns]['force'][1], commands[ns]['torque'][1]])
                        stamp, flagged = degraded_flags.get(ns, (None, False))
                        degraded = bool(flagged and stamp == t_ns)

                    allocation = allocate(Wrench.from_vector(plant.command), self.config.layout)
                    plant.schedule = pwm_quantize(allocation.thrust, self.config.pwm_window_s,
                                                  self.config.min_on_s, self.config.nominal_thrust)
                    plant.achieved = self.config.layout.wrench_matrix @ plant.schedule.mean_thrust
                    self._thr_publishers[ns].publish_fields({
                        'on_time': plant.schedule.on_times, 'window': plant.schedule.window, 'stamp_ns': t_ns,
                    }, t_ns)
                    log.write(json.dumps({
                        'kind': 'step',
                        't_ns': t_ns,
                        'ns': ns,
                        'state': plant.x.tolist(),
                        'cmd': plant.command.tolist(),
                        'achieved_wrench': plant.achieved.tolist(),
                        'thr_on_times': plant.schedule.on_times.tolist(),
                        'ref': self.config.reference_for(ns, states, t_s).tolist(),
                        'degraded': degraded,
                    }) + '\n')

                self._advance(t_ns)

            log.flush()

        self.client.flush()
        held = {ns: plant.held for ns, plant in self.plants.items()}
        self.logger.info(f"Scenario '{self.config.name}' finished: {steps} steps, "
                         f"min separation {self.min_separation:.3f} m, held commands {held}")
        return SimulationResult(log_path=self.log_path, steps=steps, held_commands=held,
                                final_states={ns: plant.x.copy() for ns, plant in self.plants.items()},
                                min_separation=self.min_separation)

    def _advance(self, t_ns: int) -> None:
        """Integrate all agents through one control period."""
        config = self.config
        substep_ns = int(round(config.plant_step_s * 1e9))
        sim_ns = t_ns
        for _ in range(config.windows_per_period):
            for j in range(config.substeps_per_window):
                offset = j * config.plant_step_s
                for plant in self.plants.values():
                    plant.x = plant_step(plant.x, plant.schedule, config.layout, self.orbit.n, config.body,
                                         config.plant_step_s, substep=config.plant_step_s, offset=offset)
                sim_ns += substep_ns
                self._track_separation()
                self._pace(sim_ns / 1e9)
                self.client.publish_clock(sim_ns)
            self._check_link()

    def _track_separation(self) -> None:
        positions = np.array([plant.x[0:3] for plant in self.plants.values()])
        if len(positions) < 2:
            return
        diff = positions[:, None, :] - positions[None, :, :]
        distance = np.linalg.norm(diff, axis=2)
        distance[np.diag_indices(len(positions))] = np.inf
        self.min_separation = min(self.min_separation, float(distance.min()))


def run_scenario(config: ScenarioConfig, log_path, bridge_config: Optional[BridgeEndpointConfig] = None,
                 registry: Optional[SchemaRegistry] = None, steps: Optional[int] = None,
                 command_timeout_s: Optional[float] = None, lost_grace_s: Optional[float] = None,
                 connect_timeout_s: float = 10.0) -> SimulationResult:
    """
    Connect a simulator client to a running bridge and run the scenario.

    The agents must be started separately (threads or processes) on the same
    bridge; the first state is re-published until all of them answer.

    Raises:
        BridgeLostError: If the bridge is unreachable or lost during the run
    """
    client = BridgeClient('simulator', ClientRole.SIMULATOR, bridge_config, registry)
    simulator = FormationSimulator(config, client, log_path, command_timeout_s=command_timeout_s,
                                   lost_grace_s=lost_grace_s)
    simulator.register()
    client.start()
    try:
        if not client.wait_connected(connect_timeout_s):
            raise BridgeLostError(f"Bridge at {client.config.host}:{client.config.rx_port} not reachable "
                                  f"within {connect_timeout_s:.1f} s")
        return simulator.run(steps)
    finally:
        client.close()
