"""
NMPC agent nodes.

A ``FormationAgent`` connects to the bridge as a controller client, answers
every state the simulator publishes for its namespace with a force and a
torque command stamped with the state's stamp, and broadcasts its predicted
trajectory for the other agents.

Per control step ``t_k`` an agent

    - ignores states it has already answered (re-sending its last answer),
    - as a follower, waits for its leader's prediction stamped ``t_k``,
    - waits for the other agents' predictions stamped ``t_k - period``,
    - solves its OCP and publishes the prediction, then the commands.

Waits are bounded; an agent that misses a neighbor keeps going with what it
has and stops waiting for that neighbor until it is heard from again.
"""

import logging
import threading
import time
from typing import Dict, List, NamedTuple, Optional

import numpy as np

from .bridge import (
    BridgeClient,
    BridgeEndpointConfig,
    ClientRole,
    Direction,
    ReceivedMessage,
    TopicRegistration,
)
from .dynamics import RigidBodyState
from .msgs import SchemaRegistry
from .nmpc import FormationMpc, MpcStepResult, SolverStatus, TrajectorySnapshot
from .sim import (
    CMD_FORCE_TOPIC,
    CMD_TORQUE_TOPIC,
    PREDICTION_TOPIC,
    SC_STATES_TOPIC,
    BridgeLostError,
    ScenarioConfig,
    _setting,
    waypoint_reference,
)


logger = logging.getLogger(__name__)

DEFAULT_PREDICTION_WAIT_S = 1.0
HISTORY_DEPTH = 8
POLL_INTERVAL_S = 0.05


class AgentStats(NamedTuple):
    namespace: str
    steps: int
    degraded_steps: int
    infeasible_steps: int
    last_t_ns: Optional[int]


class FormationAgent:
    """Controller node of one spacecraft."""

    def __init__(self, namespace: str, config: ScenarioConfig, client: BridgeClient,
                 prediction_wait_s: Optional[float] = None, lost_grace_s: Optional[float] = None):
        self.namespace = namespace
        self.config = config
        self.agent = config.agent(namespace)
        self.client = client
        self.prediction_wait_s = prediction_wait_s if prediction_wait_s is not None \
            else float(_setting('PREDICTION_WAIT_S', DEFAULT_PREDICTION_WAIT_S))
        self.lost_grace_s = lost_grace_s if lost_grace_s is not None \
            else float(_setting('BRIDGE_LOST_GRACE_S', 2.0))
        self.logger = logging.getLogger(f"{__name__}.{self.__class__.__name__}")

        self.mpc = FormationMpc(namespace, config.mpc_config(namespace), config.body, config.orbit_params.n)
        self.leader_ns = None if self.agent.role == 'leader' else config.leader_of(namespace).namespace
        self.neighbors = [ns for ns in config.namespaces if ns not in (namespace, self.leader_ns)]

        self._cv = threading.Condition()
        self._pending: Optional[ReceivedMessage] = None
        self._predictions: Dict[str, Dict[int, TrajectorySnapshot]] = {
            ns: {} for ns in config.namespaces if ns != namespace
        }
        self._silent: set = set()
        self._publishers = {}
        self._last_answer = None
        self._registered = False

        self.last_t_ns: Optional[int] = None
        self.steps = 0
        self.degraded_steps = 0
        self.infeasible_steps = 0

    @property
    def period_ns(self) -> int:
        return self.config.control_period_ns

    def register(self) -> None:
        if self._registered:
            return
        ns = self.namespace
        self._publishers['force'] = self.client.register_publisher(
            TopicRegistration(ns, Direction.IN, CMD_FORCE_TOPIC, 'CmdForce'))
        self._publishers['torque'] = self.client.register_publisher(
            TopicRegistration(ns, Direction.IN, CMD_TORQUE_TOPIC, 'CmdTorque'))
        self._publishers['prediction'] = self.client.register_publisher(
            TopicRegistration(ns, Direction.IN, PREDICTION_TOPIC, 'PredictedTrajectory'))
        self.client.subscribe(TopicRegistration(ns, Direction.OUT, SC_STATES_TOPIC, 'SCStates'), self._state_sink)
        for other in self._predictions:
            self.client.subscribe(TopicRegistration(other, Direction.IN, PREDICTION_TOPIC, 'PredictedTrajectory'),
                                  self._prediction_sink(other))
        self._registered = True

    # sinks

    def _state_sink(self, message: ReceivedMessage) -> None:
        with self._cv:
            if self._pending is None or message.stamp_ns >= self._pending.stamp_ns:
                self._pending = message
            self._cv.notify_all()

    def _prediction_sink(self, ns: str):
        def sink(message: ReceivedMessage) -> None:
            self.accept_prediction(ns, message.value)
        return sink

    def accept_prediction(self, ns: str, value) -> None:
        """Store a neighbor broadcast (``PredictedTrajectory`` fields)."""
        states = np.array([point['x'] for point in value['points']], dtype=float)
        if states.ndim != 2 or len(states) == 0:
            self.logger.warning(f"{self.namespace}: empty prediction from '{ns}' ignored")
            return
        snapshot = TrajectorySnapshot(agent_id=ns, stamp_ns=int(value['stamp_ns']), dt=float(value['dt']),
                                      states=states)
        with self._cv:
            history = self._predictions.setdefault(ns, {})
            history[snapshot.stamp_ns] = snapshot
            for stamp in sorted(history)[:-HISTORY_DEPTH]:
                del history[stamp]
            if ns in self._silent:
                self.logger.info(f"{self.namespace}: hearing from '{ns}' again")
                self._silent.discard(ns)
            self._cv.notify_all()

    # prediction selection

    def _wait_for(self, namespaces: List[str], min_stamp: int, timeout_s: float) -> None:
        deadline = time.monotonic() + timeout_s
        with self._cv:
            while True:
                missing = [ns for ns in namespaces
                           if ns not in self._silent and not any(s >= min_stamp for s in self._predictions[ns])]
                remaining = deadline - time.monotonic()
                if not missing or remaining <= 0:
                    break
                self._cv.wait(timeout=min(remaining, POLL_INTERVAL_S))
            for ns in missing:
                self.logger.warning(f"{self.namespace}: no prediction from '{ns}' stamped >= {min_stamp}ns, "
                                    f"not waiting for it until it is heard from again")
                self._silent.add(ns)

    def _select(self, ns: str, target_stamp: int) -> Optional[TrajectorySnapshot]:
        """Latest broadcast stamped at or before ``target_stamp``, else the latest one."""
        with self._cv:
            history = self._predictions.get(ns) or {}
            if not history:
                return None
            eligible = [stamp for stamp in history if stamp <= target_stamp]
            return history[max(eligible) if eligible else max(history)]

    # control step

    def step(self, x: np.ndarray, t_ns: int) -> MpcStepResult:
        """Compute and publish the answer to the state stamped ``t_ns``."""
        leader_pred = None
        if self.leader_ns is not None:
            self._wait_for([self.leader_ns], t_ns, self.prediction_wait_s)
            leader_pred = self._select(self.leader_ns, t_ns)

        neighbor_stamp = t_ns - self.period_ns
        if neighbor_stamp >= 0 and self.neighbors:
            self._wait_for(self.neighbors, neighbor_stamp, self.prediction_wait_s)
        neighbor_preds = {}
        for ns in self.neighbors:
            snapshot = self._select(ns, neighbor_stamp)
            if snapshot is not None:
                neighbor_preds[ns] = snapshot

        waypoint = None
        if self.agent.role == 'leader':
            waypoint = waypoint_reference(self.config.plan_for(self.namespace), t_ns / 1e9)

        result = self.mpc.mpc_step(x, t_ns, leader_pred=leader_pred, waypoint=waypoint,
                                   neighbor_preds=neighbor_preds)
        self._publish(result, t_ns)

        self.last_t_ns = t_ns
        self.steps += 1
        self.degraded_steps += int(result.degraded)
        self.infeasible_steps += int(result.solution.status == SolverStatus.INFEASIBLE)
        return result

    def _publish(self, result: MpcStepResult, t_ns: int) -> None:
        period = self.period_ns
        prediction = {
            'agent_id': self.namespace,
            'stamp_ns': int(t_ns),
            'dt': self.config.control_period_s,
            'points': [{'stamp_ns': int(t_ns + i * period), 'x': state}
                       for i, state in enumerate(result.solution.x_pred)],
            'degraded': bool(result.degraded),
        }
        force = {'force_b': result.wrench.force_b, 'stamp_ns': int(t_ns)}
        torque = {'torque_b': result.wrench.torque_b, 'stamp_ns': int(t_ns)}
        self._last_answer = (t_ns, prediction, force, torque)
        self._send(self._last_answer)

    def _send(self, answer) -> None:
        t_ns, prediction, force, torque = answer
        self._publishers['prediction'].publish_fields(prediction, t_ns)
        self._publishers['force'].publish_fields(force, t_ns)
        self._publishers['torque'].publish_fields(torque, t_ns)

    # loop

    def handle(self, message: ReceivedMessage) -> Optional[MpcStepResult]:
        """Answer a state message unless it is older than or equal to the last one answered."""
        t_ns = int(message.stamp_ns)
        if self.last_t_ns is not None and t_ns <= self.last_t_ns:
            if t_ns == self.last_t_ns and self._last_answer is not None:
                self.logger.debug(f"{self.namespace}: state t={t_ns}ns repeated, re-sending answer")
                self._send(self._last_answer)
            else:
                self.logger.debug(f"{self.namespace}: dropping old state t={t_ns}ns")
            return None
        value = message.value
        x = RigidBodyState(p_h=value.as_array('p_h'), v_h=value.as_array('v_h'), q_hb=value.as_array('q_hb'),
                           omega_b=value.as_array('omega_b')).to_vector()
        return self.step(x, t_ns)

    def serve(self, stop: Optional[threading.Event] = None, final_t_ns: Optional[int] = None) -> AgentStats:
        """
        Answer states until ``stop`` is set or the state at ``final_t_ns`` is answered.

        Raises:
            BridgeLostError: If the bridge stays Lost beyond the grace period
        """
        stop = stop or threading.Event()
        self.logger.info(f"Agent '{self.namespace}' ({self.agent.role}) serving"
                         + (f", leader '{self.leader_ns}'" if self.leader_ns else ''))
        while not stop.is_set():
            with self._cv:
                if self._pending is None:
                    self._cv.wait(timeout=POLL_INTERVAL_S)
                message, self._pending = self._pending, None
            if message is None:
                lost_for = self.client.lost_for()
                if self.last_t_ns is not None and lost_for > self.lost_grace_s:
                    raise BridgeLostError(f"Agent '{self.namespace}': bridge lost for {lost_for:.2f} s")
                continue
            self.handle(message)
            if final_t_ns is not None and self.last_t_ns is not None and self.last_t_ns >= final_t_ns:
                break
        self.client.flush()
        stats = self.stats()
        self.logger.info(f"Agent '{self.namespace}' done: {stats.steps} steps, "
                         f"{stats.degraded_steps} degraded, {stats.infeasible_steps} infeasible")
        return stats

    def stats(self) -> AgentStats:
        return AgentStats(namespace=self.namespace, steps=self.steps, degraded_steps=self.degraded_steps,
                          infeasible_steps=self.infeasible_steps, last_t_ns=self.last_t_ns)


class AgentThread(threading.Thread):
    """Runs one agent with its own bridge client inside the current process."""

    def __init__(self, namespace: str, config: ScenarioConfig,
                 bridge_config: Optional[BridgeEndpointConfig] = None,
                 registry: Optional[SchemaRegistry] = None, steps: Optional[int] = None,
                 stop: Optional[threading.Event] = None, prediction_wait_s: Optional[float] = None):
        super().__init__(name=f"agent-{namespace}", daemon=True)
        self.client = BridgeClient(namespace, ClientRole.CONTROLLER, bridge_config, registry)
        self.agent = FormationAgent(namespace, config, self.client, prediction_wait_s=prediction_wait_s)
        self.agent.register()
        steps = config.steps if steps is None else steps
        self.final_t_ns = (steps - 1) * config.control_period_ns if steps > 0 else None
        self.stop_event = stop or threading.Event()
        self.error: Optional[BaseException] = None
        self.result: Optional[AgentStats] = None

    def run(self) -> None:
        self.client.start()
        try:
            self.result = self.agent.serve(self.stop_event, final_t_ns=self.final_t_ns)
        except Exception as exc:
            self.error = exc
            logger.exception(f"Agent '{self.agent.namespace}' failed")
        finally:
            self.client.close()


def start_agents(config: ScenarioConfig, bridge_config: Optional[BridgeEndpointConfig] = None,
                 registry: Optional[SchemaRegistry] = None, steps: Optional[int] = None,
                 stop: Optional[threading.Event] = None,
                 prediction_wait_s: Optional[float] = None) -> List[AgentThread]:
    """Start one ``AgentThread`` per scenario agent and return them."""
    stop = stop or threading.Event()
    threads = [AgentThread(ns, config, bridge_config, registry, steps=steps, stop=stop,
                           prediction_wait_s=prediction_wait_s)
               for ns in config.namespaces]
    for thread in threads:
        thread.start()
    return threads
