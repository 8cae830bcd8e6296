"""
Bridge throughput stress harness.

One SCStates topic per spacecraft is published at a target rate through a
loopback hub and received by a single aggregate subscriber. Achieved rate
and inter-arrival jitter are measured on the subscriber side from receive
timestamps; publishers are paced against absolute deadlines.

Every frame a publisher hands to its client ends up in exactly one counter:
accepted by the subscriber, or dropped at the source, at the hub or in the
subscriber. ``TopicResult.unaccounted`` is whatever the counters miss.
"""

import logging
import threading
import time
from typing import Callable, Dict, Iterable, List, NamedTuple, Optional

import numpy as np

from .bridge import (
    BridgeClient,
    BridgeEndpointConfig,
    BridgeServer,
    ClientRole,
    Direction,
    ReceivedMessage,
    TopicRegistration,
    TopicStats,
)
from .msgs import SchemaRegistry


logger = logging.getLogger(__name__)

CPU_BOUND_RATIO = 0.95
STRESS_TOPIC = 'sc_states'
DRAIN_TIMEOUT_S = 10.0


class StressConfigError(Exception):
    """Raised for stress configurations that cannot run."""
    pass


class StressConfig(NamedTuple):
    sim_speed: float = 1.0
    spacecraft: int = 1
    target_hz: float = 100.0
    duration_s: float = 10.0
    schema: str = 'SCStates'

    def validate(self, min_duration_s: float = 0.0) -> 'StressConfig':
        if self.sim_speed <= 0 or self.spacecraft < 1 or self.target_hz <= 0:
            raise StressConfigError(f"Stress values must be positive: {self._asdict()}")
        if self.duration_s <= 0 or self.duration_s < min_duration_s:
            raise StressConfigError(f"Stress duration must be at least {min_duration_s:g} s, got {self.duration_s}")
        if self.schema != 'SCStates':
            raise StressConfigError(f"Only SCStates payloads are generated, got '{self.schema}'")
        return self


class TopicResult(NamedTuple):
    path: str
    sent: int
    received: int
    achieved_hz: float
    std_ms: float
    drops: int

    @property
    def unaccounted(self) -> int:
        return self.sent - self.received - self.drops


class StressReport(NamedTuple):
    """One result row; per-topic detail is kept alongside the aggregate."""
    config: StressConfig
    achieved_hz: float
    std_ms: float
    drops: int
    cpu_bound: bool
    topics: List[TopicResult]

    HEADER = ('Sim speed', 'S/c', 'Target [Hz]', 'Achieved [Hz]', 'Std [ms]')

    def as_row(self) -> tuple:
        return (self.config.sim_speed, self.config.spacecraft, self.config.target_hz,
                round(self.achieved_hz, 1), round(self.std_ms, 2))

    @property
    def sent(self) -> int:
        return sum(topic.sent for topic in self.topics)

    @property
    def received(self) -> int:
        return sum(topic.received for topic in self.topics)

    @property
    def unaccounted(self) -> int:
        return sum(topic.unaccounted for topic in self.topics)


def format_table(reports: Iterable[StressReport]) -> str:
    """Render report rows as an aligned text table."""
    rows = [StressReport.HEADER] + [tuple(f"{value:g}" if isinstance(value, float) else str(value)
                                          for value in report.as_row()) for report in reports]
    widths = [max(len(str(row[i])) for row in rows) for i in range(len(StressReport.HEADER))]
    return '\n'.join('  '.join(str(cell).rjust(width) for cell, width in zip(row, widths)) for row in rows)


def _state_payload(rng: np.random.Generator) -> Dict[str, object]:
    q = rng.normal(size=4)
    return {
        'p_h': rng.uniform(-5.0, 5.0, 3),
        'v_h': rng.uniform(-0.1, 0.1, 3),
        'q_hb': q / np.linalg.norm(q),
        'omega_b': rng.uniform(-0.1, 0.1, 3),
    }


class _PacedPublisher(threading.Thread):
    """Publishes on one topic against absolute deadlines until ``end``."""

    def __init__(self, publisher, config: StressConfig, start_at: float, end_at: float, seed: int):
        super().__init__(daemon=True, name=f"stress-{publisher.path}")
        self.publisher = publisher
        self.period = 1.0 / config.target_hz
        self.stamp_step_ns = config.sim_speed * self.period * 1e9
        self.start_at = start_at
        self.end_at = end_at
        self.payload = _state_payload(np.random.default_rng(seed))
        self.count = 0

    def run(self) -> None:
        time.sleep(max(0.0, self.start_at - time.monotonic()))
        while True:
            deadline = self.start_at + self.count * self.period
            now = time.monotonic()
            if deadline >= self.end_at:
                return
            if deadline > now:
                time.sleep(deadline - now)
            stamp_ns = int(self.count * self.stamp_step_ns)
            self.publisher.publish_fields(dict(self.payload, stamp_ns=stamp_ns), stamp_ns)
            self.count += 1


def _topic_result(path: str, sent: TopicStats, got: TopicStats) -> TopicResult:
    """
    Ledger row of one topic from the publishing and the subscribing client.

    ``received`` counts frames the subscriber accepted; frames that arrived
    but were discarded as malformed or on queue overflow are drops, together
    with source-side and hub-side drops.
    """
    achieved = 1000.0 / got.interarrival_mean_ms if got.interarrival_mean_ms > 0 else 0.0
    accepted = got.received - got.dropped_malformed - got.dropped_overflow
    return TopicResult(path=path, sent=sent.sent, received=accepted, achieved_hz=achieved,
                       std_ms=got.interarrival_std_ms, drops=sent.dropped + got.dropped)


def run_stress(config: StressConfig, bridge_config: Optional[BridgeEndpointConfig] = None,
               registry: Optional[SchemaRegistry] = None, min_duration_s: float = 0.0,
               on_message: Optional[Callable[[ReceivedMessage], None]] = None) -> StressReport:
    """
    Run one stress configuration and return its report row.

    A private hub on ephemeral loopback ports is started unless
    ``bridge_config`` points at a running one. ``on_message`` runs for every
    message the subscriber accepts; by default messages are discarded.

    Raises:
        StressConfigError: If the configuration is invalid
        BridgeError: If the hub cannot be started or reached
    """
    config = config.validate(min_duration_s)
    hub = None
    if bridge_config is None:
        hub = BridgeServer(BridgeEndpointConfig.from_settings(rx_port=0, tx_port=0, heartbeat_port=0),
                           name='stress-hub').start()
        bridge_config = hub.endpoint

    depth = max(bridge_config.queue_depth, 4 * config.spacecraft)
    bridge_config = bridge_config._replace(queue_depth=depth)
    source = BridgeClient('stress-source', ClientRole.SIMULATOR, bridge_config, registry)
    sink = BridgeClient('stress-sink', ClientRole.CONTROLLER, bridge_config, registry)
    registrations = [TopicRegistration(f"sc{i}", Direction.OUT, STRESS_TOPIC, config.schema)
                     for i in range(config.spacecraft)]
    try:
        publishers = [source.register_publisher(reg) for reg in registrations]
        for reg in registrations:
            sink.subscribe(reg, on_message or _discard)
        source.start()
        sink.start()
        if not (source.wait_connected(10.0) and sink.wait_connected(10.0)):
            raise StressConfigError(f"Bridge at {bridge_config.host}:{bridge_config.rx_port} not reachable")

        logger.info(f"Stress: {config.spacecraft} s/c at {config.target_hz:g} Hz for {config.duration_s:g} s "
                    f"(speed {config.sim_speed:g}x)")
        start_at = time.monotonic() + 0.1
        end_at = start_at + config.duration_s
        threads = [_PacedPublisher(publisher, config, start_at, end_at, seed=i)
                   for i, publisher in enumerate(publishers)]
        for thread in threads:
            thread.start()
        for thread in threads:
            thread.join()

        source.flush(DRAIN_TIMEOUT_S)
        _wait_drained(source, sink, [reg.path for reg in registrations])
    finally:
        source.close(flush_timeout=1.0)
        sink.close(flush_timeout=1.0)
        if hub is not None:
            hub.stop()

    # Both clients are closed, so their counters no longer move.
    topics = [_topic_result(reg.path, source.topic_stats(reg.path), sink.topic_stats(reg.path))
              for reg in registrations]

    achieved = float(np.mean([topic.achieved_hz for topic in topics]))
    report = StressReport(
        config=config,
        achieved_hz=achieved,
        std_ms=float(np.mean([topic.std_ms for topic in topics])),
        drops=sum(topic.drops for topic in topics),
        cpu_bound=achieved < CPU_BOUND_RATIO * config.target_hz,
        topics=topics,
    )
    if report.cpu_bound:
        logger.warning(f"Stress: achieved {achieved:.1f} Hz of {config.target_hz:g} Hz target (CPU-bound)")
    if report.drops:
        logger.warning(f"Stress: {report.drops} of {report.sent} messages dropped")
    if report.unaccounted:
        logger.error(f"Stress: {report.unaccounted} of {report.sent} messages unaccounted for")
    return report


def _discard(message: ReceivedMessage) -> None:
    pass


def _wait_drained(source: BridgeClient, sink: BridgeClient, paths: List[str]) -> None:
    """Wait until every sent frame has arrived or been booked as a drop, or progress stops."""
    deadline = time.monotonic() + DRAIN_TIMEOUT_S
    last_total = -1
    while time.monotonic() < deadline:
        sent = [source.topic_stats(path) for path in paths]
        got = [sink.topic_stats(path) for path in paths]
        total = sum(g.received + g.dropped_hub + s.dropped for s, g in zip(sent, got))
        if total >= sum(s.sent for s in sent) or total == last_total:
            return
        last_total = total
        time.sleep(0.1)
