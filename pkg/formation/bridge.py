"""
Network bridge between the simulator and the controller processes.

A ``BridgeServer`` hub binds three TCP channels:

    rx         clients send frames to the hub
    tx         the hub fans every received frame out to all connected clients
    heartbeat  hub and clients exchange Heartbeat messages in both directions

Simulator and controllers connect as ``BridgeClient`` instances. Topics follow
``/<namespace>/bsk/<in|out>/<topic>``; ``out`` flows simulator to controller,
``in`` controller to simulator. Simulation time is published on ``/clock``.

On the wire each frame is a 4-byte big-endian length followed by a UTF-8 JSON
envelope ``{"topic": str, "stamp_ns": int, "payload": object}``.

When a tx queue overflows, the hub drops the oldest frame and tells that
client which topics lost how many frames with a ``/bridge/dropped`` notice
ahead of its next write. Clients book those under ``dropped_hub``, so a
subscriber can account for every frame its peers sent.
"""

import errno
import json
import logging
import math
import re
import socket
import struct
import threading
import time
from collections import deque
from enum import Enum
from typing import Any, Callable, Deque, Dict, List, NamedTuple, Optional, Tuple

from .msgs import (
    MessageError,
    MessageSchema,
    MessageValidationError,
    MessageValue,
    SchemaRegistry,
    builtin_registry,
    decode_object,
    default_registry,
    encode,
    make_value,
)


logger = logging.getLogger(__name__)

HEADER = struct.Struct('>I')
MAX_FRAME_SIZE = 16 * 1024 * 1024
CLOCK_TOPIC = '/clock'
HEARTBEAT_TOPIC = '/heartbeat'
READY_TOPIC = '/bridge/ready'
DROPPED_TOPIC = '/bridge/dropped'
_TOPIC_PREFIX = b'{"topic":'
_STAMP_MARKER = b',"stamp_ns":'
TOPIC_PATH_RE = re.compile(r'^/[A-Za-z0-9_]*/bsk/(in|out)/[A-Za-z0-9_/]+$')
_NAMESPACE_RE = re.compile(r'^[A-Za-z0-9_]*$')
_TOPIC_RE = re.compile(r'^[A-Za-z0-9_][A-Za-z0-9_/]*$')

SEND_BATCH = 512
RECV_SIZE = 256 * 1024
POLL_INTERVAL_S = 0.2


class BridgeError(Exception):
    """Base exception for bridge errors."""
    pass


class BridgeConfigError(BridgeError):
    """Raised when endpoint settings are inconsistent."""
    pass


class DuplicateRegistrationError(BridgeError):
    """Raised when a topic is registered twice on the same client."""
    pass


class UnknownSchemaError(BridgeError):
    """Raised when a registration names a schema missing from the registry."""
    pass


class DirectionError(BridgeError):
    """Raised when a client publishes against its role's direction."""
    pass


class InvalidTopicError(BridgeError):
    """Raised when a namespace or topic name breaks the path grammar."""
    pass


class TransportClosedError(BridgeError):
    """Raised when publishing on a closed client."""
    pass


class NonMonotonicClockError(BridgeError):
    """Raised when the published clock would go backwards."""
    pass


class PortBindError(BridgeError):
    """Raised when the hub cannot bind one of its ports."""

    def __init__(self, port: int, reason: str):
        self.port = port
        super().__init__(f"Cannot bind bridge port {port}: {reason}")


class FrameError(BridgeError):
    """Raised for oversized frames or malformed envelopes."""
    pass


class Direction(str, Enum):
    IN = 'in'
    OUT = 'out'


class ClientRole(str, Enum):
    SIMULATOR = 'simulator'
    CONTROLLER = 'controller'


class LinkState(str, Enum):
    CONNECTED = 'Connected'
    DEGRADED = 'Degraded'
    LOST = 'Lost'


class TopicRegistration(NamedTuple):
    """Routing entry binding a topic to a schema and direction."""
    namespace: str
    direction: Direction
    topic: str
    schema: str
    internal_id: str = ''

    @property
    def path(self) -> str:
        return topic_path(self.namespace, self.direction, self.topic)

    @property
    def key(self) -> Tuple[str, str, str]:
        return (self.namespace, Direction(self.direction).value, self.topic)


def topic_path(namespace: str, direction: Direction, topic: str) -> str:
    """
    Render the full topic path of a registration.

    Raises:
        InvalidTopicError: If the namespace or topic breaks the grammar
    """
    if not namespace and topic == 'clock':
        return CLOCK_TOPIC
    if not _NAMESPACE_RE.match(namespace):
        raise InvalidTopicError(f"Invalid namespace '{namespace}'")
    if not _TOPIC_RE.match(topic):
        raise InvalidTopicError(f"Invalid topic '{topic}'")
    return f"/{namespace}/bsk/{Direction(direction).value}/{topic}"


def clock_registration() -> TopicRegistration:
    return TopicRegistration(namespace='', direction=Direction.OUT, topic='clock', schema='Clock')


class BridgeFrame(NamedTuple):
    """One wire unit: topic path, simulation stamp and encoded payload."""
    topic: str
    stamp_ns: int
    payload: bytes

    def to_bytes(self) -> bytes:
        body = b''.join([
            b'{"topic":', json.dumps(self.topic).encode('utf-8'),
            b',"stamp_ns":', str(int(self.stamp_ns)).encode('ascii'),
            b',"payload":', self.payload, b'}',
        ])
        return HEADER.pack(len(body)) + body


def parse_envelope(body: bytes) -> Tuple[str, int, Any]:
    """
    Split a frame body into (topic, stamp_ns, payload object).

    Raises:
        FrameError: If the body is not a well-formed envelope
    """
    try:
        envelope = json.loads(body.decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FrameError(f"Invalid envelope: {exc}") from exc

    if not isinstance(envelope, dict):
        raise FrameError("Envelope must be a JSON object")
    topic = envelope.get('topic')
    stamp_ns = envelope.get('stamp_ns')
    if not isinstance(topic, str) or isinstance(stamp_ns, bool) or not isinstance(stamp_ns, int):
        raise FrameError("Envelope needs a string topic and an integer stamp_ns")
    if 'payload' not in envelope:
        raise FrameError("Envelope has no payload")
    return topic, stamp_ns, envelope['payload']


def envelope_topic(body: bytes) -> Optional[str]:
    """Topic of a frame body, or None if the body is not an envelope."""
    if body.startswith(_TOPIC_PREFIX):
        end = body.find(_STAMP_MARKER, len(_TOPIC_PREFIX))
        if end > 0:
            try:
                topic = json.loads(body[len(_TOPIC_PREFIX):end])
            except ValueError:
                topic = None
            if isinstance(topic, str):
                return topic
    # Envelopes not written by BridgeFrame take the full parse.
    try:
        return parse_envelope(body)[0]
    except FrameError:
        return None


class FrameReader:
    """Reassembles length-prefixed frames from a byte stream."""

    def __init__(self, max_size: int = MAX_FRAME_SIZE):
        self.max_size = max_size
        self._buffer = bytearray()

    def feed(self, data: bytes) -> List[bytes]:
        self._buffer += data
        frames = []
        offset = 0
        while len(self._buffer) - offset >= HEADER.size:
            (length,) = HEADER.unpack_from(self._buffer, offset)
            if length > self.max_size:
                raise FrameError(f"Frame too large: {length} bytes (max {self.max_size})")
            end = offset + HEADER.size + length
            if len(self._buffer) < end:
                break
            frames.append(bytes(self._buffer[offset + HEADER.size:end]))
            offset = end
        if offset:
            del self._buffer[:offset]
        return frames


class BridgeEndpointConfig(NamedTuple):
    """Ports and timings of one bridge instance. Port 0 binds an ephemeral port."""
    host: str = '127.0.0.1'
    rx_port: int = 5550
    tx_port: int = 5551
    heartbeat_port: int = 5552
    heartbeat_period_ms: float = 100.0
    liveness_timeout_ms: float = 500.0
    queue_depth: int = 1024
    strict_decode: bool = True

    @property
    def heartbeat_period_s(self) -> float:
        return self.heartbeat_period_ms / 1000.0

    @property
    def liveness_timeout_s(self) -> float:
        return self.liveness_timeout_ms / 1000.0

    def validate(self) -> 'BridgeEndpointConfig':
        ports = [self.rx_port, self.tx_port, self.heartbeat_port]
        for port in ports:
            if not 0 <= port <= 65535:
                raise BridgeConfigError(f"Port out of range: {port}")
        bound = [port for port in ports if port != 0]
        if len(set(bound)) != len(bound):
            raise BridgeConfigError(f"Bridge ports must be distinct, got {ports}")
        if self.heartbeat_period_ms <= 0:
            raise BridgeConfigError("Heartbeat period must be positive")
        if self.liveness_timeout_ms <= self.heartbeat_period_ms:
            raise BridgeConfigError("Liveness timeout must exceed the heartbeat period")
        if self.queue_depth < 1:
            raise BridgeConfigError("Queue depth must be at least 1")
        return self

    @classmethod
    def from_settings(cls, **overrides) -> 'BridgeEndpointConfig':
        """Build the endpoint config from ``settings.FORMATION`` plus overrides."""
        values = {}
        try:
            from django.conf import settings
            if settings.configured:
                formation = getattr(settings, 'FORMATION', {})
                values = {
                    'host': formation.get('BRIDGE_HOST', cls._field_defaults['host']),
                    'rx_port': formation.get('BRIDGE_RX_PORT', cls._field_defaults['rx_port']),
                    'tx_port': formation.get('BRIDGE_TX_PORT', cls._field_defaults['tx_port']),
                    'heartbeat_port': formation.get('BRIDGE_HEARTBEAT_PORT',
                                                    cls._field_defaults['heartbeat_port']),
                    'heartbeat_period_ms': formation.get('BRIDGE_HEARTBEAT_PERIOD_MS',
                                                         cls._field_defaults['heartbeat_period_ms']),
                    'liveness_timeout_ms': formation.get('BRIDGE_LIVENESS_TIMEOUT_MS',
                                                         cls._field_defaults['liveness_timeout_ms']),
                    'queue_depth': formation.get('BRIDGE_QUEUE_DEPTH', cls._field_defaults['queue_depth']),
                    'strict_decode': formation.get('BRIDGE_STRICT_DECODE',
                                                   cls._field_defaults['strict_decode']),
                }
        except ImportError:
            pass
        values.update({key: value for key, value in overrides.items() if value is not None})
        return cls(**values).validate()


class ConnectionState(NamedTuple):
    """Liveness of the peer on the heartbeat channel."""
    state: LinkState
    last_counter: Optional[int] = None
    last_heartbeat_wall: Optional[float] = None


class HeartbeatMonitor:
    """
    Liveness state machine fed by inbound heartbeats.

    Connected while heartbeats arrive at least every two periods, Degraded
    after that, Lost once nothing arrived within the liveness timeout.
    """

    def __init__(self, period_s: float, timeout_s: float):
        self.period_s = period_s
        self.timeout_s = timeout_s
        self._last_seen: Optional[float] = None
        self._last_counter: Optional[int] = None
        self._last_wall: Optional[float] = None
        self.restarts = 0

    def record(self, counter: int, now: float) -> None:
        if self._last_counter is not None and counter <= self._last_counter:
            self.restarts += 1
            logger.debug(f"Heartbeat counter restarted ({self._last_counter} -> {counter})")
        self._last_counter = counter
        self._last_seen = now
        self._last_wall = time.time()

    def evaluate(self, now: float) -> ConnectionState:
        if self._last_seen is None or now - self._last_seen > self.timeout_s:
            state = LinkState.LOST
        elif now - self._last_seen > 2.0 * self.period_s:
            state = LinkState.DEGRADED
        else:
            state = LinkState.CONNECTED
        return ConnectionState(state=state, last_counter=self._last_counter,
                               last_heartbeat_wall=self._last_wall)


class TopicStats(NamedTuple):
    """Per-topic counters; inter-arrival statistics are in milliseconds."""
    sent: int = 0
    received: int = 0
    delivered: int = 0
    dropped_unknown: int = 0
    dropped_malformed: int = 0
    dropped_overflow: int = 0
    dropped_link: int = 0
    dropped_hub: int = 0
    interarrival_mean_ms: float = 0.0
    interarrival_std_ms: float = 0.0

    @property
    def dropped(self) -> int:
        return (self.dropped_unknown + self.dropped_malformed + self.dropped_overflow + self.dropped_link
                + self.dropped_hub)


class _TopicCounters:
    __slots__ = ('sent', 'received', 'delivered', 'dropped_unknown', 'dropped_malformed',
                 'dropped_overflow', 'dropped_link', 'dropped_hub', 'last_arrival', 'intervals', 'mean', 'm2')

    def __init__(self):
        self.sent = self.received = self.delivered = 0
        self.dropped_unknown = self.dropped_malformed = self.dropped_overflow = self.dropped_link = 0
        self.dropped_hub = 0
        self.last_arrival: Optional[float] = None
        self.intervals = 0
        self.mean = 0.0
        self.m2 = 0.0

    def arrival(self, now: float) -> None:
        if self.last_arrival is not None:
            interval_ms = (now - self.last_arrival) * 1000.0
            self.intervals += 1
            delta = interval_ms - self.mean
            self.mean += delta / self.intervals
            self.m2 += delta * (interval_ms - self.mean)
        self.last_arrival = now

    def snapshot(self) -> TopicStats:
        std = math.sqrt(self.m2 / (self.intervals - 1)) if self.intervals > 1 else 0.0
        return TopicStats(
            sent=self.sent, received=self.received, delivered=self.delivered,
            dropped_unknown=self.dropped_unknown, dropped_malformed=self.dropped_malformed,
            dropped_overflow=self.dropped_overflow, dropped_link=self.dropped_link, dropped_hub=self.dropped_hub,
            interarrival_mean_ms=self.mean, interarrival_std_ms=std,
        )


class ReceivedMessage(NamedTuple):
    """A decoded inbound message handed to subscription sinks."""
    topic: str
    stamp_ns: int
    value: MessageValue
    received_at: float


def _close_quietly(sock: Optional[socket.socket]) -> None:
    if sock is None:
        return
    try:
        sock.shutdown(socket.SHUT_RDWR)
    except OSError:
        pass
    try:
        sock.close()
    except OSError:
        pass


# Hub

class _HubTxConnection:
    """
    One outbound tx connection of the hub with a bounded drop-oldest queue.

    Drops are tallied per topic and announced to the client with a
    ``/bridge/dropped`` notice written ahead of the next batch.
    """

    def __init__(self, hub: 'BridgeServer', sock: socket.socket, address):
        self.hub = hub
        self.sock = sock
        self.address = address
        self.queue: Deque[Tuple[Optional[str], bytes]] = deque()
        self.cv = threading.Condition()
        self.closed = False
        self.dropped = 0
        self.unannounced: Dict[str, int] = {}
        self.writer = threading.Thread(target=self._write_loop, daemon=True, name=f"bridge-hub-tx-{address}")
        self.watcher = threading.Thread(target=self._watch_loop, daemon=True, name=f"bridge-hub-txw-{address}")

    def start(self) -> None:
        self.writer.start()
        self.watcher.start()

    def enqueue(self, frame: bytes, topic: Optional[str] = None) -> None:
        with self.cv:
            if self.closed:
                return
            if len(self.queue) >= self.hub.config.queue_depth:
                dropped_topic, _ = self.queue.popleft()
                self.dropped += 1
                if dropped_topic is not None:
                    self.unannounced[dropped_topic] = self.unannounced.get(dropped_topic, 0) + 1
                self.hub._count_overflow(dropped_topic)
            self.queue.append((topic, frame))
            self.cv.notify()

    def close(self) -> None:
        with self.cv:
            if self.closed:
                return
            self.closed = True
            self.cv.notify_all()
        _close_quietly(self.sock)
        self.hub._forget_tx(self)

    def _write_loop(self) -> None:
        while True:
            with self.cv:
                while not self.queue and not self.closed:
                    self.cv.wait()
                if self.closed:
                    return
                batch = [self.queue.popleft()[1] for _ in range(min(SEND_BATCH, len(self.queue)))]
                drops, self.unannounced = self.unannounced, {}
            wire = b''.join(batch)
            if drops:
                wire = _drop_notice(drops) + wire
            try:
                self.sock.sendall(wire)
                self.hub._count_out(len(batch))
            except OSError:
                self.close()
                return

    def _watch_loop(self) -> None:
        # Clients never write on tx; EOF means the client went away.
        try:
            while not self.closed:
                if not self.sock.recv(4096):
                    break
        except OSError:
            pass
        self.close()


class HubStats(NamedTuple):
    frames_in: int
    frames_out: int
    dropped_overflow: int
    tx_connections: int
    rx_connections: int


class BridgeServer:
    """
    Bridge hub binding the rx, tx and heartbeat channels.

    Every frame received on rx is forwarded, in arrival order, to every tx
    connection. Each tx connection has its own bounded queue so a slow
    client cannot stall the others.
    """

    def __init__(self, config: Optional[BridgeEndpointConfig] = None, name: str = 'bridge'):
        self.config = (config or BridgeEndpointConfig.from_settings()).validate()
        self.name = name
        self.logger = logging.getLogger(f"{__name__}.{self.__class__.__name__}")
        self._stop = threading.Event()
        self._lock = threading.Lock()
        self._listeners: Dict[str, socket.socket] = {}
        self._threads: List[threading.Thread] = []
        self._tx: List[_HubTxConnection] = []
        self._rx_socks: List[socket.socket] = []
        self._hb_socks: List[socket.socket] = []
        self._peers: Dict[str, HeartbeatMonitor] = {}
        self._frames_in = 0
        self._frames_out = 0
        self._dropped_overflow = 0
        self._overflow_by_topic: Dict[str, int] = {}
        self._started = False

    @property
    def endpoint(self) -> BridgeEndpointConfig:
        """Config with the actually bound ports (differs when port 0 was requested)."""
        if not self._started:
            return self.config
        return self.config._replace(
            rx_port=self._listeners['rx'].getsockname()[1],
            tx_port=self._listeners['tx'].getsockname()[1],
            heartbeat_port=self._listeners['heartbeat'].getsockname()[1],
        )

    def start(self) -> 'BridgeServer':
        """
        Bind the three channels and start serving.

        Raises:
            PortBindError: If any port is unavailable
        """
        if self._started:
            return self
        channels = [('rx', self.config.rx_port, self._serve_rx),
                    ('tx', self.config.tx_port, self._serve_tx),
                    ('heartbeat', self.config.heartbeat_port, self._serve_heartbeat)]
        try:
            for channel, port, _ in channels:
                self._listeners[channel] = self._bind(port)
        except PortBindError:
            for sock in self._listeners.values():
                _close_quietly(sock)
            self._listeners.clear()
            raise

        self._started = True
        for channel, _, handler in channels:
            self._spawn(self._accept_loop, channel, handler, name=f"bridge-accept-{channel}")

        endpoint = self.endpoint
        self.logger.info(
            f"Bridge '{self.name}' listening on {endpoint.host} "
            f"rx={endpoint.rx_port} tx={endpoint.tx_port} heartbeat={endpoint.heartbeat_port}"
        )
        return self

    def stop(self) -> None:
        if not self._started:
            return
        self._stop.set()
        for sock in self._listeners.values():
            _close_quietly(sock)
        with self._lock:
            tx = list(self._tx)
            others = list(self._rx_socks) + list(self._hb_socks)
        for conn in tx:
            conn.close()
        for sock in others:
            _close_quietly(sock)
        for thread in self._threads:
            thread.join(timeout=2.0)
        self._started = False
        self.logger.info(f"Bridge '{self.name}' stopped")

    def __enter__(self) -> 'BridgeServer':
        return self.start()

    def __exit__(self, exc_type, exc, tb) -> None:
        self.stop()

    def stats(self) -> HubStats:
        with self._lock:
            return HubStats(frames_in=self._frames_in, frames_out=self._frames_out,
                            dropped_overflow=self._dropped_overflow, tx_connections=len(self._tx),
                            rx_connections=len(self._rx_socks))

    def overflow_by_topic(self) -> Dict[str, int]:
        """Frames dropped from full tx queues, summed over connections, per topic."""
        with self._lock:
            return dict(self._overflow_by_topic)

    def peer_states(self) -> Dict[str, ConnectionState]:
        now = time.monotonic()
        with self._lock:
            return {name: monitor.evaluate(now) for name, monitor in self._peers.items()}

    def _bind(self, port: int) -> socket.socket:
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            sock.bind((self.config.host, port))
            sock.listen(128)
        except OSError as exc:
            sock.close()
            reason = 'address already in use' if exc.errno == errno.EADDRINUSE else str(exc)
            raise PortBindError(port, reason) from exc
        sock.settimeout(POLL_INTERVAL_S)
        return sock

    def _spawn(self, target, *args, name: str) -> None:
        thread = threading.Thread(target=target, args=args, daemon=True, name=name)
        self._threads.append(thread)
        thread.start()

    def _accept_loop(self, channel: str, handler) -> None:
        listener = self._listeners[channel]
        while not self._stop.is_set():
            try:
                sock, address = listener.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            sock.settimeout(None)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self.logger.debug(f"Accepted {channel} connection from {address}")
            handler(sock, address)

    def _serve_rx(self, sock: socket.socket, address) -> None:
        with self._lock:
            self._rx_socks.append(sock)
        self._spawn(self._rx_loop, sock, address, name=f"bridge-hub-rx-{address}")

    def _rx_loop(self, sock: socket.socket, address) -> None:
        reader = FrameReader()
        try:
            while not self._stop.is_set():
                data = sock.recv(RECV_SIZE)
                if not data:
                    break
                frames = reader.feed(data)
                if not frames:
                    continue
                with self._lock:
                    self._frames_in += len(frames)
                    targets = list(self._tx)
                for frame in frames:
                    wire = HEADER.pack(len(frame)) + frame
                    topic = envelope_topic(frame)
                    for conn in targets:
                        conn.enqueue(wire, topic)
        except FrameError as exc:
            self.logger.warning(f"Closing rx connection {address}: {exc}")
        except OSError:
            pass
        finally:
            with self._lock:
                if sock in self._rx_socks:
                    self._rx_socks.remove(sock)
            _close_quietly(sock)
            self.logger.debug(f"rx connection {address} closed")

    def _serve_tx(self, sock: socket.socket, address) -> None:
        conn = _HubTxConnection(self, sock, address)
        with self._lock:
            self._tx.append(conn)
        # Frames forwarded after this marker are guaranteed to reach the client.
        conn.enqueue(BridgeFrame(READY_TOPIC, 0, b'{}').to_bytes())
        conn.start()

    def _forget_tx(self, conn: _HubTxConnection) -> None:
        with self._lock:
            if conn in self._tx:
                self._tx.remove(conn)

    def _count_out(self, count: int) -> None:
        with self._lock:
            self._frames_out += count

    def _count_overflow(self, topic: Optional[str]) -> None:
        with self._lock:
            self._dropped_overflow += 1
            key = topic or ''
            self._overflow_by_topic[key] = self._overflow_by_topic.get(key, 0) + 1

    def _serve_heartbeat(self, sock: socket.socket, address) -> None:
        with self._lock:
            self._hb_socks.append(sock)
        self._spawn(self._heartbeat_loop, sock, address, name=f"bridge-hub-hb-{address}")

    def _heartbeat_loop(self, sock: socket.socket, address) -> None:
        registry = builtin_registry()
        schema = registry.get('Heartbeat')
        period = self.config.heartbeat_period_s
        reader = FrameReader()
        counter = 0
        next_beat = time.monotonic()
        try:
            while not self._stop.is_set():
                now = time.monotonic()
                if now >= next_beat:
                    counter += 1
                    sock.sendall(_heartbeat_frame(registry, self.name, counter, 'bridge'))
                    next_beat = max(next_beat + period, now)
                sock.settimeout(max(0.001, next_beat - time.monotonic()))
                try:
                    data = sock.recv(4096)
                except socket.timeout:
                    continue
                if not data:
                    break
                for body in reader.feed(data):
                    sender, peer_counter = _read_heartbeat(body, schema, registry)
                    if sender is None:
                        continue
                    with self._lock:
                        monitor = self._peers.get(sender)
                        if monitor is None:
                            monitor = HeartbeatMonitor(period, self.config.liveness_timeout_s)
                            self._peers[sender] = monitor
                            self.logger.info(f"Peer '{sender}' connected from {address}")
                        monitor.record(peer_counter, time.monotonic())
        except (OSError, FrameError):
            pass
        finally:
            with self._lock:
                if sock in self._hb_socks:
                    self._hb_socks.remove(sock)
            _close_quietly(sock)


def _heartbeat_frame(registry: SchemaRegistry, sender: str, counter: int, role: str) -> bytes:
    value = make_value(registry, 'Heartbeat', {'sender': sender, 'counter': counter, 'role': role})
    return BridgeFrame(HEARTBEAT_TOPIC, time.monotonic_ns(), encode(value, registry)).to_bytes()


def _drop_notice(drops: Dict[str, int]) -> bytes:
    payload = json.dumps({'drops': drops}, sort_keys=True).encode('utf-8')
    return BridgeFrame(DROPPED_TOPIC, 0, payload).to_bytes()


def _read_heartbeat(body: bytes, schema: MessageSchema,
                    registry: SchemaRegistry) -> Tuple[Optional[str], int]:
    try:
        topic, _, payload = parse_envelope(body)
        if topic != HEARTBEAT_TOPIC:
            return None, 0
        value = decode_object(payload, schema, registry, strict=False)
    except (FrameError, MessageError) as exc:
        logger.debug(f"Ignoring malformed heartbeat: {exc}")
        return None, 0
    return value['sender'], value['counter']


# Client

class Publisher:
    """Handle returned by ``BridgeClient.register_publisher``."""

    def __init__(self, client: 'BridgeClient', registration: TopicRegistration):
        self.client = client
        self.registration = registration
        self.path = registration.path

    def publish(self, value: MessageValue, stamp_ns: int) -> None:
        """
        Encode ``value`` and enqueue it for transmission.

        Raises:
            MessageValidationError: If the value does not satisfy the topic schema
            TransportClosedError: If the client is closed
        """
        self.client._check_open()
        if value.schema != self.registration.schema:
            raise MessageValidationError(self.registration.schema,
                                         [f"topic {self.path} expects {self.registration.schema}, "
                                          f"got {value.schema}"])
        payload = encode(value, self.client.registry)
        self.client._enqueue(self.path, BridgeFrame(self.path, stamp_ns, payload).to_bytes())

    def publish_fields(self, fields: Dict[str, Any], stamp_ns: int) -> None:
        self.publish(MessageValue(self.registration.schema, fields), stamp_ns)


class Subscription:
    """
    Bounded per-topic delivery queue with its own dispatcher thread.

    Callbacks for one subscription run serially in arrival order.
    """

    def __init__(self, client: 'BridgeClient', registration: TopicRegistration,
                 sink: Callable[[ReceivedMessage], None]):
        self.client = client
        self.registration = registration
        self.path = registration.path
        self.schema = client.registry.get(registration.schema)
        self.sink = sink
        self._queue: Deque[ReceivedMessage] = deque()
        self._cv = threading.Condition()
        self._closed = False
        self._busy = False
        self._thread = threading.Thread(target=self._dispatch_loop, daemon=True,
                                        name=f"bridge-sub-{client.name}-{self.path}")
        self._thread.start()

    def offer(self, message: ReceivedMessage) -> bool:
        """Queue a message; returns False when the oldest queued one was dropped."""
        with self._cv:
            dropped = False
            if len(self._queue) >= self.client.config.queue_depth:
                self._queue.popleft()
                dropped = True
            self._queue.append(message)
            self._cv.notify()
        return not dropped

    @property
    def pending(self) -> int:
        with self._cv:
            return len(self._queue) + (1 if self._busy else 0)

    def close(self, timeout: float = 2.0) -> None:
        deadline = time.monotonic() + timeout
        with self._cv:
            while (self._queue or self._busy) and time.monotonic() < deadline:
                self._cv.wait(timeout=0.05)
            self._closed = True
            self._cv.notify_all()
        self._thread.join(timeout=max(0.0, deadline - time.monotonic()) + 0.1)

    def _dispatch_loop(self) -> None:
        while True:
            with self._cv:
                while not self._queue and not self._closed:
                    self._cv.wait()
                if self._closed:
                    return
                message = self._queue.popleft()
                self._busy = True
            try:
                self.sink(message)
            except Exception:
                logger.exception(f"Subscriber callback for {self.path} failed")
            finally:
                self.client._count_delivered(self.path)
                with self._cv:
                    self._busy = False
                    self._cv.notify_all()


class BridgeClient:
    """
    Connection of one process (simulator or controller) to a bridge hub.

    Publishing never blocks on the network: frames go to a bounded outbound
    queue that a sender thread drains. Inbound frames are decoded on the
    receiver thread and handed to per-topic subscription queues.
    """

    def __init__(self, name: str, role: ClientRole = ClientRole.CONTROLLER,
                 config: Optional[BridgeEndpointConfig] = None,
                 registry: Optional[SchemaRegistry] = None):
        self.name = name
        self.role = ClientRole(role)
        self.config = (config or BridgeEndpointConfig.from_settings()).validate()
        self.registry = _with_control_schemas(registry or default_registry())
        self.logger = logging.getLogger(f"{__name__}.{self.__class__.__name__}")

        self._lock = threading.RLock()
        self._publishers: Dict[Tuple[str, str, str], Publisher] = {}
        self._published_paths = set()
        self._subscriptions: Dict[str, Subscription] = {}
        self._stats: Dict[str, _TopicCounters] = {}
        self.malformed_envelopes = 0

        self._outbound: Deque[Tuple[str, bytes]] = deque()
        self._out_cv = threading.Condition()
        self._in_flight = 0

        self._monitor = HeartbeatMonitor(self.config.heartbeat_period_s, self.config.liveness_timeout_s)
        self._link = ConnectionState(LinkState.LOST)
        self._lost_since: Optional[float] = time.monotonic()
        self._state_listeners: List[Callable[[ConnectionState], None]] = []

        self._tx_ready = threading.Event()
        self._last_clock_ns: Optional[int] = None
        self._clock_publisher: Optional[Publisher] = None

        self._stop = threading.Event()
        self._closed = False
        self._started = False
        self._threads: List[threading.Thread] = []
        self._socks: Dict[str, Optional[socket.socket]] = {'rx': None, 'tx': None, 'heartbeat': None}

    # lifecycle

    def start(self) -> 'BridgeClient':
        if self._started:
            return self
        self._started = True
        for name, target in (('out', self._outbound_loop), ('in', self._inbound_loop),
                             ('hb', self._heartbeat_loop)):
            thread = threading.Thread(target=target, daemon=True, name=f"bridge-{self.name}-{name}")
            self._threads.append(thread)
            thread.start()
        self.logger.info(f"Client '{self.name}' ({self.role.value}) connecting to "
                         f"{self.config.host}:{self.config.rx_port}/{self.config.tx_port}/"
                         f"{self.config.heartbeat_port}")
        return self

    def close(self, flush_timeout: float = 2.0) -> None:
        """Flush pending frames, stop the channel threads and drain subscriptions."""
        if self._closed:
            return
        self.flush(flush_timeout)
        self._closed = True
        self._stop.set()
        with self._out_cv:
            self._out_cv.notify_all()
        for sock in list(self._socks.values()):
            _close_quietly(sock)
        for thread in self._threads:
            thread.join(timeout=2.0)
        with self._lock:
            subscriptions = list(self._subscriptions.values())
        for subscription in subscriptions:
            subscription.close()
        self.logger.info(f"Client '{self.name}' closed")

    def __enter__(self) -> 'BridgeClient':
        return self.start()

    def __exit__(self, exc_type, exc, tb) -> None:
        self.close()

    def flush(self, timeout: float = 2.0) -> bool:
        """Wait until the outbound queue is written to the hub."""
        deadline = time.monotonic() + timeout
        with self._out_cv:
            while self._outbound or self._in_flight:
                remaining = deadline - time.monotonic()
                if remaining <= 0 or not self._started:
                    return False
                self._out_cv.wait(timeout=min(remaining, 0.05))
        return True

    def wait_connected(self, timeout: float = 5.0) -> bool:
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            if self.connection_state().state == LinkState.CONNECTED and self._tx_ready.is_set() \
                    and self._socks['rx'] is not None:
                return True
            time.sleep(0.01)
        return False

    # registration

    def register_publisher(self, registration: TopicRegistration) -> Publisher:
        """
        Register a topic this client publishes on.

        Raises:
            DuplicateRegistrationError: If the (namespace, direction, topic) triple is taken
            UnknownSchemaError: If the schema is not in the registry
            DirectionError: If the direction does not match the client's role
        """
        path = registration.path
        if registration.schema not in self.registry:
            raise UnknownSchemaError(f"Unknown schema '{registration.schema}' for {path}")
        expected = Direction.OUT if self.role == ClientRole.SIMULATOR else Direction.IN
        if Direction(registration.direction) != expected:
            raise DirectionError(f"{self.role.value} clients publish on '{expected.value}' topics, "
                                 f"not {path}")
        with self._lock:
            if registration.key in self._publishers:
                raise DuplicateRegistrationError(f"Publisher for {path} already registered")
            publisher = Publisher(self, registration)
            self._publishers[registration.key] = publisher
            self._published_paths.add(path)
            self._stats.setdefault(path, _TopicCounters())
        self.logger.debug(f"Registered publisher {path} ({registration.schema})")
        return publisher

    def subscribe(self, registration: TopicRegistration,
                  sink: Callable[[ReceivedMessage], None]) -> Subscription:
        """
        Deliver decoded messages of a topic to ``sink``.

        Raises:
            DuplicateRegistrationError: If this client already subscribes to the topic
            UnknownSchemaError: If the schema is not in the registry
        """
        path = registration.path
        if registration.schema not in self.registry:
            raise UnknownSchemaError(f"Unknown schema '{registration.schema}' for {path}")
        with self._lock:
            if path in self._subscriptions:
                raise DuplicateRegistrationError(f"Subscription for {path} already registered")
            subscription = Subscription(self, registration, sink)
            self._subscriptions[path] = subscription
            self._stats.setdefault(path, _TopicCounters())
        self.logger.debug(f"Subscribed to {path} ({registration.schema})")
        return subscription

    def subscribe_clock(self, sink: Callable[[ReceivedMessage], None]) -> Subscription:
        return self.subscribe(clock_registration(), sink)

    def publish_clock(self, sim_time_ns: int) -> None:
        """
        Publish simulation time on ``/clock``.

        Raises:
            NonMonotonicClockError: If ``sim_time_ns`` is below the last published value
            DirectionError: If called by a controller client
        """
        with self._lock:
            if self._last_clock_ns is not None and sim_time_ns < self._last_clock_ns:
                raise NonMonotonicClockError(
                    f"Clock would go backwards: {sim_time_ns} < {self._last_clock_ns}"
                )
            if self._clock_publisher is None:
                self._clock_publisher = self.register_publisher(clock_registration())
            self._last_clock_ns = sim_time_ns
            publisher = self._clock_publisher
        publisher.publish(MessageValue('Clock', {'sim_time_ns': int(sim_time_ns)}), sim_time_ns)

    # liveness and stats

    def connection_state(self) -> ConnectionState:
        with self._lock:
            return self._monitor.evaluate(time.monotonic())

    def lost_for(self) -> float:
        """Seconds the hub link has been Lost (0 while alive)."""
        with self._lock:
            state = self._monitor.evaluate(time.monotonic())
            if state.state != LinkState.LOST or self._lost_since is None:
                return 0.0
            return time.monotonic() - self._lost_since

    def add_state_listener(self, listener: Callable[[ConnectionState], None]) -> None:
        with self._lock:
            self._state_listeners.append(listener)

    def bridge_stats(self) -> Dict[str, TopicStats]:
        with self._lock:
            return {path: counters.snapshot() for path, counters in self._stats.items()}

    def topic_stats(self, path: str) -> TopicStats:
        with self._lock:
            counters = self._stats.get(path)
            return counters.snapshot() if counters else TopicStats()

    # internals

    def _check_open(self) -> None:
        if self._closed:
            raise TransportClosedError(f"Client '{self.name}' is closed")

    def _counters(self, path: str) -> _TopicCounters:
        counters = self._stats.get(path)
        if counters is None:
            counters = self._stats[path] = _TopicCounters()
        return counters

    def _enqueue(self, path: str, frame: bytes) -> None:
        with self._out_cv:
            if self._closed:
                raise TransportClosedError(f"Client '{self.name}' is closed")
            dropped_path = None
            if len(self._outbound) >= self.config.queue_depth:
                dropped_path, _ = self._outbound.popleft()
            self._outbound.append((path, frame))
            self._out_cv.notify()
        with self._lock:
            self._counters(path).sent += 1
            if dropped_path is not None:
                self._counters(dropped_path).dropped_overflow += 1
        if dropped_path is not None:
            self.logger.warning(f"Outbound queue full on '{self.name}', dropped oldest frame of {dropped_path}")

    def _count_delivered(self, path: str) -> None:
        with self._lock:
            self._counters(path).delivered += 1

    def _connect(self, channel: str, port: int) -> Optional[socket.socket]:
        try:
            sock = socket.create_connection((self.config.host, port), timeout=self.config.heartbeat_period_s)
        except OSError:
            return None
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._socks[channel] = sock
        return sock

    def _disconnect(self, channel: str) -> None:
        sock = self._socks.get(channel)
        self._socks[channel] = None
        _close_quietly(sock)

    def _outbound_loop(self) -> None:
        while not self._stop.is_set():
            sock = self._connect('rx', self.config.rx_port)
            if sock is None:
                self._stop.wait(self.config.heartbeat_period_s)
                continue
            sock.settimeout(None)
            try:
                while True:
                    with self._out_cv:
                        while not self._outbound and not self._stop.is_set():
                            self._out_cv.wait(timeout=POLL_INTERVAL_S)
                        if self._stop.is_set() and not self._outbound:
                            return
                        batch = [self._outbound.popleft()
                                 for _ in range(min(SEND_BATCH, len(self._outbound)))]
                        self._in_flight = len(batch)
                    try:
                        sock.sendall(b''.join(frame for _, frame in batch))
                    except OSError:
                        # Frames of a failed write are dropped, never resent.
                        with self._lock:
                            for path, _ in batch:
                                self._counters(path).dropped_link += 1
                        self.logger.warning(f"Client '{self.name}' lost rx link, dropped {len(batch)} frames")
                        raise
                    finally:
                        with self._out_cv:
                            self._in_flight = 0
                            self._out_cv.notify_all()
            except OSError:
                pass
            finally:
                self._disconnect('rx')

    def _inbound_loop(self) -> None:
        while not self._stop.is_set():
            sock = self._connect('tx', self.config.tx_port)
            if sock is None:
                self._stop.wait(self.config.heartbeat_period_s)
                continue
            sock.settimeout(POLL_INTERVAL_S)
            reader = FrameReader()
            try:
                while not self._stop.is_set():
                    try:
                        data = sock.recv(RECV_SIZE)
                    except socket.timeout:
                        continue
                    if not data:
                        break
                    self._receive_chunk(reader, data)
            except FrameError as exc:
                self.logger.warning(f"Client '{self.name}' dropping tx link: {exc}")
            except OSError:
                pass
            finally:
                self._tx_ready.clear()
                self._disconnect('tx')

    def _receive_chunk(self, reader: FrameReader, data: bytes, clock: Callable[[], float] = time.monotonic) -> None:
        # One read can carry many frames; each gets its own arrival time.
        for body in reader.feed(data):
            self._handle_inbound(body, clock())

    def _handle_inbound(self, body: bytes, now: float) -> None:
        try:
            topic, stamp_ns, payload = parse_envelope(body)
        except FrameError as exc:
            with self._lock:
                self.malformed_envelopes += 1
            self.logger.debug(f"Malformed envelope on '{self.name}': {exc}")
            return

        if topic == READY_TOPIC:
            self._tx_ready.set()
            return
        if topic == DROPPED_TOPIC:
            self._book_hub_drops(payload)
            return

        with self._lock:
            subscription = self._subscriptions.get(topic)
            counters = self._counters(topic)
            if subscription is None:
                # The hub echoes our own publications back; those are not drops.
                if topic not in self._published_paths:
                    counters.dropped_unknown += 1
                return
            counters.received += 1
            counters.arrival(now)

        try:
            value = decode_object(payload, subscription.schema, self.registry, self.config.strict_decode)
        except MessageError as exc:
            with self._lock:
                counters.dropped_malformed += 1
            self.logger.warning(f"Dropping malformed payload on {topic}: {exc}")
            return

        if not subscription.offer(ReceivedMessage(topic, stamp_ns, value, now)):
            with self._lock:
                counters.dropped_overflow += 1

    def _book_hub_drops(self, payload: Any) -> None:
        """Count hub overflow on subscribed topics; echoes of our own frames are ignored."""
        drops = payload.get('drops') if isinstance(payload, dict) else None
        if not isinstance(drops, dict):
            self.logger.debug(f"Ignoring malformed drop notice on '{self.name}'")
            return
        booked = 0
        with self._lock:
            for path, count in drops.items():
                if path in self._subscriptions and isinstance(count, int) and not isinstance(count, bool):
                    self._counters(path).dropped_hub += count
                    booked += count
        if booked:
            self.logger.warning(f"Hub dropped {booked} frames bound for '{self.name}'")

    def _heartbeat_loop(self) -> None:
        period = self.config.heartbeat_period_s
        schema = self.registry.get('Heartbeat')
        counter = 0
        while not self._stop.is_set():
            self._update_link()
            sock = self._connect('heartbeat', self.config.heartbeat_port)
            if sock is None:
                self._stop.wait(period)
                continue
            reader = FrameReader()
            next_beat = time.monotonic()
            try:
                while not self._stop.is_set():
                    now = time.monotonic()
                    if now >= next_beat:
                        counter += 1
                        sock.sendall(_heartbeat_frame(self.registry, self.name, counter, self.role.value))
                        next_beat = max(next_beat + period, now)
                    self._update_link()
                    sock.settimeout(max(0.001, next_beat - time.monotonic()))
                    try:
                        data = sock.recv(4096)
                    except socket.timeout:
                        continue
                    if not data:
                        break
                    for body in reader.feed(data):
                        sender, peer_counter = _read_heartbeat(body, schema, self.registry)
                        if sender is not None:
                            with self._lock:
                                self._monitor.record(peer_counter, time.monotonic())
            except (OSError, FrameError):
                pass
            finally:
                self._disconnect('heartbeat')

    def _update_link(self) -> None:
        now = time.monotonic()
        with self._lock:
            state = self._monitor.evaluate(now)
            changed = state.state != self._link.state
            if changed and state.state == LinkState.LOST:
                self._lost_since = now
            self._link = state
            listeners = list(self._state_listeners) if changed else []
        if not changed:
            return
        if state.state == LinkState.CONNECTED:
            self.logger.info(f"Client '{self.name}' link {state.state.value}")
        else:
            self.logger.warning(f"Client '{self.name}' link {state.state.value}")
        for listener in listeners:
            try:
                listener(state)
            except Exception:
                self.logger.exception("Link state listener failed")


def _with_control_schemas(registry: SchemaRegistry) -> SchemaRegistry:
    missing = [schema for schema in builtin_registry()
               if schema.name in ('Clock', 'Heartbeat') and schema.name not in registry]
    if not missing:
        return registry
    return SchemaRegistry(list(registry) + missing)
