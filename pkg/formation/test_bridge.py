"""
Tests for the bridge: topic paths, framing, liveness and loopback delivery.

Integration tests run a hub on ephemeral loopback ports.
"""

import socket
import threading
import time
from unittest import mock

from django.test import SimpleTestCase, tag

from .bridge import (
    BridgeClient,
    BridgeConfigError,
    BridgeEndpointConfig,
    BridgeFrame,
    BridgeServer,
    ClientRole,
    DROPPED_TOPIC,
    Direction,
    DirectionError,
    DuplicateRegistrationError,
    FrameError,
    FrameReader,
    HeartbeatMonitor,
    InvalidTopicError,
    LinkState,
    NonMonotonicClockError,
    PortBindError,
    TOPIC_PATH_RE,
    TopicRegistration,
    TransportClosedError,
    UnknownSchemaError,
    _HubTxConnection,
    envelope_topic,
    parse_envelope,
    topic_path,
)
from .msgs import MessageValidationError, MessageValue, SchemaRegistry, default_registry


SEQ_REGISTRY = SchemaRegistry.from_text('msg Seq v1 { seq: i64; }')


def wait_until(predicate, timeout=5.0, interval=0.01):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if predicate():
            return True
        time.sleep(interval)
    return predicate()


def ephemeral_config(**overrides):
    values = dict(rx_port=0, tx_port=0, heartbeat_port=0, heartbeat_period_ms=50.0,
                  liveness_timeout_ms=250.0)
    values.update(overrides)
    return BridgeEndpointConfig(**values)


class TopicPathTest(SimpleTestCase):
    """Test the topic naming convention."""

    def test_namespaced_path(self):
        reg = TopicRegistration('leader', Direction.OUT, 'sc_states', 'SCStates')
        self.assertEqual(reg.path, '/leader/bsk/out/sc_states')
        self.assertRegex(reg.path, TOPIC_PATH_RE)

    def test_clock_is_special_cased(self):
        self.assertEqual(topic_path('', Direction.OUT, 'clock'), '/clock')

    def test_paths_match_grammar(self):
        for namespace in ('f1', 'f_2', ''):
            for direction in Direction:
                for topic in ('cmd_force', 'predicted/trajectory'):
                    self.assertRegex(topic_path(namespace, direction, topic), TOPIC_PATH_RE)

    def test_invalid_names(self):
        with self.assertRaises(InvalidTopicError):
            topic_path('bad ns', Direction.IN, 'x')
        with self.assertRaises(InvalidTopicError):
            topic_path('ns', Direction.IN, '/leading')


class FramingTest(SimpleTestCase):
    """Test length-prefixed framing and the JSON envelope."""

    def test_reader_reassembles_split_frames(self):
        wire = b''.join(BridgeFrame('/a/bsk/out/t', k, b'{"seq":%d}' % k).to_bytes() for k in range(5))
        reader = FrameReader()
        frames = []
        for index in range(0, len(wire), 7):
            frames.extend(reader.feed(wire[index:index + 7]))
        self.assertEqual(len(frames), 5)
        self.assertEqual([parse_envelope(frame)[1] for frame in frames], list(range(5)))
        self.assertEqual(parse_envelope(frames[3])[2], {'seq': 3})

    def test_header_is_big_endian_length(self):
        wire = BridgeFrame('/clock', 7, b'{}').to_bytes()
        self.assertEqual(int.from_bytes(wire[:4], 'big'), len(wire) - 4)

    def test_oversized_frame_rejected(self):
        reader = FrameReader(max_size=16)
        with self.assertRaises(FrameError):
            reader.feed((1000).to_bytes(4, 'big') + b'x')

    def test_malformed_envelopes(self):
        for body in (b'not json', b'[1,2]', b'{"topic": 3, "stamp_ns": 0, "payload": {}}',
                     b'{"topic": "/x", "stamp_ns": 0}'):
            with self.assertRaises(FrameError):
                parse_envelope(body)


class EndpointConfigTest(SimpleTestCase):
    """Test endpoint validation."""

    def test_defaults(self):
        config = BridgeEndpointConfig().validate()
        self.assertEqual((config.rx_port, config.tx_port, config.heartbeat_port), (5550, 5551, 5552))

    def test_ports_must_be_distinct(self):
        with self.assertRaises(BridgeConfigError):
            BridgeEndpointConfig(rx_port=6000, tx_port=6000).validate()

    def test_timeout_must_exceed_period(self):
        with self.assertRaises(BridgeConfigError):
            BridgeEndpointConfig(heartbeat_period_ms=100, liveness_timeout_ms=100).validate()

    def test_ephemeral_ports_allowed(self):
        ephemeral_config().validate()


class HeartbeatMonitorTest(SimpleTestCase):
    """Test the liveness state machine with explicit timestamps."""

    def test_transitions(self):
        monitor = HeartbeatMonitor(period_s=0.1, timeout_s=0.5)
        self.assertEqual(monitor.evaluate(0.0).state, LinkState.LOST)

        monitor.record(1, 1.0)
        self.assertEqual(monitor.evaluate(1.05).state, LinkState.CONNECTED)
        self.assertEqual(monitor.evaluate(1.3).state, LinkState.DEGRADED)
        self.assertEqual(monitor.evaluate(1.6).state, LinkState.LOST)

        monitor.record(1, 2.0)
        state = monitor.evaluate(2.01)
        self.assertEqual(state.state, LinkState.CONNECTED)
        self.assertEqual(state.last_counter, 1)
        self.assertEqual(monitor.restarts, 1)


class BridgeIntegrationTest(SimpleTestCase):
    """Loopback tests against a live hub."""

    def setUp(self):
        self.hub = BridgeServer(ephemeral_config()).start()
        self.config = self.hub.endpoint
        self.clients = []

    def tearDown(self):
        for client in self.clients:
            client.close(flush_timeout=0.5)
        self.hub.stop()

    def make_client(self, name, role=ClientRole.CONTROLLER, registry=None, config=None):
        client = BridgeClient(name, role, config=config or self.config, registry=registry).start()
        self.clients.append(client)
        self.assertTrue(client.wait_connected(5.0), f"{name} did not connect")
        return client

    def test_fresh_stats_are_zero(self):
        sim = self.make_client('sim', ClientRole.SIMULATOR)
        sim.register_publisher(TopicRegistration('leader', Direction.OUT, 'sc_states', 'SCStates'))
        stats = sim.bridge_stats()
        self.assertEqual(list(stats), ['/leader/bsk/out/sc_states'])
        self.assertEqual(stats['/leader/bsk/out/sc_states'].sent, 0)
        self.assertEqual(stats['/leader/bsk/out/sc_states'].dropped, 0)

    def test_registration_errors(self):
        sim = self.make_client('sim', ClientRole.SIMULATOR)
        reg = TopicRegistration('leader', Direction.OUT, 'sc_states', 'SCStates')
        sim.register_publisher(reg)
        with self.assertRaises(DuplicateRegistrationError):
            sim.register_publisher(reg)
        with self.assertRaises(UnknownSchemaError):
            sim.register_publisher(TopicRegistration('leader', Direction.OUT, 'x', 'NoSuchSchema'))
        with self.assertRaises(DirectionError):
            sim.register_publisher(TopicRegistration('leader', Direction.IN, 'cmd_force', 'CmdForce'))

        agent = self.make_client('agent')
        with self.assertRaises(DirectionError):
            agent.register_publisher(reg)

    def test_publish_and_receive_in_order(self):
        agent = self.make_client('f1')
        sim = self.make_client('sim', ClientRole.SIMULATOR)
        reg = TopicRegistration('f1', Direction.IN, 'cmd_force', 'CmdForce')
        received = []
        done = threading.Event()

        def sink(message):
            received.append(message)
            if len(received) == 2:
                done.set()

        sim.subscribe(reg, sink)
        publisher = agent.register_publisher(reg)
        first = MessageValue('CmdForce', {'force_b': (1.0, 0.0, 0.0), 'stamp_ns': 1})
        second = MessageValue('CmdForce', {'force_b': (0.0, 2.0, 0.0), 'stamp_ns': 2})
        publisher.publish(first, 1)
        publisher.publish(second, 2)

        self.assertTrue(done.wait(5.0))
        self.assertEqual(received[0].value['force_b'], (1.0, 0.0, 0.0))
        self.assertEqual(received[1].value['force_b'], (0.0, 2.0, 0.0))
        self.assertEqual([message.stamp_ns for message in received], [1, 2])
        self.assertEqual(received[0].topic, '/f1/bsk/in/cmd_force')

    def test_publish_validates_value(self):
        agent = self.make_client('f1')
        publisher = agent.register_publisher(TopicRegistration('f1', Direction.IN, 'cmd_force', 'CmdForce'))
        with self.assertRaises(MessageValidationError):
            publisher.publish(MessageValue('CmdForce', {'force_b': (1.0, 0.0)}), 0)

    def test_publish_after_close(self):
        agent = self.make_client('f1')
        publisher = agent.register_publisher(TopicRegistration('f1', Direction.IN, 'cmd_force', 'CmdForce'))
        agent.close()
        with self.assertRaises(TransportClosedError):
            publisher.publish(MessageValue('CmdForce', {'force_b': (0.0, 0.0, 0.0), 'stamp_ns': 0}), 0)

    def test_unknown_topic_counted_not_delivered(self):
        sim = self.make_client('sim', ClientRole.SIMULATOR)
        agent = self.make_client('f2')
        delivered = []
        sim.subscribe(TopicRegistration('f1', Direction.IN, 'cmd_force', 'CmdForce'), delivered.append)
        publisher = agent.register_publisher(TopicRegistration('f2', Direction.IN, 'cmd_force', 'CmdForce'))
        publisher.publish(MessageValue('CmdForce', {'force_b': (0.0, 0.0, 0.0), 'stamp_ns': 0}), 0)

        self.assertTrue(wait_until(
            lambda: sim.topic_stats('/f2/bsk/in/cmd_force').dropped_unknown == 1))
        self.assertEqual(delivered, [])

    def test_malformed_payload_dropped(self):
        sim = self.make_client('sim', ClientRole.SIMULATOR)
        delivered = []
        sim.subscribe(TopicRegistration('f1', Direction.IN, 'cmd_force', 'CmdForce'), delivered.append)

        with socket.create_connection((self.config.host, self.config.rx_port)) as raw:
            raw.sendall(BridgeFrame('/f1/bsk/in/cmd_force', 0, b'{"force_b":[1,2]}').to_bytes())
            self.assertTrue(wait_until(
                lambda: sim.topic_stats('/f1/bsk/in/cmd_force').dropped_malformed == 1))
        self.assertEqual(delivered, [])

    def test_clock_monotonic(self):
        sim = self.make_client('sim', ClientRole.SIMULATOR)
        agent = self.make_client('f1')
        stamps = []
        agent.subscribe_clock(lambda message: stamps.append(message.value['sim_time_ns']))

        for sim_time_ns in (0, 200_000_000, 200_000_000, 400_000_000):
            sim.publish_clock(sim_time_ns)
        with self.assertRaises(NonMonotonicClockError):
            sim.publish_clock(100)

        self.assertTrue(wait_until(lambda: len(stamps) == 4))
        self.assertEqual(stamps, sorted(stamps))
        with self.assertRaises(DirectionError):
            agent.publish_clock(0)

    def _sequence_run(self, count, config):
        publisher_client = self.make_client('pub', registry=SEQ_REGISTRY, config=config)
        subscriber_client = self.make_client('sub', ClientRole.SIMULATOR, registry=SEQ_REGISTRY, config=config)
        reg = TopicRegistration('seq', Direction.IN, 'numbers', 'Seq')
        seen = []
        subscriber_client.subscribe(reg, lambda message: seen.append(message.value['seq']))
        publisher = publisher_client.register_publisher(reg)

        for seq in range(count):
            publisher.publish(MessageValue('Seq', {'seq': seq}), seq)
        self.assertTrue(publisher_client.flush(30.0))

        path = reg.path
        self.assertTrue(wait_until(
            lambda: subscriber_client.topic_stats(path).received + subscriber_client.topic_stats(path).dropped_hub
            >= count - publisher_client.topic_stats(path).dropped,
            timeout=60.0))
        self.assertTrue(wait_until(
            lambda: subscriber_client.topic_stats(path).delivered
            + subscriber_client.topic_stats(path).dropped_overflow
            == subscriber_client.topic_stats(path).received, timeout=60.0))

        sent = publisher_client.topic_stats(path)
        got = subscriber_client.topic_stats(path)
        self.assertEqual(len(seen), len(set(seen)))
        self.assertEqual(seen, sorted(seen))
        self.assertEqual(sent.sent, got.received + sent.dropped + got.dropped_unknown + got.dropped_hub)
        self.assertEqual(got.dropped_hub, self.hub.overflow_by_topic().get(path, 0))
        return seen, sent, got

    def test_sequence_ordering_and_ledger(self):
        seen, sent, got = self._sequence_run(2000, self.config._replace(queue_depth=10000))
        self.assertEqual(seen, list(range(2000)))
        self.assertEqual(sent.sent, 2000)
        self.assertEqual(got.delivered, 2000)

    @tag('slow')
    def test_hundred_thousand_messages(self):
        self.hub.stop()
        self.hub = BridgeServer(ephemeral_config(queue_depth=200_000)).start()
        self.config = self.hub.endpoint
        seen, sent, got = self._sequence_run(100_000, self.config)
        self.assertEqual(seen, list(range(100_000)))
        self.assertEqual(got.received, 100_000)

    def test_subscriber_overflow_drops_oldest(self):
        config = self.config._replace(queue_depth=4)
        agent = self.make_client('pub', registry=SEQ_REGISTRY, config=config)
        sim = self.make_client('sub', ClientRole.SIMULATOR, registry=SEQ_REGISTRY, config=config)
        reg = TopicRegistration('seq', Direction.IN, 'numbers', 'Seq')
        release = threading.Event()
        seen = []

        def slow_sink(message):
            release.wait(5.0)
            seen.append(message.value['seq'])

        sim.subscribe(reg, slow_sink)
        publisher = agent.register_publisher(reg)
        for seq in range(3):
            publisher.publish(MessageValue('Seq', {'seq': seq}), seq)
            agent.flush(2.0)
        self.assertTrue(wait_until(lambda: sim.topic_stats(reg.path).received == 3))
        for seq in range(3, 20):
            publisher.publish(MessageValue('Seq', {'seq': seq}), seq)
            agent.flush(2.0)
        self.assertTrue(wait_until(lambda: sim.topic_stats(reg.path).received == 20))
        release.set()

        self.assertTrue(wait_until(
            lambda: sim.topic_stats(reg.path).delivered + sim.topic_stats(reg.path).dropped_overflow == 20))
        stats = sim.topic_stats(reg.path)
        self.assertGreater(stats.dropped_overflow, 0)
        self.assertEqual(seen, sorted(seen))
        self.assertEqual(seen[-1], 19)

    def test_heartbeat_lost_and_recovered(self):
        agent = self.make_client('f1')
        self.assertEqual(agent.connection_state().state, LinkState.CONNECTED)
        self.assertTrue(wait_until(lambda: 'f1' in self.hub.peer_states()))
        ports = self.hub.endpoint

        self.hub.stop()
        stopped_at = time.monotonic()
        self.assertTrue(wait_until(lambda: agent.connection_state().state == LinkState.LOST, timeout=2.0))
        elapsed = time.monotonic() - stopped_at
        self.assertLessEqual(elapsed, ports.liveness_timeout_s + ports.heartbeat_period_s + 0.1)

        self.hub = BridgeServer(ports).start()
        self.assertTrue(wait_until(lambda: agent.connection_state().state == LinkState.CONNECTED,
                                   timeout=5.0))

    def test_port_collision(self):
        with self.assertRaises(PortBindError) as ctx:
            BridgeServer(self.config).start()
        self.assertIn(str(self.config.rx_port), str(ctx.exception))

    def test_multiple_instances_on_distinct_ports(self):
        with BridgeServer(ephemeral_config()) as other:
            client = self.make_client('other', config=other.endpoint)
            self.assertEqual(client.connection_state().state, LinkState.CONNECTED)

    @tag('slow')
    def test_metronomic_publisher_jitter(self):
        agent = self.make_client('pub', registry=SEQ_REGISTRY)
        sim = self.make_client('sub', ClientRole.SIMULATOR, registry=SEQ_REGISTRY)
        reg = TopicRegistration('seq', Direction.IN, 'numbers', 'Seq')
        sim.subscribe(reg, lambda message: None)
        publisher = agent.register_publisher(reg)

        period = 0.01
        next_deadline = time.monotonic()
        for seq in range(500):
            next_deadline += period
            publisher.publish(MessageValue('Seq', {'seq': seq}), seq)
            time.sleep(max(0.0, next_deadline - time.monotonic()))

        self.assertTrue(wait_until(lambda: sim.topic_stats(reg.path).received == 500))
        stats = sim.topic_stats(reg.path)
        self.assertAlmostEqual(stats.interarrival_mean_ms, 10.0, delta=0.5)
        self.assertLessEqual(stats.interarrival_std_ms, 2.0)


class InboundChunkTest(SimpleTestCase):
    """Frames that share one socket read."""

    def setUp(self):
        self.reg = TopicRegistration('seq', Direction.IN, 'numbers', 'Seq')
        self.client = BridgeClient('sub', ClientRole.SIMULATOR, ephemeral_config(), SEQ_REGISTRY)
        self.addCleanup(self.client.close, 0.1)
        self.client.subscribe(self.reg, lambda message: None)

    def frame(self, seq):
        return BridgeFrame(self.reg.path, seq, f'{{"seq":{seq}}}'.encode()).to_bytes()

    def test_each_frame_gets_its_own_arrival_time(self):
        ticks = iter([10.00, 10.01, 10.02])
        chunk = self.frame(0) + self.frame(1) + self.frame(2)
        self.client._receive_chunk(FrameReader(), chunk, clock=lambda: next(ticks))

        stats = self.client.topic_stats(self.reg.path)
        self.assertEqual(stats.received, 3)
        self.assertAlmostEqual(stats.interarrival_mean_ms, 10.0, places=6)
        self.assertAlmostEqual(stats.interarrival_std_ms, 0.0, places=6)

    def test_envelope_topic(self):
        body = self.frame(7)[4:]
        self.assertEqual(envelope_topic(body), self.reg.path)
        self.assertEqual(envelope_topic(b'{"stamp_ns":1,"topic":"/a/bsk/out/b","payload":{}}'), '/a/bsk/out/b')
        self.assertIsNone(envelope_topic(b'not json'))


class HubDropNoticeTest(SimpleTestCase):
    """Hub tx overflow is tallied per topic and announced to the client."""

    def setUp(self):
        self.reg = TopicRegistration('seq', Direction.IN, 'numbers', 'Seq')
        self.hub = BridgeServer(ephemeral_config(queue_depth=2))
        self.written = []
        sock = mock.Mock()
        sock.sendall.side_effect = self.written.append
        self.conn = _HubTxConnection(self.hub, sock, 'loopback')
        self.addCleanup(self.conn.close)

    def overflow(self, count):
        for seq in range(count):
            frame = BridgeFrame(self.reg.path, seq, f'{{"seq":{seq}}}'.encode()).to_bytes()
            self.conn.enqueue(frame, self.reg.path)
        self.conn.writer.start()
        self.assertTrue(wait_until(lambda: self.written))
        return b''.join(self.written)

    def test_overflow_is_announced_before_remaining_frames(self):
        wire = self.overflow(5)

        self.assertEqual(self.conn.dropped, 3)
        self.assertEqual(self.hub.overflow_by_topic(), {self.reg.path: 3})
        bodies = list(FrameReader().feed(wire))
        self.assertEqual(parse_envelope(bodies[0]), (DROPPED_TOPIC, 0, {'drops': {self.reg.path: 3}}))
        self.assertEqual([parse_envelope(body)[2]['seq'] for body in bodies[1:]], [3, 4])

    def test_subscriber_books_hub_drops(self):
        wire = self.overflow(5)
        client = BridgeClient('sub', ClientRole.SIMULATOR, ephemeral_config(), SEQ_REGISTRY)
        self.addCleanup(client.close, 0.1)
        client.subscribe(self.reg, lambda message: None)

        client._receive_chunk(FrameReader(), wire)

        stats = client.topic_stats(self.reg.path)
        self.assertEqual(stats.dropped_hub, 3)
        self.assertEqual(stats.received, 2)
        self.assertEqual(stats.received + stats.dropped_hub, 5)

    def test_notice_for_unsubscribed_topic_is_ignored(self):
        wire = self.overflow(5)
        client = BridgeClient('pub', ClientRole.CONTROLLER, ephemeral_config(), SEQ_REGISTRY)
        self.addCleanup(client.close, 0.1)

        client._receive_chunk(FrameReader(), wire)

        self.assertEqual(client.topic_stats(self.reg.path).dropped_hub, 0)


class RegistryDefaultsTest(SimpleTestCase):
    def test_client_adds_control_schemas(self):
        client = BridgeClient('x', config=ephemeral_config(), registry=SEQ_REGISTRY)
        self.assertIn('Clock', client.registry)
        self.assertIn('Heartbeat', client.registry)
        self.assertIn('SCStates', default_registry())
