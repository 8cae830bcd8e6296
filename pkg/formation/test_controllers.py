"""
Tests for the NMPC agent node, driven through an in-memory client.
"""

import time

import numpy as np
from django.test import SimpleTestCase

from .bridge import ReceivedMessage
from .controllers import FormationAgent
from .dynamics import RigidBodyState
from .msgs import MessageValue
from .test_sim import build_config


PERIOD_NS = 200_000_000


class RecordingClient:
    """Collects registrations and publications instead of talking to a hub."""

    def __init__(self):
        self.publications = []
        self.publishers = []
        self.subscriptions = {}

    def register_publisher(self, registration):
        client = self
        self.publishers.append(registration.path)

        class _Publisher:
            def publish_fields(self, fields, stamp_ns):
                client.publications.append((registration.topic, dict(fields), stamp_ns))

        return _Publisher()

    def subscribe(self, registration, sink):
        self.subscriptions[registration.path] = sink

    def lost_for(self):
        return 0.0

    def flush(self, timeout=2.0):
        return True

    def topics(self):
        return [topic for topic, _, _ in self.publications]


def state_message(stamp_ns, position=(0.0, 0.0, 0.0)):
    state = RigidBodyState.at_rest(position)
    value = MessageValue('SCStates', {'p_h': tuple(state.p_h), 'v_h': tuple(state.v_h), 'q_hb': tuple(state.q_hb),
                                      'omega_b': tuple(state.omega_b), 'stamp_ns': stamp_ns})
    return ReceivedMessage('/x/bsk/out/sc_states', stamp_ns, value, time.monotonic())


def prediction(stamp_ns, position=(0.0, 0.0, 0.0), points=11):
    x = RigidBodyState.at_rest(position).to_vector()
    return {
        'agent_id': 'leader',
        'stamp_ns': stamp_ns,
        'dt': 0.2,
        'points': [{'stamp_ns': stamp_ns + i * PERIOD_NS, 'x': tuple(x)} for i in range(points)],
    }


class FormationAgentTest(SimpleTestCase):
    """Test the per-step protocol of an agent."""

    def setUp(self):
        self.config = build_config(horizon=10)

    def make_agent(self, namespace, wait=0.05):
        client = RecordingClient()
        agent = FormationAgent(namespace, self.config, client, prediction_wait_s=wait)
        agent.register()
        return agent, client

    def test_registration(self):
        agent, client = self.make_agent('follower')
        self.assertEqual(client.publishers, ['/follower/bsk/in/cmd_force', '/follower/bsk/in/cmd_torque',
                                             '/follower/bsk/in/predicted_trajectory'])
        self.assertEqual(set(client.subscriptions), {'/follower/bsk/out/sc_states',
                                                     '/leader/bsk/in/predicted_trajectory'})
        self.assertEqual(agent.leader_ns, 'leader')
        self.assertEqual(agent.neighbors, [])

    def test_leader_answers_with_prediction_then_commands(self):
        agent, client = self.make_agent('leader')
        agent.handle(state_message(0))

        self.assertEqual(client.topics(), ['predicted_trajectory', 'cmd_force', 'cmd_torque'])
        _, pred, stamp = client.publications[0]
        self.assertEqual(stamp, 0)
        self.assertEqual(len(pred['points']), 11)
        self.assertEqual(pred['points'][3]['stamp_ns'], 3 * PERIOD_NS)
        self.assertFalse(pred['degraded'])
        for _, fields, stamp in client.publications[1:]:
            self.assertEqual(stamp, 0)
            self.assertEqual(fields['stamp_ns'], 0)
        np.testing.assert_allclose(client.publications[1][1]['force_b'], 0.0, atol=1e-6)

    def test_repeated_state_resends_last_answer(self):
        agent, client = self.make_agent('leader')
        agent.handle(state_message(0))
        self.assertIsNone(agent.handle(state_message(0)))
        self.assertEqual(len(client.publications), 6)
        self.assertEqual(client.topics()[3:], ['predicted_trajectory', 'cmd_force', 'cmd_torque'])
        self.assertIs(client.publications[3][1]['points'], client.publications[0][1]['points'])
        self.assertEqual(agent.steps, 1)

    def test_old_state_is_dropped(self):
        agent, client = self.make_agent('leader')
        agent.handle(state_message(PERIOD_NS))
        self.assertIsNone(agent.handle(state_message(0)))
        self.assertEqual(len(client.publications), 3)

    def test_follower_without_leader_prediction_is_degraded(self):
        agent, client = self.make_agent('follower')
        with self.assertLogs('formation', level='WARNING'):
            agent.handle(state_message(0, (-1.0, 0.3, 0.0)))
        self.assertTrue(client.publications[0][1]['degraded'])
        self.assertEqual(agent.degraded_steps, 1)

    def test_follower_in_slot_holds_still(self):
        agent, client = self.make_agent('follower')
        agent.accept_prediction('leader', prediction(0))
        agent.handle(state_message(0, (-1.0, 0.3, 0.0)))
        self.assertFalse(client.publications[0][1]['degraded'])
        np.testing.assert_allclose(client.publications[1][1]['force_b'], 0.0, atol=1e-3)

    def test_neighbor_selection_prefers_previous_step(self):
        agent, _ = self.make_agent('leader')
        agent.accept_prediction('follower', prediction(0, (-1.0, 0.3, 0.0)))
        agent.accept_prediction('follower', prediction(PERIOD_NS, (-1.0, 0.3, 0.0)))
        self.assertEqual(agent._select('follower', 0).stamp_ns, 0)
        self.assertEqual(agent._select('follower', PERIOD_NS).stamp_ns, PERIOD_NS)
        self.assertEqual(agent._select('follower', -PERIOD_NS).stamp_ns, PERIOD_NS)

    def test_history_is_bounded(self):
        agent, _ = self.make_agent('leader')
        for k in range(20):
            agent.accept_prediction('follower', prediction(k * PERIOD_NS))
        self.assertEqual(sorted(agent._predictions['follower'])[0], 12 * PERIOD_NS)

    def test_silent_neighbor_is_not_waited_for_again(self):
        agent, _ = self.make_agent('leader', wait=1.0)
        agent.handle(state_message(0))
        with self.assertLogs('formation.controllers', level='WARNING'):
            agent.handle(state_message(PERIOD_NS))
        start = time.monotonic()
        agent.handle(state_message(2 * PERIOD_NS))
        self.assertLess(time.monotonic() - start, 1.0)

        agent.accept_prediction('follower', prediction(2 * PERIOD_NS, (-1.0, 0.3, 0.0)))
        self.assertNotIn('follower', agent._silent)
