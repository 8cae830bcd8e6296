"""
Tests for the scenario service.

Most tests replace the simulator and agents with mocks that write a small
run log; the tagged tests run the real closed loop.
"""

import json
import tempfile
import uuid
from datetime import timedelta
from pathlib import Path
from unittest.mock import MagicMock, patch

from django.test import TestCase, tag
from django.utils import timezone

from .bridge import BridgeServer, PortBindError
from .models import AgentSummary, ScenarioRun, StressResult
from .services import (
    RunNotFoundError,
    ScenarioNotFoundError,
    ScenarioService,
    ScenarioServiceError,
)
from .sim import ScenarioConfigError, SimulationResult
from .stress import StressConfig, StressReport
from .test_bridge import ephemeral_config
from .test_export import META, step_record
from .test_sim import SCENARIO_DIR


FORMATION3 = SCENARIO_DIR / 'formation3.yaml'


def fake_run_scenario(step_count=4, follower_error=0.1):
    """Build a run_scenario replacement writing a three-agent log."""

    def run(config, log_path, bridge_config=None, **kwargs):
        log_path = Path(log_path)
        with log_path.open('w') as log:
            log.write(json.dumps(META) + '\n')
            for k in range(step_count):
                for agent in META['agents']:
                    ref = agent['offset'] or [0.0, 0.0, 0.0]
                    position = [ref[0] + (follower_error if agent['role'] == 'follower' else 0.0), ref[1], ref[2]]
                    log.write(json.dumps(step_record(k, agent['ns'], position, ref)) + '\n')
        return SimulationResult(log_path=log_path, steps=step_count, held_commands={},
                                final_states={}, min_separation=0.6)

    return run


class ScenarioServiceTestCase(TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.service = ScenarioService(output_dir=self.tmp.name, settle_s=0.0)
        self.bridge_config = ephemeral_config()


class StartRunTest(ScenarioServiceTestCase):
    """Test run orchestration and record keeping."""

    @patch('formation.services.start_agents', return_value=[])
    @patch('formation.services.run_scenario')
    def test_single_process_run_completes(self, mock_run, mock_agents):
        mock_run.side_effect = fake_run_scenario()
        run = self.service.start_run(FORMATION3, single_process=True, bridge_config=self.bridge_config)

        run.refresh_from_db()
        self.assertEqual(run.status, 'completed')
        self.assertEqual(run.name, 'formation3')
        self.assertTrue(run.single_process)
        self.assertEqual(run.control_steps, 4)
        self.assertAlmostEqual(run.min_separation_m, 0.6)
        self.assertTrue(Path(run.log_path).is_file())
        self.assertIsNotNone(run.completed_at)

        summaries = {summary.namespace: summary for summary in run.agents.all()}
        self.assertEqual(set(summaries), {'leader', 'follower1', 'follower2'})
        self.assertEqual(summaries['leader'].role, 'leader')
        self.assertAlmostEqual(summaries['follower1'].max_error_m, 0.1)
        self.assertAlmostEqual(summaries['leader'].max_error_m, 0.0)

        mock_agents.assert_called_once()
        # run_scenario gets the bound hub endpoint, not the requested port 0
        endpoint = mock_run.call_args[0][2]
        self.assertNotEqual(endpoint.rx_port, 0)

    @patch('formation.services.start_agents', return_value=[])
    @patch('formation.services.run_scenario')
    def test_overrides_are_recorded(self, mock_run, mock_agents):
        mock_run.side_effect = fake_run_scenario()
        run = self.service.start_run(FORMATION3, duration_s=30.0, speed=0.0, single_process=True,
                                     bridge_config=self.bridge_config)
        self.assertEqual(run.duration_s, 30.0)
        self.assertEqual(run.sim_speed, 0.0)
        config = mock_run.call_args[0][0]
        self.assertEqual(config.duration_s, 30.0)

    @patch('formation.services.subprocess.Popen')
    @patch('formation.services.run_scenario')
    def test_default_mode_spawns_one_agent_process_each(self, mock_run, mock_popen):
        mock_run.side_effect = fake_run_scenario()
        process = MagicMock(returncode=0)
        mock_popen.return_value = process

        run = self.service.start_run(FORMATION3, bridge_config=self.bridge_config, steps=4)

        self.assertEqual(run.status, 'completed')
        self.assertEqual(mock_popen.call_count, 3)
        commands = [call[0][0] for call in mock_popen.call_args_list]
        self.assertEqual([command[command.index('--namespace') + 1] for command in commands],
                         ['leader', 'follower1', 'follower2'])
        for command in commands:
            self.assertEqual(command[2:4], ['agent', str(FORMATION3)])
            self.assertIn('--rx-port', command)
            self.assertEqual(command[command.index('--steps') + 1], '4')
            self.assertNotEqual(command[command.index('--rx-port') + 1], '0')
        self.assertEqual(process.wait.call_count, 3)

    def test_missing_scenario(self):
        with self.assertRaises(ScenarioNotFoundError):
            self.service.start_run(Path(self.tmp.name) / 'missing.yaml')
        self.assertEqual(ScenarioRun.objects.count(), 0)

    def test_invalid_scenario_creates_no_run(self):
        path = Path(self.tmp.name) / 'bad.yaml'
        path.write_text('name: bad\nagents: []\n')
        with self.assertRaises(ScenarioConfigError):
            self.service.start_run(path)
        self.assertEqual(ScenarioRun.objects.count(), 0)

    @patch('formation.services.start_agents', return_value=[])
    @patch('formation.services.run_scenario', side_effect=RuntimeError('solver exploded'))
    def test_failure_marks_run_failed(self, mock_run, mock_agents):
        with self.assertLogs('formation.services', level='ERROR'):
            with self.assertRaisesMessage(ScenarioServiceError, 'solver exploded'):
                self.service.start_run(FORMATION3, single_process=True, bridge_config=self.bridge_config)

        run = ScenarioRun.objects.get()
        self.assertEqual(run.status, 'failed')
        self.assertIn('solver exploded', run.error_message)
        self.assertEqual(run.agents.count(), 0)

    def test_port_collision_is_reported_unchanged(self):
        hub = BridgeServer(ephemeral_config()).start()
        self.addCleanup(hub.stop)
        taken = ephemeral_config(rx_port=hub.endpoint.rx_port)
        with self.assertLogs('formation.services', level='ERROR'):
            with self.assertRaises(PortBindError):
                self.service.start_run(FORMATION3, single_process=True, bridge_config=taken)
        self.assertEqual(ScenarioRun.objects.get().status, 'failed')


class RunQueryTest(ScenarioServiceTestCase):
    """Test status, summary and cleanup queries."""

    def make_run(self, name='formation3', status='completed', completed_at=None, log_path=''):
        run = ScenarioRun.objects.create(name=name, scenario_path='scenarios/formation3.yaml', status=status,
                                         duration_s=120.0, control_steps=600, log_path=log_path,
                                         completed_at=completed_at or timezone.now())
        AgentSummary.objects.create(run=run, namespace='leader', role='leader', control_steps=600,
                                    max_error_m=0.05, rms_error_m=0.02, steady_state_error_m=0.03)
        AgentSummary.objects.create(run=run, namespace='follower1', role='follower', control_steps=600,
                                    degraded_steps=2, max_error_m=1.1, rms_error_m=0.3, steady_state_error_m=0.12)
        return run

    def test_status_of_completed_run(self):
        run = self.make_run()
        status = self.service.get_run_status(run.id)
        self.assertEqual(status['status'], 'completed')
        self.assertTrue(status['is_complete'])
        self.assertTrue(status['is_successful'])
        self.assertEqual(status['agent_count'], 2)
        self.assertEqual(status['control_steps'], 600)

    def test_status_of_failed_run_has_no_results(self):
        run = self.make_run(status='failed')
        status = self.service.get_run_status(run.id)
        self.assertFalse(status['is_successful'])
        self.assertNotIn('agent_count', status)

    def test_status_of_unknown_run(self):
        with self.assertRaises(RunNotFoundError):
            self.service.get_run_status(uuid.uuid4())

    def test_summary(self):
        run = self.make_run()
        summary = self.service.get_run_summary(run.id)
        self.assertEqual([agent['namespace'] for agent in summary['agents']], ['follower1', 'leader'])
        self.assertAlmostEqual(summary['max_follower_error_m'], 0.12)

    def test_summary_defaults_to_latest_completed_run(self):
        self.make_run(name='older', completed_at=timezone.now() - timedelta(hours=1))
        latest = self.make_run(name='latest')
        self.make_run(name='broken', status='failed')
        self.assertEqual(self.service.get_run_summary()['run_id'], str(latest.id))

    def test_summary_without_runs(self):
        with self.assertRaises(RunNotFoundError):
            self.service.get_run_summary()

    def test_cleanup_old_runs(self):
        log_path = Path(self.tmp.name) / 'old.ndjson'
        log_path.write_text('{}\n')
        old = self.make_run(completed_at=timezone.now() - timedelta(days=40), log_path=str(log_path))
        recent = self.make_run()

        self.assertEqual(self.service.cleanup_old_runs(days_old=30), 1)
        self.assertFalse(ScenarioRun.objects.filter(id=old.id).exists())
        self.assertTrue(ScenarioRun.objects.filter(id=recent.id).exists())
        self.assertFalse(log_path.exists())
        self.assertEqual(AgentSummary.objects.filter(run_id=old.id).count(), 0)


class RecordStressTest(ScenarioServiceTestCase):
    """Test persisting stress rows."""

    def test_rows_share_a_batch(self):
        reports = [
            StressReport(StressConfig(spacecraft=1, target_hz=100.0), 99.9, 1.3, 0, False, []),
            StressReport(StressConfig(spacecraft=1, target_hz=100_000.0), 4390.0, 0.2, 12, True, []),
        ]
        batch_id = self.service.record_stress(reports)
        rows = StressResult.objects.filter(batch_id=batch_id).order_by('target_hz')
        self.assertEqual(rows.count(), 2)
        self.assertFalse(rows[0].cpu_bound)
        self.assertTrue(rows[1].cpu_bound)
        self.assertEqual(rows[1].drops, 12)
        self.assertEqual(rows[0].duration_s, 10.0)


@tag('slow')
class ClosedLoopServiceTest(ScenarioServiceTestCase):
    """Real runs through hub, simulator and agent threads."""

    def test_formation_run_holds_the_formation(self):
        service = ScenarioService(output_dir=self.tmp.name, settle_s=20.0)
        run = service.start_run(FORMATION3, speed=0.0, single_process=True, bridge_config=self.bridge_config)
        self.assertEqual(run.status, 'completed')
        followers = run.agents.filter(role='follower')
        self.assertEqual(followers.count(), 2)
        for follower in followers:
            self.assertEqual(follower.control_steps, 600)
            self.assertLessEqual(follower.steady_state_error_m, 0.25)

    def test_crossing_keeps_separation(self):
        run = self.service.start_run(SCENARIO_DIR / 'crossing.yaml', speed=0.0, single_process=True,
                                     bridge_config=self.bridge_config)
        run.refresh_from_db()
        self.assertEqual(run.status, 'completed')
        self.assertGreaterEqual(run.min_separation_m, 0.35)
