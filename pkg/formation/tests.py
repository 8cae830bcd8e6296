from django.test import TestCase
from django.core.exceptions import ValidationError
from django.db import IntegrityError
from django.utils import timezone
from .models import ScenarioRun, AgentSummary, StressResult
from .serializers import ScenarioConfigSerializer, StressConfigSerializer, ScenarioRunSerializer


class ScenarioRunModelTest(TestCase):
    def test_create_run(self):
        """Test creating a pending run."""
        run = ScenarioRun.objects.create(name="formation3", scenario_path="scenarios/formation3.yaml",
                                         duration_s=120.0)
        self.assertEqual(run.status, 'pending')
        self.assertEqual(run.sim_speed, 1.0)
        self.assertFalse(run.single_process)
        self.assertEqual(str(run), f"Run {run.id} - formation3 (pending)")
        self.assertFalse(run.is_complete())
        self.assertFalse(run.is_successful())

    def test_run_status_methods(self):
        """Test run status helper methods."""
        run = ScenarioRun.objects.create(name="crossing", scenario_path="scenarios/crossing.yaml",
                                         duration_s=60.0)

        run.status = 'completed'
        run.save()
        self.assertTrue(run.is_complete())
        self.assertTrue(run.is_successful())

        run.status = 'failed'
        run.save()
        self.assertTrue(run.is_complete())
        self.assertFalse(run.is_successful())

    def test_negative_duration_is_invalid(self):
        with self.assertRaises(ValidationError):
            ScenarioRun(name="bad", scenario_path="bad.yaml", duration_s=-1.0).full_clean()


class AgentSummaryModelTest(TestCase):
    def setUp(self):
        self.run = ScenarioRun.objects.create(name="formation3", scenario_path="scenarios/formation3.yaml",
                                              duration_s=120.0, status='completed', completed_at=timezone.now())

    def test_one_summary_per_namespace(self):
        AgentSummary.objects.create(run=self.run, namespace="follower1", role="follower",
                                    max_error_m=0.3, rms_error_m=0.1, steady_state_error_m=0.05)
        with self.assertRaises(IntegrityError):
            AgentSummary.objects.create(run=self.run, namespace="follower1", role="follower",
                                        max_error_m=0.3, rms_error_m=0.1, steady_state_error_m=0.05)

    def test_summaries_are_deleted_with_the_run(self):
        AgentSummary.objects.create(run=self.run, namespace="leader", role="leader",
                                    max_error_m=0.01, rms_error_m=0.01, steady_state_error_m=0.01)
        self.run.delete()
        self.assertEqual(AgentSummary.objects.count(), 0)


class StressResultModelTest(TestCase):
    def test_achieved_rate_above_target_is_invalid(self):
        """Achieved rate may overshoot the target by at most 2%."""
        result = StressResult(sim_speed=1.0, spacecraft=1, target_hz=100.0, achieved_hz=103.0,
                              std_ms=1.0, duration_s=10.0)
        with self.assertRaises(ValidationError):
            result.full_clean()

        result.achieved_hz = 101.5
        result.full_clean()


class ScenarioConfigSerializerTest(TestCase):
    """Scenario validation rules not covered by file loading."""

    def data(self, agents):
        return {'name': 'unit', 'agents': agents}

    def test_defaults_fill_every_section(self):
        serializer = ScenarioConfigSerializer(data=self.data([{'namespace': 'leader', 'role': 'leader'}]))
        self.assertTrue(serializer.is_valid(), serializer.errors)
        data = serializer.validated_data
        self.assertEqual(data['control']['horizon'], 30)
        self.assertEqual(data['thrusters']['pwm_hz'], 10.0)
        self.assertEqual(data['body']['mass_kg'], 17.8)

    def test_leader_is_required(self):
        serializer = ScenarioConfigSerializer(data=self.data([
            {'namespace': 'follower', 'role': 'follower', 'offset': [-1.0, 0.3, 0.0]},
        ]))
        self.assertFalse(serializer.is_valid())
        self.assertIn('agents', serializer.errors)

    def test_follower_must_name_its_leader_among_several(self):
        agents = [
            {'namespace': 'west', 'role': 'leader'},
            {'namespace': 'east', 'role': 'leader'},
            {'namespace': 'wing', 'role': 'follower', 'offset': [-1.0, 0.0, 0.0]},
        ]
        self.assertFalse(ScenarioConfigSerializer(data=self.data(agents)).is_valid())

        agents[2]['leader'] = 'east'
        serializer = ScenarioConfigSerializer(data=self.data(agents))
        self.assertTrue(serializer.is_valid(), serializer.errors)

        agents[2]['leader'] = 'wing'
        self.assertFalse(ScenarioConfigSerializer(data=self.data(agents)).is_valid())

    def test_duplicate_namespaces(self):
        serializer = ScenarioConfigSerializer(data=self.data([
            {'namespace': 'leader', 'role': 'leader'},
            {'namespace': 'leader', 'role': 'follower', 'offset': [0.0, 1.0, 0.0]},
        ]))
        self.assertFalse(serializer.is_valid())
        self.assertIn('Duplicate', str(serializer.errors['agents']))

    def test_pwm_rate_must_be_a_multiple_of_control_rate(self):
        data = self.data([{'namespace': 'leader', 'role': 'leader'}])
        data['thrusters'] = {'pwm_hz': 12.0}
        serializer = ScenarioConfigSerializer(data=data)
        self.assertFalse(serializer.is_valid())
        self.assertIn('thrusters', serializer.errors)


class StressConfigSerializerTest(TestCase):
    def test_valid(self):
        serializer = StressConfigSerializer(data={'spacecraft': 100, 'target_hz': 100.0, 'duration_s': 10.0})
        self.assertTrue(serializer.is_valid(), serializer.errors)

    def test_invalid_values(self):
        for data in ({'duration_s': 9.0}, {'sim_speed': 0.0}, {'target_hz': 0.0}, {'spacecraft': 0}):
            serializer = StressConfigSerializer(data=data)
            self.assertFalse(serializer.is_valid(), data)


class ScenarioRunSerializerTest(TestCase):
    def test_nested_agents(self):
        run = ScenarioRun.objects.create(name="formation3", scenario_path="scenarios/formation3.yaml",
                                         duration_s=120.0)
        AgentSummary.objects.create(run=run, namespace="leader", role="leader",
                                    max_error_m=0.01, rms_error_m=0.01, steady_state_error_m=0.01)
        data = ScenarioRunSerializer(run).data
        self.assertEqual(data['agent_count'], 1)
        self.assertEqual(data['agents'][0]['namespace'], 'leader')
