"""
API tests for runs, stress results, schemas and health.
"""

import uuid

from django.test import TestCase
from django.utils import timezone
from rest_framework import status
from rest_framework.test import APIClient

from .models import AgentSummary, ScenarioRun, StressResult


class RunAPITest(TestCase):
    """Test the read-only run endpoints."""

    def setUp(self):
        self.client = APIClient()
        self.run = ScenarioRun.objects.create(
            name='formation3', scenario_path='scenarios/formation3.yaml', status='completed',
            duration_s=120.0, sim_speed=0.0, control_steps=600, min_separation_m=0.58,
            log_path='runs/formation3_1234abcd.ndjson', completed_at=timezone.now(),
        )
        AgentSummary.objects.create(run=self.run, namespace='leader', role='leader', control_steps=600,
                                    max_error_m=0.04, rms_error_m=0.01, steady_state_error_m=0.02)
        AgentSummary.objects.create(run=self.run, namespace='follower1', role='follower', control_steps=600,
                                    max_error_m=1.2, rms_error_m=0.2, steady_state_error_m=0.11)
        self.failed = ScenarioRun.objects.create(
            name='crossing', scenario_path='scenarios/crossing.yaml', status='failed', duration_s=60.0,
            error_message='Bridge lost', completed_at=timezone.now(),
        )

    def test_list_runs(self):
        response = self.client.get('/api/runs/')
        self.assertEqual(response.status_code, status.HTTP_200_OK)
        data = response.json()
        self.assertEqual(data['count'], 2)
        names = {item['name'] for item in data['results']}
        self.assertEqual(names, {'formation3', 'crossing'})

    def test_filter_by_status(self):
        response = self.client.get('/api/runs/', {'status': 'failed'})
        self.assertEqual(response.status_code, status.HTTP_200_OK)
        results = response.json()['results']
        self.assertEqual(len(results), 1)
        self.assertEqual(results[0]['error_message'], 'Bridge lost')

    def test_invalid_status_filter(self):
        response = self.client.get('/api/runs/', {'status': 'exploded'})
        self.assertEqual(response.status_code, status.HTTP_400_BAD_REQUEST)
        self.assertIn('completed', response.json()['valid_statuses'])

    def test_retrieve_run(self):
        response = self.client.get(f'/api/runs/{self.run.id}/')
        self.assertEqual(response.status_code, status.HTTP_200_OK)
        data = response.json()
        self.assertEqual(data['agent_count'], 2)
        self.assertEqual(data['control_steps'], 600)
        self.assertAlmostEqual(data['min_separation_m'], 0.58)

    def test_retrieve_unknown_run(self):
        response = self.client.get(f'/api/runs/{uuid.uuid4()}/')
        self.assertEqual(response.status_code, status.HTTP_404_NOT_FOUND)
        self.assertEqual(response.json()['error'], 'Run not found')

    def test_agents_of_run(self):
        response = self.client.get(f'/api/runs/{self.run.id}/agents/')
        self.assertEqual(response.status_code, status.HTTP_200_OK)
        data = response.json()
        self.assertEqual([agent['namespace'] for agent in data], ['follower1', 'leader'])
        self.assertAlmostEqual(data[0]['steady_state_error_m'], 0.11)

    def test_agents_of_unknown_run(self):
        response = self.client.get(f'/api/runs/{uuid.uuid4()}/agents/')
        self.assertEqual(response.status_code, status.HTTP_404_NOT_FOUND)

    def test_runs_are_read_only(self):
        response = self.client.post('/api/runs/', {'name': 'new'}, format='json')
        self.assertEqual(response.status_code, status.HTTP_405_METHOD_NOT_ALLOWED)
        response = self.client.delete(f'/api/runs/{self.run.id}/')
        self.assertEqual(response.status_code, status.HTTP_405_METHOD_NOT_ALLOWED)


class StressResultAPITest(TestCase):
    """Test the stress result endpoint."""

    def setUp(self):
        self.client = APIClient()
        self.batch_id = uuid.uuid4()
        StressResult.objects.create(batch_id=self.batch_id, sim_speed=1.0, spacecraft=1, target_hz=100.0,
                                    achieved_hz=100.0, std_ms=1.3, duration_s=10.0)
        StressResult.objects.create(batch_id=self.batch_id, sim_speed=1.0, spacecraft=100, target_hz=100.0,
                                    achieved_hz=99.8, std_ms=6.5, duration_s=10.0)
        StressResult.objects.create(sim_speed=100.0, spacecraft=1, target_hz=10000.0, achieved_hz=4390.0,
                                    std_ms=0.3, cpu_bound=True, duration_s=10.0)

    def test_list(self):
        response = self.client.get('/api/stress-results/')
        self.assertEqual(response.status_code, status.HTTP_200_OK)
        self.assertEqual(response.json()['count'], 3)

    def test_filter_by_batch(self):
        response = self.client.get('/api/stress-results/', {'batch_id': str(self.batch_id)})
        results = response.json()['results']
        self.assertEqual(len(results), 2)
        self.assertEqual({row['spacecraft'] for row in results}, {1, 100})


class SchemaAPITest(TestCase):
    """Test the schema listing over the shipped schema set."""

    def setUp(self):
        self.client = APIClient()

    def test_list_schemas(self):
        response = self.client.get('/api/schemas/')
        self.assertEqual(response.status_code, status.HTTP_200_OK)
        names = [schema['name'] for schema in response.json()]
        for name in ('SCStates', 'CmdForce', 'CmdTorque', 'PredictedTrajectory', 'Heartbeat'):
            self.assertIn(name, names)

    def test_retrieve_schema(self):
        response = self.client.get('/api/schemas/SCStates/')
        self.assertEqual(response.status_code, status.HTTP_200_OK)
        data = response.json()
        fields = {field['name']: field for field in data['fields']}
        self.assertEqual(fields['q_hb']['length'], 4)
        self.assertTrue(fields['p_h']['is_array'])
        self.assertIn('msg SCStates', data['declaration'])

    def test_unknown_schema(self):
        response = self.client.get('/api/schemas/Nope/')
        self.assertEqual(response.status_code, status.HTTP_404_NOT_FOUND)
        self.assertIn('SCStates', response.json()['available'])


class HealthCheckTest(TestCase):

    def test_health(self):
        response = APIClient().get('/api/health/')
        self.assertEqual(response.status_code, status.HTTP_200_OK)
        data = response.json()
        self.assertEqual(data['status'], 'healthy')
        self.assertGreater(data['schema_count'], 0)
        self.assertIn('rx_port', data['bridge'])
