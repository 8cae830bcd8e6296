"""
Service layer for scenario runs.

This module provides the ScenarioService class that starts formation runs
(bridge, simulator and NMPC agents), keeps their ``ScenarioRun`` records
up to date, summarizes run logs into ``AgentSummary`` rows and records
stress results.
"""

import logging
import subprocess
import sys
import uuid
from datetime import timedelta
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional
from uuid import UUID

from django.conf import settings
from django.db import transaction
from django.utils import timezone

from .bridge import BridgeEndpointConfig, BridgeServer, PortBindError
from .controllers import start_agents
from .export import DEFAULT_SETTLE_S, read_run_log, summarize_run
from .models import AgentSummary, ScenarioRun, StressResult
from .sim import ScenarioConfig, ScenarioConfigError, SimulationResult, load_scenario, run_scenario
from .stress import StressReport


logger = logging.getLogger(__name__)

AGENT_EXIT_TIMEOUT_S = 30.0


class ScenarioServiceError(Exception):
    """Base exception for scenario service errors."""
    pass


class ScenarioNotFoundError(ScenarioServiceError):
    """Raised when a scenario file does not exist."""
    pass


class RunNotFoundError(ScenarioServiceError):
    """Raised when a scenario run is not found."""
    pass


class ScenarioService:
    """
    Service class for managing scenario runs.

    Runs execute synchronously: the bridge hub and the simulator live in the
    calling process, the agents either as threads (single-process mode) or
    as ``manage.py agent`` subprocesses.
    """

    def __init__(self, output_dir=None, settle_s: float = DEFAULT_SETTLE_S):
        """
        Initialize the scenario service.

        Args:
            output_dir: Directory for run logs (default: ``RUN_OUTPUT_DIR``)
            settle_s: Time after which tracking error counts as steady state
        """
        self.output_dir = Path(output_dir or settings.FORMATION['RUN_OUTPUT_DIR'])
        self.settle_s = settle_s
        self.logger = logging.getLogger(f"{__name__}.{self.__class__.__name__}")

    def start_run(self, scenario_path, duration_s: Optional[float] = None, speed: Optional[float] = None,
                  single_process: bool = False, bridge_config: Optional[BridgeEndpointConfig] = None,
                  steps: Optional[int] = None) -> ScenarioRun:
        """
        Run a scenario to completion and persist its record.

        Args:
            scenario_path: YAML scenario file
            duration_s: Simulated duration override
            speed: Sim speed override (0 runs unpaced)
            single_process: Run the agents as threads instead of subprocesses
            bridge_config: Hub ports (default: from settings)
            steps: Control steps override (mainly for tests)

        Returns:
            The completed ScenarioRun

        Raises:
            ScenarioNotFoundError: If the scenario file does not exist
            ScenarioConfigError: If the scenario is invalid
            ScenarioServiceError: If the run fails
        """
        scenario_path = Path(scenario_path)
        if not scenario_path.is_file():
            raise ScenarioNotFoundError(f"Scenario file not found: {scenario_path}")
        config = load_scenario(scenario_path, duration_s=duration_s, speed=speed)

        with transaction.atomic():
            run = ScenarioRun.objects.create(
                name=config.name,
                scenario_path=str(scenario_path),
                status='pending',
                duration_s=config.duration_s if steps is None else steps * config.control_period_s,
                sim_speed=config.sim_speed,
                single_process=single_process,
            )
            self.logger.info(f"Created run {run.id} for scenario '{config.name}' "
                             f"with {len(config.agents)} agents")

        self._process_run(run, config, scenario_path, single_process,
                          bridge_config or BridgeEndpointConfig.from_settings(), steps)
        return run

    def get_run_status(self, run_id: UUID) -> Dict[str, Any]:
        """
        Raises:
            RunNotFoundError: If the run doesn't exist
        """
        try:
            run = ScenarioRun.objects.get(id=run_id)
        except ScenarioRun.DoesNotExist:
            raise RunNotFoundError(f"Scenario run with ID {run_id} not found")

        status_info = {
            'run_id': str(run.id),
            'name': run.name,
            'status': run.status,
            'created_at': run.created_at,
            'completed_at': run.completed_at,
            'error_message': run.error_message,
            'is_complete': run.is_complete(),
            'is_successful': run.is_successful(),
        }
        if run.is_successful():
            status_info['control_steps'] = run.control_steps
            status_info['agent_count'] = run.agents.count()
            status_info['log_path'] = run.log_path
        return status_info

    def get_run_summary(self, run_id: Optional[UUID] = None) -> Dict[str, Any]:
        """
        Per-agent tracking summary of a run (latest completed run if None).

        Raises:
            RunNotFoundError: If no matching completed run exists
        """
        if run_id:
            run = ScenarioRun.objects.filter(id=run_id).first()
            if run is None:
                raise RunNotFoundError(f"Scenario run with ID {run_id} not found")
        else:
            run = ScenarioRun.objects.filter(status='completed').order_by('-completed_at').first()
            if run is None:
                raise RunNotFoundError("No completed scenario runs found")

        agents = [{
            'namespace': summary.namespace,
            'role': summary.role,
            'control_steps': summary.control_steps,
            'degraded_steps': summary.degraded_steps,
            'max_error_m': summary.max_error_m,
            'rms_error_m': summary.rms_error_m,
            'steady_state_error_m': summary.steady_state_error_m,
        } for summary in run.agents.all()]
        followers = [agent['steady_state_error_m'] for agent in agents if agent['role'] == 'follower']

        return {
            'run_id': str(run.id),
            'name': run.name,
            'status': run.status,
            'log_path': run.log_path,
            'control_steps': run.control_steps,
            'min_separation_m': run.min_separation_m,
            'max_follower_error_m': max(followers) if followers else None,
            'agents': agents,
        }

    def cleanup_old_runs(self, days_old: int = 30, delete_logs: bool = True) -> int:
        """
        Delete finished runs older than ``days_old`` days and, optionally, their logs.

        Returns:
            Number of runs deleted
        """
        cutoff_date = timezone.now() - timedelta(days=days_old)
        old_runs = ScenarioRun.objects.filter(status__in=['completed', 'failed'], completed_at__lt=cutoff_date)

        if delete_logs:
            for log_path in old_runs.exclude(log_path='').values_list('log_path', flat=True):
                Path(log_path).unlink(missing_ok=True)
        run_count = old_runs.count()
        if run_count > 0:
            old_runs.delete()
            self.logger.info(f"Cleaned up {run_count} old scenario runs")
        return run_count

    def record_stress(self, reports: Iterable[StressReport]) -> UUID:
        """Persist stress report rows under one batch id."""
        batch_id = uuid.uuid4()
        with transaction.atomic():
            for report in reports:
                StressResult.objects.create(
                    batch_id=batch_id,
                    sim_speed=report.config.sim_speed,
                    spacecraft=report.config.spacecraft,
                    target_hz=report.config.target_hz,
                    achieved_hz=report.achieved_hz,
                    std_ms=report.std_ms,
                    drops=report.drops,
                    cpu_bound=report.cpu_bound,
                    duration_s=report.config.duration_s,
                )
        self.logger.info(f"Recorded stress batch {batch_id}")
        return batch_id

    # internals

    def _process_run(self, run: ScenarioRun, config: ScenarioConfig, scenario_path: Path, single_process: bool,
                     bridge_config: BridgeEndpointConfig, steps: Optional[int]) -> None:
        try:
            run.status = 'running'
            run.save(update_fields=['status'])
            self.output_dir.mkdir(parents=True, exist_ok=True)
            log_path = self.output_dir / f"{config.name}_{run.id.hex[:8]}.ndjson"
            self.logger.info(f"Processing run {run.id} -> {log_path}")

            with BridgeServer(bridge_config, name=f"bridge-{config.name}") as hub:
                endpoint = hub.endpoint
                if single_process:
                    result = self._run_threads(config, log_path, endpoint, steps)
                else:
                    result = self._run_processes(config, scenario_path, log_path, endpoint, steps)

            metrics = summarize_run(read_run_log(log_path), self.settle_s)
            with transaction.atomic():
                for agent in metrics.values():
                    AgentSummary.objects.create(
                        run=run,
                        namespace=agent.namespace,
                        role=agent.role,
                        control_steps=agent.control_steps,
                        degraded_steps=agent.degraded_steps,
                        max_error_m=agent.max_error_m,
                        rms_error_m=agent.rms_error_m,
                        steady_state_error_m=agent.steady_state_error_m,
                    )
                run.status = 'completed'
                run.completed_at = timezone.now()
                run.log_path = str(log_path)
                run.control_steps = result.steps
                run.min_separation_m = result.min_separation if result.min_separation != float('inf') else None
                run.save(update_fields=['status', 'completed_at', 'log_path', 'control_steps',
                                        'min_separation_m'])
            self.logger.info(f"Completed run {run.id}: {result.steps} steps, held commands {result.held_commands}")

        except Exception as e:
            error_message = str(e)
            run.status = 'failed'
            run.completed_at = timezone.now()
            run.error_message = error_message
            run.save(update_fields=['status', 'completed_at', 'error_message'])

            self.logger.error(f"Scenario run {run.id} failed: {error_message}")
            if isinstance(e, (ScenarioConfigError, ScenarioServiceError, PortBindError)):
                raise
            raise ScenarioServiceError(f"Scenario run failed: {error_message}") from e

    def _run_threads(self, config: ScenarioConfig, log_path: Path, endpoint: BridgeEndpointConfig,
                     steps: Optional[int]) -> SimulationResult:
        agents = start_agents(config, endpoint, steps=steps)
        try:
            result = run_scenario(config, log_path, endpoint, steps=steps)
        finally:
            for agent in agents:
                agent.stop_event.set()
                agent.join(timeout=AGENT_EXIT_TIMEOUT_S)
        failed = [agent.agent.namespace for agent in agents if agent.error is not None]
        if failed:
            self.logger.warning(f"Agents failed during the run: {', '.join(failed)}")
        return result

    def _run_processes(self, config: ScenarioConfig, scenario_path: Path, log_path: Path,
                       endpoint: BridgeEndpointConfig, steps: Optional[int]) -> SimulationResult:
        processes = [subprocess.Popen(self._agent_command(ns, config, scenario_path, endpoint, steps))
                     for ns in config.namespaces]
        try:
            return run_scenario(config, log_path, endpoint, steps=steps)
        finally:
            for ns, process in zip(config.namespaces, processes):
                try:
                    process.wait(timeout=AGENT_EXIT_TIMEOUT_S)
                except subprocess.TimeoutExpired:
                    self.logger.warning(f"Agent process '{ns}' did not exit, terminating it")
                    process.terminate()
                    process.wait(timeout=5.0)
                if process.returncode:
                    self.logger.warning(f"Agent process '{ns}' exited with code {process.returncode}")

    @staticmethod
    def _agent_command(namespace: str, config: ScenarioConfig, scenario_path: Path,
                       endpoint: BridgeEndpointConfig, steps: Optional[int]) -> List[str]:
        command = [
            sys.executable, str(Path(settings.BASE_DIR) / 'manage.py'), 'agent', str(scenario_path),
            '--namespace', namespace,
            '--duration', repr(config.duration_s),
            '--host', endpoint.host,
            '--rx-port', str(endpoint.rx_port),
            '--tx-port', str(endpoint.tx_port),
            '--heartbeat-port', str(endpoint.heartbeat_port),
        ]
        if steps is not None:
            command += ['--steps', str(steps)]
        return command
