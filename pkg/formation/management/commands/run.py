"""
Run a formation scenario: bridge hub, lockstep simulator and one NMPC agent per spacecraft.
"""

from pathlib import Path

from django.core.management.base import BaseCommand, CommandError

from formation.bridge import BridgeError, BridgeEndpointConfig, PortBindError
from formation.services import ScenarioNotFoundError, ScenarioService, ScenarioServiceError
from formation.sim import ScenarioConfigError


class Command(BaseCommand):
    help = 'Run a formation scenario and print per-agent formation error'

    def add_arguments(self, parser):
        parser.add_argument('--scenario', required=True, help='YAML scenario file')
        parser.add_argument('--duration', type=float, help='Simulated duration in seconds')
        parser.add_argument('--speed', type=float, help='Sim speed multiplier (0 = as fast as possible)')
        parser.add_argument('--steps', type=int, help='Stop after this many control steps')
        parser.add_argument('--output-dir', help='Directory for the run log')
        parser.add_argument('--settle', type=float, default=20.0,
                            help='Seconds after which error counts as steady state')
        parser.add_argument('--single-process', action='store_true',
                            help='Run the agents as threads of this process')
        parser.add_argument('--host', help='Bridge host')
        parser.add_argument('--rx-port', type=int, help='Bridge receive port')
        parser.add_argument('--tx-port', type=int, help='Bridge transmit port')
        parser.add_argument('--heartbeat-port', type=int, help='Bridge heartbeat port')

    def handle(self, *args, **options):
        scenario = Path(options['scenario'])
        if not scenario.is_file():
            raise CommandError(f"Scenario file not found: {scenario}\n"
                               f"usage: manage.py run --scenario FILE [--duration S] [--single-process]",
                               returncode=2)

        try:
            bridge_config = BridgeEndpointConfig.from_settings(
                host=options['host'], rx_port=options['rx_port'], tx_port=options['tx_port'],
                heartbeat_port=options['heartbeat_port'],
            )
        except BridgeError as e:
            raise CommandError(f"Invalid bridge configuration: {e}", returncode=2)

        service = ScenarioService(output_dir=options['output_dir'], settle_s=options['settle'])
        try:
            run = service.start_run(
                scenario,
                duration_s=options['duration'],
                speed=options['speed'],
                single_process=options['single_process'],
                bridge_config=bridge_config,
                steps=options['steps'],
            )
        except ScenarioNotFoundError as e:
            raise CommandError(str(e), returncode=2)
        except PortBindError as e:
            raise CommandError(f"Bridge port collision: {e}", returncode=3)
        except (ScenarioConfigError, ScenarioServiceError) as e:
            raise CommandError(str(e), returncode=1)

        summary = service.get_run_summary(run.id)
        self.stdout.write(f"Run {summary['run_id']} ({summary['name']}): {summary['control_steps']} control steps")
        self.stdout.write(f"Log: {summary['log_path']}")
        self.stdout.write(f"{'Agent':<16}{'Role':<10}{'Max [m]':>10}{'RMS [m]':>10}{'Steady [m]':>12}{'Degraded':>10}")
        for agent in summary['agents']:
            self.stdout.write(
                f"{agent['namespace']:<16}{agent['role']:<10}{agent['max_error_m']:>10.4f}"
                f"{agent['rms_error_m']:>10.4f}{agent['steady_state_error_m']:>12.4f}{agent['degraded_steps']:>10d}"
            )
        if summary['min_separation_m'] is not None:
            self.stdout.write(f"Minimum separation: {summary['min_separation_m']:.3f} m")
        self.stdout.write(self.style.SUCCESS("Run completed"))
