"""
Bridge throughput stress: publishers per spacecraft at a target rate, one aggregate subscriber.
"""

from django.core.management.base import BaseCommand, CommandError

from formation.bridge import BridgeError, BridgeEndpointConfig
from formation.serializers import StressConfigSerializer
from formation.services import ScenarioService
from formation.stress import StressConfig, StressConfigError, format_table, run_stress


class Command(BaseCommand):
    help = 'Measure achieved rate and jitter through a loopback bridge'

    def add_arguments(self, parser):
        parser.add_argument('--speed', type=float, nargs='+', default=[1.0], help='Sim speed multipliers')
        parser.add_argument('--spacecraft', type=int, nargs='+', default=[1], help='Spacecraft counts')
        parser.add_argument('--target', type=float, nargs='+', default=[100.0], help='Target rates [Hz]')
        parser.add_argument('--duration', type=float, default=10.0, help='Seconds per configuration')
        parser.add_argument('--rx-port', type=int, help='Use a running bridge on this receive port')
        parser.add_argument('--tx-port', type=int, help='Transmit port of a running bridge')
        parser.add_argument('--heartbeat-port', type=int, help='Heartbeat port of a running bridge')
        parser.add_argument('--save', action='store_true', help='Store the rows as StressResult records')

    def handle(self, *args, **options):
        configs = []
        for speed in options['speed']:
            for spacecraft in options['spacecraft']:
                for target in options['target']:
                    serializer = StressConfigSerializer(data={
                        'sim_speed': speed, 'spacecraft': spacecraft,
                        'target_hz': target, 'duration_s': options['duration'],
                    })
                    if not serializer.is_valid():
                        raise CommandError(f"Invalid stress configuration: {serializer.errors}", returncode=2)
                    configs.append(StressConfig(**serializer.validated_data))

        bridge_config = None
        if options['rx_port'] is not None:
            bridge_config = BridgeEndpointConfig.from_settings(
                rx_port=options['rx_port'], tx_port=options['tx_port'], heartbeat_port=options['heartbeat_port'])

        reports = []
        for config in configs:
            try:
                reports.append(run_stress(config, bridge_config))
            except (StressConfigError, BridgeError) as e:
                raise CommandError(str(e), returncode=1)

        self.stdout.write(format_table(reports))
        for report in reports:
            if report.cpu_bound:
                self.stdout.write(self.style.WARNING(
                    f"{report.config.spacecraft} s/c @ {report.config.target_hz:g} Hz is CPU-bound"))
            if report.drops:
                self.stdout.write(self.style.WARNING(
                    f"{report.config.spacecraft} s/c @ {report.config.target_hz:g} Hz dropped {report.drops} "
                    f"of {report.sent} messages"))

        if options['save']:
            batch_id = ScenarioService().record_stress(reports)
            self.stdout.write(self.style.SUCCESS(f"Saved stress batch {batch_id}"))
