"""
Standalone bridge hub that stays up until interrupted.
"""

import time

from django.core.management.base import BaseCommand, CommandError

from formation.bridge import BridgeError, BridgeEndpointConfig, BridgeServer, PortBindError


class Command(BaseCommand):
    help = 'Serve the bridge hub on the configured ports'

    def add_arguments(self, parser):
        parser.add_argument('--host', help='Bind address')
        parser.add_argument('--rx-port', type=int)
        parser.add_argument('--tx-port', type=int)
        parser.add_argument('--heartbeat-port', type=int)
        parser.add_argument('--stats-every', type=float, default=10.0, help='Seconds between stats lines')

    def handle(self, *args, **options):
        try:
            config = BridgeEndpointConfig.from_settings(
                host=options['host'], rx_port=options['rx_port'], tx_port=options['tx_port'],
                heartbeat_port=options['heartbeat_port'],
            )
            hub = BridgeServer(config).start()
        except PortBindError as e:
            raise CommandError(f"Bridge port collision: {e}", returncode=3)
        except BridgeError as e:
            raise CommandError(str(e), returncode=2)

        endpoint = hub.endpoint
        self.stdout.write(self.style.SUCCESS(
            f"Bridge on {endpoint.host} rx={endpoint.rx_port} tx={endpoint.tx_port} "
            f"heartbeat={endpoint.heartbeat_port}"))
        try:
            while True:
                time.sleep(options['stats_every'])
                stats = hub.stats()
                self.stdout.write(f"frames in={stats.frames_in} out={stats.frames_out} "
                                  f"dropped={stats.dropped_overflow} clients={stats.tx_connections}")
        except KeyboardInterrupt:
            pass
        finally:
            hub.stop()
