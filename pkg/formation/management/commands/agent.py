"""
One NMPC controller process for a scenario agent.
"""

import threading

from django.core.management.base import BaseCommand, CommandError

from formation.bridge import BridgeClient, BridgeEndpointConfig, BridgeError, ClientRole
from formation.controllers import FormationAgent
from formation.sim import BridgeLostError, ScenarioConfigError, load_scenario


class Command(BaseCommand):
    help = 'Run the NMPC controller of one agent against a running bridge'

    def add_arguments(self, parser):
        parser.add_argument('scenario', help='YAML scenario file')
        parser.add_argument('--namespace', required=True, help='Agent namespace from the scenario')
        parser.add_argument('--duration', type=float)
        parser.add_argument('--steps', type=int)
        parser.add_argument('--host')
        parser.add_argument('--rx-port', type=int)
        parser.add_argument('--tx-port', type=int)
        parser.add_argument('--heartbeat-port', type=int)

    def handle(self, *args, **options):
        try:
            config = load_scenario(options['scenario'], duration_s=options['duration'])
        except ScenarioConfigError as e:
            raise CommandError(str(e), returncode=2)
        namespace = options['namespace']
        if namespace not in config.namespaces:
            raise CommandError(f"Agent '{namespace}' is not part of scenario '{config.name}'", returncode=2)

        bridge_config = BridgeEndpointConfig.from_settings(
            host=options['host'], rx_port=options['rx_port'], tx_port=options['tx_port'],
            heartbeat_port=options['heartbeat_port'],
        )
        steps = config.steps if options['steps'] is None else options['steps']
        final_t_ns = (steps - 1) * config.control_period_ns if steps > 0 else None

        client = BridgeClient(namespace, ClientRole.CONTROLLER, bridge_config)
        agent = FormationAgent(namespace, config, client)
        agent.register()
        client.start()
        try:
            stats = agent.serve(threading.Event(), final_t_ns=final_t_ns)
        except KeyboardInterrupt:
            return
        except (BridgeLostError, BridgeError) as e:
            raise CommandError(f"Agent '{namespace}': {e}", returncode=1)
        finally:
            client.close()

        self.stdout.write(f"Agent '{namespace}': {stats.steps} steps, {stats.degraded_steps} degraded, "
                          f"{stats.infeasible_steps} infeasible")
