"""
Export per-agent tracking and command series of a run log as CSV.
"""

from pathlib import Path

from django.core.management.base import BaseCommand, CommandError

from formation.export import CorruptLogError, export_csv


class Command(BaseCommand):
    help = 'Write one CSV per agent from a run log'

    def add_arguments(self, parser):
        parser.add_argument('log', help='NDJSON run log')
        parser.add_argument('--output-dir', help='Directory for the CSV files (default: next to the log)')

    def handle(self, *args, **options):
        log_path = Path(options['log'])
        if not log_path.is_file():
            raise CommandError(f"Run log not found: {log_path}", returncode=2)
        try:
            written = export_csv(log_path, options['output_dir'])
        except CorruptLogError as e:
            raise CommandError(f"Corrupt run log {log_path}: {e}", returncode=1)

        for path in written:
            self.stdout.write(str(path))
        self.stdout.write(self.style.SUCCESS(f"Exported {len(written)} CSV files"))
