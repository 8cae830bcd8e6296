"""
Validate a message schema directory.
"""

from django.conf import settings
from django.core.management.base import BaseCommand, CommandError

from formation.msgs import check_schema_dir


class Command(BaseCommand):
    help = 'Parse every schema file and report syntax errors, duplicates and unresolved types'

    def add_arguments(self, parser):
        parser.add_argument('schema_dir', nargs='?', help='Schema directory (default: SCHEMA_DIR)')

    def handle(self, *args, **options):
        directory = options['schema_dir'] or settings.FORMATION['SCHEMA_DIR']
        report = check_schema_dir(directory)

        for problem in report.problems:
            self.stderr.write(problem)
        if not report.is_clean:
            raise CommandError(f"{len(report.problems)} problem(s) in {directory}", returncode=1)

        self.stdout.write(self.style.SUCCESS(
            f"{report.schema_count} schemas in {len(report.files)} files, no problems"))
