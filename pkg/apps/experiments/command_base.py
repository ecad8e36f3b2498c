"""
Shared plumbing of the experiment management commands

Every field of the command's config form becomes a ``--field-name`` flag.
Values resolve as form defaults < ``--config`` file section < flags.
"""

import logging

from django.core.management.base import BaseCommand, CommandError

from .config_loader import ConfigFileError, load_section
from .report_service import ReportService

logger = logging.getLogger(__name__)

EXIT_FAILURE = 1
EXIT_USAGE = 2


class ExperimentCommand(BaseCommand):
    form_class = None
    positional = ()

    def add_arguments(self, parser):
        parser.add_argument('--config', type=str, help='INI file with a section for this subcommand')
        parser.add_argument('--out', type=str, help='Output directory (default: <OUTPUT_DIR>/<subcommand>)')
        for name, field in self.form_class.base_fields.items():
            if name in self.positional:
                parser.add_argument(name, nargs='?', default=None, help=field.help_text or f'default: {field.initial}')
                continue
            parser.add_argument(
                f"--{name.replace('_', '-')}",
                dest=name,
                type=str,
                default=None,
                help=field.help_text or f'default: {field.initial}',
            )

    def resolve(self, options: dict) -> dict:
        try:
            file_values = load_section(options.get('config'), self.form_class.section)
        except ConfigFileError as e:
            raise CommandError(str(e), returncode=EXIT_USAGE)
        overrides = {name: options.get(name) for name in self.form_class.base_fields}
        form = self.form_class.bind(file_values, overrides)
        if not form.is_valid():
            problems = '; '.join(
                f"{key}: {' '.join(messages)}" for key, messages in form.errors.items()
            )
            raise CommandError(f"Invalid [{self.form_class.section}] config: {problems}", returncode=EXIT_USAGE)
        return form.resolved()

    def report_service(self, resolved: dict, options: dict) -> ReportService:
        return ReportService(self.form_class.section, resolved, options.get('out'))

    def banner(self, text: str) -> None:
        self.stdout.write('=' * 60)
        self.stdout.write(text)
        self.stdout.write('=' * 60)

    def usage_error(self, message: str) -> None:
        usage = self.create_parser('manage.py', self.form_class.section).format_usage()
        raise CommandError(f"{message}\n{usage}", returncode=EXIT_USAGE)

    def fail(self, message: str) -> None:
        logger.error(message)
        raise CommandError(message, returncode=EXIT_FAILURE)
