from django.conf import settings
from django.core.management.base import BaseCommand, CommandError
import logging

from changedetection.exceptions import BanError

logger = logging.getLogger(__name__)


class BanCommand(BaseCommand):
    """Base for every CLI subcommand: shared flags and one-line error reporting"""
    takes_config = True
    traces_bridges = False
    queue_task = None

    def add_arguments(self, parser):
        if self.takes_config:
            parser.add_argument('config', help='Run-config YAML file')
        parser.add_argument(
            '--seed',
            type=int,
            default=None,
            help=f'Override the run seed (default: the config value, {settings.BAN_DEFAULT_SEED} if unset)',
        )
        if self.traces_bridges:
            parser.add_argument(
                '--trace-bridges',
                metavar='PATH',
                default=None,
                help='Dump bridge intermediates (x_fm, x~, affinity, attention, x_cf, x_bm) to a safetensors file',
            )
        parser.add_argument(
            '--queue',
            action='store_true',
            help='Send the job to the Celery worker instead of running it here',
        )
        self.add_command_arguments(parser)

    def add_command_arguments(self, parser):
        pass

    def handle(self, *args, **options):
        try:
            if options['queue']:
                if self.queue_task is None:
                    raise CommandError(f'{self.__module__.rsplit(".", 1)[-1]} cannot be queued')
                result = self.queue_task.delay(**self.task_kwargs(options))
                self.stdout.write(self.style.SUCCESS(f'Queued task {result.id}'))
                return
            self.run(options)
        except BanError as e:
            logger.error(f'{type(e).__name__}: {str(e)}')
            raise CommandError(f'{type(e).__name__}: {str(e)}')

    def run(self, options):
        raise NotImplementedError

    def task_kwargs(self, options):
        return {}

    def write_table(self, rows, value_format='{:>14,}'):
        width = max(len(str(name)) for name, _ in rows)
        for name, value in rows:
            self.stdout.write(f'{str(name):<{width}}  {value_format.format(value)}')
