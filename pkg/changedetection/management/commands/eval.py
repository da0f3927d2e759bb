from changedetection import services
from changedetection.tasks import run_evaluation

from ._base import BanCommand


class Command(BanCommand):
    help = 'Evaluate a checkpoint and write metrics.json / metrics.txt'
    queue_task = run_evaluation
    traces_bridges = True

    def add_command_arguments(self, parser):
        parser.add_argument('--checkpoint', required=True, help='Model checkpoint (.safetensors)')
        parser.add_argument('--split', default=None, help='Dataset split (default: data.test_split)')
        parser.add_argument('--out-dir', default=None, help='Report directory (default: the run work dir)')
        parser.add_argument(
            '--exclude-no-change',
            action='store_true',
            help='Zero the no-change diagonal cell before computing kappa',
        )

    def task_kwargs(self, options):
        return {'config_path': options['config'], 'checkpoint': options['checkpoint'], 'split': options['split'],
                'seed': options['seed'], 'out_dir': options['out_dir'],
                'exclude_no_change': options['exclude_no_change'], 'trace_path': options['trace_bridges']}

    def run(self, options):
        report, path = services.evaluate_checkpoint(
            options['config'], options['checkpoint'], split=options['split'], seed=options['seed'],
            out_dir=options['out_dir'], exclude_no_change=options['exclude_no_change'],
            trace_path=options['trace_bridges'],
        )
        self.stdout.write(report.as_table())
        self.stdout.write(self.style.SUCCESS(f'Report written to {path}'))
