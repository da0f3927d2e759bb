from changedetection import services
from changedetection.exceptions import ConfigurationError
from changedetection.metrics import write_report

from ._base import BanCommand


class Command(BanCommand):
    help = 'Score a folder of predicted masks against a folder of labels'
    takes_config = False

    def add_command_arguments(self, parser):
        parser.add_argument('--pred-dir', required=True, help='Predicted masks')
        parser.add_argument('--label-dir', required=True, help='Label masks with the same filenames')
        parser.add_argument(
            '--scd',
            action='store_true',
            help='Semantic change detection: folders hold label/, sem_t1/ and sem_t2/',
        )
        parser.add_argument('--num-classes', type=int, default=0, help='Semantic classes (required with --scd)')
        parser.add_argument('--divisor', type=int, default=None,
                            help='Change-mask value divisor (default: 255 for BCD, 1 for SCD)')
        parser.add_argument('--ignore-index', type=int, default=255)
        parser.add_argument('--exclude-no-change', action='store_true')
        parser.add_argument('--out-dir', default=None, help='Also write metrics.json / metrics.txt here')

    def run(self, options):
        if options['scd'] and options['num_classes'] < 2:
            raise ConfigurationError('--scd needs --num-classes >= 2')
        num_classes = options['num_classes'] if options['scd'] else 0
        divisor = options['divisor'] or (1 if options['scd'] else 255)
        report = services.score_mask_dirs(options['pred_dir'], options['label_dir'], num_classes, divisor,
                                          options['ignore_index'], options['exclude_no_change'])
        self.stdout.write(report.as_table())
        if options['out_dir']:
            path = write_report(report, options['out_dir'])
            self.stdout.write(self.style.SUCCESS(f'Report written to {path}'))
