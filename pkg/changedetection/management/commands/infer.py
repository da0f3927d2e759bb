from changedetection import services
from changedetection.tasks import run_inference

from ._base import BanCommand


class Command(BanCommand):
    help = 'Predict the change mask of one bi-temporal image pair'
    queue_task = run_inference
    traces_bridges = True

    def add_command_arguments(self, parser):
        parser.add_argument('--pair', nargs=2, metavar=('T1', 'T2'), required=True, help='Phase images')
        parser.add_argument('--out', required=True, help='Output mask image')
        parser.add_argument('--checkpoint', default=None, help='Model checkpoint (.safetensors)')

    def task_kwargs(self, options):
        t1, t2 = options['pair']
        return {'config_path': options['config'], 'path_t1': t1, 'path_t2': t2, 'out_path': options['out'],
                'checkpoint': options['checkpoint'], 'seed': options['seed'], 'trace_path': options['trace_bridges']}

    def run(self, options):
        t1, t2 = options['pair']
        written = services.infer_pair(options['config'], t1, t2, options['out'], checkpoint=options['checkpoint'],
                                      seed=options['seed'], trace_path=options['trace_bridges'])
        for path in written:
            self.stdout.write(self.style.SUCCESS(f'Wrote {path}'))
