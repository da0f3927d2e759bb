from changedetection import services
from changedetection.tasks import run_benchmark

from ._base import BanCommand


class Command(BanCommand):
    help = 'Measure sliding-window inference throughput (images per second)'
    queue_task = run_benchmark

    def add_command_arguments(self, parser):
        parser.add_argument('--resolution', type=int, default=None, help='Square input size (default: crop size)')
        parser.add_argument('--n-images', type=int, default=10, help='Timed images after warmup')
        parser.add_argument('--aris', type=int, default=None, help='Override the encoder input size')
        parser.add_argument('--checkpoint', default=None, help='Model checkpoint (.safetensors)')

    def task_kwargs(self, options):
        return {'config_path': options['config'], 'resolution': options['resolution'],
                'n_images': options['n_images'], 'checkpoint': options['checkpoint'],
                'aris_target': options['aris']}

    def run(self, options):
        result = services.benchmark(options['config'], resolution=options['resolution'],
                                    n_images=options['n_images'], checkpoint=options['checkpoint'],
                                    seed=options['seed'], aris_target=options['aris'])
        self.stdout.write(self.style.SUCCESS(
            f'{result.fps:.2f} img/s ({result.n_images} images of {result.resolution}x{result.resolution}, '
            f'ARIS {result.aris_target}, {result.seconds:.2f}s)'
        ))
