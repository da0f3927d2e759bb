from changedetection import services
from changedetection.tasks import run_training

from ._base import BanCommand


class Command(BanCommand):
    help = 'Train bridges and Bi-TAB against a frozen foundation encoder'
    queue_task = run_training

    def add_command_arguments(self, parser):
        parser.add_argument(
            '--max-iters',
            type=int,
            default=None,
            help='Stop after this many iterations (default: schedule.max_iters)',
        )

    def task_kwargs(self, options):
        return {'config_path': options['config'], 'seed': options['seed'], 'max_iters': options['max_iters']}

    def run(self, options):
        summary = services.train(options['config'], seed=options['seed'], max_iters=options['max_iters'])
        if not summary['encoder_unchanged']:
            self.stdout.write(self.style.ERROR('Frozen encoder weights changed during training'))
        best, loss = summary['best_metric'], summary['final_loss']
        self.stdout.write(self.style.SUCCESS(
            f"Finished {summary['iterations']} iterations"
            + (f", final loss {loss:.4f}" if loss is not None else '')
            + (f", best {best * 100:.2f} at iteration {summary['best_iteration']}" if best is not None else '')
        ))
        self.stdout.write(f"Checkpoint: {summary['checkpoint']}")
