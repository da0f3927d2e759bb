from changedetection import services

from ._base import BanCommand


class Command(BanCommand):
    help = 'Print learnable and frozen parameter counts'

    def run(self, options):
        report = services.parameter_report(options['config'], seed=options['seed'])
        self.write_table(report.as_rows())
        for j, count in enumerate(report.bridge_counts, start=1):
            self.stdout.write(f'  bridge {j}: {count:,}')
