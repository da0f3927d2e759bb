from pathlib import Path

from django.conf import settings

from changedetection.datasets import label_fraction_split, scan_dataset, split_records, write_manifest

from ._base import BanCommand


class Command(BanCommand):
    help = 'Write split manifests: a seeded train/val/test partition and label-fraction subsets'
    takes_config = False

    def add_command_arguments(self, parser):
        parser.add_argument('root', help='Dataset root (t1/, t2/, label/ at the top level)')
        parser.add_argument('--out', default=None, help='Manifest directory (default: <root>/splits)')
        parser.add_argument('--layout', default='manifest', choices=['manifest', 'split_folders', 's2looking'])
        parser.add_argument('--split', default=None, help='Only draw label fractions from this existing split')
        parser.add_argument('--fractions', type=float, nargs=3, default=None, metavar=('TRAIN', 'VAL', 'TEST'),
                            help='Partition the whole dataset, e.g. 0.6 0.2 0.2')
        parser.add_argument('--label-fractions', type=float, nargs='*', default=[],
                            help='Write train_<pct>.txt subsets, e.g. 0.05 0.1 0.2 0.4')

    def run(self, options):
        seed = options['seed'] if options['seed'] is not None else settings.BAN_DEFAULT_SEED
        root = Path(options['root'])
        out = Path(options['out']) if options['out'] else root / 'splits'
        records = scan_dataset(root, options['layout'], options['split'])
        self.stdout.write(f'{len(records)} records under {root}')

        train = records
        if options['fractions']:
            splits = split_records(records, tuple(options['fractions']), seed=seed)
            for name, subset in splits.items():
                path = write_manifest(out / f'{name}.txt', [r.name for r in subset])
                self.stdout.write(f'{name}: {len(subset)} -> {path}')
            train = splits['train']
        for fraction in options['label_fractions']:
            labeled, _ = label_fraction_split(train, fraction, seed=seed)
            path = write_manifest(out / f'train_{round(fraction * 100)}pct.txt', [r.name for r in labeled])
            self.stdout.write(f'{fraction:.0%} labeled: {len(labeled)} -> {path}')
        self.stdout.write(self.style.SUCCESS('Split manifests written'))
