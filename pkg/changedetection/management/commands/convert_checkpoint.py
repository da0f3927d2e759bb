from changedetection.checkpoints import convert_clip_state_dict, infer_vit_shape, read_tensors, write_tensors
from changedetection.exceptions import CheckpointError

from ._base import BanCommand


class Command(BanCommand):
    help = 'Convert a CLIP / OpenCLIP visual tower into the flat encoder checkpoint schema'
    takes_config = False

    def add_command_arguments(self, parser):
        parser.add_argument('source', help='CLIP state dict (.pt / .bin / .safetensors)')
        parser.add_argument('target', help='Output .safetensors file')
        parser.add_argument('--prefix', default='visual.', help="Key prefix of the visual tower ('' for none)")

    def run(self, options):
        state = read_tensors(options['source'])
        tensors, dropped = convert_clip_state_dict(state, prefix=options['prefix'])
        if not tensors:
            raise CheckpointError(f"nothing to convert in {options['source']}")
        shape = infer_vit_shape(tensors)
        path = write_tensors(tensors, options['target'], metadata={'format': 'ban-encoder', **shape})
        self.stdout.write(', '.join(f'{k}={v}' for k, v in shape.items()))
        if dropped:
            self.stdout.write(self.style.WARNING(f"Dropped {len(dropped)} keys: {', '.join(dropped)}"))
        self.stdout.write(self.style.SUCCESS(f'Wrote {len(tensors)} tensors to {path}'))
