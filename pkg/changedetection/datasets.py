"""Bi-temporal dataset ingestion, splitting and batching.

Folder conventions (filenames must match across folders)::

    split_folders   <root>/<split>/{t1|A}/, {t2|B}/, label/, [sem_t1/, sem_t2/]
    s2looking       <root>/<split>/Image1/, Image2/, label/
    manifest        <root>/t1/, t2/, label/, [sem_t1/, sem_t2/] + <root>/splits/<split>.txt
    synthetic       no files; inserted-square pairs generated from the seed

Masks are single-channel index images. 255 is the ignore value unless the dataset stores
binary change as 0/255, in which case ``label_divisor: 255`` maps it to 0/1.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torch.utils.data import DataLoader, Dataset

from .config import DataConfig, RunConfig
from .exceptions import DataError
from .transforms import PairAugmentation, normalize_image, sample_rng

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = ('.png', '.jpg', '.jpeg', '.tif', '.tiff', '.bmp')
LAYOUTS = ('split_folders', 's2looking', 'manifest', 'synthetic')
FOLDER_ALIASES = {
    'split_folders': {'t1': ('t1', 'A'), 't2': ('t2', 'B'), 'label': ('label',)},
    's2looking': {'t1': ('Image1',), 't2': ('Image2',), 'label': ('label',)},
    'manifest': {'t1': ('t1',), 't2': ('t2',), 'label': ('label',)},
}
SEMANTIC_FOLDERS = ('sem_t1', 'sem_t2')


@dataclass(frozen=True)
class SampleRecord:
    name: str
    path_t1: Path
    path_t2: Path
    path_label: Path
    path_sem_t1: Path | None = None
    path_sem_t2: Path | None = None
    split: str = ''

    @property
    def has_semantics(self):
        return self.path_sem_t1 is not None


def _list_images(folder):
    return {p.name: p for p in sorted(folder.iterdir()) if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES}


def _find_folder(base, names):
    for name in names:
        if (base / name).is_dir():
            return base / name
    return None


def read_manifest(path):
    """Plain-text filename list, one per line; blank lines and '#' comments are skipped."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"split manifest not found: {path}")
    lines = (line.strip() for line in path.read_text(encoding='utf-8').splitlines())
    return [line for line in lines if line and not line.startswith('#')]


def write_manifest(path, names):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(''.join(f"{name}\n" for name in names), encoding='utf-8')
    return path


def _collect(base, layout, split, names=None):
    aliases = FOLDER_ALIASES[layout]
    folders = {}
    for role, candidates in aliases.items():
        folder = _find_folder(base, candidates)
        if folder is None:
            raise DataError(f"{base} has no {role} folder (looked for {', '.join(candidates)})")
        folders[role] = folder
    for role in SEMANTIC_FOLDERS:
        folder = _find_folder(base, (role,))
        if folder is not None:
            folders[role] = folder

    listings = {role: _list_images(folder) for role, folder in folders.items()}
    wanted = sorted(names) if names is not None else sorted(listings['t1'])
    problems = []
    if names is None:
        for role in ('t2', 'label') + tuple(r for r in SEMANTIC_FOLDERS if r in listings):
            extra = sorted(set(listings[role]) - set(listings['t1']))
            if extra:
                problems.append(f"in {role}/ but not t1/: {', '.join(extra)}")
    records = []
    for name in wanted:
        missing = [role for role in listings if name not in listings[role]]
        if missing:
            problems.append(f"{name} missing from {', '.join(f'{m}/' for m in missing)}")
            continue
        records.append(SampleRecord(
            name=name,
            path_t1=listings['t1'][name],
            path_t2=listings['t2'][name],
            path_label=listings['label'][name],
            path_sem_t1=listings['sem_t1'][name] if 'sem_t1' in listings else None,
            path_sem_t2=listings['sem_t2'][name] if 'sem_t2' in listings else None,
            split=split or '',
        ))
    if problems:
        raise DataError(f"dataset at {base} has orphan files: " + '; '.join(problems))
    return records


def scan_dataset(root, layout='split_folders', split=None):
    """Discover records under ``root`` in lexicographic filename order.

    With ``split`` None the split_folders / s2looking layouts scan ``root`` itself and the
    manifest layout takes every file; otherwise the split subfolder (or manifest) is used.
    """
    root = Path(root)
    if layout not in LAYOUTS or layout == 'synthetic':
        raise DataError(f"layout '{layout}' cannot be scanned from disk")
    if not root.is_dir():
        raise DataError(f"dataset root does not exist: {root}")
    if layout == 'manifest':
        names = read_manifest(root / 'splits' / f"{split}.txt") if split else None
        records = _collect(root, layout, split, names)
    else:
        base = root / split if split else root
        if not base.is_dir():
            raise DataError(f"split folder does not exist: {base}")
        records = _collect(base, layout, split)
    logger.debug(f"Scanned {len(records)} records from {root} ({layout}, split={split})")
    return records


def label_fraction_split(records, fraction, seed=0):
    """Seeded subset of round(fraction * n) labeled records; returns (labeled, withheld) in input order."""
    if not 0 < fraction <= 1:
        raise DataError(f"label fraction must be in (0, 1], got {fraction}")
    n = len(records)
    keep = int(np.floor(fraction * n + 0.5))
    if keep == 0:
        raise DataError(f"fraction {fraction} of {n} records leaves no labeled data")
    order = np.random.default_rng(seed).permutation(n)
    chosen = set(order[:keep].tolist())
    labeled = [r for i, r in enumerate(records) if i in chosen]
    withheld = [r for i, r in enumerate(records) if i not in chosen]
    return labeled, withheld


def split_records(records, fractions=(0.6, 0.2, 0.2), seed=0, names=('train', 'val', 'test')):
    """Seeded random partition (3:1:1 by default); the last split takes the rounding remainder."""
    if len(fractions) != len(names) or abs(sum(fractions) - 1.0) > 1e-9:
        raise DataError(f"split fractions {fractions} must sum to 1 over {len(names)} splits")
    n = len(records)
    order = np.random.default_rng(seed).permutation(n).tolist()
    splits, start = {}, 0
    for i, (name, fraction) in enumerate(zip(names, fractions)):
        stop = n if i == len(names) - 1 else start + int(np.floor(fraction * n + 0.5))
        chosen = sorted(order[start:stop])
        splits[name] = [replace(records[j], split=name) for j in chosen]
        start = stop
    return splits


def load_image(path):
    """RGB raster as a float C x H x W tensor in 0..255."""
    with Image.open(path) as img:
        array = np.array(img.convert('RGB'), dtype=np.uint8)
    return torch.from_numpy(array).permute(2, 0, 1).float()


def load_mask(path, divisor=1):
    with Image.open(path) as img:
        if img.mode not in ('L', 'P', 'I', '1'):
            img = img.convert('L')
        array = np.array(img).astype(np.int64)
    if array.ndim != 2:
        raise DataError(f"mask {path} is not single-channel")
    if divisor > 1:
        array = array // divisor
    return torch.from_numpy(array)


def save_mask(mask, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    array = mask.cpu().numpy() if isinstance(mask, torch.Tensor) else np.asarray(mask)
    Image.fromarray(array.astype(np.uint8), mode='L').save(path)
    return path


class PairDatasetBase(Dataset):
    """Shared epoch-aware augmentation and normalization."""

    def __init__(self, data: DataConfig, augment=False, seed=0):
        self.data = data
        self.augmentation = PairAugmentation(data.augment) if augment else None
        self.seed = seed
        self.epoch = 0

    def set_epoch(self, epoch):
        self.epoch = int(epoch)

    def raw_sample(self, index):
        raise NotImplementedError

    def __getitem__(self, index):
        sample = self.raw_sample(index)
        if self.augmentation is not None:
            sample = self.augmentation(sample, sample_rng(self.seed, self.epoch, index))
        for key in ('t1', 't2'):
            sample[key] = normalize_image(sample[key], self.data.mean, self.data.std)
        return {k: v for k, v in sample.items() if v is not None}


class ChangeDetectionDataset(PairDatasetBase):
    def __init__(self, records, data: DataConfig, augment=False, seed=0):
        super().__init__(data, augment=augment, seed=seed)
        if not records:
            raise DataError("dataset has no records")
        self.records = list(records)

    def __len__(self):
        return len(self.records)

    def raw_sample(self, index):
        record = self.records[index]
        t1, t2 = load_image(record.path_t1), load_image(record.path_t2)
        label = load_mask(record.path_label, self.data.label_divisor)
        sample = {'t1': t1, 't2': t2, 'label': label, 'name': record.name}
        if record.has_semantics:
            sample['sem_t1'] = load_mask(record.path_sem_t1)
            sample['sem_t2'] = load_mask(record.path_sem_t2)
        sizes = {key: tuple(value.shape[-2:]) for key, value in sample.items() if key != 'name'}
        if len(set(sizes.values())) != 1:
            raise DataError(f"record {record.name} has mismatched sizes: {sizes}")
        return sample


class SyntheticSquaresDataset(PairDatasetBase):
    """Pairs of noise textures where t2 has a few squares painted in; the label marks them.

    Square corners and sides are multiples of ``align`` so the change stays on the
    coarsest Bi-TAB grid.
    """

    def __init__(self, data: DataConfig, num_samples=8, size=64, augment=False, seed=0,
                 max_squares=3, align=8):
        super().__init__(data, augment=augment, seed=seed)
        if size % align:
            raise DataError(f"synthetic size {size} is not a multiple of {align}")
        self.num_samples = num_samples
        self.size = size
        self.max_squares = max_squares
        self.align = align

    def __len__(self):
        return self.num_samples

    def raw_sample(self, index):
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, index]))
        size, align = self.size, self.align
        t1 = rng.integers(40, 120, size=(3, size, size)).astype(np.float32)
        t2 = np.clip(t1 + rng.normal(0, 4, size=t1.shape), 0, 255).round().astype(np.float32)
        label = np.zeros((size, size), dtype=np.int64)
        cells = size // align
        for _ in range(int(rng.integers(1, self.max_squares + 1))):
            side = int(rng.integers(1, max(cells // 2, 1) + 1)) * align
            row = int(rng.integers(0, cells - side // align + 1)) * align
            col = int(rng.integers(0, cells - side // align + 1)) * align
            colour = rng.integers(180, 256, size=3).astype(np.float32)
            t2[:, row:row + side, col:col + side] = colour[:, None, None]
            label[row:row + side, col:col + side] = 1
        return {'t1': torch.from_numpy(t1), 't2': torch.from_numpy(t2),
                'label': torch.from_numpy(label), 'name': f"synthetic_{index:04d}.png"}

    def write_to(self, root):
        """Materialize the pairs in the split_folders layout (no split level)."""
        root = Path(root)
        for index in range(len(self)):
            sample = self.raw_sample(index)
            for key in ('t1', 't2'):
                folder = root / key
                folder.mkdir(parents=True, exist_ok=True)
                array = sample[key].permute(1, 2, 0).numpy().astype(np.uint8)
                Image.fromarray(array, mode='RGB').save(folder / sample['name'])
            save_mask(sample['label'], root / 'label' / sample['name'])
        return root


def build_dataset(run: RunConfig, split, train=False):
    """Dataset for one split of the run; label fractions only thin out the training split."""
    data = run.data
    if data.layout == 'synthetic':
        offsets = {data.train_split: 0, data.val_split: 1, data.test_split: 2}
        seed = run.seed + offsets.get(split, 3)
        return SyntheticSquaresDataset(data, num_samples=data.synthetic_samples, size=data.synthetic_size,
                                       augment=train, seed=seed)
    records = scan_dataset(data.root, data.layout, split)
    if train and data.label_fraction < 1.0:
        records, withheld = label_fraction_split(records, data.label_fraction, run.seed)
        logger.info(f"Training on {len(records)} labeled records, {len(withheld)} withheld "
                    f"(label fraction {data.label_fraction})")
    return ChangeDetectionDataset(records, data, augment=train, seed=run.seed)


def build_loader(dataset, batch_size, shuffle=False, seed=0, num_workers=0, drop_last=False):
    generator = torch.Generator()
    generator.manual_seed(seed)
    return DataLoader(dataset, batch_size=batch_size, shuffle=shuffle, num_workers=num_workers,
                      generator=generator, drop_last=drop_last, persistent_workers=False)
