"""Training loop: AdamW with a 10x head group, poly decay, periodic validation."""
from __future__ import annotations

import logging
import random
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from django.conf import settings

from .ban import BanModel, build_ban_model
from .checkpoints import save_model_checkpoint, write_tensors
from .config import OptimConfig, RunConfig
from .datasets import build_dataset, build_loader
from .exceptions import BanError, ConfigurationError, DataError, TrainingDivergedError
from .inference import evaluate
from .losses import cross_entropy_loss
from .recording import RunRecorder

logger = logging.getLogger(__name__)


def poly_lr(iteration, max_iters, base_lr, power=1.0, min_lr=0.0):
    """min_lr + (base_lr - min_lr) * (1 - iteration / max_iters) ** power"""
    if max_iters < 1:
        raise ConfigurationError(f"max_iters must be >= 1, got {max_iters}")
    if not 0 <= iteration <= max_iters:
        raise ConfigurationError(f"iteration {iteration} outside [0, {max_iters}]")
    return min_lr + (base_lr - min_lr) * (1 - iteration / max_iters) ** power


def seed_everything(seed):
    random.seed(seed)
    np.random.seed(seed % 2 ** 32)
    torch.manual_seed(seed)


def param_groups(model: BanModel, optim: OptimConfig):
    """Bridges + Bi-TAB backbone at the base rate, Bi-TAB head(s) at ``head_lr_mult`` times it."""
    head_ids = {id(p) for p in model.bitab.head_parameters()}
    base, head = [], []
    for _, param in model.learnable_named_parameters():
        (head if id(param) in head_ids else base).append(param)
    return [
        {'params': base, 'lr': optim.base_lr, 'lr_mult': 1.0, 'name': 'base'},
        {'params': head, 'lr': optim.base_lr * optim.head_lr_mult, 'lr_mult': optim.head_lr_mult, 'name': 'head'},
    ]


def build_optimizer(model: BanModel, optim: OptimConfig):
    return torch.optim.AdamW(param_groups(model, optim), lr=optim.base_lr, betas=tuple(optim.betas),
                             eps=optim.eps, weight_decay=optim.weight_decay)


def set_lr(optimizer, lr):
    for group in optimizer.param_groups:
        group['lr'] = lr * group.get('lr_mult', 1.0)


def _to_device(batch, device):
    return {k: v.to(device) if isinstance(v, torch.Tensor) else v for k, v in batch.items()}


def dump_diagnostics(model, batch, iteration, directory, loss=None):
    """Inputs and learnable weights at the failing iteration, as a safetensors file."""
    directory = Path(directory)
    tensors = {f"batch.{k}": v for k, v in batch.items() if isinstance(v, torch.Tensor)}
    tensors.update({f"model.{name}": p for name, p in model.learnable_named_parameters()})
    metadata = {'iteration': iteration, 'loss': '' if loss is None else repr(float(loss))}
    return write_tensors(tensors, directory / f"diverged_iter{iteration:06d}.safetensors", metadata)


def train_step(model: BanModel, batch, optimizer, iteration=0, device='cpu', ignore_index=255,
               diagnostics_dir=None):
    """One forward, loss, backward and AdamW update; returns the detached loss."""
    model.train()
    batch = _to_device(batch, device)
    semantic = (batch['sem_t1'], batch['sem_t2']) if 'sem_t1' in batch else None
    logits = model(batch['t1'], batch['t2'])
    loss = cross_entropy_loss(logits, batch['label'], semantic, ignore_index)
    if not torch.isfinite(loss):
        path = None
        if diagnostics_dir is not None:
            path = dump_diagnostics(model, batch, iteration, diagnostics_dir, loss.detach())
        raise TrainingDivergedError(f"loss became {loss.item()} at iteration {iteration}"
                                    f"{f'; diagnostics in {path}' if path else ''}", iteration, path)
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return loss.detach()


@dataclass
class TrainResult:
    iterations: int
    losses: list = field(default_factory=list)
    reports: dict = field(default_factory=dict)
    best_metric: float | None = None
    best_iteration: int | None = None
    best_checkpoint: Path | None = None
    last_checkpoint: Path | None = None
    encoder_checksum: str = ''
    encoder_checksum_after: str = ''

    @property
    def encoder_unchanged(self):
        return self.encoder_checksum == self.encoder_checksum_after


class Trainer:
    """Owns the model, optimizer and loaders of one training run."""

    def __init__(self, run: RunConfig, model=None, device=None, recorder=None,
                 train_dataset=None, val_dataset=None, save_checkpoints=True):
        self.run = run
        self.device = torch.device(device or settings.BAN_DEVICE)
        if settings.BAN_NUM_THREADS:
            torch.set_num_threads(settings.BAN_NUM_THREADS)
        seed_everything(run.seed)
        self.model = (model if model is not None else build_ban_model(run)).to(self.device)
        self.optimizer = build_optimizer(self.model, run.optim)
        self.train_dataset = train_dataset if train_dataset is not None else \
            build_dataset(run, run.data.train_split, train=True)
        self._val_dataset = val_dataset
        self.recorder = recorder or RunRecorder(run, 'train')
        self.save_checkpoints = save_checkpoints
        self.output_dir = Path(run.output_dir)

    @property
    def val_dataset(self):
        if self._val_dataset is None:
            try:
                self._val_dataset = build_dataset(self.run, self.run.data.val_split)
            except DataError as e:
                logger.warning(f"No validation data, periodic evaluation is skipped: {str(e)}")
                self._val_dataset = False
        return self._val_dataset or None

    def batches(self):
        data = self.run.data
        loader = build_loader(self.train_dataset, data.batch_size, shuffle=True, seed=self.run.seed,
                              num_workers=data.num_workers or settings.BAN_NUM_WORKERS,
                              drop_last=len(self.train_dataset) >= data.batch_size)
        epoch = 0
        while True:
            self.train_dataset.set_epoch(epoch)
            for batch in loader:
                yield epoch, batch
            epoch += 1

    def validate(self, iteration):
        dataset = self.val_dataset
        if dataset is None:
            return None
        loader = build_loader(dataset, 1, num_workers=self.run.data.num_workers)
        report, _ = evaluate(self.model, loader, self.device, self.run.data.ignore_index,
                             self.run.inference.window, self.run.inference.stride)
        summary = ', '.join(f"{k}={v * 100:.2f}" for k, v in report.metric_items())
        logger.info(f"[{self.run.name}] iter {iteration} val: {summary}")
        self.recorder.log_metrics(report.metric_items(), iteration, 'val')
        return report

    def fit(self, max_iters=None):
        run, schedule = self.run, self.run.schedule
        max_iters = schedule.max_iters if max_iters is None else max_iters
        if max_iters < 1:
            raise ConfigurationError(f"training needs at least one iteration, got {max_iters}")
        result = TrainResult(iterations=max_iters, encoder_checksum=self.model.encoder.checksum())
        self.recorder.start(encoder_checksum=result.encoder_checksum)
        diagnostics_dir = self.output_dir / 'diagnostics'
        logger.info(f"Training '{run.name}' for {max_iters} iterations on {self.device}")
        try:
            batches = self.batches()
            for iteration in range(max_iters):
                _, batch = next(batches)
                lr = poly_lr(iteration, max_iters, run.optim.base_lr, schedule.power, schedule.min_lr)
                set_lr(self.optimizer, lr)
                loss = train_step(self.model, batch, self.optimizer, iteration, self.device,
                                  run.data.ignore_index, diagnostics_dir)
                result.losses.append(float(loss))
                step = iteration + 1
                if step % schedule.log_interval == 0 or step == max_iters:
                    logger.info(f"[{run.name}] iter {step}/{max_iters} loss {float(loss):.4f} lr {lr:.3e}")
                if step % schedule.eval_interval == 0 or step == max_iters:
                    self._after_eval(step, self.validate(step), result)
            if self.save_checkpoints:
                result.last_checkpoint = save_model_checkpoint(
                    self.model, self.output_dir / 'latest.safetensors', run, max_iters)
        except BanError as e:
            logger.error(f"Training '{run.name}' failed: {str(e)}")
            self.recorder.fail(e)
            raise

        result.encoder_checksum_after = self.model.encoder.checksum()
        if not result.encoder_unchanged:
            logger.error(f"Frozen encoder of '{run.name}' changed during training")
        self.recorder.finish(best_iteration=result.best_iteration, best_metric=result.best_metric,
                             checkpoint_path=str(result.best_checkpoint or result.last_checkpoint or ''))
        return result

    def _after_eval(self, step, report, result):
        if report is None:
            return
        result.reports[step] = report
        if result.best_metric is None or report.key_metric > result.best_metric:
            result.best_metric = report.key_metric
            result.best_iteration = step
            if self.save_checkpoints:
                result.best_checkpoint = save_model_checkpoint(
                    self.model, self.output_dir / 'best.safetensors', self.run, step, report.key_metric)
