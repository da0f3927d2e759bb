"""Train / eval / infer / bench entrypoints shared by the management commands and Celery tasks."""
from __future__ import annotations

import logging
from pathlib import Path

import torch
from django.conf import settings

from .ban import build_ban_model, count_params
from .checkpoints import load_model_checkpoint, save_bridge_trace
from .config import load_run_config
from .datasets import build_dataset, build_loader, load_image, load_mask, save_mask
from .exceptions import BanError, DataError
from .inference import evaluate, fps_benchmark, predict
from .metrics import ConfusionCounts, MetricReport, confusion_update, merge_counts, write_report
from .recording import RunRecorder
from .training import Trainer, seed_everything
from .transforms import normalize_image

logger = logging.getLogger(__name__)


def load_run(config_path, seed=None, overrides=None):
    run = load_run_config(config_path, overrides)
    if seed is not None:
        run = run.with_seed(seed)
    return run


class BridgeTraceCollector:
    """Keeps the latest trace of every (stage, phase) bridge call."""

    def __init__(self):
        self.records = {}

    def __call__(self, stage, phase, trace):
        self.records[(stage, phase)] = trace

    def save(self, path):
        if not self.records:
            raise DataError("no bridge calls were traced (is bridging disabled?)")
        return save_bridge_trace(self.records, path)


def _model_for(run, checkpoint=None, device=None):
    device = torch.device(device or settings.BAN_DEVICE)
    seed_everything(run.seed)
    model = build_ban_model(run)
    if checkpoint:
        load_model_checkpoint(model, checkpoint)
    return model.to(device), device


def train(config_path, seed=None, max_iters=None, overrides=None):
    run = load_run(config_path, seed, overrides)
    result = Trainer(run).fit(max_iters)
    return {
        'config': run.name,
        'iterations': result.iterations,
        'final_loss': result.losses[-1] if result.losses else None,
        'best_metric': result.best_metric,
        'best_iteration': result.best_iteration,
        'checkpoint': str(result.best_checkpoint or result.last_checkpoint or ''),
        'encoder_unchanged': result.encoder_unchanged,
    }


def evaluate_checkpoint(config_path, checkpoint, split=None, seed=None, out_dir=None,
                        exclude_no_change=False, trace_path=None):
    run = load_run(config_path, seed)
    recorder = RunRecorder(run, 'eval').start(checkpoint_path=str(checkpoint or ''))
    try:
        model, device = _model_for(run, checkpoint)
        collector = None
        if trace_path:
            collector = model.trace_recorder = BridgeTraceCollector()
        split = split or run.data.test_split
        loader = build_loader(build_dataset(run, split), 1, num_workers=run.data.num_workers)
        report, counts = evaluate(model, loader, device, run.data.ignore_index,
                                  run.inference.window, run.inference.stride, exclude_no_change)
        out_dir = Path(out_dir) if out_dir else Path(run.output_dir)
        report_path = write_report(report, out_dir)
        if collector is not None:
            collector.save(trace_path)
    except BanError as e:
        recorder.fail(e)
        raise
    recorder.log_metrics(report.metric_items(), split=split)
    recorder.finish(best_metric=report.key_metric, encoder_checksum=model.encoder.checksum())
    return report, report_path


def infer_pair(config_path, path_t1, path_t2, out_path, checkpoint=None, seed=None, trace_path=None):
    """Predict one change mask (written as 0 / 255) and, for SCD, the two class maps next to it."""
    run = load_run(config_path, seed)
    model, device = _model_for(run, checkpoint)
    collector = None
    if trace_path:
        collector = model.trace_recorder = BridgeTraceCollector()
    x1 = normalize_image(load_image(path_t1), run.data.mean, run.data.std).unsqueeze(0).to(device)
    x2 = normalize_image(load_image(path_t2), run.data.mean, run.data.std).unsqueeze(0).to(device)
    if x1.shape != x2.shape:
        raise DataError(f"{path_t1} and {path_t2} differ in size: {tuple(x1.shape)} vs {tuple(x2.shape)}")
    prediction = predict(model, x1, x2, run.inference.window, run.inference.stride)
    out_path = Path(out_path)
    save_mask(prediction.change[0] * 255, out_path)
    written = [out_path]
    if prediction.is_scd:
        for phase in ('t1', 't2'):
            path = out_path.with_name(f"{out_path.stem}_sem_{phase}{out_path.suffix}")
            written.append(save_mask(getattr(prediction, f"semantic_{phase}")[0], path))
    if collector is not None:
        written.append(collector.save(trace_path))
    logger.info(f"Wrote {', '.join(str(p) for p in written)}")
    return written


def parameter_report(config_path, seed=None):
    run = load_run(config_path, seed)
    seed_everything(run.seed)
    return count_params(build_ban_model(run))


def benchmark(config_path, resolution=None, n_images=10, checkpoint=None, seed=None, aris_target=None):
    overrides = {'aris': {'target': aris_target}} if aris_target else None
    run = load_run(config_path, seed, overrides)
    recorder = RunRecorder(run, 'bench').start(checkpoint_path=str(checkpoint or ''))
    try:
        model, device = _model_for(run, checkpoint)
        result = fps_benchmark(model, resolution or run.crop_size, n_images, run.inference.window,
                               run.inference.stride, warmup=run.inference.fps_warmup, device=device)
    except BanError as e:
        recorder.fail(e)
        raise
    recorder.log_metrics([('fps', result.fps)], split='bench')
    recorder.finish(encoder_checksum=model.encoder.checksum())
    return result


def score_mask_dirs(pred_dir, label_dir, num_semantic_classes=0, divisor=255, ignore_index=255,
                    exclude_no_change=False):
    """Metric report from saved masks with matching filenames.

    BCD: both folders hold change masks directly. SCD: both hold ``label/``, ``sem_t1/``
    and ``sem_t2/`` subfolders. ``divisor`` maps stored change values (0 / 255) to 0 / 1.
    """
    pred_dir, label_dir = Path(pred_dir), Path(label_dir)
    scd = num_semantic_classes > 0
    change_pred = pred_dir / 'label' if scd else pred_dir
    change_label = label_dir / 'label' if scd else label_dir
    for folder in (change_pred, change_label):
        if not folder.is_dir():
            raise DataError(f"mask folder does not exist: {folder}")
    names = sorted(p.name for p in change_label.iterdir() if p.is_file())
    missing = [n for n in names if not (change_pred / n).exists()]
    if missing:
        raise DataError(f"{len(missing)} label masks have no prediction: {', '.join(missing[:10])}")
    if not names:
        raise DataError(f"no masks found in {change_label}")
    total = ConfusionCounts.empty(num_semantic_classes)
    for name in names:
        counts = confusion_update(ConfusionCounts.empty(num_semantic_classes),
                                  load_mask(change_pred / name, divisor), load_mask(change_label / name, divisor),
                                  ignore_index=ignore_index)
        if scd:
            for phase in ('sem_t1', 'sem_t2'):
                counts = confusion_update(counts, load_mask(pred_dir / phase / name),
                                          load_mask(label_dir / phase / name), semantic=True,
                                          ignore_index=ignore_index)
        total = merge_counts(total, counts)
    return MetricReport.from_counts(total, scd=scd, exclude_no_change=exclude_no_change)
