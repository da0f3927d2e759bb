from celery import shared_task
from dataclasses import asdict
import logging

from . import services
from .exceptions import BanError

logger = logging.getLogger(__name__)


@shared_task
def run_training(config_path, seed=None, max_iters=None):
    """Train a model from a run-config file"""
    try:
        summary = services.train(config_path, seed=seed, max_iters=max_iters)
        logger.info(f"Training of {config_path} finished: {summary}")
        return {'status': 'completed', **summary}
    except BanError as e:
        logger.error(f"Training of {config_path} failed: {str(e)}")
        return {'status': 'failed', 'error': str(e)}


@shared_task
def run_evaluation(config_path, checkpoint, split=None, seed=None, out_dir=None, exclude_no_change=False,
                   trace_path=None):
    """Evaluate a checkpoint and write the metric report"""
    try:
        report, path = services.evaluate_checkpoint(config_path, checkpoint, split=split, seed=seed,
                                                    out_dir=out_dir, exclude_no_change=exclude_no_change,
                                                    trace_path=trace_path)
        logger.info(f"Evaluation of {checkpoint} written to {path}")
        return {'status': 'completed', 'report': report.as_dict(), 'path': str(path)}
    except BanError as e:
        logger.error(f"Evaluation of {checkpoint} failed: {str(e)}")
        return {'status': 'failed', 'error': str(e)}


@shared_task
def run_inference(config_path, path_t1, path_t2, out_path, checkpoint=None, seed=None, trace_path=None):
    """Predict the change mask of one image pair"""
    try:
        written = services.infer_pair(config_path, path_t1, path_t2, out_path, checkpoint=checkpoint, seed=seed,
                                      trace_path=trace_path)
        return {'status': 'completed', 'outputs': [str(p) for p in written]}
    except BanError as e:
        logger.error(f"Inference on {path_t1} / {path_t2} failed: {str(e)}")
        return {'status': 'failed', 'error': str(e)}


@shared_task
def run_benchmark(config_path, resolution=None, n_images=10, checkpoint=None, aris_target=None):
    """Measure sliding-window throughput"""
    try:
        result = services.benchmark(config_path, resolution=resolution, n_images=n_images,
                                    checkpoint=checkpoint, aris_target=aris_target)
        return {'status': 'completed', **asdict(result)}
    except BanError as e:
        logger.error(f"Benchmark of {config_path} failed: {str(e)}")
        return {'status': 'failed', 'error': str(e)}
