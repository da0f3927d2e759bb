import logging
import os

from celery import Celery
from celery.signals import worker_process_init

# Set the default Django settings module for the 'celery' program
os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'bancd.settings')

app = Celery('bancd')

# Training, evaluation and benchmark jobs read their CELERY_* settings from Django
app.config_from_object('django.conf:settings', namespace='CELERY')

app.autodiscover_tasks()

logger = logging.getLogger(__name__)


@worker_process_init.connect
def configure_torch(**kwargs):
    """Pin the intra-op thread count of each worker process before it takes a job."""
    from django.conf import settings
    import torch

    if settings.BAN_NUM_THREADS:
        torch.set_num_threads(settings.BAN_NUM_THREADS)
    logger.info(f"Worker ready: torch {torch.__version__}, {torch.get_num_threads()} threads, "
                f"device {settings.BAN_DEVICE}")
