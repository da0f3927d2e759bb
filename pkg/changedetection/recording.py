"""Run history in the database, switched by ``BAN_RECORD_RUNS``."""
import logging

from django.conf import settings
from django.db import DatabaseError
from django.utils import timezone

from .models import MetricRecord, TrainingRun

logger = logging.getLogger(__name__)


class RunRecorder:
    def __init__(self, run_config, kind, enabled=None):
        self.run_config = run_config
        self.kind = kind
        self.enabled = settings.BAN_RECORD_RUNS if enabled is None else enabled
        self.record = None

    def start(self, **fields):
        if not self.enabled:
            return self
        try:
            self.record = TrainingRun.objects.create(
                config_name=self.run_config.name,
                config_path=self.run_config.source_path,
                kind=self.kind,
                seed=self.run_config.seed,
                work_dir=str(self.run_config.output_dir),
                **fields,
            )
        except DatabaseError as e:
            logger.error(f"Cannot record {self.kind} run '{self.run_config.name}': {str(e)}")
            self.enabled = False
        return self

    def log_metrics(self, metrics, iteration=0, split='val'):
        if self.record is None:
            return
        MetricRecord.objects.bulk_create([
            MetricRecord(run=self.record, iteration=iteration, split=split, name=name, value=float(value))
            for name, value in metrics
        ])

    def finish(self, status='completed', **fields):
        if self.record is None:
            return
        for key, value in fields.items():
            setattr(self.record, key, value)
        self.record.status = status
        self.record.finished_at = timezone.now()
        self.record.save()

    def fail(self, error):
        self.finish('failed', error_message=str(error))
