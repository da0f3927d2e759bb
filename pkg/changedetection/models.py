from django.db import models


class TrainingRun(models.Model):
    """One train / eval / bench / infer invocation"""
    KIND_CHOICES = [
        ('train', 'train'),
        ('eval', 'eval'),
        ('bench', 'bench'),
        ('infer', 'infer'),
    ]

    STATUS_CHOICES = [
        ('running', 'running'),
        ('completed', 'completed'),
        ('failed', 'failed'),
    ]

    config_name = models.CharField(max_length=200)
    config_path = models.CharField(max_length=500, blank=True)
    kind = models.CharField(max_length=10, choices=KIND_CHOICES, default='train')
    status = models.CharField(max_length=10, choices=STATUS_CHOICES, default='running')
    seed = models.IntegerField(default=0)
    work_dir = models.CharField(max_length=500, blank=True)

    best_iteration = models.PositiveIntegerField(null=True, blank=True)
    best_metric = models.FloatField(null=True, blank=True)
    checkpoint_path = models.CharField(max_length=500, blank=True)
    encoder_checksum = models.CharField(max_length=64, blank=True, help_text="SHA-256 of the frozen encoder")
    error_message = models.TextField(blank=True)

    started_at = models.DateTimeField(auto_now_add=True)
    finished_at = models.DateTimeField(null=True, blank=True)

    class Meta:
        ordering = ['-started_at']

    def __str__(self):
        return f"{self.kind} {self.config_name} ({self.status})"


class MetricRecord(models.Model):
    """A single reported metric value of a run"""
    run = models.ForeignKey(TrainingRun, on_delete=models.CASCADE, related_name='metrics')
    iteration = models.PositiveIntegerField(default=0)
    split = models.CharField(max_length=20, default='val')
    name = models.CharField(max_length=50)
    value = models.FloatField()
    created_at = models.DateTimeField(auto_now_add=True)

    class Meta:
        ordering = ['run', 'iteration', 'name']

    def __str__(self):
        return f"{self.run_id} it{self.iteration} {self.split}/{self.name}={self.value:.4f}"
