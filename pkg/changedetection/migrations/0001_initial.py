# Generated by Django 4.2.7 on 2026-10-18 09:12

from django.db import migrations, models
import django.db.models.deletion


class Migration(migrations.Migration):

    initial = True

    dependencies = [
    ]

    operations = [
        migrations.CreateModel(
            name='TrainingRun',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('config_name', models.CharField(max_length=200)),
                ('config_path', models.CharField(blank=True, max_length=500)),
                ('kind', models.CharField(choices=[('train', 'train'), ('eval', 'eval'), ('bench', 'bench'), ('infer', 'infer')], default='train', max_length=10)),
                ('status', models.CharField(choices=[('running', 'running'), ('completed', 'completed'), ('failed', 'failed')], default='running', max_length=10)),
                ('seed', models.IntegerField(default=0)),
                ('work_dir', models.CharField(blank=True, max_length=500)),
                ('best_iteration', models.PositiveIntegerField(blank=True, null=True)),
                ('best_metric', models.FloatField(blank=True, null=True)),
                ('checkpoint_path', models.CharField(blank=True, max_length=500)),
                ('encoder_checksum', models.CharField(blank=True, help_text='SHA-256 of the frozen encoder', max_length=64)),
                ('error_message', models.TextField(blank=True)),
                ('started_at', models.DateTimeField(auto_now_add=True)),
                ('finished_at', models.DateTimeField(blank=True, null=True)),
            ],
            options={
                'ordering': ['-started_at'],
            },
        ),
        migrations.CreateModel(
            name='MetricRecord',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('iteration', models.PositiveIntegerField(default=0)),
                ('split', models.CharField(default='val', max_length=20)),
                ('name', models.CharField(max_length=50)),
                ('value', models.FloatField()),
                ('created_at', models.DateTimeField(auto_now_add=True)),
                ('run', models.ForeignKey(on_delete=django.db.models.deletion.CASCADE, related_name='metrics', to='changedetection.trainingrun')),
            ],
            options={
                'ordering': ['run', 'iteration', 'name'],
            },
        ),
    ]
