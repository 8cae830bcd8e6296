# Generated by Django 4.2.7 on 2026-10-18 09:12

import django.core.validators
from django.db import migrations, models
import django.db.models.deletion
import uuid


class Migration(migrations.Migration):

    initial = True

    dependencies = [
    ]

    operations = [
        migrations.CreateModel(
            name='ScenarioRun',
            fields=[
                ('id', models.UUIDField(default=uuid.uuid4, editable=False, primary_key=True, serialize=False)),
                ('name', models.CharField(help_text='Scenario name', max_length=200)),
                ('scenario_path', models.CharField(help_text='Scenario file the run was started from', max_length=500)),
                ('status', models.CharField(choices=[('pending', 'Pending'), ('running', 'Running'), ('completed', 'Completed'), ('failed', 'Failed')], default='pending', help_text='Current status of the run', max_length=20)),
                ('duration_s', models.FloatField(help_text='Simulated duration in seconds', validators=[django.core.validators.MinValueValidator(0.0)])),
                ('sim_speed', models.FloatField(default=1.0, help_text='Simulation speed multiplier (0 = as fast as possible)', validators=[django.core.validators.MinValueValidator(0.0)])),
                ('single_process', models.BooleanField(default=False, help_text='Whether bridge and agents ran as threads of one process')),
                ('log_path', models.CharField(blank=True, help_text='Path of the NDJSON run log', max_length=500)),
                ('control_steps', models.PositiveIntegerField(default=0)),
                ('min_separation_m', models.FloatField(blank=True, null=True)),
                ('created_at', models.DateTimeField(auto_now_add=True)),
                ('completed_at', models.DateTimeField(blank=True, null=True)),
                ('error_message', models.TextField(blank=True, help_text='Error message if the run failed')),
            ],
            options={
                'ordering': ['-created_at'],
            },
        ),
        migrations.CreateModel(
            name='StressResult',
            fields=[
                ('id', models.AutoField(primary_key=True, serialize=False)),
                ('batch_id', models.UUIDField(db_index=True, default=uuid.uuid4)),
                ('sim_speed', models.FloatField(validators=[django.core.validators.MinValueValidator(0.0)])),
                ('spacecraft', models.PositiveIntegerField()),
                ('target_hz', models.FloatField(validators=[django.core.validators.MinValueValidator(0.0)])),
                ('achieved_hz', models.FloatField(validators=[django.core.validators.MinValueValidator(0.0)])),
                ('std_ms', models.FloatField(validators=[django.core.validators.MinValueValidator(0.0)])),
                ('drops', models.PositiveIntegerField(default=0)),
                ('cpu_bound', models.BooleanField(default=False)),
                ('duration_s', models.FloatField(validators=[django.core.validators.MinValueValidator(0.0)])),
                ('created_at', models.DateTimeField(auto_now_add=True)),
            ],
            options={
                'ordering': ['-created_at', 'spacecraft', 'target_hz'],
            },
        ),
        migrations.CreateModel(
            name='AgentSummary',
            fields=[
                ('id', models.AutoField(primary_key=True, serialize=False)),
                ('namespace', models.CharField(max_length=100)),
                ('role', models.CharField(choices=[('leader', 'Leader'), ('follower', 'Follower')], max_length=20)),
                ('control_steps', models.PositiveIntegerField(default=0)),
                ('degraded_steps', models.PositiveIntegerField(default=0)),
                ('max_error_m', models.FloatField(help_text="Maximum position error against the agent's reference", validators=[django.core.validators.MinValueValidator(0.0)])),
                ('rms_error_m', models.FloatField(validators=[django.core.validators.MinValueValidator(0.0)])),
                ('steady_state_error_m', models.FloatField(help_text='Maximum error after the settling time', validators=[django.core.validators.MinValueValidator(0.0)])),
                ('run', models.ForeignKey(on_delete=django.db.models.deletion.CASCADE, related_name='agents', to='formation.scenariorun')),
            ],
            options={
                'ordering': ['namespace'],
                'unique_together': {('run', 'namespace')},
            },
        ),
    ]
