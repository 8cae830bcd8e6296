import uuid
from django.db import models
from django.core.validators import MinValueValidator


class ScenarioRun(models.Model):
    """Model representing one formation scenario run and its log."""

    STATUS_CHOICES = [
        ('pending', 'Pending'),
        ('running', 'Running'),
        ('completed', 'Completed'),
        ('failed', 'Failed'),
    ]

    id = models.UUIDField(primary_key=True, default=uuid.uuid4, editable=False)
    name = models.CharField(max_length=200, help_text="Scenario name")
    scenario_path = models.CharField(max_length=500, help_text="Scenario file the run was started from")
    status = models.CharField(
        max_length=20,
        choices=STATUS_CHOICES,
        default='pending',
        help_text="Current status of the run"
    )
    duration_s = models.FloatField(
        validators=[MinValueValidator(0.0)],
        help_text="Simulated duration in seconds"
    )
    sim_speed = models.FloatField(
        default=1.0,
        validators=[MinValueValidator(0.0)],
        help_text="Simulation speed multiplier (0 = as fast as possible)"
    )
    single_process = models.BooleanField(
        default=False,
        help_text="Whether bridge and agents ran as threads of one process"
    )
    log_path = models.CharField(max_length=500, blank=True, help_text="Path of the NDJSON run log")
    control_steps = models.PositiveIntegerField(default=0)
    min_separation_m = models.FloatField(null=True, blank=True)
    created_at = models.DateTimeField(auto_now_add=True)
    completed_at = models.DateTimeField(null=True, blank=True)
    error_message = models.TextField(
        blank=True,
        help_text="Error message if the run failed"
    )

    class Meta:
        ordering = ['-created_at']

    def __str__(self):
        return f"Run {self.id} - {self.name} ({self.status})"

    def is_complete(self):
        """Check if the run is in a completed state (success or failure)."""
        return self.status in ['completed', 'failed']

    def is_successful(self):
        """Check if the run completed successfully."""
        return self.status == 'completed'


class AgentSummary(models.Model):
    """Per-agent tracking metrics of a completed run."""

    ROLE_CHOICES = [
        ('leader', 'Leader'),
        ('follower', 'Follower'),
    ]

    id = models.AutoField(primary_key=True)
    run = models.ForeignKey(
        ScenarioRun,
        on_delete=models.CASCADE,
        related_name='agents'
    )
    namespace = models.CharField(max_length=100)
    role = models.CharField(max_length=20, choices=ROLE_CHOICES)
    control_steps = models.PositiveIntegerField(default=0)
    degraded_steps = models.PositiveIntegerField(default=0)
    max_error_m = models.FloatField(
        validators=[MinValueValidator(0.0)],
        help_text="Maximum position error against the agent's reference"
    )
    rms_error_m = models.FloatField(validators=[MinValueValidator(0.0)])
    steady_state_error_m = models.FloatField(
        validators=[MinValueValidator(0.0)],
        help_text="Maximum error after the settling time"
    )

    class Meta:
        ordering = ['namespace']
        unique_together = ['run', 'namespace']

    def __str__(self):
        return f"{self.namespace} ({self.role}) in run {self.run_id}"


class StressResult(models.Model):
    """One row of a bridge throughput stress batch."""

    id = models.AutoField(primary_key=True)
    batch_id = models.UUIDField(default=uuid.uuid4, db_index=True)
    sim_speed = models.FloatField(validators=[MinValueValidator(0.0)])
    spacecraft = models.PositiveIntegerField()
    target_hz = models.FloatField(validators=[MinValueValidator(0.0)])
    achieved_hz = models.FloatField(validators=[MinValueValidator(0.0)])
    std_ms = models.FloatField(validators=[MinValueValidator(0.0)])
    drops = models.PositiveIntegerField(default=0)
    cpu_bound = models.BooleanField(default=False)
    duration_s = models.FloatField(validators=[MinValueValidator(0.0)])
    created_at = models.DateTimeField(auto_now_add=True)

    class Meta:
        ordering = ['-created_at', 'spacecraft', 'target_hz']

    def __str__(self):
        return f"{self.spacecraft} s/c @ {self.target_hz:g} Hz -> {self.achieved_hz:.1f} Hz"

    def clean(self):
        """Custom validation for stress rows."""
        from django.core.exceptions import ValidationError

        if self.achieved_hz > self.target_hz * 1.02:
            raise ValidationError({'achieved_hz': 'Achieved rate cannot exceed the target by more than 2%'})
