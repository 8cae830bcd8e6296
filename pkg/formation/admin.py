from django.contrib import admin
from .models import ScenarioRun, AgentSummary, StressResult


class AgentSummaryInline(admin.TabularInline):
    model = AgentSummary
    extra = 0
    readonly_fields = ['namespace', 'role', 'control_steps', 'degraded_steps',
                       'max_error_m', 'rms_error_m', 'steady_state_error_m']


@admin.register(ScenarioRun)
class ScenarioRunAdmin(admin.ModelAdmin):
    list_display = ['id', 'name', 'status', 'duration_s', 'sim_speed', 'created_at', 'completed_at']
    list_filter = ['status', 'single_process', 'created_at']
    search_fields = ['name', 'scenario_path']
    ordering = ['-created_at']
    readonly_fields = ['id', 'created_at', 'completed_at']
    inlines = [AgentSummaryInline]


@admin.register(StressResult)
class StressResultAdmin(admin.ModelAdmin):
    list_display = ['batch_id', 'spacecraft', 'target_hz', 'achieved_hz', 'std_ms', 'drops', 'cpu_bound']
    list_filter = ['cpu_bound', 'sim_speed', 'created_at']
    search_fields = ['batch_id']
    ordering = ['-created_at']
    readonly_fields = ['created_at']


@admin.register(AgentSummary)
class AgentSummaryAdmin(admin.ModelAdmin):
    list_display = ['namespace', 'role', 'run', 'max_error_m', 'steady_state_error_m', 'degraded_steps']
    list_filter = ['role']
    search_fields = ['namespace', 'run__name']
