from rest_framework import serializers
from .models import ScenarioRun, AgentSummary, StressResult


def _vector_field(length=3, **kwargs):
    return serializers.ListField(child=serializers.FloatField(), min_length=length, max_length=length, **kwargs)


class OrbitSerializer(serializers.Serializer):
    """Leader orbit elements; defaults are the near-circular LEO demonstration orbit."""

    a_km = serializers.FloatField(default=6778.0, min_value=6378.137)
    e = serializers.FloatField(default=0.001, min_value=0.0, max_value=0.99)
    i_deg = serializers.FloatField(default=45.0, min_value=0.0, max_value=180.0)
    raan_deg = serializers.FloatField(default=270.0)
    argp_deg = serializers.FloatField(default=90.0)
    mu = serializers.FloatField(required=False, min_value=0.0)


class BodySerializer(serializers.Serializer):
    mass_kg = serializers.FloatField(default=17.8, min_value=0.0)
    inertia = serializers.ListField(
        child=serializers.FloatField(),
        default=[0.315, 0.315, 0.315],
        help_text="Principal moments [kg m^2] or a row-major 3x3 matrix"
    )

    def validate_mass_kg(self, value):
        if value <= 0:
            raise serializers.ValidationError("Mass must be greater than 0 kg.")
        return value

    def validate_inertia(self, value):
        if len(value) not in (3, 9):
            raise serializers.ValidationError("Inertia must list 3 principal moments or 9 matrix entries.")
        return value


class ThrusterSerializer(serializers.Serializer):
    LAYOUT_CHOICES = ['cube12', 'planar8']

    layout = serializers.ChoiceField(choices=LAYOUT_CHOICES, default='cube12')
    arm_m = serializers.FloatField(default=0.17, min_value=0.0)
    nominal_thrust_n = serializers.FloatField(default=1.5, min_value=0.0)
    min_on_ms = serializers.FloatField(default=1.0, min_value=0.0)
    pwm_hz = serializers.FloatField(default=10.0, min_value=0.0)

    def validate(self, data):
        if data['nominal_thrust_n'] <= 0 or data['pwm_hz'] <= 0:
            raise serializers.ValidationError("Nominal thrust and PWM rate must be positive.")
        if data['min_on_ms'] / 1e3 >= 1.0 / data['pwm_hz']:
            raise serializers.ValidationError("Minimum on-time must be shorter than the PWM window.")
        return data


class WeightsSerializer(serializers.Serializer):
    q_p = serializers.FloatField(default=1.0, min_value=0.0)
    q_v = serializers.FloatField(default=30.0, min_value=0.0)
    q_q = serializers.FloatField(default=1000.0, min_value=0.0)
    q_omega = serializers.FloatField(default=10.0, min_value=0.0)
    r_force = serializers.FloatField(default=0.2, min_value=0.0)
    r_torque = serializers.FloatField(default=100.0, min_value=0.0)


class ControlSerializer(serializers.Serializer):
    rate_hz = serializers.FloatField(default=5.0, min_value=0.0)
    horizon = serializers.IntegerField(default=30, min_value=1)
    weights = WeightsSerializer(default=dict)
    terminal_factor = serializers.FloatField(default=20.0, min_value=0.0)
    force_max_n = serializers.FloatField(default=3.0, min_value=0.0)
    torque_max_nm = serializers.FloatField(default=0.51, min_value=0.0)
    d_min_m = serializers.FloatField(default=0.4, min_value=0.0)
    v_max_mps = serializers.FloatField(default=None, allow_null=True, min_value=0.0)
    max_iterations = serializers.IntegerField(default=50, min_value=1)

    def validate_rate_hz(self, value):
        if value <= 0:
            raise serializers.ValidationError("Control rate must be greater than 0 Hz.")
        return value


class WaypointSerializer(serializers.Serializer):
    position = _vector_field()
    yaw_deg = serializers.FloatField(default=0.0)


class WaypointPlanSerializer(serializers.Serializer):
    dwell_s = serializers.FloatField(default=20.0, min_value=0.0)
    cyclic = serializers.BooleanField(default=True)
    points = WaypointSerializer(many=True, default=lambda: [{'position': [0.0, 0.0, 0.0], 'yaw_deg': 0.0}])

    def validate_dwell_s(self, value):
        if value <= 0:
            raise serializers.ValidationError("Waypoint dwell must be greater than 0 s.")
        return value

    def validate_points(self, value):
        if not value:
            raise serializers.ValidationError("At least one waypoint is required.")
        return value


class AgentSerializer(serializers.Serializer):
    ROLE_CHOICES = ['leader', 'follower']

    namespace = serializers.RegexField(r'^[A-Za-z][A-Za-z0-9_]*$', max_length=64)
    role = serializers.ChoiceField(choices=ROLE_CHOICES)
    offset = _vector_field(allow_null=True, default=None)
    offset_yaw_deg = serializers.FloatField(default=0.0)
    initial_position = _vector_field(allow_null=True, default=None)
    initial_yaw_deg = serializers.FloatField(default=0.0)
    leader = serializers.CharField(max_length=64, required=False, allow_null=True, default=None,
                                   help_text="Namespace of the leader a follower tracks")
    waypoints = WaypointPlanSerializer(required=False, allow_null=True, default=None,
                                       help_text="Leader-specific plan overriding the scenario plan")

    def validate(self, data):
        if data['role'] == 'follower' and data.get('offset') is None:
            raise serializers.ValidationError({'offset': "Followers need a formation offset."})
        if data['role'] == 'leader' and data.get('leader'):
            raise serializers.ValidationError({'leader': "Leaders do not follow another agent."})
        if data['role'] == 'follower' and data.get('waypoints'):
            raise serializers.ValidationError({'waypoints': "Only leaders fly a waypoint plan."})
        return data


class SimulationSerializer(serializers.Serializer):
    duration_s = serializers.FloatField(default=120.0, min_value=0.0)
    speed = serializers.FloatField(default=1.0, min_value=0.0, help_text="0 runs unpaced")
    plant_step_s = serializers.FloatField(required=False, min_value=0.0)

    def validate_duration_s(self, value):
        if value <= 0:
            raise serializers.ValidationError("Duration must be greater than 0 s.")
        return value


class ScenarioConfigSerializer(serializers.Serializer):
    """Validates a scenario file; every section falls back to the demonstration defaults."""

    name = serializers.CharField(max_length=200)
    orbit = OrbitSerializer(default=dict)
    body = BodySerializer(default=dict)
    thrusters = ThrusterSerializer(default=dict)
    control = ControlSerializer(default=dict)
    waypoints = WaypointPlanSerializer(default=dict)
    agents = AgentSerializer(many=True)
    simulation = SimulationSerializer(default=dict)

    SECTIONS = ('orbit', 'body', 'thrusters', 'control', 'waypoints', 'simulation')

    def to_internal_value(self, data):
        # Omitted sections still go through their serializer so defaults are filled in.
        data = dict(data)
        for section in self.SECTIONS:
            if data.get(section) is None:
                data[section] = {}
        return super().to_internal_value(data)

    def validate_name(self, value):
        if not value or not value.strip():
            raise serializers.ValidationError("Scenario name cannot be empty.")
        return value.strip()

    def validate_agents(self, value):
        if not value:
            raise serializers.ValidationError("At least one agent is required.")
        namespaces = [agent['namespace'] for agent in value]
        duplicates = sorted({ns for ns in namespaces if namespaces.count(ns) > 1})
        if duplicates:
            raise serializers.ValidationError(f"Duplicate agent namespaces: {', '.join(duplicates)}")
        leaders = [agent['namespace'] for agent in value if agent['role'] == 'leader']
        if not leaders:
            raise serializers.ValidationError("At least one agent must have the leader role.")
        for agent in value:
            if agent['role'] != 'follower':
                continue
            if agent.get('leader') is None and len(leaders) > 1:
                raise serializers.ValidationError(
                    f"Follower {agent['namespace']} must name its leader when several leaders fly."
                )
            if agent.get('leader') is not None and agent['leader'] not in leaders:
                raise serializers.ValidationError(
                    f"Follower {agent['namespace']} tracks unknown leader {agent['leader']}."
                )
        return value

    def validate(self, data):
        """Cross-section checks on rates."""
        ratio = data['thrusters']['pwm_hz'] / data['control']['rate_hz']
        if ratio < 1 or abs(ratio - round(ratio)) > 1e-9:
            raise serializers.ValidationError(
                {'thrusters': "PWM rate must be an integer multiple of the control rate."}
            )
        return data


class StressConfigSerializer(serializers.Serializer):
    """Validates one stress-harness configuration."""

    sim_speed = serializers.FloatField(default=1.0, min_value=0.0)
    spacecraft = serializers.IntegerField(default=1, min_value=1)
    target_hz = serializers.FloatField(default=100.0, min_value=0.0)
    duration_s = serializers.FloatField(default=10.0)
    schema = serializers.CharField(default='SCStates')

    def validate_sim_speed(self, value):
        if value <= 0:
            raise serializers.ValidationError("Sim speed must be greater than 0.")
        return value

    def validate_target_hz(self, value):
        if value <= 0:
            raise serializers.ValidationError("Target rate must be greater than 0 Hz.")
        return value

    def validate_duration_s(self, value):
        if value < 10.0:
            raise serializers.ValidationError("Duration must be at least 10 s for stable statistics.")
        return value


class AgentSummarySerializer(serializers.ModelSerializer):
    """Serializer for AgentSummary model."""

    class Meta:
        model = AgentSummary
        fields = [
            'id', 'namespace', 'role', 'control_steps', 'degraded_steps',
            'max_error_m', 'rms_error_m', 'steady_state_error_m'
        ]
        read_only_fields = fields


class ScenarioRunSerializer(serializers.ModelSerializer):
    """Serializer for ScenarioRun model with nested agent summaries."""

    agents = AgentSummarySerializer(many=True, read_only=True)
    agent_count = serializers.SerializerMethodField()

    class Meta:
        model = ScenarioRun
        fields = [
            'id', 'name', 'scenario_path', 'status', 'duration_s', 'sim_speed',
            'single_process', 'log_path', 'control_steps', 'min_separation_m',
            'agents', 'agent_count', 'created_at', 'completed_at', 'error_message'
        ]
        read_only_fields = fields

    def get_agent_count(self, obj):
        """Get the number of agents summarized for the run."""
        return obj.agents.count()


class StressResultSerializer(serializers.ModelSerializer):
    """Serializer for StressResult model."""

    class Meta:
        model = StressResult
        fields = [
            'id', 'batch_id', 'sim_speed', 'spacecraft', 'target_hz', 'achieved_hz',
            'std_ms', 'drops', 'cpu_bound', 'duration_s', 'created_at'
        ]
        read_only_fields = fields
