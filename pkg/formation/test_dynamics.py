"""
Unit tests for the dynamics module.

Covers Hill frame construction, CW accelerations, attitude kinematics,
the RK4 integrator and the analytic CW transition matrix oracle.
"""

import math

import numpy as np
from django.test import SimpleTestCase

from .dynamics import (
    BodyParams,
    DegenerateOrbitError,
    DomainError,
    IDENTITY_QUAT,
    InertialState,
    MU_EARTH,
    OrbitParams,
    OrbitalElements,
    RigidBodyState,
    SingularInertiaError,
    Wrench,
    attitude_deriv,
    attitude_error_angle,
    build_hill_frame,
    cw_accel,
    cw_stm,
    elements_to_inertial,
    mean_motion,
    quat_from_axis_angle,
    quat_from_yaw,
    quat_multiply,
    quat_rotate,
    quat_to_dcm,
    step_rk4,
    yaw_from_quat,
)


def _unit_body():
    return BodyParams(mass=1.0, inertia=np.eye(3))


def _state(p=(0.0, 0.0, 0.0), v=(0.0, 0.0, 0.0), q=IDENTITY_QUAT, omega=(0.0, 0.0, 0.0)):
    return RigidBodyState(p_h=np.array(p, dtype=float), v_h=np.array(v, dtype=float),
                          q_hb=np.array(q, dtype=float), omega_b=np.array(omega, dtype=float))


class BuildHillFrameTest(SimpleTestCase):
    """Test Hill frame construction."""

    def test_axis_aligned_circular_case(self):
        frame = build_hill_frame(InertialState(p=np.array([7e6, 0, 0]), v=np.array([0, 7.5e3, 0])))
        np.testing.assert_allclose(frame.x_hat, [1, 0, 0], atol=1e-12)
        np.testing.assert_allclose(frame.y_hat, [0, 1, 0], atol=1e-12)
        np.testing.assert_allclose(frame.z_hat, [0, 0, 1], atol=1e-12)

    def test_rotated_case(self):
        frame = build_hill_frame(InertialState(p=np.array([0, 7e6, 0]), v=np.array([-7.5e3, 0, 0])))
        np.testing.assert_allclose(frame.x_hat, [0, 1, 0], atol=1e-12)
        np.testing.assert_allclose(frame.y_hat, [-1, 0, 0], atol=1e-12)
        np.testing.assert_allclose(frame.z_hat, [0, 0, 1], atol=1e-12)

    def test_polar_velocity_matches_cross_products(self):
        p = np.array([7e6, 0.0, 0.0])
        v = np.array([0.0, 0.0, 7.5e3])
        frame = build_hill_frame(InertialState(p=p, v=v))

        h = np.cross(p, v)
        np.testing.assert_allclose(frame.z_hat, h / np.linalg.norm(h), atol=1e-12)
        np.testing.assert_allclose(frame.z_hat, [0, -1, 0], atol=1e-12)
        np.testing.assert_allclose(frame.y_hat, np.cross(frame.z_hat, frame.x_hat), atol=1e-12)
        np.testing.assert_allclose(frame.y_hat, [0, 0, 1], atol=1e-12)

    def test_radial_trajectory_is_degenerate(self):
        with self.assertRaises(DegenerateOrbitError):
            build_hill_frame(InertialState(p=np.array([7e6, 0, 0]), v=np.array([100.0, 0, 0])))

    def test_zero_position_is_degenerate(self):
        with self.assertRaises(DegenerateOrbitError):
            build_hill_frame(InertialState(p=np.zeros(3), v=np.array([0, 1.0, 0])))

    def test_random_frames_are_orthonormal_and_right_handed(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            p = rng.normal(size=3) * 7e6
            v = rng.normal(size=3) * 7e3
            frame = build_hill_frame(InertialState(p=p, v=v))

            for axis in (frame.x_hat, frame.y_hat, frame.z_hat):
                self.assertAlmostEqual(np.linalg.norm(axis), 1.0, delta=1e-12)
            self.assertLess(abs(frame.x_hat @ frame.y_hat), 1e-12)
            self.assertLess(abs(frame.y_hat @ frame.z_hat), 1e-12)
            self.assertLess(abs(frame.x_hat @ frame.z_hat), 1e-12)
            np.testing.assert_allclose(np.cross(frame.x_hat, frame.y_hat), frame.z_hat, atol=1e-12)

    def test_hill_round_trip(self):
        frame = build_hill_frame(InertialState(p=np.array([7e6, 1e5, 0]), v=np.array([0, 7.5e3, 1e2])))
        point = np.array([1.0, -2.0, 0.5])
        np.testing.assert_allclose(frame.to_hill(frame.to_inertial(point)), point, atol=1e-6)


class OrbitTest(SimpleTestCase):
    """Test mean motion and orbital element conversion."""

    def test_mean_motion_examples(self):
        self.assertEqual(mean_motion(1.0, 1.0), 1.0)
        self.assertEqual(mean_motion(4.0, 1.0), 2.0)
        self.assertAlmostEqual(mean_motion(MU_EARTH, 6.778e6), 1.131401e-3, delta=1e-7)

    def test_mean_motion_rejects_non_positive_input(self):
        with self.assertRaises(DomainError):
            mean_motion(0.0, 1.0)
        with self.assertRaises(DomainError):
            mean_motion(1.0, -1.0)

    def test_orbit_params_consistency(self):
        orbit = OrbitParams.circular(6.778e6)
        self.assertAlmostEqual(orbit.n ** 2 * orbit.a ** 3 / orbit.mu, 1.0, delta=1e-9)

    def test_elements_to_inertial_at_periapsis(self):
        elements = OrbitalElements.from_degrees(6.778e6, 0.001, 45.0, 270.0, 90.0)
        state = elements_to_inertial(elements)

        self.assertAlmostEqual(np.linalg.norm(state.p), 6.778e6 * (1 - 0.001), delta=1e-3)
        h = np.cross(state.p, state.v)
        expected_normal = np.array([-math.sin(math.radians(45)), 0.0, math.cos(math.radians(45))])
        np.testing.assert_allclose(h / np.linalg.norm(h), expected_normal, atol=1e-12)
        # Perigee speed from the vis-viva equation
        speed = math.sqrt(MU_EARTH * (2 / np.linalg.norm(state.p) - 1 / 6.778e6))
        self.assertAlmostEqual(np.linalg.norm(state.v) / speed, 1.0, delta=1e-12)

    def test_elements_reject_hyperbolic_orbit(self):
        with self.assertRaises(DomainError):
            elements_to_inertial(OrbitalElements(a=7e6, e=1.2, i=0, raan=0, argp=0))


class CwAccelTest(SimpleTestCase):
    """Test the Clohessy-Wiltshire acceleration."""

    def test_equilibrium_at_origin(self):
        np.testing.assert_array_equal(cw_accel(_state(), Wrench.zero(), 0.001, 1.0), np.zeros(3))

    def test_radial_term(self):
        np.testing.assert_allclose(cw_accel(_state(p=(1, 0, 0)), Wrench.zero(), 0.001, 1.0),
                                   [3e-6, 0, 0], atol=1e-18)

    def test_out_of_plane_term(self):
        np.testing.assert_allclose(cw_accel(_state(p=(0, 0, 1)), Wrench.zero(), 0.001, 1.0),
                                   [0, 0, -1e-6], atol=1e-18)

    def test_body_force_is_rotated_into_hill_frame(self):
        q = quat_from_yaw(math.pi / 2)
        wrench = Wrench(force_b=np.array([2.0, 0, 0]), torque_b=np.zeros(3))
        np.testing.assert_allclose(cw_accel(_state(q=q), wrench, 0.0, 2.0), [0, 1, 0], atol=1e-12)

    def test_linear_in_state_for_fixed_wrench(self):
        rng = np.random.default_rng(3)
        wrench = Wrench(force_b=np.array([0.3, -0.2, 0.1]), torque_b=np.zeros(3))
        x = _state(p=rng.normal(size=3), v=rng.normal(size=3))
        alpha = 2.5
        scaled = x._replace(p_h=alpha * x.p_h, v_h=alpha * x.v_h)

        offset = cw_accel(scaled, wrench, 0.0011, 17.8) - alpha * cw_accel(x, wrench, 0.0011, 17.8)
        np.testing.assert_allclose(offset, (1 - alpha) * wrench.force_b / 17.8, atol=1e-14)

    def test_rejects_non_positive_mass(self):
        with self.assertRaises(DomainError):
            cw_accel(_state(), Wrench.zero(), 0.001, 0.0)


class AttitudeDerivTest(SimpleTestCase):
    """Test quaternion kinematics and Euler's equations."""

    def test_rest(self):
        q_dot, omega_dot = attitude_deriv(IDENTITY_QUAT, np.zeros(3), np.zeros(3), np.eye(3))
        np.testing.assert_array_equal(q_dot, np.zeros(4))
        np.testing.assert_array_equal(omega_dot, np.zeros(3))

    def test_pure_z_spin(self):
        q_dot, _ = attitude_deriv(IDENTITY_QUAT, np.array([0, 0, 0.4]), np.zeros(3), np.eye(3))
        np.testing.assert_allclose(q_dot, [0, 0, 0, 0.2], atol=1e-15)

    def test_gyroscopic_term(self):
        _, omega_dot = attitude_deriv(IDENTITY_QUAT, np.ones(3), np.zeros(3), np.diag([1.0, 2.0, 3.0]))
        np.testing.assert_allclose(omega_dot, [-1.0, 1.0, -1.0 / 3.0], atol=1e-15)

    def test_singular_inertia(self):
        with self.assertRaises(SingularInertiaError):
            attitude_deriv(IDENTITY_QUAT, np.zeros(3), np.zeros(3), np.diag([1.0, 1.0, 0.0]))

    def test_non_unit_quaternion_rejected(self):
        with self.assertRaises(DomainError):
            attitude_deriv(np.array([2.0, 0, 0, 0]), np.zeros(3), np.zeros(3), np.eye(3))

    def test_body_params_validation(self):
        with self.assertRaises(DomainError):
            BodyParams(mass=-1.0, inertia=np.eye(3))
        with self.assertRaises(DomainError):
            BodyParams(mass=1.0, inertia=np.array([[1.0, 0.1, 0], [0, 1.0, 0], [0, 0, 1.0]]))
        with self.assertRaises(SingularInertiaError):
            BodyParams(mass=1.0, inertia=np.diag([1.0, -1.0, 1.0]))


class QuaternionTest(SimpleTestCase):
    """Test the quaternion helpers."""

    def test_double_cover_gives_same_rotation(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            q = rng.normal(size=4)
            q /= np.linalg.norm(q)
            np.testing.assert_allclose(quat_to_dcm(q), quat_to_dcm(-q), atol=1e-15)

    def test_rotate_matches_dcm(self):
        q = quat_from_axis_angle((1.0, 2.0, -0.5), 0.7)
        v = np.array([0.3, -1.0, 2.0])
        np.testing.assert_allclose(quat_rotate(q, v), quat_to_dcm(q) @ v, atol=1e-14)

    def test_yaw_round_trip_and_error_angle(self):
        q = quat_from_yaw(0.5)
        self.assertAlmostEqual(yaw_from_quat(q), 0.5, places=12)
        self.assertAlmostEqual(attitude_error_angle(q, -q), 0.0, places=6)
        self.assertAlmostEqual(attitude_error_angle(q, quat_from_yaw(-0.25)), 0.75, places=9)

    def test_composition(self):
        q = quat_multiply(quat_from_yaw(0.2), quat_from_yaw(0.3))
        np.testing.assert_allclose(q, quat_from_yaw(0.5), atol=1e-15)


class StepRk4Test(SimpleTestCase):
    """Test the RK4 integrator."""

    def setUp(self):
        self.n = mean_motion(MU_EARTH, 6.778e6)
        self.orbit = OrbitParams.circular(6.778e6)

    def test_zero_state_stays_put(self):
        result = step_rk4(_state(), Wrench.zero(), self.orbit, _unit_body(), 0.2)
        np.testing.assert_array_equal(result.to_vector(), _state().to_vector())

    def test_rejects_non_positive_step(self):
        with self.assertRaises(DomainError):
            step_rk4(_state(), Wrench.zero(), self.orbit, _unit_body(), 0.0)

    def test_drift_free_ellipse_is_periodic(self):
        x0 = 10.0
        state = _state(p=(x0, 0, 0), v=(0, -2 * self.n * x0, 0))
        period = 2 * math.pi / self.n
        steps = 6000
        current = state
        for _ in range(steps):
            current = step_rk4(current, Wrench.zero(), self.orbit, _unit_body(), period / steps)

        error = np.linalg.norm(current.to_vector()[:6] - state.to_vector()[:6])
        self.assertLess(error / np.linalg.norm(state.to_vector()[:6]), 1e-6)

    def test_quaternion_norm_preserved(self):
        state = _state(omega=(0.3, -1.2, 0.8))
        body = BodyParams(mass=17.8, inertia=np.diag([0.3, 0.4, 0.5]))
        wrench = Wrench(force_b=np.array([1.0, 0, 0]), torque_b=np.array([0.01, 0.02, -0.05]))
        for _ in range(200):
            state = step_rk4(state, wrench, self.orbit, body, 0.05)
            self.assertLess(abs(np.linalg.norm(state.q_hb) - 1.0), 1e-9)

    def test_fourth_order_convergence(self):
        body = BodyParams(mass=1.0, inertia=np.diag([1.0, 2.0, 3.0]))
        state = _state(omega=(0.5, 1.0, -0.3))

        def one_step_error(dt):
            full = step_rk4(state, Wrench.zero(), self.orbit, body, dt)
            half = step_rk4(state, Wrench.zero(), self.orbit, body, dt / 2)
            half = step_rk4(half, Wrench.zero(), self.orbit, body, dt / 2)
            return np.linalg.norm(full.omega_b - half.omega_b)

        ratio = one_step_error(0.1) / one_step_error(0.2)
        self.assertGreater(ratio, 1 / 64)
        self.assertLess(ratio, 1 / 16)

    def test_torque_free_energy_conservation(self):
        inertia = np.diag([1.0, 2.0, 3.0])
        body = BodyParams(mass=1.0, inertia=inertia)
        state = _state(omega=(0.3, -0.2, 0.5))
        energy0 = 0.5 * state.omega_b @ inertia @ state.omega_b
        for _ in range(1000):
            state = step_rk4(state, Wrench.zero(), self.orbit, body, 0.01)
        energy = 0.5 * state.omega_b @ inertia @ state.omega_b
        self.assertLess(abs(energy - energy0) / energy0, 1e-6)


class CwStmTest(SimpleTestCase):
    """Test the analytic CW transition matrix and its agreement with RK4."""

    def test_identity_at_zero(self):
        np.testing.assert_allclose(cw_stm(0.001, 0.0), np.eye(6), atol=1e-15)

    def test_periodic_conditions_map_to_themselves(self):
        n = 0.001
        x0 = np.array([5.0, 0.0, 2.0, 0.0, -2 * n * 5.0, 0.0])
        np.testing.assert_allclose(cw_stm(n, 2 * math.pi / n) @ x0, x0, atol=1e-9)

    def test_rejects_non_positive_mean_motion(self):
        with self.assertRaises(DomainError):
            cw_stm(0.0, 1.0)

    def test_matches_fine_rk4_over_100_seconds(self):
        n = 1.1314e-3
        orbit = OrbitParams(mu=1.0, a=1.0, n=n)
        state = _state(p=(1.0, 0, 0))
        for _ in range(10000):
            state = step_rk4(state, Wrench.zero(), orbit, _unit_body(), 0.01)
        expected = cw_stm(n, 100.0) @ np.array([1.0, 0, 0, 0, 0, 0])
        np.testing.assert_allclose(state.to_vector()[:6], expected, atol=1e-8)

    def test_random_states_match_single_rk4_step(self):
        rng = np.random.default_rng(2024)
        body = _unit_body()
        for _ in range(1000):
            n = rng.uniform(1e-4, 0.002)
            dt = rng.uniform(0.01, 1.0)
            translational = rng.normal(size=6) * np.array([10, 10, 10, 0.1, 0.1, 0.1])
            state = _state(p=translational[:3], v=translational[3:])

            propagated = step_rk4(state, Wrench.zero(), OrbitParams(mu=1.0, a=1.0, n=n), body, dt)
            expected = cw_stm(n, dt) @ translational
            error = np.linalg.norm(propagated.to_vector()[:6] - expected)
            self.assertLess(error / np.linalg.norm(expected), 1e-6)
