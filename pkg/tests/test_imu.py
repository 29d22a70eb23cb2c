"""Tests for inertial models, preintegration, and the inertial residual.

Oracles: closed-form constant-rate rotation and constant-acceleration
kinematics, simulate/correct round trips, scalar random-walk weighting,
central finite differences for every Jacobian block, and re-preintegration
for the first-order bias correction.
"""

import math
from types import SimpleNamespace

import numpy as np
import pytest

from infocal.geometry import UnitQuaternion, quat_retract, so3_exp, so3_log
from infocal.imu import (
    STANDARD_GRAVITY,
    ImuIntrinsics,
    ImuSample,
    NoiseModel,
    _bias_corrected_deltas,
    correct_measurements,
    correction_matrix,
    inertial_error,
    inertial_error_jacobians,
    preintegrate,
    preintegrate_intervals,
    simulate_accel,
    simulate_gyro,
)

GRAVITY = np.array([0.0, 0.0, -STANDARD_GRAVITY])


def perturbed_intrinsics():
    return ImuIntrinsics(
        s_g=np.array([1.004, 0.997, 1.002]),
        s_a=np.array([0.995, 1.006, 1.001]),
        m_g=np.array([1.5e-3, -2.0e-3, 0.8e-3]),
        m_a=np.array([-1.2e-3, 0.9e-3, 2.1e-3]),
        q_AI=UnitQuaternion.from_rotation_vector(np.array([0.004, -0.006, 0.003])),
    )


def static_samples(n=101, duration=1.0, gravity_magnitude=STANDARD_GRAVITY):
    ts = np.linspace(0.0, duration, n)
    accel = np.array([0.0, 0.0, gravity_magnitude])
    return [ImuSample(t, np.zeros(3), accel) for t in ts]


class TestMeasurementModels:
    def test_correction_matrix_nominal_identity(self):
        np.testing.assert_array_equal(correction_matrix(np.ones(3), np.zeros(3)), np.eye(3))

    def test_correction_matrix_scale_diagonal(self):
        np.testing.assert_array_equal(
            correction_matrix([1.01, 1.0, 1.0], np.zeros(3)), np.diag([1.01, 1.0, 1.0])
        )

    def test_correction_matrix_misalignment_slots(self):
        T = correction_matrix(np.ones(3), [0.1, 0.2, 0.3])
        expected = np.eye(3)
        expected[0, 1] = 0.1
        expected[0, 2] = 0.2
        expected[1, 2] = 0.3
        np.testing.assert_array_equal(T, expected)

    def test_intrinsics_reject_nonpositive_scale(self):
        with pytest.raises(ValueError):
            ImuIntrinsics(np.array([1.0, -0.5, 1.0]), np.ones(3), np.zeros(3), np.zeros(3), UnitQuaternion.identity())

    def test_gyro_nominal_passthrough(self):
        w = np.array([0.3, -0.2, 0.9])
        out = simulate_gyro(w, ImuIntrinsics.nominal(), np.zeros(3), np.zeros(3))
        np.testing.assert_allclose(out, w, atol=1e-15)

    def test_gyro_zero_rate_returns_bias_plus_noise(self):
        b = np.array([1e-3, -2e-3, 5e-4])
        eta = np.array([1e-4, 0.0, -1e-4])
        out = simulate_gyro(np.zeros(3), ImuIntrinsics.nominal(), b, eta)
        np.testing.assert_allclose(out, b + eta, atol=1e-15)

    def test_gyro_scale(self):
        intr = ImuIntrinsics(np.array([1.004, 1.0, 1.0]), np.ones(3), np.zeros(3), np.zeros(3), UnitQuaternion.identity())
        out = simulate_gyro(np.array([1.0, 0.0, 0.0]), intr, np.zeros(3), np.zeros(3))
        np.testing.assert_allclose(out, [1.004, 0.0, 0.0], atol=1e-15)

    def test_accel_rest_reads_gravity_reaction(self):
        out = simulate_accel(np.zeros(3), np.eye(3), ImuIntrinsics.nominal(), np.zeros(3), np.zeros(3))
        np.testing.assert_allclose(out, [0.0, 0.0, STANDARD_GRAVITY], atol=1e-12)

    def test_accel_free_fall_reads_bias(self):
        b = np.array([0.01, -0.02, 0.005])
        out = simulate_accel(GRAVITY, np.eye(3), ImuIntrinsics.nominal(), b, np.zeros(3))
        np.testing.assert_allclose(out, b, atol=1e-12)

    def test_accel_rotated_frame_matches_matrix_oracle(self):
        ang = math.radians(1.0)
        q_AI = UnitQuaternion.from_rotation_vector(np.array([0.0, 0.0, ang]))
        intr = ImuIntrinsics(np.ones(3), np.ones(3), np.zeros(3), np.zeros(3), q_AI)
        rng = np.random.default_rng(7)
        dq = UnitQuaternion.from_rotation_vector(rng.normal(size=3) * 0.3)
        R_IG = dq.matrix().T
        out = simulate_accel(np.zeros(3), R_IG, intr, np.zeros(3), np.zeros(3))
        oracle = q_AI.matrix() @ R_IG @ (-GRAVITY)
        np.testing.assert_allclose(out, oracle, atol=1e-12)

    def test_correct_nominal_is_identity(self):
        s = ImuSample(0.0, [0.1, 0.2, 0.3], [1.0, -2.0, 9.0])
        w, f = correct_measurements(s, ImuIntrinsics.nominal(), (np.zeros(3), np.zeros(3)))
        np.testing.assert_allclose(w, s.omega_meas, atol=1e-15)
        np.testing.assert_allclose(f, s.accel_meas, atol=1e-15)

    def test_round_trip_gyro(self):
        rng = np.random.default_rng(11)
        intr = perturbed_intrinsics()
        for _ in range(20):
            w = rng.normal(size=3)
            b = rng.normal(size=3) * 1e-2
            meas = simulate_gyro(w, intr, b, np.zeros(3))
            w_back, _ = correct_measurements(ImuSample(0.0, meas, np.zeros(3)), intr, (b, np.zeros(3)))
            np.testing.assert_allclose(w_back, w, atol=1e-12)

    def test_round_trip_accel(self):
        rng = np.random.default_rng(12)
        intr = perturbed_intrinsics()
        for _ in range(20):
            a_G = rng.normal(size=3)
            b = rng.normal(size=3) * 1e-2
            R_IG = UnitQuaternion.from_rotation_vector(rng.normal(size=3)).matrix().T
            meas = simulate_accel(a_G, R_IG, intr, b, np.zeros(3))
            _, f_back = correct_measurements(ImuSample(0.0, np.zeros(3), meas), intr, (np.zeros(3), b))
            oracle = R_IG @ (a_G - GRAVITY)
            np.testing.assert_allclose(f_back, oracle, atol=1e-12)

    def test_noise_model_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            NoiseModel(sigma_g=0.0)
        with pytest.raises(ValueError):
            NoiseModel(sigma_c=-1.0)


class TestPreintegrate:
    def test_static_integrates_to_zero_deltas(self):
        pre = preintegrate(static_samples(), ImuIntrinsics.nominal(), (np.zeros(3), np.zeros(3)), NoiseModel())
        assert pre.delta_rotation.angle_to(UnitQuaternion.identity()) < 1e-9
        np.testing.assert_allclose(pre.delta_velocity, np.zeros(3), atol=1e-9)
        np.testing.assert_allclose(pre.delta_position, np.zeros(3), atol=1e-9)
        assert pre.duration == pytest.approx(1.0)

    def test_constant_rate_rotation_matches_closed_form(self):
        w = np.array([0.0, 0.0, math.pi / 2])
        ts = np.arange(101) / 100.0
        samples = [ImuSample(t, w, np.zeros(3)) for t in ts]
        pre = preintegrate(samples, ImuIntrinsics.nominal(), (np.zeros(3), np.zeros(3)), NoiseModel())
        expected = UnitQuaternion.from_rotation_vector(w * 1.0)
        assert math.degrees(pre.delta_rotation.angle_to(expected)) < 0.01
        rv = pre.delta_rotation.rotation_vector()
        np.testing.assert_allclose(rv / np.linalg.norm(rv), [0.0, 0.0, 1.0], atol=1e-9)

    def test_constant_acceleration_matches_kinematics(self):
        accel = np.array([1.0, 0.0, STANDARD_GRAVITY])
        ts = np.arange(101) / 100.0
        samples = [ImuSample(t, np.zeros(3), accel) for t in ts]
        pre = preintegrate(samples, ImuIntrinsics.nominal(), (np.zeros(3), np.zeros(3)), NoiseModel())
        np.testing.assert_allclose(pre.delta_velocity, [1.0, 0.0, 0.0], atol=1e-3)
        np.testing.assert_allclose(pre.delta_position, [0.5, 0.0, 0.0], atol=1e-3)

    def test_too_few_samples_raises(self):
        with pytest.raises(ValueError):
            preintegrate(static_samples(n=1), ImuIntrinsics.nominal(), (np.zeros(3), np.zeros(3)), NoiseModel())

    def test_non_monotone_timestamps_raise(self):
        samples = static_samples(n=5)
        samples[2] = ImuSample(samples[1].t, samples[2].omega_meas, samples[2].accel_meas)
        with pytest.raises(ValueError):
            preintegrate(samples, ImuIntrinsics.nominal(), (np.zeros(3), np.zeros(3)), NoiseModel())

    def test_covariance_symmetric_psd_and_monotone_trace(self):
        samples = _rich_samples(np.random.default_rng(3), n=61)
        noise = NoiseModel()
        intr = ImuIntrinsics.nominal()
        traces = []
        for n in (11, 21, 41, 61):
            pre = preintegrate(samples[:n], intr, (np.zeros(3), np.zeros(3)), noise)
            P = pre.covariance
            np.testing.assert_allclose(P, P.T, atol=1e-18)
            assert np.linalg.eigvalsh(P).min() > -1e-18
            traces.append(np.trace(P))
        assert all(b > a for a, b in zip(traces, traces[1:]))

    def test_resampling_invariance(self):
        intr = perturbed_intrinsics()
        b_g = np.array([2e-3, -1e-3, 5e-4])
        b_a = np.array([-0.02, 0.01, 0.03])
        pre1 = preintegrate(_smooth_samples(100, intr, b_g, b_a), intr, (b_g, b_a), NoiseModel())
        pre2 = preintegrate(_smooth_samples(200, intr, b_g, b_a), intr, (b_g, b_a), NoiseModel())
        assert pre1.delta_rotation.angle_to(pre2.delta_rotation) < 1e-3
        np.testing.assert_allclose(pre1.delta_velocity, pre2.delta_velocity, rtol=0, atol=1e-3 * max(1.0, np.linalg.norm(pre2.delta_velocity)))
        np.testing.assert_allclose(pre1.delta_position, pre2.delta_position, rtol=0, atol=1e-3 * max(1.0, np.linalg.norm(pre2.delta_position)))

    def test_first_order_bias_correction(self):
        intr = perturbed_intrinsics()
        b_g = np.array([1e-3, -2e-3, 0.5e-3])
        b_a = np.array([0.01, 0.02, -0.01])
        samples = _smooth_samples(100, intr, b_g, b_a)
        noise = NoiseModel()
        pre = preintegrate(samples, intr, (b_g, b_a), noise)
        delta = 1e-3 * np.array([1.0, -0.6, 0.8])
        pre2 = preintegrate(samples, intr, (b_g + delta, b_a + delta), noise)
        g = noise.gravity_vector()
        dR_c, dv_c, dp_c, _ = _bias_corrected_deltas(pre, b_g + delta, b_a + delta, g)
        dR_2, dv_2, dp_2, _ = _bias_corrected_deltas(pre2, b_g + delta, b_a + delta, g)
        ang = np.linalg.norm(so3_log(dR_c.T @ dR_2))
        assert ang < 1e-5
        np.testing.assert_allclose(dv_c, dv_2, atol=1e-5)
        np.testing.assert_allclose(dp_c, dp_2, atol=1e-5)


def _rich_samples(rng, n=61, duration=0.6):
    """Measurement stream with nontrivial rotation and acceleration."""
    ts = np.linspace(0.0, duration, n)
    out = []
    for t in ts:
        w = np.array([0.8 * math.sin(3 * t), -0.5 * math.cos(2 * t), 0.6 * math.sin(5 * t + 0.3)])
        a = np.array([1.2 * math.cos(4 * t), 0.7 * math.sin(3 * t), STANDARD_GRAVITY + 0.4 * math.sin(2 * t)])
        out.append(ImuSample(t, w, a))
    return out


def _smooth_samples(rate_hz, intr, b_g, b_a, duration=1.0):
    """Samples of a closed-form single-axis rotation plus smooth world accel.

    The attitude R(t) = Exp((0,0,phi(t))) keeps omega = (0,0,phi'(t)) exact,
    so streams at different rates describe the same continuous motion.
    """
    n = int(round(rate_hz * duration)) + 1
    ts = np.linspace(0.0, duration, n)
    out = []
    for t in ts:
        phi = 0.7 * math.sin(2.0 * t)
        phidot = 1.4 * math.cos(2.0 * t)
        R_GI = so3_exp(np.array([0.0, 0.0, phi]))
        a_G = np.array([0.9 * math.sin(3.0 * t), -0.6 * math.cos(2.5 * t), 0.3 * math.sin(1.5 * t)])
        w_meas = simulate_gyro(np.array([0.0, 0.0, phidot]), intr, b_g, np.zeros(3))
        a_meas = simulate_accel(a_G, R_GI.T, intr, b_a, np.zeros(3))
        out.append(ImuSample(t, w_meas, a_meas))
    return out


def _random_state(rng, b_g=None, b_a=None):
    return SimpleNamespace(
        q_GI=UnitQuaternion.from_rotation_vector(rng.normal(size=3)),
        p_GI=rng.normal(size=3),
        v_GI=rng.normal(size=3) * 0.5,
        b_g=np.zeros(3) if b_g is None else np.asarray(b_g, dtype=float),
        b_a=np.zeros(3) if b_a is None else np.asarray(b_a, dtype=float),
    )


def _propagate_state(x_k, pre, gravity):
    """State at the end of the interval exactly consistent with pre."""
    g = np.asarray(gravity, dtype=float)
    dt = pre.duration
    dR, dv, dp, _ = _bias_corrected_deltas(pre, x_k.b_g, x_k.b_a, g)
    R_k = x_k.q_GI.matrix()
    return SimpleNamespace(
        q_GI=UnitQuaternion.from_matrix(R_k @ dR),
        p_GI=x_k.p_GI + x_k.v_GI * dt + 0.5 * g * dt * dt + R_k @ dp,
        v_GI=x_k.v_GI + g * dt + R_k @ dv,
        b_g=x_k.b_g.copy(),
        b_a=x_k.b_a.copy(),
    )


def _perturb_state(x, delta):
    delta = np.asarray(delta, dtype=float)
    return SimpleNamespace(
        q_GI=x.q_GI.retract(delta[0:3]),
        p_GI=x.p_GI + delta[3:6],
        v_GI=x.v_GI + delta[6:9],
        b_a=x.b_a + delta[9:12],
        b_g=x.b_g + delta[12:15],
    )


class TestInertialError:
    def _setup(self, seed=0, b_g=None, b_a=None, intr=None):
        rng = np.random.default_rng(seed)
        intr = intr or perturbed_intrinsics()
        lin_g = np.array([1e-3, -0.5e-3, 0.8e-3])
        lin_a = np.array([0.01, -0.02, 0.015])
        samples = _smooth_samples(100, intr, lin_g, lin_a, duration=0.5)
        noise = NoiseModel()
        pre = preintegrate(samples, intr, (lin_g, lin_a), noise)
        x_k = _random_state(rng, b_g=lin_g if b_g is None else b_g, b_a=lin_a if b_a is None else b_a)
        x_k1 = _propagate_state(x_k, pre, noise.gravity_vector())
        return pre, x_k, x_k1, noise, samples, intr, (lin_g, lin_a)

    def test_consistent_states_zero_residual(self):
        pre, x_k, x_k1, noise, _, _, _ = self._setup()
        r, W = inertial_error(x_k, x_k1, pre, noise.gravity_vector())
        np.testing.assert_allclose(r, np.zeros(15), atol=1e-9)
        assert W.shape == (15, 15)

    def test_weight_inverts_preintegration_covariance(self):
        pre, x_k, x_k1, noise, _, _, _ = self._setup()
        _, W = inertial_error(x_k, x_k1, pre, noise.gravity_vector())
        np.testing.assert_allclose(W[0:9, 0:9] @ pre.covariance, np.eye(9), atol=1e-6)

    def test_bias_random_walk_scalar_oracle(self):
        pre, x_k, x_k1, noise, _, _, _ = self._setup()
        step = np.array([1e-3, 0.0, 0.0])
        x_k1.b_g = x_k.b_g + step
        r, W = inertial_error(x_k, x_k1, pre, noise.gravity_vector())
        np.testing.assert_allclose(r[9:12], step, atol=1e-15)
        chi2 = r[9:12] @ W[9:12, 9:12] @ r[9:12]
        assert chi2 == pytest.approx(1e-6 / (noise.sigma_bg**2 * pre.duration), rel=1e-12)

    def test_position_perturbation_moves_position_block(self):
        pre, x_k, x_k1, noise, _, _, _ = self._setup(seed=5)
        x_k.q_GI = UnitQuaternion.identity()
        x_k1 = _propagate_state(x_k, pre, noise.gravity_vector())
        r0, _ = inertial_error(x_k, x_k1, pre, noise.gravity_vector())
        delta = np.array([3e-4, -2e-4, 1e-4])
        x_pert = _perturb_state(x_k1, np.concatenate([np.zeros(3), delta, np.zeros(9)]))
        r1, _ = inertial_error(x_k, x_pert, pre, noise.gravity_vector())
        change = r1 - r0
        np.testing.assert_allclose(change[6:9], -delta, atol=1e-4 * np.linalg.norm(delta) + 1e-12)
        np.testing.assert_allclose(np.delete(change, slice(6, 9)), np.zeros(12), atol=1e-10)

    def test_state_jacobians_match_finite_differences(self):
        for seed in range(4):
            pre, x_k, x_k1, noise, _, _, lin = self._setup(seed=seed)
            # move biases off the linearization point; state Jacobians stay exact
            x_k.b_g = lin[0] + 2e-4 * np.array([1.0, -1.0, 0.5])
            x_k.b_a = lin[1] + 2e-4 * np.array([-0.5, 1.0, 1.0])
            g = noise.gravity_vector()
            J_k, J_k1, _ = inertial_error_jacobians(x_k, x_k1, pre, g)
            h = 1e-6
            for which, x_ref, J in ((0, x_k, J_k), (1, x_k1, J_k1)):
                fd = np.zeros((15, 15))
                for c in range(15):
                    d = np.zeros(15)
                    d[c] = h
                    xp = _perturb_state(x_ref, d)
                    xm = _perturb_state(x_ref, -d)
                    if which == 0:
                        rp, _ = inertial_error(xp, x_k1, pre, g)
                        rm, _ = inertial_error(xm, x_k1, pre, g)
                    else:
                        rp, _ = inertial_error(x_k, xp, pre, g)
                        rm, _ = inertial_error(x_k, xm, pre, g)
                    fd[:, c] = (rp - rm) / (2 * h)
                err = np.linalg.norm(fd - J) / max(np.linalg.norm(J), 1.0)
                assert err < 1e-4, f"seed {seed} state {which}: {err}"

    def test_intrinsics_jacobian_matches_re_preintegration(self):
        pre, x_k, x_k1, noise, samples, intr, lin = self._setup(seed=9)
        g = noise.gravity_vector()
        _, _, J_imu = inertial_error_jacobians(x_k, x_k1, pre, g)
        h = 1e-6
        fd = np.zeros((15, 15))
        for c in range(15):
            d = np.zeros(15)
            d[c] = h
            r_pm = []
            for sign in (1.0, -1.0):
                intr_p = _perturb_intrinsics(intr, sign * d)
                pre_p = preintegrate(samples, intr_p, lin, noise)
                r, _ = inertial_error(x_k, x_k1, pre_p, g)
                r_pm.append(r)
            fd[:, c] = (r_pm[0] - r_pm[1]) / (2 * h)
        err = np.linalg.norm(fd - J_imu) / max(np.linalg.norm(J_imu), 1.0)
        assert err < 1e-4, err


def _perturb_intrinsics(intr, d):
    return ImuIntrinsics(
        s_g=intr.s_g + d[0:3],
        s_a=intr.s_a + d[3:6],
        m_g=intr.m_g + d[6:9],
        m_a=intr.m_a + d[9:12],
        q_AI=intr.q_AI.retract(d[12:15]),
    )


class TestBatchedPreintegration:
    def test_matches_scalar_path(self):
        rng = np.random.default_rng(21)
        K, S = 4, 10
        intr = perturbed_intrinsics()
        noise = NoiseModel()
        t0 = np.arange(K)[:, None] * 0.11
        times = t0 + np.linspace(0.0, 0.1, S + 1)[None, :]
        omega = rng.normal(size=(K, S + 1, 3)) * 0.5
        accel = rng.normal(size=(K, S + 1, 3)) + np.array([0.0, 0.0, STANDARD_GRAVITY])
        bias_g = rng.normal(size=(K, 3)) * 1e-3
        bias_a = rng.normal(size=(K, 3)) * 1e-2
        out = preintegrate_intervals(times, omega, accel, intr, bias_g, bias_a, noise)
        for k in range(K):
            samples = [ImuSample(times[k, s], omega[k, s], accel[k, s]) for s in range(S + 1)]
            pre = preintegrate(samples, intr, (bias_g[k], bias_a[k]), noise)
            np.testing.assert_allclose(out["delta_rotation_matrix"][k], pre.delta_rotation_matrix, atol=1e-12)
            np.testing.assert_allclose(out["delta_velocity"][k], pre.delta_velocity, atol=1e-12)
            np.testing.assert_allclose(out["delta_position"][k], pre.delta_position, atol=1e-12)
            np.testing.assert_allclose(out["covariance"][k], pre.covariance, atol=1e-15)
            np.testing.assert_allclose(out["bias_jacobians"][k], pre.bias_jacobians, atol=1e-12)
            np.testing.assert_allclose(out["param_jacobians"][k], pre.param_jacobians, atol=1e-12)
            assert out["duration"][k] == pytest.approx(pre.duration)
