"""Shared scene construction for solver-level tests.

Builds small consistent visual-inertial scenes with exactly zero residual
at the ground truth: IMU measurements come from the forward measurement
models, keyframe states are chained with the same midpoint integration the
preintegration uses, and image observations are exact projections.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from infocal.camera import CameraExtrinsics, CameraIntrinsics, FeatureObservation, camera_factor_blocks
from infocal.geometry import Transform, UnitQuaternion, so3_exp
from infocal.imu import (
    ImuIntrinsics,
    ImuSample,
    NoiseModel,
    _bias_corrected_deltas,
    preintegrate,
    simulate_accel,
    simulate_gyro,
)
from infocal.problem import CalibrationState, KeyframeState, Landmark


def true_calibration():
    camera = CameraIntrinsics(f=np.array([400.0, 402.0]), c=np.array([318.0, 242.0]), w=0.9)
    extr = CameraExtrinsics(
        Transform(
            UnitQuaternion.from_rotation_vector(np.array([0.01, -0.02, 0.015])),
            np.array([0.025, -0.012, 0.008]),
        )
    )
    imu = ImuIntrinsics(
        s_g=np.array([1.003, 0.998, 1.001]),
        s_a=np.array([0.997, 1.004, 1.002]),
        m_g=np.array([1.2e-3, -0.8e-3, 1.5e-3]),
        m_a=np.array([-1.0e-3, 1.8e-3, 0.6e-3]),
        q_AI=UnitQuaternion.from_rotation_vector(np.array([0.003, -0.004, 0.002])),
    )
    return CalibrationState(camera, extr, imu)


@dataclass
class Scene:
    keyframes: list
    landmarks: list
    observations: list
    imu_stream: list
    calibration: CalibrationState
    noise: NoiseModel
    cam_dt: float
    imu_rate: float
    landmark_positions: dict = field(default_factory=dict)


def _omega_true(t):
    # rotation-rich motion; weakly excited scenes leave IMU intrinsics in
    # near-null directions that stall the optimizer tail
    return np.array(
        [
            2.0 * math.sin(2.1 * t + 0.4),
            -1.7 * math.cos(1.7 * t),
            1.8 * math.sin(2.9 * t + 1.1),
        ]
    )


def _accel_true(t):
    return np.array(
        [
            3.5 * math.cos(2.3 * t),
            -2.8 * math.sin(1.9 * t + 0.5),
            2.4 * math.sin(2.7 * t),
        ]
    )


def make_scene(
    seed=0,
    n_keyframes=6,
    n_landmarks=20,
    cam_rate=10.0,
    imu_rate=100.0,
    obs_fraction=1.0,
    omega_fn=None,
    accel_fn=None,
    v0=None,
):
    """Noise-free scene; residuals at the returned states are ~1e-12."""
    rng = np.random.default_rng(seed)
    calib = true_calibration()
    noise = NoiseModel()
    g = noise.gravity_vector()
    cam_dt = 1.0 / cam_rate
    steps_per_kf = int(round(imu_rate / cam_rate))
    n_samples = (n_keyframes - 1) * steps_per_kf + 1
    ts = np.arange(n_samples) / imu_rate

    b_g = np.array([2e-3, -1e-3, 1.5e-3])
    b_a = np.array([0.02, -0.015, 0.01])

    omega_fn = omega_fn or _omega_true
    accel_fn = accel_fn or _accel_true
    # attitude chain at IMU rate with the same midpoint rule the
    # preintegration uses, so the whole pipeline is exactly consistent
    omegas = np.stack([omega_fn(t) for t in ts])
    accels = np.stack([accel_fn(t) for t in ts])
    q0 = UnitQuaternion.from_rotation_vector(np.array([0.05, -0.03, 0.08]))
    R = [q0.matrix()]
    dt = 1.0 / imu_rate
    for i in range(n_samples - 1):
        R.append(R[-1] @ so3_exp(0.5 * (omegas[i] + omegas[i + 1]) * dt))

    imu_stream = []
    for i, t in enumerate(ts):
        w_meas = simulate_gyro(omegas[i], calib.imu, b_g, np.zeros(3))
        a_meas = simulate_accel(accels[i], R[i].T, calib.imu, b_a, np.zeros(3), gravity=g)
        imu_stream.append(ImuSample(t, w_meas, a_meas))

    # keyframe states chained through preintegration of the same stream
    if v0 is None:
        v0 = np.array([0.05, -0.02, 0.03])
    x = KeyframeState(q_GI=q0, p_GI=np.zeros(3), v_GI=np.asarray(v0, dtype=float), b_a=b_a, b_g=b_g, t=0.0)
    keyframes = [x]
    for k in range(n_keyframes - 1):
        lo, hi = k * steps_per_kf, (k + 1) * steps_per_kf + 1
        pre = preintegrate(imu_stream[lo:hi], calib.imu, (b_g, b_a), noise)
        dR, dv, dp, _ = _bias_corrected_deltas(pre, b_g, b_a, g)
        R_k = x.q_GI.matrix()
        T = pre.duration
        x = KeyframeState(
            q_GI=UnitQuaternion.from_matrix(R_k @ dR),
            p_GI=x.p_GI + x.v_GI * T + 0.5 * g * T * T + R_k @ dp,
            v_GI=x.v_GI + g * T + R_k @ dv,
            b_a=b_a,
            b_g=b_g,
            t=float(ts[hi - 1]),
        )
        keyframes.append(x)

    landmarks = []
    for i in range(n_landmarks):
        l = np.array(
            [
                rng.uniform(-1.0, 1.0),
                rng.uniform(-0.8, 0.8),
                rng.uniform(2.5, 4.5),
            ]
        )
        landmarks.append(Landmark(l, i))

    q_arr = np.stack([k.q_GI.wxyz for k in keyframes])
    p_arr = np.stack([k.p_GI for k in keyframes])
    l_arr = np.stack([lm.l_G for lm in landmarks])
    T_CI = calib.extrinsics.T_CI
    observations = []
    for k in range(n_keyframes):
        qs = np.repeat(q_arr[k : k + 1], n_landmarks, axis=0)
        ps = np.repeat(p_arr[k : k + 1], n_landmarks, axis=0)
        uv, valid, _, _, _, _ = camera_factor_blocks(
            qs, ps, T_CI.rotation.matrix(), T_CI.translation, l_arr, calib.camera
        )
        for m in range(n_landmarks):
            if not valid[m]:
                continue
            if obs_fraction < 1.0 and rng.uniform() > obs_fraction:
                continue
            observations.append(FeatureObservation(k, m, uv[m].copy(), noise.sigma_c))

    return Scene(
        keyframes=keyframes,
        landmarks=landmarks,
        observations=observations,
        imu_stream=imu_stream,
        calibration=calib,
        noise=noise,
        cam_dt=cam_dt,
        imu_rate=imu_rate,
        landmark_positions={lm.id: lm.l_G.copy() for lm in landmarks},
    )


class FakeSegment:
    """Duck-typed stand-in for a motion segment."""

    def __init__(self, id, session_id, keyframe_ids, keyframes, imu_samples, observations, landmark_ids, landmarks):
        self.id = id
        self.session_id = session_id
        self.keyframe_ids = list(keyframe_ids)
        self.keyframes = list(keyframes)
        self.imu_samples = list(imu_samples)
        self.observations = list(observations)
        self.landmark_ids = set(landmark_ids)
        self.landmarks = dict(landmarks)


def scene_segments(scene, kf_per_segment, keep=None, session_id="s0"):
    """Chop a scene into consecutive segments of kf_per_segment keyframes.

    Each segment's IMU span extends one camera interval past its last
    keyframe (except at the session end) so adjacent segments can be
    chained without a bridge.  `keep` selects segment indices.
    """
    K = len(scene.keyframes)
    n_seg = K // kf_per_segment
    steps_per_kf = int(round(scene.imu_rate * scene.cam_dt))
    segments = []
    for s in range(n_seg):
        k0 = s * kf_per_segment
        k1 = k0 + kf_per_segment - 1
        lo = k0 * steps_per_kf
        hi = min((k1 + 1) * steps_per_kf, len(scene.imu_stream) - 1)
        obs = [o for o in scene.observations if k0 <= o.keyframe_id <= k1]
        lm_ids = {o.landmark_id for o in obs}
        segments.append(
            FakeSegment(
                id=s,
                session_id=session_id,
                keyframe_ids=range(k0, k1 + 1),
                keyframes=scene.keyframes[k0 : k1 + 1],
                imu_samples=scene.imu_stream[lo : hi + 1],
                observations=obs,
                landmark_ids=lm_ids,
                landmarks={i: scene.landmark_positions[i] for i in lm_ids},
            )
        )
    if keep is not None:
        segments = [segments[i] for i in keep]
    return segments
