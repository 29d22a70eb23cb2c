"""Rotation and rigid-transform primitives.

Quaternions are Hamilton, stored (w, x, y, z), and used passively: the
quaternion q_AB (equivalently the matrix R_AB) maps coordinates of a vector
from frame B into frame A, p_A = R_AB p_B + p_AB.  Solver increments live in
the tangent space and are applied by right-multiplication of the exponential
map, q' = q * exp(delta), so states never leave the unit sphere.

Most functions accept stacked inputs (leading batch dimensions) because the
factor assembly works on whole keyframe arrays at once.
"""

from __future__ import annotations

import numpy as np

_SMALL_ANGLE = 1e-8


def quat_normalize(q):
    q = np.asarray(q, dtype=float)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_mul(a, b):
    """Hamilton product a*b; composes rotations q_AC = q_AB * q_BC."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conj(q):
    q = np.asarray(q, dtype=float)
    out = q.copy()
    out[..., 1:] *= -1.0
    return out


def quat_to_matrix(q):
    """Rotation matrix R with R @ p equal to rotating p by q."""
    q = np.asarray(q, dtype=float)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    m = np.empty(q.shape[:-1] + (3, 3), dtype=float)
    m[..., 0, 0] = 1.0 - 2.0 * (yy + zz)
    m[..., 0, 1] = 2.0 * (xy - wz)
    m[..., 0, 2] = 2.0 * (xz + wy)
    m[..., 1, 0] = 2.0 * (xy + wz)
    m[..., 1, 1] = 1.0 - 2.0 * (xx + zz)
    m[..., 1, 2] = 2.0 * (yz - wx)
    m[..., 2, 0] = 2.0 * (xz - wy)
    m[..., 2, 1] = 2.0 * (yz + wx)
    m[..., 2, 2] = 1.0 - 2.0 * (xx + yy)
    return m


def matrix_to_quat(m):
    """Inverse of quat_to_matrix (Shepperd's method), w >= 0."""
    m = np.asarray(m, dtype=float)
    single = m.ndim == 2
    if single:
        m = m[None]
    t = np.einsum("...ii->...", m)
    q = np.empty(m.shape[:-2] + (4,), dtype=float)
    # Branch on the largest of (trace, m00, m11, m22) for stability.
    choice = np.argmax(
        np.stack([t, m[..., 0, 0], m[..., 1, 1], m[..., 2, 2]], axis=-1), axis=-1
    )
    for idx in np.ndindex(m.shape[:-2]):
        mm = m[idx]
        c = choice[idx]
        if c == 0:
            s = np.sqrt(t[idx] + 1.0) * 2.0
            q[idx] = [
                0.25 * s,
                (mm[2, 1] - mm[1, 2]) / s,
                (mm[0, 2] - mm[2, 0]) / s,
                (mm[1, 0] - mm[0, 1]) / s,
            ]
        elif c == 1:
            s = np.sqrt(1.0 + mm[0, 0] - mm[1, 1] - mm[2, 2]) * 2.0
            q[idx] = [
                (mm[2, 1] - mm[1, 2]) / s,
                0.25 * s,
                (mm[0, 1] + mm[1, 0]) / s,
                (mm[0, 2] + mm[2, 0]) / s,
            ]
        elif c == 2:
            s = np.sqrt(1.0 - mm[0, 0] + mm[1, 1] - mm[2, 2]) * 2.0
            q[idx] = [
                (mm[0, 2] - mm[2, 0]) / s,
                (mm[0, 1] + mm[1, 0]) / s,
                0.25 * s,
                (mm[1, 2] + mm[2, 1]) / s,
            ]
        else:
            s = np.sqrt(1.0 - mm[0, 0] - mm[1, 1] + mm[2, 2]) * 2.0
            q[idx] = [
                (mm[1, 0] - mm[0, 1]) / s,
                (mm[0, 2] + mm[2, 0]) / s,
                (mm[1, 2] + mm[2, 1]) / s,
                0.25 * s,
            ]
    neg = q[..., 0] < 0.0
    q[neg] *= -1.0
    q = quat_normalize(q)
    return q[0] if single else q


def quat_rotate(q, p):
    """Rotate point(s) p by quaternion(s) q."""
    return np.einsum("...ij,...j->...i", quat_to_matrix(q), np.asarray(p, dtype=float))


def quat_exp(phi):
    """Map a rotation vector (axis * angle, rad) to a unit quaternion."""
    phi = np.asarray(phi, dtype=float)
    angle = np.linalg.norm(phi, axis=-1, keepdims=True)
    half = 0.5 * angle
    # sin(a/2)/a with series fallback near zero
    small = angle < _SMALL_ANGLE
    with np.errstate(invalid="ignore", divide="ignore"):
        k = np.where(small, 0.5 - angle * angle / 48.0, np.sin(half) / np.where(angle == 0.0, 1.0, angle))
    w = np.cos(half)
    return np.concatenate([w, k * phi], axis=-1)


def quat_log(q):
    """Rotation vector of q; inverse of quat_exp; magnitude in [0, pi]."""
    q = np.asarray(q, dtype=float)
    q = np.where(q[..., :1] < 0.0, -q, q)
    n = np.linalg.norm(q[..., 1:], axis=-1, keepdims=True)
    w = q[..., :1]
    angle = 2.0 * np.arctan2(n, w)
    small = n < _SMALL_ANGLE
    with np.errstate(invalid="ignore", divide="ignore"):
        k = np.where(small, 2.0 / np.where(w == 0.0, 1.0, w), angle / np.where(n == 0.0, 1.0, n))
    return k * q[..., 1:]


def so3_hat(v):
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3), dtype=float)
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def so3_exp(phi):
    """Rodrigues formula, batched, with series fallback near zero."""
    phi = np.asarray(phi, dtype=float)
    theta2 = np.sum(phi * phi, axis=-1)
    theta = np.sqrt(theta2)
    small = theta < _SMALL_ANGLE
    with np.errstate(invalid="ignore", divide="ignore"):
        a = np.where(small, 1.0 - theta2 / 6.0, np.sin(theta) / np.where(theta == 0.0, 1.0, theta))
        b = np.where(small, 0.5 - theta2 / 24.0, (1.0 - np.cos(theta)) / np.where(theta2 == 0.0, 1.0, theta2))
    k = so3_hat(phi)
    kk = k @ k
    eye = np.broadcast_to(np.eye(3), k.shape)
    return eye + a[..., None, None] * k + b[..., None, None] * kk


def so3_log(rot):
    return quat_log(matrix_to_quat(rot))


def so3_right_jacobian(phi):
    """J_r with Exp(phi + d) ~ Exp(phi) Exp(J_r(phi) d)."""
    phi = np.asarray(phi, dtype=float)
    theta2 = np.sum(phi * phi, axis=-1)
    theta = np.sqrt(theta2)
    small = theta < _SMALL_ANGLE
    with np.errstate(invalid="ignore", divide="ignore"):
        b = np.where(small, 0.5 - theta2 / 24.0, (1.0 - np.cos(theta)) / np.where(theta2 == 0.0, 1.0, theta2))
        c = np.where(
            small,
            1.0 / 6.0 - theta2 / 120.0,
            (theta - np.sin(theta)) / np.where(theta2 == 0.0, 1.0, theta2 * theta),
        )
    k = so3_hat(phi)
    kk = k @ k
    eye = np.broadcast_to(np.eye(3), k.shape)
    return eye - b[..., None, None] * k + c[..., None, None] * kk


def so3_right_jacobian_inv(phi):
    phi = np.asarray(phi, dtype=float)
    theta2 = np.sum(phi * phi, axis=-1)
    theta = np.sqrt(theta2)
    small = theta < _SMALL_ANGLE
    with np.errstate(invalid="ignore", divide="ignore"):
        half = 0.5 * theta
        cot = np.where(small, 0.0, np.cos(half) / np.where(theta == 0.0, 1.0, np.sin(half)))
        d = np.where(
            small,
            1.0 / 12.0 + theta2 / 720.0,
            (1.0 / np.where(theta2 == 0.0, 1.0, theta2)) - cot / (2.0 * np.where(theta == 0.0, 1.0, theta)),
        )
    k = so3_hat(phi)
    kk = k @ k
    eye = np.broadcast_to(np.eye(3), k.shape)
    return eye + 0.5 * k + d[..., None, None] * kk


def quat_retract(q, delta):
    """Apply a MinimalRotationDelta: q' = q * exp(delta)."""
    return quat_normalize(quat_mul(q, quat_exp(delta)))


def quat_local(q_ref, q):
    """Tangent delta with quat_retract(q_ref, delta) == q."""
    return quat_log(quat_mul(quat_conj(q_ref), q))


def rotation_angle(q):
    """Absolute rotation angle of q in radians, in [0, pi]."""
    return np.linalg.norm(quat_log(q), axis=-1)


class UnitQuaternion:
    """Unit quaternion (w, x, y, z); normalized on construction."""

    __slots__ = ("wxyz",)

    def __init__(self, w, x, y, z):
        arr = np.array([w, x, y, z], dtype=float)
        n = np.linalg.norm(arr)
        if not np.isfinite(n) or n == 0.0:
            raise ValueError("cannot normalize zero or non-finite quaternion")
        self.wxyz = arr / n

    @classmethod
    def identity(cls):
        return cls(1.0, 0.0, 0.0, 0.0)

    @classmethod
    def from_array(cls, q):
        q = np.asarray(q, dtype=float)
        return cls(q[0], q[1], q[2], q[3])

    @classmethod
    def from_rotation_vector(cls, phi):
        return cls.from_array(quat_exp(np.asarray(phi, dtype=float)))

    @classmethod
    def from_matrix(cls, m):
        return cls.from_array(matrix_to_quat(m))

    @property
    def w(self):
        return self.wxyz[0]

    @property
    def x(self):
        return self.wxyz[1]

    @property
    def y(self):
        return self.wxyz[2]

    @property
    def z(self):
        return self.wxyz[3]

    def matrix(self):
        return quat_to_matrix(self.wxyz)

    def rotate(self, p):
        return quat_rotate(self.wxyz, p)

    def multiply(self, other):
        return UnitQuaternion.from_array(quat_mul(self.wxyz, other.wxyz))

    def conjugate(self):
        return UnitQuaternion.from_array(quat_conj(self.wxyz))

    def retract(self, delta):
        return UnitQuaternion.from_array(quat_retract(self.wxyz, delta))

    def local(self, other):
        """Delta with self.retract(delta) == other (as rotations)."""
        return quat_local(self.wxyz, other.wxyz)

    def rotation_vector(self):
        return quat_log(self.wxyz)

    def angle_to(self, other):
        return float(rotation_angle(quat_mul(quat_conj(self.wxyz), other.wxyz)))

    def __repr__(self):
        return "UnitQuaternion(w=%.9g, x=%.9g, y=%.9g, z=%.9g)" % tuple(self.wxyz)


class Transform:
    """Rigid transform T_AB: p_A = R_AB p_B + p_AB."""

    __slots__ = ("rotation", "translation")

    def __init__(self, rotation: UnitQuaternion, translation):
        self.rotation = rotation
        self.translation = np.array(translation, dtype=float).reshape(3)

    @classmethod
    def identity(cls):
        return cls(UnitQuaternion.identity(), np.zeros(3))

    def apply(self, p):
        return self.rotation.rotate(p) + self.translation

    def matrix(self):
        out = np.eye(4)
        out[:3, :3] = self.rotation.matrix()
        out[:3, 3] = self.translation
        return out

    def __repr__(self):
        return "Transform(%r, %s)" % (self.rotation, self.translation)


def transform_point(T: Transform, p):
    """R p + t for a single point or a stack of points."""
    return T.apply(p)


def compose(T_AB: Transform, T_BC: Transform) -> Transform:
    """T_AC such that transform_point(T_AC, p) chains the two inputs."""
    rot = T_AB.rotation.multiply(T_BC.rotation)
    trans = T_AB.rotation.rotate(T_BC.translation) + T_AB.translation
    return Transform(rot, trans)


def invert(T: Transform) -> Transform:
    rot = T.rotation.conjugate()
    return Transform(rot, -rot.rotate(T.translation))


def average_quaternions(qs) -> UnitQuaternion:
    """Chordal L2 mean: eigenvector maximizing sum of (q^T q_i)^2.

    Sign-insensitive by construction (q q^T is even in q); the returned
    quaternion is normalized with w >= 0.
    """
    if len(qs) == 0:
        raise ValueError("average_quaternions needs a non-empty list")
    acc = np.zeros((4, 4))
    for q in qs:
        arr = q.wxyz if isinstance(q, UnitQuaternion) else np.asarray(q, dtype=float)
        acc += np.outer(arr, arr)
    vals, vecs = np.linalg.eigh(acc)
    best = vecs[:, np.argmax(vals)]
    if best[0] < 0.0:
        best = -best
    return UnitQuaternion.from_array(best)
