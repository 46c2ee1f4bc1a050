"""Unit-quaternion helpers on numpy arrays.

Quaternions are stored ``(w, x, y, z)`` along the last axis, Hamilton
convention: ``a ⊙ b`` composes rotations so that
``R(a ⊙ b) = R(a) @ R(b)``.  All functions broadcast over leading axes.
"""

import numpy as np

IDENTITY = np.array([1.0, 0.0, 0.0, 0.0])


class DegenerateQuaternionError(ValueError):
    pass


def hamilton_product(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    # terms paired so that q ⊙ q⁻¹ has an exactly zero vector part
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            (aw * bx + ax * bw) + (ay * bz - az * by),
            (aw * by + ay * bw) + (az * bx - ax * bz),
            (aw * bz + az * bw) + (ax * by - ay * bx),
        ],
        axis=-1,
    )


def compose(a, b):
    """Hamilton product renormalized to unit length."""
    return normalize(hamilton_product(a, b))


def conjugate(q):
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def inverse(q):
    """Inverse of a unit quaternion (its conjugate)."""
    return conjugate(q)


def normalize(q, eps=1e-8):
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n <= eps):
        raise DegenerateQuaternionError(
            f"cannot normalize quaternion with norm <= {eps:g}"
        )
    return q / n


def canonicalize(q):
    """Flip sign so the scalar part is non-negative."""
    q = np.asarray(q, dtype=float)
    return np.where(q[..., :1] < 0, -q, q)


def make_continuous(q):
    """Flip signs along axis 0 so consecutive rows have non-negative dot."""
    q = np.array(q, dtype=float)
    for i in range(1, len(q)):
        if np.dot(q[i], q[i - 1]) < 0:
            q[i] = -q[i]
    return q


def to_rotation_matrix(q):
    q = np.asarray(q, dtype=float)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    return np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)], -1),
            np.stack([2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)], -1),
            np.stack([2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)], -1),
        ],
        axis=-2,
    )


def from_rotation_matrix(R):
    """Unit quaternion (scalar >= 0) for a single 3x3 rotation matrix."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    return canonicalize(normalize(np.array(q)))


def rotate_vector(q, v):
    """Rotate 3-vector(s) ``v`` by ``q``: ``q ⊙ (0, v) ⊙ q⁻¹``."""
    q = np.asarray(q, dtype=float)
    v = np.asarray(v, dtype=float)
    u = q[..., 1:]
    w = q[..., :1]
    t = 2.0 * np.cross(u, v)
    return v + w * t + np.cross(u, t)


def from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis, axis=-1, keepdims=True)
    half = 0.5 * np.asarray(angle, dtype=float)[..., None]
    return np.concatenate([np.cos(half), np.sin(half) * axis], axis=-1)


def exp_map(rotvec):
    """Unit quaternion for rotation vector ``rotvec`` (axis * angle)."""
    rotvec = np.asarray(rotvec, dtype=float)
    angle = np.linalg.norm(rotvec, axis=-1, keepdims=True)
    half = 0.5 * angle
    # sin(a/2)/a -> 1/2 as a -> 0
    small = angle < 1e-8
    k = np.where(small, 0.5 - angle**2 / 48.0, np.sin(half) / np.where(small, 1.0, angle))
    return np.concatenate([np.cos(half), k * rotvec], axis=-1)


def log_map(q):
    """Quaternion logarithm ``u * theta`` of a unit quaternion.

    ``theta = atan2(|vec|, w)`` after canonicalizing ``w >= 0``, so the
    result is half the rotation angle times the rotation axis.
    """
    q = canonicalize(q)
    vec = q[..., 1:]
    n = np.linalg.norm(vec, axis=-1, keepdims=True)
    theta = np.arctan2(n, q[..., :1])
    scale = np.where(n > 0, theta / np.where(n > 0, n, 1.0), 1.0)
    return vec * scale


def error_angle(q_gt, q_pred):
    """Attitude error ``theta`` in radians, within [0, pi/2].

    ``dq = q_gt ⊙ q_pred⁻¹`` canonicalized to a non-negative scalar part;
    ``theta = atan2(|vec(dq)|, scalar(dq))``.  This is half the geometric
    rotation angle between the two attitudes.
    """
    dq = canonicalize(hamilton_product(q_gt, inverse(q_pred)))
    return np.arctan2(np.linalg.norm(dq[..., 1:], axis=-1), dq[..., 0])


def slerp(q0, q1, frac):
    """Spherical linear interpolation, row-wise, taking the short arc."""
    q0 = np.asarray(q0, dtype=float)
    q1 = np.asarray(q1, dtype=float)
    frac = np.asarray(frac, dtype=float)[..., None]
    dot = np.sum(q0 * q1, axis=-1, keepdims=True)
    q1 = np.where(dot < 0, -q1, q1)
    dot = np.abs(dot)
    theta = np.arccos(np.clip(dot, -1.0, 1.0))
    sin_t = np.sin(theta)
    near = sin_t < 1e-10
    safe = np.where(near, 1.0, sin_t)
    w0 = np.where(near, 1.0 - frac, np.sin((1.0 - frac) * theta) / safe)
    w1 = np.where(near, frac, np.sin(frac * theta) / safe)
    return normalize(w0 * q0 + w1 * q1)


def random(rng, size=None):
    """Uniformly distributed unit quaternions."""
    shape = (4,) if size is None else (*np.atleast_1d(size), 4)
    return normalize(rng.standard_normal(shape))


def jpl_to_hamilton(q):
    """Convert JPL-convention quaternions to Hamilton, both stored (w, x, y, z)."""
    return conjugate(q)
