"""Quaternion utilities (scalar-first ``w, x, y, z``), batched over a leading axis."""
import numpy as np

# Below this angle slerp is replaced by normalised lerp to avoid 0/0.
_SLERP_DOT_THRESHOLD = 0.9995


def normalize(q):
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def multiply(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis, axis=-1, keepdims=True)
    half = 0.5 * np.asarray(angle, dtype=np.float64)
    return np.concatenate([np.cos(half)[..., None], np.sin(half)[..., None] * axis], axis=-1)


def to_rotation_matrix(q):
    """Rotation matrices for (already normalised) quaternions, shape (..., 3, 3)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = np.moveaxis(q, -1, 0)
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rotation_matrix_vjp(q, dR):
    """Pull ``dL/dR`` (..., 3, 3) back to ``dL/dq`` for a normalised quaternion ``q``."""
    w, x, y, z = np.moveaxis(np.asarray(q, dtype=np.float64), -1, 0)
    g = dR
    dw = 2 * (-z * g[..., 0, 1] + y * g[..., 0, 2] + z * g[..., 1, 0]
              - x * g[..., 1, 2] - y * g[..., 2, 0] + x * g[..., 2, 1])
    dx = 2 * (y * g[..., 0, 1] + z * g[..., 0, 2] + y * g[..., 1, 0]
              - 2 * x * g[..., 1, 1] - w * g[..., 1, 2] + z * g[..., 2, 0]
              + w * g[..., 2, 1] - 2 * x * g[..., 2, 2])
    dy = 2 * (-2 * y * g[..., 0, 0] + x * g[..., 0, 1] + w * g[..., 0, 2]
              + x * g[..., 1, 0] + z * g[..., 1, 2] - w * g[..., 2, 0]
              + z * g[..., 2, 1] - 2 * y * g[..., 2, 2])
    dz = 2 * (-2 * z * g[..., 0, 0] - w * g[..., 0, 1] + x * g[..., 0, 2]
              + w * g[..., 1, 0] - 2 * z * g[..., 1, 1] + y * g[..., 1, 2]
              + x * g[..., 2, 0] + y * g[..., 2, 1])
    return np.stack([dw, dx, dy, dz], axis=-1)


def normalize_vjp(q, grad_unit):
    """Gradient through ``q -> q / |q|``."""
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    u = q / n
    return (grad_unit - u * np.sum(u * grad_unit, axis=-1, keepdims=True)) / n


def from_rotation_matrix(R):
    """Quaternion (w >= 0) from a proper rotation matrix."""
    R = np.asarray(R, dtype=np.float64)
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
    q = np.asarray(q)
    q = q / np.linalg.norm(q)
    return q if q[0] >= 0 else -q


def slerp(q0, q1, s):
    """Shorter-arc spherical interpolation of (possibly unnormalised) quaternions."""
    out, _, _ = slerp_with_jacobian(q0, q1, s)
    return out


def slerp_with_jacobian(q0, q1, s):
    """Slerp plus Jacobians ``d out / d q0`` and ``d out / d q1``.

    Inputs are normalised first, so the Jacobians include the normalisation.
    ``q0``/``q1`` have shape (N, 4) or (4,); ``s`` is a scalar. Returns
    ``out`` (N, 4) and two (N, 4, 4) Jacobians.
    """
    single = np.ndim(q0) == 1
    q0 = np.atleast_2d(np.asarray(q0, dtype=np.float64))
    q1 = np.atleast_2d(np.asarray(q1, dtype=np.float64))
    s = float(s)
    norm0 = np.linalg.norm(q0, axis=1, keepdims=True)
    norm1 = np.linalg.norm(q1, axis=1, keepdims=True)
    n0 = q0 / norm0
    n1 = q1 / norm1
    dot = np.sum(n0 * n1, axis=1)
    sign = np.where(dot < 0.0, -1.0, 1.0)
    n1s = n1 * sign[:, None]
    dot = np.abs(dot)
    eye = np.eye(4)

    out = np.empty_like(n0)
    Jn0 = np.empty((len(n0), 4, 4))
    Jn1 = np.empty((len(n0), 4, 4))

    near = dot > _SLERP_DOT_THRESHOLD
    if np.any(near):
        r = (1 - s) * n0[near] + s * n1s[near]
        rn = np.linalg.norm(r, axis=1, keepdims=True)
        o = r / rn
        P = (eye[None] - o[:, :, None] * o[:, None, :]) / rn[:, :, None]
        out[near] = o
        Jn0[near] = (1 - s) * P
        Jn1[near] = s * P
    far = ~near
    if np.any(far):
        theta = np.arccos(np.clip(dot[far], -1.0, 1.0))
        sin_t = np.sin(theta)
        cos_t = np.cos(theta)
        a = np.sin((1 - s) * theta) / sin_t
        b = np.sin(s * theta) / sin_t
        da = ((1 - s) * np.cos((1 - s) * theta) * sin_t - np.sin((1 - s) * theta) * cos_t) / sin_t**2
        db = (s * np.cos(s * theta) * sin_t - np.sin(s * theta) * cos_t) / sin_t**2
        m0 = n0[far]
        m1 = n1s[far]
        out[far] = a[:, None] * m0 + b[:, None] * m1
        # d out / d theta, times d theta / d dot = -1 / sin(theta)
        v = (da[:, None] * m0 + db[:, None] * m1) * (-1.0 / sin_t)[:, None]
        Jn0[far] = a[:, None, None] * eye[None] + v[:, :, None] * m1[:, None, :]
        Jn1[far] = b[:, None, None] * eye[None] + v[:, :, None] * m0[:, None, :]

    Jn1 = Jn1 * sign[:, None, None]
    P0 = (eye[None] - n0[:, :, None] * n0[:, None, :]) / norm0[:, :, None]
    P1 = (eye[None] - n1[:, :, None] * n1[:, None, :]) / norm1[:, :, None]
    J0 = Jn0 @ P0
    J1 = Jn1 @ P1
    if single:
        return out[0], J0[0], J1[0]
    return out, J0, J1


def angle_between(a, b):
    """Rotation angle separating two unit quaternions (sign-invariant)."""
    d = np.abs(np.sum(normalize(a) * normalize(b), axis=-1))
    return 2.0 * np.arccos(np.clip(d, -1.0, 1.0))
