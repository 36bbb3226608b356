"""Pinhole cameras, pose interpolation and the camera text format.

Camera space follows the OpenCV convention: +x right, +y down, +z forward.
Poses map world to camera, ``q = R p + t``.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import NamedTuple, Optional

import numpy as np

from . import quaternion as quat

DEFAULT_NEAR = 0.01


class CameraError(ValueError):
    pass


class InsufficientViewsError(CameraError):
    pass


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float = DEFAULT_NEAR

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise CameraError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise CameraError("resolution must be at least 1x1")
        if not self.near > 0:
            raise CameraError("near plane must be positive")

    @property
    def resolution(self):
        return (self.width, self.height)


@dataclass(frozen=True)
class CameraPose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", quat.normalize(np.asarray(self.rotation, dtype=np.float64)))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    @property
    def matrix(self):
        return quat.to_rotation_matrix(self.rotation)

    @property
    def center(self):
        return -self.matrix.T @ self.translation

    @classmethod
    def identity(cls):
        return cls(np.array([1.0, 0, 0, 0]), np.zeros(3))

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0)):
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, up)
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        R = np.stack([right, down, forward])
        return cls(quat.from_rotation_matrix(R), -R @ eye)


@dataclass(frozen=True)
class ViewSample:
    pose: CameraPose
    intrinsics: CameraIntrinsics
    timestamp: float
    is_observed: bool = True
    index: int = -1
    image: Optional[np.ndarray] = None

    def at_time(self, t, image=None):
        return replace(self, timestamp=float(t), image=image)


class Projection(NamedTuple):
    pixel: np.ndarray
    depth: np.ndarray
    in_front: np.ndarray


def project_points(points, pose, intr):
    """Project world points (N, 3). Points at or before the near plane are flagged, not raised."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    q = p @ pose.matrix.T + pose.translation
    z = q[:, 2]
    in_front = z > intr.near
    safe_z = np.where(in_front, z, 1.0)
    pix = np.stack([intr.fx * q[:, 0] / safe_z + intr.cx, intr.fy * q[:, 1] / safe_z + intr.cy], axis=1)
    pix[~in_front] = np.nan
    return Projection(pix, z, in_front)


def project_point(p, pose, intr):
    proj = project_points(np.asarray(p)[None], pose, intr)
    return Projection(proj.pixel[0], float(proj.depth[0]), bool(proj.in_front[0]))


def unproject(pixel, depth, pose, intr):
    pixel = np.asarray(pixel, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    x = (pixel[..., 0] - intr.cx) / intr.fx * depth
    y = (pixel[..., 1] - intr.cy) / intr.fy * depth
    q = np.stack([x, y, depth], axis=-1)
    return (q - pose.translation) @ pose.matrix


def interpolate_poses(a, b, s):
    """Shorter-arc slerp of rotations, linear translation; ``s`` is clamped to [0, 1]."""
    s = float(np.clip(s, 0.0, 1.0))
    if s == 0.0:
        return CameraPose(a.rotation.copy(), a.translation.copy())
    if s == 1.0:
        return CameraPose(b.rotation.copy(), b.translation.copy())
    return CameraPose(quat.slerp(a.rotation, b.rotation, s), (1 - s) * a.translation + s * b.translation)


def sample_novel_views(training_views, count, rng_seed, s_range=(0.2, 0.8)):
    """Seeded novel views on interpolation arcs between index-adjacent training cameras."""
    views = sorted(training_views, key=lambda v: v.index)
    if len(views) < 2:
        raise InsufficientViewsError(f"need at least 2 training views, got {len(views)}")
    rng = np.random.default_rng(rng_seed)
    out = []
    for _ in range(int(count)):
        k = int(rng.integers(len(views) - 1))
        s = float(rng.uniform(*s_range))
        a, b = views[k], views[k + 1]
        out.append(ViewSample(
            interpolate_poses(a.pose, b.pose, s), a.intrinsics,
            (1 - s) * a.timestamp + s * b.timestamp, is_observed=False, index=-1))
    return out


# ---------------------------------------------------------------------------
# camera text format
# ---------------------------------------------------------------------------

_HEADER = "# index timestamp fx fy cx cy width height qw qx qy qz tx ty tz\n"


def _fmt(x):
    return repr(float(x))


def write_cameras(path, views):
    lines = [_HEADER]
    for v in views:
        k, p = v.intrinsics, v.pose
        fields = [str(int(v.index)), _fmt(v.timestamp), _fmt(k.fx), _fmt(k.fy), _fmt(k.cx), _fmt(k.cy),
                  str(int(k.width)), str(int(k.height))]
        fields += [_fmt(x) for x in p.rotation] + [_fmt(x) for x in p.translation]
        lines.append(" ".join(fields) + "\n")
    with open(path, "w", encoding="utf-8") as fh:
        fh.writelines(lines)


def read_cameras(path, near=DEFAULT_NEAR):
    views = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 15:
                raise CameraError(f"{path}:{lineno}: expected 15 fields, got {len(parts)}")
            idx, ts = int(parts[0]), float(parts[1])
            fx, fy, cx, cy = map(float, parts[2:6])
            w, h = int(parts[6]), int(parts[7])
            q = np.array([float(x) for x in parts[8:12]])
            t = np.array([float(x) for x in parts[12:15]])
            pose = CameraPose.__new__(CameraPose)
            # bypass renormalisation so the round trip is bit-exact
            object.__setattr__(pose, "rotation", q)
            object.__setattr__(pose, "translation", t)
            views.append(ViewSample(pose, CameraIntrinsics(fx, fy, cx, cy, w, h, near), ts, True, idx))
    return views
