"""Seeded synthetic dynamic scenes with a camera ring and known motion labels."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import quaternion as quat
from .camera import CameraIntrinsics, CameraPose, ViewSample, project_points
from .render import RenderOptions, render_scene
from .scene import AnchorTrack, GaussianSet, SceneModel, logit

MOTION_KINDS = ("linear", "circular", "sinusoidal")


class SpecError(ValueError):
    pass


@dataclass
class Trajectory:
    kind: str = "circular"
    amplitude: float = 0.4
    period: float = 30.0
    phase: float = 0.0
    # direction for linear/sinusoidal motion; circles lie in the plane normal to it
    axis: tuple = (0.0, 0.0, 1.0)

    def offset(self, t):
        a = np.asarray(self.axis, dtype=np.float64)
        a = a / np.linalg.norm(a)
        w = 2.0 * np.pi * t / self.period + self.phase
        if self.kind == "linear":
            return a * self.amplitude * (t / self.period)
        if self.kind == "sinusoidal":
            return a * self.amplitude * np.sin(w)
        if self.kind == "circular":
            u = np.cross(a, [1.0, 0.0, 0.0] if abs(a[0]) < 0.9 else [0.0, 1.0, 0.0])
            u /= np.linalg.norm(u)
            v = np.cross(a, u)
            return self.amplitude * (np.cos(w) * u + np.sin(w) * v) - self.amplitude * np.cos(self.phase) * u \
                - self.amplitude * np.sin(self.phase) * v
        raise SpecError(f"unknown trajectory kind {self.kind!r}")


@dataclass
class SyntheticSceneSpec:
    static_splat_count: int = 400
    dynamic_splat_count: int = 12
    motion: list = field(default_factory=list)
    motion_amplitude: float = 0.12
    frame_count: int = 30
    camera_count: int = 8
    camera_radius: float = 4.0
    camera_height: float = 1.2
    look_at: tuple = (0.0, 0.0, 0.0)
    resolution: int = 96
    field_of_view: float = 36.0
    train_every: int = 2
    held_out_camera: int = 3
    scene_radius: float = 1.1
    seed: int = 0

    def __post_init__(self):
        if self.static_splat_count < 0 or self.dynamic_splat_count < 0:
            raise SpecError("splat counts must be non-negative")
        if self.frame_count < 1 or self.camera_count < 2:
            raise SpecError("need at least one frame and two cameras")
        if self.held_out_camera in self.train_indices:
            raise SpecError(f"held-out camera {self.held_out_camera} is a training camera")

    @property
    def train_indices(self):
        return list(range(0, self.camera_count, self.train_every))[:4]

    def trajectories(self):
        if self.motion:
            if len(self.motion) != self.dynamic_splat_count:
                raise SpecError("one trajectory per dynamic splat is required")
            return [m if isinstance(m, Trajectory) else Trajectory(**m) for m in self.motion]
        # default: small circles about the vertical axis, one full turn per sequence, staggered phases
        n = self.dynamic_splat_count
        return [Trajectory("circular", self.motion_amplitude, float(self.frame_count), 2.0 * np.pi * i / max(n, 1),
                           (0.0, 0.0, 1.0)) for i in range(n)]

    def to_dict(self):
        d = asdict(self)
        d["motion"] = [asdict(m) if isinstance(m, Trajectory) else dict(m) for m in self.motion]
        return d


@dataclass
class SyntheticData:
    spec: SyntheticSceneSpec
    gt_scene: SceneModel
    cameras: list
    images: np.ndarray  # (frames, cameras, H, W, 3)
    dynamic_ids: np.ndarray

    @property
    def frame_count(self):
        return self.images.shape[0]

    @property
    def train_indices(self):
        return self.spec.train_indices

    @property
    def held_out_index(self):
        return self.spec.held_out_camera

    def view(self, cam, t, observed=True):
        return self.cameras[cam].at_time(t, self.images[int(t), cam] if observed else None)

    def observed_views(self):
        return [self.view(c, t) for t in range(self.frame_count) for c in self.train_indices]

    def training_cameras(self):
        return [self.cameras[c] for c in self.train_indices]

    def held_out_views(self):
        return [self.view(self.held_out_index, t) for t in range(self.frame_count)]

    def held_out_images(self):
        return self.images[:, self.held_out_index]

    def is_dynamic_origin(self, origins):
        return np.isin(origins, self.dynamic_ids)


def camera_ring(spec):
    f = 0.5 * spec.resolution / np.tan(np.radians(spec.field_of_view) / 2.0)
    intr = CameraIntrinsics(f, f, spec.resolution / 2.0, spec.resolution / 2.0, spec.resolution, spec.resolution)
    views = []
    for i in range(spec.camera_count):
        ang = 2.0 * np.pi * i / spec.camera_count
        eye = np.array([spec.camera_radius * np.cos(ang), spec.camera_radius * np.sin(ang), spec.camera_height])
        views.append(ViewSample(CameraPose.look_at(eye, spec.look_at), intr, 0.0, True, i))
    return views


def _check_frustum(means_by_frame, cameras, labels, margin=2.0):
    for cam in cameras:
        intr = cam.intrinsics
        for t, pts in enumerate(means_by_frame):
            if not len(pts):
                continue
            proj = project_points(pts, cam.pose, intr)
            px = proj.pixel
            ok = proj.in_front & (px[:, 0] >= margin) & (px[:, 0] <= intr.width - margin) \
                & (px[:, 1] >= margin) & (px[:, 1] <= intr.height - margin)
            if not np.all(ok):
                bad = int(np.flatnonzero(~ok)[0])
                raise SpecError(f"trajectory {labels[bad]} leaves the frustum of camera {cam.index} at frame {t}")


def generate_synthetic(spec=None, opts=None):
    """Ground-truth scene, dense renders for every camera and frame, and motion labels."""
    spec = spec or SyntheticSceneSpec()
    rng = np.random.default_rng(spec.seed)
    ns, nd = spec.static_splat_count, spec.dynamic_splat_count
    r = spec.scene_radius

    # static content: a textured floor disc and a few coloured blobs above it
    n_floor = ns // 2
    ang = rng.uniform(0, 2 * np.pi, n_floor)
    rad = r * np.sqrt(rng.uniform(0, 1, n_floor))
    floor = np.stack([rad * np.cos(ang), rad * np.sin(ang), np.full(n_floor, -0.45)], axis=1)
    floor_col = np.where(((np.floor(floor[:, :1] * 3) + np.floor(floor[:, 1:2] * 3)) % 2) == 0,
                         [0.85, 0.8, 0.7], [0.25, 0.3, 0.45]) + rng.normal(0, 0.03, (n_floor, 3))
    n_blob = ns - n_floor
    centres = np.array([[0.55, 0.35, 0.0], [-0.5, 0.45, 0.1], [0.1, -0.6, -0.05], [-0.35, -0.3, 0.25]])
    palette = np.array([[0.9, 0.2, 0.2], [0.2, 0.75, 0.3], [0.25, 0.35, 0.9], [0.95, 0.75, 0.15]])
    which = np.arange(n_blob) % len(centres)
    blob = centres[which] + rng.normal(0, 0.16, (n_blob, 3))
    blob_col = palette[which] + rng.normal(0, 0.05, (n_blob, 3))
    s_means = np.concatenate([floor, blob])
    s_cols = np.clip(np.concatenate([floor_col, blob_col]), 0.02, 0.98)
    s_scales = np.concatenate([np.column_stack([rng.uniform(0.06, 0.11, (n_floor, 2)), np.full(n_floor, 0.02)]),
                               rng.uniform(0.05, 0.1, (n_blob, 3))])
    s_quats = quat.normalize(np.column_stack([np.ones(ns), rng.normal(0, 0.3, (ns, 3))])) if ns else np.zeros((0, 4))
    s_op = rng.uniform(0.75, 0.95, ns)
    static = GaussianSet.from_activated(s_means, s_quats, s_scales, s_op, s_cols, np.arange(ns))

    # dynamic content: separated bright splats on a ring above the static blobs
    trajs = spec.trajectories()
    ring = 2.0 * np.pi * (np.arange(nd) + rng.uniform(-0.2, 0.2, nd)) / max(nd, 1)
    d_base = np.column_stack([0.5 * np.cos(ring), 0.5 * np.sin(ring), rng.uniform(0.6, 0.75, nd)])
    d_cols = np.clip(np.array([0.95, 0.35, 0.85]) + rng.normal(0, 0.04, (nd, 3)), 0.02, 0.98)
    d_scales = rng.uniform(0.06, 0.08, (nd, 3))
    d_quats = quat.normalize(np.column_stack([np.ones(nd), rng.normal(0, 0.3, (nd, 3))])) if nd else np.zeros((0, 4))
    d_op = rng.uniform(0.85, 0.95, nd)
    times = np.arange(spec.frame_count, dtype=np.float64)
    means_by_frame = [d_base + np.array([trajs[i].offset(t) for i in range(nd)]).reshape(nd, 3) for t in times]
    cameras = camera_ring(spec)
    _check_frustum(means_by_frame, cameras, list(range(nd)))

    K = len(times)
    dyn_ids = np.arange(ns, ns + nd)
    track = AnchorTrack(
        times if K > 1 else np.array([0.0]),
        np.stack(means_by_frame), np.repeat(d_quats[None], K, 0), np.repeat(np.log(d_scales)[None], K, 0),
        np.repeat(logit(d_op)[None], K, 0), np.repeat(d_cols[None], K, 0), dyn_ids)
    gt = SceneModel(static, track, (0.0, float(spec.frame_count - 1)))

    opts = opts or RenderOptions()
    H = spec.resolution
    images = np.zeros((spec.frame_count, spec.camera_count, H, H, 3))
    for t in range(spec.frame_count):
        for c, cam in enumerate(cameras):
            images[t, c] = render_scene(gt, float(t), cam.at_time(t), opts, retain=False).color
    return SyntheticData(spec, gt, cameras, images, dyn_ids)


def initial_scene(data, position_noise=0.04, color_noise=0.15, opacity=0.5, scale_factor=1.0, seed=0,
                  anchor_spacing=10.0, floaters=0, floater_opacity=0.6):
    """Sparse-reconstruction stand-in: noisy ground-truth centres at frame 0, all static.

    Injected floaters sit in tight clusters in front of the training cameras and
    carry negative origin labels so a census can track them.
    """
    rng = np.random.default_rng(seed)
    gt0 = data.gt_scene
    ref = GaussianSet.concat([gt0.static, gt0.dynamic.anchor(0) if gt0.num_dynamic else None])
    n = len(ref)
    means = ref.means + rng.normal(0, position_noise, (n, 3))
    cols = np.clip(ref.colors + rng.normal(0, color_noise, (n, 3)), 0.02, 0.98)
    gs = GaussianSet(means, quat.normalize(ref.quats), ref.log_scales + np.log(scale_factor),
                     np.full(n, logit(opacity)), cols, np.arange(n), ref.ids.copy())
    if floaters:
        gs = GaussianSet.concat([gs, make_floaters(data, floaters, rng, n, floater_opacity)])
    return SceneModel.from_static(gs, gt0.time_range, anchor_spacing)


def make_floaters(data, count, rng, first_id, opacity=0.6, depth=(0.8, 1.4)):
    """Near-camera clusters of small opaque splats, split evenly over training cameras."""
    cams = data.training_cameras()
    means = []
    for k in range(count):
        cam = cams[k % len(cams)]
        R = cam.pose.matrix
        c = cam.pose.center
        d = rng.uniform(*depth)
        # keep each camera's floaters tightly grouped so they read as a dense clump
        lateral = rng.normal(0, 0.04, 2) + np.array([0.08, -0.05])
        means.append(c + R.T @ np.array([lateral[0] * d, lateral[1] * d, d]))
    means = np.array(means).reshape(-1, 3)
    ids = np.arange(first_id, first_id + count)
    return GaussianSet.from_activated(means, np.tile([1.0, 0, 0, 0], (count, 1)), np.full((count, 3), 0.03),
                                      np.full(count, opacity), rng.uniform(0.1, 0.9, (count, 3)), ids,
                                      -1 - np.arange(count))
