"""Explicit scene representation: static field plus anchor-interpolated dynamic field.

Primitives are stored as a structure of arrays. Rotations are raw quaternions
(renormalised after every update), scales are stored as logs and opacities as
logits; colours are stored directly in [0, 1].
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import quaternion as quat

PARAM_NAMES = ("means", "quats", "log_scales", "opacity_logits", "colors")
_PARAM_SHAPES = {"means": (3,), "quats": (4,), "log_scales": (3,), "opacity_logits": (), "colors": (3,)}


class SceneError(ValueError):
    pass


class OutOfRangeError(SceneError):
    pass


class EmptyTrackError(SceneError):
    pass


class ShapeError(SceneError):
    pass


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


@dataclass
class GaussianPrimitive:
    """One anisotropic Gaussian in activated form."""

    position: np.ndarray
    rotation: np.ndarray
    scale: np.ndarray
    opacity: float
    color: np.ndarray
    id: int = -1

    def covariance(self):
        R = quat.to_rotation_matrix(quat.normalize(self.rotation))
        M = R * np.asarray(self.scale)[None, :]
        return M @ M.T


@dataclass
class GaussianSet:
    means: np.ndarray
    quats: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray
    ids: np.ndarray
    origins: np.ndarray = None

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64).reshape(-1, 3)
        n = len(self.means)
        self.quats = np.asarray(self.quats, dtype=np.float64).reshape(n, 4)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(n, 3)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float64).reshape(n)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(n, 3)
        self.ids = np.asarray(self.ids, dtype=np.int64).reshape(n)
        if self.origins is None:
            self.origins = self.ids.copy()
        self.origins = np.asarray(self.origins, dtype=np.int64).reshape(n)

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3)),
                   np.zeros(0, dtype=np.int64))

    @classmethod
    def from_activated(cls, means, quats, scales, opacities, colors, ids, origins=None):
        opacities = np.clip(np.asarray(opacities, dtype=np.float64), 1e-9, 1 - 1e-9)
        return cls(means, quat.normalize(np.asarray(quats, dtype=np.float64).reshape(-1, 4)),
                   np.log(scales), logit(opacities), colors, ids, origins)

    @classmethod
    def from_primitives(cls, prims):
        if not prims:
            return cls.empty()
        return cls.from_activated(
            [p.position for p in prims], [p.rotation for p in prims], [p.scale for p in prims],
            [p.opacity for p in prims], [p.color for p in prims], [p.id for p in prims])

    def __len__(self):
        return len(self.means)

    @property
    def scales(self):
        return np.exp(self.log_scales)

    @property
    def opacities(self):
        return sigmoid(self.opacity_logits)

    def primitive(self, i):
        return GaussianPrimitive(self.means[i].copy(), quat.normalize(self.quats[i]), self.scales[i],
                                 float(self.opacities[i]), self.colors[i].copy(), int(self.ids[i]))

    def params(self):
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self):
        return GaussianSet(**{k: v.copy() for k, v in self.params().items()},
                           ids=self.ids.copy(), origins=self.origins.copy())

    def subset(self, index):
        return GaussianSet(**{k: v[index].copy() for k, v in self.params().items()},
                           ids=self.ids[index].copy(), origins=self.origins[index].copy())

    @staticmethod
    def concat(sets):
        sets = [s for s in sets if s is not None]
        if not sets:
            return GaussianSet.empty()
        return GaussianSet(**{k: np.concatenate([getattr(s, k) for s in sets]) for k in PARAM_NAMES},
                           ids=np.concatenate([s.ids for s in sets]),
                           origins=np.concatenate([s.origins for s in sets]))

    def is_finite(self):
        return np.all([np.all(np.isfinite(v), axis=tuple(range(1, v.ndim))) if v.ndim > 1
                       else np.isfinite(v) for v in self.params().values()], axis=0)


def zero_grads(n, anchors=None):
    lead = (n,) if anchors is None else (anchors, n)
    return {name: np.zeros(lead + _PARAM_SHAPES[name]) for name in PARAM_NAMES}


@dataclass
class AnchorTrack:
    """Dynamic field: per-anchor parameter arrays with leading anchor axis."""

    anchor_times: np.ndarray
    means: np.ndarray
    quats: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray
    ids: np.ndarray
    origins: np.ndarray = None

    def __post_init__(self):
        self.anchor_times = np.asarray(self.anchor_times, dtype=np.float64).reshape(-1)
        K = len(self.anchor_times)
        if K > 1 and np.any(np.diff(self.anchor_times) <= 0):
            raise SceneError("anchor_times must be strictly increasing")
        self.ids = np.asarray(self.ids, dtype=np.int64).reshape(-1)
        n = len(self.ids)
        for name in PARAM_NAMES:
            arr = np.asarray(getattr(self, name), dtype=np.float64).reshape((K, n) + _PARAM_SHAPES[name])
            setattr(self, name, arr)
        if self.origins is None:
            self.origins = self.ids.copy()
        self.origins = np.asarray(self.origins, dtype=np.int64).reshape(n)

    @classmethod
    def empty(cls, anchor_times):
        K = len(anchor_times)
        return cls(anchor_times, np.zeros((K, 0, 3)), np.zeros((K, 0, 4)), np.zeros((K, 0, 3)),
                   np.zeros((K, 0)), np.zeros((K, 0, 3)), np.zeros(0, dtype=np.int64))

    @classmethod
    def from_static(cls, anchor_times, gaussians):
        """Zero-motion track: every anchor holds the given parameters."""
        K = len(anchor_times)
        return cls(anchor_times, **{k: np.repeat(v[None], K, axis=0) for k, v in gaussians.params().items()},
                   ids=gaussians.ids.copy(), origins=gaussians.origins.copy())

    @property
    def num_anchors(self):
        return len(self.anchor_times)

    def __len__(self):
        return len(self.ids)

    def params(self):
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def anchor(self, k):
        return GaussianSet(**{name: v[k].copy() for name, v in self.params().items()},
                           ids=self.ids.copy(), origins=self.origins.copy())

    def copy(self):
        return AnchorTrack(self.anchor_times.copy(), **{k: v.copy() for k, v in self.params().items()},
                           ids=self.ids.copy(), origins=self.origins.copy())

    def subset(self, index):
        return AnchorTrack(self.anchor_times.copy(), **{k: v[:, index].copy() for k, v in self.params().items()},
                           ids=self.ids[index].copy(), origins=self.origins[index].copy())

    def append(self, other):
        return AnchorTrack(self.anchor_times.copy(),
                           **{k: np.concatenate([getattr(self, k), getattr(other, k)], axis=1) for k in PARAM_NAMES},
                           ids=np.concatenate([self.ids, other.ids]),
                           origins=np.concatenate([self.origins, other.origins]))


def _bracket(track, t):
    if track.num_anchors == 0:
        raise EmptyTrackError("dynamic track has no anchors")
    times = track.anchor_times
    t = float(t)
    if not np.isfinite(t) or t < times[0] or t > times[-1]:
        raise OutOfRangeError(f"t={t} outside anchor range [{times[0]}, {times[-1]}]")
    hit = np.flatnonzero(times == t)
    if hit.size:
        return int(hit[0]), None
    k = int(np.searchsorted(times, t, side="right")) - 1
    u = (t - times[k]) / (times[k + 1] - times[k])
    return k, u


def interpolate_dynamic(track, t):
    """Dynamic-field state at time ``t``.

    Linear in position, opacity logit, colour and log-scale; shorter-arc slerp
    in rotation. At an anchor time the anchor state is returned unchanged.
    """
    k, u = _bracket(track, t)
    if u is None:
        return track.anchor(k)
    a, b = track.anchor(k), track.anchor(k + 1)
    out = {}
    for name in ("means", "log_scales", "opacity_logits", "colors"):
        out[name] = (1.0 - u) * getattr(a, name) + u * getattr(b, name)
    out["quats"] = quat.slerp(a.quats, b.quats, u) if len(a) else np.zeros((0, 4))
    return GaussianSet(**out, ids=track.ids.copy(), origins=track.origins.copy())


def interpolate_dynamic_vjp(track, t, grads):
    """Pull gradients on the interpolated state back onto the anchor arrays."""
    k, u = _bracket(track, t)
    n = len(track)
    out = zero_grads(n, track.num_anchors)
    if u is None:
        for name in PARAM_NAMES:
            out[name][k] = grads[name]
        return out
    for name in ("means", "log_scales", "opacity_logits", "colors"):
        out[name][k] = (1.0 - u) * grads[name]
        out[name][k + 1] = u * grads[name]
    if n:
        _, J0, J1 = quat.slerp_with_jacobian(track.quats[k], track.quats[k + 1], u)
        g = grads["quats"]
        out["quats"][k] = np.einsum("ni,nij->nj", g, J0)
        out["quats"][k + 1] = np.einsum("ni,nij->nj", g, J1)
    return out


@dataclass
class SceneModel:
    static: GaussianSet
    dynamic: AnchorTrack
    time_range: tuple
    next_id: int = 0

    def __post_init__(self):
        self.time_range = (float(self.time_range[0]), float(self.time_range[1]))
        all_ids = np.concatenate([self.static.ids, self.dynamic.ids])
        if len(np.unique(all_ids)) != len(all_ids):
            raise SceneError("primitive ids must be unique across static and dynamic fields")
        if len(all_ids):
            self.next_id = max(self.next_id, int(all_ids.max()) + 1)

    @classmethod
    def from_static(cls, static, time_range, anchor_spacing=10.0, num_anchors=None):
        return cls(static, AnchorTrack.empty(make_anchor_times(time_range, anchor_spacing, num_anchors)), time_range)

    @property
    def num_static(self):
        return len(self.static)

    @property
    def num_dynamic(self):
        return len(self.dynamic)

    def __len__(self):
        return self.num_static + self.num_dynamic

    def all_ids(self):
        return np.concatenate([self.static.ids, self.dynamic.ids])

    def all_origins(self):
        return np.concatenate([self.static.origins, self.dynamic.origins])

    def copy(self):
        return SceneModel(self.static.copy(), self.dynamic.copy(), self.time_range, self.next_id)

    def allocate_ids(self, count):
        ids = np.arange(self.next_id, self.next_id + count, dtype=np.int64)
        self.next_id += count
        return ids


def make_anchor_times(time_range, spacing=10.0, count=None):
    t0, t1 = float(time_range[0]), float(time_range[1])
    if t1 <= t0:
        return np.array([t0])
    if count is None:
        count = int(np.ceil((t1 - t0) / float(spacing))) + 1
    return np.linspace(t0, t1, max(int(count), 2))


@dataclass
class AssembledScene:
    gaussians: GaussianSet
    is_dynamic: np.ndarray
    time: float

    @property
    def num_static(self):
        return int(np.count_nonzero(~self.is_dynamic))


def assemble_scene(scene, t):
    """Static primitives followed by the interpolated dynamic ones, tagged by source."""
    lo, hi = scene.time_range
    if not (lo <= float(t) <= hi):
        raise OutOfRangeError(f"t={t} outside scene time range [{lo}, {hi}]")
    if scene.num_dynamic:
        dyn = interpolate_dynamic(scene.dynamic, t)
    else:
        dyn = GaussianSet.empty()
    gs = GaussianSet.concat([scene.static, dyn])
    tag = np.zeros(len(gs), dtype=bool)
    tag[scene.num_static:] = True
    return AssembledScene(gs, tag, float(t))


def scatter_gradients(scene, assembled, grads):
    """Split assembled-order gradients into static and per-anchor dynamic gradients."""
    ns = scene.num_static
    static_grads = {k: v[:ns] for k, v in grads.items()}
    if scene.num_dynamic:
        dyn_grads = interpolate_dynamic_vjp(scene.dynamic, assembled.time, {k: v[ns:] for k, v in grads.items()})
    else:
        dyn_grads = zero_grads(0, scene.dynamic.num_anchors)
    return static_grads, dyn_grads


@dataclass
class GradientStats:
    accum_grad_norm: np.ndarray
    observation_count: np.ndarray = field(default=None)

    def __post_init__(self):
        self.accum_grad_norm = np.asarray(self.accum_grad_norm, dtype=np.float64).reshape(-1)
        if self.observation_count is None:
            self.observation_count = np.zeros(len(self.accum_grad_norm), dtype=np.int64)
        self.observation_count = np.asarray(self.observation_count, dtype=np.int64).reshape(-1)

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n, dtype=np.int64))

    def __len__(self):
        return len(self.accum_grad_norm)

    def values(self):
        return self.accum_grad_norm / np.maximum(self.observation_count, 1)

    @property
    def mean(self):
        v = self.values()
        return float(v.mean()) if len(v) else 0.0

    @property
    def std(self):
        v = self.values()
        return float(v.std()) if len(v) else 0.0


def accumulate_gradient_stats(stats, grads, visible=None):
    """Add per-primitive positional gradient norms; counts grow where visible."""
    grads = np.asarray(grads, dtype=np.float64)
    if grads.ndim != 2 or grads.shape[1] != 3 or len(grads) != len(stats):
        raise ShapeError(f"expected ({len(stats)}, 3) gradients, got {grads.shape}")
    if visible is None:
        visible = np.ones(len(stats), dtype=bool)
    out = GradientStats(stats.accum_grad_norm.copy(), stats.observation_count.copy())
    out.accum_grad_norm += np.linalg.norm(grads, axis=1)
    out.observation_count += np.asarray(visible, dtype=bool)
    return out


def classify_dynamic(stats, kappa=3.0):
    """Outlier test ``value > mean + kappa * std`` with population std."""
    v = stats.values()
    if len(v) == 0:
        return np.zeros(0, dtype=bool)
    return v > v.mean() + kappa * v.std()


def migrate_to_dynamic(scene, mask):
    """Move static primitives flagged in ``mask`` (assembled order) into the dynamic field.

    New dynamic primitives start with zero motion: every anchor copies the
    current static parameters.
    """
    mask = np.asarray(mask, dtype=bool)
    if len(mask) != len(scene):
        raise ShapeError(f"mask length {len(mask)} != primitive count {len(scene)}")
    move = mask[: scene.num_static]
    if not np.any(move):
        return scene.copy()
    moved = scene.static.subset(move)
    track = scene.dynamic.append(AnchorTrack.from_static(scene.dynamic.anchor_times, moved))
    return SceneModel(scene.static.subset(~move), track, scene.time_range, scene.next_id)
