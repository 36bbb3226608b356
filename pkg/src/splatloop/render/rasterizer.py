"""Differentiable front-to-back Gaussian splatting with an analytic backward pass."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .. import _accel
from .. import quaternion as quat
from ..scene import GaussianSet, assemble_scene, sigmoid
from . import _numpy_kernels

if _accel.NUMBA_AVAILABLE:
    from . import _numba_kernels
else:  # pragma: no cover
    _numba_kernels = None


class RenderError(ValueError):
    pass


class InvalidPrimitiveError(RenderError):
    pass


class MissingTapeError(RenderError):
    pass


def kernels(backend=None):
    """Kernel module for ``backend`` ('numba' / 'numpy'); defaults to the env-selected one."""
    backend = backend or _accel.backend_name()
    if backend == "numba":
        if _numba_kernels is None:
            raise RenderError("numba backend requested but numba is not installed")
        return _numba_kernels
    if backend == "numpy":
        return _numpy_kernels
    raise RenderError(f"unknown backend {backend!r}")


@dataclass
class RenderOptions:
    background: tuple = (0.0, 0.0, 0.0)
    tile_size: int = 16
    alpha_cutoff: float = 1.0 / 255.0
    max_splats_per_pixel: int = 256
    min_transmittance: float = 1e-4
    # screen-space low-pass added to every projected covariance (pixels^2)
    dilation: float = 0.3
    backend: Optional[str] = None

    def __post_init__(self):
        if not (0.0 < self.alpha_cutoff < 1.0):
            raise RenderError("alpha_cutoff must lie in (0, 1)")
        if self.tile_size < 1:
            raise RenderError("tile_size must be >= 1")
        if self.max_splats_per_pixel < 1:
            raise RenderError("max_splats_per_pixel must be >= 1")


@dataclass
class _Projected:
    valid: np.ndarray        # (N,) bool over input order
    order: np.ndarray        # indices of valid primitives, front to back
    R: np.ndarray
    scales: np.ndarray
    qn: np.ndarray
    cam: np.ndarray          # camera-space centres (N, 3)
    T: np.ndarray            # J W, (N, 2, 3)
    cov3d: np.ndarray
    cov2d: np.ndarray
    mean2d: np.ndarray
    conic: np.ndarray        # (a, b, c)
    alpha: np.ndarray        # effective opacity
    base_alpha: np.ndarray
    multiplier: np.ndarray
    bbox: np.ndarray         # (N, 4) x0, y0, x1, y1 inclusive


@dataclass
class RenderTape:
    gaussians: GaussianSet
    view: object
    options: RenderOptions
    proj: _Projected
    count: np.ndarray
    tape_idx: np.ndarray
    tape_a: np.ndarray
    tape_T: np.ndarray
    backend: str


@dataclass
class RenderedFrame:
    color: np.ndarray
    alpha: np.ndarray
    depth: np.ndarray
    tape: Optional[RenderTape] = field(default=None, repr=False)

    @property
    def contributing(self):
        """Per-pixel (primitive index, blend weight) lists; built lazily from the tape."""
        if self.tape is None:
            raise MissingTapeError("frame was rendered without a tape")
        t = self.tape
        order = t.proj.order
        H, W = self.alpha.shape
        out = [[None] * W for _ in range(H)]
        for y in range(H):
            for x in range(W):
                n = t.count[y, x]
                out[y][x] = [(int(order[t.tape_idx[y, x, k]]), float(t.tape_a[y, x, k] * t.tape_T[y, x, k]))
                             for k in range(n)]
        return out

    def contribution_counts(self, n):
        """How many pixels each input primitive contributed to."""
        if self.tape is None:
            raise MissingTapeError("frame was rendered without a tape")
        t = self.tape
        mask = np.arange(t.tape_idx.shape[2])[None, None, :] < t.count[..., None]
        hits = np.bincount(t.tape_idx[mask], minlength=len(t.proj.order))
        out = np.zeros(n, dtype=np.int64)
        out[t.proj.order] = hits[: len(t.proj.order)]
        return out


def _check_finite(gs):
    bad = ~gs.is_finite()
    if np.any(bad):
        raise InvalidPrimitiveError(f"non-finite parameters in primitive id {int(gs.ids[np.flatnonzero(bad)[0]])}")


def _project(gs, view, opts, opacity_multiplier, active):
    intr = view.intrinsics
    n = len(gs)
    qn = quat.normalize(gs.quats) if n else np.zeros((0, 4))
    R = quat.to_rotation_matrix(qn)
    scales = np.exp(gs.log_scales)
    M = R * scales[:, None, :]
    cov3d = M @ np.transpose(M, (0, 2, 1))
    W = view.pose.matrix
    cam = gs.means @ W.T + view.pose.translation
    x, y, z = cam[:, 0], cam[:, 1], cam[:, 2]
    valid = z > intr.near
    if active is not None:
        valid &= np.asarray(active, dtype=bool)
    zs = np.where(valid, z, 1.0)
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = intr.fx / zs
    J[:, 0, 2] = -intr.fx * x / zs**2
    J[:, 1, 1] = intr.fy / zs
    J[:, 1, 2] = -intr.fy * y / zs**2
    T = J @ W
    cov2d = T @ cov3d @ np.transpose(T, (0, 2, 1))
    cov2d[:, 0, 0] += opts.dilation
    cov2d[:, 1, 1] += opts.dilation
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    valid &= det > 0
    det = np.where(det > 0, det, 1.0)
    conic = np.stack([cov2d[:, 1, 1] / det, -cov2d[:, 0, 1] / det, cov2d[:, 0, 0] / det], axis=1)
    mean2d = np.stack([intr.fx * x / zs + intr.cx, intr.fy * y / zs + intr.cy], axis=1)

    base_alpha = sigmoid(gs.opacity_logits)
    mult = np.ones(n) if opacity_multiplier is None else np.asarray(opacity_multiplier, dtype=np.float64)
    alpha = np.clip(base_alpha * mult, 0.0, 1.0)
    valid &= alpha >= opts.alpha_cutoff

    # the cutoff ellipse d^T Q d <= r^2 has half-extents r * sqrt(diag(cov2d))
    r2 = 2.0 * np.log(np.maximum(alpha, opts.alpha_cutoff) / opts.alpha_cutoff)
    hx = np.sqrt(r2 * cov2d[:, 0, 0])
    hy = np.sqrt(r2 * cov2d[:, 1, 1])
    with np.errstate(invalid="ignore"):
        bbox = np.stack([np.ceil(mean2d[:, 0] - hx), np.ceil(mean2d[:, 1] - hy),
                         np.floor(mean2d[:, 0] + hx), np.floor(mean2d[:, 1] + hy)], axis=1)
    bbox[:, 0] = np.maximum(bbox[:, 0], 0)
    bbox[:, 1] = np.maximum(bbox[:, 1], 0)
    bbox[:, 2] = np.minimum(bbox[:, 2], intr.width - 1)
    bbox[:, 3] = np.minimum(bbox[:, 3], intr.height - 1)
    valid &= (bbox[:, 2] >= bbox[:, 0]) & (bbox[:, 3] >= bbox[:, 1])
    bbox = np.where(valid[:, None], bbox, 0).astype(np.int64)

    idx = np.flatnonzero(valid)
    order = idx[np.lexsort((gs.ids[idx], z[idx]))]
    return _Projected(valid, order, R, scales, qn, cam, T, cov3d, cov2d, mean2d, conic, alpha, base_alpha,
                      mult, bbox)


def _bin_tiles(bbox, width, height, tile_size):
    tiles_x = (width + tile_size - 1) // tile_size
    tiles_y = (height + tile_size - 1) // tile_size
    n_tiles = tiles_x * tiles_y
    if len(bbox) == 0:
        return np.zeros(n_tiles + 1, dtype=np.int64), np.zeros(0, dtype=np.int64)
    tx0, ty0 = bbox[:, 0] // tile_size, bbox[:, 1] // tile_size
    tx1, ty1 = bbox[:, 2] // tile_size, bbox[:, 3] // tile_size
    nx, ny = tx1 - tx0 + 1, ty1 - ty0 + 1
    per = nx * ny
    splat = np.repeat(np.arange(len(bbox)), per)
    local = np.arange(per.sum()) - np.repeat(np.cumsum(per) - per, per)
    tiles = (np.repeat(ty0, per) + local // np.repeat(nx, per)) * tiles_x + np.repeat(tx0, per) + local % np.repeat(nx, per)
    key = np.lexsort((splat, tiles))
    tiles, splat = tiles[key], splat[key]
    offsets = np.zeros(n_tiles + 1, dtype=np.int64)
    np.add.at(offsets, tiles + 1, 1)
    return np.cumsum(offsets), splat.astype(np.int64)


def render(gaussians, view, opts=None, opacity_multiplier=None, active=None, retain=True):
    """Render a set of Gaussians from ``view``.

    ``opacity_multiplier`` scales activated opacities (annealing noise, held
    constant in the backward pass); ``active`` excludes primitives from this
    render without touching their parameters.
    """
    opts = opts or RenderOptions()
    _check_finite(gaussians)
    intr = view.intrinsics
    H, W = intr.height, intr.width
    proj = _project(gaussians, view, opts, opacity_multiplier, active)
    o = proj.order
    bbox = proj.bbox[o]
    offsets, tile_splats = _bin_tiles(bbox, W, H, opts.tile_size)
    per_tile = np.diff(offsets)
    capacity = int(max(1, min(opts.max_splats_per_pixel, per_tile.max() if len(per_tile) else 1)))
    bg = np.asarray(opts.background, dtype=np.float64).reshape(3)
    backend = opts.backend or _accel.backend_name()
    k = kernels(backend)
    color, alpha, depth, count, tidx, ta, tT = k.rasterize_forward(
        np.ascontiguousarray(proj.mean2d[o]), np.ascontiguousarray(proj.conic[o]),
        np.ascontiguousarray(proj.alpha[o]), np.ascontiguousarray(gaussians.colors[o]),
        np.ascontiguousarray(proj.cam[o, 2]), np.ascontiguousarray(bbox), offsets, tile_splats,
        H, W, int(opts.tile_size), bg, float(opts.alpha_cutoff), float(opts.min_transmittance), capacity)
    tape = RenderTape(gaussians, view, opts, proj, count, tidx, ta, tT, backend) if retain else None
    return RenderedFrame(color, alpha, depth, tape)


def render_backward(frame, loss_grad):
    """Gradients of a scalar loss w.r.t. every primitive parameter (input order).

    Returns a dict with ``means``, ``quats``, ``log_scales``, ``opacity_logits``,
    ``colors`` and ``means2d``; culled or masked primitives get zeros.
    """
    tape = frame.tape
    if tape is None:
        raise MissingTapeError("render_backward needs a frame rendered with retain=True")
    loss_grad = np.ascontiguousarray(loss_grad, dtype=np.float64)
    if loss_grad.shape != frame.color.shape:
        raise RenderError(f"loss gradient shape {loss_grad.shape} != frame shape {frame.color.shape}")
    gs, p = tape.gaussians, tape.proj
    n = len(gs)
    out = {"means": np.zeros((n, 3)), "quats": np.zeros((n, 4)), "log_scales": np.zeros((n, 3)),
           "opacity_logits": np.zeros(n), "colors": np.zeros((n, 3)), "means2d": np.zeros((n, 2))}
    o = p.order
    if len(o) == 0:
        return out
    bg = np.asarray(tape.options.background, dtype=np.float64).reshape(3)
    g = kernels(tape.backend).rasterize_backward(
        np.ascontiguousarray(p.mean2d[o]), np.ascontiguousarray(p.conic[o]),
        np.ascontiguousarray(gs.colors[o]), bg, tape.count, tape.tape_idx, tape.tape_a, tape.tape_T,
        loss_grad, int(tape.options.tile_size), len(o))
    g_mean2d, g_conic, g_alpha, g_color = g[:, 0:2], g[:, 2:5], g[:, 5], g[:, 6:9]
    out["colors"][o] = g_color
    out["means2d"][o] = g_mean2d

    # opacity: clamp is straight-through, the multiplier is a constant
    sa = p.base_alpha[o]
    out["opacity_logits"][o] = g_alpha * p.multiplier[o] * sa * (1.0 - sa)

    # conic -> 2D covariance
    a, b, c = p.conic[o, 0], p.conic[o, 1], p.conic[o, 2]
    Q = np.stack([np.stack([a, b], -1), np.stack([b, c], -1)], -2)
    Gq = np.stack([np.stack([g_conic[:, 0], 0.5 * g_conic[:, 1]], -1),
                   np.stack([0.5 * g_conic[:, 1], g_conic[:, 2]], -1)], -2)
    G2 = -Q @ Gq @ Q

    T = p.T[o]
    S3 = p.cov3d[o]
    dT = 2.0 * G2 @ T @ S3
    dS3 = np.transpose(T, (0, 2, 1)) @ G2 @ T

    intr = tape.view.intrinsics
    Wm = tape.view.pose.matrix
    dJ = dT @ Wm.T
    x, y, z = p.cam[o, 0], p.cam[o, 1], p.cam[o, 2]
    fx, fy = intr.fx, intr.fy
    gx = -fx / z**2 * dJ[:, 0, 2] + fx / z * g_mean2d[:, 0]
    gy = -fy / z**2 * dJ[:, 1, 2] + fy / z * g_mean2d[:, 1]
    gz = (-fx / z**2 * dJ[:, 0, 0] + 2 * fx * x / z**3 * dJ[:, 0, 2]
          - fy / z**2 * dJ[:, 1, 1] + 2 * fy * y / z**3 * dJ[:, 1, 2]
          - fx * x / z**2 * g_mean2d[:, 0] - fy * y / z**2 * g_mean2d[:, 1])
    out["means"][o] = np.stack([gx, gy, gz], axis=1) @ Wm

    R = p.R[o]
    s = p.scales[o]
    M = R * s[:, None, :]
    dM = 2.0 * dS3 @ M
    ds = np.sum(dM * R, axis=1)
    out["log_scales"][o] = ds * s
    dR = dM * s[:, None, :]
    dqn = quat.rotation_matrix_vjp(p.qn[o], dR)
    out["quats"][o] = quat.normalize_vjp(gs.quats[o], dqn)
    return out


def render_dynamic_alpha(scene, t, view, opts=None):
    """Alpha of a render containing only dynamic-field primitives, black background."""
    opts = opts or RenderOptions()
    H, W = view.intrinsics.height, view.intrinsics.width
    if scene.num_dynamic == 0:
        return np.zeros((H, W))
    assembled = assemble_scene(scene, t)
    dyn = assembled.gaussians.subset(assembled.is_dynamic)
    dyn_opts = RenderOptions(**{**opts.__dict__, "background": (0.0, 0.0, 0.0)})
    return render(dyn, view, dyn_opts, retain=False).alpha


def render_scene(scene, t, view, opts=None, **kwargs):
    return render(assemble_scene(scene, t).gaussians, view, opts, **kwargs)
