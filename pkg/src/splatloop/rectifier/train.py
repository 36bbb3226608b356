"""Paired training of the rectifier's adapters, skips and attention."""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.ndimage import correlate1d

from ..optim import Adam
from .net import ReferenceSet, RectifierNet, to_nchw, to_nhwc

EDGE_EPS = 1e-12
EDGE_NORM = 4.0 * np.sqrt(2.0)  # largest Sobel magnitude for images in [0, 1]


class EmptyDatasetError(ValueError):
    pass


@dataclass
class RectifierTrainConfig:
    lambda_pix: float = 1.0
    lambda_per: float = 1.0
    lambda_res_train: float = 1.0
    lambda_res_infer: float = 1.0
    steps: int = 200
    batch: int = 4
    learning_rate: float = 1e-3
    eval_every: int = 10

    def __post_init__(self):
        if min(self.lambda_pix, self.lambda_per) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class RectifierPair:
    """A degraded render, its clean target, and the reference images that accompany it."""

    degraded: np.ndarray
    target: np.ndarray
    spatial_refs: list = field(default_factory=list)
    temporal_refs: list = field(default_factory=list)
    view_index: int = -1
    timestamp: float = 0.0


@lru_cache(maxsize=32)
def _sobel_mats(n):
    eye = np.eye(n)
    D = correlate1d(eye, [-1.0, 0.0, 1.0], axis=0, mode="nearest")
    S = correlate1d(eye, [1.0, 2.0, 1.0], axis=0, mode="nearest")
    return D, S


def _sobel(x):
    Dh, Sh = _sobel_mats(x.shape[0])
    Dw, Sw = _sobel_mats(x.shape[1])
    gx = np.einsum("ij,jkc,lk->ilc", Sh, x, Dw, optimize=True)
    gy = np.einsum("ij,jkc,lk->ilc", Dh, x, Sw, optimize=True)
    return gx, gy


def sobel_magnitude(img):
    img = np.asarray(img, dtype=np.float64)
    x = img[..., None] if img.ndim == 2 else img
    gx, gy = _sobel(x)
    return np.sqrt(gx * gx + gy * gy + EDGE_EPS).reshape(img.shape)


def perceptual_proxy(pred, target, with_grad=False):
    """Mean L1 between Sobel magnitude maps, scaled into [0, 1]."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    x = pred[..., None] if pred.ndim == 2 else pred
    gx, gy = _sobel(x)
    mag = np.sqrt(gx * gx + gy * gy + EDGE_EPS)
    mt = sobel_magnitude(target).reshape(mag.shape)
    diff = mag - mt
    value = float(np.mean(np.abs(diff)) / EDGE_NORM)
    if not with_grad:
        return value
    dm = np.sign(diff) / (diff.size * EDGE_NORM)
    dgx = dm * gx / mag
    dgy = dm * gy / mag
    Dh, Sh = _sobel_mats(x.shape[0])
    Dw, Sw = _sobel_mats(x.shape[1])
    g = np.einsum("ji,jkc,kl->ilc", Sh, dgx, Dw, optimize=True)
    g += np.einsum("ji,jkc,kl->ilc", Dh, dgy, Sw, optimize=True)
    return value, g.reshape(pred.shape)


def rectifier_loss(pred, target, cfg, with_grad=False):
    diff = pred - target
    l1 = float(np.mean(np.abs(diff)))
    if not with_grad:
        return cfg.lambda_pix * l1 + cfg.lambda_per * perceptual_proxy(pred, target)
    p, gp = perceptual_proxy(pred, target, with_grad=True)
    grad = cfg.lambda_pix * np.sign(diff) / diff.size + cfg.lambda_per * gp
    return cfg.lambda_pix * l1 + cfg.lambda_per * p, grad


def _encode_refs(net, pair):
    return ReferenceSet.from_images(net, pair.spatial_refs, pair.temporal_refs).stacked()


def dataset_loss(net, pairs, cfg, refs=None, lambda_res=None):
    lam = cfg.lambda_res_train if lambda_res is None else lambda_res
    refs = refs if refs is not None else [_encode_refs(net, p) for p in pairs]
    total = 0.0
    for pair, r in zip(pairs, refs):
        out = to_nhwc(net.forward(to_nchw(pair.degraded), r, lam))[0]
        total += rectifier_loss(out, pair.target, cfg)
    return total / len(pairs)


def train_rectifier(pairs, cfg=None, rng_seed=0, net=None):
    """Fit the trainable parameters on (degraded, target) pairs.

    Base convolutions stay frozen, so reference latents are encoded once up front.
    Returns the parameters with the lowest full-dataset loss seen and a trace of
    ``{"step", "loss", "best"}`` records (``best`` is the running minimum).
    """
    cfg = cfg or RectifierTrainConfig()
    pairs = list(pairs)
    if not pairs:
        raise EmptyDatasetError("rectifier training needs at least one pair")
    shape = np.shape(pairs[0].degraded)
    for p in pairs:
        if np.shape(p.degraded) != shape or np.shape(p.target) != shape:
            raise ValueError("all paired images must share one resolution")
    rng = np.random.default_rng(rng_seed)
    net = (net or RectifierNet.identity(seed=rng_seed)).copy()
    refs = [_encode_refs(net, p) for p in pairs]
    inputs = [to_nchw(p.degraded) for p in pairs]
    opt = Adam(cfg.learning_rate)
    names = net.trainable_names()

    best = dataset_loss(net, pairs, cfg, refs)
    best_params = {k: net.params[k].copy() for k in names}
    trace = [{"step": 0, "loss": best, "best": best}]
    for step in range(1, cfg.steps + 1):
        idx = rng.choice(len(pairs), size=min(cfg.batch, len(pairs)), replace=False)
        grads = {k: np.zeros_like(net.params[k]) for k in names}
        for i in idx:
            cache = {}
            out = net.forward(inputs[i], refs[i], cfg.lambda_res_train, cache=cache)
            _, g = rectifier_loss(to_nhwc(out)[0], pairs[i].target, cfg, with_grad=True)
            for k, v in net.backward(to_nchw(g), cache).items():
                grads[k] += v / len(idx)
        opt.step(net.params, grads)
        if step % cfg.eval_every == 0 or step == cfg.steps:
            loss = dataset_loss(net, pairs, cfg, refs)
            if loss < best:
                best = loss
                best_params = {k: net.params[k].copy() for k in names}
            trace.append({"step": step, "loss": loss, "best": best})
    net.params.update(best_params)
    return net, trace


def temporal_window(t, frame_count, window=2):
    """Integer frames within ``window`` of ``t`` (excluding ``t``), clipped to the sequence."""
    t = int(round(t))
    return [f for f in range(t - window, t + window + 1) if f != t and 0 <= f < frame_count]


def make_degradation_pairs(scene, sparse_scene, views, frame_count=None, window=2, max_spatial=2,
                           opts=None, targets=None):
    """Pairs of sparse-scene renders against reference renders at ``views``.

    Spatial references are sparse renders of the other poses in ``views`` at the
    same time (nearest camera indices first); temporal references are sparse
    renders of the same pose at neighbouring frames. ``targets`` optionally
    supplies ground-truth images in place of rendering ``scene``.
    """
    from ..render import render_scene

    views = list(views)
    if frame_count is None:
        frame_count = int(round(scene.time_range[1])) + 1
    poses = {}
    for v in views:
        poses.setdefault(v.index, v)
    pairs = []
    for j, v in enumerate(views):
        t = v.timestamp
        degraded = render_scene(sparse_scene, t, v, opts, retain=False).color
        target = targets[j] if targets is not None else render_scene(scene, t, v, opts, retain=False).color
        others = sorted((o for i, o in poses.items() if i != v.index), key=lambda o: (abs(o.index - v.index), o.index))
        spatial = [render_scene(sparse_scene, t, o.at_time(t), opts, retain=False).color for o in others[:max_spatial]]
        temporal = [render_scene(sparse_scene, f, v.at_time(f), opts, retain=False).color
                    for f in temporal_window(t, frame_count, window)]
        pairs.append(RectifierPair(degraded, np.asarray(target, dtype=np.float64), spatial, temporal, v.index, t))
    return pairs
