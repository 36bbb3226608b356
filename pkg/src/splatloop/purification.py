"""Stage-1 geometric purification: stochastic pruning, opacity annealing, ROI mask, loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .losses import color_loss, l1_with_grad
from .metrics import MetricShapeError
from .render import render_dynamic_alpha

DEFAULT_RHO_MAX = 1e6
FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


class PurificationError(ValueError):
    pass


class InsufficientPointsError(PurificationError):
    pass


class InvalidInputError(PurificationError):
    pass


def _rng(seed_or_rng):
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(seed_or_rng)


@dataclass
class PruneSchedule:
    eta_start: float = 0.0
    eta_end: float = 1.0
    total_iterations: int = 1

    def __post_init__(self):
        for v in (self.eta_start, self.eta_end):
            if not 0.0 <= v <= 1.0:
                raise PurificationError("dropout pressure must lie in [0, 1]")

    def eta(self, iteration):
        frac = min(max(iteration / max(self.total_iterations, 1), 0.0), 1.0)
        return float(self.eta_start + (self.eta_end - self.eta_start) * frac)


@dataclass
class AnnealSchedule:
    sigma_start: float = 0.3
    sigma_end: float = 0.0
    total_iterations: int = 1

    def sigma(self, iteration):
        frac = min(max(iteration / max(self.total_iterations, 1), 0.0), 1.0)
        return max(0.0, float(self.sigma_start + (self.sigma_end - self.sigma_start) * frac))


@dataclass
class DensityEstimate:
    k: int
    rho: np.ndarray
    depth: np.ndarray = None


def knn_density(centers, k=8, rho_max=DEFAULT_RHO_MAX):
    """Inverse mean distance to the ``k`` nearest other centres (exact neighbours)."""
    pts = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    if len(pts) <= k:
        raise InsufficientPointsError(f"need more than k={k} points, got {len(pts)}")
    dist, _ = cKDTree(pts).query(pts, k=k + 1)
    mean_d = dist[:, 1:].mean(axis=1)
    rho = np.full(len(pts), float(rho_max))
    pos = mean_d > 0
    rho[pos] = np.minimum(1.0 / mean_d[pos], rho_max)
    return rho


def minmax(x):
    x = np.asarray(x, dtype=np.float64)
    if len(x) == 0:
        return x.copy()
    lo, hi = x.min(), x.max()
    if hi <= lo:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


def combined_score(depth, density, weights=(0.5, 0.5)):
    """Min-max normalised weighted sum of inverse depth and density, in [0, 1].

    Each cue is min-max normalised before weighting so neither dominates by
    units; primitives at non-positive depth get zero inverse depth.
    """
    depth = np.asarray(depth, dtype=np.float64)
    density = np.asarray(density, dtype=np.float64)
    inv = np.where(depth > 0, 1.0 / np.where(depth > 0, depth, 1.0), 0.0)
    w_d, w_r = weights
    return minmax(w_d * minmax(inv) + w_r * minmax(density))


def depth_weight(depth, d_max=None, percentile=95.0):
    """Linear depth decay ``clamp(1 - d / d_max, 0, 1)``; d_max defaults to the 95th percentile."""
    depth = np.asarray(depth, dtype=np.float64)
    front = depth > 0
    if d_max is None:
        d_max = np.percentile(depth[front], percentile) if np.any(front) else 1.0
    if d_max <= 0:
        return np.zeros_like(depth)
    return np.where(front, np.clip(1.0 - depth / d_max, 0.0, 1.0), 0.0)


def survival_probability(depth, density, eta, weights=(0.5, 0.5), d_max=None):
    depth = np.asarray(depth, dtype=np.float64)
    density = np.asarray(density, dtype=np.float64)
    if depth.shape != density.shape:
        raise InvalidInputError("depth and density must have the same length")
    if not (np.all(np.isfinite(depth)) and np.all(np.isfinite(density))):
        raise InvalidInputError("depth and density must be finite")
    if not 0.0 <= eta <= 1.0:
        raise InvalidInputError(f"eta={eta} outside [0, 1]")
    if eta == 0.0 or len(depth) == 0:
        return np.ones_like(depth)
    score = combined_score(depth, density, weights)
    return np.clip(1.0 - eta * depth_weight(depth, d_max) * score, 0.0, 1.0)


def survival_and_mask(depth, density, eta, weights=(0.5, 0.5), rng_seed=None, d_max=None):
    """Survival probabilities and a Bernoulli existence mask drawn from the seeded generator."""
    p = survival_probability(depth, density, eta, weights, d_max)
    m = _rng(rng_seed).random(len(p)) < p
    return p, m


def update_dropout_streak(streak, mask, survival):
    """Consecutive masked-out applications per primitive.

    A draw under pressure (p < 1) that keeps the primitive resets its streak;
    draws at p = 1 carry no information and leave it untouched.
    """
    streak = np.asarray(streak, dtype=np.int64).copy()
    mask = np.asarray(mask, dtype=bool)
    pressured = np.asarray(survival) < 1.0
    streak[~mask] += 1
    streak[mask & pressured] = 0
    return streak


def opacity_noise(n, sigma, rng_seed=None):
    """Multiplicative factors ``1 + n_i`` with ``n_i ~ N(0, sigma^2)``."""
    if sigma < 0:
        raise PurificationError("sigma must be non-negative")
    if sigma == 0.0:
        return np.ones(n)
    return 1.0 + _rng(rng_seed).normal(0.0, sigma, size=n)


def anneal_opacity(opacities, sigma, rng_seed=None):
    """``clamp(alpha * (1 + n), 0, 1)``; sigma = 0 returns the input unchanged."""
    a = np.asarray(opacities, dtype=np.float64)
    if sigma == 0.0:
        return a.copy()
    return np.clip(a * opacity_noise(a.shape[0] if a.ndim else 1, sigma, rng_seed).reshape(a.shape), 0.0, 1.0)


@dataclass
class DynamicMaskConfig:
    threshold: float = 0.5
    min_component_area: int = 4


@dataclass
class DynamicMask:
    mask: np.ndarray
    threshold: float
    min_component_area: int


def clean_mask(image, threshold=0.5, min_component_area=4):
    """Binarise and drop 4-connected components smaller than ``min_component_area``."""
    binary = np.asarray(image, dtype=np.float64) > threshold
    labels, n = ndimage.label(binary, structure=FOUR_CONNECTED)
    if n == 0:
        return np.zeros(binary.shape, dtype=np.uint8)
    areas = np.bincount(labels.ravel(), minlength=n + 1)
    keep = areas >= min_component_area
    keep[0] = False
    return keep[labels].astype(np.uint8)


def extract_dynamic_mask(scene, t, view, cfg=None, opts=None):
    cfg = cfg or DynamicMaskConfig()
    alpha = render_dynamic_alpha(scene, t, view, opts)
    return DynamicMask(clean_mask(alpha, cfg.threshold, cfg.min_component_area), cfg.threshold,
                       cfg.min_component_area)


def stage1_loss(render, gt, mask=None, lambda_s=0.2, lambda_dy=0.2):
    """Colour loss plus the ROI-weighted L1 term; returns (loss, d loss / d render)."""
    pred = render.color if hasattr(render, "color") else np.asarray(render, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise MetricShapeError(f"render {pred.shape} and target {gt.shape} differ")
    loss, grad = color_loss(pred, gt, lambda_s)
    if mask is not None and lambda_dy != 0.0:
        m = mask.mask if isinstance(mask, DynamicMask) else mask
        if m.shape != pred.shape[:2]:
            raise MetricShapeError(f"mask {m.shape} does not match render {pred.shape[:2]}")
        roi, g_roi = l1_with_grad(pred, gt, m)
        loss += lambda_dy * roi
        grad = grad + lambda_dy * g_roi
    return loss, grad
