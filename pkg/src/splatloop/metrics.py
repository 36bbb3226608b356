"""Image quality metrics: PSNR, SSIM (with gradient) and a temporal-consistency proxy.

SSIM uses an 11x11 Gaussian window (sigma 1.5) with reflect padding and
C1 = 0.01^2, C2 = 0.03^2 for images in [0, 1]. The window is applied as two
dense filter matrices, which makes the adjoint needed for the gradient exact.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.ndimage import correlate1d

PSNR_CAP = 100.0
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


class MetricShapeError(ValueError):
    pass


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b):
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


@lru_cache(maxsize=None)
def _window():
    x = np.arange(SSIM_WINDOW) - SSIM_WINDOW // 2
    w = np.exp(-(x ** 2) / (2 * SSIM_SIGMA ** 2))
    return w / w.sum()


@lru_cache(maxsize=64)
def _filter_matrix(n):
    F = correlate1d(np.eye(n), _window(), axis=0, mode="reflect")
    F.setflags(write=False)
    return F


def _as_hwc(x):
    return x[..., None] if x.ndim == 2 else x


def _blur(x):
    Fh = _filter_matrix(x.shape[0])
    Fw = _filter_matrix(x.shape[1])
    return np.einsum("ij,jkc,lk->ilc", Fh, x, Fw, optimize=True)


def _blur_adjoint(g):
    Fh = _filter_matrix(g.shape[0])
    Fw = _filter_matrix(g.shape[1])
    return np.einsum("ji,jkc,kl->ilc", Fh, g, Fw, optimize=True)


def ssim_map(a, b):
    a, b = _check_pair(a, b)
    x, y = _as_hwc(a), _as_hwc(b)
    mu1, mu2 = _blur(x), _blur(y)
    s11 = _blur(x * x) - mu1 * mu1
    s22 = _blur(y * y) - mu2 * mu2
    s12 = _blur(x * y) - mu1 * mu2
    num = (2 * mu1 * mu2 + SSIM_C1) * (2 * s12 + SSIM_C2)
    den = (mu1 * mu1 + mu2 * mu2 + SSIM_C1) * (s11 + s22 + SSIM_C2)
    return num / den


def ssim(a, b):
    return float(np.mean(ssim_map(a, b)))


def ssim_with_grad(a, b):
    """Mean SSIM and its gradient with respect to ``a``."""
    a, b = _check_pair(a, b)
    x, y = _as_hwc(a), _as_hwc(b)
    mu1, mu2 = _blur(x), _blur(y)
    s11 = _blur(x * x) - mu1 * mu1
    s22 = _blur(y * y) - mu2 * mu2
    s12 = _blur(x * y) - mu1 * mu2
    A1 = 2 * mu1 * mu2 + SSIM_C1
    A2 = 2 * s12 + SSIM_C2
    B1 = mu1 * mu1 + mu2 * mu2 + SSIM_C1
    B2 = s11 + s22 + SSIM_C2
    S = A1 * A2 / (B1 * B2)
    value = float(np.mean(S))

    G = 1.0 / S.size
    dA1 = G * A2 / (B1 * B2)
    dA2 = G * A1 / (B1 * B2)
    dB1 = -G * S / B1
    dB2 = -G * S / B2
    d_mu1 = 2 * mu2 * dA1 - 2 * mu2 * dA2 + 2 * mu1 * dB1 - 2 * mu1 * dB2
    d_xx = dB2
    d_xy = 2 * dA2
    grad = _blur_adjoint(d_mu1) + 2 * x * _blur_adjoint(d_xx) + y * _blur_adjoint(d_xy)
    return value, grad.reshape(a.shape)


def temporal_consistency(rendered, reference):
    """Mean |(r[t+1] - r[t]) - (g[t+1] - g[t])| over frames, pixels and channels."""
    r = np.asarray(rendered, dtype=np.float64)
    g = np.asarray(reference, dtype=np.float64)
    if r.shape != g.shape:
        raise MetricShapeError(f"sequence shape mismatch {r.shape} vs {g.shape}")
    if len(r) < 2:
        raise MetricShapeError("temporal consistency needs at least two frames")
    return float(np.mean(np.abs(np.diff(r, axis=0) - np.diff(g, axis=0))))


@dataclass
class MetricReport:
    psnr: list = field(default_factory=list)
    ssim: list = field(default_factory=list)
    temporal_consistency: float = float("nan")
    frame_indices: list = field(default_factory=list)

    @property
    def frame_count(self):
        return len(self.psnr)

    @property
    def mean_psnr(self):
        return float(np.mean(self.psnr)) if self.psnr else float("nan")

    @property
    def mean_ssim(self):
        return float(np.mean(self.ssim)) if self.ssim else float("nan")

    @classmethod
    def from_sequences(cls, rendered, reference, frame_indices=None):
        rendered = list(rendered)
        reference = list(reference)
        if len(rendered) != len(reference):
            raise MetricShapeError("rendered and reference sequences differ in length")
        rep = cls(
            psnr=[psnr(r, g) for r, g in zip(rendered, reference)],
            ssim=[ssim(r, g) for r, g in zip(rendered, reference)],
            frame_indices=list(frame_indices) if frame_indices is not None else list(range(len(rendered))),
        )
        if len(rendered) >= 2:
            rep.temporal_consistency = temporal_consistency(np.stack(rendered), np.stack(reference))
        return rep

    def summary(self):
        return {"psnr": self.mean_psnr, "ssim": self.mean_ssim,
                "temporal_consistency": self.temporal_consistency, "frames": self.frame_count}

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["frame_index", "psnr", "ssim"])
            for i, p, s in zip(self.frame_indices, self.psnr, self.ssim):
                w.writerow([i, repr(float(p)), repr(float(s))])
            w.writerow(["mean", repr(self.mean_psnr), repr(self.mean_ssim)])
