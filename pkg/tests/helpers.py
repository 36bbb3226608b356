"""Shared builders and finite-difference checks for the test-suite."""
import numpy as np

from splatloop import quaternion as quat
from splatloop.camera import CameraIntrinsics, CameraPose, ViewSample
from splatloop.render import RenderOptions, render, render_backward
from splatloop.scene import GaussianSet

# settings that make the rasteriser smooth enough for central differences
FD_OPTS = dict(alpha_cutoff=1e-12, min_transmittance=0.0, tile_size=8)
FD_STEPS = {"means": 1e-4, "quats": 1e-5, "log_scales": 1e-5, "opacity_logits": 1e-5, "colors": 1e-5}


def small_view(size=32, eye=(0.3, -3.0, 0.5), focal=None, t=0.0, index=0):
    f = focal if focal is not None else 1.25 * size
    intr = CameraIntrinsics(f, f, size / 2.0, size / 2.0, size, size)
    return ViewSample(CameraPose.look_at(eye, (0.0, 0.0, 0.0)), intr, t, True, index)


def random_gaussians(rng, n, spread=0.6, scale=(0.08, 0.25), first_id=0):
    means = rng.uniform([-spread, -spread, -spread / 2], [spread, spread, spread / 2], (n, 3))
    q = quat.normalize(rng.normal(size=(n, 4)))
    log_scales = np.log(rng.uniform(scale[0], scale[1], (n, 3)))
    logits = rng.uniform(-0.5, 2.0, n)
    cols = rng.uniform(0, 1, (n, 3))
    return GaussianSet(means, q, log_scales, logits, cols, np.arange(first_id, first_id + n))


def fd_render_errors(gs, view, weights, backend=None, names=tuple(FD_STEPS)):
    """Relative L2 error of analytic vs central-difference gradients of ``sum(weights * color)``."""
    opts = RenderOptions(backend=backend, **FD_OPTS)
    grads = render_backward(render(gs, view, opts), weights)
    errors = {}
    for name in names:
        h = FD_STEPS[name]
        flat = getattr(gs, name).reshape(-1)
        fd = np.zeros(flat.size)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            lp = np.sum(weights * render(gs, view, opts, retain=False).color)
            flat[i] = old - h
            lm = np.sum(weights * render(gs, view, opts, retain=False).color)
            flat[i] = old
            fd[i] = (lp - lm) / (2 * h)
        an = grads[name].reshape(-1)
        errors[name] = float(np.linalg.norm(an - fd) / max(np.linalg.norm(fd), 1e-12))
    return errors


def numeric_grad(f, x, h=1e-6):
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))
