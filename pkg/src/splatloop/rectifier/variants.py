"""Interchangeable rectifiers consumed by the distillation stage.

Each rectifier maps a rendering of the current scene at (view, t) to a cleaned
target. ``context`` gives read-only access to the current scene through
``context.render(view, t)`` plus the observed poses and sequence length, which
the learned variant uses to gather spatial and temporal references.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .net import RectifierNet, ReferenceSet, rectify
from .train import temporal_window


class RectifierError(RuntimeError):
    pass


@dataclass
class RectifyContext:
    render: object
    observed_views: list = field(default_factory=list)
    frame_count: int = 1


class IdentityRectifier:
    """Returns its input; distillation against it is a no-op."""

    name = "identity"
    # targets must track the current render, so caching would make them stale
    cache_targets = False

    def __call__(self, image, view, t, context=None):
        return np.array(image, dtype=np.float64, copy=True)


class OracleRectifier:
    """Ignores the input and returns the ground-truth scene rendered at (view, t)."""

    name = "oracle"
    cache_targets = True

    def __init__(self, gt_scene, opts=None):
        self.gt_scene = gt_scene
        self.opts = opts

    def __call__(self, image, view, t, context=None):
        from ..render import render_scene

        return render_scene(self.gt_scene, t, view.at_time(t), self.opts, retain=False).color


class LearnedRectifier:
    """The trained network with references rendered from the current scene."""

    name = "learned"
    cache_targets = True

    def __init__(self, net: RectifierNet, lambda_res=1.0, window=2, max_spatial=2):
        self.net = net
        self.lambda_res = lambda_res
        self.window = window
        self.max_spatial = max_spatial

    def references(self, view, t, context):
        if context is None:
            return None
        others = sorted(context.observed_views, key=lambda o: (abs(o.index - view.index), o.index))
        spatial = [context.render(o.at_time(t), t) for o in others[:self.max_spatial]]
        temporal = [context.render(view.at_time(f), f) for f in temporal_window(t, context.frame_count, self.window)]
        return ReferenceSet.from_images(self.net, spatial, temporal)

    def __call__(self, image, view, t, context=None):
        return rectify(image, self.references(view, t, context), self.net, self.lambda_res)


def make_rectifier(kind, gt_scene=None, net=None, opts=None, lambda_res=1.0):
    if kind == "identity":
        return IdentityRectifier()
    if kind == "oracle":
        if gt_scene is None:
            raise RectifierError("oracle rectifier needs the ground-truth scene")
        return OracleRectifier(gt_scene, opts)
    if kind == "learned":
        if net is None:
            raise RectifierError("learned rectifier needs a network checkpoint")
        return LearnedRectifier(net, lambda_res)
    raise RectifierError(f"unknown rectifier variant {kind!r}")
