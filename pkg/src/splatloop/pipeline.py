"""Two-stage optimisation: stochastic purification, then distillation from a rectifier."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import quaternion as quat
from .camera import sample_novel_views
from .losses import color_loss
from .metrics import MetricReport, MetricShapeError
from .optim import Adam
from .purification import (AnnealSchedule, DynamicMaskConfig, PruneSchedule, extract_dynamic_mask, knn_density,
                           opacity_noise, stage1_loss, survival_and_mask, update_dropout_streak)
from .rectifier.variants import RectifyContext
from .render import RenderOptions, render, render_backward, render_scene
from .scene import (PARAM_NAMES, AnchorTrack, GaussianSet, GradientStats, SceneModel, accumulate_gradient_stats,
                    assemble_scene, classify_dynamic, migrate_to_dynamic, scatter_gradients, sigmoid)

PURIFY = "purify"
DISTILL = "distill"
SEED_STREAMS = ("sample", "prune", "anneal", "densify", "novel")


class PipelineError(RuntimeError):
    pass


class EmptyDatasetError(PipelineError):
    pass


@dataclass
class PipelineConfig:
    kappa: float = 3.0
    lambda_s: float = 0.2
    lambda_dy: float = 0.2
    lambda_rect: float = 0.1
    stage1_iters: int = 20000
    stage2_iters: int = 20000
    # stochastic pruning
    use_pruning: bool = True
    prune_eta_start: float = 0.0
    prune_eta_end: float = 1.0
    prune_weight_depth: float = 0.5
    prune_weight_density: float = 0.5
    knn_k: int = 8
    dropout_streak_limit: int = 50
    # opacity annealing
    use_annealing: bool = True
    anneal_sigma_start: float = 0.3
    anneal_sigma_end: float = 0.0
    # dynamic mask for the ROI term
    mask_threshold: float = 0.5
    mask_min_area: int = 4
    # adaptive density control and dynamic classification
    densify_interval: int = 100
    densify_from: float = 0.2
    densify_until: float = 0.8
    densify_grad_threshold: float = 2e-4
    densify_size_threshold: float = 0.08
    max_primitives: int = 2000
    opacity_prune_floor: float = 0.05
    # dynamic classification window, as fractions of stage 1: statistics restart at
    # classify_from and outlier passes run at density-control steps up to classify_until
    classify_from: float = 0.15
    classify_until: float = 0.2
    reset_stats_after_classify: bool = True
    anchor_spacing: float = 10.0
    # distillation
    novel_views_per_iter: int = 1
    novel_pool_size: int = 16
    refresh_interval: int = 500
    # optimiser
    lr_means: float = 3e-4
    lr_quats: float = 2e-3
    lr_log_scales: float = 5e-3
    lr_opacity_logits: float = 2e-2
    lr_colors: float = 1e-2
    # position step size decays exponentially to lr_means * lr_means_final_ratio over both stages
    lr_means_final_ratio: float = 0.01
    adam_eps: float = 1e-15
    eval_interval: int = 0
    master_seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.lambda_rect <= 1.0:
            raise PipelineError("lambda_rect must lie in [0, 1]")
        if self.stage1_iters < 0 or self.stage2_iters < 0:
            raise PipelineError("iteration counts must be non-negative")

    @property
    def prune(self):
        return PruneSchedule(self.prune_eta_start, self.prune_eta_end, self.stage1_iters)

    @property
    def anneal(self):
        return AnnealSchedule(self.anneal_sigma_start, self.anneal_sigma_end, self.stage1_iters)

    @property
    def learning_rates(self):
        return {"means": self.lr_means, "quats": self.lr_quats, "log_scales": self.lr_log_scales,
                "opacity_logits": self.lr_opacity_logits, "colors": self.lr_colors}

    def replace(self, **kw):
        d = asdict(self)
        unknown = set(kw) - set(d)
        if unknown:
            raise PipelineError(f"unknown config keys {sorted(unknown)}")
        d.update(kw)
        return PipelineConfig(**d)

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


@dataclass
class TrainingData:
    """Observed views with images, the held-out sequence, and sequence metadata."""

    observed: list
    held_out: list
    frame_count: int
    training_cameras: list

    @classmethod
    def from_synthetic(cls, data):
        return cls(data.observed_views(), data.held_out_views(), data.frame_count, data.training_cameras())


def seed_streams(master_seed):
    """Independent named generators; each variant consumes only the streams it needs."""
    return {name: np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=(i,)))
            for i, name in enumerate(SEED_STREAMS)}


@dataclass
class TrainState:
    scene: SceneModel
    stats: GradientStats
    densify_stats: GradientStats
    streak: np.ndarray
    optimizer: Adam
    rngs: dict
    iteration: int = 0
    stage: str = PURIFY
    history: list = field(default_factory=list)
    seed_lineage: dict = field(default_factory=dict)
    rectifier_calls: int = 0
    target_cache: dict = field(default_factory=dict)
    novel_pool: list = field(default_factory=list)
    loss_window: list = field(default_factory=list)

    @classmethod
    def create(cls, scene, cfg):
        n = len(scene)
        lr = {}
        for prefix in ("static", "dynamic"):
            for name, v in cfg.learning_rates.items():
                lr[f"{prefix}.{name}"] = v
        return cls(scene.copy(), GradientStats.zeros(n), GradientStats.zeros(n), np.zeros(n, dtype=np.int64),
                   Adam(lr, eps=cfg.adam_eps), seed_streams(cfg.master_seed),
                   seed_lineage={"master_seed": int(cfg.master_seed),
                                 "streams": {s: [i] for i, s in enumerate(SEED_STREAMS)}})

    def log(self, record, sink=None):
        self.history.append(record)
        if sink is not None:
            sink(record)


# ---------------------------------------------------------------- parameters
def _param_views(scene):
    p = {f"static.{k}": v for k, v in scene.static.params().items()}
    if scene.num_dynamic:
        p.update({f"dynamic.{k}": v for k, v in scene.dynamic.params().items()})
    return p


def _named_grads(static_grads, dyn_grads, scene):
    g = {f"static.{k}": static_grads[k] for k in PARAM_NAMES}
    if scene.num_dynamic:
        g.update({f"dynamic.{k}": dyn_grads[k] for k in PARAM_NAMES})
    return g


def _add_grads(a, b):
    if a is None:
        return b
    return {k: a[k] + b[k] for k in a}


def _project_constraints(scene):
    for gs in (scene.static, scene.dynamic):
        if len(gs):
            gs.quats[...] = quat.normalize(gs.quats)
            np.clip(gs.colors, 0.0, 1.0, out=gs.colors)
            np.clip(gs.log_scales, np.log(1e-4), np.log(2.0), out=gs.log_scales)


def _id_index(old_ids, new_ids):
    pos = {int(i): k for k, i in enumerate(old_ids)}
    src = np.array([pos.get(int(i), -1) for i in new_ids], dtype=np.int64)
    return src


def _gather_rows(arr, src, axis):
    arr = np.moveaxis(arr, axis, 0)
    out = np.zeros((len(src),) + arr.shape[1:], dtype=arr.dtype)
    ok = src >= 0
    out[ok] = arr[src[ok]]
    return np.moveaxis(out, 0, axis)


def remap_state(state, old_scene, new_scene):
    """Carry optimiser moments, statistics and streaks across a topology change by id."""
    for prefix, old, new, axis in (("static", old_scene.static.ids, new_scene.static.ids, 0),
                                   ("dynamic", old_scene.dynamic.ids, new_scene.dynamic.ids, 1)):
        src = _id_index(old, new)
        for name in PARAM_NAMES:
            key = f"{prefix}.{name}"
            if key in state.optimizer.m:
                state.optimizer.m[key] = _gather_rows(state.optimizer.m[key], src, axis)
                state.optimizer.v[key] = _gather_rows(state.optimizer.v[key], src, axis)
    src = _id_index(old_scene.all_ids(), new_scene.all_ids())
    state.stats = GradientStats(_gather_rows(state.stats.accum_grad_norm, src, 0),
                                _gather_rows(state.stats.observation_count, src, 0))
    state.densify_stats = GradientStats(_gather_rows(state.densify_stats.accum_grad_norm, src, 0),
                                        _gather_rows(state.densify_stats.observation_count, src, 0))
    state.streak = _gather_rows(state.streak, src, 0)
    state.scene = new_scene


# ------------------------------------------------------------------- losses
def hybrid_loss(render_out, target, is_rectified, cfg):
    """``(1 - lambda) L_color`` for observed targets, ``lambda L_color`` for rectified ones."""
    pred = render_out.color if hasattr(render_out, "color") else np.asarray(render_out, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise MetricShapeError(f"render {pred.shape} and target {target.shape} differ")
    w = cfg.lambda_rect if is_rectified else 1.0 - cfg.lambda_rect
    if w == 0.0:
        return 0.0, np.zeros_like(pred)
    value, grad = color_loss(pred, target, cfg.lambda_s)
    return w * value, w * grad


# ---------------------------------------------------------- density control
def _split_children(means, quats, log_scales, rng_z):
    R = quat.to_rotation_matrix(quat.normalize(quats))
    s = np.exp(log_scales)
    return means + np.einsum("nij,nj->ni", R, s * rng_z)


def densify_and_prune(scene, stats, cfg, rng=None, remove=None):
    """Clone small and split large high-gradient primitives; drop faint ones.

    ``stats`` holds screen-space gradient norms in assembled order. Dynamic
    primitives are edited on every anchor at once. ``remove`` optionally marks
    extra primitives (assembled order) for deletion.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    n_s, n_d = scene.num_static, scene.num_dynamic
    n = n_s + n_d
    if len(stats) != n:
        raise PipelineError(f"stats length {len(stats)} != primitive count {n}")
    grad = stats.values()
    hot = grad > cfg.densify_grad_threshold
    budget = max(0, cfg.max_primitives - n)
    if np.count_nonzero(hot) > budget:
        keep = np.argsort(-grad, kind="stable")[:budget]
        hot = np.zeros(n, dtype=bool)
        hot[keep] = True
    if n_d:
        dyn_scale = np.exp(scene.dynamic.log_scales).max(axis=(0, 2))
    else:
        dyn_scale = np.zeros(0)
    max_scale = np.concatenate([np.exp(scene.static.log_scales).max(axis=1) if n_s else np.zeros(0), dyn_scale])
    split = hot & (max_scale > cfg.densify_size_threshold)
    clone = hot & ~split

    st, dy = scene.static, scene.dynamic
    new_static, new_dynamic = [], []
    # clones
    cs = np.flatnonzero(clone[:n_s])
    if len(cs):
        c = st.subset(cs)
        new_static.append(GaussianSet(**c.params(), ids=np.zeros(len(cs), dtype=np.int64), origins=c.origins))
    cd = np.flatnonzero(clone[n_s:])
    if len(cd):
        c = dy.subset(cd)
        new_dynamic.append(c)
    # splits: two children at scale / 1.6, parent removed
    ss = np.flatnonzero(split[:n_s])
    for _ in range(2):
        if len(ss):
            z = rng.standard_normal((len(ss), 3))
            c = st.subset(ss)
            c.means = _split_children(c.means, c.quats, c.log_scales, z)
            c.log_scales = c.log_scales - np.log(1.6)
            new_static.append(c)
    sd = np.flatnonzero(split[n_s:])
    for _ in range(2):
        if len(sd):
            z = rng.standard_normal((len(sd), 3))
            c = dy.subset(sd)
            for k in range(dy.num_anchors):
                c.means[k] = _split_children(c.means[k], c.quats[k], c.log_scales[k], z)
            c.log_scales = c.log_scales - np.log(1.6)
            new_dynamic.append(c)

    out = SceneModel(scene.static.copy(), scene.dynamic.copy(), scene.time_range, scene.next_id)
    drop = split.copy()
    if remove is not None:
        drop |= np.asarray(remove, dtype=bool)
    static_keep = ~drop[:n_s]
    dynamic_keep = ~drop[n_s:]
    if cfg.opacity_prune_floor > 0:
        static_keep &= sigmoid(st.opacity_logits) >= cfg.opacity_prune_floor
        if n_d:
            dynamic_keep &= sigmoid(dy.opacity_logits).max(axis=0) >= cfg.opacity_prune_floor
    static = out.static.subset(static_keep)
    dynamic = out.dynamic.subset(dynamic_keep)
    if new_static:
        extra = GaussianSet.concat(new_static)
        extra.ids = out.allocate_ids(len(extra))
        static = GaussianSet.concat([static, extra])
    if new_dynamic:
        extra = new_dynamic[0]
        for more in new_dynamic[1:]:
            extra = extra.append(more)
        extra.ids = out.allocate_ids(len(extra))
        dynamic = dynamic.append(extra)
    return SceneModel(static, dynamic, scene.time_range, out.next_id)


# -------------------------------------------------------------- evaluation
def evaluate(scene, views, opts=None):
    renders = [render_scene(scene, v.timestamp, v, opts, retain=False).color for v in views]
    return MetricReport.from_sequences(renders, [v.image for v in views], [int(v.timestamp) for v in views])


def _checkpoint(state, data, cfg, opts, sink, loss):
    rep = evaluate(state.scene, data.held_out, opts) if data.held_out else None
    rec = {"iteration": state.iteration, "stage": state.stage, "loss": loss,
           "primitives": len(state.scene), "dynamic": state.scene.num_dynamic}
    if rep is not None:
        rec.update(psnr=rep.mean_psnr, ssim=rep.mean_ssim, temporal_consistency=rep.temporal_consistency)
    state.log(rec, sink)
    return rep


def _pop_loss(state):
    v = float(np.mean(state.loss_window)) if state.loss_window else None
    state.loss_window = []
    return v


def _sample_observed(state, data):
    rng = state.rngs["sample"]
    return data.observed[int(rng.integers(len(data.observed)))]


# ----------------------------------------------------------------- stage 1
def _density_control(state, cfg):
    scene = state.scene
    lo, hi = cfg.classify_from * cfg.stage1_iters, cfg.classify_until * cfg.stage1_iters
    if lo < state.iteration <= hi:
        mask = classify_dynamic(state.stats, cfg.kappa)
        if np.any(mask[: scene.num_static]):
            new = migrate_to_dynamic(scene, mask)
            remap_state(state, scene, new)
            scene = new
        if cfg.reset_stats_after_classify:
            state.stats = GradientStats.zeros(len(scene))
    if cfg.densify_from * cfg.stage1_iters < state.iteration <= cfg.densify_until * cfg.stage1_iters:
        remove = state.streak >= cfg.dropout_streak_limit if cfg.use_pruning else None
        new = densify_and_prune(scene, state.densify_stats, cfg, state.rngs["densify"], remove)
        remap_state(state, scene, new)
        state.densify_stats = GradientStats.zeros(len(new))


def _schedule_lr(state, cfg):
    total = max(cfg.stage1_iters + cfg.stage2_iters, 1)
    lr = cfg.lr_means * cfg.lr_means_final_ratio ** (min(state.iteration, total) / total)
    state.optimizer.lr["static.means"] = lr
    state.optimizer.lr["dynamic.means"] = lr


def _apply_grads(state, cfg, static_grads, dyn_grads):
    scene = state.scene
    _schedule_lr(state, cfg)
    state.optimizer.step(_param_views(scene), _named_grads(static_grads, dyn_grads, scene))
    _project_constraints(scene)


def stage1_step(state, data, cfg, opts=None):
    view = _sample_observed(state, data)
    t = view.timestamp
    scene = state.scene
    assembled = assemble_scene(scene, t)
    gs = assembled.gaussians
    n = len(gs)
    active = None
    if cfg.use_pruning and n > cfg.knn_k:
        eta = cfg.prune.eta(state.iteration)
        depth = gs.means @ view.pose.matrix[2] + view.pose.translation[2]
        density = knn_density(gs.means, cfg.knn_k)
        p, active = survival_and_mask(depth, density, eta, (cfg.prune_weight_depth, cfg.prune_weight_density),
                                      state.rngs["prune"])
        state.streak = update_dropout_streak(state.streak, active, p)
    mult = None
    if cfg.use_annealing:
        sigma = cfg.anneal.sigma(state.iteration)
        if sigma > 0:
            mult = opacity_noise(n, sigma, state.rngs["anneal"])
    frame = render(gs, view, opts, opacity_multiplier=mult, active=active)
    mask = None
    if cfg.lambda_dy > 0 and scene.num_dynamic:
        mask = extract_dynamic_mask(scene, t, view, DynamicMaskConfig(cfg.mask_threshold, cfg.mask_min_area), opts)
    loss, g = stage1_loss(frame, view.image, mask, cfg.lambda_s, cfg.lambda_dy)
    grads = render_backward(frame, g)
    static_grads, dyn_grads = scatter_gradients(scene, assembled, grads)
    _apply_grads(state, cfg, static_grads, dyn_grads)
    visible = np.zeros(n, dtype=bool)
    visible[frame.tape.proj.order] = True
    state.stats = accumulate_gradient_stats(state.stats, grads["means"], visible)
    g2 = np.zeros((n, 3))
    g2[:, :2] = grads["means2d"]
    state.densify_stats = accumulate_gradient_stats(state.densify_stats, g2, visible)
    state.loss_window.append(loss)
    return loss


def stage1_purify(state, data, cfg, opts=None, sink=None, until=None):
    """Purification with lambda = 0: pruning, annealing, ROI loss, density control.

    ``until`` stops early at that iteration (schedules still span the full stage),
    so a later call resumes where this one left off.
    """
    if not data.observed:
        raise EmptyDatasetError("stage 1 needs at least one observed view")
    if state.stage != PURIFY:
        raise PipelineError("stage 1 runs only before distillation")
    stop = cfg.stage1_iters if until is None else min(until, cfg.stage1_iters)
    while state.iteration < stop:
        state.iteration += 1
        if state.iteration == int(cfg.classify_from * cfg.stage1_iters) + 1:
            state.stats = GradientStats.zeros(len(state.scene))
        stage1_step(state, data, cfg, opts)
        if cfg.densify_interval and state.iteration % cfg.densify_interval == 0:
            _density_control(state, cfg)
        if cfg.eval_interval and state.iteration % cfg.eval_interval == 0:
            _checkpoint(state, data, cfg, opts, sink, _pop_loss(state))
    return state


# ----------------------------------------------------------------- stage 2
def _rectified_target(state, rectifier, view, t, data, cfg, opts):
    key = (view.index, int(round(t)))
    cached = state.target_cache.get(key)
    if rectifier.cache_targets and cached is not None and state.iteration - cached[0] < cfg.refresh_interval:
        return cached[1]
    if state.stage != DISTILL:
        raise PipelineError("rectifier called before distillation")
    snapshot = state.scene
    ctx = RectifyContext(lambda v, tt: render_scene(snapshot, tt, v, opts, retain=False).color,
                         data.training_cameras, data.frame_count)
    current = render_scene(snapshot, t, view.at_time(t), opts, retain=False).color
    try:
        target = np.asarray(rectifier(current, view.at_time(t), t, ctx), dtype=np.float64)
    except Exception as exc:
        raise PipelineError(f"rectifier failed at novel view {view.index}, t={t}: {exc}") from exc
    state.rectifier_calls += 1
    if rectifier.cache_targets:
        state.target_cache[key] = (state.iteration, target)
    return target


def stage2_step(state, data, cfg, rectifier=None, opts=None):
    scene = state.scene
    view = _sample_observed(state, data)
    assembled = assemble_scene(scene, view.timestamp)
    frame = render(assembled.gaussians, view, opts)
    loss, g = hybrid_loss(frame, view.image, False, cfg)
    sg, dg = scatter_gradients(scene, assembled, render_backward(frame, g))
    total_s, total_d = sg, dg
    if cfg.lambda_rect > 0 and rectifier is not None and cfg.novel_views_per_iter > 0:
        rng = state.rngs["novel"]
        for _ in range(cfg.novel_views_per_iter):
            nv = state.novel_pool[int(rng.integers(len(state.novel_pool)))]
            t = float(rng.integers(data.frame_count))
            target = _rectified_target(state, rectifier, nv, t, data, cfg, opts)
            a2 = assemble_scene(scene, t)
            f2 = render(a2.gaussians, nv.at_time(t), opts)
            l2, g2 = hybrid_loss(f2, target, True, cfg)
            loss += l2
            s2, d2 = scatter_gradients(scene, a2, render_backward(f2, g2))
            total_s = _add_grads(total_s, s2)
            total_d = _add_grads(total_d, d2)
    _apply_grads(state, cfg, total_s, total_d)
    state.loss_window.append(loss)
    return loss


def stage2_distill(state, data, cfg, rectifier=None, opts=None, sink=None):
    """Observed views keep ground truth; sampled novel views are supervised by rectified targets."""
    if not data.observed:
        raise EmptyDatasetError("stage 2 needs at least one observed view")
    if state.stage != DISTILL:
        raise PipelineError("distillation requires a completed purification stage")
    if not state.novel_pool and cfg.lambda_rect > 0 and rectifier is not None:
        cams = sorted(data.training_cameras, key=lambda v: v.index)
        pool = sample_novel_views(cams, cfg.novel_pool_size, int(state.rngs["novel"].integers(2 ** 31)))
        # pool entries need distinct cache keys
        state.novel_pool = [type(v)(v.pose, v.intrinsics, v.timestamp, False, 10000 + i) for i, v in enumerate(pool)]
    for _ in range(cfg.stage2_iters):
        state.iteration += 1
        stage2_step(state, data, cfg, rectifier, opts)
        if cfg.eval_interval and state.iteration % cfg.eval_interval == 0:
            _checkpoint(state, data, cfg, opts, sink, _pop_loss(state))
    return state


def run_closed_loop(data, cfg, rectifier=None, scene=None, opts=None, sink=None):
    """Stage 1 then stage 2 from ``scene``; returns the final state and held-out metrics."""
    if scene is None:
        raise PipelineError("an initial scene is required")
    state = TrainState.create(scene, cfg)
    stage1_purify(state, data, cfg, opts, sink)
    _stage_end(state, data, cfg, opts, sink)
    state.stage = DISTILL
    stage2_distill(state, data, cfg, rectifier, opts, sink)
    report = _stage_end(state, data, cfg, opts, sink)
    if report is None and data.held_out:
        report = evaluate(state.scene, data.held_out, opts)
    return state, report


def _stage_end(state, data, cfg, opts, sink):
    last = state.history[-1] if state.history else None
    if last is not None and last["iteration"] == state.iteration and last["stage"] == state.stage:
        return None
    return _checkpoint(state, data, cfg, opts, sink, _pop_loss(state))


ABLATION_VARIANTS = ("full", "no-pruning", "no-annealing", "no-roi", "no-rectification")


def ablation_config(cfg, variant):
    if variant == "full":
        return cfg
    if variant == "no-pruning":
        return cfg.replace(use_pruning=False)
    if variant == "no-annealing":
        return cfg.replace(use_annealing=False)
    if variant == "no-roi":
        return cfg.replace(lambda_dy=0.0)
    if variant == "no-rectification":
        return cfg.replace(lambda_rect=0.0)
    raise PipelineError(f"unknown ablation variant {variant!r}")


def run_ablation(data, cfg, rectifier, scene, seeds=(0,), variants=ABLATION_VARIANTS, opts=None):
    """One metrics row per (variant, seed), all variants sharing each seed."""
    rows = []
    for seed in seeds:
        for variant in variants:
            vcfg = ablation_config(cfg.replace(master_seed=seed), variant)
            _, rep = run_closed_loop(data, vcfg, rectifier, scene, opts)
            rows.append({"variant": variant, "seed": seed, "psnr": rep.mean_psnr, "ssim": rep.mean_ssim,
                         "temporal_consistency": rep.temporal_consistency})
    return rows
