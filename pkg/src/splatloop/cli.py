"""Command-line entry point: ``splatloop <subcommand> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 invalid configuration.
Every run directory receives the resolved ``config.toml`` and a ``run.jsonl``
log with one JSON record per line.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path
from types import SimpleNamespace

from . import io
from .camera import read_cameras
from .metrics import MetricReport
from .pipeline import ABLATION_VARIANTS, run_ablation, run_closed_loop, seed_streams
from .render import RenderOptions, render_scene
from .synthetic import SyntheticSceneSpec, generate_synthetic, initial_scene

EXIT_RUNTIME = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3


class RunLog:
    """Append-only JSON-lines log."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text("", encoding="utf-8")

    def __call__(self, record):
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


# ------------------------------------------------------------------ config
def _parse_override(text):
    key, sep, raw = text.partition("=")
    parts = key.strip().split(".")
    if not sep or len(parts) != 2 or not all(parts):
        raise io.ConfigError(key.strip() or text, "overrides take the form section.key=value")
    try:
        value = io.tomllib.loads(f"v = {raw.strip()}")["v"]
    except io.tomllib.TOMLDecodeError:
        # bare words are accepted as strings
        value = raw.strip()
    return parts[0], parts[1], value


def resolve_config(args):
    """Defaults, then the config file, then ``--set`` overrides, then explicit path flags."""
    base = {}
    if getattr(args, "config", None):
        with open(args.config, "rb") as fh:
            try:
                base = io.tomllib.load(fh)
            except io.tomllib.TOMLDecodeError as exc:
                raise io.ConfigError(str(args.config), f"invalid TOML: {exc}") from exc
    for item in getattr(args, "set", None) or []:
        section, key, value = _parse_override(item)
        base.setdefault(section, {})
        if not isinstance(base[section], dict):
            raise io.ConfigError(section, "expected a table")
        base[section][key] = value
    for flag, key in (("data", "data_dir"), ("out", "output_dir")):
        value = getattr(args, flag, None)
        if value is not None:
            base.setdefault("run", {})[key] = str(value)
    return io.config_from_dict(base)


def _render_opts(cfg):
    return RenderOptions(backend=cfg.run.render_backend or None)


def _begin_run(cfg, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    io.save_config(out / "config.toml", cfg)
    log = RunLog(out / "run.jsonl")
    log({"event": "start", "master_seed": cfg.pipeline.master_seed,
         "seed_streams": sorted(seed_streams(cfg.pipeline.master_seed))})
    return out, log


def _make_rectifier(cfg, gt_scene, opts):
    from .rectifier import make_rectifier

    kind = cfg.run.rectifier
    if kind == "oracle":
        if gt_scene is None:
            raise io.ConfigError("run.rectifier", "oracle rectification needs gt_scene.gr4d in the data directory")
        return make_rectifier("oracle", gt_scene=gt_scene, opts=opts)
    if kind == "learned":
        net = io.load_net(cfg.run.rectifier_checkpoint)
        return make_rectifier("learned", net=net, lambda_res=cfg.run.lambda_res)
    return make_rectifier("identity")


def _initial_scene(cfg, loaded):
    if loaded.gt_scene is None:
        raise io.ConfigError("run.data_dir", "initialisation needs gt_scene.gr4d in the data directory")
    src = SimpleNamespace(gt_scene=loaded.gt_scene, training_cameras=lambda: list(loaded.data.training_cameras))
    r = cfg.run
    return initial_scene(src, position_noise=r.init_position_noise, color_noise=r.init_color_noise,
                         seed=r.init_seed, anchor_spacing=cfg.pipeline.anchor_spacing, floaters=r.init_floaters)


def _evaluate(scene, views, opts):
    rendered = [render_scene(scene, v.timestamp, v, opts, retain=False).color for v in views]
    report = MetricReport.from_sequences(rendered, [v.image for v in views],
                                         [int(round(v.timestamp)) for v in views])
    return report, rendered


# ---------------------------------------------------------------- commands
def cmd_synth(args):
    spec = SyntheticSceneSpec(static_splat_count=args.static, dynamic_splat_count=args.dynamic,
                              frame_count=args.frames, resolution=args.resolution, seed=args.seed)
    data = generate_synthetic(spec)
    io.save_dataset(args.out, data)
    print(f"wrote {data.frame_count} frames x {len(data.cameras)} cameras to {args.out}")
    return 0


def cmd_train(args):
    cfg = resolve_config(args)
    opts = _render_opts(cfg)
    loaded = io.load_dataset(cfg.run.data_dir)
    rectifier = _make_rectifier(cfg, loaded.gt_scene, opts)
    scene = _initial_scene(cfg, loaded)
    out, log = _begin_run(cfg, cfg.run.output_dir)
    t0 = time.perf_counter()
    state, _ = run_closed_loop(loaded.data, cfg.pipeline, rectifier, scene, opts, sink=log)
    io.save_scene(out / "scene.gr4d", state.scene)
    if loaded.data.held_out:
        report, rendered = _evaluate(state.scene, loaded.data.held_out, opts)
        report.write_csv(out / cfg.metrics.csv_name)
        if cfg.metrics.write_renders:
            (out / "renders").mkdir(exist_ok=True)
            for v, img in zip(loaded.data.held_out, rendered):
                io.write_ppm(out / "renders" / io.image_name(v.index, int(round(v.timestamp))), img)
        log({"event": "end", "seconds": time.perf_counter() - t0, **report.summary(),
             "rectifier_calls": state.rectifier_calls})
    else:
        log({"event": "end", "seconds": time.perf_counter() - t0, "rectifier_calls": state.rectifier_calls})
    print(f"trained scene with {len(state.scene)} primitives -> {out / 'scene.gr4d'}")
    return 0


def cmd_render(args):
    scene = io.load_scene(args.scene)
    views = {v.index: v for v in read_cameras(args.cameras)}
    if args.camera not in views:
        raise LookupError(f"camera {args.camera} not found in {args.cameras}")
    view = views[args.camera].at_time(args.time)
    img = render_scene(scene, args.time, view, RenderOptions(backend=args.backend), retain=False).color
    io.write_ppm(args.out, img)
    print(f"wrote {args.out}")
    return 0


def cmd_eval(args):
    scene = io.load_scene(args.scene)
    loaded = io.load_dataset(args.data)
    views = loaded.data.held_out
    if args.camera is not None:
        cams = loaded.cameras
        if args.camera not in cams:
            raise LookupError(f"camera {args.camera} not found in {args.data}")
        root = Path(args.data) / "images"
        views = [cams[args.camera].at_time(t, io.read_ppm_float(root / io.image_name(args.camera, t)))
                 for t in range(loaded.data.frame_count)]
    if not views:
        raise LookupError("no evaluation views")
    report, _ = _evaluate(scene, views, RenderOptions(backend=args.backend))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    report.write_csv(args.out)
    s = report.summary()
    print(f"psnr {s['psnr']:.3f} ssim {s['ssim']:.4f} over {s['frames']} frames -> {args.out}")
    return 0


def cmd_rectifier_train(args):
    from .rectifier import RectifierNet, RectifierTrainConfig, make_degradation_pairs, train_rectifier

    loaded = io.load_dataset(args.data)
    sparse = io.load_scene(args.sparse_scene)
    views = loaded.data.observed
    if args.max_pairs:
        views = views[: args.max_pairs]
    targets = [v.image for v in views]
    pairs = make_degradation_pairs(None, sparse, views, loaded.data.frame_count, targets=targets)
    cfg = RectifierTrainConfig(steps=args.steps, batch=args.batch, learning_rate=args.lr)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    log = RunLog(out.with_suffix(".jsonl"))
    net, trace = train_rectifier(pairs, cfg, rng_seed=args.seed, net=RectifierNet.identity(seed=args.seed))
    for rec in trace:
        log(rec)
    io.save_net(out, net)
    print(f"rectifier loss {trace[0]['loss']:.5f} -> {trace[-1]['best']:.5f}; saved {out}")
    return 0


def cmd_ablate(args):
    cfg = resolve_config(args)
    opts = _render_opts(cfg)
    loaded = io.load_dataset(cfg.run.data_dir)
    rectifier = _make_rectifier(cfg, loaded.gt_scene, opts)
    scene = _initial_scene(cfg, loaded)
    out, log = _begin_run(cfg, cfg.run.output_dir)
    rows = run_ablation(loaded.data, cfg.pipeline, rectifier, scene, tuple(args.seeds), tuple(args.variants), opts)
    with open(out / "ablation.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=["variant", "seed", "psnr", "ssim", "temporal_consistency"])
        w.writeheader()
        for row in rows:
            w.writerow(row)
            log({"event": "ablation", **row})
    print(f"{len(rows)} runs -> {out / 'ablation.csv'}")
    return 0


# ------------------------------------------------------------------ parser
def _add_config_flags(p):
    p.add_argument("--config", type=Path, help="TOML run configuration")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config value")
    p.add_argument("--data", type=Path, help="dataset directory (overrides run.data_dir)")
    p.add_argument("--out", type=Path, help="output directory (overrides run.output_dir)")


def build_parser():
    parser = argparse.ArgumentParser(prog="splatloop", description="Sparse-view dynamic splatting with rectified distillation.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("synth", help="generate a synthetic dataset directory")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frames", type=int, default=30)
    p.add_argument("--resolution", type=int, default=96)
    p.add_argument("--static", type=int, default=400)
    p.add_argument("--dynamic", type=int, default=12)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="run both optimisation stages")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render a checkpoint at one camera and time")
    p.add_argument("--scene", type=Path, required=True)
    p.add_argument("--cameras", type=Path, required=True)
    p.add_argument("--camera", type=int, required=True)
    p.add_argument("--time", type=float, default=0.0)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--backend", choices=("numba", "numpy"))
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="per-frame PSNR/SSIM of a checkpoint as CSV")
    p.add_argument("--scene", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--camera", type=int, help="camera index (default: the held-out camera)")
    p.add_argument("--out", type=Path, default=Path("metrics.csv"))
    p.add_argument("--backend", choices=("numba", "numpy"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("rectifier-train", help="fit the rectifier on sparse renders against observed images")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--sparse-scene", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--max-pairs", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_rectifier_train)

    p = sub.add_parser("ablate", help="paired-seed ablation matrix")
    _add_config_flags(p)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--variants", nargs="+", choices=ABLATION_VARIANTS, default=list(ABLATION_VARIANTS))
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("splatloop: error: a subcommand is required", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except io.ConfigError as exc:
        print(f"splatloop: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, LookupError, ValueError, RuntimeError) as exc:
        print(f"splatloop: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
