"""Images, binary checkpoints, run configuration and dataset directories.

Binary layouts (all little-endian):

Scene checkpoint ``GR4D``::

    magic "GR4D" | version u32 | t_min f64 | t_max f64 | next_id i64
    n_static u64 | n_dynamic u64 | n_anchors u64 | anchor_times f64[K]
    static:  means f64[N,3] quats f64[N,4] log_scales f64[N,3] opacity_logits f64[N] colors f64[N,3]
             ids i64[N] origins i64[N]
    dynamic: the same five arrays with a leading anchor axis [K, M, ...], then ids i64[M] origins i64[M]

Rectifier checkpoint ``GRNT``::

    magic "GRNT" | version u32 | arch_len u32 | architecture JSON (utf-8, arch_len bytes)
    n_params u32 | per parameter, sorted by name:
        name_len u16 | name utf-8 | ndim u8 | dims u32[ndim] | data f64[prod(dims)]
"""
from __future__ import annotations

import json
import struct
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .camera import read_cameras, write_cameras
from .pipeline import PipelineConfig, TrainingData
from .rectifier.net import RectifierArch, RectifierNet
from .scene import PARAM_NAMES, AnchorTrack, GaussianSet, SceneModel

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

SCENE_MAGIC = b"GR4D"
NET_MAGIC = b"GRNT"
SCENE_VERSION = 1
NET_VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class ConfigError(ValueError):
    def __init__(self, key_path, message):
        super().__init__(f"{key_path}: {message}")
        self.key_path = key_path


class PPMError(ValueError):
    pass


# ---------------------------------------------------------------------- PPM
def to_uint8(img):
    img = np.asarray(img)
    if img.dtype == np.uint8:
        return img
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(path, img):
    """Binary P6, maxval 255, row-major RGB."""
    data = to_uint8(img)
    if data.ndim != 3 or data.shape[2] != 3:
        raise PPMError(f"expected an (H, W, 3) image, got {data.shape}")
    h, w = data.shape[:2]
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(data).tobytes())


def _ppm_tokens(buf, count, pos):
    out = []
    while len(out) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise PPMError("truncated PPM header")
        out.append(buf[start:pos])
    return out, pos + 1


def read_ppm(path):
    """Read a P6 file as a uint8 (H, W, 3) array."""
    buf = Path(path).read_bytes()
    (magic, w, h, maxval), pos = _ppm_tokens(buf, 4, 0)
    if magic != b"P6":
        raise PPMError(f"{path}: not a binary PPM (magic {magic!r})")
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise PPMError(f"{path}: only maxval 255 is supported")
    data = buf[pos:pos + w * h * 3]
    if len(data) != w * h * 3:
        raise PPMError(f"{path}: truncated pixel data")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3).copy()


def read_ppm_float(path):
    return read_ppm(path).astype(np.float64) / 255.0


# -------------------------------------------------------------- binary I/O
class _Reader:
    def __init__(self, buf, what):
        self.buf = buf
        self.pos = 0
        self.what = what

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise CheckpointTruncatedError(f"{self.what} truncated at byte {self.pos} (needed {n} more)")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))

    def array(self, dtype, shape):
        dt = np.dtype(dtype).newbyteorder("<")
        count = int(np.prod(shape)) if len(shape) else 1
        return np.frombuffer(self.take(count * dt.itemsize), dtype=dt).astype(dtype).reshape(shape)


def _le(arr, dtype):
    return np.ascontiguousarray(arr, dtype=np.dtype(dtype).newbyteorder("<")).tobytes()


def _check_magic(reader, magic, version):
    got = reader.take(4)
    if got != magic:
        raise CheckpointFormatError(f"bad magic {got!r}, expected {magic.decode()!r}")
    (v,) = reader.unpack("I")
    if v != version:
        raise CheckpointVersionError(f"unsupported {magic.decode()} version {v} (expected {version})")


def scene_to_bytes(scene):
    st, dy = scene.static, scene.dynamic
    K = dy.num_anchors
    parts = [SCENE_MAGIC, struct.pack("<IddqQQQ", SCENE_VERSION, scene.time_range[0], scene.time_range[1],
                                      int(scene.next_id), len(st), len(dy), K),
             _le(dy.anchor_times, np.float64)]
    for name in PARAM_NAMES:
        parts.append(_le(getattr(st, name), np.float64))
    parts += [_le(st.ids, np.int64), _le(st.origins, np.int64)]
    for name in PARAM_NAMES:
        parts.append(_le(getattr(dy, name), np.float64))
    parts += [_le(dy.ids, np.int64), _le(dy.origins, np.int64)]
    return b"".join(parts)


_SHAPES = {"means": (3,), "quats": (4,), "log_scales": (3,), "opacity_logits": (), "colors": (3,)}


def scene_from_bytes(buf):
    r = _Reader(buf, "scene checkpoint")
    _check_magic(r, SCENE_MAGIC, SCENE_VERSION)
    t0, t1, next_id, ns, nd, K = r.unpack("ddqQQQ")
    times = r.array(np.float64, (K,))
    sp = {name: r.array(np.float64, (ns,) + _SHAPES[name]) for name in PARAM_NAMES}
    sids, sorig = r.array(np.int64, (ns,)), r.array(np.int64, (ns,))
    dp = {name: r.array(np.float64, (K, nd) + _SHAPES[name]) for name in PARAM_NAMES}
    dids, dorig = r.array(np.int64, (nd,)), r.array(np.int64, (nd,))
    if r.pos != len(buf):
        raise CheckpointFormatError(f"{len(buf) - r.pos} trailing bytes after scene checkpoint")
    return SceneModel(GaussianSet(**sp, ids=sids, origins=sorig), AnchorTrack(times, **dp, ids=dids, origins=dorig),
                      (t0, t1), next_id)


def save_scene(path, scene):
    Path(path).write_bytes(scene_to_bytes(scene))


def load_scene(path):
    return scene_from_bytes(Path(path).read_bytes())


def net_to_bytes(net):
    arch = json.dumps(net.arch.to_dict(), sort_keys=True).encode("utf-8")
    parts = [NET_MAGIC, struct.pack("<II", NET_VERSION, len(arch)), arch, struct.pack("<I", len(net.params))]
    for name in sorted(net.params):
        arr = np.asarray(net.params[name], dtype=np.float64)
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
        parts.append(struct.pack("<%dI" % arr.ndim, *arr.shape))
        parts.append(_le(arr, np.float64))
    return b"".join(parts)


def net_from_bytes(buf):
    r = _Reader(buf, "rectifier checkpoint")
    _check_magic(r, NET_MAGIC, NET_VERSION)
    (alen,) = r.unpack("I")
    try:
        arch = RectifierArch(**json.loads(r.take(alen).decode("utf-8")))
    except (ValueError, TypeError) as exc:
        raise CheckpointFormatError(f"bad architecture block: {exc}") from exc
    (count,) = r.unpack("I")
    params = {}
    for _ in range(count):
        (nlen,) = r.unpack("H")
        name = r.take(nlen).decode("utf-8")
        (ndim,) = r.unpack("B")
        shape = r.unpack("%dI" % ndim) if ndim else ()
        params[name] = r.array(np.float64, tuple(shape))
    if r.pos != len(buf):
        raise CheckpointFormatError(f"{len(buf) - r.pos} trailing bytes after rectifier checkpoint")
    return RectifierNet(arch, params)


def save_net(path, net):
    Path(path).write_bytes(net_to_bytes(net))


def load_net(path):
    return net_from_bytes(Path(path).read_bytes())


# ------------------------------------------------------------ run config
RECTIFIER_VARIANTS = ("identity", "oracle", "learned")


@dataclass
class RunSettings:
    data_dir: str = "data"
    output_dir: str = "run"
    rectifier: str = "oracle"
    rectifier_checkpoint: str = ""
    lambda_res: float = 1.0
    init_position_noise: float = 0.04
    init_color_noise: float = 0.15
    init_floaters: int = 0
    init_seed: int = 0
    render_backend: str = ""


@dataclass
class MetricSettings:
    write_renders: bool = True
    csv_name: str = "metrics.csv"


@dataclass
class RunConfig:
    run: RunSettings = field(default_factory=RunSettings)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    metrics: MetricSettings = field(default_factory=MetricSettings)

    def validate(self):
        if self.run.rectifier not in RECTIFIER_VARIANTS:
            raise ConfigError("run.rectifier", f"must be one of {', '.join(RECTIFIER_VARIANTS)}")
        if self.run.rectifier == "learned" and not self.run.rectifier_checkpoint:
            raise ConfigError("run.rectifier_checkpoint", "required for the learned rectifier")
        if self.run.render_backend not in ("", "numba", "numpy"):
            raise ConfigError("run.render_backend", "must be empty, 'numba' or 'numpy'")
        return self

    def to_dict(self):
        return {"run": asdict(self.run), "pipeline": asdict(self.pipeline), "metrics": asdict(self.metrics)}


_SECTIONS = {"run": RunSettings, "pipeline": PipelineConfig, "metrics": MetricSettings}


def _coerce(key_path, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(key_path, f"expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key_path, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key_path, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(key_path, f"expected a string, got {value!r}")
        return value
    return value


def config_from_dict(d):
    out = {}
    for section, value in d.items():
        if section not in _SECTIONS:
            raise ConfigError(section, "unknown section")
        if not isinstance(value, dict):
            raise ConfigError(section, "expected a table")
        cls = _SECTIONS[section]
        defaults = cls()
        names = {f.name for f in fields(cls)}
        kw = {}
        for key, v in value.items():
            if key not in names:
                raise ConfigError(f"{section}.{key}", "unknown key")
            kw[key] = _coerce(f"{section}.{key}", v, getattr(defaults, key))
        try:
            out[section] = cls(**kw)
        except ValueError as exc:
            raise ConfigError(section, str(exc)) from exc
    return RunConfig(**out).validate()


def load_config(path):
    try:
        with open(path, "rb") as fh:
            d = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(str(path), f"invalid TOML: {exc}") from exc
    return config_from_dict(d)


def _toml_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        return repr(v)  # TOML spells the specials inf, -inf and nan, as repr does
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(f"cannot write {type(v).__name__} to TOML")


def dumps_toml(d):
    lines = []
    for section, table in d.items():
        lines.append(f"[{section}]")
        lines.extend(f"{k} = {_toml_value(v)}" for k, v in table.items())
        lines.append("")
    return "\n".join(lines)


def save_config(path, cfg):
    Path(path).write_text(dumps_toml(cfg.to_dict()), encoding="utf-8")


# --------------------------------------------------------- dataset layout
def image_name(cam, frame):
    return f"c{cam:02d}_t{frame:03d}.ppm"


def save_dataset(root, data):
    """Camera file, per-frame per-view PPMs, ground-truth checkpoint and split metadata."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    views = [data.cameras[c].at_time(t) for t in range(data.frame_count) for c in range(len(data.cameras))]
    write_cameras(root / "cameras.txt", views)
    for t in range(data.frame_count):
        for c in range(len(data.cameras)):
            write_ppm(root / "images" / image_name(c, t), data.images[t, c])
    save_scene(root / "gt_scene.gr4d", data.gt_scene)
    split = {"split": {"train": list(data.train_indices), "held_out": int(data.held_out_index),
                       "frame_count": int(data.frame_count), "dynamic_ids": [int(i) for i in data.dynamic_ids]},
             "spec": {k: v for k, v in data.spec.to_dict().items() if k != "motion" and v is not None}}
    spec = split["spec"]
    spec["look_at"] = list(spec["look_at"])
    (root / "split.toml").write_text(dumps_toml(split), encoding="utf-8")


@dataclass
class LoadedDataset:
    data: TrainingData
    gt_scene: SceneModel
    dynamic_ids: np.ndarray
    cameras: dict


def load_dataset(root):
    root = Path(root)
    with open(root / "split.toml", "rb") as fh:
        meta = tomllib.load(fh)["split"]
    views = read_cameras(root / "cameras.txt")
    by_cam = {}
    for v in views:
        by_cam.setdefault(v.index, v)

    def with_image(v):
        return v.at_time(v.timestamp, read_ppm_float(root / "images" / image_name(v.index, int(v.timestamp))))

    train = set(meta["train"])
    observed = [with_image(v) for v in views if v.index in train]
    held = [with_image(v) for v in views if v.index == meta["held_out"]]
    gt = load_scene(root / "gt_scene.gr4d") if (root / "gt_scene.gr4d").exists() else None
    data = TrainingData(observed, held, int(meta["frame_count"]), [by_cam[i] for i in sorted(train)])
    return LoadedDataset(data, gt, np.asarray(meta.get("dynamic_ids", []), dtype=np.int64), by_cam)
