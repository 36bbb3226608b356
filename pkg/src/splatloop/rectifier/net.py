"""Single-step degradation-aware rectifier network.

Encoder levels feed projected skips into the decoder; the latent is refined by
spatio-temporal attention over reference latents, then corrected by a
subtractive residual bridge ``z - lambda_res * eps(z)`` whose predictor carries
low-rank adapters on frozen base convolutions.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import layers as L

TRAINABLE_PREFIXES = ("attn.", "skip", "gamma")


class RectifierShapeError(ValueError):
    pass


@dataclass(frozen=True)
class RectifierArch:
    in_channels: int = 3
    levels: int = 3
    base_channels: int = 16
    latent_channels: int = 48
    lora_rank: int = 8
    lora_scaling: float = 1.0
    hidden_multiplier: int = 2
    ln_eps: float = 1e-5

    @property
    def downsample(self):
        return 2 ** (self.levels - 1)

    @property
    def channels(self):
        return [self.base_channels * 2 ** l for l in range(self.levels)]

    @property
    def hidden_channels(self):
        return self.hidden_multiplier * self.latent_channels

    def to_dict(self):
        return asdict(self)


@dataclass
class ReferenceSet:
    """Reference latents for one target: other views at the same time, nearby frames."""

    spatial: np.ndarray = None
    temporal: np.ndarray = None

    def stacked(self):
        parts = [r for r in (self.spatial, self.temporal) if r is not None and len(r)]
        return np.concatenate(parts, axis=0) if parts else None

    def __len__(self):
        s = self.stacked()
        return 0 if s is None else len(s)

    @classmethod
    def from_images(cls, net, spatial=(), temporal=()):
        enc = lambda imgs: net.encode(np.stack([to_nchw(i)[0] for i in imgs]))[0] if len(imgs) else None
        return cls(enc(list(spatial)), enc(list(temporal)))


def to_nchw(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        img = img[None]
    return np.ascontiguousarray(img.transpose(0, 3, 1, 2))


def to_nhwc(x):
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1))


def _identity_conv(cout, cin, k, n):
    w = np.zeros((cout, cin, k, k))
    for i in range(min(n, cout, cin)):
        w[i, i, k // 2, k // 2] = 1.0
    return w


def _he(rng, shape):
    fan_in = int(np.prod(shape[1:]))
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def is_trainable(name):
    return "lora_" in name or name.startswith(TRAINABLE_PREFIXES)


@dataclass
class RectifierNet:
    arch: RectifierArch
    params: dict = field(default_factory=dict)

    # ------------------------------------------------------------------ init
    @classmethod
    def identity(cls, arch=None, seed=0):
        """Lossless codec init: with lambda_res = 0 the net reproduces its input exactly."""
        arch = arch or RectifierArch()
        ch = arch.channels
        f = arch.downsample
        need = [arch.in_channels * 4 ** l for l in range(arch.levels)]
        if any(c < n for c, n in zip(ch, need)) or arch.latent_channels < arch.in_channels * f * f:
            raise RectifierShapeError("channel widths too small for a lossless identity codec")
        rng = np.random.default_rng(seed)
        p = cls._common(arch, rng)
        p["enc0.w"] = _identity_conv(ch[0], arch.in_channels, 3, arch.in_channels)
        for l in range(1, arch.levels):
            p[f"enc{l}.w"] = _identity_conv(ch[l], 4 * ch[l - 1], 3, need[l])
        p["to_latent.w"] = _identity_conv(arch.latent_channels, ch[-1], 1, need[-1])
        p["from_latent.w"] = _identity_conv(ch[-1], arch.latent_channels, 1, need[-1])
        for l in range(1, arch.levels + 1):
            c = ch[arch.levels - l]
            p[f"skip{l}.w"] = np.zeros((c, c, 1, 1))
            if l < arch.levels:
                p[f"up{l}.w"] = _identity_conv(ch[arch.levels - l - 1], c // 4, 3, need[arch.levels - l - 1])
            else:
                p[f"up{l}.w"] = _identity_conv(ch[0], ch[0], 3, arch.in_channels)
        p["out.w"] = _identity_conv(arch.in_channels, ch[0], 3, arch.in_channels)
        Cz, Ch = arch.latent_channels, arch.hidden_channels
        w1 = np.zeros((Ch, Cz, 3, 3))
        for i in range(Cz):
            w1[i, i, 1, 1] = 1.0
            if Cz + i < Ch:
                w1[Cz + i, i, 1, 1] = -1.0
        p["eps.conv1.w"] = w1
        p["eps.conv2.w"] = np.zeros((Cz, Ch, 3, 3))
        p["attn.wv"] = np.eye(Cz)
        p["attn.wo"] = np.zeros((Cz, Cz))
        return cls(arch, p)

    @classmethod
    def random(cls, arch=None, seed=0):
        """Fully random init (every path active); used for mechanism and gradient checks."""
        arch = arch or RectifierArch()
        rng = np.random.default_rng(seed)
        ch = arch.channels
        p = cls._common(arch, rng)
        p["enc0.w"] = _he(rng, (ch[0], arch.in_channels, 3, 3))
        for l in range(1, arch.levels):
            p[f"enc{l}.w"] = _he(rng, (ch[l], 4 * ch[l - 1], 3, 3))
        p["to_latent.w"] = _he(rng, (arch.latent_channels, ch[-1], 1, 1))
        p["from_latent.w"] = _he(rng, (ch[-1], arch.latent_channels, 1, 1))
        for l in range(1, arch.levels + 1):
            c = ch[arch.levels - l]
            p[f"skip{l}.w"] = 0.5 * _he(rng, (c, c, 1, 1))
            cout = ch[arch.levels - l - 1] if l < arch.levels else ch[0]
            cin = c // 4 if l < arch.levels else ch[0]
            p[f"up{l}.w"] = _he(rng, (cout, cin, 3, 3))
        p["out.w"] = _he(rng, (arch.in_channels, ch[0], 3, 3)) * 0.5
        Cz, Ch = arch.latent_channels, arch.hidden_channels
        p["eps.conv1.w"] = _he(rng, (Ch, Cz, 3, 3))
        p["eps.conv2.w"] = _he(rng, (Cz, Ch, 3, 3)) * 0.5
        for name in ("eps.conv1", "eps.conv2"):
            p[f"{name}.lora_up"] = rng.normal(0.0, 0.1, size=p[f"{name}.lora_up"].shape)
        p["attn.wv"] = rng.normal(0.0, 1.0 / np.sqrt(Cz), size=(Cz, Cz))
        p["attn.wo"] = rng.normal(0.0, 1.0 / np.sqrt(Cz), size=(Cz, Cz))
        p["attn.ln_g"] = 1.0 + 0.1 * rng.normal(size=Cz)
        p["attn.ln_b"] = 0.1 * rng.normal(size=Cz)
        for k in list(p):
            if k.endswith(".b") and not k.startswith("eps.conv1"):
                p[k] = 0.05 * rng.normal(size=p[k].shape)
        return cls(arch, p)

    @staticmethod
    def _common(arch, rng):
        ch = arch.channels
        Cz, Ch, r = arch.latent_channels, arch.hidden_channels, arch.lora_rank
        p = {"enc0.b": np.zeros(ch[0])}
        for l in range(1, arch.levels):
            p[f"enc{l}.b"] = np.zeros(ch[l])
        p["to_latent.b"] = np.zeros(Cz)
        p["from_latent.b"] = np.zeros(ch[-1])
        for l in range(1, arch.levels + 1):
            p[f"up{l}.b"] = np.zeros(ch[arch.levels - l - 1] if l < arch.levels else ch[0])
        p["out.b"] = np.zeros(arch.in_channels)
        p["gamma"] = np.array(1.0)
        # constant timestep embedding of the single-step predictor, folded into a frozen bias
        p["eps.conv1.b"] = np.zeros(Ch)
        p["eps.conv2.b"] = np.zeros(Cz)
        p["eps.conv1.lora_down"] = rng.normal(0.0, 1.0 / np.sqrt(Cz * 9), size=(Cz * 9, r))
        p["eps.conv1.lora_up"] = np.zeros((r, Ch))
        p["eps.conv2.lora_down"] = rng.normal(0.0, 1.0 / np.sqrt(Ch * 9), size=(Ch * 9, r))
        p["eps.conv2.lora_up"] = np.zeros((r, Cz))
        p["attn.ln_g"] = np.ones(Cz)
        p["attn.ln_b"] = np.zeros(Cz)
        p["attn.wq"] = rng.normal(0.0, 1.0 / np.sqrt(Cz), size=(Cz, Cz))
        p["attn.wk"] = rng.normal(0.0, 1.0 / np.sqrt(Cz), size=(Cz, Cz))
        return p

    # ------------------------------------------------------------- plumbing
    def copy(self):
        return RectifierNet(self.arch, {k: v.copy() for k, v in self.params.items()})

    def trainable_names(self):
        return sorted(k for k in self.params if is_trainable(k))

    def _lora(self, name):
        return (self.params[f"{name}.lora_down"], self.params[f"{name}.lora_up"], self.arch.lora_scaling)

    def check_input(self, x):
        f = self.arch.downsample
        if x.ndim != 4 or x.shape[1] != self.arch.in_channels:
            raise RectifierShapeError(f"expected (V, {self.arch.in_channels}, H, W) input, got {x.shape}")
        if x.shape[2] % f or x.shape[3] % f:
            raise RectifierShapeError(f"resolution {x.shape[2:]} not divisible by {f}")

    # --------------------------------------------------------------- forward
    def encode(self, x):
        """Latent and per-level encoder features for an NCHW batch."""
        self.check_input(x)
        p = self.params
        h = L.relu(L.conv2d(x, p["enc0.w"], p["enc0.b"])[0])
        feats = [h]
        for l in range(1, self.arch.levels):
            h = L.relu(L.conv2d(L.space_to_depth(h, 2), p[f"enc{l}.w"], p[f"enc{l}.b"])[0])
            feats.append(h)
        z = L.conv2d(h, p["to_latent.w"], p["to_latent.b"])[0]
        return z, feats

    def residual(self, z):
        p = self.params
        a, c1 = L.conv2d(z, p["eps.conv1.w"], p["eps.conv1.b"], self._lora("eps.conv1"))
        h = L.relu(a)
        e, c2 = L.conv2d(h, p["eps.conv2.w"], p["eps.conv2.b"], self._lora("eps.conv2"))
        return e, (c1, a, c2)

    def decode(self, z, feats, cache=None):
        p = self.params
        Lv = self.arch.levels
        gamma = float(p["gamma"])
        h, c_from = L.conv2d(z, p["from_latent.w"], p["from_latent.b"])
        steps = []
        for l in range(1, Lv + 1):
            enc = feats[Lv - l]
            s, c_skip = L.conv2d(gamma * enc, p[f"skip{l}.w"])
            x = h + s
            u = L.depth_to_space(x, 2) if l < Lv else x
            pre, c_up = L.conv2d(u, p[f"up{l}.w"], p[f"up{l}.b"])
            h = L.relu(pre)
            steps.append((c_skip, c_up, pre))
        out, c_out = L.conv2d(h, p["out.w"], p["out.b"])
        if cache is not None:
            cache.update(c_from=c_from, steps=steps, c_out=c_out)
        return out

    def attention(self, target, refs=None, cache=None):
        return stc_attention(target, refs, self.params, self.arch.ln_eps, cache=cache)

    def forward(self, x, refs=None, lambda_res=1.0, cache=None):
        """Rectify an NCHW batch; every target shares ``refs`` (latents, (R, C, h, w)) if given."""
        x = np.asarray(x, dtype=np.float64)
        z, feats = self.encode(x)
        att_cache = {} if cache is not None else None
        z1 = self.attention(z, refs, cache=att_cache)
        e, eps_cache = self.residual(z1)
        z2 = bridge(z1, lambda_res, e)
        dec_cache = {} if cache is not None else None
        raw = self.decode(z2, feats, dec_cache)
        if cache is not None:
            cache.update(feats=feats, att=att_cache, eps=eps_cache, dec=dec_cache, raw=raw, lambda_res=lambda_res)
        return np.clip(raw, 0.0, 1.0)

    # -------------------------------------------------------------- backward
    def backward(self, d_out, cache):
        """Gradients of every trainable parameter given d loss / d (clamped output)."""
        p = self.params
        Lv = self.arch.levels
        gamma = float(p["gamma"])
        grads = {k: np.zeros_like(p[k]) for k in self.trainable_names()}
        raw = cache["raw"]
        g = d_out * ((raw >= 0.0) & (raw <= 1.0))
        dec = cache["dec"]
        g, _, _, _, _ = L.conv2d_backward(g, dec["c_out"])
        for l in range(Lv, 0, -1):
            c_skip, c_up, pre = dec["steps"][l - 1]
            g = L.relu_backward(g, pre)
            g, _, _, _, _ = L.conv2d_backward(g, c_up)
            if l < Lv:
                g = L.space_to_depth(g, 2)
            # skip branch: s = W (gamma * enc)
            d_in, dWm, _, _, _ = L.conv2d_backward(g, c_skip)
            grads[f"skip{l}.w"] += L.weight_grad_to_conv(dWm, p[f"skip{l}.w"].shape)
            grads["gamma"] += np.sum(d_in * cache["feats"][Lv - l])
        g_z2, _, _, _, _ = L.conv2d_backward(g, dec["c_from"])

        # bridge: z2 = z1 - lambda * eps(z1)
        lam = cache["lambda_res"]
        c1, a, c2 = cache["eps"]
        g_e = -lam * g_z2
        g_h, _, _, dd2, du2 = L.conv2d_backward(g_e, c2, self._lora("eps.conv2"))
        g_a = L.relu_backward(g_h, a)
        g_z1_eps, _, _, dd1, du1 = L.conv2d_backward(g_a, c1, self._lora("eps.conv1"))
        grads["eps.conv2.lora_down"] += dd2
        grads["eps.conv2.lora_up"] += du2
        grads["eps.conv1.lora_down"] += dd1
        grads["eps.conv1.lora_up"] += du1
        g_z1 = g_z2 + g_z1_eps
        for k, v in stc_attention_backward(g_z1, cache["att"], p).items():
            grads[k] += v
        return grads


def bridge(z, lambda_res, eps):
    """Subtractive residual correction ``z - lambda_res * eps``; ``eps`` may be a callable of ``z``."""
    e = eps(z) if callable(eps) else eps
    return z - lambda_res * e


def stc_attention(target, refs, params, ln_eps=1e-5, cache=None, return_weights=False):
    """Joint attention of target tokens over target plus reference tokens.

    Views and spatial positions are flattened into one token axis; only the
    target tokens issue queries, so the result has the target's shape. A
    residual connection adds the attended values back onto the target latent.
    """
    target = np.asarray(target, dtype=np.float64)
    if target.ndim != 4:
        raise RectifierShapeError(f"target latent must be (V, C, H, W), got {target.shape}")
    if isinstance(refs, ReferenceSet):
        refs = refs.stacked()
    C = target.shape[1]
    Xt = L.to_tokens(target)
    if refs is not None and len(refs):
        refs = np.asarray(refs, dtype=np.float64)
        if refs.ndim != 4 or refs.shape[1:] != target.shape[1:]:
            if refs.ndim == 4 and refs.shape[1] != C:
                raise RectifierShapeError(f"reference channels {refs.shape[1]} != target channels {C}")
            raise RectifierShapeError(f"reference shape {refs.shape[1:]} != target shape {target.shape[1:]}")
        Xall = np.concatenate([Xt, L.to_tokens(refs)], axis=0)
    else:
        Xall = Xt
    nt = len(Xt)
    Y, ln_cache = L.layer_norm(Xall, params["attn.ln_g"], params["attn.ln_b"], ln_eps)
    Q = Y[:nt] @ params["attn.wq"]
    K = Y @ params["attn.wk"]
    Vv = Y @ params["attn.wv"]
    scale = 1.0 / np.sqrt(C)
    A = L.softmax((Q @ K.T) * scale)
    O = A @ Vv
    out = Xt + O @ params["attn.wo"]
    if cache is not None:
        cache.update(Y=Y, ln=ln_cache, Q=Q, K=K, V=Vv, A=A, O=O, nt=nt, scale=scale)
    res = L.from_tokens(out, target.shape)
    return (res, A) if return_weights else res


def stc_attention_backward(g_out, cache, params):
    """Parameter gradients of the attention block (references are constants)."""
    G = L.to_tokens(g_out)
    Y, A, O, Q, K, Vv = cache["Y"], cache["A"], cache["O"], cache["Q"], cache["K"], cache["V"]
    nt, scale = cache["nt"], cache["scale"]
    grads = {"attn.wo": O.T @ G}
    dO = G @ params["attn.wo"].T
    dA = dO @ Vv.T
    dV = A.T @ dO
    dS = A * (dA - np.sum(dA * A, axis=1, keepdims=True)) * scale
    dQ = dS @ K
    dK = dS.T @ Q
    grads["attn.wq"] = Y[:nt].T @ dQ
    grads["attn.wk"] = Y.T @ dK
    grads["attn.wv"] = Y.T @ dV
    dY = dK @ params["attn.wk"].T + dV @ params["attn.wv"].T
    dY[:nt] += dQ @ params["attn.wq"].T
    _, dg, db = L.layer_norm_backward(dY, cache["ln"], params["attn.ln_g"])
    grads["attn.ln_g"] = dg
    grads["attn.ln_b"] = db
    return grads


def rectify(images, refs=None, net=None, lambda_res=1.0):
    """Rectify an image (H, W, 3) or a short sequence (V, H, W, 3) in one forward pass."""
    if net is None:
        raise RectifierShapeError("rectify needs a network")
    images = np.asarray(images, dtype=np.float64)
    single = images.ndim == 3
    x = to_nchw(images)
    if isinstance(refs, ReferenceSet):
        refs = refs.stacked()
    if x.shape[0] == 1:
        out = net.forward(x, refs, lambda_res)
    else:
        out = np.concatenate([net.forward(x[i:i + 1], refs, lambda_res) for i in range(x.shape[0])])
    out = to_nhwc(out)
    return out[0] if single else out
