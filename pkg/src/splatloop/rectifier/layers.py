"""Layer primitives with explicit backward passes. Tensors are (V, C, H, W)."""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _im2col(x, k):
    V, C, H, W = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # V, C, H, W, k, k
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(V * H * W, C * k * k)


def _col2im(cols, shape, k):
    V, C, H, W = shape
    p = k // 2
    cols = cols.reshape(V, H, W, C, k, k)
    out = np.zeros((V, C, H + 2 * p, W + 2 * p))
    for dy in range(k):
        for dx in range(k):
            out[:, :, dy:dy + H, dx:dx + W] += cols[:, :, :, :, dy, dx].transpose(0, 3, 1, 2)
    return out[:, :, p:p + H, p:p + W] if p else out


def effective_weight(weight, lora=None):
    """Weight matrix in (in_features, out_features) layout with an optional low-rank delta."""
    cout = weight.shape[0]
    Wm = weight.reshape(cout, -1).T
    if lora is not None:
        down, up, scaling = lora
        Wm = Wm + scaling * (down @ up)
    return Wm


def conv2d(x, weight, bias=None, lora=None):
    """Same-padded stride-1 convolution; ``weight`` is (Cout, Cin, k, k)."""
    V, C, H, W = x.shape
    cout, _, k, _ = weight.shape
    cols = _im2col(x, k)
    Wm = effective_weight(weight, lora)
    out = cols @ Wm
    if bias is not None:
        out = out + bias
    out = out.reshape(V, H, W, cout).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), (cols, x.shape, Wm, k)


def conv2d_backward(g, cache, lora=None, need_input=True):
    """Returns (dx, dW_matrix (in, out), dbias, d_down, d_up)."""
    cols, shape, Wm, k = cache
    V, cout, H, W = g.shape
    gm = g.transpose(0, 2, 3, 1).reshape(V * H * W, cout)
    dWm = cols.T @ gm
    db = gm.sum(axis=0)
    dx = _col2im(gm @ Wm.T, shape, k) if need_input else None
    d_down = d_up = None
    if lora is not None:
        down, up, scaling = lora
        d_down = scaling * dWm @ up.T
        d_up = scaling * down.T @ dWm
    return dx, dWm, db, d_down, d_up


def weight_grad_to_conv(dWm, weight_shape):
    cout = weight_shape[0]
    return dWm.T.reshape(weight_shape)


def space_to_depth(x, f):
    V, C, H, W = x.shape
    y = x.reshape(V, C, H // f, f, W // f, f).transpose(0, 1, 3, 5, 2, 4)
    return np.ascontiguousarray(y).reshape(V, C * f * f, H // f, W // f)


def depth_to_space(x, f):
    V, C, H, W = x.shape
    y = x.reshape(V, C // (f * f), f, f, H, W).transpose(0, 1, 4, 2, 5, 3)
    return np.ascontiguousarray(y).reshape(V, C // (f * f), H * f, W * f)


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(g, x):
    return g * (x > 0)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalise rows of a (N, C) token matrix."""
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xh = xc * inv
    return xh * gain + bias, (xh, inv)


def layer_norm_backward(g, cache, gain):
    xh, inv = cache
    C = xh.shape[1]
    dgain = np.sum(g * xh, axis=0)
    dbias = g.sum(axis=0)
    gx = g * gain
    dx = inv * (gx - gx.mean(axis=1, keepdims=True) - xh * np.mean(gx * xh, axis=1, keepdims=True))
    return dx, dgain, dbias


def softmax(s):
    s = s - s.max(axis=1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=1, keepdims=True)


def to_tokens(z):
    """(V, C, H, W) -> (V*H*W, C), view-major."""
    V, C, H, W = z.shape
    return np.ascontiguousarray(z.transpose(0, 2, 3, 1)).reshape(V * H * W, C)


def from_tokens(t, shape):
    V, C, H, W = shape
    return np.ascontiguousarray(t.reshape(V, H, W, C).transpose(0, 3, 1, 2))
