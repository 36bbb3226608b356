"""Pure-numpy rasterisation kernels with the same contract as the numba ones.

Forward loops over depth-sorted splats and composites each splat's bounding
box at once; backward loops over tape layers back to front, vectorised over
pixels.
"""
import numpy as np


def rasterize_forward(mean2d, conic, alpha, colors, depth, bbox, tile_offsets, tile_splats,
                      height, width, tile_size, background, alpha_cutoff, min_transmittance, capacity):
    color = np.zeros((height, width, 3))
    dsum = np.zeros((height, width))
    T = np.ones((height, width))
    done = np.zeros((height, width), dtype=bool)
    count = np.zeros((height, width), dtype=np.int32)
    tape_idx = np.empty((height, width, capacity), dtype=np.int32)
    tape_a = np.empty((height, width, capacity))
    tape_T = np.empty((height, width, capacity))
    for s in range(len(alpha)):
        x0, y0, x1, y1 = (int(v) for v in bbox[s])
        if x1 < x0 or y1 < y0:
            continue
        ys, xs = np.mgrid[y0:y1 + 1, x0:x1 + 1]
        dx = xs - mean2d[s, 0]
        dy = ys - mean2d[s, 1]
        power = -0.5 * (conic[s, 0] * dx * dx + conic[s, 2] * dy * dy) - conic[s, 1] * dx * dy
        a = alpha[s] * np.exp(power)
        region = (slice(y0, y1 + 1), slice(x0, x1 + 1))
        cnt = count[region]
        act = (a >= alpha_cutoff) & ~done[region]
        # a full tape stops compositing for that pixel
        full = act & (cnt >= capacity)
        done[region] |= full
        act &= ~full
        if not act.any():
            continue
        yy, xx = ys[act], xs[act]
        k = cnt[act]
        aa = a[act]
        Tb = T[yy, xx]
        tape_idx[yy, xx, k] = s
        tape_a[yy, xx, k] = aa
        tape_T[yy, xx, k] = Tb
        count[yy, xx] = k + 1
        w = aa * Tb
        color[yy, xx] += colors[s][None, :] * w[:, None]
        dsum[yy, xx] += depth[s] * w
        Tn = Tb * (1.0 - aa)
        T[yy, xx] = Tn
        done[yy, xx] |= Tn < min_transmittance
    color += T[..., None] * np.asarray(background)[None, None, :]
    alpha_buf = 1.0 - T
    depth_buf = np.zeros((height, width))
    ok = (count > 0) & (T < 1.0)
    depth_buf[ok] = dsum[ok] / (1.0 - T[ok])
    return color, alpha_buf, depth_buf, count, tape_idx, tape_a, tape_T


def rasterize_backward(mean2d, conic, colors, background, count, tape_idx, tape_a, tape_T,
                       loss_grad, tile_size, num_splats):
    height, width = count.shape
    out = np.zeros((num_splats, 9))
    B = np.broadcast_to(np.asarray(background, dtype=np.float64), (height, width, 3)).copy()
    max_count = int(count.max()) if count.size else 0
    ys, xs = np.mgrid[0:height, 0:width]
    for k in range(max_count - 1, -1, -1):
        sel = count > k
        yy, xx = ys[sel], xs[sel]
        s = tape_idx[yy, xx, k]
        a = tape_a[yy, xx, k]
        T = tape_T[yy, xx, k]
        g = loss_grad[yy, xx]
        col = colors[s]
        Bp = B[yy, xx]
        dL_da = T * np.sum(g * (col - Bp), axis=1)
        w = a * T
        B[yy, xx] = col * a[:, None] + (1.0 - a[:, None]) * Bp
        dx = xx - mean2d[s, 0]
        dy = yy - mean2d[s, 1]
        c = conic[s]
        power = -0.5 * (c[:, 0] * dx * dx + c[:, 2] * dy * dy) - c[:, 1] * dx * dy
        dL_dp = dL_da * a
        cols = (
            dL_dp * (c[:, 0] * dx + c[:, 1] * dy),
            dL_dp * (c[:, 1] * dx + c[:, 2] * dy),
            -0.5 * dL_dp * dx * dx,
            -dL_dp * dx * dy,
            -0.5 * dL_dp * dy * dy,
            dL_da * np.exp(power),
            g[:, 0] * w,
            g[:, 1] * w,
            g[:, 2] * w,
        )
        for j, vals in enumerate(cols):
            out[:, j] += np.bincount(s, weights=vals, minlength=num_splats)
    return out
