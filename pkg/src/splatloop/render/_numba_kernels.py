"""Numba rasterisation kernels (tile-parallel forward and backward)."""
import numpy as np

from .._accel import njit, prange


@njit(cache=True, parallel=True)
def rasterize_forward(mean2d, conic, alpha, colors, depth, bbox, tile_offsets, tile_splats,
                      height, width, tile_size, background, alpha_cutoff, min_transmittance, capacity):
    color = np.empty((height, width, 3))
    alpha_buf = np.empty((height, width))
    depth_buf = np.zeros((height, width))
    count = np.zeros((height, width), dtype=np.int32)
    tape_idx = np.empty((height, width, capacity), dtype=np.int32)
    tape_a = np.empty((height, width, capacity))
    tape_T = np.empty((height, width, capacity))
    tiles_x = (width + tile_size - 1) // tile_size
    tiles_y = (height + tile_size - 1) // tile_size
    for tile in prange(tiles_x * tiles_y):
        ty = tile // tiles_x
        tx = tile - ty * tiles_x
        y0 = ty * tile_size
        x0 = tx * tile_size
        y1 = min(y0 + tile_size, height)
        x1 = min(x0 + tile_size, width)
        start = tile_offsets[tile]
        stop = tile_offsets[tile + 1]
        for py in range(y0, y1):
            for px in range(x0, x1):
                T = 1.0
                c0 = 0.0
                c1 = 0.0
                c2 = 0.0
                dsum = 0.0
                n = 0
                for j in range(start, stop):
                    s = tile_splats[j]
                    if px < bbox[s, 0] or px > bbox[s, 2] or py < bbox[s, 1] or py > bbox[s, 3]:
                        continue
                    dx = px - mean2d[s, 0]
                    dy = py - mean2d[s, 1]
                    power = -0.5 * (conic[s, 0] * dx * dx + conic[s, 2] * dy * dy) - conic[s, 1] * dx * dy
                    a = alpha[s] * np.exp(power)
                    if a < alpha_cutoff:
                        continue
                    if n >= capacity:
                        break
                    tape_idx[py, px, n] = s
                    tape_a[py, px, n] = a
                    tape_T[py, px, n] = T
                    n += 1
                    w = a * T
                    c0 += colors[s, 0] * w
                    c1 += colors[s, 1] * w
                    c2 += colors[s, 2] * w
                    dsum += depth[s] * w
                    T = T * (1.0 - a)
                    if T < min_transmittance:
                        break
                color[py, px, 0] = c0 + T * background[0]
                color[py, px, 1] = c1 + T * background[1]
                color[py, px, 2] = c2 + T * background[2]
                alpha_buf[py, px] = 1.0 - T
                if n > 0 and T < 1.0:
                    depth_buf[py, px] = dsum / (1.0 - T)
                count[py, px] = n
    return color, alpha_buf, depth_buf, count, tape_idx, tape_a, tape_T


@njit(cache=True, parallel=True)
def rasterize_backward(mean2d, conic, colors, background, count, tape_idx, tape_a, tape_T,
                       loss_grad, tile_size, num_splats):
    """Per-splat gradients (mean2d[2], conic[3], alpha[1], color[3]) as an (M, 9) array.

    Each tile accumulates into its own buffer; buffers are merged in tile order,
    so the result is independent of thread scheduling.
    """
    height, width = count.shape
    tiles_x = (width + tile_size - 1) // tile_size
    tiles_y = (height + tile_size - 1) // tile_size
    n_tiles = tiles_x * tiles_y
    local = np.zeros((n_tiles, num_splats, 9))
    for tile in prange(n_tiles):
        ty = tile // tiles_x
        tx = tile - ty * tiles_x
        y0 = ty * tile_size
        x0 = tx * tile_size
        y1 = min(y0 + tile_size, height)
        x1 = min(x0 + tile_size, width)
        buf = local[tile]
        for py in range(y0, y1):
            for px in range(x0, x1):
                g0 = loss_grad[py, px, 0]
                g1 = loss_grad[py, px, 1]
                g2 = loss_grad[py, px, 2]
                b0 = background[0]
                b1 = background[1]
                b2 = background[2]
                for k in range(count[py, px] - 1, -1, -1):
                    s = tape_idx[py, px, k]
                    a = tape_a[py, px, k]
                    T = tape_T[py, px, k]
                    col0 = colors[s, 0]
                    col1 = colors[s, 1]
                    col2 = colors[s, 2]
                    dL_da = T * (g0 * (col0 - b0) + g1 * (col1 - b1) + g2 * (col2 - b2))
                    w = a * T
                    buf[s, 6] += g0 * w
                    buf[s, 7] += g1 * w
                    buf[s, 8] += g2 * w
                    b0 = col0 * a + (1.0 - a) * b0
                    b1 = col1 * a + (1.0 - a) * b1
                    b2 = col2 * a + (1.0 - a) * b2
                    dx = px - mean2d[s, 0]
                    dy = py - mean2d[s, 1]
                    power = -0.5 * (conic[s, 0] * dx * dx + conic[s, 2] * dy * dy) - conic[s, 1] * dx * dy
                    buf[s, 5] += dL_da * np.exp(power)
                    dL_dp = dL_da * a
                    buf[s, 0] += dL_dp * (conic[s, 0] * dx + conic[s, 1] * dy)
                    buf[s, 1] += dL_dp * (conic[s, 1] * dx + conic[s, 2] * dy)
                    buf[s, 2] += -0.5 * dL_dp * dx * dx
                    buf[s, 3] += -dL_dp * dx * dy
                    buf[s, 4] += -0.5 * dL_dp * dy * dy
    out = np.zeros((num_splats, 9))
    for tile in range(n_tiles):
        out += local[tile]
    return out
