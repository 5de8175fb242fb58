# Per-tile alpha compositing kernels. All arrays are float64 / int64.
#
# A splat contributes to a pixel only inside its 3-sigma ellipse (Mahalanobis
# distance^2 <= 9). The ellipse lies inside the square of half-width
# 3*sqrt(lambda_max) used for tile binning, so results do not depend on tiling.
import numpy as np
from numba import config, njit, prange

# prefer OpenMP/workqueue: the bundled TBB may be too old and only produces warnings
config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

ALPHA_MAX = 0.99
T_MIN = 1e-4
POWER_MIN = -4.5


@njit(parallel=True, cache=True)
def composite_forward(mean2d, conic, opacity, colors, features, background,
                      entry_gauss, tile_ranges, width, height, tile_size):
    n_feat = features.shape[1]
    out_color = np.empty((height, width, 3))
    out_feat = np.zeros((height, width, n_feat))
    out_alpha = np.zeros((height, width))
    final_T = np.ones((height, width))
    n_contrib = np.zeros((height, width), dtype=np.int64)
    tiles_x = (width + tile_size - 1) // tile_size
    n_tiles = tile_ranges.shape[0]
    for tile in prange(n_tiles):
        ty = tile // tiles_x
        tx = tile - ty * tiles_x
        start = tile_ranges[tile, 0]
        end = tile_ranges[tile, 1]
        for py in range(ty * tile_size, min((ty + 1) * tile_size, height)):
            for px in range(tx * tile_size, min((tx + 1) * tile_size, width)):
                T = 1.0
                acc = 0.0
                c0 = 0.0
                c1 = 0.0
                c2 = 0.0
                last = 0
                for k in range(start, end):
                    g = entry_gauss[k]
                    dx = mean2d[g, 0] - px
                    dy = mean2d[g, 1] - py
                    power = -0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy) - conic[g, 1] * dx * dy
                    if power > 0.0 or power < POWER_MIN:
                        continue
                    alpha = min(ALPHA_MAX, opacity[g] * np.exp(power))
                    w = alpha * T
                    c0 += colors[g, 0] * w
                    c1 += colors[g, 1] * w
                    c2 += colors[g, 2] * w
                    for f in range(n_feat):
                        out_feat[py, px, f] += features[g, f] * w
                    acc += w
                    T = T * (1.0 - alpha)
                    last = k - start + 1
                    if T < T_MIN:
                        break
                out_color[py, px, 0] = c0 + T * background[0]
                out_color[py, px, 1] = c1 + T * background[1]
                out_color[py, px, 2] = c2 + T * background[2]
                out_alpha[py, px] = acc
                final_T[py, px] = T
                n_contrib[py, px] = last
    return out_color, out_feat, out_alpha, final_T, n_contrib


@njit(parallel=True, cache=True)
def composite_backward(mean2d, conic, opacity, colors, features, background,
                       entry_gauss, tile_ranges, width, height, tile_size,
                       final_T, n_contrib, grad_color, grad_feat, grad_alpha):
    """Reverse-mode gradients, replaying each pixel's splat list back to front.

    Gradients are written per tile-list entry, then reduced in entry order so
    the result is independent of how tiles are scheduled.
    """
    n_feat = features.shape[1]
    n_entries = entry_gauss.shape[0]
    e_mean = np.zeros((n_entries, 2))
    e_conic = np.zeros((n_entries, 3))
    e_opac = np.zeros(n_entries)
    e_color = np.zeros((n_entries, 3))
    e_feat = np.zeros((n_entries, n_feat))
    tiles_x = (width + tile_size - 1) // tile_size
    n_tiles = tile_ranges.shape[0]
    for tile in prange(n_tiles):
        ty = tile // tiles_x
        tx = tile - ty * tiles_x
        start = tile_ranges[tile, 0]
        acc_f = np.zeros(n_feat)
        for py in range(ty * tile_size, min((ty + 1) * tile_size, height)):
            for px in range(tx * tile_size, min((tx + 1) * tile_size, width)):
                T = final_T[py, px]
                T_final = T
                gc0 = grad_color[py, px, 0]
                gc1 = grad_color[py, px, 1]
                gc2 = grad_color[py, px, 2]
                ga = grad_alpha[py, px]
                bg_dot = T_final * (background[0] * gc0 + background[1] * gc1 + background[2] * gc2)
                # sums over splats behind the current one
                acc_c = 0.0
                acc_a = 0.0
                for f in range(n_feat):
                    acc_f[f] = 0.0
                for k in range(start + n_contrib[py, px] - 1, start - 1, -1):
                    g = entry_gauss[k]
                    dx = mean2d[g, 0] - px
                    dy = mean2d[g, 1] - py
                    power = -0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy) - conic[g, 1] * dx * dy
                    if power > 0.0 or power < POWER_MIN:
                        continue
                    G = np.exp(power)
                    raw = opacity[g] * G
                    alpha = min(ALPHA_MAX, raw)
                    one_minus = 1.0 - alpha
                    T = T / one_minus
                    w = alpha * T
                    cdot = colors[g, 0] * gc0 + colors[g, 1] * gc1 + colors[g, 2] * gc2
                    fdot = 0.0
                    back_f = 0.0
                    for f in range(n_feat):
                        gf = grad_feat[py, px, f]
                        e_feat[k, f] += w * gf
                        fdot += features[g, f] * gf
                        back_f += acc_f[f] * gf
                    e_color[k, 0] += w * gc0
                    e_color[k, 1] += w * gc1
                    e_color[k, 2] += w * gc2
                    d_alpha = (T * cdot - (acc_c + bg_dot) / one_minus
                               + T * fdot - back_f / one_minus
                               + ga * (T - acc_a / one_minus))
                    acc_c += cdot * w
                    acc_a += w
                    for f in range(n_feat):
                        acc_f[f] += features[g, f] * w
                    if raw >= ALPHA_MAX:
                        continue
                    e_opac[k] += d_alpha * G
                    d_power = d_alpha * raw
                    e_mean[k, 0] += -d_power * (conic[g, 0] * dx + conic[g, 1] * dy)
                    e_mean[k, 1] += -d_power * (conic[g, 2] * dy + conic[g, 1] * dx)
                    e_conic[k, 0] += -0.5 * d_power * dx * dx
                    e_conic[k, 1] += -d_power * dx * dy
                    e_conic[k, 2] += -0.5 * d_power * dy * dy

    n_gauss = mean2d.shape[0]
    g_mean = np.zeros((n_gauss, 2))
    g_conic = np.zeros((n_gauss, 3))
    g_opac = np.zeros(n_gauss)
    g_color = np.zeros((n_gauss, 3))
    g_feat = np.zeros((n_gauss, n_feat))
    for k in range(n_entries):
        g = entry_gauss[k]
        g_mean[g, 0] += e_mean[k, 0]
        g_mean[g, 1] += e_mean[k, 1]
        for j in range(3):
            g_conic[g, j] += e_conic[k, j]
            g_color[g, j] += e_color[k, j]
        g_opac[g] += e_opac[k]
        for f in range(n_feat):
            g_feat[g, f] += e_feat[k, f]
    return g_mean, g_conic, g_opac, g_color, g_feat
