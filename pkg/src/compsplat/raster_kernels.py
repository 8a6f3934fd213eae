"""Numba compositing kernels for the rasterizer hot loop.

Per-tile sequential front-to-back compositing with early termination once the
transmittance drops below the cutoff. Inputs are pair-major (one row per
(tile, gaussian) pair) so the inner loops walk memory sequentially. Tiles are
independent, so the parallel loop is race-free and results are bitwise
deterministic for any thread count. Accumulation happens in float64.
"""

import numpy as np
from numba import njit, prange


@njit(parallel=True, fastmath=False, cache=True)
def composite_forward(mean_p, conic_p, opacity_p, color_p,
                      tile_starts, tile_ends, tiles_x, tile,
                      height, width, t_cutoff, alpha_max,
                      out_rgb, out_alpha, n_contrib):
    n_tiles = tile_starts.shape[0]
    for t in prange(n_tiles):
        s, e = tile_starts[t], tile_ends[t]
        if e <= s:
            continue
        y0 = (t // tiles_x) * tile
        x0 = (t % tiles_x) * tile
        for py in range(y0, min(y0 + tile, height)):
            fy = py + 0.5
            for px in range(x0, min(x0 + tile, width)):
                fx = px + 0.5
                trans = 1.0
                r = 0.0
                g = 0.0
                b = 0.0
                cnt = 0
                for p in range(s, e):
                    if trans < t_cutoff:
                        break
                    dx = fx - mean_p[p, 0]
                    dy = fy - mean_p[p, 1]
                    q = conic_p[p, 0] * dx * dx + 2.0 * conic_p[p, 1] * dx * dy + conic_p[p, 2] * dy * dy
                    alpha = opacity_p[p] * np.exp(-0.5 * q)
                    if alpha > alpha_max:
                        alpha = alpha_max
                    w = alpha * trans
                    r += w * color_p[p, 0]
                    g += w * color_p[p, 1]
                    b += w * color_p[p, 2]
                    trans *= 1.0 - alpha
                    cnt += 1
                out_rgb[py, px, 0] = r
                out_rgb[py, px, 1] = g
                out_rgb[py, px, 2] = b
                out_alpha[py, px] = 1.0 - trans
                n_contrib[py, px] = cnt


@njit(parallel=True, fastmath=False, cache=True)
def composite_backward(mean_p, conic_p, opacity_p, color_p,
                       tile_starts, tile_ends, tiles_x, tile,
                       height, width, t_cutoff, alpha_max,
                       grad_rgb, grad_alpha,
                       pair_du, pair_dconic, pair_dop, pair_dcol):
    """Per-pair gradients wrt mean2d, conic, activated opacity and color.

    Each tile owns a disjoint slice of the pair arrays, so parallel tiles
    never write to the same slot.
    """
    n_tiles = tile_starts.shape[0]
    for t in prange(n_tiles):
        s, e = tile_starts[t], tile_ends[t]
        if e <= s:
            continue
        y0 = (t // tiles_x) * tile
        x0 = (t % tiles_x) * tile
        for py in range(y0, min(y0 + tile, height)):
            fy = py + 0.5
            for px in range(x0, min(x0 + tile, width)):
                fx = px + 0.5
                # forward replay: final transmittance and processed count
                trans = 1.0
                cnt = 0
                for p in range(s, e):
                    if trans < t_cutoff:
                        break
                    dx = fx - mean_p[p, 0]
                    dy = fy - mean_p[p, 1]
                    q = conic_p[p, 0] * dx * dx + 2.0 * conic_p[p, 1] * dx * dy + conic_p[p, 2] * dy * dy
                    alpha = opacity_p[p] * np.exp(-0.5 * q)
                    if alpha > alpha_max:
                        alpha = alpha_max
                    trans *= 1.0 - alpha
                    cnt += 1
                t_final = trans
                gr = grad_rgb[py, px, 0]
                gg = grad_rgb[py, px, 1]
                gb = grad_rgb[py, px, 2]
                ga = grad_alpha[py, px]
                if gr == 0.0 and gg == 0.0 and gb == 0.0 and ga == 0.0:
                    continue
                # back-to-front: recover T_i by dividing the running product
                t_run = t_final
                suffix = 0.0
                for k in range(cnt - 1, -1, -1):
                    p = s + k
                    dx = fx - mean_p[p, 0]
                    dy = fy - mean_p[p, 1]
                    q = conic_p[p, 0] * dx * dx + 2.0 * conic_p[p, 1] * dx * dy + conic_p[p, 2] * dy * dy
                    gval = np.exp(-0.5 * q)
                    alpha = opacity_p[p] * gval
                    clamped = False
                    if alpha > alpha_max:
                        alpha = alpha_max
                        clamped = True
                    one_minus = 1.0 - alpha
                    t_i = t_run / one_minus
                    t_run = t_i
                    w = alpha * t_i
                    gdotc = gr * color_p[p, 0] + gg * color_p[p, 1] + gb * color_p[p, 2]
                    # color gradient stays live when alpha is clamped
                    pair_dcol[p, 0] += w * gr
                    pair_dcol[p, 1] += w * gg
                    pair_dcol[p, 2] += w * gb
                    d_alpha = gdotc * t_i - suffix / one_minus + ga * t_final / one_minus
                    suffix += w * gdotc
                    if clamped:
                        continue
                    pair_dop[p] += d_alpha * gval
                    d_q = d_alpha * opacity_p[p] * gval * (-0.5)
                    pair_du[p, 0] += d_q * (-2.0) * (conic_p[p, 0] * dx + conic_p[p, 1] * dy)
                    pair_du[p, 1] += d_q * (-2.0) * (conic_p[p, 1] * dx + conic_p[p, 2] * dy)
                    pair_dconic[p, 0] += d_q * dx * dx
                    pair_dconic[p, 1] += d_q * dx * dy
                    pair_dconic[p, 2] += d_q * dy * dy
