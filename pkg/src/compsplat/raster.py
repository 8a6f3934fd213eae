"""Differentiable tile-based 3D Gaussian splatting rasterizer.

EWA projection of anisotropic 3D Gaussians, a global stable depth sort,
per-tile front-to-back alpha compositing with a transmittance cutoff, and a
hand-derived backward pass for every primitive attribute (position, rotation,
log-scale, opacity logit, raw color). The backward never relies on autodiff;
the torch.autograd.Function binding just wraps the manual implementation.

Conventions: camera space is x-right / y-down / z-forward, pixel (r, c) has
center (c + 0.5, r + 0.5), the 2D covariance gets a +0.3 px^2 diagonal floor
and footprints are culled at 3 sigma.
"""

from __future__ import annotations

import hashlib
import math
import os
from dataclasses import dataclass

import numpy as np
import torch

from .splats import pack_scene

try:
    from . import raster_kernels as _kernels
except ImportError:  # pragma: no cover - numba is a hard dep in practice
    _kernels = None


def _backend() -> str:
    choice = os.environ.get("COMPSPLAT_RASTER_BACKEND", "numba")
    if choice == "numba" and _kernels is None:
        return "torch"
    return choice

COV_FLOOR = 0.3          # px^2 added to the projected covariance diagonal
FOOTPRINT_SIGMA = 3.0    # cull radius in projected standard deviations
DEFAULT_TILE = 16
DEFAULT_NEAR = 0.05
T_CUTOFF = 1e-4          # stop compositing once transmittance drops below this
ALPHA_MAX = 0.9999


class CulledError(ValueError):
    """Primitive is behind the near plane or fully off-image."""


class StaleAuxError(RuntimeError):
    """Saved aux does not match the scene it was created from."""


@dataclass(frozen=True)
class Camera:
    """Pinhole camera: world-to-camera extrinsics plus pixel intrinsics."""

    extrinsics: torch.Tensor  # (4, 4) world-to-camera
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        R = self.extrinsics[:3, :3].to(torch.float64)
        err = (R @ R.T - torch.eye(3, dtype=torch.float64)).abs().max().item()
        if err > 1e-5:
            raise ValueError(f"extrinsics rotation block not orthonormal (err={err:.2e})")

    @classmethod
    def orbit(cls, yaw: float, pitch: float, radius: float,
              lookat=(0.0, -0.12, 0.0), focal_norm: float = 0.9,
              width: int = 64, height: int = 64) -> "Camera":
        """Camera on a y-up orbit looking at `lookat`; yaw/pitch in radians."""
        target = torch.tensor(lookat, dtype=torch.float64)
        eye = target + radius * torch.tensor(
            [math.sin(yaw) * math.cos(pitch), math.sin(pitch), math.cos(yaw) * math.cos(pitch)],
            dtype=torch.float64,
        )
        z = target - eye
        z = z / z.norm()
        up = torch.tensor([0.0, 1.0, 0.0], dtype=torch.float64)
        x = torch.linalg.cross(z, up)
        x = x / x.norm()
        y = torch.linalg.cross(z, x)
        w2c = torch.eye(4, dtype=torch.float64)
        w2c[:3, :3] = torch.stack([x, y, z])
        w2c[:3, 3] = -w2c[:3, :3] @ eye
        f = focal_norm * width
        return cls(extrinsics=w2c, fx=f, fy=f, cx=width / 2.0, cy=height / 2.0,
                   width=width, height=height)

    @property
    def cam_to_world(self) -> torch.Tensor:
        return torch.linalg.inv(self.extrinsics.to(torch.float64))

    def flat25(self) -> torch.Tensor:
        """EG3D-style conditioning: cam2world (16) + size-normalized K (9)."""
        k = torch.tensor(
            [
                [self.fx / self.width, 0.0, self.cx / self.width],
                [0.0, self.fy / self.width, self.cy / self.width],
                [0.0, 0.0, 1.0],
            ],
            dtype=torch.float64,
        )
        return torch.cat([self.cam_to_world.reshape(-1), k.reshape(-1)]).to(torch.float32)

    def with_resolution(self, width: int, height: int) -> "Camera":
        sx, sy = width / self.width, height / self.height
        return Camera(extrinsics=self.extrinsics, fx=self.fx * sx, fy=self.fy * sy,
                      cx=self.cx * sx, cy=self.cy * sy, width=width, height=height)


@dataclass
class RenderAux:
    """Forward-pass byproducts needed by the manual backward path."""

    n_contrib: torch.Tensor  # (H, W) visible-primitive count per pixel
    scene: object            # the scene the forward pass consumed
    camera: Camera
    options: dict
    prep: "_Prepared"
    scene_hash: str


@dataclass
class RenderOutput:
    rgb: torch.Tensor    # (H, W, 3) accumulated premultiplied color
    alpha: torch.Tensor  # (H, W) accumulated opacity
    aux: RenderAux | None = None


@dataclass
class _Prepared:
    """Projection + tile binning state shared by forward and backward."""

    keep: torch.Tensor        # (K,) indices into the input arrays, depth order
    t_cam: torch.Tensor       # (K, 3) camera-space centers
    mean2d: torch.Tensor      # (K, 2)
    conic: torch.Tensor       # (K, 2, 2) inverse 2D covariance
    cov2d: torch.Tensor       # (K, 2, 2)
    rot_w2c: torch.Tensor     # (3, 3)
    quat_n: torch.Tensor      # (K, 4) normalized quaternions
    quat_norm: torch.Tensor   # (K,)
    rotmat: torch.Tensor      # (K, 3, 3)
    sigma: torch.Tensor       # (K, 3, 3) world covariance
    opacity: torch.Tensor     # (K,) activated
    color: torch.Tensor       # (K, 3) activated
    pair_gauss: torch.Tensor  # (P,) index into kept arrays per (tile, gaussian) pair
    pair_tile: torch.Tensor   # (P,) tile id per pair
    tile_starts: torch.Tensor # (T,)
    tile_ends: torch.Tensor   # (T,)
    n_total: int
    grid: tuple               # (tiles_y, tiles_x, tile)


def _rect_min_q(mean, conic, tile_x, tile_y, tile):
    """Exact minimum of the Mahalanobis form over a tile's pixel-center rect.

    The minimum is 0 when the mean lies inside the rect, otherwise it is
    attained on one of the four edges (1-d quadratic, closed form).
    """
    A, B, C = conic[:, 0, 0], conic[:, 0, 1], conic[:, 1, 1]
    x0 = tile_x.to(mean.dtype) * tile + 0.5
    x1 = x0 + (tile - 1)
    y0 = tile_y.to(mean.dtype) * tile + 0.5
    y1 = y0 + (tile - 1)
    ux, uy = mean[:, 0], mean[:, 1]

    def q_of(dx, dy):
        return A * dx * dx + 2.0 * B * dx * dy + C * dy * dy

    def edge_x(ex):
        dx = ex - ux
        dy_star = torch.clamp(-B * dx / C, y0 - uy, y1 - uy)
        return q_of(dx, dy_star)

    def edge_y(ey):
        dy = ey - uy
        dx_star = torch.clamp(-B * dy / A, x0 - ux, x1 - ux)
        return q_of(dx_star, dy)

    qmin = torch.minimum(torch.minimum(edge_x(x0), edge_x(x1)),
                         torch.minimum(edge_y(y0), edge_y(y1)))
    inside = (ux >= x0) & (ux <= x1) & (uy >= y0) & (uy <= y1)
    return torch.where(inside, torch.zeros_like(qmin), qmin)


def _quat_to_rotmat(q: torch.Tensor) -> torch.Tensor:
    w, x, y, z = q.unbind(-1)
    return torch.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        dim=-1,
    ).reshape(*q.shape[:-1], 3, 3)


def _scene_hash(tensors) -> str:
    h = hashlib.sha256()
    for t in tensors:
        h.update(t.detach().contiguous().to(torch.float64).numpy().tobytes())
    return h.hexdigest()


def project(primitive, camera: Camera, near: float = DEFAULT_NEAR):
    """Project a single primitive; returns (mean2d, cov2d, depth).

    Raises CulledError when the center is behind the near plane or the
    3-sigma footprint misses the image entirely.
    """
    dtype = primitive.position.dtype
    w2c = camera.extrinsics.to(dtype)
    W, trans = w2c[:3, :3], w2c[:3, 3]
    t = W @ primitive.position + trans
    depth = t[2]
    if depth <= near:
        raise CulledError(f"depth {float(depth):.4f} behind near plane {near}")
    qn = primitive.rotation / primitive.rotation.norm()
    R = _quat_to_rotmat(qn)
    d = torch.exp(2.0 * primitive.log_scale)
    sigma = (R * d.unsqueeze(-2)) @ R.transpose(-1, -2)
    fx, fy = primitive.position.new_tensor(camera.fx), primitive.position.new_tensor(camera.fy)
    tz = depth
    J = torch.stack(
        [
            torch.stack([fx / tz, torch.zeros_like(tz), -fx * t[0] / tz**2]),
            torch.stack([torch.zeros_like(tz), fy / tz, -fy * t[1] / tz**2]),
        ]
    )
    M = J @ W
    cov2d = M @ sigma @ M.transpose(-1, -2)
    cov2d = cov2d + COV_FLOOR * torch.eye(2, dtype=dtype)
    mean2d = torch.stack([fx * t[0] / tz + camera.cx, fy * t[1] / tz + camera.cy])
    mid = 0.5 * (cov2d[0, 0] + cov2d[1, 1])
    lam_max = mid + torch.sqrt(torch.clamp((0.5 * (cov2d[0, 0] - cov2d[1, 1])) ** 2 + cov2d[0, 1] ** 2, min=0))
    radius = FOOTPRINT_SIGMA * torch.sqrt(lam_max)
    if (mean2d[0] + radius < 0 or mean2d[0] - radius > camera.width
            or mean2d[1] + radius < 0 or mean2d[1] - radius > camera.height):
        raise CulledError("3-sigma footprint entirely off-image")
    return mean2d, cov2d, depth


def _prepare(positions, rotations, log_scales, opacity_logits, colors,
             camera: Camera, near: float, tile: int) -> _Prepared:
    dtype = positions.dtype
    n_total = positions.shape[0]
    w2c = camera.extrinsics.to(dtype)
    rot_w2c, trans = w2c[:3, :3], w2c[:3, 3]

    t_all = positions @ rot_w2c.T + trans
    front = t_all[:, 2] > near
    idx = torch.nonzero(front, as_tuple=False).squeeze(-1)

    grid_ty = (camera.height + tile - 1) // tile
    grid_tx = (camera.width + tile - 1) // tile
    empty = _Prepared(
        keep=idx[:0], t_cam=t_all[:0], mean2d=positions.new_zeros(0, 2),
        conic=positions.new_zeros(0, 2, 2), cov2d=positions.new_zeros(0, 2, 2),
        rot_w2c=rot_w2c, quat_n=rotations[:0], quat_norm=opacity_logits[:0],
        rotmat=positions.new_zeros(0, 3, 3), sigma=positions.new_zeros(0, 3, 3),
        opacity=opacity_logits[:0], color=colors[:0],
        pair_gauss=torch.zeros(0, dtype=torch.long), pair_tile=torch.zeros(0, dtype=torch.long),
        tile_starts=torch.zeros(grid_ty * grid_tx, dtype=torch.long),
        tile_ends=torch.zeros(grid_ty * grid_tx, dtype=torch.long),
        n_total=n_total, grid=(grid_ty, grid_tx, tile),
    )
    if idx.numel() == 0:
        return empty

    t = t_all[idx]
    quat = rotations[idx]
    qnorm = quat.norm(dim=-1)
    qn = quat / qnorm.unsqueeze(-1)
    R = _quat_to_rotmat(qn)
    d = torch.exp(2.0 * log_scales[idx])
    sigma = (R * d.unsqueeze(-2)) @ R.transpose(-1, -2)

    fx, fy = camera.fx, camera.fy
    tz = t[:, 2]
    inv_z = 1.0 / tz
    J = positions.new_zeros(idx.numel(), 2, 3)
    J[:, 0, 0] = fx * inv_z
    J[:, 0, 2] = -fx * t[:, 0] * inv_z**2
    J[:, 1, 1] = fy * inv_z
    J[:, 1, 2] = -fy * t[:, 1] * inv_z**2
    M = J @ rot_w2c
    cov2d = M @ sigma @ M.transpose(-1, -2)
    cov2d[:, 0, 0] += COV_FLOOR
    cov2d[:, 1, 1] += COV_FLOOR

    mean2d = torch.stack([fx * t[:, 0] * inv_z + camera.cx, fy * t[:, 1] * inv_z + camera.cy], dim=-1)

    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    conic = torch.stack([c / det, -b / det, -b / det, a / det], dim=-1).reshape(-1, 2, 2)
    # the 3-sigma level set's axis-aligned extent is exactly +-3 sqrt(diag)
    rx = FOOTPRINT_SIGMA * torch.sqrt(a)
    ry = FOOTPRINT_SIGMA * torch.sqrt(c)

    on_image = (
        (mean2d[:, 0] + rx > 0) & (mean2d[:, 0] - rx < camera.width)
        & (mean2d[:, 1] + ry > 0) & (mean2d[:, 1] - ry < camera.height)
    )
    sub = torch.nonzero(on_image, as_tuple=False).squeeze(-1)
    if sub.numel() == 0:
        return empty

    order = torch.argsort(tz[sub], stable=True)
    sub = sub[order]

    keep = idx[sub]
    t, qn, qnorm, R, sigma = t[sub], qn[sub], qnorm[sub], R[sub], sigma[sub]
    mean2d, conic, cov2d = mean2d[sub], conic[sub], cov2d[sub]
    rx, ry = rx[sub], ry[sub]

    # tile binning: pairs are emitted in depth order, the stable sort by tile
    # id keeps front-to-back order inside each tile
    x0 = torch.clamp(torch.floor((mean2d[:, 0] - rx) / tile).long(), 0, grid_tx - 1)
    x1 = torch.clamp(torch.floor((mean2d[:, 0] + rx) / tile).long(), 0, grid_tx - 1)
    y0 = torch.clamp(torch.floor((mean2d[:, 1] - ry) / tile).long(), 0, grid_ty - 1)
    y1 = torch.clamp(torch.floor((mean2d[:, 1] + ry) / tile).long(), 0, grid_ty - 1)
    wx = x1 - x0 + 1
    counts = wx * (y1 - y0 + 1)
    pair_gauss = torch.repeat_interleave(torch.arange(keep.numel()), counts)
    offs = torch.arange(int(counts.sum())) - torch.repeat_interleave(
        torch.cumsum(counts, 0) - counts, counts)
    px = x0[pair_gauss] + offs % wx[pair_gauss]
    py = y0[pair_gauss] + offs // wx[pair_gauss]

    # drop corner tiles whose whole pixel-center rect lies outside 3 sigma
    qmin = _rect_min_q(mean2d[pair_gauss], conic[pair_gauss], px, py, tile)
    inside = qmin <= FOOTPRINT_SIGMA**2 + 1e-6
    pair_gauss, px, py = pair_gauss[inside], px[inside], py[inside]
    if pair_gauss.numel() == 0:
        return _Prepared(
            keep=keep, t_cam=t, mean2d=mean2d, conic=conic, cov2d=cov2d,
            rot_w2c=rot_w2c, quat_n=qn, quat_norm=qnorm, rotmat=R, sigma=sigma,
            opacity=torch.sigmoid(opacity_logits[keep]), color=torch.sigmoid(colors[keep]),
            pair_gauss=pair_gauss, pair_tile=pair_gauss.clone(),
            tile_starts=empty.tile_starts, tile_ends=empty.tile_ends,
            n_total=n_total, grid=(grid_ty, grid_tx, tile),
        )

    tile_id = py * grid_tx + px
    tile_order = torch.argsort(tile_id, stable=True)
    pair_gauss = pair_gauss[tile_order]
    pair_tile = tile_id[tile_order]
    counts_t = torch.bincount(pair_tile, minlength=grid_ty * grid_tx)
    tile_ends = torch.cumsum(counts_t, 0)
    tile_starts = tile_ends - counts_t

    return _Prepared(
        keep=keep, t_cam=t, mean2d=mean2d, conic=conic, cov2d=cov2d,
        rot_w2c=rot_w2c, quat_n=qn, quat_norm=qnorm, rotmat=R, sigma=sigma,
        opacity=torch.sigmoid(opacity_logits[keep]), color=torch.sigmoid(colors[keep]),
        pair_gauss=pair_gauss, pair_tile=pair_tile,
        tile_starts=tile_starts, tile_ends=tile_ends,
        n_total=n_total, grid=(grid_ty, grid_tx, tile),
    )


def _pair_geometry(prep: _Prepared, camera: Camera, dtype):
    """Per (tile, gaussian) pair alpha/transmittance over the tile's pixels."""
    ty, tx, tile = prep.grid
    P = tile * tile
    pg, pt = prep.pair_gauss, prep.pair_tile
    local = torch.arange(P)
    lx, ly = local % tile, local // tile
    colidx = (pt % tx).unsqueeze(1) * tile + lx.unsqueeze(0)
    rowidx = (pt // tx).unsqueeze(1) * tile + ly.unsqueeze(0)
    inb = (colidx < camera.width) & (rowidx < camera.height)
    px = colidx.to(dtype) + 0.5
    pyc = rowidx.to(dtype) + 0.5

    mean = prep.mean2d[pg]
    dx = px - mean[:, 0:1]
    dy = pyc - mean[:, 1:2]
    con = prep.conic[pg]
    A, B, C = con[:, 0, 0].unsqueeze(1), con[:, 0, 1].unsqueeze(1), con[:, 1, 1].unsqueeze(1)
    q = A * dx * dx + 2.0 * B * dx * dy + C * dy * dy
    g = torch.exp(-0.5 * q)
    alpha_raw = prep.opacity[pg].unsqueeze(1) * g
    alpha = torch.clamp(alpha_raw, max=ALPHA_MAX) * inb.to(dtype)
    logom = torch.log1p(-alpha)

    zeros = alpha.new_zeros(1, P)
    cs = torch.cat([zeros, torch.cumsum(logom, dim=0)], dim=0)
    log_t = cs[:-1] - cs[prep.tile_starts[pt]]
    vis = log_t >= math.log(T_CUTOFF)
    trans = torch.exp(log_t)
    weight = alpha * trans * vis.to(dtype)
    return dict(dx=dx, dy=dy, q=q, g=g, alpha_raw=alpha_raw, alpha=alpha,
                logom=logom, trans=trans, vis=vis, weight=weight, inb=inb, P=P)


def _segment_sums(values: torch.Tensor, starts: torch.Tensor, ends: torch.Tensor) -> torch.Tensor:
    """Sum (pairs, ...) values over per-tile segments -> (tiles, ...)."""
    z = torch.cat([values.new_zeros((1,) + values.shape[1:]), torch.cumsum(values, dim=0)], dim=0)
    return z[ends] - z[starts]


def _tiles_to_image(tiles: torch.Tensor, grid, height, width):
    ty, tx, tile = grid
    chans = tiles.shape[2:]
    img = tiles.reshape(ty, tx, tile, tile, *chans).permute(0, 2, 1, 3, *range(4, 4 + len(chans)))
    img = img.reshape(ty * tile, tx * tile, *chans)
    return img[:height, :width]


def _image_to_tiles(img: torch.Tensor, grid):
    ty, tx, tile = grid
    chans = img.shape[2:]
    pad_h, pad_w = ty * tile - img.shape[0], tx * tile - img.shape[1]
    if pad_h or pad_w:
        padded = img.new_zeros(ty * tile, tx * tile, *chans)
        padded[: img.shape[0], : img.shape[1]] = img
        img = padded
    img = img.reshape(ty, tile, tx, tile, *chans).permute(0, 2, 1, 3, *range(4, 4 + len(chans)))
    return img.reshape(ty * tx, tile * tile, *chans)


def _kernel_inputs(prep: _Prepared):
    pg = prep.pair_gauss
    conic = prep.conic[pg]
    conic3 = torch.stack([conic[:, 0, 0], conic[:, 0, 1], conic[:, 1, 1]], dim=-1)
    return (
        np.ascontiguousarray(prep.mean2d[pg].numpy()),
        np.ascontiguousarray(conic3.numpy()),
        np.ascontiguousarray(prep.opacity[pg].numpy()),
        np.ascontiguousarray(prep.color[pg].numpy()),
        np.ascontiguousarray(prep.tile_starts.numpy()),
        np.ascontiguousarray(prep.tile_ends.numpy()),
    )


def _raster_forward(positions, rotations, log_scales, opacity_logits, colors,
                    camera: Camera, near: float, tile: int):
    prep = _prepare(positions, rotations, log_scales, opacity_logits, colors, camera, near, tile)
    dtype = positions.dtype
    H, W = camera.height, camera.width
    if prep.pair_gauss.numel() == 0:
        rgb = positions.new_zeros(H, W, 3)
        alpha = positions.new_zeros(H, W)
        return rgb, alpha, prep, torch.zeros(H, W, dtype=torch.int32)

    if _backend() == "numba":
        _, tx, _ = prep.grid
        out_rgb = np.zeros((H, W, 3), dtype=np.float64)
        out_alpha = np.zeros((H, W), dtype=np.float64)
        n_contrib = np.zeros((H, W), dtype=np.int32)
        _kernels.composite_forward(
            *_kernel_inputs(prep), tx, tile, H, W, T_CUTOFF, ALPHA_MAX,
            out_rgb, out_alpha, n_contrib)
        return (torch.from_numpy(out_rgb).to(dtype), torch.from_numpy(out_alpha).to(dtype),
                prep, torch.from_numpy(n_contrib))

    geo = _pair_geometry(prep, camera, dtype)
    col = prep.color[prep.pair_gauss]
    contrib = geo["weight"].unsqueeze(-1) * col.unsqueeze(1)
    rgb_tiles = _segment_sums(contrib, prep.tile_starts, prep.tile_ends)
    log_t_final = _segment_sums(geo["logom"] * geo["vis"].to(dtype), prep.tile_starts, prep.tile_ends)
    alpha_tiles = 1.0 - torch.exp(log_t_final)
    n_tiles = _segment_sums(geo["vis"].to(torch.int32), prep.tile_starts, prep.tile_ends)

    rgb = _tiles_to_image(rgb_tiles, prep.grid, H, W)
    alpha = _tiles_to_image(alpha_tiles, prep.grid, H, W)
    n_contrib = _tiles_to_image(n_tiles, prep.grid, H, W)
    return rgb, alpha, prep, n_contrib


def _pair_grads_torch(grad_rgb, grad_alpha, camera, prep: _Prepared, dtype):
    pg, pt = prep.pair_gauss, prep.pair_tile
    geo = _pair_geometry(prep, camera, dtype)
    grad_rgb_t = _image_to_tiles(grad_rgb.to(dtype), prep.grid)      # (T, P, 3)
    grad_alpha_t = _image_to_tiles(grad_alpha.to(dtype), prep.grid)  # (T, P)

    col = prep.color[pg]
    g_rgb = grad_rgb_t[pt]                                   # (pairs, P, 3)
    gdotc = (g_rgb * col.unsqueeze(1)).sum(-1)               # (pairs, P)
    s = geo["weight"] * gdotc
    z = torch.cat([s.new_zeros(1, geo["P"]), torch.cumsum(s, dim=0)], dim=0)
    suffix = z[prep.tile_ends[pt]] - z[1:]

    one_minus = 1.0 - geo["alpha"]
    log_t_final = _segment_sums(geo["logom"] * geo["vis"].to(dtype), prep.tile_starts, prep.tile_ends)
    t_final = torch.exp(log_t_final)[pt]                     # (pairs, P)

    visf = geo["vis"].to(dtype)
    d_alpha = visf * (gdotc * geo["trans"] - suffix / one_minus)
    d_alpha = d_alpha + visf * grad_alpha_t[pt] * t_final / one_minus
    # clamp at ALPHA_MAX and out-of-bounds pixels contribute no gradient
    live = (geo["alpha_raw"] <= ALPHA_MAX) & geo["inb"]
    d_alpha = d_alpha * live.to(dtype)

    op = prep.opacity[pg].unsqueeze(1)
    d_opacity_pair = (d_alpha * geo["g"]).sum(1)             # dalpha/da = g
    d_q = d_alpha * op * geo["g"] * (-0.5)                   # through a * exp(-q/2)

    con = prep.conic[pg]
    A, B, C = con[:, 0, 0].unsqueeze(1), con[:, 0, 1].unsqueeze(1), con[:, 1, 1].unsqueeze(1)
    dx, dy = geo["dx"], geo["dy"]
    d_ux = (d_q * (-2.0) * (A * dx + B * dy)).sum(1)
    d_uy = (d_q * (-2.0) * (B * dx + C * dy)).sum(1)
    d_conic = torch.stack(
        [(d_q * dx * dx).sum(1), (d_q * dx * dy).sum(1), (d_q * dy * dy).sum(1)], dim=-1)
    d_color_pair = (geo["weight"].unsqueeze(-1) * g_rgb).sum(1)
    return torch.stack([d_ux, d_uy], dim=-1), d_conic, d_opacity_pair, d_color_pair


def _pair_grads_numba(grad_rgb, grad_alpha, camera, prep: _Prepared, dtype):
    _, tx, tile = prep.grid
    n_pairs = prep.pair_gauss.numel()
    pair_du = np.zeros((n_pairs, 2), dtype=np.float64)
    pair_dconic = np.zeros((n_pairs, 3), dtype=np.float64)
    pair_dop = np.zeros(n_pairs, dtype=np.float64)
    pair_dcol = np.zeros((n_pairs, 3), dtype=np.float64)
    _kernels.composite_backward(
        *_kernel_inputs(prep), tx, tile, camera.height, camera.width,
        T_CUTOFF, ALPHA_MAX,
        np.ascontiguousarray(grad_rgb.detach().to(torch.float64).numpy()),
        np.ascontiguousarray(grad_alpha.detach().to(torch.float64).numpy()),
        pair_du, pair_dconic, pair_dop, pair_dcol)
    return (torch.from_numpy(pair_du).to(dtype), torch.from_numpy(pair_dconic).to(dtype),
            torch.from_numpy(pair_dop).to(dtype), torch.from_numpy(pair_dcol).to(dtype))


def _raster_backward(grad_rgb, grad_alpha, positions, rotations, log_scales,
                     opacity_logits, colors, camera: Camera, prep: _Prepared):
    dtype = positions.dtype
    n = prep.n_total
    grads = dict(
        positions=positions.new_zeros(n, 3),
        rotations=positions.new_zeros(n, 4),
        log_scales=positions.new_zeros(n, 3),
        opacity_logits=positions.new_zeros(n),
        colors=positions.new_zeros(n, 3),
    )
    if prep.pair_gauss.numel() == 0:
        return grads

    pg = prep.pair_gauss
    if _backend() == "numba":
        d_u, d_conic, d_opacity_pair, d_color_pair = _pair_grads_numba(
            grad_rgb, grad_alpha, camera, prep, dtype)
    else:
        d_u, d_conic, d_opacity_pair, d_color_pair = _pair_grads_torch(
            grad_rgb, grad_alpha, camera, prep, dtype)

    # accumulate pair gradients per kept gaussian
    k = prep.keep.numel()
    acc_u = positions.new_zeros(k, 2)
    acc_conic = positions.new_zeros(k, 3)
    acc_op = positions.new_zeros(k)
    acc_col = positions.new_zeros(k, 3)
    acc_u.index_add_(0, pg, d_u)
    acc_conic.index_add_(0, pg, d_conic)
    acc_op.index_add_(0, pg, d_opacity_pair)
    acc_col.index_add_(0, pg, d_color_pair)

    # activations
    a = prep.opacity
    grads["opacity_logits"][prep.keep] = acc_op * a * (1.0 - a)
    cact = prep.color
    grads["colors"][prep.keep] = acc_col * cact * (1.0 - cact)

    # conic -> cov2d (conic = cov2d^-1)
    g_inv = positions.new_zeros(k, 2, 2)
    g_inv[:, 0, 0] = acc_conic[:, 0]
    g_inv[:, 0, 1] = acc_conic[:, 1]
    g_inv[:, 1, 0] = acc_conic[:, 1]
    g_inv[:, 1, 1] = acc_conic[:, 2]
    inv = prep.conic
    g_cov = -inv @ g_inv @ inv

    # cov2d = M Sigma M^T with M = J W
    fx, fy = camera.fx, camera.fy
    t = prep.t_cam
    inv_z = 1.0 / t[:, 2]
    J = positions.new_zeros(k, 2, 3)
    J[:, 0, 0] = fx * inv_z
    J[:, 0, 2] = -fx * t[:, 0] * inv_z**2
    J[:, 1, 1] = fy * inv_z
    J[:, 1, 2] = -fy * t[:, 1] * inv_z**2
    M = J @ prep.rot_w2c
    g_sigma = M.transpose(-1, -2) @ g_cov @ M
    g_m = 2.0 * g_cov @ M @ prep.sigma
    g_j = g_m @ prep.rot_w2c.T

    # t gradients: projection Jacobian is also d(mean2d)/dt
    g_t = positions.new_zeros(k, 3)
    g_t[:, 0] = fx * inv_z * acc_u[:, 0] - fx * inv_z**2 * g_j[:, 0, 2]
    g_t[:, 1] = fy * inv_z * acc_u[:, 1] - fy * inv_z**2 * g_j[:, 1, 2]
    g_t[:, 2] = (
        -fx * t[:, 0] * inv_z**2 * acc_u[:, 0]
        - fy * t[:, 1] * inv_z**2 * acc_u[:, 1]
        - fx * inv_z**2 * g_j[:, 0, 0]
        - fy * inv_z**2 * g_j[:, 1, 1]
        + 2.0 * fx * t[:, 0] * inv_z**3 * g_j[:, 0, 2]
        + 2.0 * fy * t[:, 1] * inv_z**3 * g_j[:, 1, 2]
    )
    grads["positions"][prep.keep] = g_t @ prep.rot_w2c

    # Sigma = R diag(exp(2s)) R^T
    R = prep.rotmat
    dvec = torch.exp(2.0 * log_scales[prep.keep])
    g_r = 2.0 * g_sigma @ (R * dvec.unsqueeze(-2))
    g_d = (R.transpose(-1, -2) @ g_sigma @ R).diagonal(dim1=-2, dim2=-1)
    grads["log_scales"][prep.keep] = g_d * 2.0 * dvec

    # rotation matrix -> normalized quaternion
    qw, qx, qy, qz = prep.quat_n.unbind(-1)
    gr = g_r
    gqw = 2.0 * (-gr[:, 0, 1] * qz + gr[:, 0, 2] * qy + gr[:, 1, 0] * qz
                 - gr[:, 1, 2] * qx - gr[:, 2, 0] * qy + gr[:, 2, 1] * qx)
    gqx = 2.0 * (gr[:, 0, 1] * qy + gr[:, 0, 2] * qz + gr[:, 1, 0] * qy
                 - 2 * qx * gr[:, 1, 1] - qw * gr[:, 1, 2] + gr[:, 2, 0] * qz
                 + qw * gr[:, 2, 1] - 2 * qx * gr[:, 2, 2])
    gqy = 2.0 * (-2 * qy * gr[:, 0, 0] + qx * gr[:, 0, 1] + qw * gr[:, 0, 2]
                 + qx * gr[:, 1, 0] + qz * gr[:, 1, 2] - qw * gr[:, 2, 0]
                 + qz * gr[:, 2, 1] - 2 * qy * gr[:, 2, 2])
    gqz = 2.0 * (-2 * qz * gr[:, 0, 0] - qw * gr[:, 0, 1] + qx * gr[:, 0, 2]
                 + qw * gr[:, 1, 0] - 2 * qz * gr[:, 1, 1] + qy * gr[:, 1, 2]
                 + qx * gr[:, 2, 0] + qy * gr[:, 2, 1])
    g_qn = torch.stack([gqw, gqx, gqy, gqz], dim=-1)
    qn = prep.quat_n
    g_quat = (g_qn - qn * (qn * g_qn).sum(-1, keepdim=True)) / prep.quat_norm.unsqueeze(-1)
    grads["rotations"][prep.keep] = g_quat
    return grads


class _RenderFunction(torch.autograd.Function):
    @staticmethod
    def forward(ctx, positions, rotations, log_scales, opacity_logits, colors,
                camera, near, tile):
        rgb, alpha, prep, n_contrib = _raster_forward(
            positions, rotations, log_scales, opacity_logits, colors, camera, near, tile)
        ctx.save_for_backward(positions, rotations, log_scales, opacity_logits, colors)
        ctx.camera = camera
        ctx.prep = prep
        ctx.n_contrib = n_contrib
        return rgb, alpha

    @staticmethod
    def backward(ctx, grad_rgb, grad_alpha):
        positions, rotations, log_scales, opacity_logits, colors = ctx.saved_tensors
        grads = _raster_backward(grad_rgb, grad_alpha, positions, rotations,
                                 log_scales, opacity_logits, colors, ctx.camera, ctx.prep)
        return (grads["positions"], grads["rotations"], grads["log_scales"],
                grads["opacity_logits"], grads["colors"], None, None, None)


def render(scene, camera: Camera, *, near: float = DEFAULT_NEAR,
           tile: int = DEFAULT_TILE, with_aux: bool = True) -> RenderOutput:
    """Render a scene (ComposedScene, GaussianSet or list of sets).

    Deterministic for identical inputs: global stable depth sort and fixed
    per-tile reduction order. Empty visible sets yield an all-zero image.
    """
    positions, rotations, log_scales, opacity_logits, colors = pack_scene(scene)
    needs_grad = torch.is_grad_enabled() and any(
        t.requires_grad for t in (positions, rotations, log_scales, opacity_logits, colors))
    if needs_grad:
        rgb, alpha = _RenderFunction.apply(
            positions, rotations, log_scales, opacity_logits, colors, camera, near, tile)
        if not with_aux:
            return RenderOutput(rgb=rgb, alpha=alpha)
        with torch.no_grad():
            _, _, prep, n_contrib = _raster_forward(
                positions.detach(), rotations.detach(), log_scales.detach(),
                opacity_logits.detach(), colors.detach(), camera, near, tile)
    else:
        with torch.no_grad():
            rgb, alpha, prep, n_contrib = _raster_forward(
                positions, rotations, log_scales, opacity_logits, colors, camera, near, tile)
    if not with_aux:
        return RenderOutput(rgb=rgb, alpha=alpha)
    tensors = (positions, rotations, log_scales, opacity_logits, colors)
    aux = RenderAux(
        n_contrib=n_contrib,
        scene=scene,
        camera=camera,
        options={"near": near, "tile": tile},
        prep=prep,
        scene_hash=_scene_hash(tensors),
    )
    return RenderOutput(rgb=rgb, alpha=alpha, aux=aux)


def render_backward(grad_rgb: torch.Tensor, grad_alpha: torch.Tensor, aux: RenderAux) -> dict:
    """Manual backward: gradients for every primitive attribute.

    Culled primitives receive zero gradients. Raises StaleAuxError when the
    scene tensors were mutated after the forward pass.
    """
    tensors = pack_scene(aux.scene)
    if _scene_hash(tensors) != aux.scene_hash:
        raise StaleAuxError("scene tensors changed since the forward pass")
    positions, rotations, log_scales, opacity_logits, colors = tensors
    with torch.no_grad():
        return _raster_backward(grad_rgb, grad_alpha, positions, rotations, log_scales,
                                opacity_logits, colors, aux.camera, aux.prep)


def composite_background(out: RenderOutput, background=(1.0, 1.0, 1.0)) -> torch.Tensor:
    """Blend the premultiplied render over a constant background color."""
    bg = out.rgb.new_tensor(background)
    return out.rgb + (1.0 - out.alpha).unsqueeze(-1) * bg


def render_batch(scenes, cameras, *, background=None, with_aux: bool = False):
    """Render a batch of scenes; returns (B,H,W,3) rgb stacked along dim 0."""
    outs = [render(s, c, with_aux=with_aux) for s, c in zip(scenes, cameras)]
    if background is not None:
        imgs = torch.stack([composite_background(o, background) for o in outs])
    else:
        imgs = torch.stack([o.rgb for o in outs])
    alphas = torch.stack([o.alpha for o in outs])
    return imgs, alphas, outs
