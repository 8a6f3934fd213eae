"""Procedural toy-head dataset: analytic scenes, region masks and labels.

Each sample is a Lambertian-shaded render of an ellipsoid head, a concentric
hair cap with a variable fringe line, a box torso and optional dark ring
glasses, viewed from a front-hemisphere orbit camera on a white background.
Region masks come from the analytic geometry; color labels are 10-bin
per-channel histograms over shrunk regions.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from .generator import ColorConditioning
from .raster import Camera

REGIONS = ("skin", "hair", "torso", "glasses")
_REGION_ID = {name: i + 1 for i, name in enumerate(REGIONS)}

META_MAGIC = b"CSYM"
META_VERSION = 1

# palette/detector contract: glasses frames are darker than any shaded
# skin/hair/torso pixel inside the frontal eye band (see detect_glasses)
GLASSES_DARK_THRESHOLD = 0.10


class EmptyRegionError(ValueError):
    """Region mask became empty after shrinking."""


@dataclass
class PaletteConfig:
    glasses_prob: float = 0.3
    hair_skin_correlation: float = 0.6
    ambient: float = 0.5
    resolution: int = 64
    orbit_radius: float = 1.2
    focal_norm: float = 1.1
    lookat: tuple = (0.0, -0.05, 0.0)
    yaw_range: float = math.radians(60.0)
    pitch_range: float = math.radians(20.0)
    shrink_radius: int = 2


@dataclass
class ToySample:
    image: np.ndarray          # (H, W, 3) float32 in [0, 1]
    camera: Camera
    masks: dict                # region -> (H, W) bool
    labels: ColorConditioning
    params: dict = field(default_factory=dict)


def _sample_scene_params(rng: np.random.Generator, pal: PaletteConfig) -> dict:
    s = rng.uniform(0.88, 1.12)
    skin_r = rng.uniform(0.55, 0.95)
    skin = np.array([skin_r, skin_r * rng.uniform(0.72, 0.85),
                     skin_r * rng.uniform(0.72, 0.85) * rng.uniform(0.78, 0.95)])
    dark = skin * rng.uniform(0.25, 0.5)
    rand_hair = rng.uniform(0.15, 0.85, 3)
    c = pal.hair_skin_correlation
    # hair floor 0.22 keeps shaded hair above the glasses darkness threshold
    hair = np.clip(c * dark + (1 - c) * rand_hair, 0.22, 1.0)
    torso = rng.uniform(0.10, 0.90, 3)
    glasses = bool(rng.random() < pal.glasses_prob)
    light_az = rng.uniform(-math.radians(75), math.radians(75))
    light_el = rng.uniform(math.radians(15), math.radians(65))
    return dict(
        head_scale=s,
        head_center=np.array([0.0, 0.05, 0.0]),
        head_radii=np.array([0.28, 0.34, 0.30]) * s,
        hair_factor=1.15,
        # fringe stays above the eye band for every head scale
        fringe_y=0.05 + rng.uniform(0.07, 0.18) * s,
        torso_center=np.array([0.0, -0.58, 0.0]),
        torso_half=np.array([0.40, 0.30, 0.18]) * rng.uniform(0.9, 1.1),
        eye_y=0.05 + 0.02 * s,
        glasses_z=0.30 * s + 0.02,
        glasses_dx=0.125 * s,
        glasses_router=0.085 * s,
        glasses_rinner=0.058 * s,
        bridge_half=np.array([0.055 * s, 0.012]),
        skin_color=skin,
        hair_color=hair,
        torso_color=torso,
        glasses_color=np.full(3, rng.uniform(0.02, 0.06)),
        glasses_active=glasses,
        light_dir=np.array([
            math.sin(light_az) * math.cos(light_el),
            math.sin(light_el),
            math.cos(light_az) * math.cos(light_el),
        ]),
    )


def sample_camera(rng: np.random.Generator, pal: PaletteConfig) -> Camera:
    yaw = rng.uniform(-pal.yaw_range, pal.yaw_range)
    pitch = rng.uniform(-pal.pitch_range, pal.pitch_range)
    return Camera.orbit(yaw, pitch, pal.orbit_radius, lookat=pal.lookat,
                        focal_norm=pal.focal_norm,
                        width=pal.resolution, height=pal.resolution)


def frontal_camera(pal: PaletteConfig | None = None) -> Camera:
    pal = pal or PaletteConfig()
    return Camera.orbit(0.0, 0.0, pal.orbit_radius, lookat=pal.lookat,
                        focal_norm=pal.focal_norm,
                        width=pal.resolution, height=pal.resolution)


def _camera_rays(camera: Camera):
    h, w = camera.height, camera.width
    w2c = camera.extrinsics.numpy().astype(np.float64)
    rot, trans = w2c[:3, :3], w2c[:3, 3]
    origin = -rot.T @ trans
    xs = (np.arange(w) + 0.5 - camera.cx) / camera.fx
    ys = (np.arange(h) + 0.5 - camera.cy) / camera.fy
    gx, gy = np.meshgrid(xs, ys)
    dirs_cam = np.stack([gx, gy, np.ones_like(gx)], axis=-1)
    dirs = dirs_cam @ rot  # rows of rot are camera axes -> transpose action
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    return origin, dirs.reshape(-1, 3)


def _ellipsoid_hits(origin, dirs, center, radii):
    """Both quadratic roots (nan where no hit) plus hit normals helper data."""
    o = (origin - center) / radii
    d = dirs / radii
    a = (d * d).sum(-1)
    b = 2.0 * (o * d).sum(-1)
    c = (o * o).sum() - 1.0
    disc = b * b - 4 * a * c
    ok = disc >= 0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    t0 = np.where(ok, (-b - sq) / (2 * a), np.nan)
    t1 = np.where(ok, (-b + sq) / (2 * a), np.nan)
    return t0, t1


def _trace(origin, dirs, p: dict):
    n_rays = dirs.shape[0]
    eps = 1e-6
    best_t = np.full(n_rays, np.inf)
    region = np.zeros(n_rays, dtype=np.int8)
    normal = np.zeros((n_rays, 3))

    def consider(t, reg, normals):
        valid = np.isfinite(t) & (t > eps) & (t < best_t)
        best_t[valid] = t[valid]
        region[valid] = reg
        normal[valid] = normals[valid]

    # head ellipsoid
    t0, _ = _ellipsoid_hits(origin, dirs, p["head_center"], p["head_radii"])
    pts = origin + dirs * t0[:, None]
    nrm = (pts - p["head_center"]) / (p["head_radii"] ** 2)
    nrm /= np.linalg.norm(nrm, axis=-1, keepdims=True) + 1e-12
    consider(t0, _REGION_ID["skin"], nrm)

    # hair: outer shell above the fringe plane, nearest passing root
    radii = p["head_radii"] * p["hair_factor"]
    h0, h1 = _ellipsoid_hits(origin, dirs, p["head_center"], radii)
    for t in (h0, h1):
        pts = origin + dirs * t[:, None]
        above = pts[:, 1] > p["fringe_y"]
        tt = np.where(above, t, np.nan)
        nrm = (pts - p["head_center"]) / (radii ** 2)
        nrm /= np.linalg.norm(nrm, axis=-1, keepdims=True) + 1e-12
        consider(tt, _REGION_ID["hair"], nrm)

    # torso box (axis-aligned slabs)
    lo = p["torso_center"] - p["torso_half"]
    hi = p["torso_center"] + p["torso_half"]
    with np.errstate(divide="ignore", invalid="ignore"):
        t_lo = (lo - origin) / dirs
        t_hi = (hi - origin) / dirs
    t_near = np.nanmax(np.minimum(t_lo, t_hi), axis=-1)
    t_far = np.nanmin(np.maximum(t_lo, t_hi), axis=-1)
    hit = (t_near <= t_far) & (t_near > eps)
    tt = np.where(hit, t_near, np.nan)
    pts = origin + dirs * t_near[:, None]
    axis = np.argmax(np.abs((pts - p["torso_center"]) / p["torso_half"]), axis=-1)
    nrm = np.zeros((n_rays, 3))
    nrm[np.arange(n_rays), axis] = np.sign((pts - p["torso_center"]))[np.arange(n_rays), axis]
    consider(tt, _REGION_ID["torso"], nrm)

    # glasses: two flat rings plus a bridge bar in the plane z = glasses_z
    if p["glasses_active"]:
        tz = (p["glasses_z"] - origin[2]) / dirs[:, 2]
        pts = origin + dirs * tz[:, None]
        in_frame = np.zeros(n_rays, dtype=bool)
        for sx in (-1.0, 1.0):
            rel = pts[:, :2] - np.array([sx * p["glasses_dx"], p["eye_y"]])
            r = np.linalg.norm(rel, axis=-1)
            in_frame |= (r >= p["glasses_rinner"]) & (r <= p["glasses_router"])
        bx, by = p["bridge_half"]
        in_frame |= (np.abs(pts[:, 0]) <= bx) & (np.abs(pts[:, 1] - p["eye_y"]) <= by)
        tt = np.where(in_frame, tz, np.nan)
        nrm = np.zeros((n_rays, 3))
        nrm[:, 2] = 1.0
        consider(tt, _REGION_ID["glasses"], nrm)

    return best_t, region, normal


def render_toy_scene(p: dict, camera: Camera, ambient: float):
    origin, dirs = _camera_rays(camera)
    _, region, normal = _trace(origin, dirs, p)

    # flip normals toward the viewer before shading
    facing = (normal * dirs).sum(-1)
    normal = np.where(facing[:, None] > 0, -normal, normal)
    ndotl = np.clip((normal * p["light_dir"]).sum(-1), 0.0, 1.0)
    shade = ambient + (1.0 - ambient) * ndotl

    albedo = {
        _REGION_ID["skin"]: p["skin_color"],
        _REGION_ID["hair"]: p["hair_color"],
        _REGION_ID["torso"]: p["torso_color"],
        _REGION_ID["glasses"]: p["glasses_color"],
    }
    h, w = camera.height, camera.width
    img = np.ones((h * w, 3))
    for reg, color in albedo.items():
        sel = region == reg
        img[sel] = color * shade[sel, None]
    masks = {name: (region == rid).reshape(h, w) for name, rid in _REGION_ID.items()}
    return img.reshape(h, w, 3).astype(np.float32), masks


def color_histogram(image: np.ndarray, mask: np.ndarray, shrink_radius: int = 2) -> np.ndarray:
    """30-d region label: per-channel 10-bin histogram, channels sum to 1.

    The mask is eroded by `shrink_radius` pixels first so colors never leak
    across region boundaries.
    """
    if shrink_radius > 0:
        r = shrink_radius
        yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
        disk = (yy * yy + xx * xx) <= r * r
        mask = ndimage.binary_erosion(mask, structure=disk)
    if not mask.any():
        raise EmptyRegionError("region empty after shrinking")
    vals = image[mask]  # (n, 3)
    hist = np.zeros((3, 10), dtype=np.float64)
    idx = np.clip((vals * 10).astype(np.int64), 0, 9)
    for ch in range(3):
        hist[ch] = np.bincount(idx[:, ch], minlength=10)
    hist /= hist.sum(axis=1, keepdims=True)
    return hist.reshape(30).astype(np.float32)


def labels_from_render(image, masks, glasses_active, shrink_radius=2) -> ColorConditioning:
    return ColorConditioning(
        hair_hist=torch.from_numpy(color_histogram(image, masks["hair"], shrink_radius)),
        skin_hist=torch.from_numpy(color_histogram(image, masks["skin"], shrink_radius)),
        torso_hist=torch.from_numpy(color_histogram(image, masks["torso"], shrink_radius)),
        glasses_flag=torch.tensor(1.0 if glasses_active else 0.0),
    )


def _erosion_disk(radius: int):
    yy, xx = np.mgrid[-radius:radius + 1, -radius:radius + 1]
    return (yy * yy + xx * xx) <= radius * radius


def _render_valid(rng: np.random.Generator, pal: PaletteConfig):
    """Sample scene + camera, rejecting views where a labeled region would be
    empty after shrinking (thin hair crescents at extreme fringe/pitch)."""
    disk = _erosion_disk(pal.shrink_radius)
    for _ in range(100):
        p = _sample_scene_params(rng, pal)
        camera = sample_camera(rng, pal)
        image, masks = render_toy_scene(p, camera, pal.ambient)
        ok = all(
            ndimage.binary_erosion(masks[r], structure=disk).any()
            for r in ("hair", "skin", "torso"))
        if ok:
            return p, camera, image, masks
    raise RuntimeError("could not sample a view with all regions visible")


def generate_sample(rng: np.random.Generator, pal: PaletteConfig | None = None) -> ToySample:
    """One toy sample; deterministic for a given rng state."""
    pal = pal or PaletteConfig()
    p, camera, image, masks = _render_valid(rng, pal)
    labels = labels_from_render(image, masks, p["glasses_active"], pal.shrink_radius)
    return ToySample(image=image, camera=camera, masks=masks, labels=labels, params=p)


def dataset_iterator(pal: PaletteConfig | None = None, seed: int = 0):
    """Infinite seeded stream of ToySamples."""
    pal = pal or PaletteConfig()
    rng = np.random.default_rng(seed)
    while True:
        yield generate_sample(rng, pal)


def conditioning_vector(camera_flat: torch.Tensor, labels: ColorConditioning) -> torch.Tensor:
    """116-d discriminator conditioning: camera (25) | labels (91)."""
    return torch.cat([camera_flat.to(torch.float32), labels.vector()], dim=-1)


def detect_glasses(image: np.ndarray, pal: PaletteConfig | None = None) -> bool:
    """Analytic detector: dark frame pixels inside the frontal eye band.

    Versioned with the palette: frame albedo <= 0.06 renders below the 0.10
    threshold, while skin (mean albedo >= ~0.42) and hair (channel floor
    0.22) stay above it even fully shaded (ambient 0.5). The band covers the
    lower half of the rings only, which the hair fringe can never reach.
    """
    pal = pal or PaletteConfig()
    cam = frontal_camera(pal)
    w2c = cam.extrinsics.numpy()

    def row_of(y):
        t = w2c[:3, :3] @ np.array([0.0, y, 0.31]) + w2c[:3, 3]
        return cam.fy * t[1] / t[2] + cam.cy

    eye_y = 0.07
    rows = [row_of(eye_y - 0.085), row_of(eye_y + 0.025)]
    r0, r1 = int(max(0, min(rows))), int(min(cam.height, max(rows) + 1))
    band = image[r0:r1, cam.width // 8: cam.width * 7 // 8]
    dark = band.mean(axis=-1) < GLASSES_DARK_THRESHOLD
    return bool(dark.sum() >= 8)


# --- on-disk corpus ---------------------------------------------------------
#
# meta.bin: magic "CSYM", version u32, count u32, width u16, height u16,
#           then per sample: camera 25 f32 | labels 91 f32 |
#           image_offset u64 | mask_offset u64   (little-endian)
# images.bin: H*W*3 u8 per sample
# masks.bin: 4 region planes packed to bits, ceil(4*H*W/8) bytes per sample


def write_corpus(out_dir, n: int, seed: int = 0, pal: PaletteConfig | None = None,
                 progress=None) -> None:
    pal = pal or PaletteConfig()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    h = w = pal.resolution
    rng = np.random.default_rng(seed)
    with open(out / "meta.bin", "wb") as meta, \
         open(out / "images.bin", "wb") as images, \
         open(out / "masks.bin", "wb") as masks_f:
        meta.write(META_MAGIC)
        meta.write(struct.pack("<IIHH", META_VERSION, n, w, h))
        img_bytes = h * w * 3
        mask_bytes = (4 * h * w + 7) // 8
        for i in range(n):
            p, camera, image, masks = _render_valid(rng, pal)
            quant = np.clip(image * 255.0 + 0.5, 0, 255).astype(np.uint8)
            # labels are computed on the quantized image so stored labels
            # reproduce exactly from the stored bytes
            decoded = quant.astype(np.float32) / 255.0
            labels = labels_from_render(decoded, masks, p["glasses_active"], pal.shrink_radius)
            meta.write(camera.flat25().numpy().astype("<f4").tobytes())
            meta.write(labels.vector().numpy().astype("<f4").tobytes())
            meta.write(struct.pack("<QQ", i * img_bytes, i * mask_bytes))
            images.write(quant.tobytes())
            plane = np.stack([masks[name] for name in REGIONS]).reshape(-1)
            masks_f.write(np.packbits(plane).tobytes())
            if progress and (i + 1) % 1000 == 0:
                progress(i + 1, n)


class ToyCorpus:
    """Memory-mapped reader for a generated corpus."""

    RECORD = 25 * 4 + 91 * 4 + 16

    def __init__(self, corpus_dir):
        self.dir = Path(corpus_dir)
        raw = (self.dir / "meta.bin").read_bytes()
        if raw[:4] != META_MAGIC:
            raise ValueError("bad corpus meta magic")
        version, count, w, h = struct.unpack("<IIHH", raw[4:16])
        if version != META_VERSION:
            raise ValueError(f"unsupported corpus version {version}")
        self.count, self.width, self.height = count, w, h
        body = np.frombuffer(raw, dtype=np.uint8, offset=16).reshape(count, self.RECORD)
        self.cameras = body[:, :100].copy().view("<f4").reshape(count, 25)
        self.labels = body[:, 100:464].copy().view("<f4").reshape(count, 91)
        self.images = np.memmap(self.dir / "images.bin", dtype=np.uint8, mode="r",
                                shape=(count, h, w, 3))
        mask_bytes = (4 * h * w + 7) // 8
        self.masks_raw = np.memmap(self.dir / "masks.bin", dtype=np.uint8, mode="r",
                                   shape=(count, mask_bytes))

    def __len__(self):
        return self.count

    def image(self, i: int) -> np.ndarray:
        return self.images[i].astype(np.float32) / 255.0

    def masks(self, i: int) -> dict:
        bits = np.unpackbits(self.masks_raw[i])[: 4 * self.height * self.width]
        planes = bits.reshape(4, self.height, self.width).astype(bool)
        return {name: planes[k] for k, name in enumerate(REGIONS)}

    def camera(self, i: int) -> Camera:
        return camera_from_flat25(self.cameras[i], self.width, self.height)

    def label(self, i: int) -> ColorConditioning:
        v = torch.from_numpy(self.labels[i].copy())
        return ColorConditioning(hair_hist=v[0:30], skin_hist=v[30:60],
                                 torso_hist=v[60:90], glasses_flag=v[90])

    def conditioning(self, i: int) -> torch.Tensor:
        return torch.cat([torch.from_numpy(self.cameras[i].copy()),
                          torch.from_numpy(self.labels[i].copy())])

    def batches(self, batch_size: int, seed: int = 0):
        """Infinite shuffled stream of (images, camera25, cond116) tensors."""
        rng = np.random.default_rng(seed)
        while True:
            idx = rng.integers(0, self.count, batch_size)
            imgs = torch.from_numpy(
                self.images[np.sort(idx)].astype(np.float32) / 255.0)
            cams = torch.from_numpy(self.cameras[np.sort(idx)].copy())
            labels = torch.from_numpy(self.labels[np.sort(idx)].copy())
            yield imgs, cams, torch.cat([cams, labels], dim=-1)


def camera_from_flat25(vec, width: int, height: int) -> Camera:
    vec = np.asarray(vec, dtype=np.float64)
    cam2world = torch.tensor(vec[:16].reshape(4, 4))
    k = vec[16:25].reshape(3, 3)
    return Camera(extrinsics=torch.linalg.inv(cam2world),
                  fx=float(k[0, 0] * width), fy=float(k[1, 1] * width),
                  cx=float(k[0, 2] * width), cy=float(k[1, 2] * width),
                  width=width, height=height)
