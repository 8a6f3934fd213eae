"""Compositional generator: shared transformer backbone partitioned across
four independent sub-generators, each decoding a two-level hierarchy of
Gaussian primitives.

Isolation contracts (load-bearing, asserted bit-exactly by tests):
  - a component's output depends only on its own intermediate latent, the
    shared shape/light context and (for permanent components) its color
    histogram;
  - the shape context enters only the position decoders, so it can never
    change colors, opacities, scales or rotations;
  - the light context conditions every mapping network identically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import torch
import torch.nn as nn

from .nets import AdaLNBlock, EqualLinear, FiLM, ModLinear, PixelNorm
from .splats import COMPONENTS, ComposedScene, GaussianSet, compose

LATENT_DIM = 512


class MissingColorConditioning(ValueError):
    """A permanent component was generated without its histogram."""


class UnexpectedColorConditioning(ValueError):
    """The glasses component received color conditioning."""


@dataclass
class LatentBundle:
    """Per-component latents plus the shared shape/light context latents.

    Tensors are (512,) or batched (B, 512). Components are sampled tied to a
    single z by default; mixing replaces individual entries.
    """

    z_face: torch.Tensor
    z_hair: torch.Tensor
    z_glasses: torch.Tensor
    z_torso: torch.Tensor
    z_shape: torch.Tensor
    z_light: torch.Tensor

    @classmethod
    def sample(cls, batch=None, generator=None, tied=True, device=None):
        shape = (LATENT_DIM,) if batch is None else (batch, LATENT_DIM)
        draw = lambda: torch.randn(*shape, generator=generator, device=device)
        if tied:
            z = draw()
            comps = [z, z, z, z]
        else:
            comps = [draw() for _ in range(4)]
        return cls(*comps, z_shape=draw(), z_light=draw())

    def component_z(self, tag: str) -> torch.Tensor:
        return getattr(self, f"z_{tag}")

    def with_component(self, tag: str, z: torch.Tensor) -> "LatentBundle":
        return replace(self, **{f"z_{tag}": z})

    def clone(self) -> "LatentBundle":
        return LatentBundle(*(getattr(self, f).clone() for f in (
            "z_face", "z_hair", "z_glasses", "z_torso", "z_shape", "z_light")))


@dataclass
class ColorConditioning:
    """Region color histograms (10 bins per RGB channel) plus glasses flag."""

    hair_hist: torch.Tensor   # (..., 30)
    skin_hist: torch.Tensor   # (..., 30)
    torso_hist: torch.Tensor  # (..., 30)
    glasses_flag: torch.Tensor  # (...,) in {0, 1}

    REGIONS = ("hair", "skin", "torso")

    def validate(self, atol=1e-5):
        for name in ("hair_hist", "skin_hist", "torso_hist"):
            h = getattr(self, name)
            if h.shape[-1] != 30:
                raise ValueError(f"{name} must be 30-d")
            if (h < -atol).any():
                raise ValueError(f"{name} has negative mass")
            sums = h.reshape(*h.shape[:-1], 3, 10).sum(-1)
            if (sums - 1.0).abs().max() > atol:
                raise ValueError(f"{name} channels must sum to 1")

    def vector(self) -> torch.Tensor:
        """91-d label vector: hair (30) | skin (30) | torso (30) | flag (1)."""
        flag = self.glasses_flag
        if not torch.is_tensor(flag):
            flag = self.hair_hist.new_tensor(flag)
        return torch.cat(
            [self.hair_hist, self.skin_hist, self.torso_hist,
             flag.to(self.hair_hist.dtype).unsqueeze(-1)], dim=-1)

    def region_hist(self, component: str):
        return {"face": self.skin_hist, "hair": self.hair_hist,
                "torso": self.torso_hist}.get(component)

    def with_region(self, region: str, hist: torch.Tensor) -> "ColorConditioning":
        return replace(self, **{f"{region}_hist": hist})

    @classmethod
    def stack(cls, items):
        return cls(
            hair_hist=torch.stack([c.hair_hist for c in items]),
            skin_hist=torch.stack([c.skin_hist for c in items]),
            torso_hist=torch.stack([c.torso_hist for c in items]),
            glasses_flag=torch.stack([torch.as_tensor(c.glasses_flag, dtype=torch.float32)
                                      for c in items]),
        )

    def index(self, i) -> "ColorConditioning":
        return ColorConditioning(self.hair_hist[i], self.skin_hist[i],
                                 self.torso_hist[i], self.glasses_flag[i])


@dataclass
class GeneratorConfig:
    latent_dim: int = LATENT_DIM
    w_dim: int = LATENT_DIM
    backbone_width: int = 128
    backbone_depth: int = 2
    backbone_heads: int = 4
    cross_block_attention: bool = False  # ablation knob, breaks isolation
    anchors: dict = field(default_factory=lambda: {"face": 64, "hair": 64, "glasses": 16, "torso": 64})
    children: dict = field(default_factory=lambda: {"face": 16, "hair": 16, "glasses": 8, "torso": 16})
    child_dim: int = 64
    pos_hidden: int = 64
    color_hidden: int = 64
    hist_embed_dim: int = 64
    scale_min: float = 0.004
    scale_max: float = 0.3
    anchor_radius: float = 0.45

    def primitive_count(self, tag: str) -> int:
        return self.anchors[tag] * (1 + self.children[tag])


class MappingNetwork(nn.Module):
    """Two-layer mapping with normalized input, optionally conditioned on the
    light context (concatenated to the normalized z)."""

    def __init__(self, latent_dim, w_dim, cond_dim=0, lr_mul=0.01):
        super().__init__()
        self.norm = PixelNorm()
        self.cond_dim = cond_dim
        self.fc1 = EqualLinear(latent_dim + cond_dim, w_dim, lr_mul=lr_mul, activation="lrelu")
        self.fc2 = EqualLinear(w_dim, w_dim, lr_mul=lr_mul, activation="lrelu")

    def forward(self, z, cond=None):
        x = self.norm(z)
        if self.cond_dim:
            if cond is None:
                raise ValueError("mapping expects a conditioning vector")
            x = torch.cat([x, cond], dim=-1)
        return self.fc2(self.fc1(x))


class Backbone(nn.Module):
    """Shared transformer over a learned token sequence, partitioned into one
    contiguous block per component. Each block is modulated only by its own
    component's w; attention never crosses blocks unless the ablation flag
    enables it."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        self.block_sizes = [cfg.anchors[t] for t in COMPONENTS]
        total = sum(self.block_sizes)
        self.tokens = nn.Parameter(torch.randn(total, cfg.backbone_width))
        self.blocks = nn.ModuleList(
            [AdaLNBlock(cfg.backbone_width, cfg.backbone_heads, cfg.w_dim)
             for _ in range(cfg.backbone_depth)])

    def forward(self, ws: dict) -> dict:
        batch = ws[COMPONENTS[0]].shape[0]
        if self.cfg.cross_block_attention:
            x = self.tokens.unsqueeze(0).expand(batch, -1, -1)
            w_tok = torch.cat(
                [ws[t].unsqueeze(1).expand(-1, n, -1)
                 for t, n in zip(COMPONENTS, self.block_sizes)], dim=1)
            for blk in self.blocks:
                x = blk(x, w_tok)
            out, start = {}, 0
            for t, n in zip(COMPONENTS, self.block_sizes):
                out[t] = x[:, start:start + n]
                start += n
            return out
        out, start = {}, 0
        for t, n in zip(COMPONENTS, self.block_sizes):
            x = self.tokens[start:start + n].unsqueeze(0).expand(batch, -1, -1)
            for blk in self.blocks:
                x = blk(x, ws[t])
            out[t] = x
            start += n
        return out


class PositionDecoder(nn.Module):
    """Small limited-capacity MLP; the shape context modulates the hidden
    layer so it can only move primitives, never restyle them."""

    def __init__(self, in_dim, hidden, w_dim, out_std=0.05):
        super().__init__()
        self.fc1 = EqualLinear(in_dim, hidden, activation="lrelu")
        self.film = FiLM(w_dim, hidden)
        self.fc2 = EqualLinear(hidden, 3, init_std=out_std)

    def forward(self, x, w_shape):
        return self.fc2(self.film(self.fc1(x), w_shape))


class ColorDecoder(nn.Module):
    """Color head; for permanent components the final layer's features are
    modulated by the embedded region histogram."""

    def __init__(self, in_dim, hidden, hist_embed_dim, conditioned):
        super().__init__()
        self.conditioned = conditioned
        self.fc1 = EqualLinear(in_dim, hidden, activation="lrelu")
        if conditioned:
            self.hist_embed = EqualLinear(30, hist_embed_dim, activation="lrelu")
            self.film = FiLM(hist_embed_dim, hidden)
        self.fc2 = EqualLinear(hidden, 3)

    def forward(self, x, hist):
        h = self.fc1(x)
        if self.conditioned:
            h = self.film(h, self.hist_embed(hist))
        return self.fc2(h)


class ComponentDecoder(nn.Module):
    """Decodes one component's backbone features into its Gaussian set:
    anchors first, then children positioned relative to their anchor."""

    def __init__(self, cfg: GeneratorConfig, tag: str):
        super().__init__()
        self.tag = tag
        self.n_anchors = cfg.anchors[tag]
        self.n_children = cfg.children[tag]
        self.conditioned = tag in ("face", "hair", "torso")
        d, cd = cfg.backbone_width, cfg.child_dim
        self.log_scale_min = math.log(cfg.scale_min)
        self.log_scale_max = math.log(cfg.scale_max)

        self.trunk = ModLinear(d, d, cfg.w_dim)
        self.base_anchor_pos = nn.Parameter(
            _sphere_init(self.n_anchors, cfg.anchor_radius))
        self.anchor_pos = PositionDecoder(d, cfg.pos_hidden, cfg.w_dim, out_std=0.05)
        self.anchor_rot = EqualLinear(d, 4, init_std=0.05)
        self.anchor_scale = EqualLinear(d, 3, init_std=0.2)
        self.anchor_opacity = EqualLinear(d, 1, bias_init=1.0, init_std=0.2)
        self.anchor_color = ColorDecoder(d, cfg.color_hidden, cfg.hist_embed_dim, self.conditioned)

        self.child_proj = ModLinear(d, self.n_children * cd, cfg.w_dim)
        self.child_embed = nn.Parameter(torch.randn(self.n_children, cd) * 0.5)
        self.base_child_off = nn.Parameter(
            torch.randn(self.n_anchors, self.n_children, 3) * 0.06)
        self.child_pos = PositionDecoder(cd, cfg.pos_hidden, cfg.w_dim, out_std=0.05)
        self.child_rot = EqualLinear(cd, 4, init_std=0.05)
        self.child_scale = EqualLinear(cd, 3, init_std=0.2)
        self.child_opacity = EqualLinear(cd, 1, bias_init=0.5, init_std=0.2)
        self.child_color = ColorDecoder(cd, cfg.color_hidden, cfg.hist_embed_dim, self.conditioned)

    def _log_scale(self, raw, level_bias):
        span = self.log_scale_max - self.log_scale_min
        return self.log_scale_min + span * torch.sigmoid(raw + level_bias)

    @staticmethod
    def _quat(raw):
        q = torch.cat([1.0 + raw[..., :1], raw[..., 1:]], dim=-1)
        return q / q.norm(dim=-1, keepdim=True)

    def forward(self, feat, w, w_shape, hist=None):
        if self.conditioned and hist is None:
            raise MissingColorConditioning(f"{self.tag} requires a color histogram")
        if not self.conditioned and hist is not None:
            raise UnexpectedColorConditioning(f"{self.tag} takes no color conditioning")
        b = feat.shape[0]
        h = self.trunk(feat, w)                                    # (B, L, D)

        a_pos = self.base_anchor_pos + self.anchor_pos(h, w_shape)
        a_rot = self._quat(self.anchor_rot(h))
        a_scale = self._log_scale(self.anchor_scale(h), 0.3)
        a_op = self.anchor_opacity(h).squeeze(-1)
        a_col = self.anchor_color(h, hist)

        c = self.child_proj(h, w).reshape(b, self.n_anchors, self.n_children, -1)
        c = c + self.child_embed
        c_off = self.base_child_off + self.child_pos(c, w_shape)
        c_pos = a_pos.unsqueeze(2) + c_off
        c_rot = self._quat(self.child_rot(c))
        c_scale = self._log_scale(self.child_scale(c), -0.8)
        c_op = self.child_opacity(c).squeeze(-1)
        c_col = self.child_color(c, hist)

        nc = self.n_anchors * self.n_children
        return dict(
            positions=torch.cat([a_pos, c_pos.reshape(b, nc, 3)], dim=1),
            rotations=torch.cat([a_rot, c_rot.reshape(b, nc, 4)], dim=1),
            log_scales=torch.cat([a_scale, c_scale.reshape(b, nc, 3)], dim=1),
            opacity_logits=torch.cat([a_op, c_op.reshape(b, nc)], dim=1),
            colors=torch.cat([a_col, c_col.reshape(b, nc, 3)], dim=1),
        )


def _sphere_init(n, radius):
    pts = torch.randn(n, 3)
    pts = pts / pts.norm(dim=-1, keepdim=True)
    return pts * radius * torch.rand(n, 1).pow(1.0 / 3.0)


class CompositionalGenerator(nn.Module):
    def __init__(self, cfg: GeneratorConfig | None = None):
        super().__init__()
        self.cfg = cfg or GeneratorConfig()
        c = self.cfg
        self.mappings = nn.ModuleDict(
            {t: MappingNetwork(c.latent_dim, c.w_dim, cond_dim=c.w_dim) for t in COMPONENTS})
        self.map_shape = MappingNetwork(c.latent_dim, c.w_dim)
        self.map_light = MappingNetwork(c.latent_dim, c.w_dim)
        self.backbone = Backbone(c)
        self.decoders = nn.ModuleDict({t: ComponentDecoder(c, t) for t in COMPONENTS})
        for name in list(COMPONENTS) + ["shape", "light"]:
            self.register_buffer(f"w_avg_{name}", torch.zeros(c.w_dim))
        self.w_avg_beta = 0.995

    # --- latent plumbing -------------------------------------------------
    def map_latent(self, z, component: str, w_light):
        """Map one component's z to w, conditioned on the light context."""
        return self.mappings[component](z, w_light)

    def map_context(self, z_shape, z_light):
        return self.map_shape(z_shape), self.map_light(z_light)

    def map_bundle(self, bundle: LatentBundle, update_wavg: bool = False) -> dict:
        w_shape, w_light = self.map_context(bundle.z_shape, bundle.z_light)
        ws = {t: self.map_latent(bundle.component_z(t), t, w_light) for t in COMPONENTS}
        ws["shape"] = w_shape
        ws["light"] = w_light
        if update_wavg:
            with torch.no_grad():
                for name, w in ws.items():
                    buf = getattr(self, f"w_avg_{name}")
                    mean = w.detach().reshape(-1, w.shape[-1]).mean(0)
                    buf.copy_(mean.lerp(buf, self.w_avg_beta))
        return ws

    def truncate_ws(self, ws: dict, psi: float) -> dict:
        if psi >= 1.0:
            return ws
        return {name: truncate(w, getattr(self, f"w_avg_{name}"), psi)
                for name, w in ws.items()}

    # --- synthesis --------------------------------------------------------
    def component_attrs(self, ws: dict, cond: ColorConditioning) -> dict:
        feats = self.backbone({t: ws[t] for t in COMPONENTS})
        out = {}
        for t in COMPONENTS:
            out[t] = self.decoders[t](feats[t], ws[t], ws["shape"], cond.region_hist(t))
        return out

    def synthesize_batch(self, bundle: LatentBundle, cond: ColorConditioning,
                         psi: float = 1.0, update_wavg: bool = False) -> dict:
        """Batched synthesis returning per-component attribute dicts (B, N, ...)."""
        cond.validate()
        ws = self.map_bundle(bundle, update_wavg=update_wavg)
        ws = self.truncate_ws(ws, psi)
        return self.component_attrs(ws, cond)

    def synthesize(self, bundle: LatentBundle, cond: ColorConditioning,
                   psi: float = 1.0) -> ComposedScene:
        """Single-sample synthesis to a ComposedScene. Pure in (weights, inputs)."""
        squeeze = bundle.z_face.dim() == 1
        if squeeze:
            bundle = LatentBundle(*(getattr(bundle, f).unsqueeze(0) for f in (
                "z_face", "z_hair", "z_glasses", "z_torso", "z_shape", "z_light")))
            cond = ColorConditioning(
                cond.hair_hist.unsqueeze(0), cond.skin_hist.unsqueeze(0),
                cond.torso_hist.unsqueeze(0),
                torch.as_tensor(cond.glasses_flag).reshape(1))
        attrs = self.synthesize_batch(bundle, cond, psi=psi)
        flag = bool(torch.as_tensor(cond.glasses_flag).reshape(-1)[0] > 0.5)
        return scene_from_attrs(attrs, 0, flag)


def scene_from_attrs(attrs: dict, i: int, glasses_active: bool) -> ComposedScene:
    """Build a per-sample ComposedScene from batched component attributes."""
    sets = []
    for t in COMPONENTS:
        a = attrs[t]
        sets.append(GaussianSet(
            positions=a["positions"][i], rotations=a["rotations"][i],
            log_scales=a["log_scales"][i], opacity_logits=a["opacity_logits"][i],
            colors=a["colors"][i], component=t))
    return compose(*sets, glasses_active=glasses_active)


def truncate(w: torch.Tensor, w_mean: torch.Tensor, psi: float) -> torch.Tensor:
    """Interpolate an intermediate latent toward its mean: w' = mean + psi (w - mean)."""
    if not 0.0 <= psi <= 1.0:
        raise ValueError("psi must be in [0, 1]")
    if psi == 1.0:
        return w
    return w_mean + psi * (w - w_mean)


def mix_latents(bundle: LatentBundle, p: float, generator=None):
    """With probability p, resample exactly one uniformly chosen component
    latent; the shape/light context latents are never mixed.

    Batched bundles mix each sample independently. Returns (bundle', mixed)
    where mixed is -1 for untouched samples, else the component index.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must be in [0, 1]")
    batched = bundle.z_face.dim() == 2
    b = bundle.z_face.shape[0] if batched else 1
    device = bundle.z_face.device
    do_mix = torch.rand(b, generator=generator, device=device) < p
    which = torch.randint(0, 4, (b,), generator=generator, device=device)
    mixed = torch.where(do_mix, which, torch.full_like(which, -1))
    if not do_mix.any():
        return bundle, (mixed if batched else int(mixed[0]))
    new = bundle
    for ci, tag in enumerate(COMPONENTS):
        rows = mixed == ci
        if not rows.any():
            continue
        fresh = torch.randn(int(rows.sum()), bundle.z_face.shape[-1],
                            generator=generator, device=device)
        if batched:
            z = getattr(bundle, f"z_{tag}").clone()
            z[rows] = fresh
            new = replace(new, **{f"z_{tag}": z})
        else:
            new = replace(new, **{f"z_{tag}": fresh[0]})
    return new, (mixed if batched else int(mixed[0]))
