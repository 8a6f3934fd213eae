"""Gaussian primitive sets, component composition and the splat file format.

A scene is composed from four component sets in a fixed order. Additive
components (glasses) are hidden by shifting their opacity logits by a large
negative constant instead of removing them, so primitive counts, ordering and
gradient flow are preserved.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, replace

import torch

COMPONENTS = ("face", "hair", "glasses", "torso")
COMPONENT_IDS = {name: i for i, name in enumerate(COMPONENTS)}

# Shift applied to opacity logits of hidden components. sigmoid(x - 100) is
# numerically zero for any realistic logit while staying differentiable.
HIDE_SUPPRESSION = 100.0

SPLAT_MAGIC = b"CSY1"
SPLAT_VERSION = 1
_FLOATS_PER_RECORD = 14  # position 3 + quaternion 4 + log_scale 3 + opacity 1 + rgb 3


class EmptyComponentError(ValueError):
    """A component set with zero primitives was passed to compose()."""


@dataclass
class GaussianPrimitive:
    """Single Gaussian primitive, mostly used for hand-built test scenes."""

    position: torch.Tensor       # (3,) world units
    rotation: torch.Tensor       # (4,) quaternion (w, x, y, z), unit norm
    log_scale: torch.Tensor      # (3,) log world units
    opacity_logit: torch.Tensor  # () sigmoid -> (0, 1)
    color: torch.Tensor          # (3,) raw, sigmoid -> [0, 1] linear RGB


@dataclass
class GaussianSet:
    """Ordered set of Gaussian primitives belonging to one semantic component.

    Ordering is stable for identical inputs; downstream losses match
    primitives by index. `opacity_shift` is a scalar added to every opacity
    logit at activation time; hiding manipulates only this shift, which keeps
    the stored logits untouched and makes hide/unhide exactly reversible.
    """

    positions: torch.Tensor       # (N, 3)
    rotations: torch.Tensor       # (N, 4) unit quaternions
    log_scales: torch.Tensor      # (N, 3)
    opacity_logits: torch.Tensor  # (N,)
    colors: torch.Tensor          # (N, 3) raw color logits
    component: str = "face"
    opacity_shift: float = 0.0

    def __post_init__(self):
        if self.component not in COMPONENTS:
            raise ValueError(f"unknown component tag {self.component!r}")
        n = self.positions.shape[0]
        for name in ("rotations", "log_scales", "opacity_logits", "colors"):
            if getattr(self, name).shape[0] != n:
                raise ValueError(f"{name} length does not match positions ({n})")

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def effective_opacity_logits(self) -> torch.Tensor:
        """Opacity logits with the hiding shift applied."""
        if self.opacity_shift == 0.0:
            return self.opacity_logits
        return self.opacity_logits + self.opacity_shift

    def primitive(self, i: int) -> GaussianPrimitive:
        return GaussianPrimitive(
            position=self.positions[i],
            rotation=self.rotations[i],
            log_scale=self.log_scales[i],
            opacity_logit=self.effective_opacity_logits[i],
            color=self.colors[i],
        )

    def detach(self) -> "GaussianSet":
        return GaussianSet(
            positions=self.positions.detach(),
            rotations=self.rotations.detach(),
            log_scales=self.log_scales.detach(),
            opacity_logits=self.opacity_logits.detach(),
            colors=self.colors.detach(),
            component=self.component,
            opacity_shift=self.opacity_shift,
        )

    def content_hash(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for t in (self.positions, self.rotations, self.log_scales,
                  self.effective_opacity_logits, self.colors):
            h.update(t.detach().to(torch.float32).contiguous().numpy().tobytes())
        return h.hexdigest()


@dataclass
class ComposedScene:
    """Four component sets in fixed (face, hair, glasses, torso) order.

    The glasses set is stored post-hiding when glasses_active is False, so the
    total primitive count is always the sum of the component counts.
    """

    sets: tuple[GaussianSet, GaussianSet, GaussianSet, GaussianSet]
    glasses_active: bool

    def __len__(self) -> int:
        return sum(len(s) for s in self.sets)

    @property
    def glasses_flag(self) -> float:
        """Boolean flag as 0/1 for conditioning vectors."""
        return 1.0 if self.glasses_active else 0.0

    def component_set(self, tag: str) -> GaussianSet:
        return self.sets[COMPONENT_IDS[tag]]


def hide_component(gset: GaussianSet, suppression: float = HIDE_SUPPRESSION) -> GaussianSet:
    """Suppress a component by shifting its opacity logits down.

    Only the scalar shift changes, so adding `suppression` back restores the
    effective logits exactly (bitwise).
    """
    if suppression < 0:
        raise ValueError("suppression must be >= 0")
    if suppression == 0:
        return gset
    return replace(gset, opacity_shift=gset.opacity_shift - suppression)


def unhide_component(gset: GaussianSet, suppression: float = HIDE_SUPPRESSION) -> GaussianSet:
    """Exact inverse of hide_component for the same suppression value."""
    return replace(gset, opacity_shift=gset.opacity_shift + suppression)


def compose(face: GaussianSet, hair: GaussianSet, glasses: GaussianSet,
            torso: GaussianSet, glasses_active: bool,
            suppression: float = HIDE_SUPPRESSION) -> ComposedScene:
    """Compose the four component sets into a single coherent scene."""
    sets = (face, hair, glasses, torso)
    for s, name in zip(sets, COMPONENTS):
        if len(s) == 0:
            raise EmptyComponentError(f"component {name!r} has zero primitives")
        if s.component != name:
            raise ValueError(f"expected component {name!r}, got {s.component!r}")
    if not glasses_active:
        glasses = hide_component(glasses, suppression)
    return ComposedScene(sets=(face, hair, glasses, torso), glasses_active=glasses_active)


def scene_sets(scene) -> list[GaussianSet]:
    """Normalize renderable inputs to a list of GaussianSets."""
    if isinstance(scene, ComposedScene):
        return list(scene.sets)
    if isinstance(scene, GaussianSet):
        return [scene]
    return list(scene)


def pack_scene(scene) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """Concatenate component attributes into flat tensors for rendering."""
    sets = scene_sets(scene)
    return (
        torch.cat([s.positions for s in sets], dim=0),
        torch.cat([s.rotations for s in sets], dim=0),
        torch.cat([s.log_scales for s in sets], dim=0),
        torch.cat([s.effective_opacity_logits for s in sets], dim=0),
        torch.cat([s.colors for s in sets], dim=0),
    )


def write_splats(fp, sets) -> None:
    """Write one or more GaussianSets as consecutive CSY1 blocks.

    Block layout (little-endian): magic "CSY1", version u32, count u32,
    component_tag u32, then count records of 14 f32 (position 3, quaternion 4,
    log_scale 3, opacity_logit 1, rgb 3).
    """
    if isinstance(sets, (GaussianSet,)):
        sets = [sets]
    elif isinstance(sets, ComposedScene):
        sets = list(sets.sets)
    for s in sets:
        fp.write(SPLAT_MAGIC)
        fp.write(struct.pack("<III", SPLAT_VERSION, len(s), COMPONENT_IDS[s.component]))
        rec = torch.cat(
            [
                s.positions.detach().to(torch.float32),
                s.rotations.detach().to(torch.float32),
                s.log_scales.detach().to(torch.float32),
                s.effective_opacity_logits.detach().to(torch.float32).unsqueeze(-1),
                s.colors.detach().to(torch.float32),
            ],
            dim=-1,
        ).contiguous()
        fp.write(rec.numpy().astype("<f4").tobytes())


def read_splats(fp) -> list[GaussianSet]:
    """Read consecutive CSY1 blocks until EOF."""
    import numpy as np

    sets = []
    while True:
        magic = fp.read(4)
        if not magic:
            break
        if magic != SPLAT_MAGIC:
            raise ValueError(f"bad splat magic {magic!r}")
        version, count, tag = struct.unpack("<III", fp.read(12))
        if version != SPLAT_VERSION:
            raise ValueError(f"unsupported splat version {version}")
        if tag >= len(COMPONENTS):
            raise ValueError(f"unknown component tag id {tag}")
        raw = fp.read(count * _FLOATS_PER_RECORD * 4)
        if len(raw) != count * _FLOATS_PER_RECORD * 4:
            raise ValueError("truncated splat block")
        rec = torch.from_numpy(
            np.frombuffer(raw, dtype="<f4").reshape(count, _FLOATS_PER_RECORD).copy()
        )
        sets.append(
            GaussianSet(
                positions=rec[:, 0:3],
                rotations=rec[:, 3:7],
                log_scales=rec[:, 7:10],
                opacity_logits=rec[:, 10],
                colors=rec[:, 11:14],
                component=COMPONENTS[tag],
            )
        )
    return sets


def export_scene_bytes(scene: ComposedScene) -> bytes:
    buf = io.BytesIO()
    write_splats(buf, scene)
    return buf.getvalue()


def import_scene_bytes(data: bytes) -> list[GaussianSet]:
    return read_splats(io.BytesIO(data))
