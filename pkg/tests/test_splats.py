import io

import pytest
import torch

from compsplat.splats import (
    EmptyComponentError,
    GaussianSet,
    compose,
    hide_component,
    read_splats,
    unhide_component,
    write_splats,
)
from conftest import random_gaussian_set, seeded_rng


def _components(rng, counts=(6, 5, 4, 3)):
    names = ("face", "hair", "glasses", "torso")
    return [random_gaussian_set(rng, n, component=c) for n, c in zip(counts, names)]


def test_hide_shifts_logits_only():
    rng = seeded_rng(1)
    gset = random_gaussian_set(rng, 8, component="glasses")
    hidden = hide_component(gset, 100.0)
    assert torch.equal(hidden.effective_opacity_logits, gset.opacity_logits - 100.0)
    assert torch.equal(hidden.positions, gset.positions)
    assert torch.equal(hidden.colors, gset.colors)
    # logit 2.0 -> activated opacity below 1e-40
    probe = hide_component(
        GaussianSet(
            positions=torch.zeros(1, 3),
            rotations=torch.tensor([[1.0, 0, 0, 0]]),
            log_scales=torch.zeros(1, 3),
            opacity_logits=torch.tensor([2.0]),
            colors=torch.zeros(1, 3),
        ),
        100.0,
    )
    assert probe.effective_opacity_logits.item() == pytest.approx(-98.0)
    assert torch.sigmoid(probe.effective_opacity_logits.double()).item() < 1e-40


def test_hide_zero_suppression_is_identity():
    rng = seeded_rng(2)
    gset = random_gaussian_set(rng, 5)
    out = hide_component(gset, 0.0)
    assert torch.equal(out.effective_opacity_logits, gset.opacity_logits)


def test_hide_is_reversible():
    rng = seeded_rng(3)
    gset = random_gaussian_set(rng, 7)
    out = unhide_component(hide_component(gset, 100.0), 100.0)
    assert torch.equal(out.effective_opacity_logits, gset.effective_opacity_logits)
    assert out.opacity_shift == gset.opacity_shift


def test_compose_counts_and_order():
    rng = seeded_rng(4)
    face, hair, glasses, torso = _components(rng, (1000, 800, 200, 500))
    scene = compose(face, hair, glasses, torso, glasses_active=True)
    assert len(scene) == 2500
    assert [s.component for s in scene.sets] == ["face", "hair", "glasses", "torso"]
    assert scene.glasses_flag == 1.0


def test_compose_hides_glasses_when_inactive():
    rng = seeded_rng(5)
    face, hair, glasses, torso = _components(rng)
    scene = compose(face, hair, glasses, torso, glasses_active=False)
    assert torch.equal(scene.sets[2].effective_opacity_logits, glasses.opacity_logits - 100.0)
    assert torch.equal(scene.sets[0].positions, face.positions)
    assert torch.equal(scene.sets[1].positions, hair.positions)
    assert torch.equal(scene.sets[3].positions, torso.positions)
    assert scene.glasses_flag == 0.0


def test_compose_is_pure():
    rng = seeded_rng(6)
    sets = _components(rng)
    a = compose(*sets, glasses_active=False)
    b = compose(*sets, glasses_active=False)
    for sa, sb in zip(a.sets, b.sets):
        assert torch.equal(sa.effective_opacity_logits, sb.effective_opacity_logits)
        assert torch.equal(sa.positions, sb.positions)


def test_compose_rejects_empty_component():
    rng = seeded_rng(7)
    face, hair, glasses, torso = _components(rng)
    empty = GaussianSet(
        positions=torch.zeros(0, 3),
        rotations=torch.zeros(0, 4),
        log_scales=torch.zeros(0, 3),
        opacity_logits=torch.zeros(0),
        colors=torch.zeros(0, 3),
        component="hair",
    )
    with pytest.raises(EmptyComponentError):
        compose(face, empty, glasses, torso, glasses_active=True)


def test_splat_roundtrip_bit_exact():
    rng = seeded_rng(8)
    sets = _components(rng)
    buf = io.BytesIO()
    write_splats(buf, sets)
    buf.seek(0)
    assert buf.getvalue()[:4] == b"CSY1"
    loaded = read_splats(buf)
    assert len(loaded) == 4
    for orig, back in zip(sets, loaded):
        assert back.component == orig.component
        assert torch.equal(back.positions, orig.positions)
        assert torch.equal(back.rotations, orig.rotations)
        assert torch.equal(back.log_scales, orig.log_scales)
        assert torch.equal(back.opacity_logits, orig.opacity_logits)
        assert torch.equal(back.colors, orig.colors)
