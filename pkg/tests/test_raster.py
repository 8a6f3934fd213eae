import math

import numpy as np
import pytest
import torch

from compsplat.raster import (
    Camera,
    CulledError,
    StaleAuxError,
    composite_background,
    project,
    render,
    render_backward,
)
from compsplat.splats import GaussianSet, compose, hide_component
from conftest import random_camera, random_gaussian_set, seeded_rng


def _frontal_camera(width=32, height=32, radius=2.0, focal_norm=1.0):
    return Camera.orbit(0.0, 0.0, radius=radius, lookat=(0.0, 0.0, 0.0),
                        focal_norm=focal_norm, width=width, height=height)


def _single(position, log_scale, opacity_logit, color, dtype=torch.float64):
    return GaussianSet(
        positions=torch.tensor([position], dtype=dtype),
        rotations=torch.tensor([[1.0, 0.0, 0.0, 0.0]], dtype=dtype),
        log_scales=torch.tensor([log_scale], dtype=dtype),
        opacity_logits=torch.tensor([opacity_logit], dtype=dtype),
        colors=torch.tensor([color], dtype=dtype),
    )


class TestProject:
    def test_on_axis_pinhole_oracle(self):
        # pinhole similar triangles: sigma_px = f * sigma_world / depth,
        # plus the documented +0.3 px^2 covariance floor
        cam = _frontal_camera(width=64, height=64, radius=2.0, focal_norm=1.0)
        sigma_world = 0.05
        gset = _single([0.0, 0.0, 0.0], [math.log(sigma_world)] * 3, 0.0, [0.0, 0.0, 0.0])
        mean2d, cov2d, depth = project(gset.primitive(0), cam)
        assert depth.item() == pytest.approx(2.0, abs=1e-9)
        assert mean2d[0].item() == pytest.approx(cam.cx, abs=1e-6)
        assert mean2d[1].item() == pytest.approx(cam.cy, abs=1e-6)
        expected = (cam.fx * sigma_world / 2.0) ** 2 + 0.3
        assert cov2d[0, 0].item() == pytest.approx(expected, rel=1e-9)
        assert cov2d[1, 1].item() == pytest.approx(expected, rel=1e-9)
        assert abs(cov2d[0, 1].item()) < 1e-9

    def test_left_shift_monotonicity(self):
        cam = _frontal_camera()
        centered = _single([0.0, 0.0, 0.0], [-3.0] * 3, 0.0, [0.0] * 3)
        shifted = _single([-0.3, 0.0, 0.0], [-3.0] * 3, 0.0, [0.0] * 3)
        m0, _, _ = project(centered.primitive(0), cam)
        m1, _, _ = project(shifted.primitive(0), cam)
        assert m1[0].item() < m0[0].item() == pytest.approx(cam.cx, abs=1e-6)

    def test_behind_camera_culled(self):
        cam = _frontal_camera(radius=2.0)
        behind = _single([0.0, 0.0, 5.0], [-3.0] * 3, 0.0, [0.0] * 3)
        with pytest.raises(CulledError):
            project(behind.primitive(0), cam)


class TestRenderForward:
    def test_peak_alpha_matches_activated_opacity(self):
        # principal point placed on a pixel center so the peak is exact
        w2c = torch.eye(4, dtype=torch.float64)
        w2c[2, 3] = 2.0  # camera at z=-2 looking along +z
        cam = Camera(extrinsics=w2c, fx=64.0, fy=64.0, cx=16.5, cy=16.5, width=32, height=32)
        logit = 4.0
        gset = _single([0.0, 0.0, 0.0], [math.log(0.05)] * 3, logit, [3.0, 0.0, -3.0])
        out = render(gset, cam)
        peak = out.alpha.max().item()
        assert peak == pytest.approx(torch.sigmoid(torch.tensor(logit)).item(), abs=1e-4)

    def test_two_layer_compositing_oracle(self):
        # two identical gaussians, different depth: alpha = 1 - (1-a)^2 and
        # rgb = color * (1 - (1-a)^2) by the compositing algebra
        w2c = torch.eye(4, dtype=torch.float64)
        w2c[2, 3] = 2.0
        cam = Camera(extrinsics=w2c, fx=64.0, fy=64.0, cx=16.5, cy=16.5, width=32, height=32)
        color_raw = 0.8
        logit = 0.5
        both = GaussianSet(
            positions=torch.tensor([[0.0, 0.0, 0.0], [0.0, 0.0, 0.4]], dtype=torch.float64),
            rotations=torch.tensor([[1.0, 0, 0, 0]] * 2, dtype=torch.float64),
            log_scales=torch.full((2, 3), math.log(0.05), dtype=torch.float64),
            opacity_logits=torch.full((2,), logit, dtype=torch.float64),
            colors=torch.full((2, 3), color_raw, dtype=torch.float64),
        )
        out = render(both, cam)
        r, c = 16, 16
        a = torch.sigmoid(torch.tensor(logit, dtype=torch.float64)).item()
        col = torch.sigmoid(torch.tensor(color_raw, dtype=torch.float64)).item()
        expected_alpha = 1.0 - (1.0 - a) ** 2
        assert out.alpha[r, c].item() == pytest.approx(expected_alpha, abs=1e-9)
        assert out.rgb[r, c, 0].item() == pytest.approx(col * expected_alpha, abs=1e-9)

    def test_empty_after_culling_gives_zero_alpha(self):
        cam = _frontal_camera()
        behind = _single([0.0, 0.0, 5.0], [-3.0] * 3, 0.0, [0.0] * 3)
        out = render(behind, cam)
        assert out.alpha.abs().max().item() == 0.0
        assert out.rgb.abs().max().item() == 0.0

    def test_determinism_across_runs_and_threads(self):
        rng = seeded_rng(11)
        gset = random_gaussian_set(rng, 40)
        cam = random_camera(seeded_rng(12), 64, 64)
        n0 = torch.get_num_threads()
        try:
            torch.set_num_threads(1)
            a = render(gset, cam)
            torch.set_num_threads(2)
            b = render(gset, cam)
            c = render(gset, cam)
        finally:
            torch.set_num_threads(n0)
        assert torch.equal(a.rgb, b.rgb) and torch.equal(a.alpha, b.alpha)
        assert torch.equal(b.rgb, c.rgb)

    def test_alpha_bounded(self):
        rng = seeded_rng(13)
        gset = random_gaussian_set(rng, 80)
        gset.opacity_logits += 3.0
        cam = random_camera(seeded_rng(14))
        out = render(gset, cam)
        assert out.alpha.max().item() <= 1.0
        assert out.alpha.min().item() >= 0.0
        assert torch.isfinite(out.rgb).all()

    def test_translation_equivariance(self):
        rng = seeded_rng(15)
        gset = random_gaussian_set(rng, 20)
        offset = torch.tensor([0.7, -0.4, 0.9])
        cam = random_camera(seeded_rng(16))
        out0 = render(gset, cam)
        shifted = GaussianSet(
            positions=gset.positions + offset,
            rotations=gset.rotations,
            log_scales=gset.log_scales,
            opacity_logits=gset.opacity_logits,
            colors=gset.colors,
        )
        w2c = cam.extrinsics.clone()
        w2c[:3, 3] = w2c[:3, 3] - w2c[:3, :3] @ offset.to(torch.float64)
        cam2 = Camera(extrinsics=w2c, fx=cam.fx, fy=cam.fy, cx=cam.cx, cy=cam.cy,
                      width=cam.width, height=cam.height)
        out1 = render(shifted, cam2)
        assert (out0.rgb - out1.rgb).abs().max().item() < 1e-5
        assert (out0.alpha - out1.alpha).abs().max().item() < 1e-5

    def test_hidden_component_matches_removed(self):
        rng = seeded_rng(17)
        face = random_gaussian_set(rng, 3, component="face")
        hair = random_gaussian_set(rng, 3, component="hair")
        glasses = random_gaussian_set(rng, 3, component="glasses")
        torso = random_gaussian_set(rng, 3, component="torso")
        cam = random_camera(seeded_rng(18))
        hidden = render(compose(face, hair, glasses, torso, glasses_active=False), cam)
        removed = render([face, hair, torso], cam)
        assert (hidden.rgb - removed.rgb).abs().max().item() < 1e-6
        assert (hidden.alpha - removed.alpha).abs().max().item() < 1e-6

    def test_white_background_composite(self):
        cam = _frontal_camera()
        behind = _single([0.0, 0.0, 5.0], [-3.0] * 3, 0.0, [0.0] * 3)
        out = render(behind, cam)
        img = composite_background(out, (1.0, 1.0, 1.0))
        assert torch.equal(img, torch.ones_like(img))


class TestRenderBackward:
    def test_zero_output_grad_gives_zero_grads(self):
        rng = seeded_rng(20)
        gset = random_gaussian_set(rng, 6, dtype=torch.float64)
        cam = random_camera(seeded_rng(21))
        out = render(gset, cam)
        grads = render_backward(torch.zeros_like(out.rgb), torch.zeros_like(out.alpha), out.aux)
        for g in grads.values():
            assert g.abs().max().item() == 0.0

    def test_hidden_opacity_gradient_saturated(self):
        rng = seeded_rng(22)
        gset = random_gaussian_set(rng, 4, dtype=torch.float64)
        gset.opacity_logits[:] = -98.0
        cam = random_camera(seeded_rng(23))
        out = render(gset, cam)
        grads = render_backward(torch.ones_like(out.rgb), torch.ones_like(out.alpha), out.aux)
        assert grads["opacity_logits"].abs().max().item() < 1e-20

    def test_stale_aux_detected(self):
        rng = seeded_rng(24)
        gset = random_gaussian_set(rng, 4, dtype=torch.float64)
        cam = random_camera(seeded_rng(25))
        out = render(gset, cam)
        gset.positions += 0.01  # mutate after forward
        with pytest.raises(StaleAuxError):
            render_backward(torch.ones_like(out.rgb), torch.ones_like(out.alpha), out.aux)

    def test_autograd_path_matches_manual(self):
        rng = seeded_rng(26)
        gset = random_gaussian_set(rng, 8, dtype=torch.float64)
        cam = random_camera(seeded_rng(27))
        grad_rgb = torch.tensor(seeded_rng(28).normal(size=(32, 32, 3)))
        grad_alpha = torch.tensor(seeded_rng(29).normal(size=(32, 32)))

        manual_out = render(gset, cam)
        manual = render_backward(grad_rgb, grad_alpha, manual_out.aux)

        leaf = {
            name: getattr(gset, name).clone().requires_grad_(True)
            for name in ("positions", "rotations", "log_scales", "opacity_logits", "colors")
        }
        auto_set = GaussianSet(component=gset.component, **leaf)
        out = render(auto_set, cam, with_aux=False)
        loss = (out.rgb * grad_rgb).sum() + (out.alpha * grad_alpha).sum()
        loss.backward()
        for name, t in leaf.items():
            assert torch.allclose(t.grad, manual[name], atol=1e-12), name

    @pytest.mark.parametrize("seed", range(6))
    def test_gradcheck_random_scene(self, seed):
        from conftest import max_relative_error, numeric_render_gradients

        rng = seeded_rng(1000 + seed)
        gset = random_gaussian_set(rng, 5, dtype=torch.float64)
        cam = random_camera(rng, 32, 32)
        grad_rgb = torch.tensor(rng.normal(size=(32, 32, 3)))
        grad_alpha = torch.tensor(rng.normal(size=(32, 32)))
        out = render(gset, cam)
        analytic = render_backward(grad_rgb, grad_alpha, out.aux)
        numeric = numeric_render_gradients(gset, cam, grad_rgb, grad_alpha, eps=1e-5)
        for name in analytic:
            err = max_relative_error(analytic[name], numeric[name])
            assert err < 1e-3, f"{name}: rel err {err:.2e}"
