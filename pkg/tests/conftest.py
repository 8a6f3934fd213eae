import numpy as np
import pytest
import torch

from compsplat.raster import Camera
from compsplat.splats import GaussianSet


def seeded_rng(seed):
    return np.random.default_rng(seed)


def random_gaussian_set(rng, n, component="face", dtype=torch.float32, spread=0.25):
    """Gaussians clustered near the origin, in view of the default orbit camera."""
    return GaussianSet(
        positions=torch.tensor(rng.normal(0.0, spread, (n, 3)), dtype=dtype),
        rotations=torch.tensor(rng.normal(0.0, 1.0, (n, 4)), dtype=dtype),
        log_scales=torch.tensor(np.log(rng.uniform(0.02, 0.12, (n, 3))), dtype=dtype),
        opacity_logits=torch.tensor(rng.normal(0.5, 1.0, (n,)), dtype=dtype),
        colors=torch.tensor(rng.normal(0.0, 1.0, (n, 3)), dtype=dtype),
        component=component,
    )


def random_camera(rng, width=32, height=32):
    yaw = rng.uniform(-1.0, 1.0)
    pitch = rng.uniform(-0.3, 0.3)
    return Camera.orbit(yaw, pitch, radius=1.35, lookat=(0.0, 0.0, 0.0),
                        width=width, height=height)


def render_scalar_loss(scene, camera, grad_rgb, grad_alpha):
    """Scalar projection of the render used by the finite-difference oracle."""
    from compsplat.raster import render

    out = render(scene, camera, with_aux=False)
    return (out.rgb * grad_rgb).sum() + (out.alpha * grad_alpha).sum()


def numeric_render_gradients(gset, camera, grad_rgb, grad_alpha, eps=1e-5):
    """Central finite differences over every attribute of a GaussianSet.

    Independent of the analytic backward: only calls the forward pass.
    """
    grads = {}
    for name in ("positions", "rotations", "log_scales", "opacity_logits", "colors"):
        base = getattr(gset, name)
        g = torch.zeros_like(base)
        flat = base.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            hi = render_scalar_loss(gset, camera, grad_rgb, grad_alpha).item()
            flat[i] = orig - eps
            lo = render_scalar_loss(gset, camera, grad_rgb, grad_alpha).item()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * eps)
        grads[name] = g
    return grads


def max_relative_error(analytic, numeric, floor=1e-6):
    """Elementwise |a-n| / max(|a|, |n|, floor), reduced to the max."""
    denom = torch.maximum(torch.maximum(analytic.abs(), numeric.abs()),
                          torch.full_like(analytic, floor))
    return ((analytic - numeric).abs() / denom).max().item()


@pytest.fixture
def rng():
    return seeded_rng(0)
