"""Compositional 3D Gaussian splatting GAN with per-component latent control."""

__version__ = "0.1.0"

from .splats import GaussianSet, ComposedScene, compose, hide_component
from .raster import Camera, RenderOutput, render, render_backward

__all__ = [
    "GaussianSet",
    "ComposedScene",
    "compose",
    "hide_component",
    "Camera",
    "RenderOutput",
    "render",
    "render_backward",
]
