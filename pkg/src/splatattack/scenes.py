"""Synthetic scenes for tests, demos and the acceptance suite."""
from __future__ import annotations

import math

import numpy as np

from .adapters.detection import template_pattern
from .camera import make_orbit_views
from .gaussians import GaussianSet

TOY_RADIUS = 4.0
TOY_FOV = math.radians(40.0)


def painted_box(pattern: np.ndarray, per_face: int = 10, half: float = 0.5, opacity: float = 0.9,
                thickness: float = 0.01, top_color=None) -> GaussianSet:
    """An axis-aligned box whose four vertical faces each show ``pattern``.

    Each side face is a ``per_face x per_face`` grid of flat Gaussians oriented
    so that a camera on the face normal (z up) sees the pattern upright and
    unmirrored. The top face is a uniform grid in ``top_color``.
    """
    pattern = np.asarray(pattern, dtype=np.float64)
    g = pattern.shape[0]
    spacing = 2.0 * half / per_face
    sigma = 0.6 * spacing
    coords = -half + (np.arange(per_face) + 0.5) * spacing
    cell = np.minimum((np.arange(per_face) * g) // per_face, g - 1)
    means, scales, quats, colors = [], [], [], []
    for face in range(4):
        phi = 0.5 * math.pi * face
        normal = np.array([math.cos(phi), math.sin(phi), 0.0])
        right = np.array([-math.sin(phi), math.cos(phi), 0.0])
        down = np.array([0.0, 0.0, -1.0])
        q = [math.cos(phi / 2), 0.0, 0.0, math.sin(phi / 2)]
        for r in range(per_face):
            for c in range(per_face):
                means.append(half * normal + coords[c] * right + coords[r] * down)
                scales.append([thickness, sigma, sigma])
                quats.append(q)
                colors.append(pattern[cell[r], cell[c]])
    top = pattern.reshape(-1, 3).mean(axis=0) if top_color is None else np.asarray(top_color, dtype=float)
    for r in range(per_face):
        for c in range(per_face):
            means.append([coords[c], coords[r], half])
            scales.append([sigma, sigma, thickness])
            quats.append([1.0, 0.0, 0.0, 0.0])
            colors.append(top)
    n = len(means)
    return GaussianSet(np.array(means), np.full(n, opacity), np.array(scales),
                       np.array(quats), np.array(colors))


def toy_scene(detector_seed: int = 0, per_face: int = 10) -> GaussianSet:
    """Painted box carrying the reference detector's 'car' template."""
    return painted_box(template_pattern(detector_seed * 7919), per_face=per_face)


def toy_views(m: int = 4, size: int = 64, elevations=(0.0,)):
    return make_orbit_views(m, TOY_RADIUS, elevations, fov_y=TOY_FOV, width=size, height=size,
                            near=0.1, far=20.0)


def random_gaussians(n: int, seed: int = 0, spread: float = 0.5) -> GaussianSet:
    rng = np.random.default_rng(seed)
    return GaussianSet(rng.uniform(-spread, spread, (n, 3)), rng.uniform(0.2, 0.9, n),
                       rng.uniform(0.04, 0.15, (n, 3)), rng.normal(size=(n, 4)),
                       rng.uniform(0.0, 1.0, (n, 3)))
