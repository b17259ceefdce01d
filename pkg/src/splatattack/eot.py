"""Expectation over transformation for the detection branch."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .gaussians import DTYPE

MODES = ("off", "partial", "on")

# named substreams of the root seed
STREAMS = {"eot": 1, "optimizer": 2, "sweep": 3, "init": 4, "eval": 5}


def substream(seed: int, name: str, *keys: int) -> np.random.Generator:
    """Independent generator for ``(seed, name, *keys)``; order-free by construction."""
    return np.random.default_rng([int(seed), STREAMS[name], *(int(k) for k in keys)])


@dataclass(frozen=True)
class EOTConfig:
    mode: str = "on"
    samples_per_view: int = 4
    brightness: tuple = (0.8, 1.2)
    contrast: tuple = (0.8, 1.2)
    noise_sigma: tuple = (0.0, 0.02)
    rotation_deg: tuple = (-5.0, 5.0)
    translation: tuple = (-0.02, 0.02)
    scale: tuple = (0.95, 1.05)
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.samples_per_view < 1:
            raise ValueError("samples_per_view must be >= 1")

    @property
    def k(self) -> int:
        return 1 if self.mode == "off" else self.samples_per_view


@dataclass(frozen=True)
class Transform:
    """A realized image operator; ``identity`` short-circuits to the input."""

    identity: bool = True
    brightness: float = 1.0
    contrast: float = 1.0
    noise_sigma: float = 0.0
    noise_seed: int = 0
    rotation_deg: float = 0.0
    tx: float = 0.0
    ty: float = 0.0
    scale: float = 1.0
    geometric: bool = False

    def params(self) -> dict:
        return {k: getattr(self, k) for k in ("brightness", "contrast", "noise_sigma",
                                              "rotation_deg", "tx", "ty", "scale")}

    def warp(self, image: torch.Tensor) -> torch.Tensor:
        """Bilinear affine resampling about the image center (border padding)."""
        h, w, _ = image.shape
        th = math.radians(self.rotation_deg)
        cos, sin = math.cos(th) / self.scale, math.sin(th) / self.scale
        # normalized coordinates; translation given as a fraction of width
        theta = torch.tensor([[cos, -sin * h / w, -2.0 * self.tx],
                              [sin * w / h, cos, -2.0 * self.ty * w / h]], dtype=image.dtype)
        grid = F.affine_grid(theta[None], [1, 3, h, w], align_corners=False)
        out = F.grid_sample(image.permute(2, 0, 1)[None], grid, mode="bilinear",
                            padding_mode="border", align_corners=False)
        return out[0].permute(1, 2, 0)

    def __call__(self, image: torch.Tensor) -> torch.Tensor:
        if self.identity:
            return image
        x = self.warp(image) if self.geometric else image
        x = (x * self.brightness - 0.5) * self.contrast + 0.5
        if self.noise_sigma > 0:
            noise = np.random.default_rng(self.noise_seed).normal(0.0, self.noise_sigma, size=tuple(x.shape))
            x = x + torch.from_numpy(noise).to(x.dtype)
        return x.clamp(0.0, 1.0)


IDENTITY = Transform()


def sample_transform(cfg: EOTConfig, rng: np.random.Generator) -> Transform:
    if cfg.mode == "off":
        return IDENTITY
    b = rng.uniform(*cfg.brightness)
    c = rng.uniform(*cfg.contrast)
    sigma = rng.uniform(*cfg.noise_sigma)
    noise_seed = int(rng.integers(0, 2 ** 63 - 1))
    if cfg.mode == "partial":
        return Transform(False, b, c, sigma, noise_seed)
    rot = rng.uniform(*cfg.rotation_deg)
    tx = rng.uniform(*cfg.translation)
    ty = rng.uniform(*cfg.translation)
    s = rng.uniform(*cfg.scale)
    return Transform(False, b, c, sigma, noise_seed, rot, tx, ty, s, geometric=True)


def transforms_for(cfg: EOTConfig, *keys: int) -> list[Transform]:
    """The ``k`` seeded transforms for a (step, view, ...) key; off -> [identity]."""
    if cfg.mode == "off":
        return [IDENTITY]
    return [sample_transform(cfg, substream(cfg.seed, "eot", *keys, t)) for t in range(cfg.k)]


def expect_over_transforms(image: torch.Tensor, cfg: EOTConfig, f, keys=(0,)) -> torch.Tensor:
    """Monte Carlo mean of ``f(tau(image))`` over the seeded transforms for ``keys``."""
    values = [torch.as_tensor(f(t(image)), dtype=DTYPE).reshape(()) for t in transforms_for(cfg, *keys)]
    return torch.stack(values).mean()
