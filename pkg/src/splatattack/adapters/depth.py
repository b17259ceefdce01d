"""Depth contract and the built-in reference depth head."""
from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F

from ..gaussians import DTYPE

LUMA = (0.299, 0.587, 0.114)


class ReferenceDepthHead:
    """``d(x) = d_base * exp(k * blur(luma(I))(x) - k / 2)``.

    Brighter input reads as farther (``k > 0``). For inputs in [0, 1] the
    output lies in ``[d_base e^{-k/2}, d_base e^{k/2}]``; a mid-gray image
    maps to exactly ``d_base``. Blur uses a normalized Gaussian kernel with
    replicate padding, so constant images give constant depth.
    """

    differentiable = True
    thread_safe = True

    def __init__(self, seed: int = 0, d_base: float | None = None, k: float | None = None,
                 sigma: float | None = None):
        rng = np.random.default_rng([seed, 0xDE97])
        self.seed = int(seed)
        self.d_base = float(rng.uniform(3.0, 5.0)) if d_base is None else float(d_base)
        self.k = float(rng.uniform(0.8, 1.2)) if k is None else float(k)
        self.sigma = float(rng.uniform(1.0, 2.0)) if sigma is None else float(sigma)
        radius = max(1, int(math.ceil(3.0 * self.sigma)))
        xs = np.arange(-radius, radius + 1, dtype=np.float64)
        kern = np.exp(-0.5 * (xs / self.sigma) ** 2)
        kern /= kern.sum()
        self.radius = radius
        self.kernel = torch.from_numpy(kern).to(DTYPE)

    @property
    def id(self) -> str:
        return f"ref-depth:{self.seed}"

    def blur(self, plane: torch.Tensor) -> torch.Tensor:
        r = self.radius
        x = F.pad(plane[None, None], (r, r, r, r), mode="replicate")
        x = F.conv2d(x, self.kernel.reshape(1, 1, 1, -1))
        x = F.conv2d(x, self.kernel.reshape(1, 1, -1, 1))
        return x[0, 0]

    def __call__(self, image: torch.Tensor) -> torch.Tensor:
        return self.estimate(image)

    def estimate(self, image: torch.Tensor) -> torch.Tensor:
        if not torch.isfinite(image).all():
            raise ValueError("image contains NaN/Inf")
        luma = image.to(DTYPE) @ torch.tensor(LUMA, dtype=DTYPE)
        return self.d_base * torch.exp(self.k * self.blur(luma) - 0.5 * self.k)


def reference_depth_head(seed: int = 0, **kwargs) -> ReferenceDepthHead:
    return ReferenceDepthHead(seed, **kwargs)
