"""Front-to-back compositing of sorted 2D splats.

Two interchangeable backends:

* ``"cython"`` -- the compiled tile-binned kernel in ``_raster`` with a
  hand-written backward pass, wrapped in a ``torch.autograd.Function``;
* ``"python"`` -- a dense torch implementation differentiated by autograd.

The compiled backend is chosen at import when the extension is present.
Set ``SPLATATTACK_BACKEND=python`` to force the fallback.
"""
from __future__ import annotations

import os

import numpy as np
import torch

CUTOFF = 9.0  # squared Mahalanobis radius of the 3-sigma footprint

try:
    from . import _raster
except ImportError:  # extension not built
    _raster = None

_requested = os.environ.get("SPLATATTACK_BACKEND", "").strip().lower()
if _requested not in ("", "cython", "python"):
    raise ImportError(f"unknown SPLATATTACK_BACKEND={_requested!r}")
BACKEND = "python" if (_raster is None or _requested == "python") else "cython"

available_backends = ("cython", "python") if _raster is not None else ("python",)


def rasterize_dense(means, conics, opacities, feats, background, height, width, chunk=8192):
    """Pure torch compositing; every pixel sees every splat."""
    nf = feats.shape[1]
    ys, xs = torch.meshgrid(
        torch.arange(height, dtype=means.dtype) + 0.5,
        torch.arange(width, dtype=means.dtype) + 0.5,
        indexing="ij",
    )
    xs, ys = xs.reshape(-1), ys.reshape(-1)
    if means.shape[0] == 0:
        return background.expand(height * width, nf).reshape(height, width, nf).clone()
    pieces = []
    for start in range(0, xs.shape[0], chunk):
        dx = xs[start:start + chunk, None] - means[None, :, 0]
        dy = ys[start:start + chunk, None] - means[None, :, 1]
        q = conics[:, 0] * dx * dx + 2.0 * conics[:, 1] * dx * dy + conics[:, 2] * dy * dy
        inside = q <= CUTOFF
        alpha = torch.where(inside, opacities * torch.exp(-0.5 * torch.where(inside, q, 0.0)), 0.0)
        keep = 1.0 - alpha
        trans = torch.cumprod(torch.cat([torch.ones_like(keep[:, :1]), keep], dim=1), dim=1)
        out = (alpha * trans[:, :-1]) @ feats + trans[:, -1:] * background
        pieces.append(out)
    return torch.cat(pieces, dim=0).reshape(height, width, nf)


class _CompiledRasterize(torch.autograd.Function):
    @staticmethod
    def forward(ctx, means, conics, opacities, feats, background, height, width):
        arrays = [t.detach().to(torch.float64).contiguous().numpy()
                  for t in (means, conics, opacities, feats, background)]
        out = _raster.rasterize_forward(*arrays, int(height), int(width))
        ctx.arrays = arrays
        return torch.from_numpy(out).to(means.dtype)

    @staticmethod
    def backward(ctx, grad_out):
        g = grad_out.detach().to(torch.float64).contiguous().numpy()
        gm, gc, go, gf = _raster.rasterize_backward(*ctx.arrays, g)
        dtype = grad_out.dtype
        return (torch.from_numpy(gm).to(dtype), torch.from_numpy(gc).to(dtype),
                torch.from_numpy(go).to(dtype), torch.from_numpy(gf).to(dtype),
                None, None, None)


def rasterize(means, conics, opacities, feats, background, height, width, backend=None):
    """Composite ``M`` depth-sorted splats into an ``(H, W, F)`` image.

    ``background`` (F,) fills residual transmittance. Gradients flow to
    ``means``, ``conics``, ``opacities`` and ``feats``.
    """
    backend = backend or BACKEND
    if backend == "cython":
        if _raster is None:
            raise RuntimeError("compiled rasterizer is not built")
        return _CompiledRasterize.apply(means, conics, opacities, feats, background, height, width)
    if backend == "python":
        return rasterize_dense(means, conics, opacities, feats, background, height, width)
    raise ValueError(f"unknown backend {backend!r}")


def tile_lists(means, conics, height, width):
    """Expose the kernel's tile binning (debugging / benchmarks)."""
    if _raster is None:
        raise RuntimeError("compiled rasterizer is not built")
    return _raster.bin_tiles(np.ascontiguousarray(means, dtype=np.float64),
                             np.ascontiguousarray(conics, dtype=np.float64), height, width)
