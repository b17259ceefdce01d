"""Terms of the composite attack objective and their aggregation.

Per-view inputs are plain sequences in view order; every reduction walks
them in that order so results are deterministic.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch

from .errors import ShapeMismatch
from .gaussians import DTYPE, GaussianSet, ShapeWeights, shape_loss

RING_LOW = 0.25
RING_HIGH = 0.5


@dataclass(frozen=True)
class LossWeights:
    lambda_det: float = 1.0
    lambda_dep: float = 1.0
    lambda_shape: float = 0.2
    lambda_print: float = 0.1
    alpha_tv: float = 1e-4
    gamma_hf: float = 1e-5
    w_mu: float = 1.0
    w_s: float = 1.0
    w_q: float = 1.0
    zeta: float = 1.0
    delta: float = 1e-6
    eps: float = 1e-6
    eps_inf: float = 0.3

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.delta <= 0 or self.eps <= 0:
            raise ValueError("delta and eps must be positive")

    @property
    def shape(self) -> ShapeWeights:
        return ShapeWeights(self.w_mu, self.w_s, self.w_q, self.zeta)


@dataclass(frozen=True)
class DepthTarget:
    sign: int = 1
    beta: float = 0.05

    def __post_init__(self):
        if self.sign not in (1, -1):
            raise ValueError("sign must be +1 or -1")
        if self.beta < 0:
            raise ValueError("beta must be nonnegative")

    @property
    def value(self) -> float:
        return self.sign * self.beta


def _scalar(x) -> torch.Tensor:
    return x.reshape(()) if isinstance(x, torch.Tensor) else torch.tensor(float(x), dtype=DTYPE)


def det_loss(p_values, delta: float = 1e-6) -> torch.Tensor:
    """Mean over views of the mean over EOT samples of ``-log(1 - p + delta)``.

    ``p_values[v][t]`` is the max target confidence of view ``v`` under sample ``t``.
    """
    per_view = []
    for samples in p_values:
        terms = [-torch.log(1.0 - _scalar(p) + delta) for p in samples]
        per_view.append(torch.stack(terms).mean())
    if not per_view:
        return torch.zeros((), dtype=DTYPE)
    return torch.stack(per_view).mean()


def log_depth_residual(d: torch.Tensor, d0: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    if d.shape != d0.shape:
        raise ShapeMismatch(f"depth maps differ: {tuple(d.shape)} vs {tuple(d0.shape)}")
    return torch.log(d + eps) - torch.log(d0 + eps)


def depth_loss(residuals, masks, target: DepthTarget) -> torch.Tensor:
    """Mean over nonempty-ROI views of the ROI-mean of ``(residual - s*beta)^2``.

    Views whose mask is empty are skipped entirely (no value, no gradient);
    with no usable view the term is 0.
    """
    per_view = []
    for res, mask in zip(residuals, masks):
        mask = torch.as_tensor(np.asarray(mask, dtype=bool))
        if not bool(mask.any()):
            continue
        per_view.append(((res[mask] - target.value) ** 2).mean())
    if not per_view:
        return torch.zeros((), dtype=DTYPE)
    return torch.stack(per_view).mean()


def linf_budget_loss(delta_colors: torch.Tensor, eps_inf: float) -> torch.Tensor:
    """Hinge on the largest absolute color change (hard max, subgradient)."""
    return torch.clamp(delta_colors.abs().max() - eps_inf, min=0.0)


def _safe_norm(dx: torch.Tensor, dy: torch.Tensor) -> torch.Tensor:
    sq = dx * dx + dy * dy
    nz = sq > 0
    return torch.where(nz, torch.sqrt(torch.where(nz, sq, 1.0)), 0.0)


def tv_image(r: torch.Tensor) -> torch.Tensor:
    """Isotropic TV of one (H, W[, C]) image, forward differences, zero at the far edges."""
    if r.ndim == 2:
        r = r[..., None]
    dx = torch.zeros_like(r)
    dy = torch.zeros_like(r)
    dx[:, :-1] = r[:, 1:] - r[:, :-1]
    dy[:-1, :] = r[1:, :] - r[:-1, :]
    return _safe_norm(dx, dy).sum()


def tv_loss(residual_images) -> torch.Tensor:
    terms = [tv_image(r) for r in residual_images]
    return torch.stack(terms).mean() if terms else torch.zeros((), dtype=DTYPE)


def ring_mask(h: int, w: int, low: float = RING_LOW, high: float = RING_HIGH) -> torch.Tensor:
    """Ones where the centered normalized radial frequency lies in [low, high]."""
    fy = np.fft.fftshift(np.fft.fftfreq(h))
    fx = np.fft.fftshift(np.fft.fftfreq(w))
    r = np.sqrt(fy[:, None] ** 2 + fx[None, :] ** 2)
    return torch.from_numpy(((r >= low) & (r <= high)).astype(np.float64))


def hf_image(r: torch.Tensor) -> torch.Tensor:
    if r.ndim == 2:
        r = r[..., None]
    h, w, _ = r.shape
    spec = torch.fft.fftshift(torch.fft.fft2(r.permute(2, 0, 1)), dim=(-2, -1))
    mag = torch.abs(spec)
    return (ring_mask(h, w)[None] * mag).sum()


def hf_loss(residual_images) -> torch.Tensor:
    terms = [hf_image(r) for r in residual_images]
    return torch.stack(terms).mean() if terms else torch.zeros((), dtype=DTYPE)


def combine_print(linf, tv, hf, weights: LossWeights):
    return linf + weights.alpha_tv * tv + weights.gamma_hf * hf


def print_loss(delta_colors, residual_images, weights: LossWeights) -> tuple[torch.Tensor, dict]:
    linf = linf_budget_loss(delta_colors, weights.eps_inf)
    tv = tv_loss(residual_images)
    hf = hf_loss(residual_images)
    return combine_print(linf, tv, hf, weights), {"linf": linf, "tv": tv, "hf": hf}


def combine(terms: dict, weights: LossWeights) -> torch.Tensor:
    """Weighted sum of the four top-level terms (missing terms count as 0)."""
    zero = torch.zeros((), dtype=DTYPE)
    return (weights.lambda_det * terms.get("det", zero)
            + weights.lambda_dep * terms.get("dep", zero)
            + weights.lambda_shape * terms.get("shape", zero)
            + weights.lambda_print * terms.get("print", zero))


LOSS_COLUMNS = ("det", "dep", "shape", "linf", "tv", "hf", "total")


def total_loss(g: GaussianSet, g0: GaussianSet, weights: LossWeights, *, p_values=None,
               residuals=None, masks=None, target: DepthTarget | None = None,
               residual_images=None) -> tuple[torch.Tensor, dict]:
    """Full objective plus a per-term breakdown (floats) for logging.

    A branch whose inputs are omitted contributes 0; the engine omits the
    detection (depth) branch whenever its weight is 0, so single-task runs
    never touch the disabled adapter.
    """
    zero = torch.zeros((), dtype=DTYPE)
    terms = {
        "det": det_loss(p_values, weights.delta) if p_values is not None else zero,
        "dep": depth_loss(residuals, masks, target) if residuals is not None else zero,
        "shape": shape_loss(g, g0, weights.shape),
    }
    pr, parts = print_loss(g.colors - g0.colors, residual_images or [], weights)
    terms["print"] = pr
    total = combine(terms, weights)
    breakdown = {"det": terms["det"], "dep": terms["dep"], "shape": terms["shape"], **parts,
                 "total": total}
    return total, {k: float(v.detach()) for k, v in breakdown.items()}
