"""Gaussian scene container, parameter-space penalties and PLY persistence."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from plyfile import PlyData, PlyElement

from .errors import MalformedAsset, ShapeMismatch, ValueDomain

DTYPE = torch.float64
S_MIN = 1e-4
DOMAIN_TOL = 1e-6

FIELD_NAMES = ("means", "opacities", "scales", "quats", "colors")
FIELD_WIDTHS = {"means": 3, "opacities": 1, "scales": 3, "quats": 4, "colors": 3}

PLY_PROPERTIES = (
    "x", "y", "z", "opacity",
    "scale_0", "scale_1", "scale_2",
    "rot_0", "rot_1", "rot_2", "rot_3",
    "red_f", "green_f", "blue_f",
)


@dataclass
class GaussianSet:
    """N anisotropic Gaussians with 14 free parameters each.

    ``means`` (N, 3), ``opacities`` (N,), ``scales`` (N, 3) per-axis std-dev,
    ``quats`` (N, 4) in (w, x, y, z) order and stored unnormalized,
    ``colors`` (N, 3) RGB in [0, 1].
    """

    means: torch.Tensor
    opacities: torch.Tensor
    scales: torch.Tensor
    quats: torch.Tensor
    colors: torch.Tensor

    def __post_init__(self):
        for name in FIELD_NAMES:
            value = getattr(self, name)
            if not isinstance(value, torch.Tensor):
                value = torch.as_tensor(np.asarray(value), dtype=DTYPE)
                setattr(self, name, value)
        n = self.means.shape[0] if self.means.ndim else 0
        if n < 1:
            raise ShapeMismatch("a GaussianSet needs at least one Gaussian")
        expected = {
            "means": (n, 3), "opacities": (n,), "scales": (n, 3),
            "quats": (n, 4), "colors": (n, 3),
        }
        for name, shape in expected.items():
            if tuple(getattr(self, name).shape) != shape:
                raise ShapeMismatch(
                    f"{name} has shape {tuple(getattr(self, name).shape)}, expected {shape}"
                )

    @property
    def n(self) -> int:
        return self.means.shape[0]

    def tensors(self) -> list[torch.Tensor]:
        return [getattr(self, name) for name in FIELD_NAMES]

    def map(self, fn) -> "GaussianSet":
        return GaussianSet(*(fn(t) for t in self.tensors()))

    def clone(self) -> "GaussianSet":
        return self.map(lambda t: t.detach().clone())

    def detach(self) -> "GaussianSet":
        return self.map(lambda t: t.detach())

    def requires_grad_(self, flag: bool = True) -> "GaussianSet":
        for t in self.tensors():
            t.requires_grad_(flag)
        return self

    def flat(self) -> torch.Tensor:
        """(N, 14) view in the order position, opacity, scale, quaternion, color."""
        return torch.cat([self.means, self.opacities[:, None], self.scales,
                          self.quats, self.colors], dim=1)

    def grad_flat(self) -> torch.Tensor:
        grads = []
        for name in FIELD_NAMES:
            t = getattr(self, name)
            grad = t.grad if t.grad is not None else torch.zeros_like(t)
            grads.append(grad[:, None] if grad.ndim == 1 else grad)
        return torch.cat(grads, dim=1)

    @classmethod
    def from_flat(cls, flat) -> "GaussianSet":
        flat = torch.as_tensor(flat, dtype=DTYPE)
        return cls(flat[:, 0:3], flat[:, 3], flat[:, 4:7], flat[:, 7:11], flat[:, 11:14])

    def numpy(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name).detach().cpu().numpy().copy() for name in FIELD_NAMES}

    def permute(self, index) -> "GaussianSet":
        index = torch.as_tensor(index)
        return self.map(lambda t: t[index])

    def validate(self) -> None:
        """Raise ValueDomain on non-finite values or out-of-domain fields."""
        for name in FIELD_NAMES:
            if not torch.isfinite(getattr(self, name)).all():
                raise ValueDomain(f"{name} contains NaN or Inf")
        if (self.opacities < -DOMAIN_TOL).any() or (self.opacities > 1 + DOMAIN_TOL).any():
            raise ValueDomain("opacity outside [0, 1]")
        if (self.colors < -DOMAIN_TOL).any() or (self.colors > 1 + DOMAIN_TOL).any():
            raise ValueDomain("color outside [0, 1]")
        if (self.scales <= 0).any():
            raise ValueDomain("nonpositive scale")


@dataclass
class GaussianDelta:
    """Field-wise difference ``g - g0``."""

    means: torch.Tensor
    opacities: torch.Tensor
    scales: torch.Tensor
    quats: torch.Tensor
    colors: torch.Tensor

    @classmethod
    def between(cls, g: GaussianSet, g0: GaussianSet) -> "GaussianDelta":
        _check_pair(g, g0)
        return cls(*(a - b for a, b in zip(g.tensors(), g0.tensors())))


@dataclass(frozen=True)
class ShapeWeights:
    w_mu: float = 1.0
    w_s: float = 1.0
    w_q: float = 1.0
    zeta: float = 1.0


def _check_pair(g: GaussianSet, g0: GaussianSet) -> None:
    if g.n != g0.n:
        raise ShapeMismatch(f"Gaussian counts differ: {g.n} vs {g0.n}")


def shape_loss(g: GaussianSet, g0: GaussianSet, weights: ShapeWeights = ShapeWeights()) -> torch.Tensor:
    """Quadratic drift penalty on position/scale/rotation plus a soft unit-quaternion term."""
    d = GaussianDelta.between(g, g0)
    drift = (weights.w_mu * (d.means ** 2).sum()
             + weights.w_s * (d.scales ** 2).sum()
             + weights.w_q * (d.quats ** 2).sum())
    unit = ((g.quats ** 2).sum(dim=1) - 1.0) ** 2
    return drift + weights.zeta * unit.sum()


def side_delta(g: GaussianSet, g0: GaussianSet) -> float:
    """Scalar parameter-drift summary (raw; tables multiply by 1e3).

    mean ||d_mu|| + mean ||d_q|| + mean d_alpha^2 + mean ||d_s||^2/3 + mean ||d_c||^2/3
    """
    with torch.no_grad():
        d = GaussianDelta.between(g, g0)
        value = (d.means.norm(dim=1).mean()
                 + d.quats.norm(dim=1).mean()
                 + (d.opacities ** 2).mean()
                 + (d.scales ** 2).sum(dim=1).mean() / 3.0
                 + (d.colors ** 2).sum(dim=1).mean() / 3.0)
    return float(value)


def project_feasible(g: GaussianSet, s_min: float = S_MIN) -> GaussianSet:
    """Clamp opacity and color into [0, 1] and scales to at least ``s_min``."""
    return GaussianSet(
        g.means.detach().clone(),
        g.opacities.detach().clamp(0.0, 1.0),
        g.scales.detach().clamp_min(s_min),
        g.quats.detach().clone(),
        g.colors.detach().clamp(0.0, 1.0),
    )


@torch.no_grad()
def project_feasible_(g: GaussianSet, s_min: float = S_MIN) -> GaussianSet:
    """In-place variant used by the optimizer (keeps leaf tensors alive)."""
    g.opacities.clamp_(0.0, 1.0)
    g.scales.clamp_(min=s_min)
    g.colors.clamp_(0.0, 1.0)
    return g


# --------------------------------------------------------------------- I/O

def save_gaussians(g: GaussianSet, path, provenance: str = "splatattack", units: str = "scene") -> Path:
    """Write a binary little-endian PLY plus a ``<path>.json`` sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = g.numpy()
    columns = np.concatenate([
        arr["means"], arr["opacities"][:, None], arr["scales"], arr["quats"], arr["colors"],
    ], axis=1).astype(np.float32)
    vertex = np.empty(g.n, dtype=[(name, "<f4") for name in PLY_PROPERTIES])
    for j, name in enumerate(PLY_PROPERTIES):
        vertex[name] = columns[:, j]
    PlyData([PlyElement.describe(vertex, "vertex")], text=False, byte_order="<").write(str(path))
    sidecar = {"n": g.n, "units": units, "provenance": provenance,
               "properties": list(PLY_PROPERTIES)}
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2), encoding="utf-8")
    return path


def load_gaussians(path) -> GaussianSet:
    path = Path(path)
    if not path.is_file():
        raise MalformedAsset(f"asset not found: {path}")
    try:
        ply = PlyData.read(str(path))
    except Exception as exc:  # plyfile raises a variety of parse errors
        raise MalformedAsset(f"cannot parse PLY {path}: {exc}") from exc
    if "vertex" not in ply:
        raise MalformedAsset(f"{path} has no 'vertex' element")
    vertex = ply["vertex"].data
    names = vertex.dtype.names or ()
    missing = [p for p in PLY_PROPERTIES if p not in names]
    if missing:
        raise MalformedAsset(f"{path} is missing vertex properties {missing}")
    sidecar = Path(str(path) + ".json")
    if sidecar.is_file():
        meta = json.loads(sidecar.read_text(encoding="utf-8"))
        if "n" in meta and int(meta["n"]) != len(vertex):
            raise MalformedAsset(f"sidecar declares n={meta['n']} but PLY has {len(vertex)} vertices")
    if len(vertex) < 1:
        raise MalformedAsset(f"{path} contains no Gaussians")
    cols = np.stack([np.asarray(vertex[p], dtype=np.float64) for p in PLY_PROPERTIES], axis=1)
    g = GaussianSet.from_flat(torch.from_numpy(cols))
    g.validate()
    return g
