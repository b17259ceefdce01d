"""Differentiable splatting renderer: RGB, alpha and geometric depth."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import torch

from .camera import View
from .gaussians import DTYPE, GaussianSet
from .raster import rasterize

DEFAULT_BACKGROUND = (0.5, 0.5, 0.5)
# weight of the ``far`` prior in geo_depth; pixels with alpha >> this see the plain weighted mean
GEO_DEPTH_PRIOR = 1e-6


@dataclass
class RenderOutput:
    rgb: torch.Tensor        # (H, W, 3)
    alpha: torch.Tensor      # (H, W)
    geo_depth: torch.Tensor  # (H, W), alpha-normalized center depth, ``far`` where alpha ~ 0

    def detach(self) -> "RenderOutput":
        return RenderOutput(self.rgb.detach(), self.alpha.detach(), self.geo_depth.detach())


def quat_to_rotmat(q: torch.Tensor) -> torch.Tensor:
    """Rotation matrices from (w, x, y, z) quaternions; normalizes first."""
    q = q / q.norm(dim=-1, keepdim=True)
    w, x, y, z = q.unbind(-1)
    return torch.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], dim=-1).reshape(q.shape[:-1] + (3, 3))


@dataclass
class Projected:
    """Depth-sorted screen-space splats for one view."""

    index: torch.Tensor    # indices into the GaussianSet, front to back
    means2d: torch.Tensor  # (M, 2) pixels
    conics: torch.Tensor   # (M, 3) inverse 2D covariance (A, B, C)
    cov2d: torch.Tensor    # (M, 3) (a, b, c) of the 2D covariance
    depths: torch.Tensor   # (M,) camera-space z


def project(g: GaussianSet, view: View) -> Projected:
    """Local-affine (EWA) projection with near/far and 3-sigma frustum culling."""
    view.validate()
    rot = torch.as_tensor(view.rotation, dtype=DTYPE)
    trans = torch.as_tensor(view.translation, dtype=DTYPE)
    fx, fy = view.fx, view.fy
    cx, cy = view.principal

    with torch.no_grad():
        z_all = g.means.detach() @ rot[2] + trans[2]
        keep = torch.nonzero((z_all > view.near) & (z_all < view.far)).reshape(-1)

    pc = g.means[keep] @ rot.T + trans
    x, y, z = pc.unbind(-1)
    rq = quat_to_rotmat(g.quats[keep])
    m = rq * g.scales[keep][:, None, :]
    cov3 = m @ m.transpose(1, 2)
    zeros = torch.zeros_like(z)
    jac = torch.stack([
        torch.stack([fx / z, zeros, -fx * x / (z * z)], dim=-1),
        torch.stack([zeros, fy / z, -fy * y / (z * z)], dim=-1),
    ], dim=1)
    t = jac @ rot
    cov2 = t @ cov3 @ t.transpose(1, 2)
    a, b, c = cov2[:, 0, 0], cov2[:, 0, 1], cov2[:, 1, 1]
    u = fx * x / z + cx
    v = fy * y / z + cy

    with torch.no_grad():
        det = a * c - b * b
        ok = (det > 0) & (a > 0) & (c > 0)
        rx = 3.0 * torch.sqrt(torch.where(ok, a, 0.0))
        ry = 3.0 * torch.sqrt(torch.where(ok, c, 0.0))
        ok &= (u + rx > 0) & (u - rx < view.width) & (v + ry > 0) & (v - ry < view.height)
        sel = torch.nonzero(ok).reshape(-1)
        order = torch.argsort(z.detach()[sel], stable=True)
        sel = sel[order]

    a, b, c = a[sel], b[sel], c[sel]
    det = a * c - b * b
    conics = torch.stack([c / det, -b / det, a / det], dim=-1)
    return Projected(keep[sel], torch.stack([u[sel], v[sel]], dim=-1), conics,
                     torch.stack([a, b, c], dim=-1), z[sel])


def render(g: GaussianSet, view: View, background=DEFAULT_BACKGROUND, backend=None) -> RenderOutput:
    """Render one view. Pure; safe to call concurrently."""
    p = project(g, view)
    idx = p.index
    ones = torch.ones_like(p.depths)[:, None]
    feats = torch.cat([g.colors[idx], ones, p.depths[:, None]], dim=1)
    bg = torch.tensor([*background, 0.0, 0.0], dtype=DTYPE)
    out = rasterize(p.means2d, p.conics, g.opacities[idx], feats, bg,
                    view.height, view.width, backend=backend)
    alpha = out[..., 3]
    # expected depth over the covered mass, pulled to ``far`` as coverage vanishes
    geo = (out[..., 4] + GEO_DEPTH_PRIOR * view.far) / (alpha + GEO_DEPTH_PRIOR)
    return RenderOutput(out[..., :3], alpha, geo)


def render_view_set(g: GaussianSet, views, background=DEFAULT_BACKGROUND, backend=None,
                    workers: int = 1) -> list[RenderOutput]:
    """Render every view, preserving view order."""
    views = list(views)
    if workers <= 1 or len(views) <= 1:
        return [render(g, v, background, backend) for v in views]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda v: render(g, v, background, backend), views))
