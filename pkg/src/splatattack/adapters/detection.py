"""Detector contract and the built-in reference detector."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from ..gaussians import DTYPE

DEFAULT_TARGET_CLASSES = ("car", "truck", "bus")
SCORE_MIN = 0.30


@dataclass
class Detection:
    box: tuple[float, float, float, float]  # x1, y1, x2, y2 in pixels; not differentiable
    class_id: str
    score: torch.Tensor                     # 0-dim, differentiable w.r.t. the image

    def __post_init__(self):
        x1, y1, x2, y2 = (float(c) for c in self.box)
        if not (x1 < x2 and y1 < y2):
            raise ValueError(f"degenerate box {self.box}")
        self.box = (x1, y1, x2, y2)
        if not isinstance(self.score, torch.Tensor):
            self.score = torch.tensor(float(self.score), dtype=DTYPE)

    def to_dict(self) -> dict:
        return {"box": list(self.box), "class": self.class_id, "score": float(self.score)}


def max_target_confidence(dets, classes) -> torch.Tensor:
    """Largest score among detections of the given classes; 0 when none."""
    classes = set(classes)
    if not classes:
        raise ValueError("classes must be nonempty")
    scores = [d.score for d in dets if d.class_id in classes]
    if not scores:
        return torch.zeros((), dtype=DTYPE)
    return torch.stack([s.reshape(()) for s in scores]).max()


def template_pattern(seed: int, grid: int = 3, low: float = 0.15, high: float = 0.85) -> np.ndarray:
    """Seeded ``grid x grid`` block-color pattern (values in [low, high])."""
    rng = np.random.default_rng(seed)
    return rng.uniform(low, high, size=(grid, grid, 3))


def upsample_pattern(pattern: np.ndarray, size: int) -> np.ndarray:
    """Nearest-block upsampling of a (g, g, 3) pattern to (size, size, 3)."""
    g = pattern.shape[0]
    idx = np.minimum((np.arange(size) * g) // size, g - 1)
    return pattern[idx][:, idx]


class ReferenceDetector:
    """Small frozen normalized-cross-correlation detector.

    Each class owns a seeded block pattern, rendered at several template
    sizes to form a filter bank. The score map is
    ``sigmoid(gain * (ncc - offset))`` where ``ncc`` is the normalized
    correlation of the local window with the zero-mean, unit-norm template;
    constant images therefore score ``sigmoid(-gain * offset)``. Thresholded
    score maps split into connected components; each component yields one
    detection whose score is its peak and whose box is the component's
    center extent grown by half the peak template size.
    """

    differentiable = True
    thread_safe = True

    def __init__(self, seed: int = 0, sizes=(16, 20, 24, 28), classes=("car",), grid: int = 3,
                 gain: float = 10.0, offset: float = 0.5, score_min: float = SCORE_MIN,
                 eps: float = 1e-3):
        self.seed = int(seed)
        self.sizes = tuple(int(s) for s in sizes)
        self.classes = tuple(classes)
        self.gain = float(gain)
        self.offset = float(offset)
        self.score_min = float(score_min)
        self.eps = float(eps)
        self.patterns = {cls: template_pattern(self.seed * 7919 + k, grid)
                         for k, cls in enumerate(self.classes)}
        # per class and size: block edges and the zero-mean, unit-norm block weights
        self.banks = {}
        for cls, pattern in self.patterns.items():
            bank = []
            for size in self.sizes:
                edges = _block_edges(grid, size)
                counts = np.diff(edges)
                area = counts[:, None] * counts[None, :]
                mean = (pattern * area[..., None]).sum() / (3 * size * size)
                centered = pattern - mean
                norm = np.sqrt((centered ** 2 * area[..., None]).sum())
                weights = centered / norm
                # signed integral-image taps: block sums folded onto the (g+1)^2 corners
                diff = np.zeros((grid + 1, grid))
                diff[np.arange(grid), np.arange(grid)] = -1.0
                diff[np.arange(grid) + 1, np.arange(grid)] = 1.0
                taps = np.einsum("pa,abc,qb->pqc", diff, weights, diff)
                bank.append((edges, torch.from_numpy(weights), torch.from_numpy(taps.reshape(-1, 3))))
            self.banks[cls] = bank

    @property
    def id(self) -> str:
        return f"ref-det:{self.seed}"

    def filters(self, cls: str) -> list[torch.Tensor]:
        """Dense (1, 3, t, t) filters equivalent to the block bank (for inspection)."""
        out = []
        for size, (edges, weights, _) in zip(self.sizes, self.banks[cls]):
            idx = np.repeat(np.arange(len(edges) - 1), np.diff(edges))
            out.append(weights[idx][:, idx].permute(2, 0, 1)[None].clone())
        return out

    def score_maps(self, image: torch.Tensor) -> dict[str, tuple[torch.Tensor, np.ndarray]]:
        """Per class: full-resolution score map (H, W) and the peak size index per pixel.

        Window sums come from integral images; because every template is
        piecewise constant over its blocks, the correlation is a weighted sum
        of block sums and equals a dense ``conv2d`` with the template.
        """
        h, w, _ = image.shape
        x = image.permute(2, 0, 1).to(DTYPE)
        ii = F.pad(x.cumsum(1).cumsum(2), (1, 0, 1, 0))
        ii2 = F.pad((x * x).cumsum(1).cumsum(2), (1, 0, 1, 0))
        result = {}
        for cls, bank in self.banks.items():
            maps = []
            for size, (edges, _, taps) in zip(self.sizes, bank):
                if size > h or size > w:
                    maps.append(torch.full((h, w), -torch.inf, dtype=DTYPE))
                    continue
                oh, ow = h - size + 1, w - size + 1
                n = 3 * size * size
                corners = torch.stack([ii[:, r:r + oh, c:c + ow] for r in edges for c in edges])
                corr = torch.einsum("kc,kchw->hw", taps, corners)
                s1 = _box(ii, 0, size, 0, size, oh, ow).sum(0)
                s2 = _box(ii2, 0, size, 0, size, oh, ow).sum(0)
                var = (s2 - s1 * s1 / n).clamp_min(0.0)
                ncc = corr / torch.sqrt(var + self.eps ** 2)
                logit = self.gain * (ncc - self.offset)
                half = size // 2
                pad = (half, w - ow - half, half, h - oh - half)
                maps.append(F.pad(logit, pad, value=-torch.inf))
            best, which = torch.stack(maps).max(dim=0)
            result[cls] = (torch.sigmoid(best), which.numpy())
        return result

    def __call__(self, image: torch.Tensor) -> list[Detection]:
        return self.detect(image)

    def detect(self, image: torch.Tensor) -> list[Detection]:
        if not torch.isfinite(image).all():
            raise ValueError("image contains NaN/Inf")
        h, w, _ = image.shape
        dets = []
        for cls, (score, which) in self.score_maps(image).items():
            s = score.detach().numpy()
            valid = np.isfinite(s) & (s > 0)
            hot = valid & (s >= self.score_min)
            labels, count = ndimage.label(hot)
            for lab in range(1, count + 1):
                ys, xs = np.nonzero(labels == lab)
                k = int(np.argmax(s[ys, xs]))
                py, px = int(ys[k]), int(xs[k])
                half = self.sizes[which[py, px]] / 2.0
                box = (max(0.0, xs.min() + 0.5 - half), max(0.0, ys.min() + 0.5 - half),
                       min(float(w), xs.max() + 0.5 + half), min(float(h), ys.max() + 0.5 + half))
                dets.append(Detection(box, cls, score[py, px]))
        dets.sort(key=lambda d: (-float(d.score.detach()), d.box))
        return dets


def _block_edges(grid: int, size: int) -> np.ndarray:
    idx = np.minimum((np.arange(size) * grid) // size, grid - 1)
    return np.concatenate([[0], np.nonzero(np.diff(idx))[0] + 1, [size]])


def _box(ii, r0, r1, c0, c1, oh, ow):
    """Sums over [i+r0, i+r1) x [j+c0, j+c1) for every window origin (i, j)."""
    return (ii[:, r1:r1 + oh, c1:c1 + ow] - ii[:, r0:r0 + oh, c1:c1 + ow]
            - ii[:, r1:r1 + oh, c0:c0 + ow] + ii[:, r0:r0 + oh, c0:c0 + ow])


def reference_detector(seed: int = 0, **kwargs) -> ReferenceDetector:
    return ReferenceDetector(seed, **kwargs)
