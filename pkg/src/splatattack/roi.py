"""Per-view ROI masks from shrunk detector boxes."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BadRatio

DEFAULT_RHO = 0.8


@dataclass
class ROIMask:
    mask: np.ndarray                      # (H, W) bool
    source_boxes: list = field(default_factory=list)

    @property
    def area(self) -> int:
        return int(self.mask.sum())

    @property
    def empty(self) -> bool:
        return self.area == 0


def shrink_box(box, rho: float, hw=None):
    """Scale a box about its center by ``rho`` and clip to the image.

    Returns ``None`` when the result is degenerate (a side of at most 1 px).
    """
    if not 0.0 < rho <= 1.0:
        raise BadRatio(f"rho must lie in (0, 1], got {rho}")
    x1, y1, x2, y2 = (float(c) for c in box)
    cx, cy = 0.5 * (x1 + x2), 0.5 * (y1 + y2)
    hw_, hh = 0.5 * rho * (x2 - x1), 0.5 * rho * (y2 - y1)
    out = [cx - hw_, cy - hh, cx + hw_, cy + hh]
    if hw is not None:
        h, w = hw
        out = [max(0.0, out[0]), max(0.0, out[1]), min(float(w), out[2]), min(float(h), out[3])]
    if out[2] - out[0] <= 1.0 or out[3] - out[1] <= 1.0:
        return None
    return tuple(out)


def rasterize_boxes(boxes, hw) -> np.ndarray:
    """Union mask; a pixel is inside when its center lies inside a box."""
    h, w = hw
    mask = np.zeros((h, w), dtype=bool)
    ys = np.arange(h) + 0.5
    xs = np.arange(w) + 0.5
    for x1, y1, x2, y2 in boxes:
        rows = (ys >= y1) & (ys <= y2)
        cols = (xs >= x1) & (xs <= x2)
        mask |= rows[:, None] & cols[None, :]
    return mask


def build_roi(dets, classes, score_min: float, rho: float, hw) -> ROIMask:
    classes = set(classes)
    boxes = []
    for d in dets:
        if d.class_id not in classes or float(d.score) < score_min:
            continue
        shrunk = shrink_box(d.box, rho, hw)
        if shrunk is not None:
            boxes.append(shrunk)
    boxes.sort()
    return ROIMask(rasterize_boxes(boxes, hw), boxes)
