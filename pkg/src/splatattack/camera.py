"""Pinhole views and orbit view-set construction."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateCamera

ORTHO_TOL = 1e-5


@dataclass
class View:
    """A calibrated pinhole camera (OpenCV axes: x right, y down, z forward).

    ``cx``/``cy`` default to the image center; a crop is the same camera with
    a shifted principal point and smaller size.
    """

    world_to_camera: np.ndarray
    fov_y: float = math.radians(40.0)
    width: int = 512
    height: int = 512
    near: float = 0.01
    far: float = 100.0
    view_id: str = "v0"
    cx: float | None = None
    cy: float | None = None

    def __post_init__(self):
        self.world_to_camera = np.asarray(self.world_to_camera, dtype=np.float64).reshape(4, 4)

    @property
    def fy(self) -> float:
        return 0.5 * self.height / math.tan(0.5 * self.fov_y)

    @property
    def fx(self) -> float:
        return self.fy

    @property
    def principal(self) -> tuple[float, float]:
        cx = 0.5 * self.width if self.cx is None else self.cx
        cy = 0.5 * self.height if self.cy is None else self.cy
        return cx, cy

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_camera[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:3, 3]

    @property
    def position(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def validate(self) -> None:
        r = self.rotation
        if not np.all(np.isfinite(self.world_to_camera)):
            raise DegenerateCamera(f"{self.view_id}: non-finite extrinsics")
        if np.max(np.abs(r.T @ r - np.eye(3))) > ORTHO_TOL:
            raise DegenerateCamera(f"{self.view_id}: rotation block is not orthonormal")
        if not 0.0 < self.near < self.far:
            raise DegenerateCamera(f"{self.view_id}: need 0 < near < far")
        if not 0.0 < self.fov_y < math.pi:
            raise DegenerateCamera(f"{self.view_id}: fov_y outside (0, pi)")
        if self.width < 1 or self.height < 1:
            raise DegenerateCamera(f"{self.view_id}: empty image plane")

    def crop(self, x0: int, y0: int, width: int, height: int) -> "View":
        """Sub-window with the same focal length (fov_y rescaled to the new height)."""
        cx, cy = self.principal
        fov = 2.0 * math.atan(0.5 * height / self.fy)
        return View(self.world_to_camera.copy(), fov, width, height, self.near, self.far,
                    f"{self.view_id}@{x0},{y0}", cx - x0, cy - y0)

    def to_dict(self) -> dict:
        return {
            "view_id": self.view_id,
            "world_to_camera": self.world_to_camera.reshape(-1).tolist(),
            "fov_y": self.fov_y, "width": self.width, "height": self.height,
            "near": self.near, "far": self.far, "cx": self.cx, "cy": self.cy,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "View":
        return cls(np.asarray(d["world_to_camera"], dtype=np.float64).reshape(4, 4),
                   d["fov_y"], d["width"], d["height"], d["near"], d["far"],
                   d.get("view_id", "v0"), d.get("cx"), d.get("cy"))


ViewSet = list  # list[View]; kept as a plain list, order is significant


def look_at(position, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """World-to-camera matrix for a camera at ``position`` facing ``target``."""
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-12:
        # looking straight along the up axis; pick any perpendicular
        right = np.cross(forward, np.array([1.0, 0.0, 0.0]))
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    rot = np.stack([right, down, forward])
    w2c = np.eye(4)
    w2c[:3, :3] = rot
    w2c[:3, 3] = -rot @ position
    return w2c


def make_orbit_views(m: int, radius: float, elevations=(0.0,), *, fov_y: float = math.radians(40.0),
                     width: int = 512, height: int = 512, near: float = 0.01, far: float = 100.0,
                     degrees: bool = True) -> list[View]:
    """``m`` cameras at uniform azimuths looking at the origin (z up).

    View ``i`` sits at azimuth ``360 i / m`` and takes elevation
    ``elevations[i % len(elevations)]``. Azimuth 0 is the +x axis.
    """
    if m < 1:
        raise ValueError("need at least one view")
    if radius <= 0:
        raise ValueError("radius must be positive")
    elevations = list(elevations) or [0.0]
    views = []
    for i in range(m):
        az = 2.0 * math.pi * i / m
        el = elevations[i % len(elevations)]
        el = math.radians(el) if degrees else el
        pos = radius * np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)])
        views.append(View(look_at(pos), fov_y, width, height, near, far, f"v{i}"))
    return views
