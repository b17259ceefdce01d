"""Subprocess protocol for external (non-differentiable) task models.

The adapter writes the image as a float PFM, then runs the command with one
JSON request on stdin::

    {"image_path": "/tmp/.../image.pfm", "task": "detect" | "depth"}

and expects one JSON object on stdout::

    {"detections": [{"box": [x1, y1, x2, y2], "class": "car", "score": 0.83}, ...]}
    {"depth_path": "/path/to/depth.pfm"}

The timeout in seconds comes from ``SPLATATTACK_ADAPTER_TIMEOUT`` (default 120).
Outputs carry no gradient, so these adapters are evaluation targets only.
"""
from __future__ import annotations

import json
import os
import shlex
import subprocess
import tempfile
from pathlib import Path

import numpy as np
import torch

from ..errors import AdapterFailure
from ..gaussians import DTYPE
from ..io import read_pfm, write_pfm
from .detection import Detection

TIMEOUT_ENV = "SPLATATTACK_ADAPTER_TIMEOUT"


def _timeout() -> float:
    return float(os.environ.get(TIMEOUT_ENV, "120"))


class _SubprocessAdapter:
    differentiable = False
    thread_safe = False
    task = ""

    def __init__(self, command):
        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        if not self.command:
            raise AdapterFailure("empty adapter command")

    @property
    def id(self) -> str:
        return "subprocess:" + " ".join(self.command)

    def _call(self, image: torch.Tensor) -> dict:
        with tempfile.TemporaryDirectory(prefix="splatattack-") as tmp:
            path = write_pfm(Path(tmp) / "image.pfm", image.detach().cpu().numpy())
            request = json.dumps({"image_path": str(path), "task": self.task})
            try:
                proc = subprocess.run(self.command, input=request, capture_output=True,
                                      text=True, timeout=_timeout(), check=False)
            except (OSError, subprocess.TimeoutExpired) as exc:
                raise AdapterFailure(f"{self.id}: {exc}") from exc
            if proc.returncode != 0:
                raise AdapterFailure(f"{self.id} exited {proc.returncode}: {proc.stderr.strip()}")
            try:
                response = json.loads(proc.stdout)
            except json.JSONDecodeError as exc:
                raise AdapterFailure(f"{self.id}: response is not JSON") from exc
            if "depth_path" in response:
                response["depth"] = read_pfm(response["depth_path"])
            return response


class SubprocessDetector(_SubprocessAdapter):
    task = "detect"

    def __call__(self, image):
        return self.detect(image)

    def detect(self, image) -> list[Detection]:
        response = self._call(image)
        try:
            return [Detection(tuple(r["box"]), str(r["class"]), float(r["score"]))
                    for r in response["detections"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise AdapterFailure(f"{self.id}: malformed detections ({exc})") from exc


class SubprocessDepth(_SubprocessAdapter):
    task = "depth"

    def __call__(self, image):
        return self.estimate(image)

    def estimate(self, image) -> torch.Tensor:
        response = self._call(image)
        if "depth" not in response:
            raise AdapterFailure(f"{self.id}: response lacks depth_path")
        depth = np.asarray(response["depth"], dtype=np.float64)
        if depth.shape != tuple(image.shape[:2]):
            raise AdapterFailure(f"{self.id}: depth shape {depth.shape} != image {tuple(image.shape[:2])}")
        return torch.from_numpy(depth.copy()).to(DTYPE).clamp_min(1e-6)
