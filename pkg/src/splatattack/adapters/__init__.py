"""Frozen task-model adapters and the id registry.

Ids: ``ref-det:<seed>``, ``ref-depth:<seed>``, ``subprocess:<command>``.
"""
from __future__ import annotations

from ..errors import AdapterFailure
from .depth import ReferenceDepthHead, reference_depth_head
from .detection import (DEFAULT_TARGET_CLASSES, SCORE_MIN, Detection, ReferenceDetector,
                        max_target_confidence, reference_detector)
from .external import SubprocessDepth, SubprocessDetector


def resolve_detector(spec):
    if not isinstance(spec, str):
        return spec
    kind, _, arg = spec.partition(":")
    if kind == "ref-det":
        return ReferenceDetector(int(arg or 0))
    if kind == "subprocess":
        return SubprocessDetector(arg)
    raise AdapterFailure(f"unknown detector id {spec!r}")


def resolve_depth(spec):
    if not isinstance(spec, str):
        return spec
    kind, _, arg = spec.partition(":")
    if kind == "ref-depth":
        return ReferenceDepthHead(int(arg or 0))
    if kind == "subprocess":
        return SubprocessDepth(arg)
    raise AdapterFailure(f"unknown depth id {spec!r}")


def adapter_id(adapter) -> str:
    return getattr(adapter, "id", type(adapter).__name__)


__all__ = [
    "DEFAULT_TARGET_CLASSES", "SCORE_MIN", "Detection", "ReferenceDetector", "ReferenceDepthHead",
    "SubprocessDetector", "SubprocessDepth", "adapter_id", "max_target_confidence",
    "reference_depth_head", "reference_detector", "resolve_depth", "resolve_detector",
]
