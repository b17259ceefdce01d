"""Joint detection and depth attacks on 3D Gaussian splatting scenes."""
from .camera import View, look_at, make_orbit_views
from .engine import AttackConfig, OptimizerConfig, ROIConfig, run_attack
from .errors import (AdapterFailure, BadRatio, DegenerateCamera, EmptyMask, MalformedAsset,
                     NoGroundTruth, NonFiniteLoss, ShapeMismatch, SplatAttackError, ValueDomain)
from .eot import EOTConfig
from .gaussians import GaussianSet, load_gaussians, save_gaussians, shape_loss, side_delta
from .losses import DepthTarget, LossWeights, total_loss
from .raster import BACKEND
from .render import RenderOutput, render, render_view_set

__version__ = "0.1.0"

__all__ = [
    "View", "look_at", "make_orbit_views",
    "AttackConfig", "OptimizerConfig", "ROIConfig", "run_attack",
    "AdapterFailure", "BadRatio", "DegenerateCamera", "EmptyMask", "MalformedAsset", "NoGroundTruth",
    "NonFiniteLoss", "ShapeMismatch", "SplatAttackError", "ValueDomain",
    "EOTConfig",
    "GaussianSet", "load_gaussians", "save_gaussians", "shape_loss", "side_delta",
    "DepthTarget", "LossWeights", "total_loss",
    "BACKEND",
    "RenderOutput", "render", "render_view_set",
]
