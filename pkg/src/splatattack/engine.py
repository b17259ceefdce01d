"""Attack loop: clean cache, composite objective over views, first-order updates."""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import io
from .adapters import adapter_id, max_target_confidence, resolve_depth, resolve_detector
from .adapters.detection import DEFAULT_TARGET_CLASSES, SCORE_MIN
from .camera import View
from .eot import EOTConfig, substream, transforms_for
from .errors import AdapterFailure, NonFiniteLoss
from .gaussians import (DTYPE, FIELD_NAMES, GaussianSet, load_gaussians, project_feasible_,
                        save_gaussians)
from .losses import LOSS_COLUMNS, DepthTarget, LossWeights, log_depth_residual, total_loss
from .render import DEFAULT_BACKGROUND, RenderOutput, render
from .roi import DEFAULT_RHO, ROIMask, build_roi

log = logging.getLogger(__name__)

PROTOCOLS = ("joint", "det_only", "depth_only")


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"
    lr_means: float = 1e-4
    lr_opacities: float = 1e-3
    lr_scales: float = 1e-4
    lr_quats: float = 1e-4
    lr_colors: float = 5e-3
    betas: tuple = (0.9, 0.999)

    def groups(self, g: GaussianSet) -> list[dict]:
        return [{"params": [getattr(g, name)], "lr": getattr(self, "lr_" + name), "name": name}
                for name in FIELD_NAMES]


@dataclass(frozen=True)
class ROIConfig:
    rho: float = DEFAULT_RHO
    score_min: float = SCORE_MIN
    classes: tuple = DEFAULT_TARGET_CLASSES
    recompute_every: int = 0  # 0 keeps the clean-image ROIs for the whole run


@dataclass(frozen=True)
class AttackConfig:
    protocol: str = "joint"
    weights: LossWeights = LossWeights()
    target: DepthTarget = DepthTarget()
    eot: EOTConfig = EOTConfig()
    optimizer: OptimizerConfig = OptimizerConfig()
    steps: int = 1000
    roi: ROIConfig = ROIConfig()
    detector: str = "ref-det:0"
    depth: str = "ref-depth:0"
    background: tuple = DEFAULT_BACKGROUND
    render_every: int = 50
    init_noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"protocol must be one of {PROTOCOLS}")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")

    @property
    def effective_weights(self) -> LossWeights:
        if self.protocol == "det_only":
            return dataclasses.replace(self.weights, lambda_dep=0.0)
        if self.protocol == "depth_only":
            return dataclasses.replace(self.weights, lambda_det=0.0)
        return self.weights

    @property
    def eot_seeded(self) -> EOTConfig:
        return dataclasses.replace(self.eot, seed=self.seed)

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, d: dict | None) -> "AttackConfig":
        d = dict(d or {})
        nested = {"weights": LossWeights, "target": DepthTarget, "eot": EOTConfig,
                  "optimizer": OptimizerConfig, "roi": ROIConfig}
        for key, typ in nested.items():
            if key in d and isinstance(d[key], dict):
                d[key] = typ(**_tuples(d[key]))
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown attack config keys: {sorted(unknown)}")
        return cls(**_tuples(d))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _tuples(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


@dataclass
class ViewCache:
    view: View
    clean: RenderOutput
    depth: torch.Tensor
    detections: list
    roi: ROIMask

    @property
    def empty_roi(self) -> bool:
        return self.roi.empty


@dataclass
class CleanCache:
    views: list[ViewCache]

    @property
    def masks(self) -> list[np.ndarray]:
        return [vc.roi.mask for vc in self.views]

    @property
    def empty_views(self) -> list[str]:
        return [vc.view.view_id for vc in self.views if vc.empty_roi]


def _detach_dets(dets):
    for d in dets:
        d.score = d.score.detach()
    return dets


@torch.no_grad()
def prepare(g0: GaussianSet, views, cfg: AttackConfig, detector=None, depth_model=None,
            roi_masks=None) -> CleanCache:
    """Render, detect and estimate depth on the clean scene once per view.

    ``roi_masks`` (one boolean array per view) replaces detector-built ROIs.
    """
    detector = resolve_detector(detector if detector is not None else cfg.detector)
    depth_model = resolve_depth(depth_model if depth_model is not None else cfg.depth)
    g0 = g0.detach()
    entries = []
    for i, v in enumerate(views):
        clean = render(g0, v, cfg.background).detach()
        try:
            dets = _detach_dets(detector(clean.rgb))
            d0 = depth_model(clean.rgb).detach()
        except AdapterFailure:
            raise
        except Exception as exc:
            raise AdapterFailure(f"adapter failed on view {v.view_id}: {exc}") from exc
        if roi_masks is not None:
            mask = np.asarray(roi_masks[i], dtype=bool)
            roi = ROIMask(mask.copy(), [])
        else:
            roi = build_roi(dets, cfg.roi.classes, cfg.roi.score_min, cfg.roi.rho, (v.height, v.width))
        entries.append(ViewCache(v, clean, d0, dets, roi))
    return CleanCache(entries)


def detection_confidences(images, cfg: AttackConfig, detector, step: int = 0) -> list[list]:
    """Per view, the max target confidence under each seeded EOT sample."""
    eot = cfg.eot_seeded
    return [[max_target_confidence(detector(tau(img)), cfg.roi.classes)
             for tau in transforms_for(eot, step, vi)]
            for vi, img in enumerate(images)]


def depth_residuals(images, cache: CleanCache, depth_model, eps: float = 1e-6):
    """Log-depth residuals and masks for the views whose ROI is nonempty.

    Empty-ROI views are dropped before the depth model runs, so they add
    neither value nor gradient to the depth term.
    """
    residuals, masks = [], []
    for vc, img in zip(cache.views, images):
        if vc.empty_roi:
            continue
        residuals.append(log_depth_residual(depth_model(img), vc.depth, eps))
        masks.append(vc.roi.mask)
    return residuals, masks


def evaluate_objective(g: GaussianSet, g0: GaussianSet, cache: CleanCache, cfg: AttackConfig,
                       detector, depth_model, step: int = 0):
    """Composite loss at ``g``; returns (total, breakdown, renders)."""
    weights = cfg.effective_weights
    renders = [render(g, vc.view, cfg.background) for vc in cache.views]
    images = [out.rgb for out in renders]
    p_values = residuals = masks = None
    # a disabled branch never calls its adapter
    if weights.lambda_det > 0:
        p_values = detection_confidences(images, cfg, detector, step)
    if weights.lambda_dep > 0:
        residuals, masks = depth_residuals(images, cache, depth_model, weights.eps)
    residual_images = [img - vc.clean.rgb for vc, img in zip(cache.views, images)]
    total, breakdown = total_loss(g, g0, weights, p_values=p_values, residuals=residuals,
                                  masks=masks, target=cfg.target, residual_images=residual_images)
    return total, breakdown, renders


def make_optimizer(g: GaussianSet, cfg: OptimizerConfig):
    if cfg.kind == "adam":
        return torch.optim.Adam(cfg.groups(g), betas=tuple(cfg.betas))
    if cfg.kind == "sgd":
        return torch.optim.SGD(cfg.groups(g), lr=cfg.lr_colors)
    raise ValueError(f"unknown optimizer {cfg.kind!r}")


def attack_step(g: GaussianSet, g0: GaussianSet, cache: CleanCache, cfg: AttackConfig, optimizer,
                detector, depth_model, step: int = 0) -> dict:
    """One forward/backward/update/projection. Mutates ``g`` in place.

    The returned breakdown describes the objective at ``g`` before the update.
    """
    optimizer.zero_grad(set_to_none=False)
    total, breakdown, _ = evaluate_objective(g, g0, cache, cfg, detector, depth_model, step)
    bad = [k for k, v in breakdown.items() if not math.isfinite(v)]
    if bad:
        raise NonFiniteLoss(f"step {step}: non-finite loss term(s) {bad}")
    if total.requires_grad:
        total.backward()
    for name in FIELD_NAMES:
        grad = getattr(g, name).grad
        if grad is not None and not torch.isfinite(grad).all():
            raise NonFiniteLoss(f"step {step}: non-finite gradient for {name}")
    optimizer.step()
    project_feasible_(g)
    return breakdown


@dataclass
class RunRecord:
    trajectory: list[dict] = field(default_factory=list)
    cache: CleanCache | None = None
    summary: dict | None = None
    out_dir: Path | None = None
    grad_shapes: list = field(default_factory=list)


def initial_state(g0: GaussianSet, cfg: AttackConfig) -> GaussianSet:
    g = g0.clone()
    if cfg.init_noise > 0:
        rng = substream(cfg.seed, "init")
        noise = rng.normal(0.0, cfg.init_noise, size=tuple(g.colors.shape))
        g.colors = (g.colors + torch.from_numpy(noise).to(DTYPE)).clamp(0.0, 1.0)
    return g


def run_attack(g0: GaussianSet, views, cfg: AttackConfig, detector=None, depth_model=None,
               out_dir=None, roi_masks=None, cache: CleanCache | None = None,
               summarize: bool = True) -> tuple[GaussianSet, RunRecord]:
    """Execute ``cfg.steps`` attack steps from ``g0``; optionally persist a run directory."""
    views = list(views)
    detector = resolve_detector(detector if detector is not None else cfg.detector)
    depth_model = resolve_depth(depth_model if depth_model is not None else cfg.depth)
    weights = cfg.effective_weights
    if weights.lambda_det > 0 and not getattr(detector, "differentiable", True):
        raise AdapterFailure(f"{adapter_id(detector)} is not differentiable; it cannot drive an attack")
    if weights.lambda_dep > 0 and not getattr(depth_model, "differentiable", True):
        raise AdapterFailure(f"{adapter_id(depth_model)} is not differentiable; it cannot drive an attack")

    g0 = g0.detach().clone()
    if cache is None:
        cache = prepare(g0, views, cfg, detector, depth_model, roi_masks)
    record = RunRecord(cache=cache)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        _write_run_header(out, g0, views, cfg, detector, depth_model, cache)

    g = initial_state(g0, cfg).requires_grad_()
    optimizer = make_optimizer(g, cfg.optimizer)
    for step in range(cfg.steps):
        if cfg.roi.recompute_every and step and step % cfg.roi.recompute_every == 0:
            _refresh_rois(g, cache, cfg, detector)
        breakdown = attack_step(g, g0, cache, cfg, optimizer, detector, depth_model, step)
        record.trajectory.append({"iteration": step, **breakdown})
        record.grad_shapes.append(tuple(g.grad_flat().shape))
        if out is not None and cfg.render_every and step % cfg.render_every == 0:
            _write_renders(out / "renders" / str(step), g, views, cfg)
        log.debug("step %d total %.6g", step, breakdown["total"])

    g_adv = g.detach().clone()
    if out is not None:
        _write_run_footer(out, g_adv, record)
        if summarize:
            from .protocol import summarize_run
            record.summary = summarize_run(out, detector=detector, depth_model=depth_model)
            manifest = io.read_json(out / "manifest.json")
            manifest["summary"] = record.summary
            io.write_json(out / "manifest.json", manifest)
    elif summarize:
        from .protocol import evaluate_attack
        record.summary = evaluate_attack(g0, g_adv, cache, cfg, detector, depth_model)
    record.out_dir = out
    return g_adv, record


@torch.no_grad()
def _refresh_rois(g, cache, cfg, detector):
    for vc in cache.views:
        out = render(g.detach(), vc.view, cfg.background)
        dets = _detach_dets(detector(out.rgb))
        vc.roi = build_roi(dets, cfg.roi.classes, cfg.roi.score_min, cfg.roi.rho,
                           (vc.view.height, vc.view.width))


# ---------------------------------------------------------------- persistence

def _write_run_header(out: Path, g0, views, cfg, detector, depth_model, cache):
    out.mkdir(parents=True, exist_ok=True)
    snapshot = {"attack": cfg.to_dict(), "views": [v.to_dict() for v in views],
                "adapters": {"detector": adapter_id(detector), "depth": adapter_id(depth_model)}}
    io.write_json(out / "config.snapshot", snapshot)
    save_gaussians(g0, out / "baseline.ply", provenance="attack baseline")
    for vc in cache.views:
        io.write_mask_png(out / "masks" / f"{vc.view.view_id}.png", vc.roi.mask)


@torch.no_grad()
def _write_renders(folder: Path, g, views, cfg):
    for v in views:
        io.write_png(folder / f"{v.view_id}.png", render(g.detach(), v, cfg.background).rgb.numpy())


def _write_run_footer(out: Path, g_adv, record: RunRecord):
    rows = [[r["iteration"], *(repr(r[c]) for c in LOSS_COLUMNS)] for r in record.trajectory]
    io.write_csv(out / "losses.csv", ["iteration", *LOSS_COLUMNS], rows)
    save_gaussians(g_adv, out / "final.ply", provenance="attack result")
    snapshot = io.read_json(out / "config.snapshot")
    manifest = {"seed": snapshot["attack"]["seed"], "adapters": snapshot["adapters"],
                "steps": len(record.trajectory), "empty_roi_views": record.cache.empty_views}
    io.write_json(out / "manifest.json", manifest)


def load_run(run_dir) -> dict:
    """Everything a report needs, from the run directory alone."""
    run_dir = Path(run_dir)
    snapshot = io.read_json(run_dir / "config.snapshot")
    views = [View.from_dict(d) for d in snapshot["views"]]
    masks = [io.read_mask_png(run_dir / "masks" / f"{v.view_id}.png") for v in views]
    return {
        "cfg": AttackConfig.from_dict(snapshot["attack"]),
        "views": views,
        "masks": masks,
        "adapters": snapshot["adapters"],
        "g0": load_gaussians(run_dir / "baseline.ply"),
        "g_adv": load_gaussians(run_dir / "final.ply"),
        "losses": io.read_csv(run_dir / "losses.csv"),
        "manifest": io.read_json(run_dir / "manifest.json"),
    }
