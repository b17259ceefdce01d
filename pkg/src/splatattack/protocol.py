"""Evaluation metrics and the cross-task transfer / dose-response protocols."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import io
from .adapters import adapter_id, max_target_confidence, resolve_depth, resolve_detector
from .eot import EOTConfig, transforms_for
from .errors import EmptyMask, NoGroundTruth
from .gaussians import GaussianSet, side_delta
from .losses import DepthTarget
from .render import render

IOU_THRESHOLD = 0.5
GT_ALPHA_THRESHOLD = 0.5


# ------------------------------------------------------------------ detection

def iou(a, b) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def average_precision(preds, gts, threshold: float = IOU_THRESHOLD) -> float:
    """All-point interpolated AP for one class.

    ``preds``: list of ``(view_index, score, box)``; ``gts``: dict view -> boxes.
    Ties in score keep the given order (stable sort).
    """
    n_gt = sum(len(b) for b in gts.values())
    if n_gt == 0:
        raise NoGroundTruth("no ground-truth boxes for this class")
    order = sorted(range(len(preds)), key=lambda i: -preds[i][1])
    used = {v: [False] * len(b) for v, b in gts.items()}
    tp = np.zeros(len(order))
    for rank, i in enumerate(order):
        view, _, box = preds[i]
        best, best_j = threshold, -1
        for j, gt in enumerate(gts.get(view, [])):
            overlap = iou(box, gt)
            if overlap >= best and not used[view][j]:
                best, best_j = overlap, j
        if best_j >= 0:
            used[view][best_j] = True
            tp[rank] = 1.0
    if len(order) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(order) + 1)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def map_at_50(preds_per_view, gts_per_view, classes) -> float:
    """mAP@0.5 pooled over views, averaged over target classes present in GT.

    ``preds_per_view[v]``: Detections; ``gts_per_view[v]``: ``(box, class)`` pairs.
    """
    classes = list(dict.fromkeys(classes))
    present = [c for c in classes if any(cls == c for gts in gts_per_view for _, cls in gts)]
    if not present:
        raise NoGroundTruth("no ground-truth box of any target class")
    aps = []
    for c in present:
        preds = [(v, float(d.score), d.box) for v, dets in enumerate(preds_per_view)
                 for d in dets if d.class_id == c]
        gts = {v: [box for box, cls in g if cls == c] for v, g in enumerate(gts_per_view)}
        aps.append(average_precision(preds, gts))
    return float(np.mean(aps))


def gt_boxes_from_alpha(alpha, class_id: str = "car", threshold: float = GT_ALPHA_THRESHOLD):
    """Tight box around ``alpha > threshold`` pixels, or [] if none."""
    a = np.asarray(alpha.detach() if isinstance(alpha, torch.Tensor) else alpha)
    ys, xs = np.nonzero(a > threshold)
    if len(xs) == 0:
        return []
    return [((float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1)), class_id)]


# ---------------------------------------------------------------------- depth

def _np(x) -> np.ndarray:
    return np.asarray(x.detach().cpu().numpy() if isinstance(x, torch.Tensor) else x, dtype=np.float64)


def absrel_rmse(d, dgt, mask) -> tuple[float, float]:
    d, dgt, mask = _np(d), _np(dgt), np.asarray(mask, dtype=bool)
    if not mask.any():
        raise EmptyMask("AbsRel/RMSE need a nonempty mask")
    diff = d[mask] - dgt[mask]
    return float(np.mean(np.abs(diff) / dgt[mask])), float(np.sqrt(np.mean(diff ** 2)))


def rmse_log(d, dgt, mask) -> float:
    d, dgt, mask = _np(d), _np(dgt), np.asarray(mask, dtype=bool)
    if not mask.any():
        raise EmptyMask("RMSE(log) needs a nonempty mask")
    return float(np.sqrt(np.mean((np.log(d[mask]) - np.log(dgt[mask])) ** 2)))


def delta_sigma(d, d0, mask, eps: float = 1e-6):
    """ROI-mean signed log-depth displacement; ``None`` for an empty mask."""
    d, d0, mask = _np(d), _np(d0), np.asarray(mask, dtype=bool)
    if not mask.any():
        return None
    return float(np.mean(np.log(d[mask] + eps) - np.log(d0[mask] + eps)))


def sign_agreement(per_view, sign: int) -> float:
    vals = [v for v in per_view if v is not None]
    if not vals:
        return float("nan")
    return float(np.mean([1.0 if np.sign(v) == sign and v != 0 else 0.0 for v in vals]))


def tnr_det(map_clean: float, map_adv: float) -> float:
    return (map_clean - map_adv) / map_clean


def tnr_depth(absrel_clean: float, absrel_adv: float) -> float:
    return (absrel_adv - absrel_clean) / absrel_clean


@dataclass
class MetricBundle:
    map50: float
    absrel: float
    rmse: float
    rmse_log: float
    delta_sigma_mean: float
    delta_sigma_per_view: list
    sign_agreement: float

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# ------------------------------------------------------------ run evaluation

def _mean_or_nan(values):
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else float("nan")


@torch.no_grad()
def evaluate_images(clean_rgbs, adv_rgbs, alphas, geo_depths, masks, detector, depth_model,
                    classes, sign: int = 1, eps: float = 1e-6, gt_class: str | None = None):
    """Clean and adversarial MetricBundles for one detector/depth pair."""
    classes = list(classes)
    gt_class = gt_class or classes[0]
    gts = [gt_boxes_from_alpha(a, gt_class) for a in alphas]
    bundles = {}
    depth_clean = [depth_model(x) for x in clean_rgbs]
    for name, rgbs in (("clean", clean_rgbs), ("adv", adv_rgbs)):
        preds = [detector(x) for x in rgbs]
        try:
            m = map_at_50(preds, gts, classes)
        except NoGroundTruth:
            m = float("nan")
        depth = depth_clean if name == "clean" else [depth_model(x) for x in rgbs]
        abs_, rms, rlog, ds = [], [], [], []
        for d, d0, dgt, mask in zip(depth, depth_clean, geo_depths, masks):
            if not np.asarray(mask).any():
                ds.append(None)
                continue
            a, r = absrel_rmse(d, dgt, mask)
            abs_.append(a)
            rms.append(r)
            rlog.append(rmse_log(d, dgt, mask))
            ds.append(delta_sigma(d, d0, mask, eps))
        bundles[name] = MetricBundle(m, _mean_or_nan(abs_), _mean_or_nan(rms), _mean_or_nan(rlog),
                                     _mean_or_nan(ds), ds, sign_agreement(ds, sign))
    return bundles


@torch.no_grad()
def per_view_confidence(rgbs, detector, classes) -> list[float]:
    return [float(max_target_confidence(detector(x), classes)) for x in rgbs]


@torch.no_grad()
def evaluate_attack(g0: GaussianSet, g_adv: GaussianSet, cache, cfg, detector, depth_model,
                    masks=None) -> dict:
    """Summary numbers for one finished attack (proxy models, no EOT)."""
    views = [vc.view for vc in cache.views]
    masks = cache.masks if masks is None else masks
    clean = [render(g0, v, cfg.background) for v in views]
    adv = [render(g_adv, v, cfg.background) for v in views]
    bundles = evaluate_images([c.rgb for c in clean], [a.rgb for a in adv],
                              [c.alpha for c in clean], [c.geo_depth for c in clean], masks,
                              detector, depth_model, cfg.roi.classes, cfg.target.sign,
                              cfg.weights.eps)
    conf_clean = per_view_confidence([c.rgb for c in clean], detector, cfg.roi.classes)
    conf_adv = per_view_confidence([a.rgb for a in adv], detector, cfg.roi.classes)
    c, a = bundles["clean"], bundles["adv"]
    sd = side_delta(g_adv, g0)
    return {
        "detector": adapter_id(detector),
        "depth": adapter_id(depth_model),
        "confidence_clean": conf_clean,
        "confidence_adv": conf_adv,
        "map50_clean": c.map50,
        "map50_adv": a.map50,
        "tnr_det": tnr_det(c.map50, a.map50) if c.map50 and c.map50 > 0 else float("nan"),
        "absrel_clean": c.absrel,
        "absrel_adv": a.absrel,
        "rmse_clean": c.rmse,
        "rmse_adv": a.rmse,
        "rmse_log_clean": c.rmse_log,
        "rmse_log_adv": a.rmse_log,
        "tnr_depth": tnr_depth(c.absrel, a.absrel) if c.absrel > 0 else float("nan"),
        "delta_sigma_per_view": a.delta_sigma_per_view,
        "delta_sigma_mean": a.delta_sigma_mean,
        "sign_agreement": a.sign_agreement,
        "side_delta": sd,
        "side_delta_x1e3": sd * 1e3,
    }


def summarize_run(run_dir, detector=None, depth_model=None) -> dict:
    """Recompute a run's summary from its persisted artifacts only."""
    from .engine import prepare, load_run

    run = load_run(run_dir)
    cfg = run["cfg"]
    detector = resolve_detector(detector if detector is not None else run["adapters"]["detector"])
    depth_model = resolve_depth(depth_model if depth_model is not None else run["adapters"]["depth"])
    cache = prepare(run["g0"], run["views"], cfg, detector, depth_model, roi_masks=run["masks"])
    summary = evaluate_attack(run["g0"], run["g_adv"], cache, cfg, detector, depth_model)
    if run["losses"]:
        last = run["losses"][-1]
        summary["final_losses"] = {k: float(v) for k, v in last.items() if k != "iteration"}
    summary["steps"] = len(run["losses"])
    return summary


# ------------------------------------------------------------------ transfer

DIRECTIONS = ("det->depth", "depth->det")


@dataclass
class TransferCell:
    proxy: str
    target: str
    tnr: float
    direction: str


@dataclass
class TransferGrid:
    direction: str
    proxies: list
    targets: list
    cells: list                       # cells[i][j]: TransferCell
    row_means: list = field(default_factory=list)
    col_means: list = field(default_factory=list)
    overall: float = float("nan")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[c.tnr for c in row] for row in self.cells], dtype=np.float64)

    def to_rows(self, scale: float = 100.0) -> list[list]:
        header = ["proxy", *self.targets, "row_mean"]
        rows = [header]
        for name, row, rm in zip(self.proxies, self.cells, self.row_means):
            rows.append([name, *(round(c.tnr * scale, 6) for c in row), round(rm * scale, 6)])
        rows.append(["col_mean", *(round(m * scale, 6) for m in self.col_means),
                     round(self.overall * scale, 6)])
        return rows

    def to_markdown(self, scale: float = 100.0) -> str:
        rows = self.to_rows(scale)
        lines = ["| " + " | ".join(str(c) for c in rows[0]) + " |",
                 "|" + "---|" * len(rows[0])]
        for r in rows[1:]:
            lines.append("| " + " | ".join(f"{c:.2f}" if isinstance(c, float) else str(c) for c in r) + " |")
        return "\n".join(lines)


def grid_means(matrix) -> tuple[np.ndarray, np.ndarray, float]:
    """Row means, column means and the overall mean of a full grid."""
    m = np.asarray(matrix, dtype=np.float64)
    return m.mean(axis=1), m.mean(axis=0), float(m.mean())


def run_transfer_grid(g0: GaussianSet, views, proxies, targets, direction: str, base_cfg,
                      run_root=None) -> TransferGrid:
    """Single-task training on each proxy, bi-task evaluation on every target.

    ``det->depth``: proxies are detectors, each trains a det_only attack;
    targets are depth models scored by TNR_depth.
    ``depth->det``: proxies are depth models (depth_only attacks, ROIs from
    ``base_cfg.detector``); targets are detectors scored by TNR_det.
    """
    from .engine import run_attack

    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be one of {DIRECTIONS}")
    views = list(views)
    cells = []
    proxy_names, target_names = [], []
    target_models = [resolve_depth(t) if direction == "det->depth" else resolve_detector(t) for t in targets]
    target_names = [adapter_id(t) for t in target_models]
    for pi, proxy in enumerate(proxies):
        if direction == "det->depth":
            cfg = dataclasses.replace(base_cfg, protocol="det_only")
            det, dep = resolve_detector(proxy), resolve_depth(base_cfg.depth)
            name = adapter_id(det)
        else:
            cfg = dataclasses.replace(base_cfg, protocol="depth_only")
            det, dep = resolve_detector(base_cfg.detector), resolve_depth(proxy)
            name = adapter_id(dep)
        proxy_names.append(name)
        out_dir = Path(run_root) / f"proxy{pi}" if run_root is not None else None
        g_adv, record = run_attack(g0, views, cfg, det, dep, out_dir=out_dir, summarize=False)
        row = []
        with torch.no_grad():
            clean = [render(g0, v, cfg.background) for v in views]
            adv = [render(g_adv, v, cfg.background) for v in views]
            masks = record.cache.masks
            for tname, target in zip(target_names, target_models):
                if direction == "det->depth":
                    b = evaluate_images([c.rgb for c in clean], [a.rgb for a in adv],
                                        [c.alpha for c in clean], [c.geo_depth for c in clean],
                                        masks, det, target, cfg.roi.classes, cfg.target.sign)
                    value = tnr_depth(b["clean"].absrel, b["adv"].absrel)
                else:
                    b = evaluate_images([c.rgb for c in clean], [a.rgb for a in adv],
                                        [c.alpha for c in clean], [c.geo_depth for c in clean],
                                        masks, target, dep, cfg.roi.classes, cfg.target.sign)
                    value = tnr_det(b["clean"].map50, b["adv"].map50) if b["clean"].map50 > 0 else float("nan")
                row.append(TransferCell(name, tname, float(value), direction))
        cells.append(row)
    grid = TransferGrid(direction, proxy_names, target_names, cells)
    rm, cm, overall = grid_means(grid.matrix)
    grid.row_means, grid.col_means, grid.overall = rm.tolist(), cm.tolist(), overall
    return grid


# ------------------------------------------------------------- dose-response

@dataclass
class DoseRow:
    sign: int
    beta: float
    commanded: float
    mean: float
    ci_low: float
    ci_high: float
    n: int


@dataclass
class DoseResponse:
    rows: list
    slope: float
    intercept: float
    samples: list  # (sign, beta, seed, view_id, delta_sigma)

    def to_rows(self) -> list[list]:
        out = [["sign", "beta", "commanded", "mean_delta_sigma", "ci_low", "ci_high", "n"]]
        out += [[r.sign, r.beta, r.commanded, r.mean, r.ci_low, r.ci_high, r.n] for r in self.rows]
        return out

    def monotone(self) -> bool:
        """Achieved |mean| nondecreasing in beta for each sign."""
        for s in {r.sign for r in self.rows}:
            mags = [abs(r.mean) for r in sorted((r for r in self.rows if r.sign == s), key=lambda r: r.beta)]
            if any(b < a for a, b in zip(mags, mags[1:])):
                return False
        return True


def fit_line(x, y) -> tuple[float, float]:
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    a = np.stack([x, np.ones_like(x)], axis=1)
    (slope, intercept), *_ = np.linalg.lstsq(a, y, rcond=None)
    return float(slope), float(intercept)


def normal_ci(values, z: float = 1.959963984540054) -> tuple[float, float, float]:
    v = np.asarray(values, dtype=np.float64)
    mean = float(v.mean())
    if len(v) < 2:
        return mean, mean, mean
    half = z * float(v.std(ddof=1)) / math.sqrt(len(v))
    return mean, mean - half, mean + half


def dose_response_sweep(g0: GaussianSet, views, betas, signs, cfg, seeds=(0, 1, 2),
                        detector=None, depth_model=None, run_root=None, progress=None) -> DoseResponse:
    """Depth-only attacks for every (sign, beta, seed); line fit of achieved vs commanded bias."""
    from .engine import prepare, run_attack

    views = list(views)
    detector = resolve_detector(detector if detector is not None else cfg.detector)
    depth_model = resolve_depth(depth_model if depth_model is not None else cfg.depth)
    base = dataclasses.replace(cfg, protocol="depth_only")
    cache = prepare(g0, views, base, detector, depth_model)
    samples, rows = [], []
    for s in signs:
        for beta in betas:
            values = []
            for seed in seeds:
                run_cfg = dataclasses.replace(base, target=DepthTarget(int(s), float(beta)), seed=int(seed))
                out_dir = None
                if run_root is not None:
                    out_dir = Path(run_root) / f"s{int(s):+d}_b{beta:.3f}_seed{seed}"
                g_adv, _ = run_attack(g0, views, run_cfg, detector, depth_model, out_dir=out_dir,
                                      cache=cache, summarize=False)
                with torch.no_grad():
                    for vc in cache.views:
                        if vc.empty_roi:
                            continue
                        d = depth_model(render(g_adv, vc.view, cfg.background).rgb)
                        ds = delta_sigma(d, vc.depth, vc.roi.mask, cfg.weights.eps)
                        values.append(ds)
                        samples.append((int(s), float(beta), int(seed), vc.view.view_id, ds))
                if progress is not None:
                    progress(s, beta, seed)
            mean, lo, hi = normal_ci(values)
            rows.append(DoseRow(int(s), float(beta), int(s) * float(beta), mean, lo, hi, len(values)))
    slope, intercept = fit_line([smp[0] * smp[1] for smp in samples], [smp[4] for smp in samples])
    return DoseResponse(rows, slope, intercept, samples)


# ------------------------------------------------------------- EOT variance

@torch.no_grad()
def var_eot_delta_sigma(g_adv: GaussianSet, g0: GaussianSet, views, eot_cfg: EOTConfig, depth_model,
                        masks, background=(0.5, 0.5, 0.5), eps: float = 1e-6, key: int = 10_000) -> float:
    """Population variance over sampled transforms of the view-averaged delta-sigma.

    Transform ``t`` is applied to both the adversarial and the clean render of
    each view; the clean depth is re-estimated on the transformed clean image.
    """
    views = list(views)
    adv = [render(g_adv, v, background).rgb for v in views]
    clean = [render(g0, v, background).rgb for v in views]
    taus = transforms_for(eot_cfg, key)
    values = []
    for tau in taus:
        per_view = []
        for a, c, m in zip(adv, clean, masks):
            ds = delta_sigma(depth_model(tau(a)), depth_model(tau(c)), m, eps)
            if ds is not None:
                per_view.append(ds)
        values.append(float(np.mean(per_view)) if per_view else 0.0)
    return float(np.var(values))


# ------------------------------------------------------------------- reports

def write_sweep_csv(path, result: DoseResponse) -> Path:
    rows = result.to_rows()
    io.write_csv(path, rows[0], rows[1:])
    return Path(path)


def write_grid_csv(path, grid: TransferGrid, scale: float = 100.0) -> Path:
    rows = grid.to_rows(scale)
    io.write_csv(path, rows[0], rows[1:])
    return Path(path)


def summary_table(summaries: dict) -> str:
    """Markdown table with the main per-run columns (mAP in %, Side-delta x1e3)."""
    header = "| run | mAP clean | mAP adv | TNR_det | AbsRel clean | AbsRel adv | RMSE adv | TNR_depth | mean dsigma | Side-delta x1e3 |"
    lines = [header, "|" + "---|" * 10]
    for name, s in summaries.items():
        lines.append("| {} | {:.2f} | {:.2f} | {:.4f} | {:.4f} | {:.4f} | {:.4f} | {:.4f} | {:.4f} | {:.4f} |".format(
            name, 100 * s["map50_clean"], 100 * s["map50_adv"], s["tnr_det"], s["absrel_clean"],
            s["absrel_adv"], s["rmse_adv"], s["tnr_depth"], s["delta_sigma_mean"], s["side_delta_x1e3"]))
    return "\n".join(lines)
