"""Command-line entry point: ``splatattack <attack|transfer|sweep|render|report|toy>``.

Every subcommand except ``report`` and ``toy`` reads one JSON config::

    {
      "asset": "scene.ply",
      "views": {"m": 4, "radius": 4.0, "elevations_deg": [0.0], "fov_y_deg": 40.0,
                "width": 64, "height": 64, "near": 0.1, "far": 20.0},
      "attack": {...AttackConfig fields...},
      "transfer": {"direction": "det->depth", "proxies": [...], "targets": [...]},
      "sweep": {"betas": [...], "signs": [1, -1], "seeds": [0, 1, 2]},
      "out": "runs/example",
      "seed": 0
    }

``views`` may instead be ``{"file": "views.json"}`` holding a list of view
dicts. Missing keys take defaults, and the fully resolved config is written
to ``<out>/run_config.json`` before any work starts.
"""
from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

import torch

from . import io
from .adapters import adapter_id, resolve_depth, resolve_detector
from .camera import View, make_orbit_views
from .engine import AttackConfig, run_attack
from .errors import AdapterFailure, MalformedAsset, NonFiniteLoss, SplatAttackError
from .gaussians import load_gaussians, save_gaussians
from .protocol import (dose_response_sweep, evaluate_images, gt_boxes_from_alpha, run_transfer_grid,
                       summarize_run, summary_table, write_grid_csv, write_sweep_csv)
from .render import render_view_set
from .scenes import TOY_FOV, TOY_RADIUS, toy_scene

log = logging.getLogger("splatattack")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_ASSET = 3
EXIT_NONFINITE = 4
EXIT_ADAPTER = 5
EXIT_MISMATCH = 6

REPORT_TOLERANCE = 1e-9

DEFAULT_VIEWS = {"m": 4, "radius": TOY_RADIUS, "elevations_deg": [0.0],
                 "fov_y_deg": math.degrees(TOY_FOV), "width": 64, "height": 64,
                 "near": 0.1, "far": 20.0}
DEFAULT_TRANSFER = {"direction": "det->depth", "proxies": ["ref-det:0"],
                    "targets": ["ref-depth:0"]}
DEFAULT_SWEEP = {"betas": [0.02, 0.04, 0.06, 0.08, 0.10], "signs": [1, -1], "seeds": [0, 1, 2]}


# ------------------------------------------------------------------- config

def resolve_config(raw: dict, args=None) -> dict:
    """Fill defaults and apply command-line overrides; the result is JSON-ready."""
    raw = dict(raw or {})
    unknown = set(raw) - {"asset", "views", "attack", "transfer", "sweep", "out", "seed"}
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    views = dict(raw.get("views") or {})
    if "file" not in views:
        views = {**DEFAULT_VIEWS, **views}
    attack = dict(raw.get("attack") or {})
    seed = int(raw.get("seed", attack.get("seed", 0)))
    out = raw.get("out")
    if args is not None:
        if getattr(args, "seed", None) is not None:
            seed = args.seed
        if getattr(args, "steps", None) is not None:
            attack["steps"] = args.steps
        if getattr(args, "views", None) is not None:
            if "file" in views:
                raise ValueError("--views overrides the orbit count; it cannot be used with a view file")
            views["m"] = args.views
        if getattr(args, "out", None) is not None:
            out = args.out
    attack["seed"] = seed
    cfg = AttackConfig.from_dict(attack)
    return {
        "asset": raw.get("asset"),
        "views": views,
        "attack": cfg.to_dict(),
        "transfer": {**DEFAULT_TRANSFER, **(raw.get("transfer") or {})},
        "sweep": {**DEFAULT_SWEEP, **(raw.get("sweep") or {})},
        "out": out,
        "seed": seed,
    }


def build_views(spec: dict, base: Path | None = None) -> list[View]:
    if "file" in spec:
        path = Path(spec["file"])
        if base is not None and not path.is_absolute():
            path = base / path
        return [View.from_dict(d) for d in io.read_json(path)]
    return make_orbit_views(int(spec["m"]), float(spec["radius"]), tuple(spec["elevations_deg"]),
                            fov_y=math.radians(float(spec["fov_y_deg"])), width=int(spec["width"]),
                            height=int(spec["height"]), near=float(spec["near"]), far=float(spec["far"]))


def _load(args) -> tuple[dict, Path]:
    if args.config is None:
        raise ValueError("--config is required")
    path = Path(args.config)
    if not path.exists():
        raise FileNotFoundError(f"config not found: {path}")
    return resolve_config(io.read_json(path), args), path.parent


def _asset(run: dict, base: Path):
    if not run["asset"]:
        raise MalformedAsset("config has no 'asset' path")
    path = Path(run["asset"])
    if not path.is_absolute():
        path = base / path
    return load_gaussians(path)


def _out(run: dict, base: Path) -> Path:
    if not run["out"]:
        raise ValueError("no output directory: set 'out' in the config or pass --out")
    out = Path(run["out"])
    return out if out.is_absolute() else base / out


def _seed_everything(seed: int):
    # the library draws from named numpy substreams; this only pins torch internals
    torch.manual_seed(seed)


# -------------------------------------------------------------- subcommands

def cmd_attack(args) -> int:
    run, base = _load(args)
    g0 = _asset(run, base)
    views = build_views(run["views"], base)
    cfg = AttackConfig.from_dict(run["attack"])
    out = _out(run, base)
    _seed_everything(run["seed"])
    out.mkdir(parents=True, exist_ok=True)
    io.write_json(out / "run_config.json", run)
    _, record = run_attack(g0, views, cfg, out_dir=out)
    s = record.summary
    print(f"run written to {out}")
    print(f"mAP50 {s['map50_clean']:.4f} -> {s['map50_adv']:.4f}  "
          f"AbsRel {s['absrel_clean']:.4f} -> {s['absrel_adv']:.4f}  "
          f"Side-delta x1e3 {s['side_delta_x1e3']:.4f}")
    return EXIT_OK


def cmd_transfer(args) -> int:
    run, base = _load(args)
    g0 = _asset(run, base)
    views = build_views(run["views"], base)
    cfg = AttackConfig.from_dict(run["attack"])
    out = _out(run, base)
    t = run["transfer"]
    if not t["proxies"] or not t["targets"]:
        raise ValueError("transfer needs at least one proxy and one target")
    _seed_everything(run["seed"])
    out.mkdir(parents=True, exist_ok=True)
    io.write_json(out / "run_config.json", run)
    grid = run_transfer_grid(g0, views, t["proxies"], t["targets"], t["direction"], cfg, run_root=out)
    write_grid_csv(out / "grid.csv", grid)
    (out / "grid.md").write_text(grid.to_markdown() + "\n")
    io.write_json(out / "grid.json", {
        "direction": grid.direction, "proxies": grid.proxies, "targets": grid.targets,
        "tnr": grid.matrix.tolist(), "row_means": grid.row_means, "col_means": grid.col_means,
        "overall": grid.overall})
    print(grid.to_markdown())
    return EXIT_OK


def cmd_sweep(args) -> int:
    run, base = _load(args)
    g0 = _asset(run, base)
    views = build_views(run["views"], base)
    cfg = AttackConfig.from_dict(run["attack"])
    out = _out(run, base)
    sw = run["sweep"]
    if not sw["betas"] or not sw["signs"] or not sw["seeds"]:
        raise ValueError("sweep needs nonempty betas, signs and seeds")
    _seed_everything(run["seed"])
    out.mkdir(parents=True, exist_ok=True)
    io.write_json(out / "run_config.json", run)

    def progress(s, beta, seed):
        log.info("sweep sign %+d beta %.3f seed %d done", s, beta, seed)

    result = dose_response_sweep(g0, views, sw["betas"], sw["signs"], cfg, seeds=sw["seeds"],
                                 run_root=out / "runs", progress=progress)
    write_sweep_csv(out / "sweep.csv", result)
    io.write_csv(out / "sweep_samples.csv", ["sign", "beta", "seed", "view", "delta_sigma"],
                 [[s, b, sd, v, repr(ds)] for s, b, sd, v, ds in result.samples])
    io.write_json(out / "sweep.json", {"slope": result.slope, "intercept": result.intercept,
                                       "monotone": result.monotone()})
    print(f"slope {result.slope:.4f}  intercept {result.intercept:+.5f}  monotone {result.monotone()}")
    return EXIT_OK


def cmd_render(args) -> int:
    if args.asset is not None:
        raw = io.read_json(args.config) if args.config else {}
        raw["asset"] = str(Path(args.asset).resolve())
        run, base = resolve_config(raw, args), Path(args.config).parent if args.config else Path.cwd()
    else:
        run, base = _load(args)
    g0 = _asset(run, base)
    views = build_views(run["views"], base)
    cfg = AttackConfig.from_dict(run["attack"])
    out = _out(run, base)
    detector, depth_model = resolve_detector(cfg.detector), resolve_depth(cfg.depth)
    out.mkdir(parents=True, exist_ok=True)
    io.write_json(out / "run_config.json", run)
    with torch.no_grad():
        renders = render_view_set(g0, views, cfg.background)
        rgbs = [r.rgb for r in renders]
        # depth errors are scored on the object silhouette, not the far-plane background
        masks = [r.alpha.numpy() > 0.5 for r in renders]
        bundles = evaluate_images(rgbs, rgbs, [r.alpha for r in renders],
                                  [r.geo_depth for r in renders], masks, detector, depth_model,
                                  cfg.roi.classes, cfg.target.sign, cfg.weights.eps)
        dets = {}
        for v, r in zip(views, renders):
            io.write_png(out / "renders" / f"{v.view_id}.png", r.rgb.numpy())
            io.write_pfm(out / "alpha" / f"{v.view_id}.pfm", r.alpha.numpy())
            io.write_pfm(out / "geo_depth" / f"{v.view_id}.pfm", r.geo_depth.numpy())
            io.write_pfm(out / "depth" / f"{v.view_id}.pfm", depth_model(r.rgb).numpy())
            dets[v.view_id] = {
                "detections": [d.to_dict() for d in detector(r.rgb)],
                "gt_boxes": [list(b) for b in gt_boxes_from_alpha(r.alpha.numpy())],
            }
    clean = bundles["clean"]
    metrics = {"detector": adapter_id(detector), "depth": adapter_id(depth_model),
               "map50": clean.map50, "absrel": clean.absrel, "rmse": clean.rmse,
               "rmse_log": clean.rmse_log}
    io.write_json(out / "detections.json", dets)
    io.write_json(out / "metrics.json", metrics)
    print(f"mAP50 {clean.map50:.4f}  AbsRel {clean.absrel:.4f}  RMSE {clean.rmse:.4f}")
    return EXIT_OK


def _find_runs(paths) -> list[Path]:
    runs = []
    for p in paths:
        p = Path(p)
        if not p.exists():
            raise FileNotFoundError(f"no such run directory: {p}")
        if (p / "manifest.json").exists():
            runs.append(p)
        else:
            runs.extend(sorted(m.parent for m in p.rglob("manifest.json")))
    return runs


def _compare(a, b, path="") -> list[str]:
    """Leaves of ``a`` and ``b`` that differ by more than the report tolerance."""
    if isinstance(a, dict) and isinstance(b, dict):
        bad = [f"{path}/{k}: missing" for k in sorted(set(a) ^ set(b))]
        for k in sorted(set(a) & set(b)):
            bad += _compare(a[k], b[k], f"{path}/{k}")
        return bad
    if isinstance(a, (list, tuple)) and isinstance(b, (list, tuple)):
        if len(a) != len(b):
            return [f"{path}: length {len(a)} != {len(b)}"]
        return [m for i, (x, y) in enumerate(zip(a, b)) for m in _compare(x, y, f"{path}[{i}]")]
    if isinstance(a, (int, float)) and isinstance(b, (int, float)) and not isinstance(a, bool):
        if math.isnan(a) and math.isnan(b):
            return []
        return [] if abs(a - b) <= REPORT_TOLERANCE else [f"{path}: {a!r} != {b!r}"]
    return [] if a == b else [f"{path}: {a!r} != {b!r}"]


def cmd_report(args) -> int:
    if not args.runs:
        raise ValueError("report needs at least one run directory")
    runs = _find_runs(args.runs)
    if not runs:
        raise ValueError("no run directories (manifest.json) found")
    summaries, mismatches = {}, []
    for rd in runs:
        recomputed = summarize_run(rd)
        stored = io.read_json(rd / "manifest.json").get("summary")
        if stored is not None:
            mismatches += [f"{rd}: {m}" for m in _compare(stored, recomputed)]
        summaries[str(rd)] = recomputed
    table = summary_table(summaries)
    header = ["run", "map50_clean", "map50_adv", "tnr_det", "absrel_clean", "absrel_adv",
              "rmse_clean", "rmse_adv", "tnr_depth", "delta_sigma_mean", "side_delta_x1e3"]
    rows = [[name, *(repr(s[k]) for k in header[1:])] for name, s in summaries.items()]
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.md").write_text(table + "\n")
        io.write_csv(out / "report.csv", header, rows)
        io.write_json(out / "report.json", summaries)
    print(table)
    if mismatches:
        for m in mismatches:
            print("MISMATCH " + m, file=sys.stderr)
        return EXIT_MISMATCH
    return EXIT_OK


def cmd_toy(args) -> int:
    """Write the reference toy scene and a matching example config."""
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    save_gaussians(toy_scene(args.seed or 0), out / "toy.ply", provenance="toy painted box")
    config = {"asset": "toy.ply", "views": dict(DEFAULT_VIEWS),
              "attack": {"protocol": "joint", "steps": args.steps or 300}, "out": "run", "seed": 0}
    io.write_json(out / "config.json", config)
    print(f"wrote {out / 'toy.ply'} and {out / 'config.json'}")
    return EXIT_OK


# ------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="splatattack",
                                     description="Adversarial attacks on Gaussian-splat scenes "
                                                 "against detection and monocular depth.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="JSON run config")
        p.add_argument("--out", help="output directory (overrides config 'out')")
        p.add_argument("--seed", type=int, help="root seed (overrides config)")
        p.add_argument("--views", type=int, help="number of orbit views (overrides config)")
        p.add_argument("--steps", type=int, help="attack steps (overrides config)")

    common(sub.add_parser("attack", help="run one attack and write a run directory"))
    common(sub.add_parser("transfer", help="single-task proxies scored on cross-task targets"))
    common(sub.add_parser("sweep", help="signed depth-bias dose-response sweep"))
    p = sub.add_parser("render", help="clean renders, detections, depth maps and metrics")
    p.add_argument("asset", nargs="?", help="PLY asset (overrides config 'asset')")
    common(p, config_required=False)
    p = sub.add_parser("report", help="recompute summaries from run directories")
    p.add_argument("runs", nargs="*", help="run directories (searched recursively)")
    p.add_argument("--out", help="directory for report.md / report.csv / report.json")
    p = sub.add_parser("toy", help="write the toy scene and an example config")
    p.add_argument("--out", help="target directory")
    p.add_argument("--seed", type=int, help="detector seed for the painted pattern")
    p.add_argument("--steps", type=int, help="steps in the example config")
    return parser


COMMANDS = {"attack": cmd_attack, "transfer": cmd_transfer, "sweep": cmd_sweep,
            "render": cmd_render, "report": cmd_report, "toy": cmd_toy}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except MalformedAsset as e:
        print(f"error: MalformedAsset: {e}", file=sys.stderr)
        return EXIT_ASSET
    except NonFiniteLoss as e:
        print(f"error: NonFiniteLoss: {e}", file=sys.stderr)
        return EXIT_NONFINITE
    except AdapterFailure as e:
        print(f"error: AdapterFailure: {e}", file=sys.stderr)
        return EXIT_ADAPTER
    except (SplatAttackError, ValueError, FileNotFoundError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
