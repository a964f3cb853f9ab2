"""Command line front-end.

    cloudiff <synth|filter|register|optimize|detect|evaluate|sweep>
             [--config FILE] [--key value ...]

Exit codes: 0 success, 2 validation error (bad arguments, malformed inputs),
3 pipeline failure (a stage raised while processing valid inputs).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .change_detect import detect, write_report
from .depth_filter import filter_sequence, write_depth
from .evaluation import CSV_FIELDS, metrics_csv_row
from .geometry import voxel_downsample
from .pipeline import (
    compute_ate,
    fuse_poses,
    pipeline_registration_config,
    register_against_prior,
    run_detect,
    scene_bounds,
)
from .pose_graph import PriorMeasurement, load_trajectory, save_trajectory
from .registration import RegistrationTarget
from .runconfig import SWEEPABLE, RunConfig, build_config
from .synthworld import generate_dataset, load_dataset, validate_dataset

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_PIPELINE = 3

_SWEEP_CSV_FIELDS = CSV_FIELDS + ["parameter", "value"]


class ValidationError(Exception):
    pass


def _dataset_label(cfg: RunConfig) -> str:
    return Path(cfg.dataset).name or "dataset"


def _load_dataset(cfg: RunConfig):
    root = Path(cfg.dataset)
    if not root.is_dir():
        raise ValidationError(f"dataset directory {root} does not exist")
    problems = validate_dataset(root)
    if problems:
        raise ValidationError(f"invalid dataset {root}: " + "; ".join(problems))
    return load_dataset(root)


def _require_output(cfg: RunConfig) -> Path:
    if not cfg.output:
        raise ValidationError("an --output path is required")
    return Path(cfg.output)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(cfg: RunConfig) -> int:
    out = _require_output(cfg)
    if out.exists() and any(out.iterdir()) and not cfg.overwrite:
        raise ValidationError(f"{out} is not empty; pass --overwrite to replace it")
    generate_dataset(out, seed=cfg.seed, noise=cfg.noise, density=cfg.density,
                     height=cfg.height, speed=cfg.speed, rate=cfg.rate,
                     pitch_down_deg=cfg.pitch_down_deg, variant=cfg.variant)
    problems = validate_dataset(out)
    if problems:
        raise RuntimeError("generated dataset failed validation: " + "; ".join(problems))
    print(f"dataset written to {out}")
    return EXIT_OK


def cmd_filter(cfg: RunConfig) -> int:
    ds = _load_dataset(cfg)
    out = Path(cfg.output) if cfg.output else ds.root / "filtered"
    out.mkdir(parents=True, exist_ok=True)
    poses = ds.gt_poses if cfg.poses == "ground-truth" else ds.odom_poses
    frames = filter_sequence(ds.keyframes(poses), cfg.filter_config())
    for k, frame in enumerate(frames):
        write_depth(out / f"{k:06d}.bin", frame.depth)
    kept = sum(f.depth.valid_count() for f in frames)
    total = sum(f.depth.data.size for f in frames)
    print(f"filtered {len(frames)} depth images to {out} "
          f"({kept}/{total} pixels kept)")
    return EXIT_OK


def cmd_register(cfg: RunConfig) -> int:
    ds = _load_dataset(cfg)
    out = Path(cfg.output) if cfg.output else ds.root / "priors.json"
    frames = filter_sequence(ds.keyframes(ds.odom_poses), cfg.filter_config())
    prior_ds = voxel_downsample(ds.prior_cloud, cfg.rho_p)
    reg = cfg.registration_config()
    target = RegistrationTarget(prior_ds, k=reg.knn_for_covariance,
                                workers=reg.thread_count)
    summary = register_against_prior(frames, ds.odom_poses, target, reg,
                                     cloud_resolution=cfg.rho_p,
                                     max_depth=cfg.th_d)
    doc = {
        "attempted": summary.attempted,
        "accepted": summary.accepted,
        "measurements": [
            {
                "index": m.index,
                "timestamp": float(ds.timestamps[m.index]),
                "position": m.p.tolist(),
                "quaternion_wxyz": m.q.tolist(),
                "information": m.information.tolist(),
            }
            for m in summary.measurements
        ],
    }
    out.write_text(json.dumps(doc, indent=2))
    print(f"accepted {summary.accepted}/{summary.attempted} window "
          f"registrations -> {out}")
    return EXIT_OK


def cmd_optimize(cfg: RunConfig) -> int:
    ds = _load_dataset(cfg)
    priors_path = Path(cfg.est) if cfg.est else ds.root / "priors.json"
    if not priors_path.is_file():
        raise ValidationError(f"priors file {priors_path} not found "
                              "(run `cloudiff register` first or pass --est)")
    doc = json.loads(priors_path.read_text())
    priors = [
        PriorMeasurement(index=m["index"], p=m["position"],
                         q=m["quaternion_wxyz"],
                         information=np.asarray(m["information"]))
        for m in doc["measurements"]
    ]
    poses, result = fuse_poses(ds.odom_poses, ds.odometry_edges(), priors)
    out = Path(cfg.output) if cfg.output else ds.root / "fused.txt"
    save_trajectory(out, ds.timestamps, poses)
    ate = compute_ate(ds.timestamps, poses, ds.timestamps, ds.gt_poses)
    print(f"optimized {len(poses)} poses ({result.iterations} iterations, "
          f"cost {result.cost_initial:.3e} -> {result.cost_final:.3e}); "
          f"ATE rmse {ate.rmse:.4f} m -> {out}")
    return EXIT_OK


def _write_metrics_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=_SWEEP_CSV_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in _SWEEP_CSV_FIELDS})


def cmd_detect(cfg: RunConfig) -> int:
    from .plots import plot_change_report

    ds = _load_dataset(cfg)
    out = _require_output(cfg)
    out.mkdir(parents=True, exist_ok=True)
    outcome = run_detect(ds, cfg.poses, change=cfg.change_config(),
                         filt=cfg.filter_config(),
                         registration=cfg.registration_config())
    write_report(out, outcome.report)
    row = metrics_csv_row(_dataset_label(cfg), cfg.noise, cfg.th_f, cfg.th_ch,
                          outcome.metrics)
    row.update({"parameter": "", "value": ""})
    _write_metrics_csv(out / "metrics.csv", [row])
    plot_change_report(outcome.report, out / "report.svg",
                       trajectory=outcome.poses)
    extra = {}
    if outcome.ate is not None:
        extra["ate_rmse"] = outcome.ate.rmse
    if outcome.registration is not None:
        extra["registrations_accepted"] = outcome.registration.accepted
        extra["registrations_attempted"] = outcome.registration.attempted
    summary = outcome.report.summary()
    summary.update(extra)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    d = outcome.metrics.as_dict()
    scores = " ".join(f"{k}={'na' if d[k] is None else f'{d[k]:.3f}'}"
                      for k in ("R_new", "P_new", "R_rm", "P_rm"))
    print(f"detection with {cfg.poses} poses: {scores} -> {out}")
    return EXIT_OK


def _sweep_point(args) -> dict:
    """One sweep evaluation in a worker process."""
    dataset_path, cfg_dict, parameter, value = args
    cfg = RunConfig(**cfg_dict)
    setattr(cfg, parameter, type(getattr(cfg, parameter))(value))
    cfg.validate()
    ds = load_dataset(dataset_path)
    outcome = run_detect(ds, cfg.poses, change=cfg.change_config(),
                         filt=cfg.filter_config(),
                         registration=cfg.registration_config())
    row = metrics_csv_row(Path(dataset_path).name, cfg.noise, cfg.th_f,
                          cfg.th_ch, outcome.metrics)
    row.update({"parameter": parameter, "value": f"{value:g}"})
    return row


def cmd_sweep(cfg: RunConfig) -> int:
    from .plots import plot_sweep

    if cfg.parameter not in SWEEPABLE:
        raise ValidationError(
            f"unknown sweep parameter {cfg.parameter!r}; valid names: "
            + ", ".join(SWEEPABLE))
    if not cfg.values:
        raise ValidationError("sweep needs --values, e.g. --values 5,10,15")
    try:
        values = [float(v) for v in cfg.values.split(",") if v.strip()]
    except ValueError as exc:
        raise ValidationError(f"bad --values list: {exc}") from exc
    if not values:
        raise ValidationError("sweep needs at least one value")
    ds = _load_dataset(cfg)  # validates up front
    out = _require_output(cfg)
    out.mkdir(parents=True, exist_ok=True)

    from dataclasses import asdict
    jobs = [(cfg.dataset, asdict(cfg), cfg.parameter, v) for v in values]
    if cfg.threads > 1:
        with ProcessPoolExecutor(max_workers=min(cfg.threads, len(jobs))) as pool:
            rows = list(pool.map(_sweep_point, jobs))
    else:
        rows = [_sweep_point(job) for job in jobs]

    _write_metrics_csv(out / "sweep.csv", rows)
    for row in rows:
        row[cfg.parameter] = row["value"]  # x-axis source for the plot
    plot_sweep(rows, cfg.parameter, out / "sweep.svg")
    print(f"swept {cfg.parameter} over {values} -> {out / 'sweep.csv'}, "
          f"{out / 'sweep.svg'}")
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig) -> int:
    if not cfg.est or not cfg.gt:
        raise ValidationError("evaluate needs --est and --gt trajectory files")
    for p in (cfg.est, cfg.gt):
        if not Path(p).is_file():
            raise ValidationError(f"trajectory file {p} not found")
    est_ts, est_poses = load_trajectory(cfg.est)
    gt_ts, gt_poses = load_trajectory(cfg.gt)
    try:
        report = compute_ate(est_ts, est_poses, gt_ts, gt_poses, align=cfg.align)
    except ValueError as exc:
        raise ValidationError(str(exc)) from exc
    print(f"ATE over {report.pairs} associated poses: "
          f"RMSE {report.rmse:.6f} m, STD {report.std:.6f} m, "
          f"MAX {report.max:.6f} m")
    if cfg.output:
        with open(cfg.output, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["rmse", "std", "max", "pairs"])
            writer.writerow([report.rmse, report.std, report.max, report.pairs])
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument plumbing
# ---------------------------------------------------------------------------

_COMMANDS = {
    "synth": cmd_synth,
    "filter": cmd_filter,
    "register": cmd_register,
    "optimize": cmd_optimize,
    "detect": cmd_detect,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
}


def _add_option_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat key = value config file")
    parser.add_argument("--dataset", help="dataset directory")
    parser.add_argument("--output", help="output file or directory")
    parser.add_argument("--overwrite", action="store_const", const=True,
                        help="allow writing into a non-empty directory")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--noise", choices=["none", "small", "big"])
    parser.add_argument("--variant", choices=["none", "mirror", "dark"])
    parser.add_argument("--density", type=float, help="surface sampling pts/m^2")
    parser.add_argument("--height", type=float, help="trajectory height (m)")
    parser.add_argument("--speed", type=float)
    parser.add_argument("--rate", type=float, help="keyframe rate (Hz)")
    parser.add_argument("--pitch-down-deg", dest="pitch_down_deg", type=float)
    parser.add_argument("--delta-d", dest="delta_d", type=float,
                        help="temporal filter depth agreement (m)")
    parser.add_argument("--alpha", type=int,
                        help="temporal filter success count threshold")
    parser.add_argument("--window", type=int)
    parser.add_argument("--th-d", dest="th_d", type=float)
    parser.add_argument("--th-f", dest="th_f", type=float)
    parser.add_argument("--th-ch", dest="th_ch", type=float)
    parser.add_argument("--rho-o", dest="rho_o", type=float)
    parser.add_argument("--rho-p", dest="rho_p", type=float)
    parser.add_argument("--max-iterations", dest="max_iterations", type=int)
    parser.add_argument("--translation-epsilon", dest="translation_epsilon", type=float)
    parser.add_argument("--rotation-epsilon", dest="rotation_epsilon", type=float)
    parser.add_argument("--correspondence-distance", dest="correspondence_distance",
                        type=float)
    parser.add_argument("--knn-for-covariance", dest="knn_for_covariance", type=int)
    parser.add_argument("--fitness-threshold", dest="fitness_threshold", type=float)
    parser.add_argument("--max-translation", dest="max_translation", type=float)
    parser.add_argument("--poses", choices=["ground-truth", "odometry", "fused"])
    parser.add_argument("--threads", type=int)
    parser.add_argument("--align", action="store_const", const=True,
                        help="SE(3)-align before ATE")
    parser.add_argument("--est", help="estimated trajectory / priors file")
    parser.add_argument("--gt", help="ground-truth trajectory file")
    parser.add_argument("--parameter", help="sweep knob name")
    parser.add_argument("--values", help="comma-separated sweep values")


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cloudiff",
        description="point cloud change detection against an outdated prior map")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        _add_option_args(p)
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    overrides = {k: v for k, v in vars(args).items()
                 if k not in ("command", "config") and v is not None}
    try:
        cfg = build_config(args.config, overrides)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        return _COMMANDS[args.command](cfg)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # pipeline failure
        print(f"pipeline failure: {exc}", file=sys.stderr)
        return EXIT_PIPELINE


if __name__ == "__main__":
    sys.exit(main())
