"""Command-line interface.

Subcommands: voxelize, reconstruct, gen-data, train, infer, evaluate,
ablate. Pipeline commands resolve their configuration from defaults, an
optional config file (--config), and key=value overrides (--set), and
write the resolved snapshot next to their outputs.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure in the pipeline.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import report as report_mod
from .config import (
    PipelineConfig,
    apply_overrides,
    load_config,
    write_config_snapshot,
)
from .dpsr import DpsrConfig, dpsr_forward
from .errors import (
    ConfigError,
    CrownGenError,
    DataError,
    StageError,
)
from .meshops import marching_cubes, save_obj, save_ply_mesh
from .pipeline import (
    evaluate_cases,
    run_ablation,
    run_inference,
    train_pipeline,
)
from .refiner import load_checkpoint, save_checkpoint
from .synthetic import build_cases, load_dataset, save_dataset, stratified_split
from .voxelgrid import (
    GridSpec,
    load_ply_points,
    load_xyz,
    save_ply_points,
    save_volume,
    save_xyz,
    voxelize,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _load_cloud(path):
    if str(path).endswith(".ply"):
        return load_ply_points(path)
    return load_xyz(path)


def _save_cloud(path, cloud):
    if str(path).endswith(".ply"):
        save_ply_points(path, cloud)
    else:
        save_xyz(path, cloud)


def _resolve_config(args) -> PipelineConfig:
    config = PipelineConfig()
    if getattr(args, "config", None):
        config = load_config(args.config, config)
    overrides = getattr(args, "set", None) or []
    if overrides:
        config = apply_overrides(config, overrides)
    return config


def _grid_from_args(args, points: np.ndarray) -> GridSpec:
    dims = tuple(args.dims)
    spacing = args.spacing
    if args.origin is not None:
        origin = tuple(args.origin)
    else:
        # bounding-box center, grid centered on the cloud
        extent = np.array(dims) * spacing
        center = 0.5 * (points.min(axis=0) + points.max(axis=0))
        origin = tuple(center - extent / 2.0)
    return GridSpec(dims, spacing, origin)


def _add_grid_flags(parser):
    parser.add_argument("--dims", type=int, nargs=3, default=(128, 128, 128),
                        metavar=("D", "H", "W"))
    parser.add_argument("--spacing", type=float, default=0.15)
    parser.add_argument("--origin", type=float, nargs=3, default=None,
                        metavar=("OX", "OY", "OZ"),
                        help="grid origin in mm (default: center on the cloud)")


def _add_config_flags(parser):
    parser.add_argument("--config", help="config file (key = value lines)")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config key (repeatable)")


def cmd_voxelize(args) -> int:
    cloud = _load_cloud(args.input)
    grid = _grid_from_args(args, cloud.points)
    volume = voxelize(cloud, grid, oob=args.oob)
    save_volume(args.output, volume)
    print(f"voxelized {len(cloud)} points -> {volume.occupancy_count()} occupied "
          f"voxels ({args.output})")
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    cloud = _load_cloud(args.input)
    if not cloud.has_normals:
        raise DataError("reconstruct needs a 6-column cloud (positions + normals)")
    grid = _grid_from_args(args, cloud.points)
    chi = dpsr_forward(cloud, DpsrConfig(grid, smoothing_sigma=args.sigma))
    if args.dump_indicator:
        save_volume(args.dump_indicator, chi)
    mesh = marching_cubes(chi, 0.0)
    if str(args.output).endswith(".ply"):
        save_ply_mesh(args.output, mesh)
    else:
        save_obj(args.output, mesh)
    print(f"reconstructed {mesh.n_vertices} vertices / {mesh.n_faces} faces "
          f"({args.output})")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    config = _resolve_config(args)
    cases = build_cases(config.n_cases, config.seed, config.case_scale)
    splits = stratified_split([c.label for c in cases], config.split_ratio,
                              config.seed)
    save_dataset(args.output, cases, splits,
                 extra_meta={"seed": config.seed, "case_scale": config.case_scale,
                             "config_hash": config.config_hash()})
    write_config_snapshot(os.path.join(args.output, "resolved_config.txt"), config)
    counts = {s: splits.count(s) for s in ("train", "val", "test")}
    print(f"wrote {len(cases)} cases to {args.output} (split {counts})")
    return EXIT_OK


def cmd_train(args) -> int:
    config = _resolve_config(args)
    cases, _ = load_dataset(args.data, split="train")
    params, history = train_pipeline(cases, config)
    meta = {
        "stage": 2 if config.iterations > config.stage_boundary else 1,
        "iteration": config.iterations,
        "seed": config.seed,
        "config_hash": config.config_hash(),
    }
    save_checkpoint(args.output, params, meta)
    outdir = args.report or os.path.dirname(os.path.abspath(args.output))
    os.makedirs(outdir, exist_ok=True)
    report_mod.write_training_report(outdir, history)
    write_config_snapshot(os.path.join(outdir, "resolved_config.txt"), config)
    last = history[-1] if history else {}
    print(f"trained {config.iterations} iterations on {len(cases)} cases; "
          f"final total loss {last.get('total', float('nan')):.6f} ({args.output})")
    return EXIT_OK


def _load_params(args, config):
    if getattr(args, "checkpoint", None):
        params, _ = load_checkpoint(args.checkpoint)
        return params
    from .refiner import RefinerParams

    return RefinerParams.initialize(channels=config.channels, hidden=config.hidden,
                                    seed=config.seed,
                                    with_coarse=config.predictor == "trainable")


def cmd_infer(args) -> int:
    config = _resolve_config(args)
    cases, _ = load_dataset(args.data)
    matches = [c for c in cases if c.case_id == args.case]
    if not matches:
        raise DataError(f"case {args.case!r} not found in {args.data}")
    case = matches[0]
    params = _load_params(args, config)
    os.makedirs(args.output, exist_ok=True)
    dump_dir = os.path.join(args.output, "artifacts") if args.dump else None
    mesh, report = run_inference(case, params, config, dump_dir=dump_dir)
    save_obj(os.path.join(args.output, "crown.obj"), mesh)
    with open(os.path.join(args.output, "metrics.json"), "w", encoding="ascii") as fh:
        fh.write(report.to_json())
    write_config_snapshot(os.path.join(args.output, "resolved_config.txt"), config)
    print(f"case {case.case_id}: CD-L2 {report.cd_l2_mm2:.6f} mm^2, "
          f"fidelity {report.fidelity_mm:.6f} mm, F-score {report.f_score:.4f} "
          f"(tau {report.tau_mm} mm)")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    config = _resolve_config(args)
    cases, _ = load_dataset(args.data, split=args.split)
    params = _load_params(args, config)
    summary = evaluate_cases(cases, params, config)
    report_mod.write_eval_report(args.report, summary,
                                 extra={"split": args.split,
                                        "config_hash": config.config_hash()})
    write_config_snapshot(os.path.join(args.report, "resolved_config.txt"), config)
    overall = summary.to_dict()["overall"]
    print(f"{args.split}: n={overall['n_cases']} CD-L2 {overall['cd_l2_mm2']:.6f} "
          f"fidelity {overall['fidelity_mm']:.6f} F-score {overall['f_score']:.4f} "
          f"margin {overall['margin_mm']:.6f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    config = _resolve_config(args)
    train_cases, _ = load_dataset(args.data, split="train")
    test_cases, _ = load_dataset(args.data, split="test")
    rows = run_ablation(train_cases, test_cases, config)
    report_mod.write_ablation_report(args.report, rows,
                                     extra={"config_hash": config.config_hash()})
    write_config_snapshot(os.path.join(args.report, "resolved_config.txt"), config)
    for row in rows:
        d = row.to_dict()
        status = d["error"] or (
            f"CD-L2 {d['cd_l2_mm2']:.6f} fidelity {d['fidelity_mm']:.6f} "
            f"F-score {d['f_score']:.4f} margin {d['margin_mm']:.6f}"
        )
        print(f"PCR={d['pcr']} TP={d['tp_prompt']} CMPL={d['cmpl']}: {status}")
    if any(r.error for r in rows):
        return EXIT_NUMERIC
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crowngen",
        description="Coarse-to-fine dental crown generation toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("voxelize", help="point cloud -> occupancy volume")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--oob", choices=("reject", "clamp", "drop"), default="reject")
    _add_grid_flags(p)
    p.set_defaults(fn=cmd_voxelize)

    p = sub.add_parser("reconstruct",
                       help="oriented points -> mesh via Poisson + marching cubes")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--sigma", type=float, default=2.0,
                   help="spectral Gaussian smoothing width (voxels)")
    p.add_argument("--dump-indicator", default=None)
    _add_grid_flags(p)
    p.set_defaults(fn=cmd_reconstruct)

    p = sub.add_parser("gen-data", help="generate the synthetic benchmark")
    p.add_argument("--output", required=True)
    _add_config_flags(p)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train the refinement stage")
    p.add_argument("--data", required=True)
    p.add_argument("--output", required=True, help="checkpoint path")
    p.add_argument("--report", default=None, help="directory for history/figures")
    _add_config_flags(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("infer", help="run the pipeline on one case")
    p.add_argument("--data", required=True)
    p.add_argument("--case", required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--output", required=True)
    p.add_argument("--dump", action="store_true",
                   help="write every intermediate artifact")
    _add_config_flags(p)
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("evaluate", help="metrics over a dataset split")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--report", required=True)
    _add_config_flags(p)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("ablate", help="toggle study over the benchmark")
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True)
    _add_config_flags(p)
    p.set_defaults(fn=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except StageError as exc:
        print(f"pipeline failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except CrownGenError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    raise SystemExit(main())
