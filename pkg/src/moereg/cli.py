"""Command-line harness: generate, register, ablate, dump-routing.

Every command is deterministic per (config, seed); pair-level work fans out
over --jobs processes and reports are merged in pair order. The PSMOE_LOG
environment variable controls log verbosity.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import cloudio, figures, report as report_mod
from .config import ExperimentConfig, apply_axis, config_from_dict, default_config, load_config
from .errors import RegistrationError
from .geometry import RigidTransform
from .registration import register_pair
from .scenes import ScenePair, generate_scene

log = logging.getLogger("moereg")


def _setup_logging() -> None:
    level = os.environ.get("PSMOE_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")


def _pair_dir(root: Path, index: int) -> Path:
    return root / f"pair_{index:04d}"


def _save_pair(root: Path, index: int, seed: int, scene: ScenePair) -> dict:
    pdir = _pair_dir(root, index)
    pdir.mkdir(parents=True, exist_ok=True)
    cloudio.write_cloud(scene.source, pdir / "source.xyz")
    cloudio.write_cloud(scene.target, pdir / "target.xyz")
    _write_json(pdir / "ground_truth.json", {
        "rotation": scene.ground_truth.rotation.tolist(),
        "translation": scene.ground_truth.translation.tolist(),
        "overlap_fraction": scene.overlap_fraction,
        "seed": seed,
    })
    return {"index": index, "seed": seed, "dir": pdir.name}


def _load_pair(root: Path, index: int) -> ScenePair:
    pdir = _pair_dir(root, index)
    gt = json.loads((pdir / "ground_truth.json").read_text(encoding="utf-8"))
    return ScenePair(
        source=cloudio.read_cloud(pdir / "source.xyz"),
        target=cloudio.read_cloud(pdir / "target.xyz"),
        ground_truth=RigidTransform(np.asarray(gt["rotation"]),
                                    np.asarray(gt["translation"])),
        overlap_fraction=float(gt["overlap_fraction"]),
        seed=int(gt["seed"]),
    )


def _run_one(config_dict: dict, index: int, seed: int, data_dir: str | None) -> dict:
    """Worker: build/load the pair, register it, return its report row."""
    config = config_from_dict(config_dict)
    if data_dir is None:
        scene = generate_scene(seed, config.scene)
    else:
        scene = _load_pair(Path(data_dir), index)
    result = register_pair(scene, config, seed=seed)
    return report_mod.result_row(index, seed, result)


def _run_pairs(config: ExperimentConfig, pairs: list, data_dir: str | None,
               jobs: int) -> list:
    args = [(config.to_json(), idx, seed, data_dir) for idx, seed in pairs]
    if jobs <= 1:
        rows = [_run_one(*a) for a in args]
    else:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_run_one, *zip(*args)))
    return sorted(rows, key=lambda r: r["pair"])


# ---------------------------------------------------------------------------
# commands


def cmd_generate(config: ExperimentConfig, out_dir: Path) -> int:
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for index, seed in enumerate(config.pair_seeds()):
        scene = generate_scene(seed, config.scene)
        entries.append(_save_pair(out_dir, index, seed, scene))
        log.info("generated pair %d (seed %d, overlap %.3f)",
                 index, seed, scene.overlap_fraction)
    _write_json(out_dir / "manifest.json", {
        "schema_version": report_mod.SCHEMA_VERSION,
        "num_pairs": len(entries),
        "pairs": entries,
        "config": config.to_json(),
    })
    return 0


def cmd_register(config: ExperimentConfig, data_dir: Path, out_dir: Path,
                 jobs: int = 1, render: bool = True) -> int:
    manifest_path = data_dir / "manifest.json"
    if not manifest_path.is_file():
        print(f"error: no manifest at {manifest_path}", file=sys.stderr)
        return 2
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    pairs = [(entry["index"], entry["seed"]) for entry in manifest["pairs"]]
    rows = _run_pairs(config, pairs, str(data_dir), jobs)
    report = report_mod.build_report(config, rows)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(report_mod.report_json(report), encoding="utf-8")
    (out_dir / "report.csv").write_text(report_mod.report_csv(rows), encoding="utf-8")
    if render:
        fig_dir = out_dir / "figures"
        fig_dir.mkdir(exist_ok=True)
        figures.save_metrics_figure(rows, fig_dir / "metrics.png")
    log.info("register: %d pairs, RR %.3f", len(rows),
             report["aggregates"]["registration_recall"])
    return 0


def cmd_ablate(config: ExperimentConfig, axis: str, values: list, out_dir: Path,
               jobs: int = 1, render: bool = True, data_dir: Path | None = None) -> int:
    out_dir.mkdir(parents=True, exist_ok=True)
    pairs = list(enumerate(config.pair_seeds()))
    table_rows = []
    for value in values:
        derived = apply_axis(config, axis, value)
        rows = _run_pairs(derived, pairs, str(data_dir) if data_dir else None, jobs)
        sub_dir = out_dir / f"value_{str(value).replace('.', 'p')}"
        sub_dir.mkdir(exist_ok=True)
        report = report_mod.build_report(derived, rows)
        (sub_dir / "report.json").write_text(report_mod.report_json(report), encoding="utf-8")
        (sub_dir / "report.csv").write_text(report_mod.report_csv(rows), encoding="utf-8")
        table_rows.append({"value": value,
                           "aggregates": report["aggregates"],
                           "report": sub_dir.name})
        log.info("ablate %s=%s: mean IR %.4f", axis, value,
                 report["aggregates"]["mean_inlier_ratio"])
    table = {"schema_version": report_mod.SCHEMA_VERSION, "axis": axis,
             "rows": table_rows, "config": config.to_json()}
    _write_json(out_dir / "ablation.json", table)
    (out_dir / "ablation.txt").write_text(
        report_mod.ablation_table_text(axis, table_rows), encoding="utf-8")
    (out_dir / "ablation.csv").write_text(
        report_mod.ablation_csv(table_rows), encoding="utf-8")
    if render:
        fig_dir = out_dir / "figures"
        fig_dir.mkdir(exist_ok=True)
        figures.save_ablation_figure(axis, table_rows, fig_dir / "ablation.png")
    return 0


def cmd_dump_routing(config: ExperimentConfig, pair_index: int, out_dir: Path,
                     render: bool = True, data_dir: Path | None = None) -> int:
    seeds = config.pair_seeds()
    if not (0 <= pair_index < len(seeds)):
        print(f"error: pair {pair_index} outside [0, {len(seeds)})", file=sys.stderr)
        return 2
    seed = seeds[pair_index]
    if data_dir is None:
        scene = generate_scene(seed, config.scene)
    else:
        scene = _load_pair(data_dir, pair_index)
    result = register_pair(scene, config, seed=seed)
    from .registration import build_superpoints

    sp_src, sp_dst = build_superpoints(scene, config)
    out_dir.mkdir(parents=True, exist_ok=True)

    for rec in result.routing_history:
        sp = sp_src if rec.side == "source" else sp_dst
        cloudio.write_ply(sp.superpoints,
                          out_dir / f"routing_b{rec.block}_{rec.stage}_{rec.side}.ply",
                          expert=rec.decision.top1())
    _write_json(out_dir / "routing.json", {
        "schema_version": report_mod.SCHEMA_VERSION,
        "num_experts": config.model.num_experts,
        "routing_mode": config.model.routing,
        "blocks": routing_history_json_from(result),
    })
    if result.correspondences is not None:
        _write_json(out_dir / "correspondences.json", result.correspondences.to_json())
    if render and result.routing_history:
        last = {}
        for rec in result.routing_history:
            last[rec.side] = rec.decision
        fig_dir = out_dir / "figures"
        fig_dir.mkdir(exist_ok=True)
        figures.save_routing_figure(
            sp_src.superpoints, last["source"].top1(),
            sp_dst.superpoints, last["target"].top1(),
            config.model.num_experts, fig_dir / "routing.png")
    return 0


def routing_history_json_from(result) -> list:
    return [{"block": rec.block, "stage": rec.stage, "side": rec.side,
             **rec.decision.to_json()} for rec in result.routing_history]


# ---------------------------------------------------------------------------
# argument parsing


def _add_common(sub):
    sub.add_argument("--config", type=Path, default=None, help="JSON config path")
    sub.add_argument("--seed", type=int, default=None, help="override base seed")
    sub.add_argument("--out", type=Path, required=True, help="output directory")
    sub.add_argument("--jobs", type=int, default=1, help="parallel pair workers")
    sub.add_argument("--no-figures", action="store_true",
                     help="skip matplotlib renderings")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="moereg",
        description="prior-guided mixture-of-experts point cloud registration harness")
    subs = parser.add_subparsers(dest="command", required=True)

    gen = subs.add_parser("generate", help="write scene pairs + ground truth")
    _add_common(gen)

    reg = subs.add_parser("register", help="register generated pairs, write report")
    _add_common(reg)
    reg.add_argument("--data", type=Path, required=True, help="generated data dir")

    abl = subs.add_parser("ablate", help="sweep one config axis")
    _add_common(abl)
    abl.add_argument("--axis", required=True, choices=["tau_o", "coding", "routing"])
    abl.add_argument("--values", required=True,
                     help="comma-separated axis values, e.g. 0,0.1,0.3")
    abl.add_argument("--data", type=Path, default=None,
                     help="optional generated data dir (default: in-memory scenes)")

    dump = subs.add_parser("dump-routing", help="write per-block expert PLYs + JSON")
    _add_common(dump)
    dump.add_argument("--pair", type=int, default=0, help="pair index")
    dump.add_argument("--data", type=Path, default=None)
    return parser


def _resolve_config(args) -> ExperimentConfig:
    config = load_config(args.config) if args.config else default_config()
    if args.seed is not None:
        config = config.replace(seed=args.seed, seeds=None)
    return config.validate()


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        config = _resolve_config(args)
        render = not args.no_figures
        if args.command == "generate":
            return cmd_generate(config, args.out)
        if args.command == "register":
            return cmd_register(config, args.data, args.out, jobs=args.jobs,
                                render=render)
        if args.command == "ablate":
            values_raw = [v.strip() for v in args.values.split(",") if v.strip()]
            if args.axis == "tau_o":
                values = [float(v) for v in values_raw]
            else:
                values = values_raw
            return cmd_ablate(config, args.axis, values, args.out, jobs=args.jobs,
                              render=render, data_dir=args.data)
        if args.command == "dump-routing":
            return cmd_dump_routing(config, args.pair, args.out, render=render,
                                    data_dir=args.data)
        raise AssertionError(f"unhandled command {args.command}")
    except RegistrationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
