"""Command-line entry point: ``contextforest <command> [--config FILE] [--seed N] [--out DIR]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from contextforest import experiments as ex
from contextforest.dataset import save_dataset, split, synth_scenes
from contextforest.forest import memory_footprint, save_forest, train_forest
from contextforest.rescore import save_detections

log = logging.getLogger("contextforest")


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_synth(cfg: ex.ExperimentConfig) -> Path:
    """Generated train/test files plus the generator-truth sidecar."""
    if cfg.synth is None:
        raise ValueError("synth needs a synth block in the config")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    gen = synth_scenes(ex.synth_config_for(cfg))
    train, test = split(gen.dataset, cfg.test_fraction, ex.sub_seed(cfg.seed, "split"))
    save_dataset(train, out / "train.jsonl")
    save_dataset(test, out / "test.jsonl")
    _write_json(out / "truth.json", {
        "config_hash": cfg.config_hash,
        "scene_labels": {str(k): v for k, v in sorted(gen.scene_labels.items())},
        "component_templates": gen.component_prototypes.tolist(),
    })
    print(f"wrote {len(train)} train and {len(test)} test images to {out}")
    return out


def cmd_train(cfg: ex.ExperimentConfig) -> dict:
    """One forest file per configured property kind, with a summary report."""
    data = ex.prepare_data(cfg)
    out = Path(cfg.out) / "forests"
    out.mkdir(parents=True, exist_ok=True)
    report = {"config_hash": cfg.config_hash, "forests": {}}
    for kind in cfg.kinds:
        t0 = time.perf_counter()
        forest = train_forest(data.train, kind, cfg.train_config(kind), cfg.k_retrieval, cfg.workers)
        elapsed = time.perf_counter() - t0
        path = ex.forest_path(out, kind)
        save_forest(forest, path)
        fp = memory_footprint(forest)
        depths = forest.depths()
        entry = {
            "path": str(path),
            "sigma": forest.sigma.sigma,
            "sigma_degenerate": forest.sigma.degenerate,
            "num_trees": forest.num_trees,
            "depth_mean": float(np.mean(depths)),
            "depth_max": int(max(depths)),
            "internal_nodes_mean": fp.mean_internal_nodes,
            "footprint_bytes": fp.total,
            "train_seconds": elapsed,
        }
        report["forests"][kind] = entry
        print(f"{kind}: sigma={forest.sigma.sigma:.6g} depth mean={entry['depth_mean']:.2f} "
              f"max={entry['depth_max']} internal nodes/tree={fp.mean_internal_nodes:.1f} "
              f"footprint={fp.total} bytes ({elapsed:.1f}s)")
    _write_json(Path(cfg.out) / "train_report.json", report)
    return report


def cmd_eval_retrieval(cfg: ex.ExperimentConfig) -> list:
    data = ex.prepare_data(cfg)
    forests = ex.get_forests(cfg, data.train, cfg.kinds)
    rows, per_image = ex.eval_retrieval(cfg, data.train, data.test, forests)
    out = Path(cfg.out)
    ex.write_csv(out / "retrieval.csv", rows, cfg.config_hash)
    ex.write_csv(out / "retrieval_per_image.csv", per_image, cfg.config_hash)
    for r in rows:
        print(f"{r.kind:10s} {r.method:9s} k={r.k:<3d} quality={r.mean_quality:.6g}")
    return rows


def cmd_select_sweep(cfg: ex.ExperimentConfig) -> list:
    data = ex.prepare_data(cfg)
    kind = cfg.selection.kind
    forest = ex.get_forests(cfg, data.train, [kind])[kind]
    rows, selections, full_ap = ex.select_sweep(cfg, data, forest)
    out = Path(cfg.out)
    ex.write_csv(out / "select_sweep.csv", rows, cfg.config_hash)
    ex.write_csv(out / "speedup.csv", [r for r in rows if r.method == "conf"], cfg.config_hash)
    with open(out / "selections.jsonl", "w") as fh:
        for s in selections:
            fh.write(json.dumps({"method": s.method, "gamma": s.gamma, "image_id": s.image_id,
                                 "active": list(s.active), "config_hash": cfg.config_hash}) + "\n")
    print(f"full model AP={full_ap:.4f}")
    for r in rows:
        print(f"{r.method:7s} gamma={r.gamma:<5g} fraction={r.mean_fraction:.3f} cost={r.total_cost:g} "
              f"AP={r.ap:.4f} ratio={r.ap_ratio:.3f}")
    return rows


def cmd_rescore(cfg: ex.ExperimentConfig) -> list:
    data = ex.prepare_data(cfg)
    forests = ex.get_forests(cfg, data.train, ["position", "scale"])
    result = ex.rescore_experiment(cfg, data, forests)
    out = Path(cfg.out)
    ex.write_csv(out / "rescore.csv", result.rows, cfg.config_hash)
    for method, dets in result.test_detections.items():
        save_detections(dets, out / f"detections_{method}.jsonl")
    for r in result.rows:
        print(f"{r.method:5s} alpha_pos={r.alpha_pos:g} alpha_scale={r.alpha_scale:g} "
              f"val AP={r.val_ap:.4f} test AP={r.test_ap:.4f}")
    return result.rows


def cmd_bench(cfg: ex.ExperimentConfig) -> dict:
    data = ex.prepare_data(cfg)
    kind = cfg.kinds[0]
    forest = ex.get_forests(cfg, data.train, [kind])[kind]
    report = ex.bench(cfg, data, forest)
    _write_json(Path(cfg.out) / "bench.json", report)
    print(json.dumps(report, indent=2, sort_keys=True))
    return report


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval-retrieval": cmd_eval_retrieval,
    "select-sweep": cmd_select_sweep,
    "rescore": cmd_rescore,
    "bench": cmd_bench,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="contextforest", description="Context forest experiments on synthetic or file data.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="JSON experiment config (defaults to the standard benchmark)")
    p.add_argument("--seed", type=int, help="root seed, overriding the config")
    p.add_argument("--out", help="output directory, overriding the config")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    return p


def resolve_config(args: argparse.Namespace) -> ex.ExperimentConfig:
    cfg = ex.load_config(args.config) if args.config else ex.ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.out is not None:
        cfg = cfg.with_out(args.out)
    return cfg


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = resolve_config(args)
        COMMANDS[args.command](cfg)
    except Exception as exc:  # one-line diagnostic, nonzero exit
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"contextforest {args.command}: error: {msg}", file=sys.stderr)
        if args.verbose:
            log.exception("command failed")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
