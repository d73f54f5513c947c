"""Command-line entry point.

Every command writes its effective config (``config.yaml``) and a
``summary.json`` into ``--out`` and prints one JSON summary line last.
Exit codes: 0 success, 1 precondition failure, 2 internal invariant violation.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from PIL import Image

from . import experiments as ex
from . import panosynth as ps
from . import pcgd
from .io import (CheckpointError, ConfigError, Experiment, load_checkpoint, load_experiment,
                 save_checkpoint, save_experiment)
from .metrics import colorize_labels, evaluate, write_report_csv
from .segnet import SegModel
from .trainer import (ARMS, EmptyConsistentSet, History, TrainingDiverged, adapt, arm_config,
                      predict_labels, pretrain_source)

logger = logging.getLogger("sfpano")


class PreconditionError(Exception):
    pass


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML run config (defaults when omitted)")
    common.add_argument("--seed", type=int, help="override the run seed")
    common.add_argument("--out", type=Path, required=True, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="sfpano", description="Source-free panoramic segmentation toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", parents=[common], help="write the synthetic benchmark to --out")

    sp = sub.add_parser("pretrain", parents=[common], help="train the source model")
    sp.add_argument("--data", type=Path, required=True)

    sp = sub.add_parser("adapt", parents=[common], help="adapt a source checkpoint to the target")
    sp.add_argument("--data", type=Path, required=True)
    sp.add_argument("--source", type=Path, required=True, help="source checkpoint")
    sp.add_argument("--arm", choices=[a for a in ARMS if a != "source_only"], default="pcgd_cram")

    sp = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on target val")
    sp.add_argument("--data", type=Path, required=True)
    sp.add_argument("--ckpt", type=Path, required=True)
    sp.add_argument("--split", choices=["target", "source"], default="target")
    sp.add_argument("--fused", choices=["auto", "yes", "no"], default="auto",
                    help="use the fused two-resolution prediction (auto: if the checkpoint was trained with it)")
    sp.add_argument("--render", type=int, default=0, metavar="N", help="save N prediction/GT images")

    sp = sub.add_parser("ablate", parents=[common], help="run the ablation arms and emit comparison tables")
    sp.add_argument("--data", type=Path, help="dataset root (generated in memory when omitted)")
    sp.add_argument("--seeds", type=int, nargs="+", help="seeds (default: --seed or 0, 1, 2)")
    sp.add_argument("--with-cram", action="store_true", help="also run PCGD + CRAM for the second table")

    sp = sub.add_parser("sweep", parents=[common], help="P x tau sensitivity grid")
    sp.add_argument("--data", type=Path)
    sp.add_argument("--arm", choices=[a for a in ARMS if a != "source_only"], default="pcgd_full")
    sp.add_argument("--P", type=float, nargs="+", default=list(ex.SWEEP_P))
    sp.add_argument("--tau-ratios", type=float, nargs="+", default=list(ex.SWEEP_TAU_RATIOS))
    return p


def _experiment(args) -> Experiment:
    if args.config is not None and not args.config.exists():
        raise PreconditionError(f"config file {args.config} not found")
    exp = load_experiment(args.config)
    if args.seed is not None:
        exp = replace(exp, train=replace(exp.train, seed=args.seed))
    return exp


def _benchmark(args, exp: Experiment) -> ex.Benchmark:
    if getattr(args, "data", None) is None:
        return ex.build_benchmark(exp.data)
    if not args.data.exists():
        raise PreconditionError(f"dataset directory {args.data} not found")
    return ex.load_benchmark(args.data)


def _load_ckpt(path: Path):
    if not path.exists():
        raise PreconditionError(f"checkpoint {path} not found")
    return load_checkpoint(path)


def cmd_gen_data(args, exp: Experiment) -> dict:
    data = exp.data
    if args.seed is not None:
        data = replace(data, scene=replace(data.scene, seed=args.seed))
        exp = replace(exp, data=data)
    counts = ex.write_benchmark(data, args.out)
    save_experiment(exp, args.out / "config.yaml")
    return {"splits": counts}


def cmd_pretrain(args, exp: Experiment) -> dict:
    cfg = exp.train
    bench = _benchmark(args, exp)
    model = SegModel(cfg.model_config(), seed=cfg.seed)
    snap = pretrain_with_history(model, bench, cfg, args.out)
    save_checkpoint(snap, args.out / "source.ckpt")
    src = ex.source_val_report(snap, bench, cfg)
    tgt = ex.target_report(snap, bench, cfg)
    return {"checkpoint": str(args.out / "source.ckpt"), "source_val_miou": src.miou,
            "target_val_miou": tgt.miou}


def pretrain_with_history(model, bench, cfg, out: Path):
    history = History()
    snap = pretrain_source(model, bench.source_train, cfg, history)
    history.write_csv(out / "pretrain_metrics.csv")
    return snap


def cmd_adapt(args, exp: Experiment) -> dict:
    cfg = arm_config(exp.train, args.arm)
    source = _load_ckpt(args.source)
    if not (args.data / "target" / "train" / "manifest.jsonl").exists():
        raise PreconditionError(f"no target training split under {args.data}")
    ids, images = ps.read_images(args.data / "target" / "train")
    result = adapt(source, ids, images, cfg)
    snap = replace(result.snapshot, meta={**result.snapshot.meta, "arm": args.arm, "use_cram": cfg.use_cram,
                                          "s": cfg.s})
    save_checkpoint(snap, args.out / "adapted.ckpt")
    result.history.write_csv(args.out / "metrics.csv")
    pcgd.write_records(result.records, args.out / "records.jsonl")
    save_experiment(replace(exp, train=cfg), args.out / "config.yaml")
    last = result.history.rows[-1] if result.history.rows else {}
    return {"checkpoint": str(args.out / "adapted.ckpt"), "arm": args.arm,
            "consistent": len(result.consistent), "inconsistent": len(result.inconsistent),
            "final_loss_a": last.get("loss_a"), "final_loss_b": last.get("loss_b")}


def cmd_eval(args, exp: Experiment) -> dict:
    cfg = exp.train
    snap = _load_ckpt(args.ckpt)
    root = args.data
    if not root.exists():
        raise PreconditionError(f"dataset directory {root} not found")
    split_dir = root / args.split / "val"
    ids, images = ps.read_images(split_dir)
    labels = ps.LabelStore(split_dir=split_dir)
    fused = {"yes": True, "no": False}.get(args.fused, bool(snap.meta.get("use_cram", False)))
    scale = 1 if args.split == "source" else int(snap.meta.get("s", cfg.s))
    model = SegModel.for_snapshot(snap)
    preds = predict_labels(model, images, scale, fused)
    report = evaluate(preds, (labels[i] for i in ids), model.num_classes, ps.MINORITY_CLASSES)
    write_report_csv(report, ps.CLASS_NAMES, args.out / "report.csv")
    if args.render:
        render_dir = args.out / "renders"
        render_dir.mkdir(exist_ok=True)
        for i in range(min(args.render, len(ids))):
            pair = np.concatenate([colorize_labels(preds[i], ps.BASE_COLORS),
                                   colorize_labels(labels[ids[i]], ps.BASE_COLORS)], axis=0)
            Image.fromarray(pair).save(render_dir / f"{ids[i]}.png")
    return {"miou": report.miou, "minority_miou": report.minority_miou, "majority_miou": report.majority_miou,
            "fused": fused, "report": str(args.out / "report.csv")}


def cmd_ablate(args, exp: Experiment) -> dict:
    bench = _benchmark(args, exp)
    seeds = args.seeds or ([args.seed] if args.seed is not None else [0, 1, 2])
    arms = list(ex.ABLATION_ARMS) + (["pcgd_cram"] if args.with_cram else [])
    runner = ex.ArmRunner(bench, exp.train)
    results = ex.run_ablation(runner, seeds, arms)
    medians = ex.write_ablation_tables(args.out, results)
    return {"seeds": seeds, "arms": {a: round(100 * m["miou"], 2) for a, m in medians.items()},
            "table": str(args.out / "ablation.csv")}


def cmd_sweep(args, exp: Experiment) -> dict:
    bench = _benchmark(args, exp)
    for P in args.P:
        if not 0 < P <= 100:
            raise PreconditionError(f"P={P} outside (0, 100]")
    points = ex.sweep_points(exp.train.total_iters, args.P, args.tau_ratios)
    runner = ex.ArmRunner(bench, exp.train)
    rows = ex.run_sweep(runner, exp.train.seed, args.arm, points, ex.worker_count())
    ex.write_sweep(args.out / "sweep.csv", rows)
    mious = [r.miou for *_, r in rows]
    return {"rows": len(rows), "spread": 100 * (max(mious) - min(mious)), "csv": str(args.out / "sweep.csv")}


COMMANDS = {"gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "adapt": cmd_adapt, "eval": cmd_eval,
            "ablate": cmd_ablate, "sweep": cmd_sweep}


def run(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    summary = {"command": args.command}
    try:
        exp = _experiment(args)
        args.out.mkdir(parents=True, exist_ok=True)
        if args.command not in ("gen-data", "adapt"):
            save_experiment(exp, args.out / "config.yaml")
        summary.update(COMMANDS[args.command](args, exp))
        summary["status"] = "ok"
        code = 0
    except (PreconditionError, ConfigError, CheckpointError, FileNotFoundError, EmptyConsistentSet) as exc:
        summary.update(status="error", error=str(exc))
        print(f"error: {exc}", file=sys.stderr)
        code = 1
    except (TrainingDiverged, AssertionError) as exc:
        summary.update(status="invariant-violation", error=str(exc))
        print(f"internal error: {exc}", file=sys.stderr)
        code = 2
    if code == 0:
        (args.out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n",
                                               encoding="utf-8")
    print(json.dumps(summary, sort_keys=True, default=str))
    return code


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
