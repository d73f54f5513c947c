"""Experiment drivers shared by the command line and the acceptance suite."""
from __future__ import annotations

import csv
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import panosynth as ps
from . import pcgd
from .io import DataConfig
from .metrics import IoUReport
from .segnet import ParamSnapshot, SegModel
from .trainer import (ARM_NAMES, AdaptResult, TrainConfig, adapt, arm_config, evaluate_snapshot,
                      pretrain_source, warmup)

logger = logging.getLogger(__name__)

ABLATION_ARMS = ("source_only", "unweighted_pl", "wo_path_a", "wo_path_b", "pcgd_full")
CRAM_ARMS = ("source_only", "pcgd_full", "pcgd_cram")
CRAM_NAMES = {"source_only": "Source-Only", "pcgd_full": "PCGD (only)", "pcgd_cram": "PCGD + CRAM"}
SWEEP_P = (1.0, 5.0, 10.0, 15.0, 20.0)
SWEEP_TAU_RATIOS = (0.2, 0.4, 0.6, 0.8, 1.0)

# settings the warm-up snapshot depends on
_WARMUP_FIELDS = ("seed", "tau", "total_iters", "base_lr", "poly_power", "weight_decay", "adam_eps",
                  "adam_betas", "batch", "conf_threshold", "s", "arch", "output_stride", "temperature",
                  "use_cram")


def worker_count() -> int:
    raw = os.environ.get("DAPASS_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            raise ValueError(f"DAPASS_THREADS must be an integer, got {raw!r}") from None
    return os.cpu_count() or 1


@dataclass
class Benchmark:
    source_train: list[ps.Sample]
    source_val: list[ps.Sample]
    target_ids: list[str]
    target_images: np.ndarray
    val_ids: list[str]
    val_images: np.ndarray
    val_labels: ps.LabelStore


def build_benchmark(data: DataConfig) -> Benchmark:
    """Generate the benchmark in memory. Target training labels are dropped."""
    spec = data.scene
    tgt_val = ps.gen_target(spec, data.n_target_val, "val")
    ids, images = ps.strip_labels(ps.gen_target(spec, data.n_target_train, "train"))
    val_ids, val_images = ps.strip_labels(tgt_val)
    return Benchmark(ps.gen_source(spec, data.n_source_train, "train"),
                     ps.gen_source(spec, data.n_source_val, "val"),
                     ids, images, val_ids, val_images, ps.LabelStore.from_samples(tgt_val))


def write_benchmark(data: DataConfig, root: str | Path) -> dict[str, int]:
    spec = data.scene
    splits = {
        "source/train": ps.gen_source(spec, data.n_source_train, "train"),
        "source/val": ps.gen_source(spec, data.n_source_val, "val"),
        "target/train": ps.gen_target(spec, data.n_target_train, "train"),
        "target/val": ps.gen_target(spec, data.n_target_val, "val"),
    }
    for samples in splits.values():
        ps.write_dataset(samples, root)
    return {k: len(v) for k, v in splits.items()}


def load_benchmark(root: str | Path) -> Benchmark:
    root = Path(root)
    for sub in ("source/train", "source/val", "target/train", "target/val"):
        if not (root / sub / "manifest.jsonl").exists():
            raise FileNotFoundError(f"missing dataset split {root / sub}")
    ids, images = ps.read_images(root / "target" / "train")
    val_ids, val_images = ps.read_images(root / "target" / "val")
    return Benchmark(ps.read_dataset(root / "source" / "train"), ps.read_dataset(root / "source" / "val"),
                     ids, images, val_ids, val_images, ps.LabelStore(split_dir=root / "target" / "val"))


@dataclass(frozen=True)
class ArmResult:
    arm: str
    seed: int
    miou: float
    minority_miou: float
    majority_miou: float
    per_class: tuple[float, ...]

    @classmethod
    def from_report(cls, arm: str, seed: int, report: IoUReport) -> ArmResult:
        return cls(arm, seed, report.miou, report.minority_miou, report.majority_miou,
                   tuple(float(v) for v in report.per_class))


def source_val_report(snapshot: ParamSnapshot, bench: Benchmark, config: TrainConfig) -> IoUReport:
    ids, images = ps.strip_labels(bench.source_val)
    return evaluate_snapshot(snapshot, ids, images, ps.LabelStore.from_samples(bench.source_val),
                             config.model_config(), scale=1)


def target_report(snapshot: ParamSnapshot, bench: Benchmark, config: TrainConfig,
                  fused: bool = False) -> IoUReport:
    return evaluate_snapshot(snapshot, bench.val_ids, bench.val_images, bench.val_labels,
                             config.model_config(), scale=config.s, fused=fused)


class ArmRunner:
    """Runs ablation arms on one benchmark, sharing source models and warm-ups."""

    def __init__(self, bench: Benchmark, base: TrainConfig, sources: dict[int, ParamSnapshot] | None = None):
        self.bench = bench
        self.base = base
        self.sources: dict[int, ParamSnapshot] = dict(sources or {})
        self._warm: dict[tuple, ParamSnapshot] = {}
        self.last: AdaptResult | None = None

    def source(self, seed: int) -> ParamSnapshot:
        if seed not in self.sources:
            cfg = replace(self.base, seed=seed)
            model = SegModel(cfg.model_config(), seed=seed)
            self.sources[seed] = pretrain_source(model, self.bench.source_train, cfg)
        return self.sources[seed]

    def _warmup(self, cfg: TrainConfig, source: ParamSnapshot) -> ParamSnapshot:
        key = tuple(getattr(cfg, f) for f in _WARMUP_FIELDS)
        if key not in self._warm:
            teacher = SegModel(cfg.model_config())
            teacher.restore(source)
            bank = pcgd.build_bank(teacher, self.bench.target_ids, self.bench.target_images,
                                   cfg.conf_threshold, scale=cfg.s, fused=cfg.use_cram)
            self._warm[key] = warmup(source, bank, cfg)
        return self._warm[key]

    def run(self, arm: str, seed: int, **overrides) -> ArmResult:
        cfg = arm_config(replace(self.base, seed=seed, **overrides), arm)
        source = self.source(seed)
        if arm == "source_only":
            self.last = None
            return ArmResult.from_report(arm, seed, target_report(source, self.bench, cfg))
        warm = None if cfg.self_train else self._warmup(cfg, source)
        result = adapt(source, self.bench.target_ids, self.bench.target_images, cfg, warm=warm)
        self.last = result
        report = target_report(result.snapshot, self.bench, cfg, fused=cfg.use_cram)
        logger.info("%s seed %d: mIoU %.4f", arm, seed, report.miou)
        return ArmResult.from_report(arm, seed, report)


def median_by_arm(results: Iterable[ArmResult]) -> dict[str, dict[str, float]]:
    grouped: dict[str, list[ArmResult]] = {}
    for r in results:
        grouped.setdefault(r.arm, []).append(r)
    return {arm: {"miou": float(np.median([r.miou for r in rs])),
                  "minority_miou": float(np.median([r.minority_miou for r in rs])),
                  "majority_miou": float(np.median([r.majority_miou for r in rs])),
                  "runs": len(rs)}
            for arm, rs in grouped.items()}


def write_table(path: str | Path, medians: dict[str, dict[str, float]], arms: Sequence[str],
                names: dict[str, str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "miou", "minority_miou", "majority_miou", "runs"])
        for arm in arms:
            m = medians[arm]
            w.writerow([names[arm], f"{100 * m['miou']:.2f}", f"{100 * m['minority_miou']:.2f}",
                        f"{100 * m['majority_miou']:.2f}", m["runs"]])


def run_ablation(runner: ArmRunner, seeds: Sequence[int], arms: Sequence[str]) -> list[ArmResult]:
    return [runner.run(arm, seed) for seed in seeds for arm in arms]


def write_ablation_tables(out: str | Path, results: Sequence[ArmResult]) -> dict[str, dict[str, float]]:
    out = Path(out)
    medians = median_by_arm(results)
    write_table(out / "ablation.csv", medians, ABLATION_ARMS, ARM_NAMES)
    if all(a in medians for a in CRAM_ARMS):
        write_table(out / "cram_ablation.csv", medians, CRAM_ARMS, CRAM_NAMES)
    with open(out / "runs.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["arm", "seed", "miou", "minority_miou", "majority_miou"])
        for r in results:
            w.writerow([r.arm, r.seed, f"{r.miou:.6f}", f"{r.minority_miou:.6f}", f"{r.majority_miou:.6f}"])
    return medians


# ---------------------------------------------------------------------------
# sensitivity sweep


def sweep_points(total_iters: int, P_grid=SWEEP_P, tau_ratios=SWEEP_TAU_RATIOS) -> list[tuple[float, int, float]]:
    """(P, tau, ratio) grid points, tau-major."""
    return [(P, int(round(r * total_iters)), r) for r in tau_ratios for P in P_grid]


def _sweep_job(args):
    bench, base, source, arm, P, tau = args
    runner = ArmRunner(bench, base, {base.seed: source})
    return runner.run(arm, base.seed, P=P, tau=tau)


def run_sweep(runner: ArmRunner, seed: int, arm: str, points: Sequence[tuple[float, int, float]],
              workers: int = 1) -> list[tuple[float, int, float, ArmResult]]:
    source = runner.source(seed)
    base = replace(runner.base, seed=seed)
    if workers > 1 and len(points) > 1:
        jobs = [(runner.bench, base, source, arm, P, tau) for P, tau, _ in points]
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            results = list(pool.map(_sweep_job, jobs))
    else:
        results = [runner.run(arm, seed, P=P, tau=tau) for P, tau, _ in points]
    return [(P, tau, ratio, r) for (P, tau, ratio), r in zip(points, results)]


def write_sweep(path: str | Path, rows: Sequence[tuple[float, int, float, ArmResult]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["P", "tau", "tau_ratio", "miou", "minority_miou", "majority_miou"])
        for P, tau, ratio, r in rows:
            w.writerow([f"{P:g}", tau, f"{ratio:g}", f"{100 * r.miou:.2f}", f"{100 * r.minority_miou:.2f}",
                        f"{100 * r.majority_miou:.2f}"])
