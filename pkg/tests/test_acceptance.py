"""Acceptance suite. Each criterion prints one PASS/FAIL line as it finishes
and all lines are repeated in the terminal summary."""
import inspect
import math
import time
import zlib
from dataclasses import replace

import numpy as np
import pytest
from PIL import Image

from sfpano import cli, cram, io, pcgd
from sfpano import panosynth as ps
from sfpano import tensor as T
from sfpano import trainer
from sfpano.cram import CropSpec, FusionInputs
from sfpano.experiments import ArmRunner, build_benchmark, source_val_report, target_report
from sfpano.optim import SGD
from sfpano.segnet import ModelConfig, SegModel
from sfpano.tensor import Tensor

import conftest
from gradcases import CASES, check_case
from oracles import bilevel_linear_oracle, fuse_loop

SEEDS = (0, 1, 2)
SWEEP_P = (1.0, 5.0, 10.0, 15.0, 20.0)


def verdict(capsys, number, ok, detail):
    line = f"CRITERION {number} {'PASS' if ok else 'FAIL'}: {detail}"
    conftest.VERDICTS.append(line)
    with capsys.disabled():
        print("\n" + line)
    return ok


def check(capsys, name, ok, detail):
    line = f"CHECK {name} {'PASS' if ok else 'FAIL'}: {detail}"
    conftest.VERDICTS.append(line)
    with capsys.disabled():
        print("\n" + line)
    return ok


# ---------------------------------------------------------------------------
# 1. gradient integrity


def test_criterion_1_gradient_integrity(capsys):
    start = time.perf_counter()
    worst = {}
    for name, builder in sorted(CASES.items()):
        rng = np.random.default_rng(zlib.crc32(name.encode()))
        worst[name] = max(check_case(builder, rng) for _ in range(20))
    elapsed = time.perf_counter() - start
    top = max(worst, key=worst.get)
    ok = all(v < 1e-4 for v in worst.values()) and elapsed < 120
    assert verdict(capsys, 1, ok, f"{len(worst)} ops x 20 instances at float64, worst rel. err "
                                  f"{worst[top]:.2e} ({top}), {elapsed:.1f}s"), worst


# ---------------------------------------------------------------------------
# 2. fusion oracle


def test_criterion_2_fusion_oracle(capsys):
    start = time.perf_counter()
    rng = np.random.default_rng(2)
    worst = 0.0
    constant_ok = masking_ok = True
    for _ in range(100):
        s, o = int(rng.choice([1, 2, 3])), int(rng.choice([1, 2, 4]))
        gh, gw = int(rng.integers(2, 6)), int(rng.integers(2, 8))
        dh, dw = int(rng.integers(1, gh + 1)), int(rng.integers(1, gw + 1))
        top, left = o * int(rng.integers(0, gh - dh + 1)), o * int(rng.integers(0, gw - dw + 1))
        detail = CropSpec(top, top + o * dh, left, left + o * dw)
        C = int(rng.integers(2, 5))
        y_lr = rng.normal(size=(1, gh, gw, C))
        y_hr = rng.normal(size=(1, s * dh, s * dw, C))
        a = rng.uniform(size=(1, gh, gw, 1))
        out = cram.fuse(FusionInputs(Tensor(y_lr), Tensor(y_hr), Tensor(a), detail), s, o).data[0]
        ref = fuse_loop(y_lr[0], y_hr[0], a[0, :, :, 0], detail.box, s, o)
        worst = max(worst, float(np.max(np.abs(out - ref))))

        # a constant field stays constant wherever the detail branch covers the grid
        c = float(rng.normal())
        full = CropSpec(0, o * gh, 0, o * gw)
        const = cram.fuse(FusionInputs(Tensor(np.full_like(y_lr, c)), Tensor(np.full((1, s * gh, s * gw, C), c)),
                                       Tensor(a), full), s, o).data
        constant_ok &= bool(np.all(const == c) or np.max(np.abs(const - c)) <= 1e-12)

        # attention outside the detail region is masked: changing it changes nothing
        mask = cram.attention_mask((gh, gw), detail, o)[None, :, :, None]
        a2 = np.where(mask > 0, a, rng.uniform(size=a.shape))
        out2 = cram.fuse(FusionInputs(Tensor(y_lr), Tensor(y_hr), Tensor(a2), detail), s, o).data[0]
        masking_ok &= bool(np.array_equal(out, out2))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-6 and constant_ok and masking_ok and elapsed < 60
    assert verdict(capsys, 2, ok, f"100 instances, max |fuse - oracle| {worst:.1e}, constant preserved "
                                  f"{constant_ok}, masking exact {masking_ok}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 3. crop-grid exactness


def test_criterion_3_crop_grid(capsys):
    start = time.perf_counter()
    H, W, s, o, h_L, w_L, h_H, w_H = 64, 128, 2, 4, 16, 32, 8, 16
    k = s * o
    rng = np.random.default_rng(3)
    aligned = True
    corners, detail_corners = set(), set()
    for _ in range(10_000):
        ctx = cram.sample_context_crop(H, W, s, o, h_L, w_L, rng)
        det = cram.sample_detail_crop(ctx, h_H, w_H, o, rng)
        aligned &= all(v % k == 0 for v in ctx.box) and all(v % o == 0 for v in det.box)
        corners.add((ctx.top, ctx.left))
        detail_corners.add((det.top, det.left))
    analytic = {(t, l) for t in range(0, H - s * h_L + 1, k) for l in range(0, W - s * w_L + 1, k)}
    tops, lefts = cram.valid_context_corners(H, W, s, o, h_L, w_L)
    detail_analytic = {(t, l) for t in range(0, h_L - h_H + 1, o) for l in range(0, w_L - w_H + 1, o)}
    elapsed = time.perf_counter() - start
    ok = (aligned and corners == analytic == {(t, l) for t in tops for l in lefts}
          and detail_corners == detail_analytic and elapsed < 30)
    assert verdict(capsys, 3, ok, f"10000 pairs grid-aligned {aligned}, context corners {len(corners)}/"
                                  f"{len(analytic)}, detail corners {len(detail_corners)}/{len(detail_analytic)}, "
                                  f"{elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 4. bi-level oracle


def test_criterion_4_bilevel_oracle(capsys):
    start = time.perf_counter()
    th = Tensor(np.array([1.0]), requires_grad=True)
    pcgd.bilevel_step({"t": th}, lambda: (th ** 2 * 0.5).sum(), lambda: ((th - 2.0) ** 2 * 0.5).sum(),
                      SGD(), alpha=0.5, lr=0.1)
    quad_err = abs(float(th.data[0]) - 1.15)

    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(50):
        d = int(rng.integers(1, 5))
        theta = rng.normal(size=d)
        xi, yi = rng.normal(size=(int(rng.integers(1, 6)), d)), None
        yi = rng.normal(size=len(xi))
        xo = rng.normal(size=(int(rng.integers(1, 6)), d))
        yo = rng.normal(size=len(xo))
        alpha, eta = float(rng.uniform(0.0, 0.5)), float(rng.uniform(0.01, 0.5))
        w = Tensor(theta.copy(), requires_grad=True)

        def mse(X, y):
            r = Tensor(X) @ w.reshape(d, 1) - Tensor(y.reshape(-1, 1))
            return (r * r).sum() * (0.5 / len(y))

        pcgd.bilevel_step({"w": w}, lambda: mse(xi, yi), lambda: mse(xo, yo), SGD(), alpha, eta)
        expect = bilevel_linear_oracle(theta.tolist(), xi.tolist(), yi.tolist(), xo.tolist(), yo.tolist(),
                                       alpha, eta)
        worst = max(worst, float(np.max(np.abs(w.data - np.asarray(expect, dtype=float)))))
    elapsed = time.perf_counter() - start
    ok = quad_err <= 1e-10 and worst <= 1e-10 and elapsed < 30
    assert verdict(capsys, 4, ok, f"quadratic theta' = {float(th.data[0]):.12f} (1.15), 50 linear instances max "
                                  f"err {worst:.1e}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 5. consistency score and split


def test_criterion_5_consistency_properties(capsys):
    start = time.perf_counter()
    rng = np.random.default_rng(5)
    nonpositive = True
    for _ in range(200):
        shape = (int(rng.integers(1, 6)), int(rng.integers(1, 6)), int(rng.integers(2, 9)))
        rec = pcgd.consistency_from_logits("x", rng.normal(size=shape) * 3, rng.normal(size=shape) * 3)
        nonpositive &= rec.cs <= 0.0 and all(v <= 0.0 for v in rec.per_class.values())

    model = SegModel(ModelConfig(output_stride=4), seed=5)
    snap = model.snapshot("theta")
    x = rng.uniform(size=(3, 32, 64, 3)).astype(np.float32)
    same = pcgd.score_images(model, snap, snap, ["a", "b", "c"], x)
    zero_ok = all(r.cs == 0.0 for r in same)

    split_ok = True
    for _ in range(200):
        n = int(rng.integers(1, 300))
        P = float(rng.uniform(100.0 / n, 100.0))
        scores = -np.abs(rng.normal(size=n)) if rng.random() < 0.5 else -rng.integers(0, 4, size=n).astype(float)
        recs = [pcgd.ConsistencyRecord(f"i{k:04d}", float(v), {}) for k, v in enumerate(scores)]
        con, inc = pcgd.split_sets(recs, P)
        ids = {r.image_id for r in recs}
        split_ok &= (len(con) == math.ceil(P * n / 100 - 1e-9) and set(con) | set(inc) == ids
                     and not set(con) & set(inc) and len(con) + len(inc) == n)
    elapsed = time.perf_counter() - start
    ok = nonpositive and zero_ok and split_ok and elapsed < 30
    assert verdict(capsys, 5, ok, f"CS <= 0 on 200 instances {nonpositive}, CS = 0 for equal snapshots {zero_ok}, "
                                  f"200 random splits sized and partitioned {split_ok}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# training criteria share one set of runs on the default benchmark


@pytest.fixture(scope="module")
def runner():
    return ArmRunner(build_benchmark(io.DataConfig()), trainer.TrainConfig())


@pytest.fixture(scope="module")
def ablation(runner):
    start = time.perf_counter()
    results = {}
    for seed in SEEDS:
        for arm in trainer.ARMS:
            results[arm, seed] = runner.run(arm, seed)
    return results, time.perf_counter() - start


def _median(results, arm, key="miou"):
    return 100 * float(np.median([getattr(results[arm, s], key) for s in SEEDS]))


@pytest.mark.slow
def test_source_model_quality(runner, capsys):
    cfg = runner.base
    src, tgt = [], []
    for seed in SEEDS:
        snap = runner.source(seed)
        src.append(source_val_report(snap, runner.bench, cfg).miou)
        tgt.append(evaluate_native(snap, runner.bench, cfg))
    src_ok = check(capsys, "source-val", min(src) >= 0.70,
                   "source-val mIoU per seed " + ", ".join(f"{v:.3f}" for v in src) + " (>= 0.70)")
    gaps = [100 * (a - b) for a, b in zip(src, tgt)]
    gap_ok = check(capsys, "domain-gap", min(gaps) >= 10,
                   "source-val minus target mIoU per seed " + ", ".join(f"{g:.1f}" for g in gaps) + " (>= 10)")
    assert src_ok and gap_ok


def evaluate_native(snap, bench, cfg):
    return trainer.evaluate_snapshot(snap, bench.val_ids, bench.val_images, bench.val_labels,
                                     cfg.model_config(), scale=1).miou


@pytest.mark.slow
def test_criterion_6_ablation_ordering(ablation, capsys):
    results, elapsed = ablation
    m = {arm: _median(results, arm) for arm in trainer.ARMS}
    checks = {
        "SO < UPL": m["source_only"] < m["unweighted_pl"],
        "UPL < w/o A": m["unweighted_pl"] < m["wo_path_a"],
        "UPL < w/o B": m["unweighted_pl"] < m["wo_path_b"],
        "w/o A < full": m["wo_path_a"] < m["pcgd_full"],
        "w/o B < full": m["wo_path_b"] < m["pcgd_full"],
        "full < CRAM": m["pcgd_full"] < m["pcgd_cram"],
        "CRAM - SO >= 8": m["pcgd_cram"] - m["source_only"] >= 8,
        "CRAM - full >= 1": m["pcgd_cram"] - m["pcgd_full"] >= 1,
        "runtime < 30 min": elapsed < 1800,
    }
    failed = [k for k, v in checks.items() if not v]
    table = ", ".join(f"{trainer.ARM_NAMES[a]} {m[a]:.2f}" for a in trainer.ARMS)
    detail = f"median mIoU over seeds {SEEDS}: {table}; {elapsed / 60:.1f} min"
    if failed:
        detail += "; failed: " + ", ".join(failed)
    assert verdict(capsys, 6, not failed, detail)


@pytest.mark.slow
def test_criterion_7_minority_effect(ablation, capsys):
    results, _ = ablation
    with_b = _median(results, "pcgd_full", "minority_miou")
    without_b = _median(results, "wo_path_b", "minority_miou")
    ok = with_b - without_b >= 2
    assert verdict(capsys, 7, ok, f"median minority mIoU with class-balancing pastes {with_b:.2f} vs without "
                                  f"{without_b:.2f} (+{with_b - without_b:.2f}, need +2)")


@pytest.mark.slow
def test_criterion_8_sensitivity(runner, capsys):
    mious = {P: 100 * runner.run("pcgd_full", 0, P=P).miou for P in SWEEP_P}
    spread = max(mious.values()) - min(mious.values())
    detail = ", ".join(f"P={P:g}: {v:.2f}" for P, v in mious.items())
    assert verdict(capsys, 8, spread <= 3, f"seed 0 full PCGD mIoU {detail}; spread {spread:.2f} (<= 3)")


# ---------------------------------------------------------------------------
# 9. no target ground truth during adaptation


def test_criterion_9_no_label_reads(tmp_path, monkeypatch, capsys):
    data = io.DataConfig(n_source_train=8, n_source_val=4, n_target_train=8, n_target_val=4)
    for samples in (ps.gen_source(data.scene, 8), ps.gen_target(data.scene, 8), ps.gen_target(data.scene, 4, "val")):
        ps.write_dataset(samples, tmp_path / "data")

    label_reads = []
    real_getitem = ps.LabelStore.__getitem__
    real_open = Image.open

    def counting_getitem(self, key):
        label_reads.append(("store", key))
        return real_getitem(self, key)

    def counting_open(fp, *args, **kwargs):
        if "labels" in str(fp).replace("\\", "/").split("/"):
            label_reads.append(("file", str(fp)))
        return real_open(fp, *args, **kwargs)

    monkeypatch.setattr(ps.LabelStore, "__getitem__", counting_getitem)
    monkeypatch.setattr(Image, "open", counting_open)

    cfg = replace(trainer.TrainConfig(), total_iters=4, tau=2, batch=2, P=50.0, K=3, log_every=2)
    source = SegModel(cfg.model_config(), seed=0).snapshot("F_S")
    io.save_checkpoint(source, tmp_path / "src.ckpt")
    config = tmp_path / "c.yaml"
    io.save_experiment(io.Experiment(cfg, data), config)

    # library entry point and command line, including file-based loading
    ids, images = ps.read_images(tmp_path / "data" / "target" / "train")
    trainer.adapt(source, ids, images, cfg)
    code = cli.run(["adapt", "--config", str(config), "--data", str(tmp_path / "data"),
                    "--source", str(tmp_path / "src.ckpt"), "--out", str(tmp_path / "ad")])
    during_adapt = list(label_reads)

    # the instrumentation does see evaluation reading labels
    cli.run(["eval", "--config", str(config), "--data", str(tmp_path / "data"),
             "--ckpt", str(tmp_path / "ad" / "adapted.ckpt"), "--out", str(tmp_path / "ev")])
    eval_reads = len(label_reads) - len(during_adapt)

    params = set(inspect.signature(trainer.adapt).parameters)
    ok = code == 0 and not during_adapt and eval_reads > 0 and not params & {"labels", "label_store", "store"}
    assert verdict(capsys, 9, ok, f"label reads during adapt: {len(during_adapt)} (library + CLI); evaluation "
                                  f"afterwards read {eval_reads} (instrumentation live)")


# ---------------------------------------------------------------------------
# 10. persistence and reproducibility


def test_criterion_10_persistence(tmp_path, capsys):
    cfg = replace(trainer.TrainConfig(), total_iters=6, tau=3, batch=2, pretrain_iters=6, pretrain_batch=2,
                  P=50.0, K=3, log_every=2)
    spec = ps.SceneSpec()
    runs = []
    for _ in range(2):
        history = trainer.History()
        source = trainer.pretrain_source(SegModel(cfg.model_config(), seed=0), ps.gen_source(spec, 8), cfg,
                                         history)
        ids, images = ps.strip_labels(ps.gen_target(spec, 6))
        result = trainer.adapt(source, ids, images, cfg)
        runs.append((history.rows + result.history.rows, result.snapshot))
    reproducible = runs[0][0] == runs[1][0] and runs[0][1].same_values(runs[1][1])

    snap = runs[0][1]
    io.save_checkpoint(snap, tmp_path / "a.ckpt")
    back = io.load_checkpoint(tmp_path / "a.ckpt")
    exact = (list(back.values) == list(snap.values)
             and all(back.values[k].dtype == v.dtype and back.values[k].tobytes() == v.tobytes()
                     for k, v in snap.values.items()))

    raw = (tmp_path / "a.ckpt").read_bytes()
    rng = np.random.default_rng(10)
    rejected = 0
    offsets = rng.choice(len(raw), size=50, replace=False)
    for off in offsets:
        bad = bytearray(raw)
        bad[off] ^= 1 << int(rng.integers(8))
        try:
            io.decode_checkpoint(bytes(bad))
        except io.CheckpointError:
            rejected += 1
    for cut in (0, 3, len(raw) // 2, len(raw) - 1):
        try:
            io.decode_checkpoint(raw[:cut])
        except io.CheckpointError:
            rejected += 1
    ok = reproducible and exact and rejected == len(offsets) + 4
    assert verdict(capsys, 10, ok, f"round trip bit-exact {exact}, corrupted/truncated files rejected "
                                   f"{rejected}/{len(offsets) + 4}, two seeded runs identical {reproducible}")


def test_default_precision_restored():
    assert T.get_default_dtype() == np.float32
