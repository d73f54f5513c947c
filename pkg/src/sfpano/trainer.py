"""Source pretraining, warm-up scoring and the adaptation loop."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import cram
from . import functional as F
from . import pcgd
from .metrics import IoUReport, evaluate
from .optim import AdamW, poly_lr
from .panosynth import MINORITY_CLASSES, LabelStore, Sample
from .segnet import ModelConfig, ParamSnapshot, SegModel
from .tensor import Tensor, no_grad

logger = logging.getLogger(__name__)

DIVERGENCE_LOSS = 1e3


class TrainingDiverged(RuntimeError):
    pass


class EmptyConsistentSet(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    # optimisation
    base_lr: float = 6e-4
    poly_power: float = 0.9
    weight_decay: float = 1e-4
    adam_eps: float = 1e-8
    adam_betas: tuple[float, float] = (0.9, 0.999)
    batch: int = 4
    total_iters: int = 1200
    # denoising
    P: float = 10.0
    tau: int = 600
    K: int = 15
    paste_rounds: int = 8
    alpha: float = 1e-4
    conf_threshold: float = 0.2
    # cross-resolution
    s: int = 2
    lambda_d: float = 0.3
    context_size: tuple[int, int] = (32, 64)
    detail_size: tuple[int, int] = (16, 32)
    temperature: float = 1.0
    seed: int = 0
    # model
    arch: str = "b1-toy"
    output_stride: int = 4
    # source pretraining
    pretrain_iters: int = 1500
    pretrain_lr: float = 1e-3
    pretrain_batch: int = 8
    # arm switches
    self_train: bool = False
    weighted: bool = True
    path_a: bool = True
    path_b: bool = True
    use_cram: bool = True
    log_every: int = 50
    augment: float = 0.3

    def __post_init__(self):
        for name in ("base_lr", "poly_power", "weight_decay", "adam_eps", "alpha", "temperature",
                     "pretrain_lr"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not all(0 < b < 1 for b in self.adam_betas) or len(self.adam_betas) != 2:
            raise ValueError(f"adam_betas must be two values in (0, 1), got {self.adam_betas}")
        if not 0 < self.P <= 100:
            raise ValueError(f"P must be in (0, 100], got {self.P}")
        if not isinstance(self.s, int) or isinstance(self.s, bool) or self.s < 1:
            raise ValueError(f"s must be an integer >= 1, got {self.s!r}")
        for name in ("batch", "total_iters", "K", "paste_rounds", "pretrain_batch", "log_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.tau < 0 or self.pretrain_iters < 0:
            raise ValueError("tau and pretrain_iters must be non-negative")
        if not 0 <= self.lambda_d <= 1:
            raise ValueError("lambda_d must be in [0, 1]")
        if not 0 <= self.conf_threshold < 1:
            raise ValueError("conf_threshold must be in [0, 1)")
        if not self.self_train and not (self.path_a or self.path_b):
            raise ValueError("at least one of path_a / path_b must be enabled")

    def model_config(self) -> ModelConfig:
        return ModelConfig(arch=self.arch, output_stride=self.output_stride)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# losses


def full_image_loss(model: SegModel, x: np.ndarray, y: np.ndarray, q: np.ndarray | None,
                    temperature: float = 1.0, scale: int = 1) -> Tensor:
    """Cross entropy of the prediction on the image downsampled by ``scale``,
    bilinearly upsampled back to the label resolution."""
    logits = model.forward(pcgd.low_res_view(x, scale), with_attention=False).logits
    up = F.bilinear_resize(logits, factor=model.output_stride * scale)
    return F.softmax_cross_entropy(up, y, q, temperature)


@dataclass
class CramLoss:
    """Crop-and-fuse training loss over a batch of full-resolution images.

    Both the context and the detail targets are cropped from the given labels.
    """

    s: int
    context_size: tuple[int, int]
    detail_size: tuple[int, int]
    lambda_d: float
    temperature: float
    rng: np.random.Generator
    augment: Callable[[np.ndarray], np.ndarray] | None = None

    def __call__(self, model: SegModel, x: np.ndarray, y: np.ndarray, q: np.ndarray | None) -> Tensor:
        o = model.output_stride
        _, H, W, _ = x.shape
        ctx = cram.sample_context_crop(H, W, self.s, o, *self.context_size, rng=self.rng)
        det = cram.sample_detail_crop(ctx, *self.detail_size, o=o, rng=self.rng)
        hr = cram.detail_region_hr(ctx, det)
        y_ctx = cram.crop_array(y, ctx, channels_last=False)
        q_ctx = cram.crop_array(q, ctx, channels_last=False) if q is not None else None
        y_hr = cram.crop_array(y, hr, channels_last=False)
        q_hr = cram.crop_array(q, hr, channels_last=False) if q is not None else None
        if self.augment is not None:
            x = self.augment(x)
        fused, detail_logits = cram.cram_forward(model, x, ctx, det)
        return cram.cram_loss(fused, detail_logits, y_ctx, q_ctx, y_hr, q_hr,
                              self.lambda_d, self.temperature)


def photometric_jitter(x: np.ndarray, rng: np.random.Generator, strength: float) -> np.ndarray:
    """Per-image brightness, contrast and channel-gain jitter plus pixel noise."""
    if strength <= 0:
        return x
    n = len(x)
    gain = 1.0 + strength * rng.uniform(-1, 1, size=(n, 1, 1, 3))
    bright = strength * rng.uniform(-0.5, 0.5, size=(n, 1, 1, 1))
    contrast = 1.0 + strength * rng.uniform(-1, 1, size=(n, 1, 1, 1))
    mean = x.mean(axis=(1, 2, 3), keepdims=True)
    out = (x - mean) * contrast + mean
    out = out * gain + bright + rng.normal(0, 0.2 * strength, size=x.shape)
    return np.clip(out, 0.0, 1.0).astype(x.dtype)


def make_loss(config: TrainConfig, rng: np.random.Generator):
    """The per-batch training loss for ``config``; photometric jitter, when
    enabled, reaches only the student's inputs."""
    augment = None
    if config.augment > 0:
        aug_rng = np.random.default_rng([config.seed, 505])

        def augment(x):
            return photometric_jitter(x, aug_rng, config.augment)
    if config.use_cram:
        return CramLoss(config.s, tuple(config.context_size), tuple(config.detail_size),
                        config.lambda_d, config.temperature, rng, augment)

    def loss(model, x, y, q):
        x = augment(x) if augment is not None else x
        return full_image_loss(model, x, y, q, config.temperature, config.s)
    return loss


def _make_adamw(config: TrainConfig) -> AdamW:
    return AdamW(tuple(config.adam_betas), config.adam_eps, config.weight_decay)


# ---------------------------------------------------------------------------
# prediction / evaluation


def predict_labels(model: SegModel, images: np.ndarray, scale: int = 1, fused: bool = False,
                   batch_size: int = 16) -> np.ndarray:
    """Pixel label maps from the view downsampled by ``scale``; with ``fused``
    the whole-image low/high-resolution fused prediction is used instead."""
    out = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            x = np.asarray(images[i:i + batch_size], dtype=model.dtype)
            if fused:
                logits = cram.fused_predict(model, x, scale)
            else:
                logits = model.forward(pcgd.low_res_view(x, scale), with_attention=False).logits.data
            up = F.resize_np(logits, size=x.shape[1:3])
            out.append(up.argmax(axis=-1).astype(np.uint8))
    return np.concatenate(out, axis=0)


def evaluate_snapshot(snapshot: ParamSnapshot, ids: Sequence[str], images: np.ndarray,
                      labels: LabelStore, model_config: ModelConfig | None = None,
                      scale: int = 1, fused: bool = False, minority=MINORITY_CLASSES) -> IoUReport:
    if model_config is None:
        model = SegModel.for_snapshot(snapshot)
    else:
        model = SegModel(model_config)
        model.restore(snapshot)
    preds = predict_labels(model, images, scale, fused)
    return evaluate(preds, (labels[i] for i in ids), model.num_classes, minority)


# ---------------------------------------------------------------------------
# metrics history


@dataclass
class History:
    rows: list[dict] = field(default_factory=list)

    COLUMNS = ("iteration", "phase", "lr", "loss", "loss_a", "inner_loss", "loss_b",
               "steps_a", "steps_b", "skipped")

    def log(self, **row) -> None:
        self.rows.append({k: row.get(k, "") for k in self.COLUMNS})

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=self.COLUMNS)
            w.writeheader()
            for r in self.rows:
                w.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in r.items()})


class _Window:
    """Running means of loss values between log points."""

    def __init__(self):
        self.values: dict[str, list[float]] = {}

    def add(self, name: str, value: float) -> None:
        if math.isfinite(value):
            self.values.setdefault(name, []).append(value)

    def flush(self) -> dict[str, float]:
        out = {k: float(np.mean(v)) for k, v in self.values.items() if v}
        self.values = {}
        return out


# ---------------------------------------------------------------------------
# source pretraining


def pretrain_source(model: SegModel, samples: Sequence[Sample], config: TrainConfig,
                    history: History | None = None) -> ParamSnapshot:
    """Supervised training on labelled source images; returns the frozen snapshot."""
    if not samples:
        raise ValueError("no source samples")
    images = np.stack([s.image for s in samples]).astype(model.dtype)
    labels = np.stack([s.label for s in samples])
    rng = np.random.default_rng([config.seed, 101])
    opt = _make_adamw(config)
    window = _Window()
    total = config.pretrain_iters
    for t in range(total):
        idx = rng.integers(len(images), size=config.pretrain_batch)
        x, y = images[idx], labels[idx]
        flip = rng.random(len(idx)) < 0.5
        x = np.where(flip[:, None, None, None], x[:, :, ::-1], x)
        y = np.where(flip[:, None, None], y[:, :, ::-1], y)
        lr = poly_lr(config.pretrain_lr, t, total, config.poly_power)
        res = pcgd.gradient_step(model.params, lambda: full_image_loss(model, x, y, None), opt, lr)
        if not math.isfinite(res.loss) or res.loss > DIVERGENCE_LOSS:
            raise TrainingDiverged(f"source pretraining diverged at iteration {t}: loss {res.loss:.4g}")
        window.add("loss", res.loss)
        if history is not None and ((t + 1) % config.log_every == 0 or t + 1 == total):
            history.log(iteration=t + 1, phase="pretrain", lr=lr, skipped=opt.state.skipped,
                        **window.flush())
    return model.snapshot("F_S", total, seed=config.seed)


# ---------------------------------------------------------------------------
# adaptation


@dataclass
class AdaptResult:
    snapshot: ParamSnapshot
    history: History
    records: list[pcgd.ConsistencyRecord]
    consistent: list[str]
    inconsistent: list[str]


def _check_image_stack(ids: Sequence[str], images: np.ndarray) -> None:
    if len(ids) != len(images):
        raise ValueError(f"{len(ids)} ids for {len(images)} images")
    if images.ndim != 4 or images.shape[-1] != 3:
        raise ValueError(f"expected (N, H, W, 3) images, got {images.shape}")


def warmup(source: ParamSnapshot, bank: pcgd.PseudoLabelBank, config: TrainConfig,
           history: History | None = None) -> ParamSnapshot:
    """Plain pseudo-label self-training for ``tau`` iterations from the source weights."""
    model = SegModel(config.model_config())
    model.restore(source)
    rng = np.random.default_rng([config.seed, 202])
    opt = _make_adamw(config)
    window = _Window()
    images = bank.images.astype(model.dtype)
    horizon = max(config.total_iters, config.tau)
    for t in range(config.tau):
        idx = np.sort(rng.integers(len(bank), size=config.batch))
        lr = poly_lr(config.base_lr, t, horizon, config.poly_power)
        res = pcgd.gradient_step(model.params,
                                 lambda: full_image_loss(model, images[idx], bank.labels[idx], None,
                                                         config.temperature, config.s),
                                 opt, lr)
        window.add("loss", res.loss)
        if history is not None and ((t + 1) % config.log_every == 0 or t + 1 == config.tau):
            history.log(iteration=t + 1, phase="warmup", lr=lr, skipped=opt.state.skipped, **window.flush())
    return model.snapshot("theta_tau", config.tau)


def score_and_split(source: ParamSnapshot, theta_tau: ParamSnapshot, bank: pcgd.PseudoLabelBank,
                    config: TrainConfig) -> tuple[list[pcgd.ConsistencyRecord], list[str], list[str]]:
    scratch = SegModel(config.model_config())
    records = pcgd.score_images(scratch, source, theta_tau, bank.ids, bank.images, config.s)
    if config.P / 100.0 * len(records) < 1 - 1e-9:
        raise EmptyConsistentSet(f"P={config.P}% of N={len(records)} images is less than one image; "
                                 f"raise P or supply more target images")
    consistent, inconsistent = pcgd.split_sets(records, config.P)
    return records, consistent, inconsistent


def adapt(source: ParamSnapshot, ids: Sequence[str], images: np.ndarray, config: TrainConfig,
          warm: ParamSnapshot | None = None) -> AdaptResult:
    """Adapt the source snapshot to unlabelled target images.

    Only ids and images are accepted: ground truth never enters this function.
    ``warm`` may supply a precomputed warm-up snapshot for the same (source,
    images, seed, tau).
    """
    images = np.asarray(images)
    _check_image_stack(ids, images)
    history = History()
    teacher = SegModel(config.model_config())
    teacher.restore(source)
    bank = pcgd.build_bank(teacher, ids, images.astype(teacher.dtype), config.conf_threshold,
                           scale=config.s, fused=config.use_cram)
    num_classes = teacher.num_classes

    records: list[pcgd.ConsistencyRecord] = []
    consistent: list[str] = list(bank.ids)
    inconsistent: list[str] = []
    pools: dict[int, pcgd.ClassPool] = {}
    index = None
    if not config.self_train:
        if warm is None:
            warm = warmup(source, bank, config, history)
        records, consistent, inconsistent = score_and_split(source, warm, bank, config)
        keep = set(consistent)
        pools = pcgd.build_class_pools([r for r in records if r.image_id in keep], config.K, bank.classes_in)
        if inconsistent:
            index = pcgd.build_neighbor_index(bank, consistent, num_classes)
        logger.info("split: %d consistent / %d inconsistent, pools for classes %s",
                    len(consistent), len(inconsistent), sorted(pools))

    freq = pcgd.class_pixel_frequency(bank, consistent, num_classes)
    model = SegModel(config.model_config())
    model.restore(source)
    opt = _make_adamw(config)
    rng = np.random.default_rng([config.seed, 303])
    loss_fn = make_loss(config, np.random.default_rng([config.seed, 404]))
    weights = (lambda q: q) if config.weighted else (lambda q: None)
    ims = bank.images.astype(model.dtype)
    con_idx = np.array([bank.index_of(i) for i in consistent])
    inc_idx = np.array([bank.index_of(i) for i in inconsistent], dtype=np.int64)
    steps_a = steps_b = 0
    window = _Window()
    T = config.total_iters

    for t in range(T):
        lr = poly_lr(config.base_lr, t, T, config.poly_power)
        if config.self_train:
            idx = np.sort(rng.integers(len(bank), size=config.batch))
            res = pcgd.gradient_step(model.params, lambda: loss_fn(model, ims[idx], bank.labels[idx],
                                                                   weights(bank.confidence[idx])), opt, lr)
            window.add("loss", res.loss)
        else:
            if config.path_a and len(inc_idx):
                res = _path_a(model, opt, bank, pools, index, inc_idx, config, rng, lr,
                              loss_fn, weights, ims)
                steps_a += res.applied
                window.add("loss_a", res.loss)
                window.add("inner_loss", res.inner_loss)
            elif config.path_a:
                # every image is consistent: train on them directly
                idx = np.sort(rng.choice(con_idx, size=config.batch))
                res = pcgd.gradient_step(model.params, lambda: loss_fn(model, ims[idx], bank.labels[idx],
                                                                       weights(bank.confidence[idx])), opt, lr)
                steps_a += res.applied
                window.add("loss_a", res.loss)
            if config.path_b:
                base = [bank.ids[k] for k in np.sort(rng.integers(len(bank), size=config.batch))]
                res = pcgd.balance_step(model, opt, bank, pools, base, MINORITY_CLASSES, freq, rng, lr,
                                        lambda m, x, y, q: loss_fn(m, x.astype(m.dtype), y, weights(q)),
                                        config.paste_rounds)
                steps_b += res.applied
                window.add("loss_b", res.loss)
        if (t + 1) % config.log_every == 0 or t + 1 == T:
            history.log(iteration=t + 1, phase="adapt", lr=lr, steps_a=steps_a, steps_b=steps_b,
                        skipped=opt.state.skipped, **window.flush())

    snap = model.snapshot("F_T", T, seed=config.seed)
    return AdaptResult(snap, history, records, consistent, inconsistent)


def _path_a(model, opt, bank, pools, index, inc_idx, config, rng, lr, loss_fn, weights, ims):
    idx = np.sort(rng.choice(inc_idx, size=config.batch))
    xs, ys, qs = [], [], []
    for k in idx:
        query = bank.ids[k]
        neighbour = index.retrieve(query)
        img, lab, conf, _ = pcgd.neighbor_complete(neighbour, query, bank, pools, rng)
        xs.append(img)
        ys.append(lab)
        qs.append(conf)
    xj = np.stack(xs).astype(model.dtype)
    yj, qj = np.stack(ys), np.stack(qs)

    def inner():
        return full_image_loss(model, ims[idx], bank.labels[idx], weights(bank.confidence[idx]),
                               config.temperature, config.s)

    def outer():
        return loss_fn(model, xj, yj, weights(qj))

    return pcgd.bilevel_step(model.params, inner, outer, opt, config.alpha, lr)


# ---------------------------------------------------------------------------
# helpers for experiment drivers


ARMS = {
    "source_only": None,
    "unweighted_pl": dict(self_train=True, weighted=False, use_cram=False),
    "wo_path_a": dict(path_a=False, use_cram=False),
    "wo_path_b": dict(path_b=False, use_cram=False),
    "pcgd_full": dict(use_cram=False),
    "pcgd_cram": dict(use_cram=True),
}

ARM_NAMES = {
    "source_only": "Source-Only",
    "unweighted_pl": "Unweighted Pseudo-Labels",
    "wo_path_a": "w/o Path A",
    "wo_path_b": "w/o Path B",
    "pcgd_full": "PCGD (Full)",
    "pcgd_cram": "PCGD + CRAM",
}


def arm_config(base: TrainConfig, arm: str) -> TrainConfig:
    overrides = ARMS[arm]
    if overrides is None:
        return base
    defaults = dict(self_train=False, weighted=True, path_a=True, path_b=True)
    defaults.update(overrides)
    return replace(base, **defaults)


def config_field_names() -> list[str]:
    return [f.name for f in fields(TrainConfig)]
