"""Confidence-guided pseudo-label denoising.

Pipeline: score each target image by how much a briefly self-trained model
drifts from the source model on it, keep the top P% as the consistent set,
rank consistent images per class into Top-K pools, then train with

* Path A: a first-order bi-level step that accepts an update on an
  inconsistent image only through its effect on the most similar consistent
  image (completed with missing classes pasted from the pools), and
* Path B: class-balancing copy-paste of minority objects from the pools onto
  arbitrary target images.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import cram
from . import functional as F
from .functional import IGNORE_INDEX
from .optim import collect_grads
from .segnet import ParamSnapshot, SegModel
from .tensor import Tensor, no_grad

logger = logging.getLogger(__name__)

LossFn = Callable[[SegModel, np.ndarray, np.ndarray, "np.ndarray | None"], Tensor]


# ---------------------------------------------------------------------------
# teacher pseudo-labels


@dataclass
class PseudoLabelBank:
    """Teacher pseudo-labels, confidences and encoder descriptors for the target set."""

    ids: list[str]
    images: np.ndarray
    labels: np.ndarray          # (N, H, W) uint8, IGNORE_INDEX below the confidence floor
    confidence: np.ndarray      # (N, H, W) max softmax probability
    style: np.ndarray | None = None
    position: dict[str, int] = field(init=False)

    def __post_init__(self):
        self.position = {i: k for k, i in enumerate(self.ids)}
        if len(self.position) != len(self.ids):
            raise ValueError("duplicate image ids")

    def __len__(self) -> int:
        return len(self.ids)

    def index_of(self, image_id: str) -> int:
        return self.position[image_id]

    def classes_in(self, image_id: str) -> set[int]:
        lab = self.labels[self.position[image_id]]
        return set(int(c) for c in np.unique(lab) if c != IGNORE_INDEX)


def pixel_pseudo_labels(logits: np.ndarray, o: int, threshold: float) -> tuple[np.ndarray, np.ndarray]:
    """Upsample stride-o logits to pixels, then hard labels and confidences."""
    up = F.resize_np(logits, factor=o)
    prob = F.softmax_np(up, axis=-1)
    conf = prob.max(axis=-1)
    labels = prob.argmax(axis=-1).astype(np.uint8)
    labels[conf < threshold] = IGNORE_INDEX
    return labels, conf.astype(np.float32)


def low_res_view(images: np.ndarray, scale: int) -> np.ndarray:
    """Images bilinearly downsampled by an integer factor (identity for 1)."""
    if scale == 1:
        return images
    return F.resize_np(images, factor=Fraction(1, scale))


def build_bank(teacher: SegModel, ids: Sequence[str], images: np.ndarray,
               threshold: float = 0.2, batch_size: int = 16, scale: int = 1,
               fused: bool = False) -> PseudoLabelBank:
    """Teacher pseudo-labels at full image resolution, predicted from the
    view downsampled by ``scale`` (or, with ``fused``, from the whole-image
    two-resolution fused prediction)."""
    labels, confs, styles = [], [], []
    o = teacher.output_stride
    with no_grad():
        for i in range(0, len(images), batch_size):
            full = np.asarray(images[i:i + batch_size], dtype=teacher.dtype)
            x = low_res_view(full, scale)
            out = teacher.forward(x, with_attention=False)
            if fused:
                lab, conf = pixel_pseudo_labels(cram.fused_predict(teacher, full, scale), o, threshold)
            else:
                lab, conf = pixel_pseudo_labels(out.logits.data, o * scale, threshold)
            labels.append(lab)
            confs.append(conf)
            feats = out.features.data
            styles.append(np.concatenate([feats.mean(axis=(1, 2)), feats.std(axis=(1, 2))], axis=1))
    return PseudoLabelBank(list(ids), images, np.concatenate(labels), np.concatenate(confs),
                           np.concatenate(styles))


# ---------------------------------------------------------------------------
# consistency scoring


@dataclass
class ConsistencyRecord:
    """Per-image consistency: ``cs`` sums ``-KL`` over the prediction grid,
    ``per_class[c]`` sums it over cells whose source-model label is ``c``
    (``class_cells[c]`` of them)."""

    image_id: str
    cs: float
    per_class: dict[int, float]
    assignment: str | None = None
    class_cells: dict[int, int] = field(default_factory=dict)

    def class_mean(self, c: int) -> float:
        n = self.class_cells.get(c, 0)
        return self.per_class[c] / n if n else self.per_class[c]

    def to_json(self) -> str:
        return json.dumps({"id": self.image_id, "cs": self.cs, "assignment": self.assignment,
                           "per_class": {str(k): v for k, v in sorted(self.per_class.items())},
                           "class_cells": {str(k): v for k, v in sorted(self.class_cells.items())}},
                          sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> ConsistencyRecord:
        d = json.loads(line)
        return cls(d["id"], float(d["cs"]), {int(k): float(v) for k, v in d["per_class"].items()},
                   d.get("assignment"), {int(k): int(v) for k, v in d.get("class_cells", {}).items()})


def consistency_from_logits(image_id: str, logits0: np.ndarray, logits_tau: np.ndarray) -> ConsistencyRecord:
    """Score one image from its two stride-o logit maps ``(h, w, C)``."""
    if logits0.shape != logits_tau.shape:
        raise ValueError(f"logit shapes differ: {logits0.shape} vs {logits_tau.shape}")
    p0 = F.softmax_np(logits0.astype(np.float64))
    pt = F.softmax_np(logits_tau.astype(np.float64))
    kl = F.kl_divergence(Tensor(p0), Tensor(pt), check=False).data
    owner = p0.argmax(axis=-1)
    classes = np.unique(owner)
    per_class = {int(c): float(-kl[owner == c].sum()) for c in classes}
    cells = {int(c): int((owner == c).sum()) for c in classes}
    return ConsistencyRecord(image_id, float(-kl.sum()), per_class, None, cells)


def consistency_score(model: SegModel, theta0: ParamSnapshot, theta_tau: ParamSnapshot,
                      x: np.ndarray, image_id: str = "") -> ConsistencyRecord:
    return score_images(model, theta0, theta_tau, [image_id], np.asarray(x)[None])[0]


def score_images(model: SegModel, theta0: ParamSnapshot, theta_tau: ParamSnapshot,
                 ids: Sequence[str], images: np.ndarray, scale: int = 1) -> list[ConsistencyRecord]:
    """Consistency records for a stack of images (scored on the view
    downsampled by ``scale``). ``model`` is used as scratch space and is left
    holding ``theta_tau``."""
    if theta0.values.keys() != theta_tau.values.keys():
        raise ValueError("snapshots come from different architectures")
    images = low_res_view(np.asarray(images, dtype=model.dtype), scale)
    model.restore(theta0)
    l0 = model.predict_logits(images)
    model.restore(theta_tau)
    lt = model.predict_logits(images)
    return [consistency_from_logits(i, a, b) for i, a, b in zip(ids, l0, lt)]


def split_sets(records: Sequence[ConsistencyRecord], P: float) -> tuple[list[str], list[str]]:
    """Top-P% ids by score (ties by id) and the remainder."""
    if not records:
        raise ValueError("no records to split")
    if not 0 < P <= 100:
        raise ValueError(f"P must be in (0, 100], got {P}")
    ranked = sorted(records, key=lambda r: (-r.cs, r.image_id))
    n_keep = math.ceil(P / 100.0 * len(records) - 1e-9)
    consistent = [r.image_id for r in ranked[:n_keep]]
    keep = set(consistent)
    inconsistent = [r.image_id for r in ranked if r.image_id not in keep]
    for r in records:
        r.assignment = "consistent" if r.image_id in keep else "inconsistent"
    return consistent, inconsistent


def write_records(records: Iterable[ConsistencyRecord], path: str | Path) -> None:
    Path(path).write_text("".join(r.to_json() + "\n" for r in records), encoding="utf-8")


def read_records(path: str | Path) -> list[ConsistencyRecord]:
    with open(path, encoding="utf-8") as fh:
        return [ConsistencyRecord.from_json(line) for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# class pools and neighbour retrieval


@dataclass
class ClassPool:
    cls: int
    entries: list[tuple[str, float]]

    @property
    def ids(self) -> list[str]:
        return [i for i, _ in self.entries]

    def __len__(self) -> int:
        return len(self.entries)


def build_class_pools(records: Sequence[ConsistencyRecord], K: int,
                      classes_of: Callable[[str], set[int]] | None = None,
                      rank: str = "mean") -> dict[int, ClassPool]:
    """Top-K consistent images per class.

    ``rank="sum"`` orders by the summed per-class score, ``"mean"`` by its
    per-cell average (the sum favours images with little of the class).
    ``classes_of`` (image id -> classes in its pixel pseudo-label) further
    restricts eligibility so every pooled label really contains the class.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    if rank not in ("sum", "mean"):
        raise ValueError(f"unknown pool ranking {rank!r}")
    candidates: dict[int, list[tuple[str, float]]] = {}
    for r in records:
        present = classes_of(r.image_id) if classes_of is not None else None
        for c, total in r.per_class.items():
            if present is not None and c not in present:
                continue
            score = r.class_mean(c) if rank == "mean" else total
            candidates.setdefault(c, []).append((r.image_id, score))
    pools = {}
    for c in sorted(candidates):
        ranked = sorted(candidates[c], key=lambda e: (-e[1], e[0]))
        pools[c] = ClassPool(c, ranked[:K])
    return pools


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def layout_histogram(label: np.ndarray, num_classes: int, grid=(4, 8)) -> np.ndarray:
    """Per-cell class fractions of a pseudo-label on a coarse grid, flattened."""
    h, w = label.shape
    gy, gx = grid
    rows = np.minimum((np.arange(h) * gy) // h, gy - 1)
    cols = np.minimum((np.arange(w) * gx) // w, gx - 1)
    cell = rows[:, None] * gx + cols[None, :]
    valid = label != IGNORE_INDEX
    flat = cell[valid] * num_classes + label[valid].astype(np.int64)
    counts = np.bincount(flat, minlength=gy * gx * num_classes).reshape(gy * gx, num_classes).astype(np.float64)
    totals = counts.sum(axis=1, keepdims=True)
    return np.divide(counts, totals, out=np.zeros_like(counts), where=totals > 0).ravel()


def describe(style: np.ndarray, label: np.ndarray, num_classes: int) -> np.ndarray:
    """Style and layout vectors, each unit-normalized, concatenated."""
    return np.concatenate([_unit(np.asarray(style, dtype=np.float64)),
                           _unit(layout_histogram(label, num_classes))])


class NeighborIndex:
    """Cosine-similarity lookup restricted to consistent images."""

    def __init__(self, descriptors: Mapping[str, np.ndarray], candidates: Sequence[str]):
        if not candidates:
            raise ValueError("neighbour index needs at least one consistent image")
        self.descriptors = dict(descriptors)
        self.candidates = sorted(candidates)
        dims = {v.shape for v in self.descriptors.values()}
        if len(dims) != 1:
            raise ValueError(f"descriptor dimensions differ: {dims}")
        mat = np.stack([self.descriptors[c] for c in self.candidates])
        self._matrix = mat / np.linalg.norm(mat, axis=1, keepdims=True)

    def similarities(self, query: np.ndarray) -> np.ndarray:
        q = query / np.linalg.norm(query)
        return self._matrix @ q

    def retrieve(self, query_id: str) -> str:
        sims = self.similarities(self.descriptors[query_id])
        # candidates are sorted, so argmax already breaks ties by smallest id
        return self.candidates[int(np.argmax(sims))]


def retrieve_neighbor(query_id: str, index: NeighborIndex) -> str:
    return index.retrieve(query_id)


def build_neighbor_index(bank: PseudoLabelBank, consistent: Sequence[str], num_classes: int) -> NeighborIndex:
    if bank.style is None:
        raise ValueError("bank has no style descriptors")
    desc = {i: describe(bank.style[k], bank.labels[k], num_classes) for k, i in enumerate(bank.ids)}
    return NeighborIndex(desc, consistent)


# ---------------------------------------------------------------------------
# copy-paste


def copy_paste(base: tuple[np.ndarray, ...], donor: tuple[np.ndarray, ...], mask: np.ndarray) -> tuple[np.ndarray, ...]:
    """Overwrite every base array with the donor on ``mask``.

    Arrays are image ``(H, W, 3)`` and any number of ``(H, W)`` maps (labels,
    confidences); pairs are matched positionally.
    """
    out = []
    for b, d in zip(base, donor):
        m = mask[..., None] if b.ndim == 3 else mask
        out.append(np.where(m, d, b).astype(b.dtype, copy=False))
    return tuple(out)


def paste_from_pool(sample: tuple[np.ndarray, np.ndarray, np.ndarray], bank: PseudoLabelBank,
                    pool: ClassPool, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Paste the ``pool.cls`` pixels of a uniformly drawn pool donor onto
    ``(image, labels, confidence)``.

    Pasted pixels get confidence 1: pool donors are the most consistent images
    for that class, so their labels are trusted in full.
    """
    donor = bank.index_of(pool.ids[int(rng.integers(len(pool)))])
    mask = bank.labels[donor] == pool.cls
    img, lab, conf = copy_paste(sample, (bank.images[donor], bank.labels[donor], bank.confidence[donor]), mask)
    return img, lab, np.where(mask, 1.0, conf).astype(conf.dtype, copy=False)


def neighbor_complete(con_id: str, query_id: str, bank: PseudoLabelBank, pools: Mapping[int, ClassPool],
                      rng: np.random.Generator, min_pixels: int = 1):
    """Paste classes the query has but its consistent neighbour lacks.

    Returns ``(image, labels, confidence, pasted_classes)``. Classes are pasted in
    ascending id order so overlaps resolve to the highest class.
    """
    k = bank.index_of(con_id)
    img, lab, conf = bank.images[k], bank.labels[k], bank.confidence[k]
    query_lab = bank.labels[bank.index_of(query_id)]
    counts = np.bincount(query_lab[query_lab != IGNORE_INDEX].ravel(), minlength=256)
    wanted = {int(c) for c in np.nonzero(counts >= min_pixels)[0]}
    missing = sorted(wanted - bank.classes_in(con_id))
    pasted = []
    for c in missing:
        pool = pools.get(c)
        if pool is None or not len(pool):
            logger.debug("no pool for class %d; skipped", c)
            continue
        img, lab, conf = paste_from_pool((img, lab, conf), bank, pool, rng)
        pasted.append(c)
    return img, lab, conf, pasted


def class_pixel_frequency(bank: PseudoLabelBank, ids: Sequence[str], num_classes: int) -> np.ndarray:
    counts = np.zeros(num_classes, dtype=np.float64)
    for i in ids:
        lab = bank.labels[bank.index_of(i)]
        counts += np.bincount(lab[lab != IGNORE_INDEX].ravel(), minlength=num_classes)[:num_classes]
    return counts / max(counts.sum(), 1.0)


def sample_minority_class(pools: Mapping[int, ClassPool], minority: Sequence[int], frequency: np.ndarray,
                          rng: np.random.Generator) -> int | None:
    """Minority class with a non-empty pool, drawn with probability ∝ 1/frequency."""
    avail = [c for c in sorted(minority) if c in pools and len(pools[c])]
    if not avail:
        return None
    w = np.array([1.0 / max(frequency[c], 1e-6) for c in avail])
    return avail[int(rng.choice(len(avail), p=w / w.sum()))]


def balance_batch(bank: PseudoLabelBank, pools: Mapping[int, ClassPool], base_ids: Sequence[str],
                  minority: Sequence[int], frequency: np.ndarray, rng: np.random.Generator, rounds: int = 1):
    """Paste ``rounds`` minority-class objects onto each base image, each
    class drawn with probability inversely proportional to its frequency.

    Returns stacked ``(images, labels, confidence, classes)``, ``classes[k]``
    listing the classes pasted onto image ``k`` in paste order, or ``None``
    when every minority pool is empty.
    """
    if rounds < 1:
        raise ValueError(f"rounds must be >= 1, got {rounds}")
    imgs, labs, confs, classes = [], [], [], []
    for b in base_ids:
        k = bank.index_of(b)
        sample = bank.images[k], bank.labels[k], bank.confidence[k]
        pasted = []
        for _ in range(rounds):
            c = sample_minority_class(pools, minority, frequency, rng)
            if c is None:
                return None
            sample = paste_from_pool(sample, bank, pools[c], rng)
            pasted.append(c)
        imgs.append(sample[0])
        labs.append(sample[1])
        confs.append(sample[2])
        classes.append(pasted)
    return np.stack(imgs), np.stack(labs), np.stack(confs), classes


# ---------------------------------------------------------------------------
# optimisation steps


@dataclass
class StepResult:
    loss: float
    applied: bool
    inner_loss: float = float("nan")


def gradient_step(params: Mapping[str, Tensor], loss_fn: Callable[[], Tensor], optimizer, lr: float) -> StepResult:
    """One optimizer step on ``loss_fn``'s gradient."""
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    loss.backward()
    value = float(loss.item())
    if not math.isfinite(value):
        logger.warning("non-finite loss %.3g; step skipped", value)
        return StepResult(value, False)
    applied = optimizer.step(params, collect_grads(params), lr)
    return StepResult(value, applied)


def bilevel_step(params: Mapping[str, Tensor], inner_loss: Callable[[], Tensor],
                 outer_loss: Callable[[], Tensor], optimizer, alpha: float, lr: float) -> StepResult:
    """First-order bi-level update.

    1. g_in = grad of ``inner_loss`` at theta; theta_inner = theta - alpha * g_in
    2. g_out = grad of ``outer_loss`` at theta_inner
    3. theta <- optimizer(theta, g_out, lr); theta_inner is discarded
    """
    for p in params.values():
        p.grad = None
    lin = inner_loss()
    lin.backward()
    lin_value = float(lin.item())
    g_in = collect_grads(params)
    if not math.isfinite(lin_value) or not all(np.all(np.isfinite(g)) for g in g_in.values()):
        logger.warning("non-finite inner loss %.3g; bi-level step skipped", lin_value)
        for p in params.values():
            p.grad = None
        return StepResult(float("nan"), False, lin_value)

    saved = {k: p.data for k, p in params.items()}
    try:
        for k, p in params.items():
            p.data = (saved[k] - alpha * g_in[k]).astype(saved[k].dtype, copy=False)
            p.grad = None
        lout = outer_loss()
        lout.backward()
        g_out = collect_grads(params)
    finally:
        for k, p in params.items():
            p.data = saved[k]
            p.grad = None
    lout_value = float(lout.item())
    if not math.isfinite(lout_value):
        logger.warning("non-finite outer loss; bi-level step skipped")
        return StepResult(lout_value, False, lin_value)
    applied = optimizer.step(params, g_out, lr)
    return StepResult(lout_value, applied, lin_value)


def balance_step(model: SegModel, optimizer, bank: PseudoLabelBank, pools: Mapping[int, ClassPool],
                 base_ids: Sequence[str], minority: Sequence[int], frequency: np.ndarray,
                 rng: np.random.Generator, lr: float, loss_fn: LossFn, rounds: int = 1) -> StepResult:
    batch = balance_batch(bank, pools, base_ids, minority, frequency, rng, rounds)
    if batch is None:
        logger.info("all minority pools empty; balance step skipped")
        return StepResult(float("nan"), False)
    x, y, q, _ = batch
    return gradient_step(model.params, lambda: loss_fn(model, x, y, q), optimizer, lr)
