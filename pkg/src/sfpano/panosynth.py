"""Deterministic synthetic pinhole (source) and panoramic (target) scenes.

Scenes are indoor-style layouts: ceiling / wall / floor bands plus objects
drawn from a long-tailed class distribution. The target domain renders the same
kind of layout on a wider, horizontally periodic canvas, widens every object
row by a latitude-dependent factor ``sec(lat * phi_max)`` (the equirectangular
polar stretch) and applies a colour shift.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image

from .functional import IGNORE_INDEX

logger = logging.getLogger(__name__)

CLASS_NAMES = ("ceiling", "chair", "door", "floor", "sofa", "table", "wall", "window")
MINORITY_NAMES = ("chair", "door", "sofa", "table", "window")
MINORITY_CLASSES = tuple(CLASS_NAMES.index(n) for n in MINORITY_NAMES)
MAJORITY_CLASSES = tuple(c for c in range(len(CLASS_NAMES)) if c not in MINORITY_CLASSES)

# most to least frequent
FREQUENCY_ORDER = ("wall", "ceiling", "floor", "door", "table", "chair", "sofa", "window")

BASE_COLORS = np.array([
    [0.86, 0.84, 0.78],  # ceiling
    [0.72, 0.28, 0.22],  # chair
    [0.50, 0.32, 0.18],  # door
    [0.42, 0.38, 0.34],  # floor
    [0.26, 0.36, 0.66],  # sofa
    [0.62, 0.46, 0.22],  # table
    [0.70, 0.68, 0.58],  # wall
    [0.55, 0.78, 0.90],  # window
])

# (shape kinds, vertical centre range as fraction of H, height range, width range) in pixels/fractions
_OBJECT_PRIORS = {
    "ceiling": (("ellipse",), (0.05, 0.25), (0.10, 0.20), (0.20, 0.45)),
    "chair": (("rect", "ellipse"), (0.62, 0.85), (0.14, 0.24), (0.10, 0.18)),
    "door": (("rect",), (0.45, 0.62), (0.40, 0.55), (0.12, 0.20)),
    "floor": (("ellipse", "band"), (0.80, 0.95), (0.08, 0.16), (0.30, 0.60)),
    "sofa": (("rect", "ellipse"), (0.62, 0.80), (0.14, 0.22), (0.26, 0.42)),
    "table": (("rect",), (0.55, 0.75), (0.08, 0.14), (0.22, 0.38)),
    "wall": (("rect", "band"), (0.35, 0.60), (0.15, 0.30), (0.20, 0.40)),
    "window": (("rect",), (0.28, 0.45), (0.14, 0.22), (0.14, 0.24)),
}


@dataclass(frozen=True)
class SceneSpec:
    """Everything that determines a generated dataset besides ``n``."""

    seed: int = 0
    num_classes: int = 8
    decay: float = 0.65
    objects_per_image: int = 10
    source_size: tuple[int, int] = (64, 64)
    target_size: tuple[int, int] = (64, 128)
    texture_sigma: float = 0.05
    target_noise: float = 0.12
    color_jitter: float = 0.06
    distortion: bool = True
    phi_max_deg: float = 60.0
    stretch_clamp: float = 3.0
    color_shift: bool = True
    hue_shift_deg: float = 40.0
    brightness: float = 0.8
    offset: tuple[float, float, float] = (0.04, -0.02, 0.06)

    def __post_init__(self):
        if self.num_classes != len(CLASS_NAMES):
            raise ValueError(f"the synthetic palette has {len(CLASS_NAMES)} classes")
        if not 0 < self.decay <= 1:
            raise ValueError("decay must be in (0, 1]")
        if self.objects_per_image < 0:
            raise ValueError("objects_per_image must be non-negative")
        for h, w in (self.source_size, self.target_size):
            if h <= 0 or w <= 0:
                raise ValueError("image sizes must be positive")
        if self.target_size[1] / self.target_size[0] <= self.source_size[1] / self.source_size[0]:
            raise ValueError("target aspect ratio must be wider than the source")
        if self.stretch_clamp < 1:
            raise ValueError("stretch_clamp must be >= 1")

    @property
    def class_frequencies(self) -> np.ndarray:
        ranks = np.array([FREQUENCY_ORDER.index(n) for n in CLASS_NAMES])
        f = self.decay ** ranks
        return f / f.sum()

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Sample:
    id: str
    image: np.ndarray
    label: np.ndarray | None
    domain: str
    split: str

    def __post_init__(self):
        if self.domain not in ("source", "target"):
            raise ValueError(f"unknown domain {self.domain!r}")
        if self.split not in ("train", "val"):
            raise ValueError(f"unknown split {self.split!r}")


@dataclass(frozen=True)
class Shape:
    """One primitive in pixel units; ``cx`` is measured along the (periodic) width."""

    kind: str
    cls: int
    cy: float
    cx: float
    h: float
    w: float


@dataclass
class Layout:
    height: int
    width: int
    bands: tuple[int, int]
    shapes: list[Shape] = field(default_factory=list)


# ---------------------------------------------------------------------------
# layout sampling


def _stream(spec: SceneSpec, domain: str, split: str, index: int) -> np.random.Generator:
    codes = {"source": 1, "target": 2, "train": 1, "val": 2}
    return np.random.default_rng([spec.seed, codes[domain], codes[split], index])


def sample_layout(spec: SceneSpec, rng: np.random.Generator, size: tuple[int, int]) -> Layout:
    h, w = size
    top = int(round(rng.uniform(0.14, 0.28) * h))
    bottom = int(round(rng.uniform(0.72, 0.86) * h))
    layout = Layout(h, w, (top, bottom))
    # same object density per pixel in both domains
    n_obj = int(round(spec.objects_per_image * (h * w) / (spec.source_size[0] * spec.source_size[1])))
    freqs = spec.class_frequencies
    for _ in range(n_obj):
        cls = int(rng.choice(len(CLASS_NAMES), p=freqs))
        kinds, cy_rng, h_rng, w_rng = _OBJECT_PRIORS[CLASS_NAMES[cls]]
        kind = kinds[int(rng.integers(len(kinds)))]
        sh = rng.uniform(*h_rng) * h
        sw = rng.uniform(*w_rng) * h if kind != "band" else float(w)
        cy = rng.uniform(*cy_rng) * h
        cx = rng.uniform(0, w)
        layout.shapes.append(Shape(kind, cls, cy, cx, sh, sw))
    # draw larger shapes first so small ones stay visible
    layout.shapes.sort(key=lambda s: -(s.h * s.w))
    return layout


# ---------------------------------------------------------------------------
# rendering


def row_stretch(spec: SceneSpec, height: int) -> np.ndarray:
    """Horizontal widening factor for every row of a panoramic canvas."""
    if not spec.distortion:
        return np.ones(height)
    lat = (np.arange(height) + 0.5 - height / 2) / (height / 2)
    return np.minimum(1.0 / np.cos(np.deg2rad(lat * spec.phi_max_deg)), spec.stretch_clamp)


def render_label(layout: Layout, stretch: np.ndarray | None = None, wrap: bool = False) -> np.ndarray:
    """Paint the layout into an integer label map.

    ``stretch`` gives a per-row widening factor applied around each shape's
    centre; with ``wrap`` the width axis is periodic.
    """
    h, w = layout.height, layout.width
    if stretch is None:
        stretch = np.ones(h)
    wall, ceiling, floor = CLASS_NAMES.index("wall"), CLASS_NAMES.index("ceiling"), CLASS_NAMES.index("floor")
    label = np.full((h, w), wall, dtype=np.uint8)
    top, bottom = layout.bands
    label[:top] = ceiling
    label[bottom:] = floor
    rows = np.arange(h) + 0.5
    cols = np.arange(w) + 0.5
    for s in layout.shapes:
        dy = (rows - s.cy) / (s.h / 2)
        inside_rows = np.abs(dy) <= 1
        if not inside_rows.any():
            continue
        if s.kind == "band":
            label[inside_rows] = s.cls
            continue
        half = np.full(h, s.w / 2)
        if s.kind == "ellipse":
            half = half * np.sqrt(np.clip(1 - dy ** 2, 0, None))
        half = half * stretch
        dx = cols[None, :] - s.cx
        if wrap:
            dx = (dx + w / 2) % w - w / 2
        mask = inside_rows[:, None] & (np.abs(dx) <= half[:, None])
        label[mask] = s.cls
    return label


def _hue_matrix(deg: float) -> np.ndarray:
    """Rotation about the grey axis of RGB space."""
    t = np.deg2rad(deg)
    c, s = np.cos(t), np.sin(t)
    k = 1.0 / 3.0
    sq = np.sqrt(k)
    return np.array([
        [c + (1 - c) * k, k * (1 - c) - sq * s, k * (1 - c) + sq * s],
        [k * (1 - c) + sq * s, c + k * (1 - c), k * (1 - c) - sq * s],
        [k * (1 - c) - sq * s, k * (1 - c) + sq * s, c + k * (1 - c)],
    ])


def colorize(label: np.ndarray, layout: Layout, spec: SceneSpec, rng: np.random.Generator,
             shift: bool) -> np.ndarray:
    """Class colours with per-image jitter and Gaussian texture, quantized to 8 bits."""
    palette = BASE_COLORS + rng.normal(0, spec.color_jitter, size=BASE_COLORS.shape)
    img = palette[label]
    img = img + rng.normal(0, spec.texture_sigma, size=img.shape)
    if shift:
        img = spec.brightness * img @ _hue_matrix(spec.hue_shift_deg).T + np.asarray(spec.offset)
        if spec.target_noise:
            img = img + rng.normal(0, spec.target_noise, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    return (np.round(img * 255) / 255).astype(np.float32)


def _render_sample(spec: SceneSpec, domain: str, split: str, index: int) -> Sample:
    rng = _stream(spec, domain, split, index)
    if domain == "source":
        layout = sample_layout(spec, rng, spec.source_size)
        label = render_label(layout)
        image = colorize(label, layout, spec, rng, shift=False)
    else:
        layout = sample_layout(spec, rng, spec.target_size)
        label = render_label(layout, row_stretch(spec, layout.height), wrap=True)
        image = colorize(label, layout, spec, rng, shift=spec.color_shift)
    prefix = "src" if domain == "source" else "tgt"
    return Sample(f"{prefix}-{split}-{index:05d}", image, label, domain, split)


def gen_source(spec: SceneSpec, n: int, split: str = "train") -> list[Sample]:
    if n < 1:
        raise ValueError("n must be >= 1")
    return [_render_sample(spec, "source", split, i) for i in range(n)]


def gen_target(spec: SceneSpec, n: int, split: str = "train") -> list[Sample]:
    if n < 1:
        raise ValueError("n must be >= 1")
    return [_render_sample(spec, "target", split, i) for i in range(n)]


def pixel_shares(labels: Sequence[np.ndarray], num_classes: int = len(CLASS_NAMES)) -> np.ndarray:
    counts = np.zeros(num_classes, dtype=np.int64)
    for lab in labels:
        lab = lab[lab != IGNORE_INDEX]
        counts += np.bincount(lab.ravel(), minlength=num_classes)[:num_classes]
    return counts / max(counts.sum(), 1)


# ---------------------------------------------------------------------------
# persistence


def write_dataset(samples: Sequence[Sample], root: str | Path) -> Path:
    """Write one split to ``root/<domain>/<split>/`` with a JSON-lines manifest.

    Returns the split directory. All samples must share domain and split.
    """
    if not samples:
        raise ValueError("nothing to write")
    domain, split = samples[0].domain, samples[0].split
    if any(s.domain != domain or s.split != split for s in samples):
        raise ValueError("samples mix domains or splits")
    out = Path(root) / domain / split
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    lines = []
    for s in samples:
        img_rel = f"images/{s.id}.png"
        lab_rel = f"labels/{s.id}.png"
        Image.fromarray(np.round(s.image * 255).astype(np.uint8), mode="RGB").save(out / img_rel)
        Image.fromarray(s.label.astype(np.uint8), mode="L").save(out / lab_rel)
        lines.append(json.dumps({"id": s.id, "image": img_rel, "label": lab_rel,
                                 "domain": domain, "split": split}, sort_keys=True))
    (out / "manifest.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return out


def read_manifest(split_dir: str | Path) -> list[dict]:
    path = Path(split_dir) / "manifest.jsonl"
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def load_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return (np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0)


def read_images(split_dir: str | Path) -> tuple[list[str], np.ndarray]:
    """Images of one split; never touches the label files."""
    split_dir = Path(split_dir)
    records = read_manifest(split_dir)
    ids = [r["id"] for r in records]
    images = np.stack([load_image(split_dir / r["image"]) for r in records])
    return ids, images


class LabelStore:
    """Read-only access to ground-truth label maps with an access counter.

    Target ground truth is only reachable through this object, which lets the
    evaluation code read labels while tests assert that adaptation never does.
    """

    def __init__(self, labels: dict[str, np.ndarray] | None = None, split_dir: str | Path | None = None):
        self._labels = dict(labels or {})
        self._paths: dict[str, Path] = {}
        if split_dir is not None:
            split_dir = Path(split_dir)
            for r in read_manifest(split_dir):
                self._paths[r["id"]] = split_dir / r["label"]
        self.reads = 0

    @classmethod
    def from_samples(cls, samples: Sequence[Sample]) -> LabelStore:
        return cls({s.id: s.label for s in samples})

    def ids(self) -> list[str]:
        return sorted(set(self._labels) | set(self._paths))

    def __len__(self) -> int:
        return len(self.ids())

    def __getitem__(self, sample_id: str) -> np.ndarray:
        self.reads += 1
        if sample_id in self._labels:
            return self._labels[sample_id]
        with Image.open(self._paths[sample_id]) as im:
            return np.asarray(im, dtype=np.uint8).copy()

    def __iter__(self) -> Iterator[str]:
        return iter(self.ids())


def read_dataset(split_dir: str | Path) -> list[Sample]:
    """Full samples (images and labels) of a split, for labelled data only."""
    split_dir = Path(split_dir)
    out = []
    for r in read_manifest(split_dir):
        with Image.open(split_dir / r["label"]) as im:
            label = np.asarray(im, dtype=np.uint8).copy()
        out.append(Sample(r["id"], load_image(split_dir / r["image"]), label, r["domain"], r["split"]))
    return out


def strip_labels(samples: Sequence[Sample]) -> tuple[list[str], np.ndarray]:
    """Ids and stacked images; the adaptation entry points take only these."""
    return [s.id for s in samples], np.stack([s.image for s in samples])


def identity_target(spec: SceneSpec) -> SceneSpec:
    """The target generator with distortion and colour shift switched off."""
    return replace(spec, distortion=False, color_shift=False)
