"""Cross-resolution crops, scale-attention fusion and the two-branch loss.

Geometry conventions
--------------------
* A context crop is a box of the full-resolution image whose corners lie on a
  grid of step ``k = s * o``. It is downsampled by ``s`` to ``h_L x w_L``.
* A detail box lives in context-crop (low-resolution) pixel coordinates, with
  every boundary a multiple of ``o``. The detail *image* is taken from the
  full-resolution image at the matching location, so it spans
  ``s*h_H x s*w_H`` native pixels and predicts an ``(s*h_H/o) x (s*w_H/o)``
  grid that drops exactly onto the ``(s*h_L/o) x (s*w_L/o)`` fused grid.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import functional as F
from .tensor import Tensor, as_tensor, no_grad


@dataclass(frozen=True)
class CropSpec:
    top: int
    bottom: int
    left: int
    right: int
    scale: int = 1
    out_size: tuple[int, int] | None = None

    def __post_init__(self):
        if not (0 <= self.top < self.bottom and 0 <= self.left < self.right):
            raise ValueError(f"degenerate crop {self.box}")

    @property
    def box(self) -> tuple[int, int, int, int]:
        return self.top, self.bottom, self.left, self.right

    @property
    def height(self) -> int:
        return self.bottom - self.top

    @property
    def width(self) -> int:
        return self.right - self.left

    def apply(self, arr: np.ndarray, channels_last: bool = True) -> np.ndarray:
        return crop_array(arr, self, channels_last)


def crop_array(arr: np.ndarray, crop: CropSpec, channels_last: bool = True) -> np.ndarray:
    if channels_last:
        return arr[..., crop.top:crop.bottom, crop.left:crop.right, :]
    return arr[..., crop.top:crop.bottom, crop.left:crop.right]


def valid_context_corners(H: int, W: int, s: int, o: int, h_L: int, w_L: int):
    """All admissible (top, left) corners of a context crop."""
    k = s * o
    tops = list(range(0, H - s * h_L + 1, k))
    lefts = list(range(0, W - s * w_L + 1, k))
    return tops, lefts


def sample_context_crop(H: int, W: int, s: int, o: int, h_L: int, w_L: int,
                        rng: np.random.Generator) -> CropSpec:
    if s < 1 or o < 1:
        raise ValueError("s and o must be positive integers")
    k = s * o
    if s * h_L > H or s * w_L > W:
        raise ValueError(f"context crop {s * h_L}x{s * w_L} larger than image {H}x{W}")
    if H % k or W % k:
        raise ValueError(f"image {H}x{W} not divisible by grid step {k}")
    if (s * h_L) % k or (s * w_L) % k:
        raise ValueError(f"context size {h_L}x{w_L} does not land on the grid of step {k}")
    tops, lefts = valid_context_corners(H, W, s, o, h_L, w_L)
    top = tops[int(rng.integers(len(tops)))]
    left = lefts[int(rng.integers(len(lefts)))]
    return CropSpec(top, top + s * h_L, left, left + s * w_L, scale=s, out_size=(h_L, w_L))


def sample_detail_crop(context: CropSpec, h_H: int, w_H: int, o: int,
                       rng: np.random.Generator) -> CropSpec:
    """Detail box inside the context crop, in low-resolution crop coordinates."""
    h_L, w_L = context.out_size or (context.height // context.scale, context.width // context.scale)
    if h_H > h_L or w_H > w_L:
        raise ValueError(f"detail {h_H}x{w_H} larger than context {h_L}x{w_L}")
    if h_H % o or w_H % o:
        raise ValueError(f"detail size {h_H}x{w_H} not divisible by output stride {o}")
    tops = np.arange(0, h_L - h_H + 1, o)
    lefts = np.arange(0, w_L - w_H + 1, o)
    top = int(tops[rng.integers(len(tops))])
    left = int(lefts[rng.integers(len(lefts))])
    return CropSpec(top, top + h_H, left, left + w_H, scale=1, out_size=(h_H, w_H))


def detail_region_hr(context: CropSpec, detail: CropSpec) -> CropSpec:
    """Full-resolution image box covered by a detail box."""
    s = context.scale
    return CropSpec(context.top + s * detail.top, context.top + s * detail.bottom,
                    context.left + s * detail.left, context.left + s * detail.right, scale=1)


def extract_crops(images: np.ndarray, context: CropSpec, detail: CropSpec) -> tuple[np.ndarray, np.ndarray]:
    """Low-resolution context input and full-resolution detail input for a batch."""
    ctx = crop_array(images, context)
    lr = F.resize_np(ctx, factor=Fraction(1, context.scale))
    hr = crop_array(images, detail_region_hr(context, detail))
    return np.ascontiguousarray(lr), np.ascontiguousarray(hr)


# ---------------------------------------------------------------------------
# fusion


@dataclass
class FusionInputs:
    y_lr: Tensor          # (N, h_L/o, w_L/o, C) context logits
    y_hr: Tensor          # (N, s*h_H/o, s*w_H/o, C) detail logits
    a_lr: Tensor          # (N, h_L/o, w_L/o, 1) attention after the sigmoid
    detail: CropSpec      # detail box in context-crop pixels

    def __post_init__(self):
        a = self.a_lr.data
        if np.any(a < 0) or np.any(a > 1):
            raise ValueError("attention must lie in [0, 1]")


def attention_mask(shape_lr: tuple[int, int], detail: CropSpec, o: int) -> np.ndarray:
    """Binary (h_L/o, w_L/o) mask of the detail region on the context grid."""
    if any(v % o for v in detail.box):
        raise ValueError(f"detail box {detail.box} not aligned to output stride {o}")
    m = np.zeros(shape_lr, dtype=np.float64)
    m[detail.top // o:detail.bottom // o, detail.left // o:detail.right // o] = 1.0
    return m


def fuse(inputs: FusionInputs, s: int, o: int) -> Tensor:
    """``zeta((1 - a') * y_LR, s) + zeta(a', s) * pad(y_HR)`` on the fused grid."""
    y_lr, y_hr, a = as_tensor(inputs.y_lr), as_tensor(inputs.y_hr), as_tensor(inputs.a_lr)
    n, gh, gw, c = y_lr.shape
    d = inputs.detail
    if a.shape != (n, gh, gw, 1):
        raise ValueError(f"attention shape {a.shape} does not match context grid {(n, gh, gw, 1)}")
    if d.bottom > gh * o or d.right > gw * o:
        raise ValueError(f"detail box {d.box} exceeds context crop {gh * o}x{gw * o}")
    expect = (n, s * d.height // o, s * d.width // o, c)
    if y_hr.shape != expect:
        raise ValueError(f"detail logits {y_hr.shape}, expected {expect}")
    mask = attention_mask((gh, gw), d, o).astype(a.dtype)[None, :, :, None]
    a_masked = a * mask
    pad = pad_to_fused_grid(y_hr, d, (gh, gw), s, o)
    ctx = F.bilinear_resize((1.0 - a_masked) * y_lr, factor=s)
    att = F.bilinear_resize(a_masked, factor=s)
    return ctx + att * pad


def pad_to_fused_grid(y_hr: Tensor, detail: CropSpec, grid_lr: tuple[int, int], s: int, o: int) -> Tensor:
    gh, gw = grid_lr
    top, left = s * detail.top // o, s * detail.left // o
    bottom = s * gh - top - y_hr.shape[1]
    right = s * gw - left - y_hr.shape[2]
    return F.pad2d(y_hr, top, bottom, left, right)


def cram_loss(fused: Tensor, detail_logits: Tensor,
              labels_fused: np.ndarray, weights_fused: np.ndarray | None,
              labels_hr: np.ndarray, weights_hr: np.ndarray | None,
              lambda_d: float = 0.3, temperature: float = 1.0) -> Tensor:
    """Blend of the fused-prediction and detail-prediction cross entropies.

    Logits are bilinearly upsampled to the resolution of their label maps
    before the loss when the sizes differ.
    """
    if not 0.0 <= lambda_d <= 1.0:
        raise ValueError(f"lambda_d must be in [0, 1], got {lambda_d}")
    if temperature <= 0:
        raise ValueError("temperature must be positive")

    def _ce(logits: Tensor, labels, weights):
        size = np.asarray(labels).shape[-2:]
        if logits.shape[1:3] != tuple(size):
            logits = F.bilinear_resize(logits, size=size)
        return F.softmax_cross_entropy(logits, labels, weights, temperature)

    terms = []
    if lambda_d < 1.0:
        terms.append(_ce(fused, labels_fused, weights_fused) * (1.0 - lambda_d))
    if lambda_d > 0.0:
        terms.append(_ce(detail_logits, labels_hr, weights_hr) * lambda_d)
    loss = terms[0]
    for t in terms[1:]:
        loss = loss + t
    return loss


# ---------------------------------------------------------------------------
# model-level helpers


def cram_forward(model, images: np.ndarray, context: CropSpec, detail: CropSpec):
    """Run both branches on a batch and fuse. Returns ``(fused, detail_logits)``."""
    lr, hr = extract_crops(images, context, detail)
    o = model.output_stride
    out_lr = model.forward(lr.astype(model.dtype))
    out_hr = model.forward(hr.astype(model.dtype), with_attention=False)
    a = out_lr.attn_logit.sigmoid()
    fused = fuse(FusionInputs(out_lr.logits, out_hr.logits, a, detail), context.scale, o)
    return fused, out_hr.logits


def fused_predict(model, images: np.ndarray, s: int) -> np.ndarray:
    """Whole-image fused logits at stride ``o``: the context is the full image
    downsampled by ``s`` and the detail covers it entirely."""
    n, H, W, _ = images.shape
    o = model.output_stride
    context = CropSpec(0, H, 0, W, scale=s, out_size=(H // s, W // s))
    detail = CropSpec(0, H // s, 0, W // s, scale=1, out_size=(H // s, W // s))
    with no_grad():
        fused, _ = cram_forward(model, images, context, detail)
    return fused.data
