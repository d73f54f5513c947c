"""Differentiable building blocks for the segmentation stack.

All spatial tensors are channels-last: ``(N, H, W, C)``. Label maps are integer
``(N, H, W)`` arrays where ``IGNORE_INDEX`` marks excluded pixels.
"""
from __future__ import annotations

from fractions import Fraction
from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, as_tensor

IGNORE_INDEX = 255
KL_EPS = 1e-12


# ---------------------------------------------------------------------------
# convolution and normalization


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation. ``weight`` has shape ``(kh, kw, C_in, C_out)``."""
    n, h, w, c = x.shape
    kh, kw, cin, cout = weight.shape
    if cin != c:
        raise ValueError(f"conv2d expects {cin} input channels, got {c}")
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    hp, wp = xp.shape[1], xp.shape[2]
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    if kh == 1 and kw == 1:
        cols = xp[:, ::stride, ::stride, :][:, :ho, :wo, :].reshape(-1, c)
    else:
        win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
        # win: (n, ho, wo, c, kh, kw) -> (n, ho, wo, kh, kw, c)
        cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * c)
    w2 = weight.data.reshape(kh * kw * cin, cout)
    out = cols @ w2
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, cout)

    def _bw(g):
        g2 = g.reshape(-1, cout)
        gw = (cols.T @ g2).reshape(weight.shape)
        gb = g2.sum(axis=0) if bias is not None else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ w2.T).reshape(n, ho, wo, kh, kw, c)
            gxp = np.zeros((n, hp, wp, c), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += dcols[:, :, :, i, j, :]
            gx = gxp[:, padding:padding + h, padding:padding + w, :] if padding else gxp
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return Tensor._make(out, parents, _bw, "conv2d")


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    n, h, w, c = x.shape
    if c % groups:
        raise ValueError(f"{c} channels not divisible into {groups} groups")
    cg = c // groups
    xg = x.data.reshape(n, h, w, groups, cg)
    mu = xg.mean(axis=(1, 2, 4), keepdims=True)
    var = xg.var(axis=(1, 2, 4), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xg - mu) * inv
    xhat_flat = xhat.reshape(n, h, w, c)
    out = xhat_flat * gamma.data + beta.data
    m = h * w * cg

    def _bw(g):
        ggamma = (g * xhat_flat).sum(axis=(0, 1, 2))
        gbeta = g.sum(axis=(0, 1, 2))
        gxhat = (g * gamma.data).reshape(n, h, w, groups, cg)
        s1 = gxhat.sum(axis=(1, 2, 4), keepdims=True)
        s2 = (gxhat * xhat).sum(axis=(1, 2, 4), keepdims=True)
        gx = (inv / m) * (m * gxhat - s1 - xhat * s2)
        return gx.reshape(n, h, w, c), ggamma, gbeta

    return Tensor._make(out, (x, gamma, beta), _bw, "group_norm")


# ---------------------------------------------------------------------------
# softmax family


def softmax_np(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    p = softmax_np(x.data, axis)

    def _bw(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return Tensor._make(p, (x,), _bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def _bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return Tensor._make(out, (x,), _bw, "log_softmax")


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray, weights: np.ndarray | None = None,
                          temperature: float = 1.0, ignore_index: int = IGNORE_INDEX) -> Tensor:
    """Weighted, temperature-scaled cross entropy averaged over non-ignored pixels.

    ``logits`` is ``(..., C)``; ``labels`` matches the leading dims. The mean is
    taken over the count of valid pixels, not the weight mass.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    labels = np.asarray(labels)
    c = logits.shape[-1]
    if labels.shape != logits.shape[:-1]:
        raise ValueError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    valid = labels != ignore_index
    if np.any(labels[valid] >= c) or np.any(labels[valid] < 0):
        raise ValueError(f"label out of range for {c} classes")

    z = logits.data / temperature
    z = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    safe = np.where(valid, labels, 0)
    picked = np.take_along_axis(logp, safe[..., None], axis=-1)[..., 0]
    w = valid.astype(logits.dtype)
    if weights is not None:
        w = w * np.asarray(weights, dtype=logits.dtype)
    count = int(valid.sum())
    denom = max(count, 1)
    loss = np.asarray(-(w * picked).sum() / denom, dtype=logits.dtype)

    def _bw(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, safe[..., None], 1.0, axis=-1)
        grad = (p - onehot) * (w / (denom * temperature))[..., None]
        return (grad * g,)

    return Tensor._make(loss, (logits,), _bw, "softmax_ce")


def kl_divergence(p: Tensor, q: Tensor, axis: int = -1, check: bool = True) -> Tensor:
    """Per-pixel KL(p || q) over the class axis.

    Terms with ``p == 0`` contribute nothing; ``q`` is clamped at ``KL_EPS``
    before the log.
    """
    p, q = as_tensor(p), as_tensor(q)
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {q.shape}")
    pd, qd = p.data, q.data
    if check:
        for name, arr in (("p", pd), ("q", qd)):
            if np.any(arr < 0):
                raise ValueError(f"{name} has negative entries")
            if np.any(np.abs(arr.sum(axis=axis) - 1.0) > 1e-6):
                raise ValueError(f"{name} does not sum to 1 along axis {axis}")
    qc = np.maximum(qd, KL_EPS)
    pos = pd > 0
    ratio = np.where(pos, pd, 1.0) / qc
    terms = np.where(pos, pd * np.log(ratio), 0.0)
    out = terms.sum(axis=axis)

    def _bw(g):
        ge = np.expand_dims(g, axis)
        gp = np.where(pos, np.log(ratio) + 1.0, 0.0) * ge
        gq = np.where(qd > KL_EPS, -pd / qc, 0.0) * ge
        return gp, gq

    return Tensor._make(out, (p, q), _bw, "kl")


# ---------------------------------------------------------------------------
# bilinear resampling (align_corners=False)


@lru_cache(maxsize=256)
def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row ``i`` holds the weights that output sample ``i`` puts on the inputs."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        m[i, i0] += 1.0 - lam
        m[i, i1] += lam
    m.setflags(write=False)
    return m


def _resize_shape(h: int, w: int, factor=None, size=None) -> tuple[int, int]:
    if size is not None:
        return int(size[0]), int(size[1])
    if factor is None:
        raise ValueError("give either factor or size")
    f = Fraction(factor).limit_denominator(1 << 16) if not isinstance(factor, Fraction) else factor
    ho, wo = h * f, w * f
    if ho.denominator != 1 or wo.denominator != 1 or ho <= 0 or wo <= 0:
        raise ValueError(f"factor {factor} gives non-integer output size for {h}x{w}")
    return int(ho), int(wo)


def bilinear_resize(x: Tensor, factor=None, size=None) -> Tensor:
    """Resize the spatial axes of an ``(N, H, W, C)`` tensor.

    ``factor`` may be any positive rational (``Fraction(1, 2)`` or ``0.5``);
    alternatively pass the target ``size=(h, w)``.
    """
    x = as_tensor(x)
    n, h, w, c = x.shape
    ho, wo = _resize_shape(h, w, factor, size)
    if (ho, wo) == (h, w):
        return x
    ry = _interp_matrix(h, ho).astype(x.dtype)
    rx = _interp_matrix(w, wo).astype(x.dtype)
    # rows then columns, both as batched matmuls on contiguous views
    t = ry @ x.data.reshape(n, h, w * c)                   # (n, ho, w*c)
    out = rx @ t.reshape(n * ho, w, c)                     # (n*ho, wo, c)
    out = out.reshape(n, ho, wo, c)

    def _bw(g):
        gt = rx.T @ g.reshape(n * ho, wo, c)               # (n*ho, w, c)
        gx = ry.T @ gt.reshape(n, ho, w * c)               # (n, h, w*c)
        return (gx.reshape(n, h, w, c),)

    return Tensor._make(out, (x,), _bw, "bilinear")


def resize_np(x: np.ndarray, factor=None, size=None) -> np.ndarray:
    """Non-differentiable bilinear resize for ``(N, H, W, C)`` arrays."""
    return bilinear_resize(Tensor(x), factor=factor, size=size).data


# ---------------------------------------------------------------------------
# spatial placement


def pad2d(x: Tensor, top: int, bottom: int, left: int, right: int) -> Tensor:
    """Zero-pad the spatial axes of an ``(N, H, W, C)`` tensor."""
    if min(top, bottom, left, right) < 0:
        raise ValueError("padding must be non-negative")
    n, h, w, c = x.shape
    out = np.zeros((n, h + top + bottom, w + left + right, c), dtype=x.dtype)
    out[:, top:top + h, left:left + w, :] = x.data
    return Tensor._make(out, (x,), lambda g: (g[:, top:top + h, left:left + w, :],), "pad2d")


def crop2d(x: Tensor, top: int, bottom: int, left: int, right: int) -> Tensor:
    return x[:, top:bottom, left:right, :]
