"""Tiny convolutional segmentation network with a scale-attention head."""
from __future__ import annotations

from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Mapping, NamedTuple

import numpy as np

from . import functional as F
from .tensor import Tensor, get_default_dtype, no_grad

ARCH_WIDTHS = {
    "b1-toy": (16, 32, 64),
    "b2-toy": (24, 48, 96),
}


@dataclass(frozen=True)
class ModelConfig:
    arch: str = "b1-toy"
    num_classes: int = 8
    output_stride: int = 8
    in_channels: int = 3
    groups: int = 4

    def __post_init__(self):
        if self.arch not in ARCH_WIDTHS:
            raise ValueError(f"unknown arch {self.arch!r}; choose from {sorted(ARCH_WIDTHS)}")
        if self.output_stride not in (4, 8):
            raise ValueError(f"output_stride must be 4 or 8, got {self.output_stride}")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")

    @property
    def strides(self) -> tuple[int, ...]:
        # o=4 keeps the last block at full resolution
        return (2, 2, 2) if self.output_stride == 8 else (2, 2, 1)


class SegOutput(NamedTuple):
    features: Tensor
    logits: Tensor
    attn_logit: Tensor


@dataclass(frozen=True)
class ParamSnapshot:
    """Immutable named copy of every model parameter."""

    tag: str
    values: Mapping[str, np.ndarray]
    iteration: int = 0
    meta: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self):
        if self.iteration < 0:
            raise ValueError("iteration must be non-negative")
        frozen = {}
        for name, arr in self.values.items():
            arr = np.array(arr, copy=True)
            arr.setflags(write=False)
            frozen[name] = arr
        object.__setattr__(self, "values", MappingProxyType(frozen))
        object.__setattr__(self, "meta", MappingProxyType(dict(self.meta)))

    def same_values(self, other: ParamSnapshot) -> bool:
        if self.values.keys() != other.values.keys():
            return False
        return all(
            self.values[k].shape == other.values[k].shape
            and self.values[k].dtype == other.values[k].dtype
            and np.array_equal(self.values[k], other.values[k])
            for k in self.values)


class SegModel:
    """Shared encoder feeding a segmentation head and a 1-channel attention head.

    Parameters live in ``self.params`` (insertion-ordered). Convolution weights
    are stored as ``(kh, kw, C_in, C_out)``.
    """

    def __init__(self, config: ModelConfig | None = None, seed: int = 0, dtype=None):
        self.config = config or ModelConfig()
        self.dtype = np.dtype(dtype or get_default_dtype())
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        cin = self.config.in_channels
        for i, width in enumerate(ARCH_WIDTHS[self.config.arch]):
            self._add_conv(f"enc{i}.conv", rng, 3, cin, width)
            self._add(f"enc{i}.gn.gamma", np.ones(width))
            self._add(f"enc{i}.gn.beta", np.zeros(width))
            cin = width
        self._add_conv("seg_head", rng, 1, cin, self.config.num_classes)
        self._add_conv("attn_head", rng, 1, cin, 1)

    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = Tensor(value.astype(self.dtype), requires_grad=True)

    def _add_conv(self, name: str, rng, k: int, cin: int, cout: int) -> None:
        bound = np.sqrt(6.0 / (k * k * cin))
        self._add(f"{name}.weight", rng.uniform(-bound, bound, size=(k, k, cin, cout)))
        self._add(f"{name}.bias", np.zeros(cout))

    # ------------------------------------------------------------------
    @property
    def output_stride(self) -> int:
        return self.config.output_stride

    @property
    def num_classes(self) -> int:
        return self.config.num_classes

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    # ------------------------------------------------------------------
    def encode(self, x: Tensor) -> Tensor:
        p = self.params
        h = x
        for i, stride in enumerate(self.config.strides):
            h = F.conv2d(h, p[f"enc{i}.conv.weight"], p[f"enc{i}.conv.bias"], stride=stride, padding=1)
            h = F.group_norm(h, self.config.groups, p[f"enc{i}.gn.gamma"], p[f"enc{i}.gn.beta"])
            h = h.relu()
        return h

    def seg_head(self, features: Tensor) -> Tensor:
        return F.conv2d(features, self.params["seg_head.weight"], self.params["seg_head.bias"])

    def attn_head(self, features: Tensor) -> Tensor:
        return F.conv2d(features, self.params["attn_head.weight"], self.params["attn_head.bias"])

    def forward(self, x, with_attention: bool = True) -> SegOutput:
        """Run the network on ``(N, H, W, 3)`` (or a single ``(H, W, 3)``) input.

        Returns features, class logits and the attention pre-activation, all at
        stride ``o``. A 3-D input yields 3-D outputs.
        """
        single = False
        if not isinstance(x, Tensor):
            x = np.asarray(x, dtype=self.dtype)
            single = x.ndim == 3
            if single:
                x = x[None]
            x = Tensor(x)
        elif x.ndim == 3:
            single = True
            x = x.reshape((1,) + x.shape)
        o = self.output_stride
        h, w = x.shape[1], x.shape[2]
        if h % o or w % o:
            raise ValueError(f"input {h}x{w} is not divisible by output stride {o}")
        feats = self.encode(x)
        logits = self.seg_head(feats)
        attn = self.attn_head(feats) if with_attention else None
        if single:
            feats, logits = feats[0], logits[0]
            attn = attn[0] if attn is not None else None
        return SegOutput(feats, logits, attn)

    __call__ = forward

    def predict_logits(self, images: np.ndarray, batch_size: int = 16) -> np.ndarray:
        """Stride-o logits for a stack of images without building a graph."""
        outs = []
        with no_grad():
            for i in range(0, len(images), batch_size):
                outs.append(self.forward(np.asarray(images[i:i + batch_size], dtype=self.dtype),
                                         with_attention=False).logits.data)
        return np.concatenate(outs, axis=0)

    @staticmethod
    def for_snapshot(snap: ParamSnapshot, **overrides) -> SegModel:
        """A model whose architecture matches the metadata stored with ``snap``."""
        config = ModelConfig(arch=snap.meta.get("arch", "b1-toy"),
                             output_stride=snap.meta.get("output_stride", 8), **overrides)
        model = SegModel(config)
        model.restore(snap)
        return model

    # ------------------------------------------------------------------
    def snapshot(self, tag: str, iteration: int = 0, **meta) -> ParamSnapshot:
        meta.setdefault("arch", self.config.arch)
        meta.setdefault("output_stride", self.config.output_stride)
        return ParamSnapshot(tag, {k: v.data for k, v in self.params.items()}, iteration, meta)

    def restore(self, snap: ParamSnapshot) -> None:
        stride = snap.meta.get("output_stride", self.output_stride)
        if stride != self.output_stride:
            raise ValueError(f"snapshot {snap.tag!r} was trained at output stride {stride}, "
                             f"this model uses {self.output_stride}")
        missing = [k for k in self.params if k not in snap.values]
        extra = [k for k in snap.values if k not in self.params]
        if missing or extra:
            raise ValueError(f"snapshot {snap.tag!r} does not fit this model: "
                             f"missing={missing[:3]} unexpected={extra[:3]}")
        for name, param in self.params.items():
            value = snap.values[name]
            if value.shape != param.shape:
                raise ValueError(f"shape mismatch for {name}: snapshot {value.shape} vs model {param.shape}")
        for name, param in self.params.items():
            param.data = np.array(snap.values[name], dtype=self.dtype, copy=True)
            param.grad = None

    def copy(self) -> SegModel:
        clone = SegModel.__new__(SegModel)
        clone.config = self.config
        clone.dtype = self.dtype
        clone.params = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.params.items()}
        return clone
