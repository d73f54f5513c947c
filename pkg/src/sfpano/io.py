"""Binary checkpoints and strict YAML run configs.

Checkpoint layout (all integers little-endian)::

    b"DPSS"  u16 version
    u32 meta_len  meta_len bytes of UTF-8 JSON (tag, iteration, meta)
    u32 count
    count x [u16 name_len, name, u8 dtype_code, u8 rank, rank x u32 dims, payload]
    u32 CRC32 of every preceding byte
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .panosynth import SceneSpec
from .segnet import ParamSnapshot
from .trainer import TrainConfig

MAGIC = b"DPSS"
VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i4"), 4: np.dtype("<i8"), 5: np.dtype("u1")}


class CheckpointError(ValueError):
    pass


def _dtype_code(arr: np.ndarray) -> int:
    for code, dt in _DTYPES.items():
        if arr.dtype.kind == dt.kind and arr.dtype.itemsize == dt.itemsize:
            return code
    raise CheckpointError(f"unsupported dtype {arr.dtype}")


def encode_checkpoint(snapshot: ParamSnapshot) -> bytes:
    meta = json.dumps({"tag": snapshot.tag, "iteration": snapshot.iteration, "meta": dict(snapshot.meta)},
                      sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<H", VERSION), struct.pack("<I", len(meta)), meta,
             struct.pack("<I", len(snapshot.values))]
    for name, value in snapshot.values.items():
        arr = np.asarray(value)
        code = _dtype_code(arr)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated checkpoint at offset {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(buf: bytes) -> ParamSnapshot:
    if len(buf) < 10 or buf[:4] != MAGIC:
        raise CheckpointError("not a checkpoint: bad magic bytes at offset 0")
    body, (stored,) = buf[:-4], struct.unpack("<I", buf[-4:])
    actual = zlib.crc32(body)
    if stored != actual:
        raise CheckpointError(f"CRC mismatch at offset {len(body)}: stored {stored:#010x}, "
                              f"computed {actual:#010x}")
    r = _Reader(body)
    r.take(4)
    (version,) = r.unpack("<H")
    if version != VERSION:
        raise CheckpointError(f"unknown checkpoint version {version} (supported: {VERSION})")
    (meta_len,) = r.unpack("<I")
    meta = json.loads(r.take(meta_len).decode("utf-8"))
    (count,) = r.unpack("<I")
    values: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        code, rank = r.unpack("<BB")
        if code not in _DTYPES:
            raise CheckpointError(f"unknown dtype code {code} for tensor {name!r} at offset {r.pos - 2}")
        dims = r.unpack(f"<{rank}I") if rank else ()
        dt = _DTYPES[code]
        n = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        if name in values:
            raise CheckpointError(f"duplicate tensor {name!r}")
        values[name] = np.frombuffer(r.take(n), dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
    if r.pos != len(body):
        raise CheckpointError(f"{len(body) - r.pos} trailing bytes at offset {r.pos}")
    return ParamSnapshot(meta["tag"], values, meta["iteration"], meta.get("meta", {}))


def save_checkpoint(snapshot: ParamSnapshot, path: str | Path) -> None:
    Path(path).write_bytes(encode_checkpoint(snapshot))


def load_checkpoint(path: str | Path) -> ParamSnapshot:
    return decode_checkpoint(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# configs


class ConfigError(ValueError):
    pass


# YAML section of every TrainConfig field
SECTIONS = {
    "optim": ("base_lr", "poly_power", "weight_decay", "adam_eps", "adam_betas", "batch", "total_iters",
              "augment"),
    "pcgd": ("P", "tau", "K", "paste_rounds", "alpha", "conf_threshold", "self_train", "weighted", "path_a", "path_b"),
    "cram": ("use_cram", "s", "lambda_d", "context_size", "detail_size", "temperature"),
    "model": ("arch", "output_stride"),
    "pretrain": ("pretrain_iters", "pretrain_lr", "pretrain_batch"),
    "run": ("seed", "log_every"),
}


@dataclass(frozen=True)
class DataConfig:
    """Dataset sizes plus the scene generator settings."""

    n_source_train: int = 400
    n_source_val: int = 100
    n_target_train: int = 400
    n_target_val: int = 100
    scene: SceneSpec = field(default_factory=SceneSpec)

    def __post_init__(self):
        for f in ("n_source_train", "n_source_val", "n_target_train", "n_target_val"):
            if getattr(self, f) < 1:
                raise ValueError(f"{f} must be >= 1")


@dataclass(frozen=True)
class Experiment:
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)


def _coerce(name: str, value: Any, default: Any) -> Any:
    """Check ``value`` against the type of ``default``; tuples come in as lists."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{name}: expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)) or len(value) != len(default):
            raise ConfigError(f"{name}: expected a list of {len(default)} values, got {value!r}")
        return tuple(_coerce(f"{name}[{i}]", v, d) for i, (v, d) in enumerate(zip(value, default)))
    raise ConfigError(f"{name}: unsupported field type")


def _section(raw: Any, name: str) -> dict:
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    return raw


def _build(cls, values: dict, prefix: str):
    defaults = cls()
    known = {f.name for f in fields(cls)}
    kwargs = {}
    for key, value in values.items():
        if key not in known:
            raise ConfigError(f"unknown key {prefix}{key}")
        kwargs[key] = _coerce(prefix + key, value, getattr(defaults, key))
    try:
        return cls(**{**{f.name: getattr(defaults, f.name) for f in fields(cls)}, **kwargs})
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def parse_experiment(raw: Any) -> Experiment:
    raw = _section(raw, "<root>")
    allowed = set(SECTIONS) | {"data"}
    for key in raw:
        if key not in allowed:
            raise ConfigError(f"unknown section {key!r} (expected one of {sorted(allowed)})")
    train_values = {}
    for sec, names in SECTIONS.items():
        for key, value in _section(raw.get(sec), sec).items():
            if key not in names:
                raise ConfigError(f"unknown key {sec}.{key}")
            train_values[key] = value
    train = _build(TrainConfig, train_values, "")
    data_raw = dict(_section(raw.get("data"), "data"))
    scene_raw = _section(data_raw.pop("scene", None), "data.scene")
    scene = _build(SceneSpec, scene_raw, "data.scene.")
    data = _build(DataConfig, data_raw, "data.")
    return Experiment(train, DataConfig(**{**{f.name: getattr(data, f.name) for f in fields(DataConfig)},
                                           "scene": scene}))


def load_experiment(path: str | Path | None) -> Experiment:
    if path is None:
        return Experiment()
    text = Path(path).read_text(encoding="utf-8")
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}") from exc
    return parse_experiment(raw)


def load_config(path: str | Path | None) -> TrainConfig:
    return load_experiment(path).train


def _plain(value: Any) -> Any:
    return list(value) if isinstance(value, tuple) else value


def experiment_to_dict(exp: Experiment) -> dict:
    out: dict[str, Any] = {}
    for sec, names in SECTIONS.items():
        out[sec] = {n: _plain(getattr(exp.train, n)) for n in names}
    data = {f.name: getattr(exp.data, f.name) for f in fields(DataConfig) if f.name != "scene"}
    data["scene"] = {f.name: _plain(getattr(exp.data.scene, f.name)) for f in fields(SceneSpec)}
    out["data"] = data
    return out


def save_experiment(exp: Experiment, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(experiment_to_dict(exp), sort_keys=False), encoding="utf-8")


def save_config(config: TrainConfig, path: str | Path) -> None:
    save_experiment(Experiment(train=config), path)
