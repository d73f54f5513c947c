import struct

import numpy as np
import pytest
import yaml

from sfpano import io
from sfpano.io import CheckpointError, ConfigError
from sfpano.segnet import ModelConfig, ParamSnapshot, SegModel
from sfpano.trainer import TrainConfig


def _snapshot():
    return SegModel(seed=3).snapshot("F_S", 12, arch="b1-toy", note="x")


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    snap = _snapshot()
    io.save_checkpoint(snap, tmp_path / "a.ckpt")
    back = io.load_checkpoint(tmp_path / "a.ckpt")
    assert back.tag == "F_S" and back.iteration == 12 and back.meta["note"] == "x"
    assert list(back.values) == list(snap.values)
    for k in snap.values:
        assert back.values[k].dtype == snap.values[k].dtype
        assert back.values[k].tobytes() == snap.values[k].tobytes()


def test_round_trip_gives_identical_forward(tmp_path):
    model = SegModel(seed=5)
    x = np.random.default_rng(0).uniform(size=(1, 64, 128, 3))
    ref = model.forward(x).logits.data
    io.save_checkpoint(model.snapshot("s"), tmp_path / "m.ckpt")
    fresh = SegModel(seed=99)
    fresh.restore(io.load_checkpoint(tmp_path / "m.ckpt"))
    assert np.array_equal(fresh.forward(x).logits.data, ref)


@pytest.mark.parametrize("arr", [np.arange(6, dtype=np.float64).reshape(2, 3), np.arange(4, dtype=np.int32),
                                 np.arange(3, dtype=np.int64), np.array([1, 2], dtype=np.uint8),
                                 np.array(2.5, dtype=np.float32)])
def test_supported_dtypes(arr):
    snap = ParamSnapshot("t", {"a": arr})
    back = io.decode_checkpoint(io.encode_checkpoint(snap))
    assert back.values["a"].dtype == arr.dtype and np.array_equal(back.values["a"], arr)


def test_layout_is_little_endian():
    buf = io.encode_checkpoint(ParamSnapshot("t", {"w": np.array([1.0], dtype=np.float32)}))
    assert buf[:4] == b"DPSS"
    assert struct.unpack("<H", buf[4:6])[0] == io.VERSION
    assert buf[-8:-4] == np.array([1.0], dtype="<f4").tobytes()


def test_flipped_payload_byte_fails_crc():
    buf = bytearray(io.encode_checkpoint(_snapshot()))
    buf[len(buf) // 2] ^= 0xFF
    with pytest.raises(CheckpointError, match="CRC mismatch at offset"):
        io.decode_checkpoint(bytes(buf))


def test_bad_magic_and_truncation():
    buf = io.encode_checkpoint(_snapshot())
    with pytest.raises(CheckpointError, match="magic"):
        io.decode_checkpoint(b"XXXX" + buf[4:])
    with pytest.raises(CheckpointError):
        io.decode_checkpoint(buf[:-20])


def _reseal(body: bytes) -> bytes:
    import zlib
    return body + struct.pack("<I", zlib.crc32(body))


def test_unknown_version_rejected():
    buf = io.encode_checkpoint(_snapshot())
    body = buf[:4] + struct.pack("<H", 99) + buf[6:-4]
    with pytest.raises(CheckpointError, match="version 99"):
        io.decode_checkpoint(_reseal(body))


def test_trailing_bytes_rejected():
    buf = io.encode_checkpoint(_snapshot())
    with pytest.raises(CheckpointError, match="trailing"):
        io.decode_checkpoint(_reseal(buf[:-4] + b"\0\0"))


def test_cross_architecture_load_names_the_tensor(tmp_path):
    io.save_checkpoint(SegModel(ModelConfig(arch="b1-toy")).snapshot("s"), tmp_path / "b1.ckpt")
    with pytest.raises(ValueError, match="enc0.conv.weight"):
        SegModel(ModelConfig(arch="b2-toy")).restore(io.load_checkpoint(tmp_path / "b1.ckpt"))


# ---------------------------------------------------------------------------
# configs


def test_empty_config_gives_defaults(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("")
    cfg = io.load_config(path)
    assert cfg == TrainConfig()
    assert (cfg.P, cfg.tau, cfg.s, cfg.lambda_d, cfg.K) == (10.0, 600, 2, 0.3, 15)


def test_no_path_gives_defaults():
    assert io.load_experiment(None) == io.Experiment()


def test_values_are_read_from_sections(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("pcgd:\n  P: 15\n  tau: 800\ncram:\n  context_size: [16, 32]\n"
                    "data:\n  n_target_train: 20\n  scene:\n    hue_shift_deg: 10\n")
    exp = io.load_experiment(path)
    assert exp.train.P == 15.0 and isinstance(exp.train.P, float)
    assert exp.train.tau == 800 and exp.train.context_size == (16, 32)
    assert exp.data.n_target_train == 20 and exp.data.scene.hue_shift_deg == 10.0


@pytest.mark.parametrize("text,match", [
    ("pcgd:\n  P: 0\n", "P must be"),
    ("pcgd:\n  Q: 3\n", "unknown key pcgd.Q"),
    ("extras:\n  a: 1\n", "unknown section"),
    ("optim:\n  batch: 2.5\n", "expected an integer"),
    ("cram:\n  use_cram: 1\n", "expected a boolean"),
    ("cram:\n  context_size: [16]\n", "list of 2"),
    ("model:\n  arch: 3\n", "expected a string"),
    ("data:\n  scene:\n    colour: 1\n", "unknown key data.scene.colour"),
    ("data:\n  n_source_train: 0\n", ">= 1"),
    ("pcgd: [1, 2]\n", "must be a mapping"),
    ("pcgd:\n  P: [\n", "not valid YAML"),
])
def test_invalid_configs_rejected(tmp_path, text, match):
    path = tmp_path / "c.yaml"
    path.write_text(text)
    with pytest.raises(ConfigError, match=match):
        io.load_experiment(path)


def test_echoed_config_reloads_equal(tmp_path):
    exp = io.Experiment(TrainConfig(P=5.0, seed=3, context_size=(16, 32)))
    io.save_experiment(exp, tmp_path / "e.yaml")
    assert io.load_experiment(tmp_path / "e.yaml") == exp
    raw = yaml.safe_load((tmp_path / "e.yaml").read_text())
    assert set(raw) == set(io.SECTIONS) | {"data"}


def test_every_train_field_has_a_section():
    from dataclasses import fields
    listed = [n for names in io.SECTIONS.values() for n in names]
    assert sorted(listed) == sorted(f.name for f in fields(TrainConfig))
