import json
from dataclasses import replace

import numpy as np
import pytest

from sfpano import panosynth as ps
from sfpano.functional import IGNORE_INDEX

SPEC = ps.SceneSpec()


def test_generation_is_deterministic():
    a = ps.gen_target(SPEC, 3)
    b = ps.gen_target(SPEC, 3)
    for x, y in zip(a, b):
        assert x.id == y.id
        assert np.array_equal(x.image, y.image) and np.array_equal(x.label, y.label)


def test_generation_is_independent_of_batch_size():
    # per-image streams: image 2 is the same whether 3 or 5 images are drawn
    assert np.array_equal(ps.gen_source(SPEC, 3)[2].image, ps.gen_source(SPEC, 5)[2].image)


def test_seed_changes_content():
    a = ps.gen_source(SPEC, 1)[0]
    b = ps.gen_source(replace(SPEC, seed=1), 1)[0]
    assert not np.array_equal(a.image, b.image)


def test_class_frequencies_form_a_long_tail():
    f = SPEC.class_frequencies
    assert f.sum() == pytest.approx(1.0)
    assert f.max() / f.min() > 10


def test_head_class_dominates_tail_class():
    labels = [s.label for s in ps.gen_source(replace(SPEC, decay=0.65), 500)]
    shares = ps.pixel_shares(labels)
    assert shares[0] >= 10 * shares[7]


def test_minority_classes_keep_a_minimum_share():
    labels = [s.label for s in ps.gen_target(SPEC, 200)]
    shares = ps.pixel_shares(labels)
    assert all(shares[c] >= 0.005 for c in ps.MINORITY_CLASSES)
    # the minority set is the low-frequency half
    order = np.argsort(shares)
    assert set(order[:5].tolist()) == set(ps.MINORITY_CLASSES)


@pytest.mark.parametrize("gen", [ps.gen_source, ps.gen_target])
def test_value_ranges(gen):
    for s in gen(SPEC, 20):
        assert s.image.min() >= 0 and s.image.max() <= 1
        assert np.all((s.label < 8) | (s.label == IGNORE_INDEX))


def test_target_is_wider_than_source():
    src, tgt = ps.gen_source(SPEC, 1)[0], ps.gen_target(SPEC, 1)[0]
    assert tgt.image.shape[1] / tgt.image.shape[0] > src.image.shape[1] / src.image.shape[0]
    with pytest.raises(ValueError):
        ps.SceneSpec(target_size=(64, 64))


def test_invalid_spec_and_counts_rejected():
    with pytest.raises(ValueError):
        ps.SceneSpec(decay=0.0)
    with pytest.raises(ValueError):
        ps.gen_source(SPEC, 0)


def test_seam_wraparound_continuity():
    layout = ps.Layout(64, 128, (10, 54), [ps.Shape("rect", 1, 32.0, 0.0, 10.0, 12.0)])
    label = ps.render_label(layout, ps.row_stretch(SPEC, 64), wrap=True)
    assert np.any(label[:, 0] == 1)
    assert np.array_equal(label[:, 0], label[:, -1])


def test_generated_seam_has_matching_objects():
    agree = [np.mean(s.label[:, 0] == s.label[:, -1]) for s in ps.gen_target(SPEC, 30)]
    assert np.mean(agree) > 0.9


def _bbox_width(label, cls):
    cols = np.where(np.any(label == cls, axis=0))[0]
    return cols.max() - cols.min() + 1


def test_polar_objects_are_stretched():
    stretch = ps.row_stretch(SPEC, 64)
    polar = ps.Layout(64, 128, (0, 64), [ps.Shape("rect", 1, 5.0, 64.0, 8.0, 8.0)])
    equator = ps.Layout(64, 128, (0, 64), [ps.Shape("rect", 1, 32.0, 64.0, 8.0, 8.0)])
    ratio = _bbox_width(ps.render_label(polar, stretch), 1) / _bbox_width(ps.render_label(equator, stretch), 1)
    assert ratio > 1.3


def test_stretch_is_clamped():
    s = ps.row_stretch(replace(SPEC, phi_max_deg=89.9), 64)
    assert s.max() <= SPEC.stretch_clamp and s.min() >= 1.0


def test_warp_preserves_class_inventory():
    rng = np.random.default_rng(0)
    for _ in range(40):
        layout = ps.sample_layout(SPEC, rng, SPEC.target_size)
        flat = ps.render_label(layout, wrap=True)
        warped = ps.render_label(layout, ps.row_stretch(SPEC, 64), wrap=True)
        assert set(np.unique(flat)) == set(np.unique(warped))


def test_identity_target_matches_source_statistics():
    spec = ps.identity_target(SPEC)
    src = ps.gen_source(spec, 150)
    tgt = ps.gen_target(spec, 150)
    share_gap = np.abs(ps.pixel_shares([s.label for s in src]) - ps.pixel_shares([s.label for s in tgt]))
    assert share_gap.max() < 0.03
    colour_gap = np.abs(np.mean([s.image.mean(axis=(0, 1)) for s in src], axis=0)
                        - np.mean([s.image.mean(axis=(0, 1)) for s in tgt], axis=0))
    assert colour_gap.max() < 0.02


def test_colour_shift_moves_target_colours():
    spec = replace(ps.identity_target(SPEC), color_shift=True)
    plain = ps.gen_target(ps.identity_target(SPEC), 5)
    shifted = ps.gen_target(spec, 5)
    assert all(np.array_equal(a.label, b.label) for a, b in zip(plain, shifted))
    assert np.mean([np.abs(a.image - b.image).mean() for a, b in zip(plain, shifted)]) > 0.05


def test_dataset_round_trip(tmp_path):
    samples = ps.gen_target(SPEC, 3, "val")
    out = ps.write_dataset(samples, tmp_path)
    assert out == tmp_path / "target" / "val"
    records = ps.read_manifest(out)
    assert [r["id"] for r in records] == [s.id for s in samples]
    assert set(records[0]) == {"id", "image", "label", "domain", "split"}
    back = ps.read_dataset(out)
    for a, b in zip(samples, back):
        assert np.array_equal(a.label, b.label)
        np.testing.assert_allclose(a.image, b.image, atol=1e-7)
    ids, images = ps.read_images(out)
    assert ids == [s.id for s in samples] and images.shape == (3, 64, 128, 3)


def test_write_rejects_mixed_splits(tmp_path):
    mixed = ps.gen_source(SPEC, 1) + ps.gen_target(SPEC, 1)
    with pytest.raises(ValueError):
        ps.write_dataset(mixed, tmp_path)


def test_label_store_counts_reads(tmp_path):
    samples = ps.gen_target(SPEC, 2, "val")
    out = ps.write_dataset(samples, tmp_path)
    store = ps.LabelStore(split_dir=out)
    assert store.reads == 0 and len(store) == 2
    assert np.array_equal(store[samples[1].id], samples[1].label)
    assert store.reads == 1


def test_strip_labels_returns_only_images():
    ids, images = ps.strip_labels(ps.gen_target(SPEC, 2))
    assert ids == ["tgt-train-00000", "tgt-train-00001"]
    assert images.shape == (2, 64, 128, 3)
    assert json.dumps(ids)
