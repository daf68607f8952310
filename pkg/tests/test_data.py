import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from amulet.data import (
    FG_RANGE,
    Dataset,
    FormatError,
    SynthConfig,
    batches,
    disc_mask,
    epoch_plan,
    generate_synthetic,
    load_dataset,
    load_sample,
    read_map,
    read_pnm,
    synth_dataset,
    synth_sample,
    write_pnm,
    write_saliency,
)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 6), st.integers(1, 7), st.integers(1, 7), st.integers(0, 2**16))
def test_codec_round_trip(c, h, w, seed):
    import tempfile, os

    c = 3 if c > 3 else 1
    pix = np.random.default_rng(seed).integers(0, 256, (c, h, w), dtype=np.uint8)
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "x.pnm")
        write_pnm(path, pix)
        np.testing.assert_array_equal(read_pnm(path), pix)


def test_all_byte_values_round_trip(tmp_path):
    pix = np.arange(256, dtype=np.uint8).reshape(1, 16, 16)
    write_pnm(tmp_path / "a.pgm", pix)
    np.testing.assert_array_equal(read_pnm(tmp_path / "a.pgm"), pix)


def test_header_comments_and_errors(tmp_path):
    (tmp_path / "c.pgm").write_bytes(b"P5\n# made by hand\n2 1\n255\n\x00\xff")
    np.testing.assert_array_equal(read_pnm(tmp_path / "c.pgm"), [[[0, 255]]])
    (tmp_path / "bad.pgm").write_bytes(b"P2\n2 1\n255\n0 255")
    with pytest.raises(FormatError, match=r"bad\.pgm.*byte"):
        read_pnm(tmp_path / "bad.pgm")
    (tmp_path / "short.pgm").write_bytes(b"P5\n4 4\n255\n\x00")
    with pytest.raises(FormatError, match="short.pgm"):
        read_pnm(tmp_path / "short.pgm")
    (tmp_path / "deep.pgm").write_bytes(b"P5\n1 1\n65535\n\x00\x00")
    with pytest.raises(FormatError):
        read_pnm(tmp_path / "deep.pgm")


def test_load_sample_scaling_and_mismatch(tmp_path):
    img = np.zeros((3, 2, 2), np.uint8)
    img[0] = 255
    write_pnm(tmp_path / "i.ppm", img)
    write_pnm(tmp_path / "m.pgm", np.array([[[0, 255], [127, 128]]], np.uint8))
    s = load_sample(tmp_path / "i.ppm", tmp_path / "m.pgm")
    np.testing.assert_array_equal(s.mask[0], [[0, 1], [0, 1]])
    assert s.image.max() == 1.0 and s.image.dtype == np.float32
    write_pnm(tmp_path / "m3.pgm", np.zeros((1, 3, 2), np.uint8))
    with pytest.raises(FormatError) as e:
        load_sample(tmp_path / "i.ppm", tmp_path / "m3.pgm")
    assert "i.ppm" in str(e.value) and "m3.pgm" in str(e.value)


def test_saliency_written_as_rounded_levels(tmp_path):
    s = np.array([[0.0, 0.5], [1 / 255, 1.0]])
    write_saliency(tmp_path / "s.pgm", s)
    np.testing.assert_array_equal(read_pnm(tmp_path / "s.pgm")[0], [[0, 128], [1, 255]])
    np.testing.assert_allclose(read_map(tmp_path / "s.pgm"), np.round(s * 255) / 255)


@pytest.mark.parametrize("r", [6.0, 10.0, 20.0])
def test_disc_area(r):
    area = disc_mask(64, 32.0, 32.0, r).sum()
    assert abs(area - math.pi * r * r) <= 0.02 * math.pi * r * r


def test_synthetic_invariants():
    cfg = SynthConfig(count=60, size=32, seed=3)
    for i in range(cfg.count):
        s = synth_sample(cfg, i)
        assert s.image.shape == (3, 32, 32) and s.mask.shape == (1, 32, 32)
        assert set(np.unique(s.mask)) <= {0.0, 1.0}
        assert FG_RANGE[0] <= s.mask.mean() <= FG_RANGE[1]
        assert 0 <= s.image.min() and s.image.max() <= 1


def test_multi_object_contract():
    cfg = SynthConfig(count=20, size=48, seed=5, multi_object_prob=1.0)
    for i in range(cfg.count):
        _, n = ndimage.label(synth_sample(cfg, i).mask[0])
        assert n >= 2


def test_generation_deterministic(tmp_path):
    cfg = SynthConfig(count=6, size=16, seed=9)
    a, b = generate_synthetic(cfg, tmp_path / "a"), generate_synthetic(cfg, tmp_path / "b")
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert len(files) == 13
    for f in files:
        assert (a / f).read_bytes() == (b / f).read_bytes()
    ds = load_dataset(a)
    mem = synth_dataset(cfg)
    np.testing.assert_array_equal(ds.images, mem.images)
    np.testing.assert_array_equal(ds.masks, mem.masks)
    assert ds.ids == mem.ids


def test_unwritable_output(tmp_path):
    (tmp_path / "file").write_text("x")
    with pytest.raises(OSError):
        generate_synthetic(SynthConfig(count=1, size=16), tmp_path / "file" / "sub")


def test_batches_contract():
    ds = synth_dataset(SynthConfig(count=10, size=8, seed=0))
    assert len(list(batches(ds, 8, seed=0, augment_on=False))) == 1
    whole = list(batches(ds, 10, seed=0, augment_on=True))
    assert len(whole) == 1 and sorted(whole[0][2]) == sorted(ds.ids)
    one = [b[2] for b in batches(ds, 2, seed=4, augment_on=True, epochs=3)]
    two = [b[2] for b in batches(ds, 2, seed=4, augment_on=True, epochs=3)]
    assert one == two
    for epoch in range(3):
        ids = sum(one[5 * epoch : 5 * epoch + 5], [])
        assert sorted(ids) == sorted(ds.ids)
    for imgs, masks, _ in batches(ds, 5, seed=1, augment_on=True):
        assert set(np.unique(masks)) <= {0.0, 1.0}


def test_epoch_plan_variants():
    plan = epoch_plan(16, 4, seed=0, epoch=0, augment_on=True)
    variants = np.concatenate([v for _, v in plan])
    assert variants.min() >= 0 and variants.max() <= 7 and len(set(variants)) > 1
    assert all(not v.any() for _, v in epoch_plan(16, 4, 0, 0, False))
