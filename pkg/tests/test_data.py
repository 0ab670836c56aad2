import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hrdecoder.data import (
    ClassStyle,
    GenerationError,
    Sample,
    SynthConfig,
    augment,
    generate,
    load_dir,
    render_background,
    resize_nearest,
    save_dir,
)
from hrdecoder.netpbm import NetpbmError, read_netpbm, write_netpbm

NO_BLOBS = ClassStyle((0, 0), (1.0, 1.0))


def test_empty_dataset():
    assert generate(SynthConfig(count=0)) == []


def test_generation_is_deterministic():
    a = generate(SynthConfig(count=3, size=(128, 128), seed=9))
    b = generate(SynthConfig(count=3, size=(128, 128), seed=9))
    for x, y in zip(a, b):
        assert np.array_equal(x.image, y.image) and np.array_equal(x.mask, y.mask)
    assert not np.array_equal(a[0].image, a[1].image)


def test_offset_matches_serial_generation():
    whole = generate(SynthConfig(count=4, size=(128, 128), seed=3))
    tail = generate(SynthConfig(count=2, size=(128, 128), seed=3), offset=2)
    assert [s.id for s in tail] == ["s00002", "s00003"]
    assert np.array_equal(whole[3].image, tail[1].image)


def test_only_radius_one_dots():
    styles = (NO_BLOBS, NO_BLOBS, NO_BLOBS, ClassStyle((10, 10), (1.0, 1.0)))
    (s,) = generate(SynthConfig(count=1, styles=styles, seed=1))
    assert 10 <= s.mask[3].sum() <= 50
    assert s.mask[:3].sum() == 0


def test_tiny_dot_radius_limit():
    bad = (NO_BLOBS, NO_BLOBS, NO_BLOBS, ClassStyle((1, 1), (1.0, 3.0)))
    with pytest.raises(ValueError):
        SynthConfig(styles=bad)


def test_impossible_packing_raises():
    crowded = (NO_BLOBS, NO_BLOBS, ClassStyle((40, 40), (14.0, 14.0)), NO_BLOBS)
    with pytest.raises(GenerationError):
        generate(SynthConfig(count=1, size=(64, 64), styles=crowded, max_tries=20))


def test_lesions_visible_against_background():
    cfg = SynthConfig(count=4, size=(128, 128), seed=5)
    bg = render_background(cfg)
    for s in generate(cfg):
        lesion = s.mask.any(axis=0)
        diff = np.abs(s.image - bg).max(axis=0)
        assert np.all(diff[lesion] >= 3 * cfg.noise)


def test_blob_size_ordering():
    areas = {k: [] for k in range(4)}
    for s in generate(SynthConfig(count=100, size=(128, 128), seed=11)):
        for cls, area in s.blobs:
            areas[cls].append(area)
    mean = {k: np.mean(v) for k, v in areas.items()}
    assert mean[2] > mean[0] > mean[3]
    assert mean[2] > mean[1] > mean[3]


def test_sample_validation():
    with pytest.raises(ValueError):
        Sample(np.zeros((3, 4, 4), np.float32), np.full((4, 4, 4), 0.5, np.float32), "x")
    with pytest.raises(ValueError):
        Sample(np.full((3, 4, 4), np.nan, np.float32), np.zeros((4, 4, 4), np.float32), "x")


# ---------------------------------------------------------------------------
# Directory format
# ---------------------------------------------------------------------------


def test_empty_directory(tmp_path):
    assert load_dir(tmp_path) == []


def test_save_load_round_trip(tmp_path):
    samples = generate(SynthConfig(count=2, size=(128, 128), seed=4))
    save_dir(tmp_path, samples)
    loaded = load_dir(tmp_path)
    assert [s.id for s in loaded] == [s.id for s in samples]
    for a, b in zip(samples, loaded):
        assert np.array_equal(a.image, b.image)
        assert np.array_equal(a.mask, b.mask)


def test_hand_written_p6(tmp_path):
    payload = bytes([255, 0, 0, 0, 255, 0, 0, 0, 255, 51, 102, 153])
    (tmp_path / "a.img.ppm").write_bytes(b"P6\n# comment\n2 2\n255\n" + payload)
    for k in range(4):
        (tmp_path / f"a.mask_{k}.pgm").write_bytes(b"P5 2 2 255\n" + bytes([0, 255, 127, 128]))
    (s,) = load_dir(tmp_path)
    expected = np.array(
        [[[1, 0], [0, 0.2]], [[0, 1], [0, 0.4]], [[0, 0], [1, 0.6]]], dtype=np.float32
    )
    assert np.allclose(s.image, expected, atol=1e-7)
    assert s.image[0, 0, 0] == 1.0
    assert np.array_equal(s.mask[2], [[0, 1], [0, 1]])


def test_netpbm_16bit_and_errors(tmp_path):
    p = tmp_path / "g.pgm"
    p.write_bytes(b"P5 2 1 1000\n" + bytes([0x03, 0xE8, 0x00, 0x01]))
    arr, maxval = read_netpbm(p)
    assert maxval == 1000 and arr.tolist() == [[1000, 1]]
    p.write_bytes(b"P5 2 2 255\n" + bytes(3))
    with pytest.raises(NetpbmError):
        read_netpbm(p)
    p.write_bytes(b"P3 1 1 255\n0 0 0")
    with pytest.raises(NetpbmError):
        read_netpbm(p)
    with pytest.raises(NetpbmError):
        write_netpbm(p, np.zeros((2, 2), np.float32))


def test_missing_mask(tmp_path):
    write_netpbm(tmp_path / "a.img.ppm", np.zeros((2, 2, 3), np.uint8))
    with pytest.raises(FileNotFoundError):
        load_dir(tmp_path)


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------


def test_identity_crop():
    (s,) = generate(SynthConfig(count=1, size=(128, 128), seed=2))
    out = augment(np.random.default_rng(0), s, (128, 128), (128, 128))
    assert np.array_equal(out.image, s.image)
    assert out.mask.sum() == s.mask.sum()


def test_crop_offsets_seeded():
    (s,) = generate(SynthConfig(count=1, size=(128, 128), seed=2))
    a = augment(np.random.default_rng(5), s, (64, 48))
    b = augment(np.random.default_rng(5), s, (64, 48))
    assert np.array_equal(a.image, b.image) and np.array_equal(a.mask, b.mask)
    assert a.image.shape == (3, 64, 48)


def test_crop_too_large():
    (s,) = generate(SynthConfig(count=1, size=(128, 128), seed=2))
    with pytest.raises(ValueError):
        augment(np.random.default_rng(0), s, (129, 10))


@given(st.integers(0, 2**32 - 1), st.integers(4, 16), st.integers(4, 16))
@settings(max_examples=40, deadline=None)
def test_crop_keeps_alignment(seed, ch, cw):
    rng = np.random.default_rng(seed)
    image = rng.random((3, 16, 16)).astype(np.float32)
    mask = (rng.random((2, 16, 16)) < 0.3).astype(np.float32)
    # tag every pixel with its own coordinates so the crop position can be read back
    image[0] = np.arange(256).reshape(16, 16) / 255.0
    out = augment(rng, Sample(image, mask, "t"), (ch, cw))
    flat = np.round(out.image[0, 0, 0] * 255).astype(int)
    r0, c0 = divmod(flat, 16)
    assert np.array_equal(out.mask, mask[:, r0:r0 + ch, c0:c0 + cw])


def test_nearest_resize_keeps_binary():
    mask = (np.random.default_rng(0).random((2, 10, 10)) < 0.5).astype(np.float32)
    up = resize_nearest(mask, (25, 15))
    assert up.shape == (2, 25, 15)
    assert set(np.unique(up)) <= {0.0, 1.0}
    assert np.array_equal(resize_nearest(mask, (10, 10)), mask)
