import struct
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from meada.data import (CORRUPTION_KINDS, SHIFT_KINDS, IDXError, ImageDataset, ShiftSpec, apply_corruption,
                        apply_shift, load_idx, quantize, save_idx, severity_tables, split, to_rgb32)


def write_idx(path, magic, dims, payload: bytes):
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(">" + "I" * len(dims), *dims))
        fh.write(payload)


@pytest.fixture
def digits(rng):
    """Small RGB batch with a bright blob on a dark background, like a digit."""
    x = rng.uniform(0.0, 0.2, (12, 32, 32, 3))
    x[:, 10:22, 12:20] = rng.uniform(0.6, 1.0, (12, 12, 8, 1))
    return ImageDataset(x, rng.integers(10, size=12), "toy")


# ---------------------------------------------------------------- IDX

def test_idx_mnist_sized_files(tmp_path):
    n = 60000
    write_idx(tmp_path / "img", 0x803, (n, 28, 28), bytes(n * 28 * 28))
    write_idx(tmp_path / "lab", 0x801, (n,), bytes(range(10)) * (n // 10))
    ds = load_idx(tmp_path / "img", tmp_path / "lab")
    assert len(ds) == 60000 and ds.shape == (28, 28, 1)
    assert Counter(ds.labels.tolist()) == {d: 6000 for d in range(10)}


def test_idx_byte_scaling(tmp_path):
    write_idx(tmp_path / "img", 0x803, (1, 1, 3), bytes([0, 128, 255]))
    write_idx(tmp_path / "lab", 0x801, (1,), bytes([7]))
    ds = load_idx(tmp_path / "img", tmp_path / "lab")
    np.testing.assert_array_equal(ds.images.ravel(), [0.0, 128 / 255, 1.0])
    assert ds.labels.tolist() == [7]


def test_idx_labels_with_image_magic(tmp_path):
    write_idx(tmp_path / "img", 0x803, (1, 2, 2), bytes(4))
    write_idx(tmp_path / "lab", 0x803, (1,), bytes(1))
    with pytest.raises(IDXError, match="bad magic"):
        load_idx(tmp_path / "img", tmp_path / "lab")


def test_idx_truncated_data(tmp_path):
    write_idx(tmp_path / "img", 0x803, (2, 2, 2), bytes(7))
    write_idx(tmp_path / "lab", 0x801, (2,), bytes(2))
    with pytest.raises(IDXError, match="truncated"):
        load_idx(tmp_path / "img", tmp_path / "lab")


def test_idx_truncated_header(tmp_path):
    (tmp_path / "img").write_bytes(b"\x00\x00")
    write_idx(tmp_path / "lab", 0x801, (1,), bytes(1))
    with pytest.raises(IDXError, match="header"):
        load_idx(tmp_path / "img", tmp_path / "lab")


def test_idx_count_mismatch(tmp_path):
    write_idx(tmp_path / "img", 0x803, (3, 2, 2), bytes(12))
    write_idx(tmp_path / "lab", 0x801, (2,), bytes(2))
    with pytest.raises(IDXError, match="count mismatch"):
        load_idx(tmp_path / "img", tmp_path / "lab")


@pytest.mark.parametrize("channels", [1, 3])
def test_idx_roundtrip(tmp_path, rng, channels):
    ds = ImageDataset(quantize(rng.uniform(size=(5, 4, 6, channels))) / 255.0, rng.integers(10, size=5))
    save_idx(ds, tmp_path / "i", tmp_path / "l")
    back = load_idx(tmp_path / "i", tmp_path / "l")
    np.testing.assert_array_equal(back.images, ds.images)
    np.testing.assert_array_equal(back.labels, ds.labels)


def test_dataset_rejects_out_of_range_pixels():
    with pytest.raises(ValueError):
        ImageDataset(np.full((1, 2, 2, 1), 1.5), [0])


def test_dataset_rejects_label_count_mismatch():
    with pytest.raises(ValueError):
        ImageDataset(np.zeros((2, 2, 2, 1)), [0])


# ---------------------------------------------------------------- resize

@pytest.mark.parametrize("mode", ["bilinear", "pad"])
def test_to_rgb32_shape_and_channels(rng, mode):
    ds = ImageDataset(rng.uniform(size=(3, 28, 28, 1)), [0, 1, 2])
    out = to_rgb32(ds, mode)
    assert out.images.shape == (3, 32, 32, 3)
    np.testing.assert_array_equal(out.images[..., 0], out.images[..., 1])
    np.testing.assert_array_equal(out.images[..., 0], out.images[..., 2])
    assert 0.0 <= out.images.min() and out.images.max() <= 1.0


def test_to_rgb32_constant_image():
    out = to_rgb32(ImageDataset(np.full((1, 28, 28, 1), 0.5), [0]))
    np.testing.assert_allclose(out.images, 0.5, atol=1e-15)


@settings(max_examples=20)
@given(st.integers(0, 10**6))
def test_to_rgb32_stays_in_range(seed):
    rng = np.random.default_rng(seed)
    x = (rng.uniform(size=(2, 28, 28, 1)) > 0.5).astype(float)
    out = to_rgb32(ImageDataset(x, [0, 1])).images
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_to_rgb32_pad_keeps_pixels(rng):
    x = rng.uniform(size=(1, 28, 28, 1))
    out = to_rgb32(ImageDataset(x, [0]), "pad").images
    np.testing.assert_array_equal(out[0, 2:30, 2:30, 0], x[0, ..., 0])
    assert out[0, :2].max() == 0.0


# ---------------------------------------------------------------- shifts

@pytest.mark.parametrize("kind", SHIFT_KINDS)
def test_shift_zero_strength_is_identity(digits, kind):
    out = apply_shift(digits, ShiftSpec(kind, 3, seed=1), strength=0.0)
    np.testing.assert_allclose(out.images, digits.images, atol=1e-15)


def test_invert_is_an_involution(digits):
    spec = ShiftSpec("invert", 5)
    twice = apply_shift(apply_shift(digits, spec), spec)
    np.testing.assert_allclose(twice.images, digits.images, atol=1e-12)


@pytest.mark.parametrize("kind", SHIFT_KINDS)
@pytest.mark.parametrize("severity", [1, 3, 5])
def test_shift_contract(digits, kind, severity):
    a = apply_shift(digits, ShiftSpec(kind, severity, seed=4))
    b = apply_shift(digits, ShiftSpec(kind, severity, seed=4))
    np.testing.assert_array_equal(a.images, b.images)
    assert a.images.shape == digits.images.shape
    np.testing.assert_array_equal(a.labels, digits.labels)
    assert 0.0 <= a.images.min() and a.images.max() <= 1.0
    assert not np.array_equal(a.images, digits.images)


@pytest.mark.parametrize("kind", ["tint", "noise-background", "texture-background"])
def test_shift_seed_changes_output(digits, kind):
    a = apply_shift(digits, ShiftSpec(kind, 3, seed=0))
    b = apply_shift(digits, ShiftSpec(kind, 3, seed=1))
    assert not np.array_equal(a.images, b.images)


@pytest.mark.parametrize("kind", ["noise-background", "texture-background"])
def test_background_shifts_leave_foreground(digits, kind):
    out = apply_shift(digits, ShiftSpec(kind, 5))
    fg = digits.images.max(axis=3) > 0.3
    np.testing.assert_array_equal(out.images[fg], digits.images[fg])


def test_tint_keeps_grayscale_channels(rng):
    ds = ImageDataset(rng.uniform(size=(4, 8, 8, 1)), np.zeros(4))
    assert apply_shift(ds, ShiftSpec("tint", 3)).images.shape == (4, 8, 8, 1)


@pytest.mark.parametrize("args", [("fog", 3), ("tint", 0), ("tint", 6)])
def test_shift_spec_validation(args):
    with pytest.raises(ValueError):
        ShiftSpec(*args)


# ---------------------------------------------------------------- corruptions

@pytest.mark.parametrize("severity", [1, 2, 3, 4, 5])
def test_gaussian_noise_level(severity):
    ds = ImageDataset(np.full((100, 32, 32, 1), 0.5), np.zeros(100))  # 102400 pixels
    out = apply_corruption(ds, "gaussian_noise", severity, seed=severity)
    sigma = severity_tables()["corruptions"]["gaussian_noise"][severity - 1]
    assert abs(out.images.std() - sigma) <= 0.05 * sigma


def test_brightness_zero_strength_is_identity(digits):
    out = apply_corruption(digits, "brightness", 3, strength=0.0)
    np.testing.assert_array_equal(out.images, digits.images)


@pytest.mark.parametrize("severity", [1, 3, 5])
def test_contrast_preserves_mean(digits, severity):
    out = apply_corruption(digits, "contrast", severity)
    np.testing.assert_allclose(out.images.mean(axis=(1, 2, 3)), digits.images.mean(axis=(1, 2, 3)), atol=1e-6)


@pytest.mark.parametrize("kind", CORRUPTION_KINDS)
@pytest.mark.parametrize("severity", [1, 5])
def test_corruption_contract(digits, kind, severity):
    a = apply_corruption(digits, kind, severity, seed=2)
    b = apply_corruption(digits, kind, severity, seed=2)
    np.testing.assert_array_equal(a.images, b.images)
    assert a.images.shape == digits.images.shape
    assert 0.0 <= a.images.min() and a.images.max() <= 1.0
    np.testing.assert_array_equal(a.labels, digits.labels)


def test_corruption_unknown_kind(digits):
    with pytest.raises(ValueError, match="unknown corruption"):
        apply_corruption(digits, "fog", 3)


@pytest.mark.parametrize("severity", [0, 6])
def test_corruption_bad_severity(digits, severity):
    with pytest.raises(ValueError):
        apply_corruption(digits, "contrast", severity)


def test_severity_tables_cover_every_kind():
    t = severity_tables()
    assert set(t["shifts"]) == set(SHIFT_KINDS)
    assert set(t["corruptions"]) == set(CORRUPTION_KINDS)
    assert all(len(v) == 5 for group in ("shifts", "corruptions") for v in t[group].values())
    assert t["foreground_threshold"] == 0.3


# ---------------------------------------------------------------- split

def _labelled(n_per_class):
    labels = np.concatenate([np.full(n, c) for c, n in enumerate(n_per_class)])
    images = np.linspace(0, 1, len(labels))[:, None, None, None] * np.ones((1, 2, 2, 1))
    return ImageDataset(images, labels)


def test_split_all_train():
    ds = _labelled([5, 7])
    train, val, test = split(ds, (1.0, 0.0, 0.0))
    assert len(train) == 12 and len(val) == 0 and len(test) == 0


@given(st.lists(st.integers(1, 40), min_size=1, max_size=6), st.integers(0, 9999),
       st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_split_partition_and_stratification(n_per_class, seed, a, b):
    lo, hi = sorted((a, b))
    fr = (lo, hi - lo, 1.0 - hi)
    ds = _labelled(n_per_class)
    parts = split(ds, fr, seed=seed)
    ids = np.concatenate([p.images[:, 0, 0, 0] for p in parts])
    np.testing.assert_array_equal(np.sort(ids), np.sort(ds.images[:, 0, 0, 0]))
    for part, f in zip(parts, fr):
        for c, n in enumerate(n_per_class):
            assert abs(np.sum(part.labels == c) - f * n) <= 1


def test_split_is_seeded():
    ds = _labelled([10, 10])
    a = split(ds, (0.5, 0.25, 0.25), seed=3)
    b = split(ds, (0.5, 0.25, 0.25), seed=3)
    for p, q in zip(a, b):
        np.testing.assert_array_equal(p.images, q.images)


@pytest.mark.parametrize("fr", [(0.5, 0.5, 0.5), (0.5, 0.5), (1.2, -0.2, 0.0)])
def test_split_bad_fractions(fr):
    with pytest.raises(ValueError):
        split(_labelled([3]), fr)


def test_bundled_mnist_sample():
    from meada.data import mnist_sample

    ds = mnist_sample()
    assert len(ds) == 5000 and ds.shape == (28, 28, 1)
    assert Counter(ds.labels.tolist()) == {d: 500 for d in range(10)}
    assert ds.images.max() == 1.0
