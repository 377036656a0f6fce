import gzip
import struct

import numpy as np
import pytest

from oneshot_dil.data import (Dataset, IdxError, SyntheticSpec, downsample, gen_synthetic, load_idx,
                              write_idx)
from oneshot_dil.harness import BaseTrainConfig, evaluate, train_base
from oneshot_dil.models import ModelSpec, build


@pytest.fixture
def idx_pair(tmp_path):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, size=(7, 5, 4), dtype=np.uint8)
    images[0, 0, 0] = 255
    labels = rng.integers(0, 10, size=7, dtype=np.uint8)
    ip, lp = tmp_path / "img.idx", tmp_path / "lab.idx"
    write_idx(images, labels, ip, lp)
    return images, labels, ip, lp


def test_idx_round_trip(idx_pair):
    images, labels, ip, lp = idx_pair
    ds = load_idx(ip, lp)
    assert ds.images.shape == (7, 1, 5, 4)
    np.testing.assert_array_equal(ds.images[:, 0], images / 255.0)
    np.testing.assert_array_equal(ds.labels, labels)
    assert ds.images[0, 0, 0, 0] == 1.0


def test_idx_header_layout(idx_pair):
    _, _, ip, lp = idx_pair
    assert struct.unpack(">IIII", ip.read_bytes()[:16]) == (0x803, 7, 5, 4)
    assert struct.unpack(">II", lp.read_bytes()[:8]) == (0x801, 7)


def test_idx_gzip_accepted(idx_pair, tmp_path):
    images, labels, ip, lp = idx_pair
    gz = tmp_path / "img.idx.gz"
    gz.write_bytes(gzip.compress(ip.read_bytes()))
    np.testing.assert_array_equal(load_idx(gz, lp).images, load_idx(ip, lp).images)


def test_idx_bad_magic(idx_pair):
    _, _, ip, lp = idx_pair
    raw = bytearray(ip.read_bytes())
    raw[3] = 0x01
    ip.write_bytes(bytes(raw))
    with pytest.raises(IdxError, match="byte 0"):
        load_idx(ip, lp)


def test_idx_truncated_pixels(idx_pair):
    _, _, ip, lp = idx_pair
    ip.write_bytes(ip.read_bytes()[:-3])
    with pytest.raises(IdxError, match=f"byte {16 + 7 * 20 - 3}"):
        load_idx(ip, lp)


def test_idx_truncated_labels(idx_pair):
    _, _, ip, lp = idx_pair
    lp.write_bytes(lp.read_bytes()[:-1])
    with pytest.raises(IdxError, match="byte 14"):
        load_idx(ip, lp)


def test_idx_count_mismatch(idx_pair):
    images, labels, ip, lp = idx_pair
    write_idx(images, labels[:5], ip.with_name("x"), lp)
    with pytest.raises(IdxError, match="count mismatch.*byte 4"):
        load_idx(ip, lp)


def test_idx_empty_file(idx_pair):
    _, _, ip, lp = idx_pair
    ip.write_bytes(b"")
    with pytest.raises(IdxError, match="byte 0"):
        load_idx(ip, lp)


def test_synthetic_deterministic():
    spec = SyntheticSpec(samples_per_class=20, image_side=8, noise_std=0.05)
    a = gen_synthetic(spec, np.random.default_rng(9))
    b = gen_synthetic(spec, np.random.default_rng(9))
    c = gen_synthetic(spec, np.random.default_rng(10))
    np.testing.assert_array_equal(a.images, b.images)
    assert not np.array_equal(a.images, c.images)
    assert a.images.shape == (80, 1, 8, 8) and a.images.min() >= 0 and a.images.max() <= 1


def test_zero_covariance_gives_identical_samples():
    spec = SyntheticSpec(num_classes=2, samples_per_class=5, image_side=6, latent_dim=3,
                         class_means=[[0.1, 0.2, 0.3], [-0.3, 0.0, 0.5]], class_covs=[np.zeros((3, 3)).tolist()] * 2)
    ds = gen_synthetic(spec, np.random.default_rng(0))
    for k in range(2):
        imgs = ds.images[ds.labels == k]
        assert np.all(imgs == imgs[0])


@pytest.mark.parametrize("kw", [
    dict(class_covs=[[[1.0, 2.0], [2.0, 1.0]]] * 2),   # indefinite
    dict(class_covs=[[[1.0, 0.5], [0.0, 1.0]]] * 2),   # asymmetric
    dict(class_means=[[0.0, 1.0], [0.0, 1.0]]),         # coincident means
    dict(class_noise_std=[0.1]),
    dict(envelope=-1.0),
])
def test_invalid_synthetic_specs(kw):
    with pytest.raises(ValueError):
        SyntheticSpec(num_classes=2, latent_dim=2, **kw)


def test_far_separated_classes_linearly_learnable():
    spec = SyntheticSpec(num_classes=2, image_side=6, samples_per_class=300, latent_dim=3,
                         class_means=[[0.0, -3.0, 0.0], [0.0, 3.0, 0.0]], class_std=0.3, pixel_scale=0.1)
    ds = gen_synthetic(spec, np.random.default_rng(2))
    perm = np.random.default_rng(3).permutation(len(ds))
    train, test = ds.subset(perm[:400]), ds.subset(perm[400:])
    # single BN-linear block feeding a linear head: a linear rule up to the ReLU
    m = build(ModelSpec(kind="mlp", widths=(8,), num_classes=2, input_shape=(1, 6, 6)), np.random.default_rng(0))
    train_base(m, train, BaseTrainConfig(epochs=10, batch_size=32), np.random.default_rng(1))
    assert evaluate(m, test) >= 0.99


def test_envelope_darkens_border():
    spec = SyntheticSpec(samples_per_class=4, image_side=16, envelope=0.45)
    ds = gen_synthetic(spec, np.random.default_rng(0))
    assert np.all(ds.images[:, :, 0, 0] < 1e-3)
    assert ds.images[:, :, 8, 8].mean() > 0.1


def test_downsample_averages_blocks():
    ds = Dataset(np.arange(32, dtype=float).reshape(2, 1, 4, 4) / 32, [0, 1])
    out = downsample(ds, 2)
    assert out.images.shape == (2, 1, 2, 2)
    np.testing.assert_allclose(out.images[0, 0, 0, 0], np.mean([0, 1, 4, 5]) / 32)
    assert downsample(ds, 1) is ds


def test_dataset_length_mismatch():
    with pytest.raises(ValueError):
        Dataset(np.zeros((3, 1, 2, 2)), [0, 1])
