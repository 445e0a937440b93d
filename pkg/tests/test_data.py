import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from swbnlab.data import (
    Dataset, IdxFormatError, batches, box_muller, equicorrelation, gen_blobs,
    gen_correlated_gaussian, load_idx_images, load_idx_labels, load_mnist,
    make_rng, write_idx_images, write_idx_labels,
)

# four 2x3 images, bytes chosen by hand
PIXELS = bytes([0, 255, 51, 102, 153, 204,
                1, 2, 3, 4, 5, 6,
                255, 255, 255, 0, 0, 0,
                10, 20, 30, 40, 50, 60])


def image_fixture(path, magic=0x803, count=4, body=PIXELS):
    path.write_bytes(struct.pack(">IIII", magic, count, 2, 3) + body)
    return path


def label_fixture(path, labels=(0, 1, 2, 3), magic=0x801):
    path.write_bytes(struct.pack(">II", magic, len(labels)) + bytes(labels))
    return path


def test_idx_images_exact_pixels(tmp_path):
    x = load_idx_images(image_fixture(tmp_path / "img"))
    assert x.shape == (6, 4)
    assert x[:, 0].tolist() == [0.0, 1.0, 0.2, 0.4, 0.6, 0.8]
    assert x[:, 1].tolist() == [v / 255 for v in (1, 2, 3, 4, 5, 6)]
    assert x[:, 2].tolist() == [1.0, 1.0, 1.0, 0.0, 0.0, 0.0]


def test_idx_labels(tmp_path):
    assert load_idx_labels(label_fixture(tmp_path / "lbl")).tolist() == [0, 1, 2, 3]


def test_idx_gzip(tmp_path):
    raw = image_fixture(tmp_path / "img").read_bytes()
    (tmp_path / "img.gz").write_bytes(gzip.compress(raw))
    assert np.array_equal(load_idx_images(tmp_path / "img.gz"), load_idx_images(tmp_path / "img"))


def test_idx_bad_magic(tmp_path):
    with pytest.raises(IdxFormatError, match="0x00000802"):
        load_idx_images(image_fixture(tmp_path / "img", magic=0x802))
    with pytest.raises(IdxFormatError, match="bad magic"):
        load_idx_labels(image_fixture(tmp_path / "img2"))


def test_idx_truncated(tmp_path):
    with pytest.raises(IdxFormatError, match="expected 24 pixel bytes"):
        load_idx_images(image_fixture(tmp_path / "img", body=PIXELS[:-1]))
    (tmp_path / "short").write_bytes(struct.pack(">II", 0x803, 4))
    with pytest.raises(IdxFormatError, match="truncated header"):
        load_idx_images(tmp_path / "short")
    (tmp_path / "lbl").write_bytes(struct.pack(">II", 0x801, 5) + bytes([1, 2]))
    with pytest.raises(IdxFormatError):
        load_idx_labels(tmp_path / "lbl")


def test_idx_writers_roundtrip(tmp_path):
    img = np.frombuffer(PIXELS, dtype=np.uint8).reshape(4, 2, 3)
    write_idx_images(tmp_path / "a", img)
    write_idx_labels(tmp_path / "b", [3, 1, 4, 1])
    assert (tmp_path / "a").read_bytes() == image_fixture(tmp_path / "c").read_bytes()
    assert load_idx_labels(tmp_path / "b").tolist() == [3, 1, 4, 1]


def test_load_mnist_layout(tmp_path):
    rng = np.random.default_rng(0)
    for split, n in (("train", 12), ("t10k", 5)):
        write_idx_images(tmp_path / f"{split}-images-idx3-ubyte",
                         rng.integers(0, 256, (n, 28, 28)))
        write_idx_labels(tmp_path / f"{split}-labels-idx1-ubyte", rng.integers(0, 10, n))
    tr, te = load_mnist(tmp_path, n_train=10)
    assert (tr.d, len(tr), len(te)) == (784, 10, 5)
    assert tr.classes == 10 and te.split == "test"
    with pytest.raises(FileNotFoundError):
        load_mnist(tmp_path / "missing")


def test_dataset_validation():
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 3)), np.array([0, 1]))
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 2)), np.array([0, 3]), classes=3)
    ds = Dataset(np.arange(6.0).reshape(2, 3), np.array([0, 1, 1]))
    assert ds.classes == 2 and len(ds.subset(2)) == 2


def test_correlated_gaussian_identity_statistics():
    x = gen_correlated_gaussian(2, 10_000, np.eye(2), 1)
    cov = x @ x.T / x.shape[1]
    assert np.max(np.abs(cov - np.eye(2))) < 0.1
    assert np.all(np.abs(x.mean(axis=1)) < 3 / np.sqrt(10_000))


def test_correlated_gaussian_rho():
    x = gen_correlated_gaussian(2, 10_000, equicorrelation(2, 0.8), 2)
    assert abs(np.corrcoef(x)[0, 1] - 0.8) < 0.05


def test_correlated_gaussian_deterministic_and_errors():
    s = equicorrelation(3, 0.5)
    assert np.array_equal(gen_correlated_gaussian(3, 50, s, 9), gen_correlated_gaussian(3, 50, s, 9))
    assert not np.array_equal(gen_correlated_gaussian(3, 50, s, 9), gen_correlated_gaussian(3, 50, s, 10))
    with pytest.raises(ValueError, match="positive definite"):
        gen_correlated_gaussian(2, 5, np.array([[1.0, 2.0], [2.0, 1.0]]), 0)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_box_muller_moments(seed):
    z = box_muller(make_rng(seed), (20_001,))
    assert z.shape == (20_001,) and np.all(np.isfinite(z))
    assert abs(z.mean()) < 4 / np.sqrt(z.size)
    assert abs(z.var() - 1.0) < 0.05


def test_blobs_share_centers_across_splits():
    a = gen_blobs(5, 400, 3, seed=1, centers_seed=7)
    b = gen_blobs(5, 400, 3, seed=2, centers_seed=7)
    for c in range(3):
        ca = a.features[:, a.labels == c].mean(axis=1)
        cb = b.features[:, b.labels == c].mean(axis=1)
        assert np.linalg.norm(ca - cb) < 0.6
    assert a.classes == 3 and set(np.unique(a.labels)) == {0, 1, 2}


def test_batch_sizes_and_order():
    ds = Dataset(np.arange(10.0)[None, :], np.arange(10) % 2)
    sizes = [b.x.shape[1] for b in batches(ds, 4, shuffle=False)]
    assert sizes == [4, 4, 2]
    assert np.array_equal(np.concatenate([b.x[0] for b in batches(ds, 4, shuffle=False)]), np.arange(10.0))
    with pytest.raises(ValueError):
        next(batches(ds, 0))


def test_batch_shuffle_determinism():
    ds = Dataset(np.arange(50.0)[None, :])
    a = [b.index for b in batches(ds, 7, seed=3, epoch=1)]
    b = [b.index for b in batches(ds, 7, seed=3, epoch=1)]
    c = [b.index for b in batches(ds, 7, seed=3, epoch=2)]
    assert all(np.array_equal(u, v) for u, v in zip(a, b))
    assert not np.array_equal(np.concatenate(a), np.concatenate(c))


@settings(max_examples=50)
@given(st.integers(1, 60), st.integers(1, 20), st.integers(0, 1000), st.integers(0, 5))
def test_batches_cover_each_sample_once(n, size, seed, epoch):
    ds = Dataset(np.arange(float(n))[None, :], np.zeros(n, dtype=int), classes=1)
    got = np.concatenate([b.x[0] for b in batches(ds, size, seed=seed, epoch=epoch)])
    assert sorted(got.tolist()) == list(range(n))
