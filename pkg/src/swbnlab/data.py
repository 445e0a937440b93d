"""Datasets: synthetic Gaussians, labelled blobs, MNIST IDX files, batching.

Features are stored ``d x N`` to match the layers.  All randomness comes from
:func:`make_rng`, a PCG64 generator keyed by ``(seed, *stream)``.
"""

from __future__ import annotations

import gzip
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

log = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray | None = None
    split: str = "train"
    classes: int | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ValueError(f"features must be d x N, got shape {self.features.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.features.shape[1],):
                raise ValueError(f"{self.labels.shape[0]} labels for {self.features.shape[1]} samples")
            if self.classes is None:
                self.classes = int(self.labels.max()) + 1 if len(self.labels) else 0
            if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.classes):
                raise ValueError(f"labels must lie in [0, {self.classes})")

    @property
    def d(self) -> int:
        return self.features.shape[0]

    def __len__(self) -> int:
        return self.features.shape[1]

    def subset(self, n: int) -> "Dataset":
        labels = None if self.labels is None else self.labels[:n]
        return Dataset(self.features[:, :n], labels, self.split, self.classes)


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, *stream])))


def box_muller(rng: np.random.Generator, shape) -> np.ndarray:
    """Standard normals from pairs of uniforms (Box-Muller transform)."""
    size = int(np.prod(shape))
    half = (size + 1) // 2
    u1 = 1.0 - rng.random(half)  # (0, 1], keeps the log finite
    u2 = rng.random(half)
    radius = np.sqrt(-2.0 * np.log(u1))
    z = np.concatenate([radius * np.cos(2 * np.pi * u2), radius * np.sin(2 * np.pi * u2)])
    return z[:size].reshape(shape)


def equicorrelation(d: int, rho: float) -> np.ndarray:
    sigma = np.full((d, d), float(rho))
    np.fill_diagonal(sigma, 1.0)
    return sigma


def gen_correlated_gaussian(d: int, n: int, sigma: np.ndarray, seed: int) -> np.ndarray:
    """``n`` zero-mean columns ``L z`` where ``L L^T = sigma``."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if sigma.shape != (d, d):
        raise ValueError(f"sigma has shape {sigma.shape}, expected ({d}, {d})")
    try:
        chol = np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        raise ValueError("sigma is not symmetric positive definite") from None
    return chol @ box_muller(make_rng(seed, 0), (d, n))


def gen_blobs(d: int, n: int, classes: int, seed: int, separation: float = 4.0,
              rho: float = 0.0, split: str = "train", centers_seed: int | None = None) -> Dataset:
    """Gaussian class clusters with equicorrelated noise.

    Class centers are random directions scaled to ``separation``; they depend
    only on ``centers_seed`` (defaults to ``seed``) so train and test splits
    drawn with different ``seed`` share the same geometry.
    """
    centers_rng = make_rng(seed if centers_seed is None else centers_seed, 1)
    centers = centers_rng.standard_normal((d, classes))
    centers *= separation / np.linalg.norm(centers, axis=0, keepdims=True)
    rng = make_rng(seed, 2)
    labels = rng.integers(0, classes, size=n)
    noise = gen_correlated_gaussian(d, n, equicorrelation(d, rho), seed)
    return Dataset(centers[:, labels] + noise, labels, split, classes)


def _open_maybe_gzip(path: str | Path) -> bytes:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"\x1f\x8b":
        return gzip.decompress(raw)
    return raw


def _read_header(raw: bytes, expected_magic: int, n_dims: int, path) -> tuple[int, ...]:
    header_len = 4 * (1 + n_dims)
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: file too short for an IDX header ({len(raw)} bytes)")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise IdxFormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    if len(raw) < header_len:
        raise IdxFormatError(f"{path}: truncated header ({len(raw)} of {header_len} bytes)")
    return struct.unpack(">" + "I" * n_dims, raw[4:header_len])


def load_idx_images(path: str | Path) -> np.ndarray:
    """Images as a ``(rows*cols) x N`` matrix of floats in [0, 1]."""
    raw = _open_maybe_gzip(path)
    count, rows, cols = _read_header(raw, IDX_IMAGES_MAGIC, 3, path)
    need = count * rows * cols
    body = raw[16:]
    if len(body) < need:
        raise IdxFormatError(f"{path}: expected {need} pixel bytes, found {len(body)}")
    pixels = np.frombuffer(body, dtype=np.uint8, count=need).reshape(count, rows * cols)
    return pixels.T.astype(np.float64) / 255.0


def load_idx_labels(path: str | Path) -> np.ndarray:
    raw = _open_maybe_gzip(path)
    (count,) = _read_header(raw, IDX_LABELS_MAGIC, 1, path)
    body = raw[8:]
    if len(body) < count:
        raise IdxFormatError(f"{path}: expected {count} label bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8, count=count).astype(np.int64)


def write_idx_images(path: str | Path, images: np.ndarray) -> None:
    """Write ``N x rows x cols`` uint8 images as an IDX3 file."""
    images = np.asarray(images, dtype=np.uint8)
    count, rows, cols = images.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, count, rows, cols))
        fh.write(images.tobytes())


def write_idx_labels(path: str | Path, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        fh.write(labels.tobytes())


MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _find(directory: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx")):
        if (directory / name).exists():
            return directory / name
    raise FileNotFoundError(f"no {stem}[.gz] under {directory}")


def load_mnist(directory: str | Path, n_train: int | None = None,
               n_test: int | None = None) -> tuple[Dataset, Dataset]:
    """Load the standard MNIST file quartet, keeping the first ``n`` samples."""
    directory = Path(directory)
    out = []
    for split, limit in (("train", n_train), ("test", n_test)):
        img_name, lbl_name = MNIST_FILES[split]
        x = load_idx_images(_find(directory, img_name))
        y = load_idx_labels(_find(directory, lbl_name))
        if x.shape[1] != len(y):
            raise IdxFormatError(f"{split}: {x.shape[1]} images but {len(y)} labels")
        ds = Dataset(x, y, split, 10)
        out.append(ds.subset(limit) if limit is not None else ds)
    return out[0], out[1]


class Batch(NamedTuple):
    x: np.ndarray
    y: np.ndarray | None
    index: np.ndarray


def batches(dataset: Dataset, batch_size: int, seed: int = 0, epoch: int = 0,
            shuffle: bool = True) -> Iterator[Batch]:
    """Partition the dataset into consecutive batches; the last may be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(dataset)
    order = make_rng(seed, 3, epoch).permutation(n) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        y = None if dataset.labels is None else dataset.labels[idx]
        yield Batch(dataset.features[:, idx], y, idx)
