"""Dense float64 matrix helpers with a multiplication counter.

Matrices are plain ``numpy`` arrays of dtype float64 laid out as features x
samples (``d x n``).  Only the handful of operations the whitening layers need
live here; everything routes its matrix products through :func:`matmul` so a
shared :class:`OpCounter` can tally scalar multiplications.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


class ShapeError(ValueError):
    pass


@dataclass
class OpCounter:
    """Accumulates scalar multiplications spent inside matrix products."""

    matmul_mults: int = 0

    def reset(self) -> None:
        self.matmul_mults = 0


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Validate user input as a finite 2-D float64 array."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise ShapeError(f"{name} must be a non-empty 2-D array, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} contains non-finite entries")
    return m


def matmul(a: np.ndarray, b: np.ndarray, counter: OpCounter | None = None,
           out: np.ndarray | None = None) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    if counter is not None:
        counter.matmul_mults += a.shape[0] * a.shape[1] * b.shape[1]
    return np.matmul(a, b, out=out)


def sample_covariance(xs: np.ndarray, counter: OpCounter | None = None) -> np.ndarray:
    """``(1/n) xs xs^T`` for already-centered ``xs`` of shape ``d x n``.

    The divisor is ``n`` (not ``n - 1``).  The result is symmetrized so that
    floating-point asymmetry from the BLAS kernel cannot leak downstream.
    """
    if xs.ndim != 2:
        raise ShapeError(f"expected a d x n matrix, got shape {xs.shape}")
    n = xs.shape[1]
    cov = matmul(xs, xs.T, counter)
    cov /= n
    return symmetrize(cov)


def symmetrize(a: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"symmetrize needs a square matrix, got {a.shape}")
    return 0.5 * (a + a.T)


def frobenius_norm(a: np.ndarray) -> float:
    # scaled by the largest entry so tiny matrices do not underflow to 0
    a = np.asarray(a, dtype=np.float64)
    peak = float(np.max(np.abs(a))) if a.size else 0.0
    if peak == 0.0 or not np.isfinite(peak):
        return peak
    return peak * float(np.sqrt(np.sum(np.square(a / peak))))


def mean_abs_offdiag(a: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"expected a square matrix, got {a.shape}")
    d = a.shape[0]
    if d < 2:
        raise ShapeError("mean_abs_offdiag needs d >= 2")
    off = ~np.eye(d, dtype=bool)
    return float(np.abs(a[off]).mean())


def correlation(x: np.ndarray) -> np.ndarray:
    """Pearson correlation between the rows of ``x`` (features x samples).

    Constant rows get zero correlation with everything and a unit diagonal.
    """
    xc = x - x.mean(axis=1, keepdims=True)
    cov = xc @ xc.T
    sd = np.sqrt(np.diag(cov))
    safe = np.where(sd > 0, sd, 1.0)
    corr = cov / np.outer(safe, safe)
    corr[sd == 0, :] = 0.0
    corr[:, sd == 0] = 0.0
    np.fill_diagonal(corr, 1.0)
    return symmetrize(corr)


def write_csv(path: str | Path, a: np.ndarray) -> None:
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    with open(path, "w", newline="") as fh:
        for row in a:
            fh.write(",".join("%.17g" % v for v in row) + "\n")


def read_csv(path: str | Path) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append([float(v) for v in line.split(",")])
    return np.array(rows, dtype=np.float64)


def to_gray(a: np.ndarray) -> np.ndarray:
    """Map values in [-1, 1] linearly onto 0..255, clamping outside."""
    scaled = np.rint((np.clip(a, -1.0, 1.0) + 1.0) * 127.5)
    return scaled.astype(np.uint8)


def write_pgm(path: str | Path, a: np.ndarray) -> None:
    """Binary 8-bit PGM ("P5"); width is the column count."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    rows, cols = a.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{cols} {rows}\n255\n".encode("ascii"))
        fh.write(to_gray(a).tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    fields = []
    pos = 0
    while len(fields) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    if fields[0] != b"P5":
        raise ValueError(f"not a binary PGM: magic {fields[0]!r}")
    cols, rows, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ValueError(f"unsupported maxval {maxval}")
    data = raw[pos + 1:pos + 1 + rows * cols]
    return np.frombuffer(data, dtype=np.uint8).reshape(rows, cols)
