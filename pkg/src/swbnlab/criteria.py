"""Whitening criteria and their stochastic update matrices.

Two losses measure how far a covariance ``Sigma_y = W Sigma W^T`` is from the
identity:

* KL:  ``0.5 * (tr(Sigma_y) - ln det(Sigma_y) - d)``
* Fro: ``0.5 * ||I - Sigma_y||_F``

``delta_w`` gives the matrix subtracted (times a step size) from ``W``.  The KL
update is the relative gradient ``(Sigma_y - I) W``, which needs no inverse;
the Fro update is the true gradient ``(Sigma_y - I) W Sigma / ||I - Sigma_y||_F``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .matrixcore import OpCounter, ShapeError, frobenius_norm, matmul, symmetrize

# Below this distance the Fro update is treated as a fixed point.
FRO_GUARD = 1e-8


class Criterion(enum.Enum):
    KL = "kl"
    FRO = "fro"

    @classmethod
    def parse(cls, value: "Criterion | str") -> "Criterion":
        if isinstance(value, Criterion):
            return value
        try:
            return cls(value.lower())
        except ValueError:
            raise ValueError(f"unknown whitening criterion {value!r}; expected 'kl' or 'fro'") from None


class DivergenceError(RuntimeError):
    def __init__(self, message: str, iteration: int):
        super().__init__(f"{message} (iteration {iteration})")
        self.iteration = iteration


def _check_square(a: np.ndarray, name: str) -> None:
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"{name} must be square, got shape {a.shape}")


def logdet_spd(a: np.ndarray) -> float:
    """``ln det(a)`` through a Cholesky factor; raises if ``a`` is not PD."""
    try:
        chol = np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        raise ValueError("matrix is not positive definite; log-determinant undefined") from None
    return float(2.0 * np.sum(np.log(np.diag(chol))))


def eval_ckl(sigma_y: np.ndarray) -> float:
    sigma_y = np.asarray(sigma_y, dtype=np.float64)
    _check_square(sigma_y, "sigma_y")
    if np.max(np.abs(sigma_y - sigma_y.T)) > 1e-10:
        raise ValueError("sigma_y is not symmetric")
    d = sigma_y.shape[0]
    return 0.5 * (float(np.trace(sigma_y)) - logdet_spd(sigma_y) - d)


def eval_cfro(sigma_y: np.ndarray) -> float:
    sigma_y = np.asarray(sigma_y, dtype=np.float64)
    _check_square(sigma_y, "sigma_y")
    return 0.5 * frobenius_norm(np.eye(sigma_y.shape[0]) - sigma_y)


def evaluate(criterion: Criterion | str, sigma_y: np.ndarray) -> float:
    if Criterion.parse(criterion) is Criterion.KL:
        return eval_ckl(sigma_y)
    return eval_cfro(sigma_y)


def delta_w(criterion: Criterion | str, w: np.ndarray, sigma: np.ndarray,
            counter: OpCounter | None = None) -> np.ndarray:
    """Update matrix for ``W <- W - alpha * delta_w``.

    Both branches cost exactly three ``d x d`` products (``W Sigma`` is shared
    by the Fro branch).
    """
    criterion = Criterion.parse(criterion)
    _check_square(w, "w")
    if sigma.shape != w.shape:
        raise ShapeError(f"w {w.shape} and sigma {sigma.shape} differ in shape")
    w_sigma = matmul(w, sigma, counter)
    resid = matmul(w_sigma, w.T, counter)
    resid[np.diag_indices_from(resid)] -= 1.0
    if criterion is Criterion.KL:
        return matmul(resid, w, counter)
    norm = frobenius_norm(resid)
    upd = matmul(resid, w_sigma, counter)
    if norm < FRO_GUARD:
        return np.zeros_like(w)
    upd /= norm
    return upd


def whitening_distance(w: np.ndarray, sigma: np.ndarray) -> float:
    """``||W Sigma W^T - I||_F``."""
    return frobenius_norm(w @ sigma @ w.T - np.eye(w.shape[0]))


@dataclass
class WhitenIterReport:
    iterations: int
    final_distance: float
    converged: bool
    trajectory: list[tuple[int, float]] = field(default_factory=list)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write("iter,fro_distance\n")
            for it, dist in self.trajectory:
                fh.write("%d,%.17g\n" % (it, dist))


def whiten_iterate(sigma: np.ndarray, criterion: Criterion | str, alpha: float,
                   max_iters: int, tol: float, on_step=None) -> tuple[np.ndarray, WhitenIterReport]:
    """Run ``W <- sym(W - alpha * delta_w(W, sigma))`` from ``W = I``.

    ``sigma`` must be a correlation matrix (unit diagonal); rescale a raw
    covariance with ``to_correlation`` first.  Stops as soon as the whitening
    distance drops below ``tol``; the trajectory records the distance of every
    visited iterate including the initial one.  ``on_step(it, w)`` is called
    after every update if given.
    """
    criterion = Criterion.parse(criterion)
    sigma = np.asarray(sigma, dtype=np.float64)
    _check_square(sigma, "sigma")
    if np.max(np.abs(sigma - sigma.T)) > 1e-10:
        raise ValueError("sigma is not symmetric")
    if np.max(np.abs(np.diag(sigma) - 1.0)) > 1e-10:
        raise ValueError("sigma must have a unit diagonal (pass a correlation matrix)")
    if alpha <= 0 or tol <= 0 or max_iters < 0:
        raise ValueError("alpha and tol must be positive, max_iters non-negative")

    w = np.eye(sigma.shape[0])
    dist = whitening_distance(w, sigma)
    trajectory = [(0, dist)]
    it = 0
    while dist >= tol and it < max_iters:
        it += 1
        # overflow is reported below as a divergence, not as a numpy warning
        with np.errstate(over="ignore", invalid="ignore"):
            w = symmetrize(w - alpha * delta_w(criterion, w, sigma))
            dist = whitening_distance(w, sigma)
        if not (np.isfinite(dist) and np.all(np.isfinite(w))):
            raise DivergenceError("whitening iteration produced non-finite values", it)
        trajectory.append((it, dist))
        if on_step is not None:
            on_step(it, w)
    report = WhitenIterReport(iterations=it, final_distance=dist,
                              converged=dist < tol, trajectory=trajectory)
    return w, report


def to_correlation(cov: np.ndarray) -> np.ndarray:
    """Rescale a covariance to unit diagonal."""
    sd = np.sqrt(np.diag(cov))
    return symmetrize(cov / np.outer(sd, sd))
