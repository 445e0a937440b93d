"""Batch normalization and IterNorm layers with the same calling convention as
:mod:`swbnlab.swbn`.

IterNorm whitens every batch from scratch with ``T`` Newton iterations on the
trace-normalized covariance.  Its gradient here treats the batch whitening
matrix as a constant (only the centering is differentiated), so the layer is
meant for cost and whitening-quality comparisons.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernels import affine_rows, center_rows, remove_row_mean
from .matrixcore import OpCounter, ShapeError, matmul, sample_covariance
from .swbn import (
    DEFAULT_ETA,
    DEFAULT_EPS,
    BackpropCache,
    _check_batch,
    _check_predict_input,
    affine_grads,
    standardize_backward_exact,
    standardize_batch,
)


@dataclass
class BnState:
    d: int
    gamma: np.ndarray
    beta: np.ndarray
    mu_e: np.ndarray
    v_e: np.ndarray
    eta: float = DEFAULT_ETA
    eps: float = DEFAULT_EPS

    def __post_init__(self):
        if not 0 < self.eta < 1:
            raise ValueError("eta must lie in (0, 1)")
        for name in ("gamma", "beta", "mu_e", "v_e"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != (self.d,):
                raise ShapeError(f"{name} has shape {arr.shape}, expected ({self.d},)")
            setattr(self, name, arr)

    @classmethod
    def fresh(cls, d: int, eta: float = DEFAULT_ETA, eps: float = DEFAULT_EPS) -> "BnState":
        return cls(d=d, gamma=np.ones(d), beta=np.zeros(d), mu_e=np.zeros(d),
                   v_e=np.ones(d), eta=eta, eps=eps)

    def to_dict(self) -> dict:
        return {"d": self.d, "eta": self.eta, "eps": self.eps,
                "gamma": self.gamma.tolist(), "beta": self.beta.tolist(),
                "mu_e": self.mu_e.tolist(), "v_e": self.v_e.tolist()}

    @classmethod
    def from_dict(cls, payload: dict) -> "BnState":
        return cls(d=int(payload["d"]), gamma=np.array(payload["gamma"]),
                   beta=np.array(payload["beta"]), mu_e=np.array(payload["mu_e"]),
                   v_e=np.array(payload["v_e"]), eta=float(payload["eta"]),
                   eps=float(payload["eps"]))


def bn_forward_train(x: np.ndarray, state: BnState) -> tuple[np.ndarray, BackpropCache]:
    x = _check_batch(x, state.d)
    x_s, mu, v = standardize_batch(x, state)
    return affine_rows(x_s, state.gamma, state.beta), BackpropCache(x_s=x_s, x_w=x_s, mu=mu, v=v, x=x)


def bn_backward(grad_out: np.ndarray, cache: BackpropCache,
                state: BnState) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != cache.x_s.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match cache {cache.x_s.shape}")
    grad_gamma, grad_beta = affine_grads(grad_out, cache)
    grad_s = grad_out * state.gamma[:, None]
    return standardize_backward_exact(grad_s, cache, state.eps), grad_gamma, grad_beta


def bn_whiten_predict(x: np.ndarray, state: BnState) -> np.ndarray:
    x = _check_predict_input(x, state.d)
    scale = 1.0 / np.sqrt(state.v_e + state.eps)
    if x.ndim == 1:
        return (x - state.mu_e) * scale
    return (x - state.mu_e[:, None]) * scale[:, None]


def bn_predict(x: np.ndarray, state: BnState) -> np.ndarray:
    x_s = bn_whiten_predict(x, state)
    if x_s.ndim == 1:
        return x_s * state.gamma + state.beta
    return x_s * state.gamma[:, None] + state.beta[:, None]


def iternorm_whiten(sigma: np.ndarray, T: int, counter: OpCounter | None = None) -> np.ndarray:
    """Approximate ``sigma^{-1/2}`` with ``T`` Newton steps from ``W_0 = I``.

    Iterates ``W_k = (3 W_{k-1} - W_{k-1}^3 S) / 2`` on ``S = sigma / tr(sigma)``
    and rescales by ``1 / sqrt(tr(sigma))``.  Each step costs three products.
    """
    if T < 1:
        raise ValueError("IterNorm needs T >= 1 Newton iterations")
    sigma = np.asarray(sigma, dtype=np.float64)
    if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1]:
        raise ShapeError(f"sigma must be square, got {sigma.shape}")
    tr = float(np.trace(sigma))
    if not tr > 0:
        raise ValueError(f"covariance trace must be positive, got {tr}")
    s_n = sigma / tr
    w = np.eye(sigma.shape[0])
    for _ in range(T):
        w2 = matmul(w, w, counter)
        w3 = matmul(w2, w, counter)
        w = 0.5 * (3.0 * w - matmul(w3, s_n, counter))
    return w / np.sqrt(tr)


@dataclass
class IterNormState:
    d: int
    gamma: np.ndarray
    beta: np.ndarray
    mu_e: np.ndarray
    w_e: np.ndarray
    T: int = 5
    eta: float = DEFAULT_ETA
    eps: float = DEFAULT_EPS

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if not 0 < self.eta < 1:
            raise ValueError("eta must lie in (0, 1)")
        d = self.d
        for name, shape in (("gamma", (d,)), ("beta", (d,)), ("mu_e", (d,)), ("w_e", (d, d))):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != shape:
                raise ShapeError(f"{name} has shape {arr.shape}, expected {shape}")
            setattr(self, name, arr)

    @classmethod
    def fresh(cls, d: int, T: int = 5, eta: float = DEFAULT_ETA,
              eps: float = DEFAULT_EPS) -> "IterNormState":
        return cls(d=d, gamma=np.ones(d), beta=np.zeros(d), mu_e=np.zeros(d),
                   w_e=np.eye(d), T=T, eta=eta, eps=eps)

    def to_dict(self) -> dict:
        return {"d": self.d, "T": self.T, "eta": self.eta, "eps": self.eps,
                "gamma": self.gamma.tolist(), "beta": self.beta.tolist(),
                "mu_e": self.mu_e.tolist(), "w_e": self.w_e.tolist()}

    @classmethod
    def from_dict(cls, payload: dict) -> "IterNormState":
        return cls(d=int(payload["d"]), gamma=np.array(payload["gamma"]),
                   beta=np.array(payload["beta"]), mu_e=np.array(payload["mu_e"]),
                   w_e=np.array(payload["w_e"], dtype=np.float64), T=int(payload["T"]),
                   eta=float(payload["eta"]), eps=float(payload["eps"]))


def iternorm_forward_train(x: np.ndarray, state: IterNormState,
                           counter: OpCounter | None = None) -> tuple[np.ndarray, BackpropCache]:
    """Center, whiten with a fresh Newton solve, then scale and shift.

    Multiplication cost is ``2 d^2 n + 3 T d^3``.
    """
    x = _check_batch(x, state.d)
    xc, mu = center_rows(x)
    sigma = sample_covariance(xc, counter)
    sigma[np.diag_indices_from(sigma)] += state.eps
    w = iternorm_whiten(sigma, state.T, counter)
    x_w = matmul(w, xc, counter)
    state.mu_e = state.eta * state.mu_e + (1.0 - state.eta) * mu
    state.w_e = state.eta * state.w_e + (1.0 - state.eta) * w
    out = affine_rows(x_w, state.gamma, state.beta)
    cache = BackpropCache(x_s=xc, x_w=x_w, mu=mu, v=np.diag(sigma).copy(), x=x,
                          extra={"w": w})
    return out, cache


def iternorm_backward(grad_out: np.ndarray, cache: BackpropCache, state: IterNormState,
                      counter: OpCounter | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != cache.x_w.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match cache {cache.x_w.shape}")
    grad_gamma, grad_beta = affine_grads(grad_out, cache)
    w = cache.extra["w"]
    grad = matmul(w.T, grad_out * state.gamma[:, None], counter)
    remove_row_mean(grad)
    return grad, grad_gamma, grad_beta


def iternorm_whiten_predict(x: np.ndarray, state: IterNormState) -> np.ndarray:
    x = _check_predict_input(x, state.d)
    if x.ndim == 1:
        return state.w_e @ (x - state.mu_e)
    return state.w_e @ (x - state.mu_e[:, None])


def iternorm_predict(x: np.ndarray, state: IterNormState) -> np.ndarray:
    x_w = iternorm_whiten_predict(x, state)
    if x_w.ndim == 1:
        return x_w * state.gamma + state.beta
    return x_w * state.gamma[:, None] + state.beta[:, None]
