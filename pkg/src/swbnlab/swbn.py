"""Stochastic whitening batch normalization layer.

Activations are ``d x n`` (channels x samples).  Training standardizes the batch
with its own mean and variance, nudges the whitening matrix ``W`` one step down
the chosen whitening criterion, then outputs ``gamma * (W X_s) + beta``.  ``W``
is only ever changed by the forward pass; the backward pass treats it as a
constant and produces gradients for the input, ``gamma`` and ``beta``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .criteria import Criterion, delta_w
from .kernels import affine_rows, faithful_scale, standardize_rows
from .matrixcore import OpCounter, ShapeError, matmul, sample_covariance, symmetrize

DEFAULT_ALPHA = 1e-5
DEFAULT_ETA = 0.95
DEFAULT_EPS = 1e-8


class BackwardMode(enum.Enum):
    # per-sample derivative terms only, as the layer's published backward pass
    FAITHFUL = "faithful"
    # full Jacobian-vector product, including coupling through batch mean/variance
    EXACT = "exact"

    @classmethod
    def parse(cls, value: "BackwardMode | str") -> "BackwardMode":
        if isinstance(value, BackwardMode):
            return value
        try:
            return cls(value.lower())
        except ValueError:
            raise ValueError(f"unknown backward mode {value!r}; expected 'faithful' or 'exact'") from None


@dataclass
class SwbnState:
    d: int
    w: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    mu_e: np.ndarray
    v_e: np.ndarray
    alpha: float = DEFAULT_ALPHA
    eta: float = DEFAULT_ETA
    eps: float = DEFAULT_EPS
    criterion: Criterion = Criterion.KL

    def __post_init__(self):
        self.criterion = Criterion.parse(self.criterion)
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if not 0 < self.eta < 1:
            raise ValueError("eta must lie in (0, 1)")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        d = self.d
        for name, shape in (("w", (d, d)), ("gamma", (d,)), ("beta", (d,)),
                            ("mu_e", (d,)), ("v_e", (d,))):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != shape:
                raise ShapeError(f"{name} has shape {arr.shape}, expected {shape}")
            setattr(self, name, arr)

    @classmethod
    def fresh(cls, d: int, criterion: Criterion | str = Criterion.KL,
              alpha: float = DEFAULT_ALPHA, eta: float = DEFAULT_ETA,
              eps: float = DEFAULT_EPS) -> "SwbnState":
        """``W = I``, ``gamma = 1``, ``beta = 0``, ``mu_E = 0``, ``v_E = 1``."""
        return cls(d=d, w=np.eye(d), gamma=np.ones(d), beta=np.zeros(d),
                   mu_e=np.zeros(d), v_e=np.ones(d), alpha=alpha, eta=eta,
                   eps=eps, criterion=criterion)

    def copy(self) -> "SwbnState":
        return SwbnState(d=self.d, w=self.w.copy(), gamma=self.gamma.copy(),
                         beta=self.beta.copy(), mu_e=self.mu_e.copy(),
                         v_e=self.v_e.copy(), alpha=self.alpha, eta=self.eta,
                         eps=self.eps, criterion=self.criterion)

    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "criterion": self.criterion.value,
            "alpha": self.alpha,
            "eta": self.eta,
            "eps": self.eps,
            "w": self.w.tolist(),
            "gamma": self.gamma.tolist(),
            "beta": self.beta.tolist(),
            "mu_e": self.mu_e.tolist(),
            "v_e": self.v_e.tolist(),
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "SwbnState":
        return cls(d=int(payload["d"]), w=np.array(payload["w"], dtype=np.float64),
                   gamma=np.array(payload["gamma"]), beta=np.array(payload["beta"]),
                   mu_e=np.array(payload["mu_e"]), v_e=np.array(payload["v_e"]),
                   alpha=float(payload["alpha"]), eta=float(payload["eta"]),
                   eps=float(payload["eps"]), criterion=payload["criterion"])


@dataclass
class BackpropCache:
    x_s: np.ndarray
    x_w: np.ndarray
    mu: np.ndarray
    v: np.ndarray
    x: np.ndarray
    extra: dict = field(default_factory=dict)


def _check_batch(x: np.ndarray, d: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != d:
        raise ShapeError(f"expected a {d} x n batch, got shape {x.shape}")
    if x.shape[1] < 2:
        raise ValueError("training batches need n >= 2 (variance uses n - 1)")
    if not np.all(np.isfinite(x)):
        raise ValueError("batch contains non-finite values")
    return x


def standardize_batch(x: np.ndarray, state, update_ema: bool = True):
    """Batch mean, unbiased variance, EMA update and standardized data.

    Shared with the batch-norm baseline.  Returns ``(x_s, mu, v)``.
    """
    x_s, mu, v = standardize_rows(x, state.eps)
    if update_ema:
        state.mu_e = state.eta * state.mu_e + (1.0 - state.eta) * mu
        state.v_e = state.eta * state.v_e + (1.0 - state.eta) * v
    return x_s, mu, v


def forward_train(x: np.ndarray, state: SwbnState,
                  counter: OpCounter | None = None) -> tuple[np.ndarray, BackpropCache]:
    """One training-time forward pass; updates ``W``, ``mu_E`` and ``v_E``."""
    x = _check_batch(x, state.d)
    x_s, mu, v = standardize_batch(x, state)
    sigma_b = sample_covariance(x_s, counter)
    upd = delta_w(state.criterion, state.w, sigma_b, counter)
    state.w = symmetrize(state.w - state.alpha * upd)
    x_w = matmul(state.w, x_s, counter)
    out = affine_rows(x_w, state.gamma, state.beta)
    return out, BackpropCache(x_s=x_s, x_w=x_w, mu=mu, v=v, x=x)


def affine_grads(grad_out: np.ndarray, cache: BackpropCache) -> tuple[np.ndarray, np.ndarray]:
    grad_gamma = np.einsum("ij,ij->i", grad_out, cache.x_w)
    grad_beta = grad_out.sum(axis=1)
    return grad_gamma, grad_beta


def standardize_backward_exact(grad_s: np.ndarray, cache: BackpropCache, eps: float) -> np.ndarray:
    """Gradient through ``x_s = (x - mean) / sqrt(var + eps)`` with var over ``n - 1``."""
    n = grad_s.shape[1]
    inv_std = 1.0 / np.sqrt(cache.v + eps)
    proj = np.einsum("ij,ij->i", grad_s, cache.x_s) / (n - 1)
    grad = grad_s - grad_s.mean(axis=1, keepdims=True)
    grad -= cache.x_s * proj[:, None]
    grad *= inv_std[:, None]
    return grad


def backward(grad_out: np.ndarray, cache: BackpropCache, state: SwbnState,
             mode: BackwardMode | str = BackwardMode.FAITHFUL,
             counter: OpCounter | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns ``(grad_x, grad_gamma, grad_beta)``; never touches ``state``."""
    mode = BackwardMode.parse(mode)
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != cache.x_w.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match cache {cache.x_w.shape}")
    grad_gamma, grad_beta = affine_grads(grad_out, cache)

    # dL/dX_s[k, l] = sum_i gamma_i W_ik dL/dXhat[i, l]
    grad_s = matmul(state.w.T, grad_out * state.gamma[:, None], counter)

    if mode is BackwardMode.EXACT:
        return standardize_backward_exact(grad_s, cache, state.eps), grad_gamma, grad_beta

    n = grad_out.shape[1]
    var_eps = cache.v + state.eps
    # dXs/dX = 1/sqrt(v+eps) + dXs/dv * dv/dX + dXs/dmu * dmu/dX, with
    # dXs/dv = -0.5 (Xs - mu) (v+eps)^-1.5 and dv/dX = 2 (X - mu) / (n - 1)
    # taken term for term from the published loop body.
    coupling = -(var_eps ** -1.5) / (n - 1)
    diag_term = (1.0 - 1.0 / n) / np.sqrt(var_eps)
    faithful_scale(grad_s, cache.x, cache.x_s, cache.mu, coupling, diag_term)
    return grad_s, grad_gamma, grad_beta


def _predict_standardize(x: np.ndarray, state) -> np.ndarray:
    scale = 1.0 / np.sqrt(state.v_e + state.eps)
    if x.ndim == 1:
        return (x - state.mu_e) * scale
    return (x - state.mu_e[:, None]) * scale[:, None]


def _check_predict_input(x, d: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (1, 2) or x.shape[0] != d:
        raise ShapeError(f"expected a length-{d} vector or {d} x m matrix, got {x.shape}")
    return x


def whiten_predict(x: np.ndarray, state: SwbnState) -> np.ndarray:
    """Inference-time whitened features ``W x_s`` before scale and shift."""
    x = _check_predict_input(x, state.d)
    return state.w @ _predict_standardize(x, state)


def forward_predict(x: np.ndarray, state: SwbnState) -> np.ndarray:
    x = _check_predict_input(x, state.d)
    x_w = state.w @ _predict_standardize(x, state)
    if x.ndim == 1:
        return x_w * state.gamma + state.beta
    return x_w * state.gamma[:, None] + state.beta[:, None]


def fold_into_affine(state: SwbnState) -> tuple[np.ndarray, np.ndarray]:
    """``(A, b)`` with ``A x + b == forward_predict(x)``."""
    scale = 1.0 / np.sqrt(state.v_e + state.eps)
    a = state.gamma[:, None] * state.w * scale[None, :]
    b = state.beta - a @ state.mu_e
    return a, b


def reshape_nchw(t: np.ndarray, layout: str = "dhwn") -> np.ndarray:
    """Flatten a conv activation tensor into a ``d x (h*w*n)`` matrix.

    ``layout="dhwn"`` takes a ``d x h x w x n`` tensor; ``"nchw"`` takes the
    framework-style ``n x d x h x w`` and moves channels to the front first.
    The channel index is always the row index of the result.
    """
    t = np.asarray(t, dtype=np.float64)
    if t.ndim != 4:
        raise ShapeError(f"expected a 4-D tensor, got shape {t.shape}")
    if layout == "nchw":
        t = np.moveaxis(t, 1, 0)
        t = np.moveaxis(t, 1, 3)
    elif layout != "dhwn":
        raise ValueError(f"unknown layout {layout!r}")
    return t.reshape(t.shape[0], -1)


def unreshape_nchw(m: np.ndarray, shape: tuple[int, int, int, int],
                   layout: str = "dhwn") -> np.ndarray:
    """Inverse of :func:`reshape_nchw`; ``shape`` is the original tensor shape."""
    if layout == "nchw":
        n, d, h, w = shape
        dhwn = (d, h, w, n)
    elif layout == "dhwn":
        dhwn = tuple(shape)
    else:
        raise ValueError(f"unknown layout {layout!r}")
    d, h, w, n = dhwn
    if m.shape != (d, h * w * n):
        raise ShapeError(f"matrix shape {m.shape} does not match tensor shape {tuple(shape)}")
    t = m.reshape(dhwn)
    if layout == "nchw":
        t = np.moveaxis(t, 3, 1)
        t = np.moveaxis(t, 0, 1)
    return t
