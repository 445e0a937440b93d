"""Single-pass row kernels for the elementwise parts of the norm layers.

Each kernel walks one channel row at a time so a row is read from memory once;
with ``n`` in the tens of thousands this is several times faster than the
equivalent chain of numpy temporaries.  SWBN, batch norm and IterNorm all go
through these, so layer timings stay comparable.
"""

from __future__ import annotations

import math

import numba
import numpy as np


@numba.njit(cache=True)
def _standardize(x, eps, out, mu, v):
    d, n = x.shape
    for k in range(d):
        s = 0.0
        for l in range(n):
            s += x[k, l]
        m = s / n
        ss = 0.0
        for l in range(n):
            c = x[k, l] - m
            ss += c * c
        var = ss / (n - 1)
        inv = 1.0 / math.sqrt(var + eps)
        for l in range(n):
            out[k, l] = (x[k, l] - m) * inv
        mu[k] = m
        v[k] = var


def standardize_rows(x: np.ndarray, eps: float):
    """``((x - mu) / sqrt(v + eps), mu, v)`` with ``v`` the unbiased row variance."""
    d = x.shape[0]
    out = np.empty_like(x)
    mu = np.empty(d)
    v = np.empty(d)
    _standardize(x, eps, out, mu, v)
    return out, mu, v


@numba.njit(cache=True)
def _center(x, out, mu):
    d, n = x.shape
    for k in range(d):
        s = 0.0
        for l in range(n):
            s += x[k, l]
        m = s / n
        for l in range(n):
            out[k, l] = x[k, l] - m
        mu[k] = m


def center_rows(x: np.ndarray):
    """``(x - mu, mu)`` with ``mu`` the row means."""
    out = np.empty_like(x)
    mu = np.empty(x.shape[0])
    _center(x, out, mu)
    return out, mu


@numba.njit(cache=True)
def _remove_row_mean(a):
    d, n = a.shape
    for k in range(d):
        s = 0.0
        for l in range(n):
            s += a[k, l]
        m = s / n
        for l in range(n):
            a[k, l] -= m


def remove_row_mean(a: np.ndarray) -> np.ndarray:
    """Subtract each row's mean in place."""
    _remove_row_mean(a)
    return a


@numba.njit(cache=True)
def _affine(x, gamma, beta, out):
    d, n = x.shape
    for k in range(d):
        g = gamma[k]
        b = beta[k]
        for l in range(n):
            out[k, l] = x[k, l] * g + b


def affine_rows(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray) -> np.ndarray:
    """``gamma[k] * x[k, :] + beta[k]`` for every row."""
    out = np.empty_like(x)
    _affine(x, gamma, beta, out)
    return out


@numba.njit(cache=True)
def _faithful_scale(h, x, x_s, mu, coupling, diag):
    d, n = h.shape
    for k in range(d):
        m = mu[k]
        c = coupling[k]
        a = diag[k]
        for l in range(n):
            h[k, l] *= a + c * (x[k, l] - m) * (x_s[k, l] - m)


def faithful_scale(h, x, x_s, mu, coupling, diag) -> np.ndarray:
    """In place: ``h *= diag + coupling * (x - mu) * (x_s - mu)`` row-wise."""
    _faithful_scale(h, x, x_s, mu, coupling, diag)
    return h
