"""Cubic B-spline interpolation of sampled signals and its exact transpose.

Reading a signal ``m`` at a fractional sample position ``u`` is the linear map

    m(u) = sum_k beta3(u - k) c[k],   c = B^-1 m,

where ``B`` samples a spline with mirror (whole-sample symmetric) boundary
extension and ``beta3`` is the centred cubic B-spline. Positions outside
``[0, n - 1]`` read as zero. :func:`inject` applies the transpose of this map so
that simulation and beamforming form an exact adjoint pair.
"""

from __future__ import annotations

import numpy as np
from numba import njit
from scipy.linalg import solve_banded


def beta3(x):
    """Centred cubic B-spline."""
    a = np.abs(np.asarray(x, dtype=float))
    out = np.zeros_like(a)
    m1 = a < 1
    m2 = (a >= 1) & (a < 2)
    out[m1] = 2 / 3 - a[m1] ** 2 + a[m1] ** 3 / 2
    out[m2] = (2 - a[m2]) ** 3 / 6
    return out


def _banded(n: int, transpose: bool = False) -> np.ndarray:
    if n < 3:
        raise ValueError("spline signals need at least 3 samples")
    sup = np.full(n, 1 / 6)
    diag = np.full(n, 4 / 6)
    sub = np.full(n, 1 / 6)
    # mirror boundary: c[-1] = c[1], c[n] = c[n - 2]
    b01, b_last = 2 / 6, 2 / 6  # B[0, 1] and B[n-1, n-2]
    ab = np.zeros((3, n))
    if not transpose:
        ab[0, 1:] = sup[:-1]
        ab[0, 1] = b01
        ab[1] = diag
        ab[2, :-1] = sub[1:]
        ab[2, n - 2] = b_last
    else:
        ab[0, 1:] = sub[1:]
        ab[0, n - 1] = b_last
        ab[1] = diag
        ab[2, :-1] = sup[:-1]
        ab[2, 0] = b01
    return ab


def _solve_along(x: np.ndarray, axis: int, transpose: bool) -> np.ndarray:
    x = np.moveaxis(np.asarray(x), axis, 0)
    n = x.shape[0]
    flat = x.reshape(n, -1)
    sol = solve_banded((1, 1), _banded(n, transpose), flat, check_finite=False)
    return np.moveaxis(sol.reshape(x.shape), 0, axis)


def prefilter(m: np.ndarray, axis: int = -1) -> np.ndarray:
    """Spline coefficients ``B^-1 m`` along ``axis``."""
    return _solve_along(m, axis, transpose=False)


def prefilter_adjoint(c: np.ndarray, axis: int = -1) -> np.ndarray:
    """Transpose of :func:`prefilter`, ``B^-T c``."""
    return _solve_along(c, axis, transpose=True)


@njit(cache=True, inline="always")
def _mirror(k, n):
    if k < 0:
        return -k
    if k > n - 1:
        return 2 * (n - 1) - k
    return k


@njit(cache=True, inline="always")
def _weights(t):
    s = 1.0 - t
    w0 = s * s * s / 6.0
    w1 = 2.0 / 3.0 - t * t + t * t * t / 2.0
    w2 = 2.0 / 3.0 - s * s + s * s * s / 2.0
    w3 = t * t * t / 6.0
    return w0, w1, w2, w3


@njit(cache=True)
def _eval(c, u):
    n = c.shape[0]
    i = int(np.floor(u))
    w0, w1, w2, w3 = _weights(u - i)
    return (w0 * c[_mirror(i - 1, n)] + w1 * c[_mirror(i, n)]
            + w2 * c[_mirror(i + 1, n)] + w3 * c[_mirror(i + 2, n)])


@njit(cache=True)
def _scatter(buf, u, a):
    n = buf.shape[0]
    i = int(np.floor(u))
    w0, w1, w2, w3 = _weights(u - i)
    buf[_mirror(i - 1, n)] += w0 * a
    buf[_mirror(i, n)] += w1 * a
    buf[_mirror(i + 1, n)] += w2 * a
    buf[_mirror(i + 2, n)] += w3 * a


@njit(cache=True)
def das_kernel(coef, rx_u, rx_w, tx_u, tx_w, out):
    """``out[p] += tx_w[p] * sum_j rx_w[j, p] * c_j(tx_u[p] + rx_u[j, p])``.

    Sums run in fixed element order so results are reproducible.
    """
    n_rx, n_t = coef.shape
    n_pix = tx_u.shape[0]
    hi = n_t - 1.0
    for p in range(n_pix):
        acc = coef[0, 0] * 0.0
        for j in range(n_rx):
            u = tx_u[p] + rx_u[j, p]
            if u < 0.0 or u > hi:
                continue
            acc += rx_w[j, p] * _eval(coef[j], u)
        out[p] += tx_w[p] * acc


@njit(cache=True)
def inject_kernel(buf, rx_u, rx_w, tx_u, tx_w, amp):
    """Transpose of :func:`das_kernel`: scatter ``amp`` into coefficient rows."""
    n_rx, n_t = buf.shape
    n_pts = tx_u.shape[0]
    hi = n_t - 1.0
    for j in range(n_rx):
        row = buf[j]
        for p in range(n_pts):
            u = tx_u[p] + rx_u[j, p]
            if u < 0.0 or u > hi:
                continue
            _scatter(row, u, amp[p] * tx_w[p] * rx_w[j, p])


def sample_at(m: np.ndarray, u) -> np.ndarray:
    """Read a 1-D signal at fractional sample positions ``u`` (zero outside)."""
    c = prefilter(np.asarray(m, dtype=float))
    u = np.atleast_1d(np.asarray(u, dtype=float))
    n = c.size
    out = np.zeros(u.shape)
    ok = (u >= 0) & (u <= n - 1)
    uu = u[ok]
    i = np.floor(uu).astype(int)
    t = uu - i
    acc = np.zeros(uu.shape)
    for k, w in zip(range(-1, 3), (beta3(t + 1), beta3(t), beta3(1 - t), beta3(2 - t))):
        idx = i + k
        idx = np.where(idx < 0, -idx, idx)
        idx = np.where(idx > n - 1, 2 * (n - 1) - idx, idx)
        acc += w * c[idx]
    out[ok] = acc
    return out


def inject(n: int, u, amp) -> np.ndarray:
    """Transpose of :func:`sample_at` for a length-``n`` signal."""
    u = np.atleast_1d(np.asarray(u, dtype=float))
    amp = np.broadcast_to(np.asarray(amp, dtype=float), u.shape)
    buf = np.zeros((1, n))
    inject_kernel(buf, u[None, :], np.ones((1, u.size)), np.zeros(u.size),
                  np.ones(u.size), np.ascontiguousarray(amp))
    return prefilter_adjoint(buf[0])
