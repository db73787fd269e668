"""Training losses for high-dynamic-range images and their gradients.

Gradients are taken with respect to the prediction ``xh`` and include the
``1 / n`` of the mean. Non-differentiable points (kinks, the clip zone of the
signed-log transform) get the subgradient 0.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SltParams:
    alpha: float

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")

    @classmethod
    def from_db(cls, alpha_db: float) -> "SltParams":
        return cls(alpha_from_db(alpha_db))


@dataclass(frozen=True)
class MuParams:
    mu: float

    def __post_init__(self):
        if not self.mu > 0:
            raise ValueError("mu must be positive")

    @property
    def nu(self) -> float:
        return 1.0 + self.mu


def alpha_from_db(alpha_db: float) -> float:
    return 10 ** (alpha_db / 20)


def _alpha(p):
    return p.alpha if isinstance(p, SltParams) else SltParams(float(p)).alpha


def _mu(p):
    return p.mu if isinstance(p, MuParams) else MuParams(float(p)).mu


def _pair(x, xh):
    x = np.asarray(x, dtype=float)
    xh = np.asarray(xh, dtype=float)
    if x.shape != xh.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {xh.shape}")
    return x, xh


# ---------------------------------------------------------------------------
# signed logarithmic transform


def slt(x, p) -> np.ndarray:
    """``sign(x) log_alpha(alpha / |x|)`` above the threshold, 0 at or below it."""
    a = _alpha(p)
    x = np.asarray(x, dtype=float)
    ax = np.abs(x)
    out = np.zeros_like(x)
    m = ax > a
    out[m] = np.sign(x[m]) * (np.log(a / ax[m]) / math.log(a))
    return out


def slt_derivative(x, p) -> np.ndarray:
    a = _alpha(p)
    x = np.asarray(x, dtype=float)
    ax = np.abs(x)
    out = np.zeros_like(x)
    m = ax > a
    out[m] = -1.0 / (ax[m] * math.log(a))
    return out


def slt_difference(x, xh, p) -> np.ndarray:
    """``slt(xh) - slt(x)`` evaluated from magnitude ratios.

    Working on ratios makes the result depend only on ``xh / x`` when both
    values are above the threshold with equal signs, so a fixed error ratio
    gives bit-identical penalties at every magnitude.
    """
    a = _alpha(p)
    x, xh = _pair(x, xh)
    la = math.log(a)
    ax, axh = np.abs(x), np.abs(xh)
    s, sh = np.sign(x), np.sign(xh)
    up, uph = ax > a, axh > a
    out = np.zeros(np.broadcast(x, xh).shape)
    both = up & uph
    same = both & (s == sh)
    opp = both & (s != sh)
    out[same] = -s[same] * (np.log(axh[same] / ax[same]) / la)
    out[opp] = sh[opp] * (np.log(a * a / (ax[opp] * axh[opp])) / la)
    only_h = uph & ~up
    out[only_h] = sh[only_h] * (np.log(a / axh[only_h]) / la)
    only_x = up & ~uph
    out[only_x] = -s[only_x] * (np.log(a / ax[only_x]) / la)
    return out


def mslae(x, xh, p) -> float:
    """Mean absolute difference of the signed-log transforms."""
    return float(np.mean(np.abs(slt_difference(x, xh, p))))


def mslae_grad(x, xh, p) -> np.ndarray:
    d = slt_difference(x, xh, p)
    return np.sign(d) * slt_derivative(xh, p) / d.size


# ---------------------------------------------------------------------------
# mu-law transform


def mu_law(x, p) -> np.ndarray:
    """Standard mu-law companding ``sign(x) ln(1 + mu |x|) / ln(1 + mu)``."""
    mu = _mu(p)
    x = np.asarray(x, dtype=float)
    return np.sign(x) * (np.log1p(mu * np.abs(x)) / math.log1p(mu))


def mu_law_shifted(x, p) -> np.ndarray:
    """Variant ``sign(x) ln((1 + mu |x|) / (1 + mu))`` that maps +-1 to 0."""
    mu = _mu(p)
    x = np.asarray(x, dtype=float)
    return np.sign(x) * (np.log1p(mu * np.abs(x)) - math.log1p(mu))


def mu_law_derivative(x, p) -> np.ndarray:
    mu = _mu(p)
    x = np.asarray(x, dtype=float)
    return mu / ((1 + mu * np.abs(x)) * math.log1p(mu))


def mmuae(x, xh, p, transform: str = "standard") -> float:
    """Mean absolute difference of mu-law transforms."""
    x, xh = _pair(x, xh)
    f = mu_law if transform == "standard" else mu_law_shifted
    return float(np.mean(np.abs(f(xh, p) - f(x, p))))


def mmuae_grad(x, xh, p) -> np.ndarray:
    x, xh = _pair(x, xh)
    d = mu_law(xh, p) - mu_law(x, p)
    return np.sign(d) * mu_law_derivative(xh, p) / d.size


# ---------------------------------------------------------------------------
# plain losses


def mse(x, xh) -> float:
    x, xh = _pair(x, xh)
    return float(np.mean((xh - x) ** 2))


def mse_grad(x, xh) -> np.ndarray:
    x, xh = _pair(x, xh)
    return 2 * (xh - x) / x.size


def mae(x, xh) -> float:
    x, xh = _pair(x, xh)
    return float(np.mean(np.abs(xh - x)))


def mae_grad(x, xh) -> np.ndarray:
    x, xh = _pair(x, xh)
    return np.sign(xh - x) / x.size


# ---------------------------------------------------------------------------
# selection by name


@dataclass(frozen=True)
class Loss:
    """Loss ``value(x, xh)`` with gradient ``grad(x, xh)`` w.r.t. the prediction."""

    name: str
    value: object
    grad: object
    params: dict


def make_loss(name: str, **params) -> Loss:
    """Loss by name: ``mse``, ``mae``, ``mslae`` (``alpha_db``) or ``mmuae`` (``mu``).

    A parameter may also be given inline, e.g. ``"mslae(-62)"`` or ``"mmuae(1000)"``.
    """
    m = re.fullmatch(r"\s*(\w+)\s*(?:\(\s*([-+0-9.eE]+)\s*\))?\s*", name)
    if not m:
        raise ValueError(f"cannot parse loss {name!r}")
    key, inline = m.group(1).lower(), m.group(2)
    if key == "mse":
        return Loss("mse", mse, mse_grad, {})
    if key == "mae":
        return Loss("mae", mae, mae_grad, {})
    if key == "mslae":
        adb = float(inline) if inline is not None else float(params.get("alpha_db", -62.0))
        p = SltParams.from_db(adb)
        return Loss("mslae", lambda x, xh: mslae(x, xh, p), lambda x, xh: mslae_grad(x, xh, p),
                    {"alpha_db": adb})
    if key == "mmuae":
        mu = float(inline) if inline is not None else float(params.get("mu", 10 ** (62 / 20)))
        p = MuParams(mu)
        return Loss("mmuae", lambda x, xh: mmuae(x, xh, p), lambda x, xh: mmuae_grad(x, xh, p),
                    {"mu": mu})
    raise ValueError(f"unknown loss {name!r}")
