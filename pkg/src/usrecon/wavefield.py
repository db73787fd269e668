"""Propagation delays and far-field diffraction weights.

Every function accepts a single point ``(3,)`` or an array of points
``(n, 3)`` and returns a scalar or an ``(n,)`` array accordingly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.optimize import brentq

from usrecon.core import ImagingConfig


@dataclass(frozen=True)
class Transmitter:
    """Either an unsteered/steered plane wave or a single firing element."""

    kind: str
    angle: float = 0.0
    index: Optional[int] = None

    def __post_init__(self):
        if self.kind == "PW":
            if not abs(self.angle) < math.pi / 2:
                raise ValueError("plane-wave angle must satisfy |angle| < pi/2")
        elif self.kind == "EL":
            if self.index is None or self.index < 0:
                raise ValueError("element transmitter needs a non-negative index")
        else:
            raise ValueError(f"unknown transmitter kind {self.kind!r}")

    @classmethod
    def plane_wave(cls, angle: float = 0.0) -> "Transmitter":
        return cls("PW", angle=angle)

    @classmethod
    def element(cls, index: int) -> "Transmitter":
        return cls("EL", index=int(index))

    def check(self, cfg: ImagingConfig):
        if self.kind == "EL" and self.index >= cfg.array.n_elements:
            raise ValueError(f"element {self.index} outside {cfg.array.n_elements}-element array")


def transmitters(cfg: ImagingConfig) -> list:
    """Transmit sequence of the configuration's scheme."""
    if cfg.scheme.kind == "PW":
        return [Transmitter.plane_wave(cfg.scheme.angle)]
    return [Transmitter.element(i) for i in range(cfg.array.n_elements)]


def _as_points(p):
    p = np.asarray(p, dtype=float)
    single = p.ndim == 1
    return np.atleast_2d(p), single


def _out(v, single):
    return float(v[0]) if single else v


def _element_geometry(j, pts, cfg):
    e = cfg.array.element_positions[j]
    dx = pts[:, 0] - e[0]
    dy = pts[:, 1] - e[1]
    dz = pts[:, 2] - e[2]
    r = np.sqrt(dx * dx + dy * dy + dz * dz)
    # angle to the element normal measured in the x-z plane
    rxz = np.sqrt(dx * dx + dz * dz)
    with np.errstate(invalid="ignore", divide="ignore"):
        sin_t = np.where(rxz > 0, dx / rxz, 0.0)
        cos_t = np.where(rxz > 0, dz / rxz, 1.0)
    return r, sin_t, cos_t


def tx_delay(tx: Transmitter, p, cfg: ImagingConfig):
    """Time for the transmitted wave to reach ``p``.

    Steered plane waves are referenced so that the earliest firing element
    fires at time zero.
    """
    pts, single = _as_points(p)
    c = cfg.speed_of_sound
    if tx.kind == "PW":
        s, co = math.sin(tx.angle), math.cos(tx.angle)
        ref = np.min(cfg.array.element_positions[:, 0] * s)
        d = (pts[:, 2] * co + pts[:, 0] * s - ref) / c
    else:
        tx.check(cfg)
        r, _, _ = _element_geometry(tx.index, pts, cfg)
        d = r / c
    return _out(d, single)


def rx_delay(j: int, p, cfg: ImagingConfig):
    """Time for the echo from ``p`` to reach element ``j``."""
    pts, single = _as_points(p)
    r, _, _ = _element_geometry(j, pts, cfg)
    return _out(r / cfg.speed_of_sound, single)


def directivity(sin_t, d_over_lambda):
    """Soft-baffle narrow-strip directivity ``sinc(d/lambda sin t) cos t`` (unit on axis)."""
    sin_t = np.asarray(sin_t, dtype=float)
    cos_t = np.sqrt(np.clip(1 - sin_t * sin_t, 0.0, None))
    return np.sinc(d_over_lambda * sin_t) * cos_t


def element_weight(j: int, p, cfg: ImagingConfig):
    """Far-field amplitude ``d sinc(d/lambda sin t) cos t / (2 pi sqrt(r))`` of element ``j``."""
    pts, single = _as_points(p)
    r, sin_t, cos_t = _element_geometry(j, pts, cfg)
    d = cfg.array.element_width
    lam = cfg.wavelength
    with np.errstate(divide="ignore"):
        w = d * np.sinc(d / lam * sin_t) * cos_t / (2 * np.pi * np.sqrt(r))
    return _out(w, single)


def tx_weight(tx: Transmitter, p, cfg: ImagingConfig):
    """Transmit amplitude: 1 for an ideal plane wave, the element weight otherwise."""
    if tx.kind == "PW":
        pts, single = _as_points(p)
        return _out(np.ones(pts.shape[0]), single)
    tx.check(cfg)
    return element_weight(tx.index, p, cfg)


def element_tables(cfg: ImagingConfig, pts: np.ndarray):
    """Per-element delays (s) and weights for many points, each ``(n_el, n_pts)``."""
    n = cfg.array.n_elements
    delays = np.empty((n, pts.shape[0]))
    weights = np.empty((n, pts.shape[0]))
    for j in range(n):
        delays[j] = rx_delay(j, pts, cfg)
        weights[j] = element_weight(j, pts, cfg)
    return delays, weights


def sensitivity_angle(cfg: ImagingConfig, level_db: float = -6.0, two_way: bool = True) -> float:
    """Angle (rad) at which the element sensitivity drops to ``level_db``.

    With ``two_way`` the level applies to the transmit-receive product.
    """
    dl = cfg.array.element_width / cfg.wavelength
    scale = 40.0 if two_way else 20.0

    def f(t):
        return scale * np.log10(directivity(math.sin(t), dl)) - level_db

    hi = math.pi / 2 - 1e-6
    if dl > 1:
        hi = min(hi, math.asin(1 / dl) - 1e-9)
    return brentq(f, 1e-9, hi, xtol=1e-14)
