"""Image-quality metrics and Rayleigh speckle statistics.

All metric functions take envelope images. RF or IQ images are converted with
:func:`usrecon.core.envelope` on the way in so callers can pass reconstructions
directly.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import RectBivariateSpline
from scipy.ndimage import gaussian_filter
from scipy.optimize import brentq, minimize

from usrecon.core import Image, ImageGrid, envelope

CLAMP_DB = -120.0
PSNR_CAP_DB = 200.0
DB_WINDOW = (-62.0, 36.0)
CSV_HEADER = ("metric", "region", "value", "units", "config", "seed")


# ---------------------------------------------------------------------------
# regions


@dataclass(frozen=True)
class Region:
    """Named x-z region.

    ``shape`` is ``rect`` with params ``(x0, x1, z0, z1)``, ``disk`` with
    ``(cx, cz, r)`` or ``ellipse`` with ``(cx, cz, a, b, angle)`` (semi-axes
    ``a`` along x before rotation). ``holes`` are subtracted.
    """

    name: str
    shape: str
    params: tuple
    echogenicity_db: float | None = None
    holes: tuple = ()

    def __post_init__(self):
        n = {"rect": 4, "disk": 3, "ellipse": 5}.get(self.shape)
        if n is None:
            raise ValueError(f"unknown region shape {self.shape!r}")
        p = tuple(float(v) for v in self.params)
        if len(p) != n:
            raise ValueError(f"{self.shape} region needs {n} parameters")
        if self.shape == "rect" and not (p[0] < p[1] and p[2] < p[3]):
            raise ValueError("rect bounds must be ordered")
        if self.shape == "disk" and p[2] <= 0:
            raise ValueError("disk radius must be positive")
        if self.shape == "ellipse" and (p[2] <= 0 or p[3] <= 0):
            raise ValueError("ellipse semi-axes must be positive")
        object.__setattr__(self, "params", p)
        object.__setattr__(self, "holes", tuple(self.holes))

    @classmethod
    def rect(cls, name, x0, x1, z0, z1, **kw):
        return cls(name, "rect", (x0, x1, z0, z1), **kw)

    @classmethod
    def disk(cls, name, cx, cz, r, **kw):
        return cls(name, "disk", (cx, cz, r), **kw)

    @classmethod
    def ellipse(cls, name, cx, cz, a, b, angle=0.0, **kw):
        return cls(name, "ellipse", (cx, cz, a, b, angle), **kw)

    def contains(self, x, z) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        z = np.asarray(z, dtype=float)
        p = self.params
        if self.shape == "rect":
            m = (x >= p[0]) & (x <= p[1]) & (z >= p[2]) & (z <= p[3])
        elif self.shape == "disk":
            m = (x - p[0]) ** 2 + (z - p[1]) ** 2 <= p[2] ** 2
        else:
            c, s = math.cos(p[4]), math.sin(p[4])
            u = (x - p[0]) * c + (z - p[1]) * s
            v = -(x - p[0]) * s + (z - p[1]) * c
            m = (u / p[2]) ** 2 + (v / p[3]) ** 2 <= 1.0
        for h in self.holes:
            m = m & ~h.contains(x, z)
        return m

    def mask(self, grid: ImageGrid) -> np.ndarray:
        """Boolean ``(n_x, n_z)`` mask of pixels whose centre lies inside."""
        xx, zz = np.meshgrid(grid.x_axis, grid.z_axis, indexing="ij")
        return self.contains(xx, zz)

    def bounds(self) -> tuple:
        p = self.params
        if self.shape == "rect":
            return p
        if self.shape == "disk":
            return (p[0] - p[2], p[0] + p[2], p[1] - p[2], p[1] + p[2])
        r = max(p[2], p[3])
        return (p[0] - r, p[0] + r, p[1] - r, p[1] + r)

    def to_dict(self) -> dict:
        return dict(name=self.name, shape=self.shape, params=list(self.params),
                    echogenicity_db=self.echogenicity_db,
                    holes=[h.to_dict() for h in self.holes])

    @classmethod
    def from_dict(cls, d) -> "Region":
        return cls(d["name"], d["shape"], tuple(d["params"]), d.get("echogenicity_db"),
                   tuple(cls.from_dict(h) for h in d.get("holes", [])))


def _env(img) -> np.ndarray:
    if isinstance(img, Image):
        if img.kind == "BMODE":
            raise ValueError("metric expects an envelope (or RF/IQ) image")
        return envelope(img).pixels if img.kind != "ENV" else img.pixels
    return np.abs(np.asarray(img))


def _values(img: Image, r: Region) -> np.ndarray:
    m = r.mask(img.grid)
    if not m.any():
        raise ValueError(f"region {r.name!r} covers no pixel of the grid")
    return _env(img)[m]


# ---------------------------------------------------------------------------
# report


@dataclass
class MetricsReport:
    """Named scalar metrics with the region they were measured in."""

    config_id: str = ""
    seed: int | None = None
    entries: list = field(default_factory=list)

    def add(self, metric: str, region: str, value: float, units: str = ""):
        for m, r, _, _ in self.entries:
            if m == metric and r == region:
                raise ValueError(f"duplicate metric {metric!r} for region {region!r}")
        self.entries.append((metric, region, float(value), units))

    def get(self, metric: str, region: str = "") -> float:
        for m, r, v, _ in self.entries:
            if m == metric and r == region:
                return v
        raise KeyError((metric, region))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        seed = "" if self.seed is None else str(self.seed)
        for m, r, v, u in self.entries:
            w.writerow((m, r, format_value(v), u, self.config_id, seed))
        return buf.getvalue()

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            f.write(self.to_csv())

    @classmethod
    def from_csv(cls, text: str) -> "MetricsReport":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or tuple(rows[0]) != CSV_HEADER:
            raise ValueError("not a metrics CSV")
        rep = cls()
        for m, r, v, u, c, s in rows[1:]:
            rep.config_id = c
            rep.seed = int(s) if s else None
            rep.entries.append((m, r, float(v), u))
        return rep


def format_value(v: float) -> str:
    """Fixed textual form so CSV files are byte-stable."""
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return f"{v:.10g}"


# ---------------------------------------------------------------------------
# Rayleigh statistics


def rayleigh_pdf(x, sigma=1.0):
    x = np.asarray(x, dtype=float)
    return np.where(x >= 0, x / sigma ** 2 * np.exp(-x * x / (2 * sigma ** 2)), 0.0)


def rayleigh_cdf(x, sigma=1.0):
    x = np.asarray(x, dtype=float)
    return np.where(x >= 0, 1 - np.exp(-x * x / (2 * sigma ** 2)), 0.0)


def rayleigh_quantile(p, sigma=1.0):
    p = np.asarray(p, dtype=float)
    if np.any((p < 0) | (p >= 1)):
        raise ValueError("probability must lie in [0, 1)")
    return sigma * np.sqrt(-2 * np.log1p(-p))


def rayleigh_mean(sigma=1.0) -> float:
    return sigma * math.sqrt(math.pi / 2)


def rayleigh_var(sigma=1.0) -> float:
    return (4 - math.pi) / 2 * sigma ** 2


def rayleigh_snr() -> float:
    """Mean over standard deviation of a Rayleigh variable, ``sqrt(pi / (4 - pi))``."""
    return math.sqrt(math.pi / (4 - math.pi))


def rayleigh_confidence_bounds(level: float) -> tuple:
    """Symmetric-probability interval of a Rayleigh envelope, in dB re its mean."""
    if not 0 <= level < 1:
        raise ValueError("confidence level must lie in [0, 1)")
    k = math.sqrt(2 / math.pi)
    lo = k * math.sqrt(-2 * math.log((1 + level) / 2))
    hi = k * math.sqrt(-2 * math.log((1 - level) / 2))
    return 20 * math.log10(lo), 20 * math.log10(hi)


# ---------------------------------------------------------------------------
# region metrics


def contrast_ratio(img: Image, r1: Region, r2: Region, intensity: bool = False) -> float:
    """Mean-amplitude ratio of two regions in dB (or second-moment ratio if ``intensity``)."""
    m1, m2 = r1.mask(img.grid), r2.mask(img.grid)
    if np.any(m1 & m2):
        raise ValueError("contrast regions overlap")
    a, b = _values(img, r1), _values(img, r2)
    if intensity:
        den = np.mean(b * b)
        if den == 0:
            raise ZeroDivisionError(f"region {r2.name!r} has zero mean intensity")
        return 10 * math.log10(np.mean(a * a) / den)
    den = np.mean(b)
    if den == 0:
        raise ZeroDivisionError(f"region {r2.name!r} has zero mean amplitude")
    return 20 * math.log10(np.mean(a) / den)


def speckle_snr(img: Image, r: Region, min_pixels: int = 100) -> float:
    """Mean over population standard deviation of the envelope in ``r``."""
    v = _values(img, r)
    if v.size < min_pixels:
        raise ValueError(f"region {r.name!r} has {v.size} pixels, need {min_pixels}")
    s = np.std(v)
    if s == 0:
        raise ZeroDivisionError(f"constant envelope in region {r.name!r}")
    return float(np.mean(v) / s)


def artifact_level(img: Image, r: Region, ref: float = 1.0) -> float:
    """Mean envelope in ``r`` in dB re ``ref``, clamped at -120 dB."""
    m = float(np.mean(_values(img, r)))
    if m <= 0:
        return CLAMP_DB
    return max(CLAMP_DB, 20 * math.log10(m / ref))


def _sub_image(img: Image, r: Region):
    if r.shape != "rect" or r.holes:
        raise ValueError("a rectangular region is required")
    m = r.mask(img.grid)
    ix = np.nonzero(m.any(axis=1))[0]
    iz = np.nonzero(m.any(axis=0))[0]
    if ix.size == 0:
        raise ValueError(f"region {r.name!r} covers no pixel of the grid")
    return _env(img)[ix[0]:ix[-1] + 1, iz[0]:iz[-1] + 1]


def _half_width(profile, centre):
    """Lag (fractional samples) where a decreasing profile first drops to 0.5."""
    for k in range(centre + 1, profile.size):
        if profile[k] <= 0.5:
            a, b = profile[k - 1], profile[k]
            return (k - 1 - centre) + (a - 0.5) / (a - b)
    raise ValueError("correlation lobe wider than the region")


def autocorrelation(a: np.ndarray) -> np.ndarray:
    """Mean-subtracted 2-D autocorrelation normalised to 1 at zero lag (lag 0 centred)."""
    a = a - a.mean()
    nx, nz = a.shape
    f = np.fft.rfft2(a, s=(2 * nx, 2 * nz))
    r = np.fft.irfft2(f * np.conj(f), s=(2 * nx, 2 * nz))
    r = np.fft.fftshift(r)
    r0 = r[nx, nz]
    if r0 <= 0:
        raise ZeroDivisionError("constant region has no autocorrelation")
    return r / r0


def acf_fwhm(img: Image, r: Region) -> tuple:
    """Lateral and axial FWHM (m) of the envelope autocorrelation in ``r``."""
    a = _sub_image(img, r)
    acf = autocorrelation(a)
    cx, cz = a.shape
    dx, dz = img.grid.spacing
    lat = _half_width(acf[cx:, cz], 0) + _half_width(acf[cx::-1, cz], 0)
    ax = _half_width(acf[cx, cz:], 0) + _half_width(acf[cx, cz::-1], 0)
    return lat * dx, ax * dz


def point_fwhm(img: Image, center, window: float) -> tuple:
    """Lateral and axial FWHM (m) of a bright point inside a square window.

    The envelope is interpolated with a bicubic spline, the peak is refined
    to sub-pixel precision, and half-maximum crossings are located along the
    two axes through the refined peak.
    """
    env = _env(img)
    g = img.grid
    cx, cz = center
    h = window / 2
    ix = np.nonzero(np.abs(g.x_axis - cx) <= h + 1e-12)[0]
    iz = np.nonzero(np.abs(g.z_axis - cz) <= h + 1e-12)[0]
    if ix.size < 4 or iz.size < 4:
        raise ValueError("window must span at least 4 pixels per axis")
    xs, zs = g.x_axis[ix], g.z_axis[iz]
    patch = env[ix[0]:ix[-1] + 1, iz[0]:iz[-1] + 1]
    spl = RectBivariateSpline(xs, zs, patch, kx=3, ky=3)
    i, j = np.unravel_index(np.argmax(patch), patch.shape)
    x_lo, x_hi, z_lo, z_hi = xs[0], xs[-1], zs[0], zs[-1]
    sx = (x_hi - x_lo) or 1.0
    sz = (z_hi - z_lo) or 1.0

    def neg(v):
        return -spl(x_lo + v[0] * sx, z_lo + v[1] * sz, grid=False)

    v0 = np.array([(xs[i] - x_lo) / sx, (zs[j] - z_lo) / sz])
    res = minimize(neg, v0, method="L-BFGS-B", bounds=[(0, 1), (0, 1)])
    px, pz = x_lo + res.x[0] * sx, z_lo + res.x[1] * sz
    peak = -float(res.fun)
    if peak < patch[i, j]:
        px, pz, peak = xs[i], zs[j], float(patch[i, j])
    half = peak / 2

    def width(f, lo, hi, p0):
        def side(end):
            n = 512
            t = np.linspace(p0, end, n)
            v = f(t) - half
            k = np.nonzero(v <= 0)[0]
            if k.size == 0:
                raise ValueError("no half-maximum crossing inside the window")
            k = k[0]
            return brentq(lambda s: float(f(np.array([s]))[0] - half), t[k - 1], t[k])
        return abs(side(hi) - side(lo))

    lat = width(lambda t: spl(t, np.full_like(t, pz), grid=False), x_lo, x_hi, px)
    ax = width(lambda t: spl(np.full_like(t, px), t, grid=False), z_lo, z_hi, pz)
    return lat, ax


def peak_position(img: Image, center, window: float) -> tuple:
    """Sub-pixel peak position of the envelope inside a square window."""
    env = _env(img)
    g = img.grid
    h = window / 2
    ix = np.nonzero(np.abs(g.x_axis - center[0]) <= h + 1e-12)[0]
    iz = np.nonzero(np.abs(g.z_axis - center[1]) <= h + 1e-12)[0]
    xs, zs = g.x_axis[ix], g.z_axis[iz]
    patch = env[ix[0]:ix[-1] + 1, iz[0]:iz[-1] + 1]
    spl = RectBivariateSpline(xs, zs, patch, kx=3, ky=3)
    i, j = np.unravel_index(np.argmax(patch), patch.shape)
    res = minimize(lambda v: -spl(v[0], v[1], grid=False), [xs[i], zs[j]], method="L-BFGS-B",
                   bounds=[(xs[0], xs[-1]), (zs[0], zs[-1])])
    return float(res.x[0]), float(res.x[1])


def gradient_profile(img: Image, r: Region, ref: float = 1.0) -> tuple:
    """Lateral positions and depth-averaged envelope (dB re ``ref``) per column of ``r``."""
    if r.shape != "rect" or r.holes:
        raise ValueError("a rectangular region is required")
    m = r.mask(img.grid)
    cols = np.nonzero(m.any(axis=1))[0]
    if cols.size == 0:
        raise ValueError(f"region {r.name!r} covers no pixel of the grid")
    env = _env(img)
    means = np.array([env[c][m[c]].mean() for c in cols])
    with np.errstate(divide="ignore"):
        db = np.maximum(20 * np.log10(means / ref), CLAMP_DB)
    return img.grid.x_axis[cols], db


def profile_slope(x, db) -> float:
    """Least-squares slope of a dB profile, in dB per metre."""
    x = np.asarray(x, dtype=float)
    db = np.asarray(db, dtype=float)
    if x.size < 2:
        raise ValueError("need at least two columns")
    return float(np.polyfit(x, db, 1)[0])


# ---------------------------------------------------------------------------
# global image metrics


def to_db(img: Image, ref: float = 1.0) -> np.ndarray:
    """Unclipped log-compressed envelope, clamped at -120 dB."""
    if isinstance(img, Image) and img.kind == "BMODE":
        return img.pixels
    env = _env(img)
    with np.errstate(divide="ignore"):
        return np.maximum(20 * np.log10(env / ref), CLAMP_DB)


def window_map(db: np.ndarray, window=DB_WINDOW) -> np.ndarray:
    """Clip dB values to ``window`` and map affinely onto [0, 1]."""
    lo, hi = window
    return (np.clip(db, lo, hi) - lo) / (hi - lo)


def _prepare(a, b, window):
    da = to_db(a) if isinstance(a, Image) else np.asarray(a, dtype=float)
    db = to_db(b) if isinstance(b, Image) else np.asarray(b, dtype=float)
    if da.shape != db.shape:
        raise ValueError(f"shape mismatch {da.shape} vs {db.shape}")
    return window_map(da, window), window_map(db, window)


def psnr(a, b, window=DB_WINDOW) -> float:
    """PSNR (dB) of two log-compressed images mapped to [0, 1]; capped at 200 dB."""
    x, y = _prepare(a, b, window)
    mse = float(np.mean((x - y) ** 2))
    if mse == 0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10 * math.log10(1.0 / mse))


def ssim(a, b, window=DB_WINDOW, sigma=1.5, size=11, k1=0.01, k2=0.03) -> float:
    """Mean structural similarity with an 11x11 Gaussian window on [0, 1] images."""
    x, y = _prepare(a, b, window)
    r = size // 2
    if min(x.shape) < size:
        raise ValueError(f"images must be at least {size} pixels per axis")
    c1, c2 = k1 ** 2, k2 ** 2

    def filt(v):
        return gaussian_filter(v, sigma, truncate=r / sigma, mode="constant")[r:-r, r:-r]

    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx * mx
    syy = filt(y * y) - my * my
    sxy = filt(x * y) - mx * my
    s = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
    return float(np.mean(s))
