"""Domain types, imaging presets and image-representation transforms.

Conventions used throughout the package:

* coordinates are ``(x, y, z)`` in metres: ``x`` lateral (array axis),
  ``y`` elevation, ``z`` depth (positive into the medium);
* image pixel arrays are indexed ``[x, z]`` so that a 596 x 1600 image has 596
  lateral columns and 1600 depth samples;
* raw data arrays are indexed ``[transmit, element, time]``.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.signal import hilbert

KINDS = ("RF", "IQ", "ENV", "BMODE")

# Nominal values of the 9L-D linear array setups.
_NOMINAL = dict(
    center_frequency=5.3e6,
    fractional_bandwidth=0.75,
    element_width=207e-6,
    element_height=6e-3,
    elevation_focus=28e-3,
    transmit_frequency=5.208e6,
    sampling_frequency=20.833e6,
    speed_of_sound=1540.0,
    time_span=(0.0, 96.58e-6),
)
FULL_APERTURE = 43.93e-3
FULL_GRID_SHAPE = (596, 1600)

# Desk presets keep the physical aperture (mm) and every pitch/wavelength
# ratio, but divide all frequencies by DESK_SCALE so that the low-quality
# array needs 32 elements instead of 192.
DESK_SCALE = FULL_APERTURE / 31 / 230e-6


def _readonly(a, dtype=None) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class TransducerArray:
    """Linear array of identical rectangular elements.

    ``element_width`` may exceed ``pitch`` for virtual (simulation-only)
    arrays such as the spatially over-sampled UQ configuration.
    """

    element_positions: np.ndarray
    pitch: float
    element_width: float
    element_height: float
    center_frequency: float
    fractional_bandwidth: float
    elevation_focus: float

    def __post_init__(self):
        pos = _readonly(self.element_positions, float)
        if pos.ndim != 2 or pos.shape[1] != 3 or pos.shape[0] < 1:
            raise ValueError("element_positions must be an (n, 3) array")
        object.__setattr__(self, "element_positions", pos)
        if self.pitch <= 0 or self.element_width <= 0:
            raise ValueError("pitch and element width must be positive")
        if np.any(np.abs(pos[:, 1:]) > 1e-12):
            raise ValueError("elements must lie on the lateral axis (y = z = 0)")
        if pos.shape[0] > 1:
            steps = np.diff(pos[:, 0])
            if not np.allclose(steps, self.pitch, rtol=1e-9, atol=1e-12):
                raise ValueError("elements must be equally spaced by the pitch")

    @classmethod
    def linear(cls, n_elements, pitch, element_width, element_height=6e-3,
               center_frequency=5.3e6, fractional_bandwidth=0.75,
               elevation_focus=28e-3) -> "TransducerArray":
        """Array centred on the origin."""
        x = (np.arange(n_elements) - (n_elements - 1) / 2) * pitch
        pos = np.zeros((n_elements, 3))
        pos[:, 0] = x
        return cls(pos, pitch, element_width, element_height, center_frequency,
                   fractional_bandwidth, elevation_focus)

    @property
    def n_elements(self) -> int:
        return self.element_positions.shape[0]

    @property
    def aperture(self) -> float:
        """Centre-to-centre span of the outer elements."""
        return (self.n_elements - 1) * self.pitch

    def to_dict(self) -> dict:
        return dict(
            n_elements=self.n_elements,
            x_first=float(self.element_positions[0, 0]),
            x_positions=self.element_positions[:, 0].tolist(),
            pitch=self.pitch,
            element_width=self.element_width,
            element_height=self.element_height,
            center_frequency=self.center_frequency,
            fractional_bandwidth=self.fractional_bandwidth,
            elevation_focus=self.elevation_focus,
        )

    @classmethod
    def from_dict(cls, d: dict) -> "TransducerArray":
        n = int(d["n_elements"])
        pos = np.zeros((n, 3))
        if "x_positions" in d:
            pos[:, 0] = d["x_positions"]
        else:
            pos[:, 0] = d["x_first"] + np.arange(n) * d["pitch"]
        return cls(pos, d["pitch"], d["element_width"], d["element_height"],
                   d["center_frequency"], d["fractional_bandwidth"], d["elevation_focus"])

    def __eq__(self, other):
        if not isinstance(other, TransducerArray):
            return NotImplemented
        return self.to_dict() == other.to_dict() and np.array_equal(
            self.element_positions, other.element_positions)

    __hash__ = None


@dataclass(frozen=True)
class Scheme:
    """Transmit-receive scheme: one plane wave (``PW``) or synthetic aperture (``SA``)."""

    kind: str
    angle: float = 0.0

    def __post_init__(self):
        if self.kind not in ("PW", "SA"):
            raise ValueError(f"unknown scheme {self.kind!r}")
        if not abs(self.angle) < math.pi / 2:
            raise ValueError("plane-wave angle must satisfy |angle| < pi/2")


@dataclass(frozen=True)
class ImagingConfig:
    array: TransducerArray
    scheme: Scheme
    transmit_frequency: float
    sampling_frequency: float
    speed_of_sound: float
    time_span: tuple
    preset_name: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "time_span", tuple(float(t) for t in self.time_span))
        if self.transmit_frequency <= 0 or self.speed_of_sound <= 0:
            raise ValueError("transmit frequency and speed of sound must be positive")
        if self.time_span[1] <= self.time_span[0]:
            raise ValueError("time span must be increasing")
        upper = 2 * self.transmit_frequency * (1 + self.array.fractional_bandwidth / 2)
        if self.sampling_frequency < upper:
            warnings.warn(
                f"sampling frequency {self.sampling_frequency:.4g} Hz is below "
                f"{upper:.4g} Hz; echoes will alias", stacklevel=2)

    @property
    def wavelength(self) -> float:
        return self.speed_of_sound / self.transmit_frequency

    @property
    def n_samples(self) -> int:
        t0, t1 = self.time_span
        # tolerance guards against ceil(2012.0000000001)
        return int(math.ceil((t1 - t0) * self.sampling_frequency - 1e-9))

    @property
    def time_axis(self) -> np.ndarray:
        return self.time_span[0] + np.arange(self.n_samples) / self.sampling_frequency

    @property
    def n_transmits(self) -> int:
        return 1 if self.scheme.kind == "PW" else self.array.n_elements

    def to_dict(self) -> dict:
        return dict(
            preset_name=self.preset_name,
            array=self.array.to_dict(),
            scheme=dict(kind=self.scheme.kind, angle=self.scheme.angle),
            transmit_frequency=self.transmit_frequency,
            sampling_frequency=self.sampling_frequency,
            speed_of_sound=self.speed_of_sound,
            time_span=list(self.time_span),
        )

    @classmethod
    def from_dict(cls, d: dict) -> "ImagingConfig":
        return cls(
            array=TransducerArray.from_dict(d["array"]),
            scheme=Scheme(**d["scheme"]),
            transmit_frequency=d["transmit_frequency"],
            sampling_frequency=d["sampling_frequency"],
            speed_of_sound=d["speed_of_sound"],
            time_span=tuple(d["time_span"]),
            preset_name=d.get("preset_name", "custom"),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ImagingConfig":
        return cls.from_dict(json.loads(text))


PRESETS = ("LQ", "HQ", "UQ", "desk-lq", "desk-hq", "desk-uq")


def make_preset_config(name: str) -> ImagingConfig:
    """Imaging configuration by name.

    ``LQ``/``HQ``/``UQ`` are the 9L-D linear array setups (single plane wave,
    192-element SA, 383-element over-sampled SA). The ``desk-*`` variants use
    the same aperture and pitch-to-wavelength ratios with 32 / 63 elements and
    all frequencies divided by :data:`DESK_SCALE`.
    """
    base = name.upper().replace("DESK-", "")
    if base not in ("LQ", "HQ", "UQ") or name.lower() not in {p.lower() for p in PRESETS}:
        raise ValueError(f"unknown preset {name!r}; expected one of {PRESETS}")
    desk = name.lower().startswith("desk-")
    k = DESK_SCALE if desk else 1.0
    n_lq = 32 if desk else 192
    pitch_lq = FULL_APERTURE / (n_lq - 1)
    if base == "UQ":
        n, pitch = 2 * n_lq - 1, pitch_lq / 2
    else:
        n, pitch = n_lq, pitch_lq
    if not desk:
        # keep the nominal pitch exactly (aperture/(n-1) rounds differently)
        pitch = 230e-6 if base != "UQ" else 115e-6
    p = _NOMINAL
    array = TransducerArray.linear(
        n, pitch, p["element_width"] * k, p["element_height"] * k,
        p["center_frequency"] / k, p["fractional_bandwidth"], p["elevation_focus"])
    scheme = Scheme("PW", 0.0) if base == "LQ" else Scheme("SA")
    return ImagingConfig(
        array=array,
        scheme=scheme,
        transmit_frequency=p["transmit_frequency"] / k,
        sampling_frequency=p["sampling_frequency"] / k,
        speed_of_sound=p["speed_of_sound"],
        time_span=p["time_span"],
        preset_name=name.lower() if desk else base,
    )


@dataclass(frozen=True)
class ImageGrid:
    """Cartesian pixel grid in the x-z plane (y = 0)."""

    x_axis: np.ndarray
    z_axis: np.ndarray

    def __post_init__(self):
        x = _readonly(self.x_axis, float)
        z = _readonly(self.z_axis, float)
        for name, a in (("x", x), ("z", z)):
            if a.ndim != 1 or a.size < 1:
                raise ValueError(f"{name} axis must be a non-empty 1-D array")
            if a.size > 1:
                d = np.diff(a)
                if np.any(d <= 0) or not np.allclose(d, d[0], rtol=1e-6):
                    raise ValueError(f"{name} axis must be uniformly increasing")
        if np.any(z <= 0):
            raise ValueError("all depths must be positive")
        object.__setattr__(self, "x_axis", x)
        object.__setattr__(self, "z_axis", z)

    @property
    def shape(self) -> tuple:
        return (self.x_axis.size, self.z_axis.size)

    @property
    def spacing(self) -> tuple:
        dx = float(self.x_axis[1] - self.x_axis[0]) if self.x_axis.size > 1 else 0.0
        dz = float(self.z_axis[1] - self.z_axis[0]) if self.z_axis.size > 1 else 0.0
        return dx, dz

    def points(self) -> np.ndarray:
        """Pixel centres as an ``(n_x * n_z, 3)`` array, x-major order."""
        xx, zz = np.meshgrid(self.x_axis, self.z_axis, indexing="ij")
        return np.stack([xx.ravel(), np.zeros(xx.size), zz.ravel()], axis=1)

    def index_of(self, x: float, z: float) -> tuple:
        return (int(np.argmin(np.abs(self.x_axis - x))),
                int(np.argmin(np.abs(self.z_axis - z))))

    def to_dict(self) -> dict:
        return dict(x_axis=self.x_axis.tolist(), z_axis=self.z_axis.tolist())

    @classmethod
    def from_dict(cls, d: dict) -> "ImageGrid":
        return cls(np.asarray(d["x_axis"]), np.asarray(d["z_axis"]))

    def __eq__(self, other):
        if not isinstance(other, ImageGrid):
            return NotImplemented
        return (self.shape == other.shape and np.allclose(self.x_axis, other.x_axis)
                and np.allclose(self.z_axis, other.z_axis))

    __hash__ = None


def make_grid(cfg: ImagingConfig, x_range=None, z_range=(1e-3, 60e-3),
              spacing=None, shape=None) -> ImageGrid:
    """Grid with (lambda/4, lambda/8) default spacing.

    ``x_range`` defaults to the array aperture. Lateral samples are centred on
    the range, depth samples start at ``z_range[0]``. ``shape`` forces the
    number of samples per axis (e.g. :data:`FULL_GRID_SHAPE`).
    """
    lam = cfg.wavelength
    dx, dz = spacing if spacing is not None else (lam / 4, lam / 8)
    if x_range is None:
        xs = cfg.array.element_positions[:, 0]
        x_range = (xs.min(), xs.max())
    if shape is None:
        nx = int(math.ceil((x_range[1] - x_range[0]) / dx - 1e-9)) + 1
        nz = int(math.ceil((z_range[1] - z_range[0]) / dz - 1e-9)) + 1
    else:
        nx, nz = shape
    xc = 0.5 * (x_range[0] + x_range[1])
    x = xc + (np.arange(nx) - (nx - 1) / 2) * dx
    z = z_range[0] + np.arange(nz) * dz
    return ImageGrid(x, z)


@dataclass(frozen=True)
class RawData:
    """Sampled echo signals, ``samples[transmit, element, time]``."""

    samples: np.ndarray
    t0: float
    fs: float
    config_id: str = ""

    def __post_init__(self):
        s = _readonly(self.samples)
        if s.ndim != 3:
            raise ValueError("raw samples must be [transmit, element, time]")
        if not np.all(np.isfinite(s)):
            raise ValueError("raw samples must be finite")
        object.__setattr__(self, "samples", s)

    @property
    def time_axis(self) -> np.ndarray:
        return self.t0 + np.arange(self.samples.shape[-1]) / self.fs

    def check_matches(self, cfg: ImagingConfig):
        n_tx, n_el, n_t = self.samples.shape
        if (n_el != cfg.array.n_elements or n_t != cfg.n_samples
                or not math.isclose(self.fs, cfg.sampling_frequency, rel_tol=1e-9)
                or not math.isclose(self.t0, cfg.time_span[0], abs_tol=1e-15)):
            raise ValueError(
                f"raw data {self.samples.shape} @ {self.fs:.6g} Hz does not match "
                f"config {cfg.preset_name} ({cfg.array.n_elements} elements, "
                f"{cfg.n_samples} samples @ {cfg.sampling_frequency:.6g} Hz)")


@dataclass(frozen=True)
class Image:
    """Pixel image on a grid in one of the RF / IQ / ENV / BMODE representations."""

    grid: ImageGrid
    kind: str
    pixels: np.ndarray
    range_db: Optional[float] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown image kind {self.kind!r}")
        px = np.asarray(self.pixels)
        if px.shape != self.grid.shape:
            raise ValueError(f"pixels {px.shape} do not match grid {self.grid.shape}")
        if self.kind == "IQ":
            px = px.astype(complex)
        else:
            if np.iscomplexobj(px):
                raise ValueError(f"{self.kind} pixels must be real")
            px = px.astype(float)
        if self.kind == "ENV" and np.any(px < 0):
            raise ValueError("envelope pixels must be non-negative")
        if self.kind == "BMODE":
            if self.range_db is None or self.range_db <= 0:
                raise ValueError("B-mode images need a positive range_db")
            if np.any(px > 0) or np.any(px < -self.range_db):
                raise ValueError("B-mode pixels must lie in [-range_db, 0]")
        object.__setattr__(self, "pixels", _readonly(px))

    def with_pixels(self, pixels, kind=None) -> "Image":
        return Image(self.grid, kind or self.kind, pixels, self.range_db)


@dataclass(frozen=True)
class PulseEchoWaveform:
    """Sampled pulse-echo waveform; sample ``k`` sits at time ``t0 + k / fs``.

    Time zero is the peak of the waveform's envelope.
    """

    samples: np.ndarray
    fs: float
    t0: float
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        s = _readonly(self.samples, float)
        if s.ndim != 1 or not np.all(np.isfinite(s)):
            raise ValueError("waveform samples must be a finite 1-D array")
        object.__setattr__(self, "samples", s)

    @property
    def time_axis(self) -> np.ndarray:
        return self.t0 + np.arange(self.samples.size) / self.fs

    @property
    def offset(self) -> int:
        """Index of the sample at (or nearest to) time zero."""
        return int(round(-self.t0 * self.fs))

    @classmethod
    def dirac(cls, fs: float) -> "PulseEchoWaveform":
        return cls(np.ones(1), fs, 0.0, {"kind": "dirac"})


def _lognormal_pulse(t, fc, t_peak, s):
    """Time derivative of a log-normal windowed sine (zero for t <= 0)."""
    out = np.zeros_like(t)
    m = t > 0
    tm = t[m]
    lr = np.log(tm / t_peak)
    w = np.exp(-lr ** 2 / (2 * s ** 2))
    dw = -w * lr / (s ** 2 * tm)
    ph = 2 * np.pi * fc * (tm - t_peak)
    out[m] = dw * np.sin(ph) + w * 2 * np.pi * fc * np.cos(ph)
    return out


def _support(fc, s, t_peak, floor=1e-7):
    # window exp(-ln(t/tp)^2 / 2s^2) falls below `floor` outside tp*exp(+-k*s)
    k = math.sqrt(-2 * math.log(floor))
    return t_peak * math.exp(-k * s), t_peak * math.exp(k * s)


def fractional_bandwidth(samples, fs, fc, level_db=-6.0, n_fft=1 << 16) -> float:
    """Width of the spectral magnitude above ``level_db`` (re peak), divided by ``fc``."""
    spec = np.abs(np.fft.rfft(samples, n=max(n_fft, 4 * samples.size)))
    f = np.fft.rfftfreq(max(n_fft, 4 * samples.size), 1 / fs)
    spec = spec / spec.max()
    thr = 10 ** (level_db / 20)
    k = int(np.argmax(spec))
    lo = k
    while lo > 0 and spec[lo] >= thr:
        lo -= 1
    hi = k
    while hi < spec.size - 1 and spec[hi] >= thr:
        hi += 1
    if spec[lo] >= thr or spec[hi] >= thr:
        raise ValueError("-6 dB band is not contained below Nyquist")

    def cross(i, j):
        return f[i] + (thr - spec[i]) * (f[j] - f[i]) / (spec[j] - spec[i])

    return (cross(hi - 1, hi) - cross(lo, lo + 1)) / fc


def make_pulse_echo_waveform(fc: float, bw_frac: float, fs: float,
                             tol: float = 1e-3) -> PulseEchoWaveform:
    """Differentiated log-normal-windowed sine with a prescribed -6 dB bandwidth.

    The window is ``exp(-ln(t / t_peak)^2 / (2 s^2))`` with ``t_peak = 1 / fc``;
    ``s`` is found by bisection so that the -6 dB spectral width equals
    ``bw_frac * fc``. Samples are peak-normalised.
    """
    if fc <= 0 or not 0 < bw_frac < 2 or fs <= 2 * fc:
        raise ValueError("need fc > 0, 0 < bw_frac < 2 and fs > 2 fc")
    t_peak = 1.0 / fc
    over = 16

    def sampled(s, rate):
        a, b = _support(fc, s, t_peak)
        t = np.arange(a, b, 1 / rate)
        return _lognormal_pulse(t, fc, t_peak, s)

    def bw_of(s):
        try:
            return fractional_bandwidth(sampled(s, fs), fs, fc)
        except ValueError:
            # band spills past Nyquist or DC: wider than anything measurable
            return math.inf

    lo, hi = 0.02, 1.5
    b_lo, b_hi = bw_of(lo), bw_of(hi)
    if not b_hi < bw_frac < b_lo:
        raise ValueError(f"bandwidth {bw_frac} unmeetable at fs={fs:g} Hz "
                         f"(reachable range {b_hi:.3f}..{b_lo:.3f})")
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if bw_of(mid) > bw_frac:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-10:
            break
    s = 0.5 * (lo + hi)
    achieved = bw_of(s)
    if not abs(achieved - bw_frac) <= 0.05 * bw_frac:
        raise ValueError(f"bandwidth {bw_frac} unmeetable at fs={fs:g} Hz")

    # locate the envelope peak on a finely sampled copy
    a, b = _support(fc, s, t_peak)
    tf = np.arange(a, b, 1 / (fs * over))
    env = np.abs(hilbert(_lognormal_pulse(tf, fc, t_peak, s)))
    t_ref = tf[int(np.argmax(env))]
    n_pre = int(math.ceil((t_ref - a) * fs))
    n_post = int(math.ceil((b - t_ref) * fs))
    k = np.arange(-n_pre, n_post + 1)
    x = _lognormal_pulse(t_ref + k / fs, fc, t_peak, s)
    x = x / np.max(np.abs(x))
    return PulseEchoWaveform(x, fs, -n_pre / fs,
                             {"fc": fc, "bw_frac": bw_frac, "shape": s,
                              "t_peak": t_peak, "achieved_bw": achieved})


def rf_to_iq(img: Image) -> Image:
    """Analytic image via the FFT Hilbert transform along depth.

    The real part is the input RF image exactly.
    """
    if img.kind != "RF":
        raise ValueError(f"rf_to_iq expects an RF image, got {img.kind}")
    rf = img.pixels
    iq = rf + 1j * np.imag(hilbert(rf, axis=1))
    return Image(img.grid, "IQ", iq)


def envelope(img: Image) -> Image:
    if img.kind == "RF":
        img = rf_to_iq(img)
    if img.kind != "IQ":
        raise ValueError(f"envelope expects an RF or IQ image, got {img.kind}")
    return Image(img.grid, "ENV", np.abs(img.pixels))


def bmode(img: Image, range_db: float, ref: Optional[float] = None) -> Image:
    """Log-compressed envelope ``20 log10(env / ref)`` clipped to ``[-range_db, 0]``."""
    if range_db <= 0:
        raise ValueError("range_db must be positive")
    if img.kind != "ENV":
        raise ValueError(f"bmode expects an ENV image, got {img.kind}")
    env = img.pixels
    if ref is None:
        ref = float(env.max())
    if ref <= 0:
        raise ValueError("reference amplitude must be positive")
    with np.errstate(divide="ignore"):
        db = 20 * np.log10(env / ref)
    return Image(img.grid, "BMODE", np.clip(db, -range_db, 0.0), range_db)


def apply_tgc(raw: RawData, alpha_db_per_cm_mhz: float, cfg: ImagingConfig) -> RawData:
    """Time-gain compensation for a mean attenuation in dB/(cm MHz).

    The gain at time ``t`` is ``alpha * f_tx[MHz] * depth[cm]`` dB with
    ``depth = c t / 2``.
    """
    if alpha_db_per_cm_mhz < 0:
        raise ValueError("attenuation must be non-negative")
    depth_cm = cfg.speed_of_sound * raw.time_axis / 2 * 100
    gain_db = alpha_db_per_cm_mhz * cfg.transmit_frequency / 1e6 * depth_cm
    gain = 10 ** (gain_db / 20)
    return RawData(raw.samples * gain, raw.t0, raw.fs, raw.config_id)
