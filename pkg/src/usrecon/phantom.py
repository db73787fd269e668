"""Point-scatterer phantoms: random speckle media, ellipsoidal zones and the test phantom.

Random draws use ``numpy.random.Generator(numpy.random.Philox(seed))``. Philox
is a counter-based generator with a documented algorithm, so a seed identifies
a phantom byte-for-byte across platforms.
"""

from __future__ import annotations

import dataclasses
import functools
import math
from dataclasses import dataclass

import numpy as np

from usrecon.core import ImagingConfig, FULL_APERTURE, make_preset_config
from usrecon.metrics import Region

# elevation FWHM of a focused strip aperture, in units of lambda * F
ELEVATION_FWHM_FACTOR = 0.886
CLAMP_DB = -120.0


def make_rng(seed) -> np.random.Generator:
    """Portable counter-based generator for ``seed``."""
    return np.random.Generator(np.random.Philox(seed))


def _readonly(a, dtype=float):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Phantom:
    """Point scatterers (positions in m, real amplitudes) plus named regions.

    ``bounds`` is the bounding box ``(x0, x1, y0, y1, z0, z1)`` all scatterers
    must lie in.
    """

    positions: np.ndarray
    amplitudes: np.ndarray
    regions: tuple = ()
    seed: int | None = None
    bounds: tuple | None = None

    def __post_init__(self):
        pos = _readonly(self.positions).reshape(-1, 3)
        amp = _readonly(self.amplitudes).ravel()
        if pos.shape[0] != amp.size:
            raise ValueError("positions and amplitudes differ in length")
        if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(amp))):
            raise ValueError("phantom values must be finite")
        b = self.bounds
        if b is not None:
            b = tuple(float(v) for v in b)
            lo = np.array(b[0::2]) - 1e-12
            hi = np.array(b[1::2]) + 1e-12
            if pos.size and (np.any(pos < lo) or np.any(pos > hi)):
                raise ValueError("scatterers outside the phantom bounds")
        names = [r.name for r in self.regions]
        if len(set(names)) != len(names):
            raise ValueError("region names must be unique")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "amplitudes", amp)
        object.__setattr__(self, "regions", tuple(self.regions))
        object.__setattr__(self, "bounds", b)

    @property
    def n_scatterers(self) -> int:
        return self.amplitudes.size

    def region(self, name: str) -> Region:
        for r in self.regions:
            if r.name == name:
                return r
        raise KeyError(name)

    def with_amplitudes(self, amplitudes) -> "Phantom":
        return dataclasses.replace(self, amplitudes=amplitudes)

    def with_regions(self, regions) -> "Phantom":
        return dataclasses.replace(self, regions=tuple(regions))

    @staticmethod
    def combine(parts, regions=(), seed=None, bounds=None) -> "Phantom":
        parts = list(parts)
        pos = np.concatenate([p.positions for p in parts]) if parts else np.zeros((0, 3))
        amp = np.concatenate([p.amplitudes for p in parts]) if parts else np.zeros(0)
        return Phantom(pos, amp, tuple(regions), seed, bounds)

    @staticmethod
    def empty(bounds=None) -> "Phantom":
        return Phantom(np.zeros((0, 3)), np.zeros(0), (), None, bounds)


@dataclass(frozen=True)
class ResolutionCell:
    """FWHM extent of the point-spread function per dimension (m)."""

    dx: float
    dy: float
    dz: float

    def __post_init__(self):
        if not (self.dx > 0 and self.dy > 0 and self.dz > 0):
            raise ValueError("resolution cell dimensions must be positive")

    @property
    def volume(self) -> float:
        return self.dx * self.dy * self.dz


def elevation_fwhm(cfg: ImagingConfig) -> float:
    """Elevation beam width at the lens focus, ``0.886 lambda F``."""
    a = cfg.array
    return ELEVATION_FWHM_FACTOR * cfg.wavelength * a.elevation_focus / a.element_height


def reference_config(cfg: ImagingConfig) -> ImagingConfig:
    """Over-sampled configuration sharing the geometry of ``cfg`` (UQ or desk-uq)."""
    name = (cfg.preset_name or "").lower()
    return make_preset_config("desk-uq" if name.startswith("desk-") else "UQ")


def resolution_cell(cfg: ImagingConfig, center=None, dy: float | None = None,
                    waveform=None) -> ResolutionCell:
    """Measure lateral/axial FWHM of an isolated reflector reconstructed with ``cfg``.

    The reflector sits at ``center`` (default: on axis, 30 mm deep); the time
    span is narrowed around its echo to keep the simulation small. ``dy`` is
    the elevation slab thickness (default :func:`elevation_fwhm`).
    """
    from usrecon.beamform import reconstruct
    from usrecon.core import ImageGrid, envelope, make_pulse_echo_waveform
    from usrecon.metrics import point_fwhm
    from usrecon.simulator import simulate_raw

    cx, cz = center if center is not None else (0.0, 30e-3)
    lam = cfg.wavelength
    c = cfg.speed_of_sound
    xs = cfg.array.element_positions[:, 0]
    r_max = math.hypot(max(abs(xs.min() - cx), abs(xs.max() - cx)), cz)
    if waveform is None:
        waveform = make_pulse_echo_waveform(cfg.array.center_frequency,
                                            cfg.array.fractional_bandwidth,
                                            cfg.sampling_frequency)
    pad = 8 / cfg.transmit_frequency + waveform.samples.size / waveform.fs
    t0 = max(0.0, 2 * (cz - 4 * lam) / c - pad)
    local = dataclasses.replace(cfg, time_span=(t0, 2 * r_max / c + pad))
    pt = Phantom(np.array([[cx, 0.0, cz]]), np.array([1.0]))
    raw = simulate_raw(pt, local, waveform)
    win = 6 * lam
    grid = ImageGrid(cx + np.arange(-48, 49) * lam / 16, cz + np.arange(-48, 49) * lam / 16)
    env = envelope(reconstruct(raw, local, grid))
    dx, dz = point_fwhm(env, (cx, cz), win)
    return ResolutionCell(dx, dy if dy is not None else elevation_fwhm(cfg), dz)


@functools.lru_cache(maxsize=8)
def _cached_cell(preset: str) -> ResolutionCell:
    return resolution_cell(make_preset_config(preset))


def default_cell(cfg: ImagingConfig) -> ResolutionCell:
    """Resolution cell of the over-sampled sibling configuration of ``cfg``."""
    return _cached_cell(reference_config(cfg).preset_name)


def fan_mask(pos, cfg: ImagingConfig, theta: float) -> np.ndarray:
    """Points inside the union of the +-theta cones of all elements."""
    xs = cfg.array.element_positions[:, 0]
    spread = np.tan(theta) * pos[:, 2]
    return (pos[:, 0] >= xs.min() - spread) & (pos[:, 0] <= xs.max() + spread) & (pos[:, 2] > 0)


def sample_speckle(domain, density_per_cell: float, cell: ResolutionCell, seed,
                   cfg: ImagingConfig | None = None, theta: float | None = None,
                   shape: Region | None = None) -> Phantom:
    """Uniformly placed scatterers with standard-normal amplitudes.

    ``domain`` is a box ``(x0, x1, y0, y1, z0, z1)``; the scatterer count is
    ``round(density * volume / cell.volume)``. With ``cfg`` and ``theta``
    only scatterers inside the element fans are kept; with ``shape`` only
    those whose x-z position falls inside the region.
    """
    if density_per_cell <= 0:
        raise ValueError("density must be positive")
    x0, x1, y0, y1, z0, z1 = (float(v) for v in domain)
    vol = (x1 - x0) * (y1 - y0) * (z1 - z0)
    if not (x1 > x0 and y1 > y0 and z1 > z0):
        raise ValueError("empty speckle domain")
    n = int(round(density_per_cell * vol / cell.volume))
    rng = make_rng(seed)
    lo = np.array([x0, y0, z0])
    hi = np.array([x1, y1, z1])
    pos = lo + (hi - lo) * rng.random((n, 3))
    amp = rng.standard_normal(n)
    keep = np.ones(n, dtype=bool)
    if cfg is not None and theta is not None:
        keep &= fan_mask(pos, cfg, theta)
    if shape is not None:
        keep &= shape.contains(pos[:, 0], pos[:, 2])
    return Phantom(pos[keep], amp[keep], (), seed, (x0, x1, y0, y1, z0, z1))


def ellipsoid_area(a, b, c) -> float:
    """Knud Thomsen approximation of an ellipsoid surface area (rel. error < 1.1%)."""
    p = 1.6075
    return 4 * math.pi * (((a * b) ** p + (a * c) ** p + (b * c) ** p) / 3) ** (1 / p)


def add_ellipsoids(pht: Phantom, n: int, semi_axis_range, echogenicity_range, seed,
                   domain=None) -> Phantom:
    """Scale scatterers inside ``n`` random ellipsoids by ``10^(E/20)``.

    Centres are uniform over ``domain`` (default: phantom bounds), orientations
    are uniform in-plane rotations about the elevation axis, semi-axes and
    echogenicities uniform in their ranges (echogenicity clamped at -120 dB).
    Zones are applied in descending order of surface area, each overriding
    the previous scaling where they overlap.
    """
    a_lo, a_hi = semi_axis_range
    e_lo, e_hi = echogenicity_range
    if a_lo > a_hi or e_lo > e_hi:
        raise ValueError("ranges must be ordered")
    e_lo, e_hi = max(e_lo, CLAMP_DB), max(e_hi, CLAMP_DB)
    dom = domain if domain is not None else pht.bounds
    if dom is None:
        raise ValueError("phantom has no bounds; pass a domain")
    x0, x1, y0, y1, z0, z1 = dom
    rng = make_rng(seed)
    centres = np.column_stack([rng.uniform(x0, x1, n), rng.uniform(y0, y1, n),
                               rng.uniform(z0, z1, n)])
    axes = rng.uniform(a_lo, a_hi, (n, 3))
    angles = rng.uniform(0, np.pi, n)
    echo = rng.uniform(e_lo, e_hi, n)
    area = np.array([ellipsoid_area(*ax) for ax in axes])
    order = np.argsort(-area, kind="stable")
    scale = np.ones(pht.n_scatterers)
    pos = pht.positions
    regions = list(pht.regions)
    for k in order:
        c, s = math.cos(angles[k]), math.sin(angles[k])
        d = pos - centres[k]
        u = d[:, 0] * c + d[:, 2] * s
        v = -d[:, 0] * s + d[:, 2] * c
        inside = (u / axes[k, 0]) ** 2 + (d[:, 1] / axes[k, 2]) ** 2 + (v / axes[k, 1]) ** 2 <= 1
        scale[inside] = 10 ** (echo[k] / 20)
        regions.append(Region.ellipse(f"E{len(regions)}", centres[k, 0], centres[k, 2],
                                      axes[k, 0], axes[k, 1], angles[k],
                                      echogenicity_db=float(echo[k])))
    return dataclasses.replace(pht, amplitudes=pht.amplitudes * scale, regions=tuple(regions))


# ---------------------------------------------------------------------------
# numerical test phantom

BLOCK = (-15e-3, 5e-3, 10e-3, 30e-3)
INCLUSION = (-5e-3, 20e-3, 4.25e-3)
INCLUSION_DB = -36.0
GRADIENT = (-FULL_APERTURE / 2, FULL_APERTURE / 2, 45e-3, 55e-3)
GRADIENT_DB = (30.0, -50.0)
POINTS = tuple((12.5e-3, z) for z in (10e-3, 20e-3, 30e-3, 40e-3))
# reflector amplitude re the unit standard deviation of speckle scatterers
POINT_AMPLITUDE_DB = 30.0
# lower end of the gradient span used for the slope fit
LG_FLOOR_DB = -30.0
# anechoic artifact windows (x0, x1, z0, z1), placed where single plane-wave
# images of this layout are dominated by grating lobes, side lobes and the
# block's wavefront tails, and away from the reflectors' own lobes
ARTIFACT_REGIONS = {
    "GL": (16e-3, 21e-3, 13e-3, 17e-3),
    "SL": (-21e-3, -17.5e-3, 12e-3, 28e-3),
    "EW": (-12e-3, 2e-3, 3e-3, 7e-3),
}


def gradient_db(x) -> np.ndarray:
    """Prescribed echogenicity (dB) of the gradient block at lateral position ``x``."""
    x0, x1 = GRADIENT[0], GRADIENT[1]
    e0, e1 = GRADIENT_DB
    return e0 + (e1 - e0) * (np.asarray(x, dtype=float) - x0) / (x1 - x0)


def gradient_x(level_db: float) -> float:
    """Lateral position where the gradient block has echogenicity ``level_db``."""
    x0, x1 = GRADIENT[0], GRADIENT[1]
    e0, e1 = GRADIENT_DB
    return x0 + (level_db - e0) / (e1 - e0) * (x1 - x0)


def phantom_regions(cfg: ImagingConfig, cell: ResolutionCell) -> tuple:
    """Evaluation regions of the test phantom.

    Block and inclusion regions keep two lateral resolution cells away from
    every echogenicity edge. The gradient region starts three millimetres in
    from the bright edge and ends where the prescribed level reaches
    ``LG_FLOOR_DB``. Point windows are 2 lambda wide.
    """
    lam = cfg.wavelength
    bx0, bx1, bz0, bz1 = BLOCK
    cx, cz, r = INCLUSION
    m = 2 * cell.dx
    side = min(10 * lam, 5e-3)
    regs = [
        Region.rect("B", bx0 + m, bx1 - m, bz0 + m, bz1 - m, echogenicity_db=0.0,
                    holes=(Region.disk("hole", cx, cz, r + m),)),
        Region.disk("I", cx, cz, r - m, echogenicity_db=INCLUSION_DB),
        Region.rect("LG", GRADIENT[0] + 3e-3, gradient_x(LG_FLOOR_DB),
                    GRADIENT[2] + 1e-3, GRADIENT[3] - 1e-3),
        Region.rect("S", bx1 - cell.dx - side, bx1 - cell.dx, bz1 - cell.dx - side,
                    bz1 - cell.dx, echogenicity_db=0.0),
    ]
    for name, (x0, x1, z0, z1) in ARTIFACT_REGIONS.items():
        regs.append(Region.rect(name, x0, x1, z0, z1))
    for k, (px, pz) in enumerate(POINTS):
        regs.append(Region.rect(f"P{k}", px - lam, px + lam, pz - lam, pz + lam))
    return tuple(regs)


def make_test_phantom(cfg: ImagingConfig, seed, density_per_cell: float = 10.0,
                      cell: ResolutionCell | None = None,
                      point_amplitude: float | None = None) -> Phantom:
    """Anechoic background with a speckle block and low-echogenic inclusion,
    a lateral log-linear gradient block and four isolated reflectors."""
    cell = cell if cell is not None else default_cell(cfg)
    if point_amplitude is None:
        point_amplitude = 10 ** (POINT_AMPLITUDE_DB / 20)
    dy = cell.dy
    root = np.random.SeedSequence(seed)
    s_block, s_grad = (int(s.generate_state(1, np.uint64)[0]) for s in root.spawn(2))
    bx0, bx1, bz0, bz1 = BLOCK
    block = sample_speckle((bx0, bx1, -dy / 2, dy / 2, bz0, bz1), density_per_cell, cell, s_block)
    cx, cz, r = INCLUSION
    incl = Region.disk("inclusion", cx, cz, r)
    inside = incl.contains(block.positions[:, 0], block.positions[:, 2])
    amp = np.where(inside, block.amplitudes * 10 ** (INCLUSION_DB / 20), block.amplitudes)
    block = block.with_amplitudes(amp)
    gx0, gx1, gz0, gz1 = GRADIENT
    grad = sample_speckle((gx0, gx1, -dy / 2, dy / 2, gz0, gz1), density_per_cell, cell, s_grad)
    grad = grad.with_amplitudes(grad.amplitudes * 10 ** (gradient_db(grad.positions[:, 0]) / 20))
    pts = Phantom(np.array([[x, 0.0, z] for x, z in POINTS]), np.full(len(POINTS), point_amplitude))
    return Phantom.combine([block, grad, pts], regions=phantom_regions(cfg, cell), seed=seed,
                           bounds=(gx0, gx1, -dy / 2, dy / 2, bz0, gz1))


# ---------------------------------------------------------------------------
# training phantoms

ELLIPSOID_DB = (-50.0, 30.0)


def make_training_phantom(cfg: ImagingConfig, seed, domain_xz, n_ellipsoids: int = 20,
                          semi_axis_range=None, echogenicity_range=ELLIPSOID_DB,
                          density_per_cell: float = 10.0,
                          cell: ResolutionCell | None = None) -> Phantom:
    """Speckle over ``domain_xz = (x0, x1, z0, z1)`` with random echogenic ellipsoids.

    Semi-axes default to ``0.71 lambda`` up to the smaller of ``71 lambda`` and
    half the lateral domain width. The elevation slab is one cell thick.
    Speckle and ellipsoid draws use independent child streams of ``seed``.
    """
    cell = cell if cell is not None else default_cell(cfg)
    x0, x1, z0, z1 = domain_xz
    lam = cfg.wavelength
    if semi_axis_range is None:
        semi_axis_range = (0.71 * lam, min(71 * lam, 0.5 * (x1 - x0)))
    s_speckle, s_zones = (int(s.generate_state(1, np.uint64)[0])
                          for s in np.random.SeedSequence(seed).spawn(2))
    dom = (x0, x1, -cell.dy / 2, cell.dy / 2, z0, z1)
    pht = sample_speckle(dom, density_per_cell, cell, s_speckle)
    pht = add_ellipsoids(pht, n_ellipsoids, semi_axis_range, echogenicity_range, s_zones)
    return dataclasses.replace(pht, seed=seed)
