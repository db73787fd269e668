"""Pipeline orchestration: simulate -> reconstruct -> metrics, datasets, rendering.

Randomness: a base seed is split into per-realization seeds with
``numpy.random.SeedSequence(base).spawn(n)``; child ``k`` does not depend on
``n``, so extending a run reproduces the earlier realizations exactly.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from usrecon import metrics as M
from usrecon.beamform import normalization_factor, reconstruct
from usrecon.core import (FULL_APERTURE, Image, ImageGrid, ImagingConfig, bmode, envelope,
                          make_grid, make_preset_config)
from usrecon.phantom import (Phantom, default_cell, make_rng, make_test_phantom,
                             make_training_phantom, sample_speckle)
from usrecon.simulator import default_waveform, simulate_raw

WORKERS_ENV = "USRECON_WORKERS"
AGG_HEADER = ("metric", "region", "mean", "std", "units", "config", "n_seeds")


@dataclass(frozen=True)
class PipelineSettings:
    """Simulation / reconstruction knobs shared by every stage.

    ``sim_oversample`` simulates at a multiple of the sampling rate and
    decimates; ``upsample`` refines channel data before beamforming.
    """

    sim_oversample: int = 4
    upsample: int = 4
    reweighting: str = "transmit"
    analytic: str = "raw"
    noise_snr_db: float | None = None
    density_per_cell: float = 10.0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict | None) -> "PipelineSettings":
        return cls(**(d or {}))


def n_workers(default: int = 1) -> int:
    v = os.environ.get(WORKERS_ENV, "")
    try:
        return max(1, int(v)) if v else default
    except ValueError:
        raise ValueError(f"{WORKERS_ENV} must be an integer, got {v!r}") from None


def realization_seeds(base_seed: int, n: int) -> list:
    return [int(s.generate_state(1, np.uint64)[0])
            for s in np.random.SeedSequence(base_seed).spawn(n)]


def phantom_grid(cfg: ImagingConfig) -> ImageGrid:
    """Grid covering the test phantom (full aperture, 2 to 58 mm deep)."""
    return make_grid(cfg, x_range=(-FULL_APERTURE / 2, FULL_APERTURE / 2),
                     z_range=(2e-3, 58e-3))


def image_of(pht: Phantom, cfg: ImagingConfig, grid: ImageGrid,
             settings: PipelineSettings = PipelineSettings(), normalization: float | None = None,
             seed=None) -> Image:
    """Simulate ``pht`` with ``cfg`` and reconstruct it on ``grid`` (IQ image)."""
    rng = make_rng(seed) if settings.noise_snr_db is not None else None
    raw = simulate_raw(pht, cfg, default_waveform(cfg), noise_snr_db=settings.noise_snr_db, rng=rng,
                       oversample=settings.sim_oversample)
    return reconstruct(raw, cfg, grid, normalization=normalization, analytic=settings.analytic,
                       reweighting=settings.reweighting, upsample=settings.upsample)


# ---------------------------------------------------------------------------
# test phantom metrics


def phantom_metrics(img: Image, pht: Phantom, config_id: str = "", seed=None,
                    point_window: float | None = None) -> M.MetricsReport:
    """Contrast, speckle, artifact, gradient and resolution metrics of a test phantom image.

    Levels are in dB relative to the mean envelope of the 0 dB block ``B``.
    Point widths that cannot be measured (peak buried in clutter) are NaN.
    """
    env = envelope(img) if img.kind != "ENV" else img
    rep = M.MetricsReport(config_id, seed)
    reg = {r.name: r for r in pht.regions}
    ref = float(np.mean(M._values(env, reg["B"])))
    rep.add("CR", "I", M.contrast_ratio(env, reg["I"], reg["B"]), "dB")
    rep.add("SNR", "S", M.speckle_snr(env, reg["S"]), "")
    lat, ax = M.acf_fwhm(env, reg["S"])
    rep.add("ACF_FWHM_lateral", "S", lat * 1e3, "mm")
    rep.add("ACF_FWHM_axial", "S", ax * 1e3, "mm")
    x, db = M.gradient_profile(env, reg["LG"], ref)
    rep.add("slope", "LG", M.profile_slope(x, db) * 1e-3, "dB/mm")
    for name in ("GL", "SL", "EW"):
        rep.add("artifact", name, M.artifact_level(env, reg[name], ref), "dB")
    for name in sorted(n for n in reg if n.startswith("P") and n[1:].isdigit()):
        p = reg[name].params
        c = (0.5 * (p[0] + p[1]), 0.5 * (p[2] + p[3]))
        win = point_window if point_window is not None else (p[1] - p[0])
        try:
            lat, ax = M.point_fwhm(env, c, win)
        except (ValueError, RuntimeError):
            lat = ax = math.nan
        rep.add("FWHM_lateral", name, lat * 1e3, "mm")
        rep.add("FWHM_axial", name, ax * 1e3, "mm")
    return rep


def evaluate_seed(cfg: ImagingConfig, seed: int, settings: PipelineSettings = PipelineSettings(),
                  grid: ImageGrid | None = None, normalization: float | None = None):
    """Test phantom realization ``seed``: returns ``(report, image, phantom)``."""
    grid = grid if grid is not None else phantom_grid(cfg)
    pht = make_test_phantom(cfg, seed, density_per_cell=settings.density_per_cell)
    img = image_of(pht, cfg, grid, settings, normalization, seed)
    return phantom_metrics(img, pht, cfg.preset_name, seed), img, pht


def _eval_job(args):
    cfg_dict, seed, settings_dict = args
    cfg = ImagingConfig.from_dict(cfg_dict)
    rep, _, _ = evaluate_seed(cfg, seed, PipelineSettings.from_dict(settings_dict))
    return rep.to_csv()


def aggregate(reports) -> list:
    """Rows ``(metric, region, mean, std, units, config, n)``; std is the population value."""
    reports = list(reports)
    if not reports:
        raise ValueError("nothing to aggregate")
    keys = [(m, r, u) for m, r, _, u in reports[0].entries]
    rows = []
    for m, r, u in keys:
        v = np.array([rep.get(m, r) for rep in reports], dtype=float)
        rows.append((m, r, float(np.mean(v)), float(np.std(v)), u, reports[0].config_id, len(v)))
    return rows


def aggregate_csv(rows) -> str:
    lines = [",".join(AGG_HEADER)]
    for m, r, mean, std, u, c, n in rows:
        lines.append(",".join([m, r, M.format_value(mean), M.format_value(std), u, c, str(n)]))
    return "\n".join(lines) + "\n"


def read_aggregate_csv(text: str) -> list:
    import csv
    import io

    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != AGG_HEADER:
        raise ValueError("not an aggregate metrics CSV")
    return [(m, r, float(a), float(s), u, c, int(n)) for m, r, a, s, u, c, n in rows[1:]]


def batch_evaluate(configs, n_seeds: int, base_seed: int = 0,
                   settings: PipelineSettings = PipelineSettings(), out_dir=None,
                   workers: int | None = None) -> dict:
    """Evaluate the test phantom for every config over ``n_seeds`` realizations.

    Returns ``{config_id: (per_seed_reports, aggregate_rows)}``; with
    ``out_dir`` also writes ``<config>/seed_<k>.csv`` and ``<config>/aggregate.csv``.
    """
    if n_seeds < 1:
        raise ValueError("n_seeds must be >= 1")
    workers = workers if workers is not None else n_workers()
    seeds = realization_seeds(base_seed, n_seeds)
    out = {}
    for cfg in configs:
        jobs = [(cfg.to_dict(), s, settings.to_dict()) for s in seeds]
        if workers > 1:
            with ProcessPoolExecutor(workers) as ex:
                texts = list(ex.map(_eval_job, jobs))
        else:
            texts = [_eval_job(j) for j in jobs]
        reps = [M.MetricsReport.from_csv(t) for t in texts]
        rows = aggregate(reps)
        out[cfg.preset_name] = (reps, rows)
        if out_dir is not None:
            d = Path(out_dir) / cfg.preset_name
            d.mkdir(parents=True, exist_ok=True)
            for k, t in enumerate(texts):
                (d / f"seed_{k:04d}.csv").write_text(t)
            (d / "aggregate.csv").write_text(aggregate_csv(rows))
    return out


# ---------------------------------------------------------------------------
# datasets


@dataclass(frozen=True)
class DatasetSpec:
    """Paired input / reference reconstructions of random training phantoms."""

    input_config: str = "desk-lq"
    reference_config: str = "desk-uq"
    n_phantoms: int = 110
    n_ellipsoids: int = 20
    domain: tuple = (-16e-3, 16e-3, 6e-3, 42e-3)
    x_range: tuple = (-14.5e-3, 14.5e-3)
    z_start: float = 10e-3
    patch: int = 64
    patches_per_image: tuple = (1, 2)
    n_validation: int = 10
    n_calibration: int = 2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict | None) -> "DatasetSpec":
        d = dict(d or {})
        for k in ("domain", "x_range", "patches_per_image"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)

    def grid(self, cfg: ImagingConfig) -> ImageGrid:
        lam = cfg.wavelength
        nx, nz = self.patch * self.patches_per_image[0], self.patch * self.patches_per_image[1]
        return make_grid(cfg, x_range=self.x_range, z_range=(self.z_start, self.z_start + 1),
                         spacing=(lam / 4, lam / 8), shape=(nx, nz))


def calibrate_normalization(cfg: ImagingConfig, grid: ImageGrid, domain, seeds,
                            settings: PipelineSettings = PipelineSettings()) -> float:
    """Factor making the mean envelope of plain 0 dB speckle equal to one."""
    cell = default_cell(cfg)
    x0, x1, z0, z1 = domain
    imgs = []
    for s in seeds:
        pht = sample_speckle((x0, x1, -cell.dy / 2, cell.dy / 2, z0, z1),
                             settings.density_per_cell, cell, s)
        imgs.append(image_of(pht, cfg, grid, settings, seed=s))
    return normalization_factor(imgs)


def split_patches(img: Image, patch: int) -> list:
    out = []
    nx, nz = img.grid.shape
    for i in range(0, nx - patch + 1, patch):
        for j in range(0, nz - patch + 1, patch):
            g = ImageGrid(img.grid.x_axis[i:i + patch], img.grid.z_axis[j:j + patch])
            out.append(Image(g, img.kind, img.pixels[i:i + patch, j:j + patch], img.range_db))
    return out


def make_dataset(spec: DatasetSpec, base_seed: int,
                 settings: PipelineSettings = PipelineSettings(), log=None) -> dict:
    """Normalized (input, reference) patch pairs, split into training and validation.

    The last ``n_validation`` phantoms form the validation split. Returns a
    dict with ``train``, ``val`` (lists of pairs) and ``normalization``.
    """
    cin = make_preset_config(spec.input_config)
    cref = make_preset_config(spec.reference_config)
    cell = default_cell(cref)
    seeds = realization_seeds(base_seed, spec.n_phantoms + spec.n_calibration)
    cal, ph_seeds = seeds[spec.n_phantoms:], seeds[:spec.n_phantoms]
    grids = {c.preset_name: spec.grid(c) for c in (cin, cref)}
    norm = {c.preset_name: calibrate_normalization(c, grids[c.preset_name], spec.domain, cal,
                                                   settings)
            for c in (cin, cref)}
    train, val = [], []
    for k, s in enumerate(ph_seeds):
        pht = make_training_phantom(cref, s, spec.domain, spec.n_ellipsoids,
                                    density_per_cell=settings.density_per_cell, cell=cell)
        a = image_of(pht, cin, grids[cin.preset_name], settings, norm[cin.preset_name], s)
        b = image_of(pht, cref, grids[cref.preset_name], settings, norm[cref.preset_name], s)
        pairs = list(zip(split_patches(a, spec.patch), split_patches(b, spec.patch)))
        (val if k >= spec.n_phantoms - spec.n_validation else train).extend(pairs)
        if log:
            log(f"phantom {k + 1}/{spec.n_phantoms}")
    return dict(train=train, val=val, normalization=norm)


# ---------------------------------------------------------------------------
# rendering


def bmode_bytes(img: Image, range_db: float, ref: float | None = None) -> np.ndarray:
    """8-bit display values, rows = depth, columns = lateral position."""
    if img.kind == "BMODE":
        b = img
    else:
        b = bmode(img if img.kind == "ENV" else envelope(img), range_db, ref)
    u = np.rint((b.pixels + range_db) / range_db * 255.0)
    return np.clip(u, 0, 255).astype(np.uint8).T


def render_bmode(img: Image, range_db: float, path, ref: float | None = None,
                 png: bool = False) -> Path:
    """Write a binary PGM (and optionally a PNG) plus ``<path>.json`` axes metadata."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    a = bmode_bytes(img, range_db, ref)
    h, w = a.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + a.tobytes())
    if png:
        from PIL import Image as PILImage

        PILImage.fromarray(a, mode="L").save(path.with_suffix(".png"))
    side = dict(range_db=range_db, x_axis_m=[float(img.grid.x_axis[0]), float(img.grid.x_axis[-1])],
                z_axis_m=[float(img.grid.z_axis[0]), float(img.grid.z_axis[-1])],
                width=w, height=h, rows="depth", columns="lateral")
    Path(str(path) + ".json").write_text(json.dumps(side, indent=2, sort_keys=True))
    return path
