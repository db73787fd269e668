"""Matrix-free far-field forward model.

Each scatterer at ``p`` with amplitude ``g`` contributes
``g * w_tx(p) * w_rx(j, p)`` at time ``tx_delay(p) + rx_delay(j, p)`` to the
channel of element ``j``. The contribution is injected with the transpose of
the cubic B-spline read used by the beamformer, so :func:`operator_pair`
returns an exact adjoint pair.
"""

from __future__ import annotations

from types import SimpleNamespace

import dataclasses

import numpy as np
from scipy.signal import oaconvolve, resample_poly

from usrecon import bspline
from usrecon.core import (Image, ImageGrid, ImagingConfig, PulseEchoWaveform, RawData,
                          make_pulse_echo_waveform)
from usrecon.wavefield import Transmitter, element_tables, transmitters, tx_delay, tx_weight

CHUNK = 8192


class OutOfSpanError(ValueError):
    """A scatterer echo falls outside the configured time span."""


def geometry_tables(cfg: ImagingConfig, pts: np.ndarray):
    """Receive delays in samples and receive weights, each ``(n_el, n_pts)``."""
    delays, weights = element_tables(cfg, pts)
    return delays * cfg.sampling_frequency, weights


def tx_terms(tx: Transmitter, cfg: ImagingConfig, pts, rx_u, rx_w, fire_delay=0.0):
    """Transmit delay (samples from ``t0``) and weight for each point.

    Element transmitters reuse the receive tables; the same code path serves
    both the simulator and the beamformer.
    """
    fs = cfg.sampling_frequency
    t0 = cfg.time_span[0]
    if tx.kind == "EL":
        tx.check(cfg)
        u = rx_u[tx.index] + (fire_delay - t0) * fs
        w = rx_w[tx.index]
    else:
        u = (tx_delay(tx, pts, cfg) + fire_delay - t0) * fs
        w = tx_weight(tx, pts, cfg)
    return np.ascontiguousarray(u), np.ascontiguousarray(w)


def _chunks(n, size=CHUNK):
    for a in range(0, n, size):
        yield slice(a, min(n, a + size))


def inject_points(pts, amp, tx: Transmitter, cfg: ImagingConfig, strict=True,
                  tx_model="ideal") -> np.ndarray:
    """Spline-coefficient buffer ``(n_el, n_t)`` of one transmit (before ``B^-T``)."""
    n_t = cfg.n_samples
    n_el = cfg.array.n_elements
    buf = np.zeros((n_el, n_t))
    if tx.kind == "PW" and tx_model == "aperture":
        # plane wave synthesised from simultaneously (or linearly delayed) firing elements
        xs = cfg.array.element_positions[:, 0]
        s = np.sin(tx.angle)
        fire = (xs * s - np.min(xs * s)) / cfg.speed_of_sound
        sources = [(Transmitter.element(i), fire[i]) for i in range(n_el)]
    elif tx_model in ("ideal", "aperture"):
        sources = [(tx, 0.0)]
    else:
        raise ValueError(f"unknown transmit model {tx_model!r}")
    for sl in _chunks(pts.shape[0]):
        p = pts[sl]
        a = np.ascontiguousarray(amp[sl], dtype=float)
        rx_u, rx_w = geometry_tables(cfg, p)
        for src, fire_delay in sources:
            tx_u, tx_w = tx_terms(src, cfg, p, rx_u, rx_w, fire_delay)
            if strict:
                u = tx_u[None, :] + rx_u
                bad = np.nonzero(np.any((u < 0) | (u > n_t - 1), axis=0) & (a != 0))[0]
                if bad.size:
                    idx = (bad + sl.start).tolist()
                    raise OutOfSpanError(
                        f"{bad.size} scatterer echo(es) fall outside the time span "
                        f"{cfg.time_span}: indices {idx[:10]}{'...' if bad.size > 10 else ''}")
            bspline.inject_kernel(buf, rx_u, rx_w, tx_u, tx_w, a)
    return buf


def forward(phantom, tx: Transmitter, cfg: ImagingConfig, strict=True,
            tx_model="ideal") -> RawData:
    """Dirac-pulse channel data of one transmit, shape ``[1, n_el, n_t]``."""
    pts = np.asarray(phantom.positions, dtype=float).reshape(-1, 3)
    amp = np.asarray(phantom.amplitudes, dtype=float).ravel()
    buf = inject_points(pts, amp, tx, cfg, strict=strict, tx_model=tx_model)
    samples = bspline.prefilter_adjoint(buf, axis=-1)
    return RawData(samples[None], cfg.time_span[0], cfg.sampling_frequency, cfg.preset_name)


def match_rate(wf: PulseEchoWaveform, fs: float) -> PulseEchoWaveform:
    """Resample a waveform onto ``fs`` keeping time zero on a sample.

    Waveforms built by :func:`make_pulse_echo_waveform` are regenerated at the
    new rate; others are spline-interpolated.
    """
    if np.isclose(wf.fs, fs, rtol=1e-12):
        return wf
    if "fc" in wf.params and "bw_frac" in wf.params:
        from usrecon.core import make_pulse_echo_waveform
        return make_pulse_echo_waveform(wf.params["fc"], wf.params["bw_frac"], fs)
    t_end = wf.t0 + (wf.samples.size - 1) / wf.fs
    k = np.arange(int(np.ceil(wf.t0 * fs)), int(np.floor(t_end * fs)) + 1)
    vals = bspline.sample_at(wf.samples, (k / fs - wf.t0) * wf.fs)
    return PulseEchoWaveform(vals, fs, k[0] / fs, dict(wf.params))


def convolve_waveform(samples: np.ndarray, wf: PulseEchoWaveform) -> np.ndarray:
    """Convolve along time; waveform time zero maps onto the echo arrival."""
    h = wf.samples
    if h.size == 1:
        return samples * h[0]
    off = wf.offset
    n = samples.shape[-1]
    full = oaconvolve(samples, h.reshape((1,) * (samples.ndim - 1) + (-1,)), axes=-1)
    return full[..., off:off + n]


def add_noise(samples: np.ndarray, snr_db: float, rng: np.random.Generator) -> np.ndarray:
    """White Gaussian noise at ``snr_db`` relative to the signal RMS."""
    rms = np.sqrt(np.mean(samples ** 2))
    sigma = rms * 10 ** (-snr_db / 20)
    return samples + sigma * rng.standard_normal(samples.shape)


def default_waveform(cfg: ImagingConfig) -> PulseEchoWaveform:
    """Pulse-echo waveform of the configuration's transducer at its sampling rate."""
    return make_pulse_echo_waveform(cfg.array.center_frequency, cfg.array.fractional_bandwidth,
                                    cfg.sampling_frequency)


def simulate_raw(phantom, cfg: ImagingConfig, waveform: PulseEchoWaveform | None = None,
                 noise_snr_db: float | None = None, rng: np.random.Generator | None = None,
                 tx_model: str = "ideal", strict: bool = True,
                 oversample: int = 1) -> RawData:
    """Channel data for every transmit of the configuration's scheme.

    ``tx_model="aperture"`` synthesises plane waves from the individual element
    emissions (finite beam, edge waves) instead of the ideal wavefront; element
    transmits are unaffected. With ``oversample > 1`` the echoes are simulated
    at ``oversample * fs`` and decimated with a polyphase anti-aliasing filter,
    which removes most of the interpolation error of the injection kernel.
    """
    if oversample < 1 or int(oversample) != oversample:
        raise ValueError("oversample must be a positive integer")
    if oversample > 1:
        hi = dataclasses.replace(cfg, sampling_frequency=cfg.sampling_frequency * oversample)
        raw = simulate_raw(phantom, hi, waveform, None, None, tx_model, strict, 1)
        out = resample_poly(raw.samples, 1, int(oversample), axis=-1)[..., :cfg.n_samples]
        if noise_snr_db is not None:
            out = add_noise(out, noise_snr_db, rng if rng is not None else np.random.default_rng())
        return RawData(out, cfg.time_span[0], cfg.sampling_frequency, cfg.preset_name)
    pts = np.asarray(phantom.positions, dtype=float).reshape(-1, 3)
    amp = np.asarray(phantom.amplitudes, dtype=float).ravel()
    txs = transmitters(cfg)
    out = np.empty((len(txs), cfg.array.n_elements, cfg.n_samples))
    if cfg.scheme.kind == "SA":
        _simulate_sa(pts, amp, cfg, out, strict)
    else:
        for i, tx in enumerate(txs):
            out[i] = inject_points(pts, amp, tx, cfg, strict=strict, tx_model=tx_model)
    out = bspline.prefilter_adjoint(out, axis=-1)
    if waveform is not None:
        out = convolve_waveform(out, match_rate(waveform, cfg.sampling_frequency))
    if noise_snr_db is not None:
        out = add_noise(out, noise_snr_db, rng if rng is not None else np.random.default_rng())
    return RawData(out, cfg.time_span[0], cfg.sampling_frequency, cfg.preset_name)


def _simulate_sa(pts, amp, cfg, out, strict):
    n_t = cfg.n_samples
    out[:] = 0.0
    for sl in _chunks(pts.shape[0]):
        p = pts[sl]
        a = np.ascontiguousarray(amp[sl], dtype=float)
        rx_u, rx_w = geometry_tables(cfg, p)
        if strict:
            t0u = -cfg.time_span[0] * cfg.sampling_frequency
            far = rx_u.max(axis=0) * 2 + t0u
            near = rx_u.min(axis=0) * 2 + t0u
            bad = np.nonzero(((near < 0) | (far > n_t - 1)) & (a != 0))[0]
            if bad.size:
                idx = (bad + sl.start).tolist()
                raise OutOfSpanError(
                    f"{bad.size} scatterer echo(es) fall outside the time span "
                    f"{cfg.time_span}: indices {idx[:10]}{'...' if bad.size > 10 else ''}")
        for i in range(cfg.array.n_elements):
            tx_u, tx_w = tx_terms(Transmitter.element(i), cfg, p, rx_u, rx_w)
            bspline.inject_kernel(out[i], rx_u, rx_w, tx_u, tx_w, a)


def operator_pair(cfg: ImagingConfig, tx: Transmitter, grid: ImageGrid):
    """Measurement operator on grid pixels and its adjoint (un-weighted DAS).

    ``apply`` maps an ``(n_x, n_z)`` array (or RF image) to ``[1, n_el, n_t]``
    raw samples; ``adjoint`` maps raw samples back to an RF image.
    """
    from usrecon.beamform import das_backproject

    pts = grid.points()

    def apply(x) -> RawData:
        arr = x.pixels if isinstance(x, Image) else np.asarray(x)
        if arr.shape != grid.shape:
            raise ValueError(f"expected pixels of shape {grid.shape}, got {arr.shape}")
        pixels = SimpleNamespace(positions=pts, amplitudes=np.asarray(arr, dtype=float).ravel())
        return forward(pixels, tx, cfg, strict=False)

    def adjoint(raw) -> Image:
        if not isinstance(raw, RawData):
            raw = RawData(np.asarray(raw).reshape(1, cfg.array.n_elements, cfg.n_samples),
                          cfg.time_span[0], cfg.sampling_frequency, cfg.preset_name)
        return das_backproject(raw, tx, cfg, grid)

    return apply, adjoint
