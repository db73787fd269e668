"""Delay-and-sum backprojection, diffraction re-weighting and compounding."""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np
from scipy.signal import hilbert, resample_poly

from usrecon import bspline
from usrecon.core import Image, ImageGrid, ImagingConfig, RawData, envelope, rf_to_iq
from usrecon.simulator import CHUNK, geometry_tables, tx_terms
from usrecon.wavefield import Transmitter, transmitters

# reweighting denominators below this are treated as zero
MIN_WEIGHT = 1e-30


def _row_for(raw: RawData, tx: Transmitter) -> np.ndarray:
    n_tx = raw.samples.shape[0]
    if n_tx == 1:
        return raw.samples[0]
    if tx.kind == "EL" and tx.index < n_tx:
        return raw.samples[tx.index]
    raise ValueError(f"cannot select transmit {tx} from raw data with {n_tx} transmits")


def _backproject(coefs, txs, cfg, grid, reweighted, weights_out=None):
    """Per-transmit DAS images from prefiltered channel rows, shape ``(n_tx, n_pix)``.

    ``weights_out`` (if given, ``(n_tx, n_pix)``) receives ``w_tx * sum_j w_rx``.
    """
    pts = grid.points()
    dtype = np.result_type(*[c.dtype for c in coefs])
    out = np.zeros((len(txs), pts.shape[0]), dtype=dtype)
    for a in range(0, pts.shape[0], CHUNK):
        sl = slice(a, min(pts.shape[0], a + CHUNK))
        p = pts[sl]
        rx_u, rx_w = geometry_tables(cfg, p)
        rx_u = np.ascontiguousarray(rx_u)
        rx_w = np.ascontiguousarray(rx_w)
        wsum = rx_w.sum(axis=0)
        for k, (tx, c) in enumerate(zip(txs, coefs)):
            tx_u, tx_w = tx_terms(tx, cfg, p, rx_u, rx_w)
            acc = np.zeros(p.shape[0], dtype=dtype)
            bspline.das_kernel(c, rx_u, rx_w, tx_u, tx_w, acc)
            if weights_out is not None:
                weights_out[k, sl] = tx_w * wsum
            if reweighted:
                den = tx_w * wsum
                bad = np.abs(den) < MIN_WEIGHT
                if np.any(bad):
                    q = p[np.argmax(bad)]
                    raise ZeroDivisionError(
                        f"re-weighting denominator vanishes at x={q[0]:.4g} m, z={q[2]:.4g} m")
                acc = acc / den
            out[k, sl] = acc
    return out


def das_backproject(raw: RawData, tx: Transmitter, cfg: ImagingConfig,
                    grid: ImageGrid) -> Image:
    """Adjoint of the far-field operator for one transmit (no re-weighting)."""
    raw.check_matches(cfg)
    tx.check(cfg)
    row = _row_for(raw, tx)
    if np.iscomplexobj(row):
        raise ValueError("das_backproject expects real RF channel data")
    coef = np.ascontiguousarray(bspline.prefilter(row, axis=-1))
    img = _backproject([coef], [tx], cfg, grid, reweighted=False)[0]
    return Image(grid, "RF", img.reshape(grid.shape))


def reweight_map(tx: Transmitter, cfg: ImagingConfig, grid: ImageGrid) -> np.ndarray:
    """Pixel-wise factor ``(w_tx * sum_j w_rx)^-1`` as an ``(n_x, n_z)`` array."""
    pts = grid.points()
    out = np.empty(pts.shape[0])
    for a in range(0, pts.shape[0], CHUNK):
        sl = slice(a, min(pts.shape[0], a + CHUNK))
        rx_u, rx_w = geometry_tables(cfg, pts[sl])
        _, tx_w = tx_terms(tx, cfg, pts[sl], rx_u, rx_w)
        den = tx_w * rx_w.sum(axis=0)
        bad = np.abs(den) < MIN_WEIGHT
        if np.any(bad):
            q = pts[sl][np.argmax(bad)]
            raise ZeroDivisionError(
                f"re-weighting denominator vanishes at x={q[0]:.4g} m, z={q[2]:.4g} m")
        out[sl] = 1.0 / den
    return out.reshape(grid.shape)


def reweight(img: Image, tx: Transmitter, cfg: ImagingConfig, grid: ImageGrid) -> Image:
    """Compensate far-field diffraction amplitudes of a single-transmit image."""
    if img.grid != grid:
        raise ValueError("image grid does not match")
    w = reweight_map(tx, cfg, grid)
    return img.with_pixels(img.pixels * w)


def compound(images) -> Image:
    """Coherent mean of images sharing grid and kind."""
    images = list(images)
    if not images:
        raise ValueError("nothing to compound")
    first = images[0]
    for im in images[1:]:
        if im.kind != first.kind or im.grid != first.grid:
            raise ValueError("compounded images must share grid and kind")
    if first.kind not in ("RF", "IQ"):
        raise ValueError("only RF or IQ images can be compounded coherently")
    acc = np.zeros_like(first.pixels)
    for im in images:
        acc = acc + im.pixels
    return first.with_pixels(acc / len(images))


def analytic_raw(raw: RawData) -> np.ndarray:
    """Analytic channel signals; the real part is the input exactly."""
    s = raw.samples
    return s + 1j * np.imag(hilbert(s, axis=-1))


def reconstruct(raw: RawData, cfg: ImagingConfig, grid: ImageGrid,
                normalization: float | None = None, analytic: str = "raw",
                reweighting: str = "transmit", upsample: int = 1) -> Image:
    """Re-weighted DAS of every transmit, coherently compounded, as an IQ image.

    ``analytic="raw"`` beamforms the analytic channel signals (the real part of
    the result is the RF image); ``analytic="image"`` beamforms RF and applies
    the depth Hilbert transform afterwards. ``upsample > 1`` refines the
    channel signals with a polyphase filter before the spline reads.

    ``reweighting`` selects where the diffraction compensation is applied:
    ``"transmit"`` divides every single-transmit image by its own weight sum
    before averaging, ``"compound"`` sums the plain backprojections and
    divides once by the summed weights, ``"none"`` skips it.
    """
    if reweighting not in ("transmit", "compound", "none"):
        raise ValueError(f"unknown reweighting {reweighting!r}")
    raw.check_matches(cfg)
    txs = transmitters(cfg)
    if raw.samples.shape[0] != len(txs):
        raise ValueError(f"expected {len(txs)} transmits, got {raw.samples.shape[0]}")
    if analytic == "raw":
        data = analytic_raw(raw)
    elif analytic == "image":
        data = raw.samples
    else:
        raise ValueError(f"unknown analytic mode {analytic!r}")
    bf_cfg = cfg
    if upsample != 1:
        if upsample < 1 or int(upsample) != upsample:
            raise ValueError("upsample must be a positive integer")
        bf_cfg = dataclasses.replace(cfg, sampling_frequency=cfg.sampling_frequency * upsample)
        data = resample_poly(data, int(upsample), 1, axis=-1)
        n = bf_cfg.n_samples
        if data.shape[-1] < n:
            data = np.concatenate([data, np.zeros(data.shape[:-1] + (n - data.shape[-1],),
                                                  dtype=data.dtype)], axis=-1)
        data = data[..., :n]
    coefs = bspline.prefilter(data, axis=-1)
    coefs = [np.ascontiguousarray(coefs[i]) for i in range(len(txs))]
    if reweighting == "compound":
        wts = np.zeros((len(txs), grid.shape[0] * grid.shape[1]))
        per_tx = _backproject(coefs, txs, bf_cfg, grid, False, wts)
        den = wts.sum(axis=0)
        if np.any(np.abs(den) < MIN_WEIGHT):
            q = grid.points()[np.argmax(np.abs(den) < MIN_WEIGHT)]
            raise ZeroDivisionError(
                f"re-weighting denominator vanishes at x={q[0]:.4g} m, z={q[2]:.4g} m")
        px = (per_tx.sum(axis=0) / den).reshape(grid.shape)
    else:
        per_tx = _backproject(coefs, txs, bf_cfg, grid, reweighting == "transmit")
        px = per_tx.mean(axis=0).reshape(grid.shape)
    if normalization is not None:
        px = px * normalization
    if analytic == "raw":
        return Image(grid, "IQ", px)
    return rf_to_iq(Image(grid, "RF", px))


def normalization_factor(images) -> float:
    """Reciprocal of the mean envelope of 0 dB reference speckle reconstructions."""
    means = [float(np.mean(envelope(im).pixels)) if im.kind != "ENV" else float(np.mean(im.pixels))
             for im in images]
    m = float(np.mean(means))
    if m <= 0:
        raise ValueError("reference reconstructions have zero mean envelope")
    return 1.0 / m


def save_normalization(path, factors: dict):
    Path(path).write_text(json.dumps(factors, indent=2, sort_keys=True))


def load_normalization(path) -> dict:
    return json.loads(Path(path).read_text())
