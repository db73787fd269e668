"""Exit criteria, one test each. Run alone with ``pytest -m acceptance -s``."""

import math
import time

import numpy as np
import pytest

from usrecon import harness as H
from usrecon import losses as L
from usrecon import metrics as M
from usrecon import restorer as R
from usrecon.cli import main as cli_main
from usrecon.core import Image, ImageGrid, RawData, envelope, make_grid, make_preset_config
from usrecon.phantom import Phantom, default_cell, sample_speckle
from usrecon.simulator import operator_pair
from usrecon.wavefield import Transmitter, element_tables, tx_delay

pytestmark = [pytest.mark.acceptance]

N_SEEDS = 8


@pytest.fixture(scope="module")
def uq_batch():
    t = time.perf_counter()
    reps, rows = H.batch_evaluate([make_preset_config("desk-uq")], N_SEEDS, base_seed=0)["desk-uq"]
    return reps, {(m, r): mean for m, r, mean, *_ in rows}, time.perf_counter() - t


def test_01_adjoint_identity(criterion):
    cfg = make_preset_config("desk-lq")
    grid = make_grid(cfg, x_range=(-6e-3, 6e-3), z_range=(10e-3, 20e-3), shape=(16, 16))
    apply, adjoint = operator_pair(cfg, Transmitter.plane_wave(), grid)
    rng = np.random.default_rng(0)
    t = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        x = rng.normal(size=grid.shape)
        y = rng.normal(size=(1, cfg.array.n_elements, cfg.n_samples))
        lhs = np.vdot(apply(x).samples, y)
        rhs = np.vdot(x, adjoint(RawData(y, cfg.time_span[0], cfg.sampling_frequency)).pixels)
        worst = max(worst, abs(lhs - rhs) / max(abs(lhs), abs(rhs)))
    dt = time.perf_counter() - t
    criterion(1, worst < 1e-10 and dt < 10, f"max rel err {worst:.2e}, {dt:.1f} s")


@pytest.mark.slow
def test_02_speckle_snr(criterion):
    # uniform 0 dB slab; SNR measured on tiles the size of the phantom's S region
    cfg = make_preset_config("desk-uq")
    cell = default_cell(cfg)
    grid = make_grid(cfg, x_range=(-11e-3, 11e-3), z_range=(14e-3, 36e-3))
    tiles = [M.Region.rect("S", x0, x0 + 5e-3, z0, z0 + 5e-3)
             for x0 in (-10e-3, -5e-3, 0.0, 5e-3) for z0 in (15e-3, 20e-3, 25e-3, 30e-3)]
    t = time.perf_counter()
    per_seed = []
    for s in H.realization_seeds(0, N_SEEDS):
        pht = sample_speckle((-15e-3, 15e-3, -cell.dy / 2, cell.dy / 2, 10e-3, 40e-3), 10.0, cell, s)
        env = envelope(H.image_of(pht, cfg, grid))
        per_seed.append(np.mean([M.speckle_snr(env, r) for r in tiles]))
    dt = time.perf_counter() - t
    snr = float(np.mean(per_seed))
    criterion(2, 1.81 <= snr <= 2.01 and dt < 300,
              f"SNR {snr:.3f} (Rayleigh {M.rayleigh_snr():.3f}), {dt:.0f} s")


def test_03_confidence_bounds(criterion):
    lo, hi = M.rayleigh_confidence_bounds(0.90)
    # closed form: dB of the 5 % and 95 % Rayleigh quantiles relative to the mean
    ref = math.sqrt(math.pi / 2)
    q = [math.sqrt(-2 * math.log(1 - p)) / ref for p in (0.05, 0.95)]
    exp = [20 * math.log10(v) for v in q]
    ok = abs(lo - exp[0]) < 0.01 and abs(hi - exp[1]) < 0.01
    ok &= abs(lo + 11.85) < 0.01 and abs(hi - 5.82) < 0.01
    criterion(3, ok, f"({lo:.3f}, {hi:+.3f}) dB")


def _logb(v, b):
    return math.log(v) / math.log(b)


def test_04_case_oracles(criterion):
    rng = np.random.default_rng(4)
    n = 10_000
    a = 10 ** (-3.1)
    mu = 1000.0
    x = 10 ** rng.uniform(-5, 0.5, n) * rng.choice([-1, 1], n)
    eps = 10 ** rng.uniform(-3, 3, n) * rng.choice([-1, 1], n)
    got = np.abs(L.slt_difference(x, eps * x, L.SltParams(a)))
    gmu = np.abs(L.mu_law(eps * x, mu) - L.mu_law(x, mu))
    exp, emu, branch = np.empty(n), np.empty(n), np.empty(n, int)
    for i, (xi, ei) in enumerate(zip(x, eps)):
        ax, aex = abs(xi), abs(ei * xi)
        if ax > a and aex > a:
            branch[i] = 0 if ei > 0 else 1
            exp[i] = abs(_logb(ei, a)) if ei > 0 else abs(_logb(-a * a / (ei * xi * xi), a))
        elif ax > a:
            branch[i], exp[i] = 2, abs(_logb(a / ax, a))
        elif aex > a:
            branch[i], exp[i] = 3, abs(_logb(a / aex, a))
        else:
            branch[i], exp[i] = 4, 0.0
        if ei > 0:
            emu[i] = abs(_logb((1 + mu * aex) / (1 + mu * ax), 1 + mu))
        else:
            emu[i] = abs(_logb((1 + mu * aex) * (1 + mu * ax), 1 + mu))
    err = max(np.max(np.abs(got - exp)), np.max(np.abs(gmu - emu)))
    covered = set(branch.tolist()) >= {0, 1, 2, 3} and (eps > 0).any() and (eps < 0).any()
    criterion(4, covered and err < 1e-12, f"max abs err {err:.1e}, branches {sorted(set(branch.tolist()))}")


def test_05_ratio_constancy(criterion):
    p = L.SltParams(10 ** (-3.1))
    v = [L.mslae(np.array([x]), np.array([2 * x]), p) for x in (0.01, 0.1, 0.5)]
    criterion(5, v[0] == v[1] == v[2], f"{v[0]!r} for all three")


def test_06_gradient_checks(criterion):
    t = time.perf_counter()
    rng = np.random.default_rng(6)
    # loss gradient, away from the kinks of |.| and the clip threshold
    p = L.SltParams(10 ** (-3.1))
    x = rng.uniform(-1, 1, 40)
    xh = x * rng.uniform(1.2, 2.0, 40) * rng.choice([-1, 1], 40)
    xh[np.abs(xh) < 0.01] = 0.05
    g = L.mslae_grad(x, xh, p)
    h = 1e-6
    loss_err = 0.0
    for i in range(xh.size):
        e = np.zeros_like(xh)
        e[i] = h
        num = (L.mslae(x, xh + e, p) - L.mslae(x, xh - e, p)) / (2 * h)
        loss_err = max(loss_err, abs(g[i] - num) / max(abs(num), 1e-9))
    # network backward on a small float64 net
    spec = R.NetworkSpec(2, 2, 2, resample_kernel=3)
    params = R.glorot_uniform_init(spec, 6, dtype=np.float64)
    params = {k: v + 0.05 * rng.standard_normal(v.shape) for k, v in params.items()}
    xin = rng.normal(size=(2, 2, 8, 8))
    r = rng.normal(size=xin.shape)

    def f(q):
        return float(np.sum(r * R.forward(q, spec, xin)))

    _, grads, _ = R.forward_backward(params, spec, xin, lambda y: r)
    f0, h = f(params), 1e-5
    net_err, kinks, n = 0.0, 0, 0
    for k in sorted(params):
        flat = params[k].ravel()
        for i in rng.choice(flat.size, min(5, flat.size), replace=False):
            q = {kk: vv.copy() for kk, vv in params.items()}
            q[k].ravel()[i] += h
            up = f(q)
            q[k].ravel()[i] -= 2 * h
            dn = f(q)
            ana = grads[k].ravel()[i]
            right, left = (up - f0) / h, (f0 - dn) / h
            scale = max(1e-3, abs(right), abs(left), abs(ana))
            if abs(right - left) > 1e-3 * scale:
                # a ReLU switches inside the step: compare with the one-sided slopes
                kinks += 1
                err = min(abs(ana - right), abs(ana - left)) / scale
            else:
                err = abs(ana - (up - dn) / (2 * h)) / scale
            net_err = max(net_err, err)
            n += 1
    dt = time.perf_counter() - t
    ok = (loss_err <= 1e-4 and net_err <= 1e-4 and kinks < 0.2 * n
          and spec.param_count() <= 5000 and dt < 60)
    criterion(6, ok, f"loss {loss_err:.1e}, network {net_err:.1e} "
                     f"({spec.param_count()} params, {n} checks, {kinks} at kinks), {dt:.1f} s")


def predicted_grating_lobe_mask(cfg, grid, target):
    """Pixels where the plane-wave receive delays alias at the upper band edge.

    For each pixel the per-element delay error against ``target`` is formed;
    its element-to-element step, in periods of the upper -6 dB frequency,
    is near one (weighted median over the aperture) on a grating lobe, and
    the pixel must lie on the target's echo isochrone.
    """
    pts = grid.points()
    tx = Transmitter.plane_wave()
    d, w = element_tables(cfg, pts)
    d0, _ = element_tables(cfg, target[None])
    d = d + tx_delay(tx, pts, cfg)[None] - (d0 + tx_delay(tx, target, cfg))
    f_hi = cfg.array.center_frequency * (1 + cfg.array.fractional_bandwidth / 2)
    step = np.abs(np.diff(d, axis=0)) * f_hi
    ww = 0.5 * (w[1:] + w[:-1])
    o = np.argsort(step, axis=0)
    ss, ws = np.take_along_axis(step, o, 0), np.take_along_axis(ww, o, 0)
    cw = np.cumsum(ws, axis=0) / ws.sum(axis=0)
    med = ss[np.argmax(cw >= 0.5, axis=0), np.arange(ss.shape[1])]
    lag = np.min(np.abs(d), axis=0) * cfg.transmit_frequency
    return ((med > 0.8) & (med < 1.2) & (lag < 1.0)).reshape(grid.shape)


@pytest.mark.slow
def test_07_grating_lobe_contrast(criterion):
    t = time.perf_counter()
    target = np.array([0.0, 0.0, 20e-3])
    lq, uq = make_preset_config("desk-lq"), make_preset_config("desk-uq")
    grid = make_grid(lq, x_range=(-22e-3, 22e-3), z_range=(2e-3, 45e-3))
    mask = predicted_grating_lobe_mask(lq, grid, target)
    pht = Phantom(target[None], np.array([1.0]))
    level = {}
    for cfg in (lq, uq):
        e = envelope(H.image_of(pht, cfg, grid)).pixels
        level[cfg.preset_name] = 20 * math.log10(e[mask].mean() / e.max())
    dt = time.perf_counter() - t
    gap = level["desk-lq"] - level["desk-uq"]
    criterion(7, mask.sum() > 100 and gap >= 20 and dt < 300,
              f"GL region {level['desk-lq']:.1f} dB (lq) vs {level['desk-uq']:.1f} dB (uq), "
              f"{mask.sum()} px, {dt:.0f} s")


@pytest.mark.slow
def test_08_gradient_slope(criterion, uq_batch):
    reps, mean, dt = uq_batch
    slope = -mean[("slope", "LG")]
    criterion(8, abs(slope - 1.82) <= 0.15 and dt < 600,
              f"slope {slope:.3f} dB/mm over {N_SEEDS} seeds, {dt:.0f} s")


@pytest.mark.slow
def test_09_inclusion_contrast(criterion, uq_batch):
    reps, mean, _ = uq_batch
    cr = mean[("CR", "I")]
    criterion(9, abs(cr + 36) <= 2, f"CR {cr:.2f} dB over {N_SEEDS} seeds")


@pytest.mark.slow
def test_10_training_smoke(criterion):
    t = time.perf_counter()
    ds = H.make_dataset(H.DatasetSpec(), 0)
    loss = L.make_loss("mslae(-62)")
    spec = R.NetworkSpec(in_channels=2, base_channels=4, depth=2)
    sched = R.TrainSchedule(steps=2000, batch_size=2, lr=1e-3, validate_every=250, seed=0)
    xs, ys = R._stack(ds["val"])
    base = R.evaluate_pairs(None, spec, xs, ys, loss)
    res = R.train(ds["train"], spec, loss, sched, ds["val"])
    end = R.evaluate_pairs(res.params, spec, xs, ys, loss)
    dt = time.perf_counter() - t
    ok = end["loss"] < base["loss"] and end["ssim"] > base["ssim"] and dt < 1800
    criterion(10, ok, f"val MSLAE {end['loss']:.4f} vs {base['loss']:.4f}, "
                      f"SSIM {end['ssim']:.4f} vs {base['ssim']:.4f}, {dt:.0f} s")


def test_11_residual_identity_and_shape(criterion):
    rng = np.random.default_rng(11)
    ok = True
    for spec in (R.NetworkSpec(2, 4, 2), R.NetworkSpec(1, 2, 3, "standard", "concatenated"),
                 R.NetworkSpec(2, 2, 1, resample_kernel=3)):
        x = rng.normal(size=(2, spec.in_channels, 16, 24))
        ok &= np.array_equal(R.forward(R.zero_params(spec), spec, x), x)
        y = R.forward(R.glorot_uniform_init(spec, 1, dtype=np.float64), spec, x)
        ok &= y.shape == x.shape
    grid = ImageGrid(np.arange(37) * 1e-4, 1e-3 + np.arange(53) * 1e-4)
    img = Image(grid, "IQ", rng.normal(size=grid.shape) + 1j * rng.normal(size=grid.shape))
    spec = R.NetworkSpec(2, 2, 2)
    out = R.pad_infer(R.zero_params(spec), spec, img)
    ok &= out.pixels.shape == img.pixels.shape and np.array_equal(out.pixels, img.pixels)
    criterion(11, bool(ok), "zero weights give the identity, shapes kept (incl. 37x53 padded)")


def test_12_evaluate_determinism(criterion, tmp_path):
    for k in (1, 2):
        assert cli_main(["evaluate", "--config", "desk-lq", "--seeds", "2", "--seed", "12",
                         "--out", str(tmp_path / f"run{k}")]) == 0
    names = sorted(p.relative_to(tmp_path / "run1") for p in (tmp_path / "run1").rglob("*.csv"))
    same = all((tmp_path / "run1" / n).read_bytes() == (tmp_path / "run2" / n).read_bytes()
               for n in names)
    criterion(12, len(names) == 3 and same, f"{len(names)} CSV files byte-identical")
