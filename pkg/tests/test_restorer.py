import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from usrecon import restorer as R
from usrecon.core import Image, ImageGrid
from usrecon.losses import make_loss


def _rand_params(spec, seed, scale=0.3):
    p = R.glorot_uniform_init(spec, seed, dtype=np.float64)
    rng = np.random.default_rng(seed)
    return {k: v + (scale * rng.normal(size=v.shape) if k.endswith(".b") else 0) for k, v in p.items()}


# --- spec and init ----------------------------------------------------------

def test_spec_validation():
    with pytest.raises(ValueError):
        R.NetworkSpec(block="residual", skip="concatenated")
    with pytest.raises(ValueError):
        R.NetworkSpec(in_channels=3)
    with pytest.raises(ValueError):
        R.NetworkSpec(resample_kernel=5)
    s = R.NetworkSpec(block="standard", skip="concatenated")
    assert R.NetworkSpec.from_dict(s.to_dict()) == s


@pytest.mark.parametrize("nc,depth,count", [(2, 1, 594), (4, 2, 9034)])
def test_param_count_hand_count(nc, depth, count):
    spec = R.NetworkSpec(2, nc, depth)
    assert spec.param_count() == count
    p = R.glorot_uniform_init(spec, 0)
    assert sum(v.size for v in p.values()) == count


def test_param_count_scales_about_four_times():
    a = R.NetworkSpec(1, 16, 4, resample_kernel=3).param_count()
    b = R.NetworkSpec(1, 32, 4, resample_kernel=3).param_count()
    assert b / a == pytest.approx(4.0, rel=0.01)
    # nominal counts 2 748 592 and 10 989 920, matched to 0.01 %
    assert a == pytest.approx(2748592, rel=1e-4)
    assert b == pytest.approx(10989920, rel=1e-4)


def test_glorot_limits_and_zero_bias():
    spec = R.NetworkSpec(2, 4, 1)
    p = R.glorot_uniform_init(spec, 7)
    w = p["enc0.a.w"]
    lim = math.sqrt(6 / 72)
    assert lim == pytest.approx(0.2887, abs=1e-4)
    assert np.all(np.abs(w) <= lim)
    assert np.abs(w).max() > 0.8 * lim
    assert all(np.all(v == 0) for k, v in p.items() if k.endswith(".b"))
    q = R.glorot_uniform_init(spec, 7)
    assert all(np.array_equal(p[k], q[k]) for k in p)


def test_check_params():
    spec = R.NetworkSpec(2, 2, 1)
    p = R.zero_params(spec)
    R.check_params(spec, p)
    p["expand.w"] = np.zeros((1, 1, 3, 3))
    with pytest.raises(ValueError):
        R.check_params(spec, p)


# --- forward --------------------------------------------------------------------

@pytest.mark.parametrize("spec", [R.NetworkSpec(2, 4, 2), R.NetworkSpec(1, 2, 3),
                                  R.NetworkSpec(2, 2, 2, "standard", "concatenated"),
                                  R.NetworkSpec(2, 2, 1, resample_kernel=3)])
def test_zero_params_is_identity(spec, rng):
    x = rng.normal(size=(2, spec.in_channels, 32, 24))
    assert np.array_equal(R.forward(R.zero_params(spec), spec, x), x)


@pytest.mark.parametrize("shape", [(32, 32), (64, 48)])
def test_shape_preserved(shape, rng):
    spec = R.NetworkSpec(2, 4, 2)
    p = R.glorot_uniform_init(spec, 1)
    x = rng.normal(size=(2,) + shape).astype(np.float32)
    y = R.forward(p, spec, x)
    assert y.shape == x.shape and y.dtype == np.float32


def test_forward_rejects_bad_shapes(rng):
    spec = R.NetworkSpec(2, 2, 2)
    p = R.zero_params(spec)
    with pytest.raises(ValueError):
        R.forward(p, spec, rng.normal(size=(2, 30, 32)))
    with pytest.raises(ValueError):
        R.forward(p, spec, rng.normal(size=(1, 32, 32)))


def test_conv_matches_direct_sum(rng):
    x = rng.normal(size=(1, 2, 7, 6))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    y, _ = R.conv_forward(x, w, b, 1)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    for o, i, j in [(0, 0, 0), (2, 6, 5), (1, 3, 2)]:
        want = b[o] + np.sum(w[o] * xp[0, :, i:i + 3, j:j + 3])
        assert y[0, o, i, j] == pytest.approx(want)
    y2, _ = R.conv_forward(x[..., :6, :], w[:, :, :2, :2], b, 2)
    assert y2.shape == (1, 3, 3, 3)
    assert y2[0, 1, 1, 2] == pytest.approx(b[1] + np.sum(w[1, :, :2, :2] * x[0, :, 2:4, 4:6]))


def test_transposed_conv_is_adjoint_of_strided_conv(rng):
    for k in (2, 3):
        x = rng.normal(size=(1, 3, 8, 6))
        w = rng.normal(size=(4, 3, k, k))
        y, _ = R.conv_forward(x, w, np.zeros(4), 2)
        z = rng.normal(size=y.shape)
        t = R.tconv_forward(z, w, np.zeros(3), 2)
        assert t.shape == x.shape
        assert np.vdot(y, z) == pytest.approx(np.vdot(x, t))


# --- backward --------------------------------------------------------------------

SPECS = [R.NetworkSpec(2, 2, 1), R.NetworkSpec(1, 2, 2, "standard", "concatenated"),
         R.NetworkSpec(2, 2, 2, resample_kernel=3)]


@pytest.mark.parametrize("spec", SPECS)
def test_backward_matches_finite_differences(spec):
    assert spec.param_count() <= 5000
    rng = np.random.default_rng(3)
    p = _rand_params(spec, 3)
    x = rng.normal(size=(2, spec.in_channels, 8, 8))
    r = rng.normal(size=x.shape)

    def loss(params):
        return float(np.sum(r * R.forward(params, spec, x)))

    _, grads, _ = R.forward_backward(p, spec, x, lambda y: r)
    l0 = loss(p)
    h = 1e-5
    worst, kinks, checked = 0.0, 0, 0
    for k in sorted(p):
        flat = p[k].ravel()
        for i in rng.choice(flat.size, min(6, flat.size), replace=False):
            q = {kk: vv.copy() for kk, vv in p.items()}
            q[k].ravel()[i] += h
            up = loss(q)
            q[k].ravel()[i] -= 2 * h
            dn = loss(q)
            ana = grads[k].ravel()[i]
            right, left = (up - l0) / h, (l0 - dn) / h
            scale = max(1e-3, abs(right), abs(left), abs(ana))
            if abs(right - left) > 1e-3 * scale:
                # a ReLU switches inside [-h, h]: the gradient is one of the one-sided slopes
                kinks += 1
                err = min(abs(ana - right), abs(ana - left)) / scale
            else:
                err = abs(ana - (up - dn) / (2 * h)) / scale
            worst = max(worst, err)
            checked += 1
    assert kinks < 0.2 * checked
    assert worst <= 1e-4


def test_input_gradient_directional_derivative():
    spec = R.NetworkSpec(2, 2, 1)
    rng = np.random.default_rng(4)
    p = _rand_params(spec, 4)
    x = rng.normal(size=(1, 2, 8, 8))
    r = rng.normal(size=x.shape)
    v = rng.normal(size=x.shape)
    _, _, dx = R.forward_backward(p, spec, x, lambda y: r)
    h = 1e-5
    num = (np.sum(r * R.forward(p, spec, x + h * v)) - np.sum(r * R.forward(p, spec, x - h * v))) / (2 * h)
    assert np.sum(dx * v) == pytest.approx(num, rel=1e-6)
    # with zero parameters only the outer residual path remains
    _, _, dx0 = R.forward_backward(R.zero_params(spec), spec, x, lambda y: r)
    np.testing.assert_array_equal(dx0, r)


def test_zero_loss_grad_gives_zero_grads(rng):
    spec = R.NetworkSpec(2, 2, 1)
    _, grads, _ = R.forward_backward(_rand_params(spec, 1), spec, rng.normal(size=(1, 2, 8, 8)),
                                     lambda y: np.zeros_like(y))
    assert all(np.all(g == 0) for g in grads.values())


# --- Adam -------------------------------------------------------------------------

def test_adam_first_step():
    p = {"w": np.array([1.0, -2.0])}
    s = R.AdamState.zeros_like(p)
    q, s2 = R.adam_step(p, s, {"w": np.ones(2)}, lr=5e-5)
    np.testing.assert_allclose(q["w"] - p["w"], -5e-5 / (1 + 1e-7))
    assert s2.t == 1 and s.t == 0
    assert np.all(p["w"] == [1.0, -2.0])


def test_adam_zero_grad_and_reproducible():
    p = {"w": np.array([0.5])}
    s = R.AdamState.zeros_like(p)
    for _ in range(3):
        p2, s = R.adam_step(p, s, {"w": np.zeros(1)})
        assert np.array_equal(p2["w"], p["w"])
    g = {"w": np.array([0.3])}
    a = R.adam_step(p, s, g, 1e-3)[0]["w"]
    b = R.adam_step(p, s, g, 1e-3)[0]["w"]
    assert np.array_equal(a, b)


# --- padding ------------------------------------------------------------------------

def test_pad_shape_full_grid():
    assert R.pad_shape((596, 1600), 16) == (608, 1600)
    assert R.pad_shape((64, 64), 4) == (64, 64)


def test_pad_tensor_symmetric():
    t, crop = R.pad_tensor(np.ones((2, 5, 8)), 4)
    assert t.shape == (2, 8, 8)
    assert np.all(t[:, 1:6] == 1) and np.all(t[:, 0] == 0) and np.all(t[:, 6:] == 0)
    assert np.array_equal(t[crop], np.ones((2, 5, 8)))


@settings(max_examples=10)
@given(st.integers(5, 40), st.integers(5, 40))
def test_pad_infer_identity(nx, nz):
    spec = R.NetworkSpec(2, 2, 2)
    g = ImageGrid(np.arange(nx) * 1e-4, 1e-3 + np.arange(nz) * 1e-4)
    rng = np.random.default_rng(nx * 100 + nz)
    px = (rng.normal(size=g.shape) + 1j * rng.normal(size=g.shape)).astype(np.complex64)
    out = R.pad_infer(R.zero_params(spec, np.float32), spec, Image(g, "IQ", px))
    assert out.pixels.shape == g.shape
    np.testing.assert_array_equal(out.pixels, px.astype(np.complex128))


def test_image_tensor_round_trip(rng):
    z = rng.normal(size=(3, 4)) + 1j * rng.normal(size=(3, 4))
    t = R.image_to_tensor(z, np.float64)
    assert t.shape == (2, 3, 4)
    np.testing.assert_array_equal(R.tensor_to_pixels(t), z)
    assert R.image_to_tensor(z.real).shape == (1, 3, 4)


# --- training -----------------------------------------------------------------------

def _toy_pairs(n, seed, shape=(16, 16)):
    rng = np.random.default_rng(seed)
    g = ImageGrid(np.arange(shape[0]) * 1e-4, 1e-3 + np.arange(shape[1]) * 1e-4)
    out = []
    for _ in range(n):
        ref = rng.normal(size=shape) + 1j * rng.normal(size=shape)
        noisy = ref + 0.5 * (rng.normal(size=shape) + 1j * rng.normal(size=shape))
        out.append((Image(g, "IQ", noisy), Image(g, "IQ", ref)))
    return out


def test_train_lr_zero_keeps_params():
    spec = R.NetworkSpec(2, 2, 1)
    pairs = _toy_pairs(1, 0)
    init = R.glorot_uniform_init(spec, 3)
    res = R.train(pairs, spec, make_loss("mse"), R.TrainSchedule(steps=5, batch_size=1, lr=0.0),
                  init=init)
    assert all(np.array_equal(res.params[k], init[k]) for k in init)
    assert len(set(res.history["train_loss"])) == 1


def test_train_deterministic_and_improves():
    spec = R.NetworkSpec(2, 2, 1)
    pairs = _toy_pairs(6, 1)
    val = _toy_pairs(2, 2)
    sched = R.TrainSchedule(steps=60, batch_size=2, lr=3e-3, validate_every=20, seed=5)
    a = R.train(pairs, spec, make_loss("mse"), sched, val_pairs=val)
    b = R.train(pairs, spec, make_loss("mse"), sched, val_pairs=val)
    assert a.history == b.history
    assert a.history["val_step"] == [20, 40, 60]
    assert np.mean(a.history["train_loss"][-10:]) < np.mean(a.history["train_loss"][:10])
    best = int(np.argmax(a.history["val_ssim"]))
    assert a.best_step == a.history["val_step"][best]


def test_train_empty_and_plane_mismatch():
    with pytest.raises(ValueError):
        R.train([], R.NetworkSpec(), make_loss("mse"))
    with pytest.raises(ValueError):
        R.train(_toy_pairs(1, 0), R.NetworkSpec(1, 2, 1), make_loss("mse"))


def test_evaluate_pairs_baseline_identity():
    pairs = _toy_pairs(2, 3)
    xs = np.stack([R.image_to_tensor(a.pixels) for a, _ in pairs])
    r = R.evaluate_pairs(None, R.NetworkSpec(2, 2, 1), xs, xs, make_loss("mse"))
    assert r["ssim"] == pytest.approx(1.0) and r["loss"] == 0.0


def test_checkpoint_round_trip(tmp_path):
    spec = R.NetworkSpec(2, 2, 1)
    p = R.glorot_uniform_init(spec, 9)
    R.save_checkpoint(tmp_path / "ck", p, spec, step=12, info={"ssim": 0.5})
    q, spec2, man = R.load_checkpoint(tmp_path / "ck")
    assert spec2 == spec and man["step"] == 12 and man["metrics"] == {"ssim": 0.5}
    assert all(np.array_equal(p[k], q[k]) and q[k].dtype == p[k].dtype for k in p)
