"""Residual multi-scale convolutional image restorer in plain numpy.

Layout (``depth`` stages)::

    x -> expand(3x3) -> [block -> down(k, stride 2)] * depth -> block
      -> [up(k, stride 2) -> + skip -> block] * depth -> contract(3x3) -> + x

Down-sampling convolutions double the channel count, transposed convolutions
halve it. The outer residual means the network predicts a correction that is
added to its input, so an all-zero parameter set is the identity map.

Tensors are ``(batch, channels, height, width)``. Complex images enter as
two planes (real, imaginary).
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from usrecon.core import Image
from usrecon import metrics

BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-7
DEFAULT_LR = 5e-5


@dataclass(frozen=True)
class NetworkSpec:
    in_channels: int = 2
    base_channels: int = 4
    depth: int = 2
    block: str = "residual"
    skip: str = "additive"
    resample_kernel: int = 2

    def __post_init__(self):
        if self.in_channels not in (1, 2):
            raise ValueError("in_channels must be 1 (RF) or 2 (IQ)")
        if self.base_channels < 1 or self.depth < 0:
            raise ValueError("base_channels must be >= 1 and depth >= 0")
        if self.block not in ("standard", "residual"):
            raise ValueError(f"unknown block {self.block!r}")
        if self.skip not in ("additive", "concatenated"):
            raise ValueError(f"unknown skip {self.skip!r}")
        if self.block == "residual" and self.skip != "additive":
            raise ValueError("residual blocks need additive skip connections")
        if self.resample_kernel not in (2, 3):
            raise ValueError("resample_kernel must be 2 or 3")

    @property
    def multiple(self) -> int:
        return 2 ** self.depth

    def layers(self) -> list:
        """``(name, kind, c_in, c_out, kernel)`` for every layer in forward order."""
        c, k = self.base_channels, self.resample_kernel
        out = [("expand", "conv", self.in_channels, c, 3)]
        for lv in range(self.depth):
            cc = c * 2 ** lv
            out += [(f"enc{lv}.a", "conv", cc, cc, 3), (f"enc{lv}.b", "conv", cc, cc, 3),
                    (f"down{lv}", "down", cc, 2 * cc, k)]
        cm = c * 2 ** self.depth
        out += [("mid.a", "conv", cm, cm, 3), ("mid.b", "conv", cm, cm, 3)]
        for lv in reversed(range(self.depth)):
            cc = c * 2 ** lv
            cin = 2 * cc if self.skip == "concatenated" else cc
            out += [(f"up{lv}", "up", 2 * cc, cc, k),
                    (f"dec{lv}.a", "conv", cin, cc, 3), (f"dec{lv}.b", "conv", cc, cc, 3)]
        out.append(("contract", "conv", c, self.in_channels, 3))
        return out

    def param_count(self) -> int:
        return sum(ci * co * k * k + co for _, _, ci, co, k in self.layers())

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(**d)


# ---------------------------------------------------------------------------
# convolution primitives


def _pad(k: int) -> int:
    return (k - 1) // 2


def _cols(x, k, stride, pad, ho, wo):
    """Patches of the zero-padded input, ``(B, C, k, k, ho, wo)``."""
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    out = np.empty(x.shape[:2] + (k, k, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return out


def _uncols(dcols, shape, k, stride, pad):
    """Adjoint of :func:`_cols`: scatter-add patches back onto an input of ``shape``."""
    b, c, h, w = shape
    ho, wo = dcols.shape[-2:]
    xp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, i, j]
    return xp[:, :, pad:pad + h, pad:pad + w] if pad else xp


def _out_size(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def conv_forward(x, w, b, stride=1):
    """Cross-correlation with ``w`` of shape ``(c_out, c_in, k, k)`` and "same"-style padding."""
    k = w.shape[-1]
    pad = _pad(k)
    ho, wo = _out_size(x.shape[2], k, stride, pad), _out_size(x.shape[3], k, stride, pad)
    cols = _cols(x, k, stride, pad, ho, wo)
    y = np.tensordot(cols, w, axes=([1, 2, 3], [1, 2, 3]))  # B, ho, wo, c_out
    y = np.ascontiguousarray(y.transpose(0, 3, 1, 2)) + b[None, :, None, None]
    return y, cols


def conv_backward(dy, x_shape, cols, w, stride=1):
    k = w.shape[-1]
    dw = np.tensordot(dy, cols, axes=([0, 2, 3], [0, 4, 5]))
    db = dy.sum(axis=(0, 2, 3))
    dcols = np.tensordot(dy, w, axes=([1], [0]))  # B, ho, wo, c_in, k, k
    dcols = dcols.transpose(0, 3, 4, 5, 1, 2)
    dx = _uncols(dcols, x_shape, k, stride, _pad(k))
    return dx, dw, db


def tconv_forward(x, w, b, stride=2):
    """Transposed convolution, ``w`` of shape ``(c_in, c_out, k, k)``; output ``stride`` x larger.

    Defined as the input-adjoint of the strided convolution with the same kernel.
    """
    k = w.shape[-1]
    bsz, _, h, wd = x.shape
    shape = (bsz, w.shape[1], stride * h, stride * wd)
    dcols = np.tensordot(x, w, axes=([1], [0])).transpose(0, 3, 4, 5, 1, 2)
    y = _uncols(dcols, shape, k, stride, _pad(k)) + b[None, :, None, None]
    return y


def tconv_backward(dy, x, w, stride=2):
    k = w.shape[-1]
    h, wd = x.shape[2:]
    cols = _cols(dy, k, stride, _pad(k), h, wd)  # B, c_out, k, k, h, w
    dx = np.tensordot(cols, w, axes=([1, 2, 3], [1, 2, 3])).transpose(0, 3, 1, 2)
    dw = np.tensordot(x, cols, axes=([0, 2, 3], [0, 4, 5]))
    db = dy.sum(axis=(0, 2, 3))
    return np.ascontiguousarray(dx), dw, db


# ---------------------------------------------------------------------------
# parameters


def glorot_uniform_init(spec: NetworkSpec, seed, dtype=np.float32) -> dict:
    """Kernels ~ U(-L, L) with ``L = sqrt(6 / (fan_in + fan_out))``; zero biases."""
    rng = np.random.Generator(np.random.Philox(seed))
    params = {}
    for name, kind, ci, co, k in spec.layers():
        lim = math.sqrt(6.0 / ((ci + co) * k * k))
        shape = (ci, co, k, k) if kind == "up" else (co, ci, k, k)
        params[name + ".w"] = rng.uniform(-lim, lim, size=shape).astype(dtype)
        params[name + ".b"] = np.zeros(co, dtype=dtype)
    return params


def zero_params(spec: NetworkSpec, dtype=np.float64) -> dict:
    p = glorot_uniform_init(spec, 0, dtype)
    return {k: np.zeros_like(v) for k, v in p.items()}


def check_params(spec: NetworkSpec, params: dict):
    ref = glorot_uniform_init(spec, 0)
    if set(ref) != set(params):
        raise ValueError("parameter names do not match the network spec")
    for k, v in ref.items():
        if params[k].shape != v.shape:
            raise ValueError(f"parameter {k} has shape {params[k].shape}, expected {v.shape}")


# ---------------------------------------------------------------------------
# forward / backward


def _relu(x):
    return np.maximum(x, 0)


def _check_input(spec, x):
    if x.ndim != 4 or x.shape[1] != spec.in_channels:
        raise ValueError(f"expected (batch, {spec.in_channels}, H, W) input, got {x.shape}")
    m = spec.multiple
    if x.shape[2] % m or x.shape[3] % m:
        raise ValueError(f"spatial size {x.shape[2:]} not divisible by {m}; pad first")


class _Tape:
    """Records the forward pass so it can be replayed in reverse."""

    def __init__(self, params):
        self.p = params
        self.ops = []

    def conv(self, name, x, stride=1):
        y, cols = conv_forward(x, self.p[name + ".w"], self.p[name + ".b"], stride)
        self.ops.append(("conv", name, x.shape, cols, stride))
        return y

    def up(self, name, x):
        y = tconv_forward(x, self.p[name + ".w"], self.p[name + ".b"])
        self.ops.append(("up", name, x))
        return y


def _block(tape, spec, name, h):
    if spec.block == "residual":
        tape.ops.append(("block_in",))
    a = _relu(tape.conv(name + ".a", h))
    tape.ops.append(("relu", a > 0))
    z = tape.conv(name + ".b", a)
    if spec.block == "residual":
        tape.ops.append(("fork", None))
        z = z + h
    out = _relu(z)
    tape.ops.append(("relu", out > 0))
    return out


def _run(params, spec: NetworkSpec, x):
    tape = _Tape(params)
    h = tape.conv("expand", x)
    skips = []
    for lv in range(spec.depth):
        h = _block(tape, spec, f"enc{lv}", h)
        skips.append(h)
        tape.ops.append(("save", lv))
        h = tape.conv(f"down{lv}", h, stride=2)
    h = _block(tape, spec, "mid", h)
    for lv in reversed(range(spec.depth)):
        h = tape.up(f"up{lv}", h)
        if spec.skip == "additive":
            h = h + skips[lv]
        else:
            h = np.concatenate([h, skips[lv]], axis=1)
        tape.ops.append(("merge", lv, h.shape[1]))
        h = _block(tape, spec, f"dec{lv}", h)
    r = tape.conv("contract", h)
    return x + r, tape


def forward(params: dict, spec: NetworkSpec, x: np.ndarray) -> np.ndarray:
    """Network output for a ``(B, C, H, W)`` batch (or a single ``(C, H, W)`` tensor)."""
    single = x.ndim == 3
    xb = x[None] if single else x
    _check_input(spec, xb)
    y, _ = _run(params, spec, xb)
    return y[0] if single else y


def forward_backward(params: dict, spec: NetworkSpec, x: np.ndarray, loss_grad):
    """Output and parameter gradients.

    ``loss_grad`` is either the gradient w.r.t. the output (an array) or a
    callable mapping the output to that gradient. Returns ``(y, grads, dx)``
    where ``dx`` is the gradient w.r.t. the input.
    """
    _check_input(spec, x)
    y, tape = _run(params, spec, x)
    g = loss_grad(y) if callable(loss_grad) else np.asarray(loss_grad, dtype=y.dtype)
    if g.shape != y.shape:
        raise ValueError("loss gradient must match the output shape")
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    dx_outer = g
    skip_grads = {}
    res_stack = []
    d = g
    for op in reversed(tape.ops):
        kind = op[0]
        if kind == "conv":
            _, name, xshape, cols, stride = op
            d, dw, db = conv_backward(d, xshape, cols, params[name + ".w"], stride)
            grads[name + ".w"] += dw
            grads[name + ".b"] += db
        elif kind == "up":
            _, name, xin = op
            d, dw, db = tconv_backward(d, xin, params[name + ".w"])
            grads[name + ".w"] += dw
            grads[name + ".b"] += db
        elif kind == "relu":
            d = d * op[1]
        elif kind == "fork":
            # the block input also receives d through the internal skip
            res_stack.append(d)
        elif kind == "merge":
            _, lv, ch = op
            if spec.skip == "additive":
                skip_grads[lv] = d
            else:
                c = ch // 2
                skip_grads[lv] = d[:, c:]
                d = d[:, :c]
        elif kind == "save":
            d = d + skip_grads.pop(op[1])
        elif kind == "block_in":
            d = d + res_stack.pop()
    return y, grads, d + dx_outer


def loss_and_grads(params: dict, spec: NetworkSpec, x: np.ndarray, ref: np.ndarray, loss):
    """Loss value (mean over the batch) and parameter gradients."""
    box = {}

    def g(y):
        box["value"] = loss.value(ref, y)
        return loss.grad(ref, y).astype(y.dtype, copy=False)

    y, grads, _ = forward_backward(params, spec, x, g)
    return box["value"], grads, y


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, 0)


def adam_step(params: dict, state: AdamState, grads: dict, lr: float = DEFAULT_LR,
              beta1: float = BETA1, beta2: float = BETA2, eps: float = ADAM_EPS):
    """Bias-corrected Adam update. Returns new ``(params, state)``; inputs are not modified."""
    t = state.t + 1
    new_p, new_m, new_v = {}, {}, {}
    c1, c2 = 1 - beta1 ** t, 1 - beta2 ** t
    for k, p in params.items():
        g = grads[k]
        m = beta1 * state.m[k] + (1 - beta1) * g
        v = beta2 * state.v[k] + (1 - beta2) * g * g
        step = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_p[k] = (p - step).astype(p.dtype, copy=False)
        new_m[k], new_v[k] = m.astype(p.dtype, copy=False), v.astype(p.dtype, copy=False)
    return new_p, AdamState(new_m, new_v, t)


# ---------------------------------------------------------------------------
# image plumbing


def image_to_tensor(img, dtype=np.float32) -> np.ndarray:
    """``(C, n_x, n_z)`` planes: one for RF, (real, imaginary) for IQ."""
    px = img.pixels if isinstance(img, Image) else np.asarray(img)
    if np.iscomplexobj(px):
        return np.stack([px.real, px.imag]).astype(dtype)
    return px[None].astype(dtype)


def tensor_to_pixels(t: np.ndarray) -> np.ndarray:
    if t.shape[0] == 2:
        return t[0].astype(np.float64) + 1j * t[1].astype(np.float64)
    return t[0].astype(np.float64)


def pad_shape(shape, multiple: int) -> tuple:
    return tuple(int(math.ceil(n / multiple) * multiple) for n in shape)


def pad_tensor(t: np.ndarray, multiple: int):
    """Symmetric zero padding of the last two axes; returns ``(padded, slices)``."""
    target = pad_shape(t.shape[-2:], multiple)
    pads, sl = [], []
    for n, m in zip(t.shape[-2:], target):
        lo = (m - n) // 2
        pads.append((lo, m - n - lo))
        sl.append(slice(lo, lo + n))
    full = [(0, 0)] * (t.ndim - 2) + pads
    return np.pad(t, full), (Ellipsis, sl[0], sl[1])


def pad_infer(params: dict, spec: NetworkSpec, img: Image) -> Image:
    """Pad to a supported size, run the network and crop back to the original grid."""
    t = image_to_tensor(img, dtype=next(iter(params.values())).dtype)
    if t.shape[0] != spec.in_channels:
        raise ValueError(f"image has {t.shape[0]} planes, network expects {spec.in_channels}")
    tp, crop = pad_tensor(t, spec.multiple)
    y = forward(params, spec, tp)[crop]
    return Image(img.grid, img.kind, tensor_to_pixels(y), img.range_db)


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainSchedule:
    steps: int = 2000
    batch_size: int = 2
    lr: float = DEFAULT_LR
    validate_every: int = 100
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    params: dict
    best_step: int
    history: dict = field(default_factory=dict)


def _stack(pairs):
    xs = np.stack([image_to_tensor(a) for a, _ in pairs])
    ys = np.stack([image_to_tensor(b) for _, b in pairs])
    return xs, ys


def evaluate_pairs(params, spec, xs, ys, loss=None) -> dict:
    """Mean PSNR / SSIM (B-mode window) and optionally the loss over a set of pairs."""
    out = {"psnr": [], "ssim": [], "loss": []}
    for x, y in zip(xs, ys):
        pred = forward(params, spec, x) if params is not None else x
        a, b = tensor_to_pixels(pred), tensor_to_pixels(y)
        out["psnr"].append(metrics.psnr(metrics.to_db(np.abs(b)), metrics.to_db(np.abs(a))))
        out["ssim"].append(metrics.ssim(metrics.to_db(np.abs(b)), metrics.to_db(np.abs(a))))
        if loss is not None:
            out["loss"].append(loss.value(y.astype(np.float64), pred.astype(np.float64)))
    return {k: float(np.mean(v)) for k, v in out.items() if v}


def train(pairs, spec: NetworkSpec, loss, schedule: TrainSchedule = TrainSchedule(),
          val_pairs=None, init=None, log=None) -> TrainResult:
    """Mini-batch Adam training on ``(input, reference)`` image pairs.

    Batches are drawn from a per-epoch shuffle. Every ``validate_every`` steps
    (and after the last one) validation PSNR / SSIM are computed and the
    parameters with the best validation SSIM are kept.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("empty training set")
    xs, ys = _stack(pairs)
    if xs.shape[1] != spec.in_channels:
        raise ValueError(f"images have {xs.shape[1]} planes, network expects {spec.in_channels}")
    if val_pairs is not None:
        vxs, vys = _stack(val_pairs)
    params = init if init is not None else glorot_uniform_init(spec, schedule.seed)
    params = {k: v.copy() for k, v in params.items()}
    state = AdamState.zeros_like(params)
    rng = np.random.Generator(np.random.Philox(schedule.seed + 1))
    order, pos = rng.permutation(len(xs)), 0
    hist = {"step": [], "train_loss": [], "val_step": [], "val_psnr": [], "val_ssim": [],
            "val_loss": []}
    best, best_step, best_ssim = copy.deepcopy(params), 0, -np.inf

    def validate(step):
        nonlocal best, best_step, best_ssim
        if val_pairs is None:
            return
        r = evaluate_pairs(params, spec, vxs, vys, loss)
        hist["val_step"].append(step)
        hist["val_psnr"].append(r["psnr"])
        hist["val_ssim"].append(r["ssim"])
        hist["val_loss"].append(r["loss"])
        if log:
            log(f"step {step}: val psnr {r['psnr']:.3f} ssim {r['ssim']:.4f} loss {r['loss']:.5g}")
        if r["ssim"] > best_ssim:
            best, best_step, best_ssim = copy.deepcopy(params), step, r["ssim"]

    for step in range(1, schedule.steps + 1):
        idx = []
        while len(idx) < schedule.batch_size:
            if pos == len(order):
                order, pos = rng.permutation(len(xs)), 0
            take = min(schedule.batch_size - len(idx), len(order) - pos)
            idx.extend(order[pos:pos + take])
            pos += take
        value, grads, _ = loss_and_grads(params, spec, xs[idx], ys[idx], loss)
        params, state = adam_step(params, state, grads, schedule.lr)
        hist["step"].append(step)
        hist["train_loss"].append(float(value))
        if step % schedule.validate_every == 0 or step == schedule.steps:
            validate(step)
    if val_pairs is None:
        best, best_step = params, schedule.steps
    return TrainResult(best, best_step, hist)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params: dict, spec: NetworkSpec, step: int = 0, info: dict | None = None):
    """Parameters as ``<path>/<name>`` tensor files plus ``manifest.json``."""
    from usrecon import tensorio

    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    names = sorted(params)
    for k in names:
        tensorio.write_tensor(path / k, params[k])
    manifest = dict(spec=spec.to_dict(), step=int(step), params=names, metrics=info or {})
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_checkpoint(path):
    from usrecon import tensorio

    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    spec = NetworkSpec.from_dict(manifest["spec"])
    params = {k: tensorio.read_tensor(path / k) for k in manifest["params"]}
    check_params(spec, params)
    return params, spec, manifest
