"""Tensor files: raw little-endian binary plus a JSON sidecar.

``<stem>.bin`` holds the values in C order, ``<stem>.json`` holds
``{"shape", "dtype", "axes", "meta"}``. ``dtype`` is ``f32`` or ``c64``
(interleaved re/im float32). ``f64`` / ``c128`` are accepted for data that
must round-trip exactly, such as scatterer positions.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from usrecon.core import Image, ImageGrid, ImagingConfig, RawData
from usrecon.metrics import Region

DTYPES = {"f32": "<f4", "c64": "<c8", "f64": "<f8", "c128": "<c16"}


def _paths(stem):
    stem = Path(stem)
    return stem.parent / (stem.name + ".bin"), stem.parent / (stem.name + ".json")


def write_tensor(stem, a, axes=None, meta=None, dtype=None) -> Path:
    """Write ``a``; ``dtype`` defaults to ``c64`` for complex and ``f32`` otherwise."""
    a = np.asarray(a)
    if dtype is None:
        dtype = "c64" if np.iscomplexobj(a) else "f32"
    if dtype not in DTYPES:
        raise ValueError(f"unsupported dtype {dtype!r}")
    if np.iscomplexobj(a) and dtype.startswith("f"):
        raise ValueError("complex data needs a complex dtype")
    axes = list(axes) if axes is not None else [f"d{i}" for i in range(a.ndim)]
    if len(axes) != a.ndim:
        raise ValueError("one axis label per dimension")
    bin_path, js_path = _paths(stem)
    bin_path.parent.mkdir(parents=True, exist_ok=True)
    bin_path.write_bytes(np.ascontiguousarray(a, dtype=DTYPES[dtype]).tobytes())
    side = dict(shape=list(a.shape), dtype=dtype, axes=axes, meta=meta or {})
    js_path.write_text(json.dumps(side, indent=2, sort_keys=True))
    return bin_path


def read_sidecar(stem) -> dict:
    return json.loads(_paths(stem)[1].read_text())


def read_tensor(stem, with_sidecar: bool = False):
    bin_path, _ = _paths(stem)
    side = read_sidecar(stem)
    if side.get("dtype") not in DTYPES:
        raise ValueError(f"unsupported dtype {side.get('dtype')!r} in {stem}")
    shape = tuple(int(n) for n in side["shape"])
    a = np.frombuffer(bin_path.read_bytes(), dtype=DTYPES[side["dtype"]])
    if a.size != int(np.prod(shape)):
        raise ValueError(f"{bin_path} holds {a.size} values, sidecar says {shape}")
    a = a.reshape(shape).astype(a.dtype.newbyteorder("="))
    return (a, side) if with_sidecar else a


# ---------------------------------------------------------------------------
# domain objects


def save_config(path, cfg: ImagingConfig):
    Path(path).write_text(cfg.to_json())


def load_config(path) -> ImagingConfig:
    return ImagingConfig.from_json(Path(path).read_text())


def save_raw(stem, raw: RawData):
    write_tensor(stem, raw.samples, axes=["transmit", "element", "time"],
                 meta=dict(t0=raw.t0, fs=raw.fs, config_id=raw.config_id))


def load_raw(stem) -> RawData:
    a, side = read_tensor(stem, True)
    m = side["meta"]
    return RawData(a.astype(np.float64), float(m["t0"]), float(m["fs"]), m.get("config_id", ""))


def save_image(stem, img: Image):
    write_tensor(stem, img.pixels, axes=["x", "z"],
                 meta=dict(kind=img.kind, range_db=img.range_db, grid=img.grid.to_dict()))


def load_image(stem) -> Image:
    a, side = read_tensor(stem, True)
    m = side["meta"]
    px = a.astype(np.complex128 if np.iscomplexobj(a) else np.float64)
    return Image(ImageGrid.from_dict(m["grid"]), m["kind"], px, m.get("range_db"))


def save_phantom(stem, pht):
    """Positions (f64) and amplitudes (f64) as tensors; regions in the sidecar metadata."""
    stem = Path(stem)
    write_tensor(stem.parent / (stem.name + ".positions"), pht.positions, ["scatterer", "xyz"],
                 dtype="f64")
    write_tensor(stem, pht.amplitudes, ["scatterer"], dtype="f64",
                 meta=dict(seed=pht.seed, bounds=list(pht.bounds) if pht.bounds else None,
                           regions=[r.to_dict() for r in pht.regions]))


def load_phantom(stem):
    from usrecon.phantom import Phantom

    stem = Path(stem)
    amp, side = read_tensor(stem, True)
    pos = read_tensor(stem.parent / (stem.name + ".positions"))
    m = side["meta"]
    regions = tuple(Region.from_dict(r) for r in m.get("regions", []))
    return Phantom(pos.astype(np.float64), amp.astype(np.float64), regions, m.get("seed"),
                   tuple(m["bounds"]) if m.get("bounds") else None)
