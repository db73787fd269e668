"""Command-line entry point: ``usrecon <command> [options]``.

Every command reads its inputs from files and writes its outputs to ``--out``,
so stages can be chained or rerun independently. Exit status is 0 on success,
2 on usage errors and 1 on runtime errors.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from usrecon import harness as H
from usrecon import metrics as M
from usrecon import restorer as R
from usrecon import tensorio as T
from usrecon.core import PRESETS, ImagingConfig, make_grid, make_preset_config
from usrecon.losses import make_loss

DEFAULT_RANGE_DB = 60.0

# run-config keys and their defaults; see README for the schema
DEFAULTS = {
    "imaging": "desk-uq",
    "settings": {},
    "grid": None,
    "phantom": {"kind": "test"},
    "dataset": {},
    "network": {},
    "train": {},
    "render": {"range_db": DEFAULT_RANGE_DB},
}


def load_run_config(arg: str | None) -> dict:
    """Run configuration from a JSON file; a bare preset name is accepted too."""
    cfg = json.loads(json.dumps(DEFAULTS))
    if arg is None:
        return cfg
    p = Path(arg)
    if p.is_file():
        user = json.loads(p.read_text())
        if not isinstance(user, dict):
            raise ValueError(f"{arg}: run config must be a JSON object")
        unknown = set(user) - set(DEFAULTS)
        if unknown:
            raise ValueError(f"{arg}: unknown keys {sorted(unknown)}")
        cfg.update(user)
    elif arg.lower() in {n.lower() for n in PRESETS}:
        cfg["imaging"] = arg
    else:
        raise FileNotFoundError(f"config {arg!r} is neither a file nor a preset name")
    return cfg


def imaging_of(run: dict) -> ImagingConfig:
    im = run["imaging"]
    if isinstance(im, str):
        return make_preset_config(im)
    return ImagingConfig.from_dict(im)


def grid_of(run: dict, cfg: ImagingConfig):
    g = run.get("grid")
    if not g:
        return H.phantom_grid(cfg)
    return make_grid(cfg, x_range=g.get("x_range"), z_range=tuple(g.get("z_range", (1e-3, 60e-3))),
                     spacing=g.get("spacing"), shape=g.get("shape"))


def _stem(path, name: str) -> Path:
    """``path`` itself if it is a tensor stem, else ``path/name``."""
    p = Path(path)
    if (p.parent / (p.name + ".json")).is_file():
        return p
    return p / name


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_phantom(a, run):
    from usrecon.phantom import make_test_phantom, make_training_phantom

    cfg = imaging_of(run)
    spec = dict(run["phantom"])
    kind = spec.pop("kind", "test")
    settings = H.PipelineSettings.from_dict(run["settings"])
    if kind == "test":
        pht = make_test_phantom(cfg, a.seed, density_per_cell=settings.density_per_cell)
    elif kind == "training":
        ds = H.DatasetSpec.from_dict(run["dataset"])
        pht = make_training_phantom(cfg, a.seed, tuple(spec.get("domain", ds.domain)),
                                    int(spec.get("n_ellipsoids", ds.n_ellipsoids)),
                                    density_per_cell=settings.density_per_cell)
    else:
        raise ValueError(f"unknown phantom kind {kind!r}")
    out = Path(a.out)
    T.save_phantom(out / "phantom", pht)
    T.save_config(out / "config.json", cfg)
    print(f"{pht.n_scatterers} scatterers -> {out / 'phantom'}")


def cmd_simulate(a, run):
    from usrecon.phantom import make_rng
    from usrecon.simulator import default_waveform, simulate_raw

    cfg = imaging_of(run)
    settings = H.PipelineSettings.from_dict(run["settings"])
    pht = T.load_phantom(_stem(a.phantom, "phantom"))
    rng = make_rng(a.seed) if settings.noise_snr_db is not None else None
    raw = simulate_raw(pht, cfg, default_waveform(cfg), settings.noise_snr_db, rng,
                       oversample=settings.sim_oversample)
    out = Path(a.out)
    T.save_raw(out / "raw", raw)
    T.save_config(out / "config.json", cfg)
    print(f"raw data {raw.samples.shape} -> {out / 'raw'}")


def cmd_beamform(a, run):
    from usrecon.beamform import reconstruct

    raw_stem = _stem(a.raw, "raw")
    cfg_file = raw_stem.parent / "config.json"
    cfg = T.load_config(cfg_file) if a.config is None and cfg_file.is_file() else imaging_of(run)
    settings = H.PipelineSettings.from_dict(run["settings"])
    norm = None
    if a.normalization is not None:
        try:
            norm = float(a.normalization)
        except ValueError:
            norm = float(json.loads(Path(a.normalization).read_text())[cfg.preset_name])
    img = reconstruct(T.load_raw(raw_stem), cfg, grid_of(run, cfg), normalization=norm,
                      analytic=settings.analytic, reweighting=settings.reweighting,
                      upsample=settings.upsample)
    out = Path(a.out)
    T.save_image(out / "image", img)
    T.save_config(out / "config.json", cfg)
    print(f"image {img.grid.shape} -> {out / 'image'}")


def cmd_dataset(a, run):
    spec = H.DatasetSpec.from_dict(run["dataset"])
    settings = H.PipelineSettings.from_dict(run["settings"])
    ds = H.make_dataset(spec, a.seed, settings, log=lambda s: print(s, file=sys.stderr))
    out = Path(a.out)
    for split in ("train", "val"):
        for k, (x, y) in enumerate(ds[split]):
            T.save_image(out / split / f"input_{k:05d}", x)
            T.save_image(out / split / f"reference_{k:05d}", y)
    _write_json(out / "normalization.json", ds["normalization"])
    _write_json(out / "dataset.json", dict(spec=spec.to_dict(), settings=settings.to_dict(),
                                           seed=a.seed, n_train=len(ds["train"]),
                                           n_val=len(ds["val"])))
    print(f"{len(ds['train'])} training / {len(ds['val'])} validation pairs -> {out}")


def load_pairs(directory) -> list:
    d = Path(directory)
    ins = sorted(d.glob("input_*.json"))
    pairs = []
    for f in ins:
        k = f.stem.split("_", 1)[1]
        pairs.append((T.load_image(d / f"input_{k}"), T.load_image(d / f"reference_{k}")))
    return pairs


def cmd_train(a, run):
    data = Path(a.data)
    train_pairs, val_pairs = load_pairs(data / "train"), load_pairs(data / "val")
    if not train_pairs:
        raise ValueError(f"no training pairs under {data / 'train'}")
    tcfg = dict(run["train"])
    loss = make_loss(tcfg.pop("loss", "mslae(-62)"))
    sched = R.TrainSchedule(**{**tcfg, "seed": a.seed})
    in_ch = 2 if np.iscomplexobj(train_pairs[0][0].pixels) else 1
    spec = R.NetworkSpec(**{"in_channels": in_ch, **run["network"]})
    res = R.train(train_pairs, spec, loss, sched, val_pairs or None,
                  log=lambda s: print(s, file=sys.stderr))
    out = Path(a.out)
    info = {}
    if res.history.get("val_step"):
        i = res.history["val_step"].index(res.best_step)
        info = dict(val_psnr=res.history["val_psnr"][i], val_ssim=res.history["val_ssim"][i],
                    val_loss=res.history["val_loss"][i])
    R.save_checkpoint(out / "checkpoint", res.params, spec, res.best_step, info)
    _write_json(out / "history.json", dict(schedule=sched.to_dict(), loss=loss.name,
                                           loss_params=loss.params, best_step=res.best_step,
                                           history=res.history))
    print(f"best step {res.best_step} -> {out / 'checkpoint'}")


def cmd_infer(a, run):
    params, spec, _ = R.load_checkpoint(a.checkpoint)
    stem = _stem(a.image, "image")
    img = T.load_image(stem)
    y = R.pad_infer(params, spec, img)
    out = Path(a.out)
    T.save_image(out / "image", y)
    cfg_file = stem.parent / "config.json"
    if cfg_file.is_file():
        (out / "config.json").write_text(cfg_file.read_text())
    print(f"restored image -> {out / 'image'}")


def cmd_evaluate(a, run):
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    if a.image is not None:
        if a.phantom is None:
            raise ValueError("--image needs --phantom for the region annotations")
        img = T.load_image(_stem(a.image, "image"))
        pht = T.load_phantom(_stem(a.phantom, "phantom"))
        cfg_file = _stem(a.image, "image").parent / "config.json"
        cid = T.load_config(cfg_file).preset_name if cfg_file.is_file() else ""
        rep = H.phantom_metrics(img, pht, cid, pht.seed)
        rep.write_csv(out / "metrics.csv")
        print(f"{len(rep.entries)} metrics -> {out / 'metrics.csv'}")
        return
    cfg = imaging_of(run)
    settings = H.PipelineSettings.from_dict(run["settings"])
    res = H.batch_evaluate([cfg], a.seeds, a.seed, settings, out_dir=out)
    print(f"{a.seeds} realizations of {cfg.preset_name} -> {out / cfg.preset_name}")
    for m, r, mean, std, u, _, _ in res[cfg.preset_name][1]:
        print(f"  {m:18s} {r:3s} {mean:10.4f} +- {std:.4f} {u}")


def cmd_report(a, run):
    src, out = Path(a.input), Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for f in sorted(src.rglob("aggregate.csv")):
        rows.extend(H.read_aggregate_csv(f.read_text()))
    for f in sorted(src.rglob("metrics.csv")):
        rep = M.MetricsReport.from_csv(f.read_text())
        rows.extend((m, r, v, 0.0, u, rep.config_id, 1) for m, r, v, u in rep.entries)
    if rows:
        (out / "summary.csv").write_text(H.aggregate_csv(rows))
    range_db = float(a.range_db if a.range_db is not None else run["render"]["range_db"])
    n_img = 0
    for side in sorted(src.rglob("*.json")):
        try:
            meta = json.loads(side.read_text())
        except ValueError:
            continue
        if not isinstance(meta, dict) or meta.get("meta", {}).get("kind") not in ("RF", "IQ", "ENV"):
            continue
        stem = side.parent / side.stem
        rel = stem.relative_to(src)
        img = T.load_image(stem)
        H.render_bmode(img, range_db, out / (str(rel).replace("/", "__") + ".pgm"), png=a.png)
        n_img += 1
    print(f"{len(rows)} metric rows, {n_img} images -> {out}")


COMMANDS = {
    "phantom": (cmd_phantom, "generate a phantom"),
    "simulate": (cmd_simulate, "simulate raw channel data for a phantom"),
    "beamform": (cmd_beamform, "reconstruct an image from raw data"),
    "dataset": (cmd_dataset, "generate paired input/reference training patches"),
    "train": (cmd_train, "train the restoration network"),
    "infer": (cmd_infer, "apply a trained network to an image"),
    "evaluate": (cmd_evaluate, "test phantom metrics over several realizations"),
    "report": (cmd_report, "collect CSVs and render B-mode images"),
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="usrecon", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="root seed (default 0)")
    common.add_argument("--config", help="run-config JSON file or preset name")
    common.add_argument("--out", required=True, help="output directory")
    ps = {}
    for name, (_, help_) in COMMANDS.items():
        ps[name] = sub.add_parser(name, parents=[common], help=help_)
    ps["simulate"].add_argument("--phantom", required=True, help="phantom directory or stem")
    ps["beamform"].add_argument("--raw", required=True, help="raw-data directory or stem")
    ps["beamform"].add_argument("--normalization",
                                help="scale factor or normalization.json from a dataset")
    ps["train"].add_argument("--data", required=True, help="dataset directory")
    ps["infer"].add_argument("--checkpoint", required=True, help="checkpoint directory")
    ps["infer"].add_argument("--image", required=True, help="image directory or stem")
    ps["evaluate"].add_argument("--seeds", type=int, default=8, help="number of realizations")
    ps["evaluate"].add_argument("--image", help="evaluate this image instead of simulating")
    ps["evaluate"].add_argument("--phantom", help="phantom holding the regions for --image")
    ps["report"].add_argument("--in", dest="input", required=True, help="directory to scan")
    ps["report"].add_argument("--range-db", type=float, help="B-mode display range")
    ps["report"].add_argument("--png", action="store_true", help="also write PNG files")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        a = ap.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else 2
    if getattr(a, "seeds", 1) < 1:
        print("usrecon: error: --seeds must be >= 1", file=sys.stderr)
        return 2
    try:
        run = load_run_config(a.config)
        COMMANDS[a.command][0](a, run)
    except Exception as e:  # noqa: BLE001 - report any failure as a runtime error
        print(f"usrecon {a.command}: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
