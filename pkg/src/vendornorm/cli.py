"""Command-line entry point: ``vendornorm <command> ...``.

Exit codes: 0 success, 1 usage/config error, 2 numeric/runtime failure,
3 sweep finished with failed members.
"""
from __future__ import annotations

import argparse
import itertools
import json
import logging
import os
import shutil
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, ContractError, NumericError, TrainingError, VendorNormError

log = logging.getLogger("vendornorm")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_SWEEP = 0, 1, 2, 3
MANIFEST_NAME = "run_manifest.json"
_written_manifests: list[Path] = []


# --------------------------------------------------------------------------
# key = value files

def read_key_values(path: str | Path) -> list[tuple[int, str, str]]:
    """(line number, key, raw value) for every assignment in a ``key = value`` file."""
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{path}:{lineno}: missing key")
        out.append((lineno, key, value))
    return out


def _coerce(path, lineno: int, key: str, raw: str, typ):
    try:
        if typ is bool:
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError
            return raw.lower() in ("true", "1", "yes")
        return typ(raw)
    except ValueError:
        raise ConfigError(f"{path}:{lineno}: {key} expects {typ.__name__}, got {raw!r}") from None


def _field_types(cls) -> dict[str, type]:
    types = {"int": int, "float": float, "str": str, "bool": bool}
    return {f.name: types[f.type] if isinstance(f.type, str) else f.type for f in fields(cls)}


def parse_config(path: str | Path):
    """Read a flat ``key = value`` training config; missing keys take the defaults."""
    from .trainer import TrainConfig

    types = _field_types(TrainConfig)
    values, lines = {}, {}
    for lineno, key, raw in read_key_values(path):
        if key not in types:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        if key in lines:
            raise ConfigError(f"{path}:{lineno}: {key} already set on line {lines[key]}")
        values[key] = _coerce(path, lineno, key, raw, types[key])
        lines[key] = lineno
    try:
        return TrainConfig.from_dict(values)
    except ConfigError as e:
        raise ConfigError(f"{path}: {e}") from None


def parse_grid(path: str | Path):
    """A sweep grid: a config file where comma-separated values are swept."""
    from .trainer import TrainConfig

    types = _field_types(TrainConfig)
    base, swept = {}, {}
    for lineno, key, raw in read_key_values(path):
        if key not in types:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        vals = [_coerce(path, lineno, key, v.strip(), types[key]) for v in raw.split(",")]
        if len(vals) > 1:
            swept[key] = vals
        else:
            base[key] = vals[0]
    keys = list(swept)
    configs = [TrainConfig.from_dict({**base, **dict(zip(keys, combo))})
               for combo in itertools.product(*(swept[k] for k in keys))]
    return configs, keys


def parse_style(path: str | Path):
    from .phantom import VendorStyle

    types = _field_types(VendorStyle)
    values = {}
    for lineno, key, raw in read_key_values(path):
        if key not in types:
            raise ConfigError(f"{path}:{lineno}: unknown style key {key!r}")
        values[key] = _coerce(path, lineno, key, raw, float)
    style = VendorStyle(**values)
    style.validate()
    return style


# --------------------------------------------------------------------------
# output directories and run manifests

def prepare_out_dir(out: str | Path, force: bool) -> Path:
    out = Path(out)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise ConfigError(f"output directory {out} is not empty; pass --force to overwrite")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_run_manifest(out: Path, command: str, config: dict, seed, outputs: list[str]) -> None:
    """Atomically write the one run manifest of an artifact directory."""
    record = {
        "command": command,
        "config": config,
        "seed": seed,
        "toolkit_version": __version__,
        "outputs": outputs,
        "started": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "argv": sys.argv,
    }
    _atomic_json(out / MANIFEST_NAME, record)
    _written_manifests.append(out / MANIFEST_NAME)


def finish_run_manifest(path: Path, status: int, wall_clock: float) -> None:
    """Record exit status and elapsed seconds in a manifest written by this run."""
    if not path.exists():
        return
    record = json.loads(path.read_text())
    record.update(exit_status=status, wall_clock_seconds=round(wall_clock, 3))
    _atomic_json(path, record)


def _atomic_json(path: Path, record: dict) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(record, indent=2, default=str))
    os.replace(tmp, path)


# --------------------------------------------------------------------------
# commands

def cmd_phantom_generate(args) -> int:
    from dataclasses import asdict

    from .data import ManifestRecord, assign_splits, write_manifest, write_png, write_raster
    from .phantom import STYLE_A, STYLE_B, PhantomSpec, generate_phantom_pairless

    style_a = parse_style(args.style_a) if args.style_a else STYLE_A
    style_b = parse_style(args.style_b) if args.style_b else STYLE_B
    spec = PhantomSpec(image_size=args.size, n_images=args.count, seed=args.seed,
                       dense_region_fraction=args.dense_fraction)
    spec.validate()
    out = prepare_out_dir(args.out, args.force)
    write_run_manifest(out, "phantom generate",
                       {"spec": asdict(spec), "style_a": asdict(style_a), "style_b": asdict(style_b)},
                       args.seed, ["manifest.tsv", "A/", "B/"])
    ps = generate_phantom_pairless(spec, style_a, style_b)
    records = []
    for k, ds in (("A", ps.domain_a), ("B", ps.domain_b)):
        (out / k).mkdir()
        splits = assign_splits(ds.source_ids, seed=args.seed + (k == "B"))
        for im in ds.images:
            split = splits[im.source_id]
            write_raster(out / k / f"{im.name}.f32", im.pixels)
            write_png(out / k / f"{im.name}.png", im.pixels)
            records.append(ManifestRecord(f"{k}/{im.name}.f32", k, split, im.source_id, "image"))
            for kind, mask in (("object", ps.masks[im.name].object), ("dense", ps.masks[im.name].dense)):
                write_raster(out / k / f"{im.name}.{kind}.f32", mask.astype(np.float32))
                records.append(ManifestRecord(f"{k}/{im.name}.{kind}.f32", k, split, im.source_id, kind))
    write_manifest(out / "manifest.tsv", records)
    print(f"wrote {2 * spec.n_images} phantoms to {out}")
    return EXIT_OK


def cmd_data_prepare(args) -> int:
    from .data import ManifestRecord, image_name, prepare, read_manifest, write_manifest, write_png, write_raster

    records = read_manifest(args.manifest)
    out = prepare_out_dir(args.out, args.force)
    write_run_manifest(out, "data prepare", vars(args), args.seed, ["manifest.tsv", "images/"])
    prepared = prepare(records, Path(args.manifest).parent, args.size, clip=args.clip,
                       middle_slices=args.middle_slices, pool_globally=args.pool_globally, seed=args.seed)
    (out / "images").mkdir()
    new_records = []
    for r, im in prepared:
        name = f"{r.domain}_{image_name(r.path)}"
        write_raster(out / "images" / f"{name}.f32", im.pixels)
        write_png(out / "images" / f"{name}.png", im.pixels)
        new_records.append(ManifestRecord(f"images/{name}.f32", r.domain, r.split, r.source_id, "image"))
    write_manifest(out / "manifest.tsv", new_records)
    print(f"prepared {len(new_records)} images into {out}")
    return EXIT_OK


def _load_training_data(data_dir: Path):
    from .data import load_manifest_datasets

    manifest = data_dir / "manifest.tsv"
    return load_manifest_datasets(manifest, "train"), load_manifest_datasets(manifest, "val")


def cmd_train(args) -> int:
    from .trainer import TrainConfig, run_training

    config = parse_config(args.config) if args.config else TrainConfig.from_dict({})
    if args.resume is None:
        out = prepare_out_dir(args.out, args.force)
    else:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
    write_run_manifest(out, "train", config.to_dict(), config.seed, ["losses.tsv", "final.ckpt", "snapshots/"])
    train, val = _load_training_data(Path(args.data))
    run_training(config, train["A"], train["B"], out_dir=out, val_a=val["A"], val_b=val["B"],
                 resume_from=args.resume,
                 progress=(lambda r: print(r.to_row(), flush=True)) if args.verbose else None)
    print(f"training finished; checkpoint at {out / 'final.ckpt'}")
    return EXIT_OK


def _dice_hook(val):
    from .evaluator import evaluate_run

    def hook(result):
        report = evaluate_run(result.state, val["A"], val["B"])
        return report.a_to_b.dice + report.b_to_a.dice

    return hook


def cmd_sweep(args) -> int:
    from .trainer import sweep, write_sweep_table

    configs, swept = parse_grid(args.grid)
    out = prepare_out_dir(args.out, args.force)
    write_run_manifest(out, "sweep", {"grid": [c.to_dict() for c in configs], "swept": swept},
                       None, ["sweep.tsv"])
    train, val = _load_training_data(Path(args.data))
    rows = sweep(configs, train["A"], train["B"], _dice_hook(val), out_dir=out)
    write_sweep_table(out / "sweep.tsv", rows, swept)
    print((out / "sweep.tsv").read_text(), end="")
    return EXIT_SWEEP if any(r.status != "ok" for r in rows) else EXIT_OK


def cmd_normalize(args) -> int:
    from .data import (NORMALIZED, SliceImage, image_name, load_pixels, to_display_scale,
                       write_png, write_raster)
    from .trainer import Checkpoint, translate

    ckpt = Checkpoint.load(args.checkpoint)
    state = ckpt.restore()
    size = state.config.image_size
    gen = state.g_ab if args.direction == "AtoB" else state.g_ba
    inputs = sorted(Path(p) for p in args.inputs)
    out = prepare_out_dir(args.out, args.force)
    outputs = [f"{image_name(str(p))}_{args.direction}.f32" for p in inputs]
    write_run_manifest(out, "normalize", {"checkpoint": str(args.checkpoint), "direction": args.direction},
                       state.config.seed, outputs)
    if not inputs:
        log.warning("no input images given; nothing to normalize")
        return EXIT_OK
    pixels = []
    for p in inputs:
        px = load_pixels(p)
        if px.shape != (size, size):
            raise ConfigError(f"{p}: shape {px.shape} does not match the checkpoint's {size}x{size} input")
        if px.min() < 0 or px.max() > 255:
            raise ConfigError(f"{p}: pixels must be on the 0-255 scale (run 'data prepare' first)")
        pixels.append(px / 127.5 - 1.0)
    translated = translate(gen, np.stack(pixels)[:, None].astype(np.float32))
    with open(out / "provenance.tsv", "w") as fh:
        fh.write("input\toutput\tdirection\n")
        for p, name, y in zip(inputs, outputs, translated[:, 0]):
            img = SliceImage(np.clip(y, -1, 1), NORMALIZED)
            write_raster(out / name, img.pixels)
            write_png(out / name.replace(".f32", ".png"), to_display_scale(img))
            fh.write(f"{p}\t{name}\t{args.direction}\n")
    print(f"normalized {len(inputs)} image(s) into {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .data import load_manifest_datasets, load_manifest_masks
    from .evaluator import evaluate_run
    from .trainer import Checkpoint

    ckpt = Checkpoint.load(args.checkpoint)
    manifest = Path(args.data) / "manifest.tsv"
    test = load_manifest_datasets(manifest, args.split)
    masks = {name: kinds["dense"] for name, kinds in load_manifest_masks(manifest).items() if "dense" in kinds}
    out = prepare_out_dir(args.out, args.force)
    write_run_manifest(out, "evaluate", {"checkpoint": str(args.checkpoint), "split": args.split},
                       ckpt.config.seed, ["per_image.tsv", "summary.txt", "dense_intensity.png"])
    report = evaluate_run(ckpt, test["A"], test["B"], masks, out_dir=out)
    print(report.summary())
    return EXIT_OK


def cmd_rf_check(args) -> int:
    from .networks import DISCRIMINATOR_TABLES, compute_receptive_field, discriminator_spec, parse_layer_list

    status = EXIT_OK
    if args.layers:
        print(compute_receptive_field(parse_layer_list(args.layers)))
    if args.verify or not args.layers:
        for fov in sorted(DISCRIMINATOR_TABLES, reverse=True):
            spec = discriminator_spec(fov)
            got = spec.receptive_field
            layers = ",".join(f"{l.kernel}:{l.stride}" for l in spec.layers)
            ok = got == fov
            status = status if ok else EXIT_RUNTIME
            print(f"FOV {fov:>2}: layers {layers} -> {got} {'OK' if ok else 'MISMATCH'}")
    return status


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vendornorm", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", required=True)

    ph = sub.add_parser("phantom", help="synthetic phantom data").add_subparsers(dest="action", required=True)
    g = ph.add_parser("generate", help="render two unpaired phantom domains with masks and a manifest")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--size", type=int, default=64, help="image side in pixels (multiple of 4, >= 32)")
    g.add_argument("--count", type=int, default=200, help="images per domain")
    g.add_argument("--seed", type=int, default=7)
    g.add_argument("--style-a", help="key = value file with VendorStyle fields for domain A")
    g.add_argument("--style-b", help="key = value file with VendorStyle fields for domain B")
    g.add_argument("--dense-fraction", type=float, default=0.25, help="dense-tissue share of the object")
    g.add_argument("--force", action="store_true", help="overwrite a non-empty --out")
    g.set_defaults(func=cmd_phantom_generate)

    dp = sub.add_parser("data", help="preprocess user data").add_subparsers(dest="action", required=True)
    d = dp.add_parser("prepare", help="clip/scale, middle-slice selection, split and resize")
    d.add_argument("--manifest", required=True, help="tab-separated manifest of raw images")
    d.add_argument("--out", required=True)
    d.add_argument("--size", type=int, required=True, help="output side in pixels")
    d.add_argument("--no-clip", dest="clip", action="store_false",
                   help="skip saturating the top 1%% and scaling to 0-255 (only clamp)")
    d.add_argument("--no-middle-slices", dest="middle_slices", action="store_false",
                   help="keep every slice instead of the central half of each volume")
    d.add_argument("--pool-globally", action="store_true", help="one clipping threshold for both vendors")
    d.add_argument("--seed", type=int, default=0, help="seed for automatic splits")
    d.add_argument("--force", action="store_true")
    d.set_defaults(func=cmd_data_prepare)

    t = sub.add_parser("train", help="train a CycleGAN variant")
    t.add_argument("--config", help="key = value config file (defaults for missing keys)")
    t.add_argument("--data", required=True, help="directory with manifest.tsv")
    t.add_argument("--out", required=True)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--force", action="store_true")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sweep", help="train a grid of configs and rank by validation Dice")
    s.add_argument("--grid", required=True, help="config file; comma-separated values are swept")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_sweep)

    n = sub.add_parser("normalize", help="translate images with a trained checkpoint")
    n.add_argument("--checkpoint", required=True)
    n.add_argument("--direction", choices=("AtoB", "BtoA"), required=True)
    n.add_argument("--out", required=True)
    n.add_argument("--force", action="store_true")
    n.add_argument("inputs", nargs="*", help="0-255 rasters (.f32, .npy or .png)")
    n.set_defaults(func=cmd_normalize)

    e = sub.add_parser("evaluate", help="Dice and dense-intensity evaluation of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True, help="directory with manifest.tsv (and mask records)")
    e.add_argument("--out", required=True)
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.add_argument("--force", action="store_true")
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("rf-check", help="receptive field of a layer list, and the published variants")
    r.add_argument("layers", nargs="?", help='layer list "k:s,k:s,..."')
    r.add_argument("--verify", action="store_true", help="also check the four published discriminators")
    r.set_defaults(func=cmd_rf_check)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    start = time.perf_counter()
    _written_manifests.clear()
    try:
        status = args.func(args)
    except (ConfigError, ContractError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        status = EXIT_CONFIG
    except (NumericError, TrainingError) as e:
        print(f"runtime failure: {e}", file=sys.stderr)
        status = EXIT_RUNTIME
    except VendorNormError as e:
        print(f"error: {e}", file=sys.stderr)
        status = EXIT_CONFIG
    for path in _written_manifests:
        finish_run_manifest(path, status, time.perf_counter() - start)
    return status


if __name__ == "__main__":
    sys.exit(main())
