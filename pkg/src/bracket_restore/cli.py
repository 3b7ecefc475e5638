"""Command-line interface.

    bracket-restore synth   --scenes 50 --size 64 --seed 7 --out data/
    bracket-restore train   --data data/ --out runs/toy --config configs/toy.cfg
    bracket-restore eval    --ckpt runs/toy --data data/ --out runs/toy/eval
    bracket-restore infer   --bracket data/scenes/scene_0045.brk --ckpt runs/toy --out out/
    bracket-restore augment-preview --seed 3 --out preview/
    bracket-restore ablate  --data data/ --out runs/ablation --set total_steps=500

Configuration comes from an optional key=value file (``--config``) followed by
``--set key=value`` overrides; nested keys are dotted (``model.use_efam=false``).
Every run writes the resolved configuration to ``<out>/config.json``.

Exit codes: 0 success, 2 usage or configuration error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields, is_dataclass
from pathlib import Path

import numpy as np

from . import plotting
from .bayeraug import AugmentSpec, augment_array, naive_flip_h_array, naive_flip_v_array, random_spec
from .core import color_index_mosaic, load_bracket, pattern_of, save_image, unpack_array
from .flow import ZeroFlow
from .network import ConfigError, restore, restore_tiled
from .synth import DegradationParams, make_dataset, read_manifest, read_motions, render_bracket, synth_scene
from .training import (TrainConfig, evaluate, load_model, make_estimator, run_ablation, train,
                       train_summary, write_ablation)

log = logging.getLogger("bracket_restore")


class UsageError(Exception):
    pass


# ------------------------------------------------------------------ config

def parse_value(text: str):
    t = text.strip()
    low = t.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    for candidate in (t, f"[{t}]" if "," in t and not t.startswith("[") else None):
        if candidate is None:
            continue
        try:
            return json.loads(candidate)
        except json.JSONDecodeError:
            pass
    return t


def parse_assignments(lines, origin: str) -> dict:
    out = {}
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{origin}:{n}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = parse_value(value)
    return out


def nest(flat: dict) -> dict:
    tree: dict = {}
    for key, value in flat.items():
        node = tree
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise UsageError(f"key {key!r} conflicts with a scalar value")
        node[parts[-1]] = value
    return tree


def _coerce(cls, d: dict, prefix: str = ""):
    """Build dataclass ``cls`` from ``d``, checking names and value types against defaults."""
    known = {f.name: f for f in fields(cls)}
    defaults = cls()
    kwargs = {}
    for key, value in d.items():
        if key not in known:
            raise UsageError(f"unknown configuration key {prefix + key!r}")
        current = getattr(defaults, key)
        if is_dataclass(current):
            if not isinstance(value, dict):
                raise UsageError(f"{prefix + key!r} is a section, not a value")
            kwargs[key] = _coerce(type(current), value, prefix + key + ".")
            continue
        kwargs[key] = _check_type(prefix + key, current, value)
    try:
        return cls(**kwargs)
    except (ConfigError, ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from exc


def _check_type(name, default, value):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise UsageError(f"{name} expects true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise UsageError(f"{name} expects an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise UsageError(f"{name} expects a number, got {value!r}")
        return float(value)
    if isinstance(default, tuple):
        items = value if isinstance(value, list) else [value]
        return tuple(_check_type(name, default[0], v) if default else v for v in items)
    if isinstance(default, str):
        return str(value)
    return value


def load_settings(args) -> dict:
    flat = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise UsageError(f"config file not found: {path}")
        flat.update(parse_assignments(path.read_text().splitlines(), str(path)))
    flat.update(parse_assignments(getattr(args, "set", None) or [], "--set"))
    return nest(flat)


def train_config(settings: dict) -> TrainConfig:
    return _coerce(TrainConfig, settings)


def degradation_params(settings: dict) -> DegradationParams:
    extra = set(settings) - {"degradation"}
    if extra:
        raise UsageError(f"unknown configuration keys for synth: {sorted(extra)}")
    return _coerce(DegradationParams, settings.get("degradation", {}), "degradation.")


def write_resolved(out_dir: Path, command: str, resolved: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps({"command": command, **resolved}, indent=2,
                                                    sort_keys=True) + "\n")


def emit_table(name: str, header, rows) -> None:
    """Tab-separated block between begin/end marker lines on stdout."""
    print(f"# begin {name}")
    print("\t".join(header))
    for r in rows:
        print("\t".join(str(v) for v in r))
    print(f"# end {name}")


def resolve_checkpoint(path) -> Path:
    p = Path(path)
    if p.is_dir():
        p = p / "best.ckpt"
    if not p.exists():
        raise FileNotFoundError(f"checkpoint not found: {p}")
    return p


# ---------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    settings = load_settings(args)
    params = degradation_params(settings)
    h = args.height or args.size
    w = args.width or args.size
    if args.scenes < 1 or h < 8 or w < 8:
        raise UsageError("need --scenes >= 1 and a size of at least 8 packed pixels")
    out = Path(args.out)
    manifest = make_dataset(args.scenes, (h, w), params, args.seed, out)
    write_resolved(out, "synth", {"scenes": args.scenes, "height": h, "width": w, "seed": args.seed,
                                  "degradation": params.to_dict()})
    rows = read_manifest(manifest)
    emit_table("synth", ["scenes", "train", "val", "height", "width", "manifest"],
               [[len(rows), sum(r.split == "train" for r in rows), sum(r.split == "val" for r in rows),
                 h, w, manifest]])
    return 0


def cmd_train(args) -> int:
    cfg = train_config(load_settings(args))
    out = Path(args.out)
    write_resolved(out, "train", {"data": str(args.data), "train": cfg.to_dict()})
    state = train(cfg, Path(args.data), out, resume=args.resume)
    plotting.plot_loss_curve(state.history, out / "loss_curve.png",
                             val=[(s, p) for s, p, _ in state.validation])
    summary = train_summary(state)
    emit_table("train", list(summary), [[_fmt(v) for v in summary.values()]])
    return 0


def _fmt(v) -> str:
    return f"{v:.6g}" if isinstance(v, float) else str(v)


def cmd_eval(args) -> int:
    ckpt = resolve_checkpoint(args.ckpt)
    out = Path(args.out)
    write_resolved(out, "eval", {"ckpt": str(ckpt), "data": str(args.data), "split": args.split,
                                 "flow": args.flow})
    report = evaluate(ckpt, Path(args.data), args.split, out, flow=args.flow)
    plotting.plot_eval(report.rows, out / "eval.png")
    emit_table("eval", ["id", "psnr", "ssim", "baseline_psnr", "baseline_ssim"],
               [[r["id"], f"{r['psnr']:.4f}", f"{r['ssim']:.5f}", f"{r['baseline_psnr']:.4f}",
                 f"{r['baseline_ssim']:.5f}"] for r in report.rows]
               + [["mean", f"{report.mean_psnr:.4f}", f"{report.mean_ssim:.5f}",
                   f"{report.baseline_psnr:.4f}", f"{report.baseline_ssim:.5f}"]])
    return 0


def cmd_infer(args) -> int:
    ckpt = resolve_checkpoint(args.ckpt)
    bracket_path = Path(args.bracket)
    if not bracket_path.exists():
        raise FileNotFoundError(f"bracket not found: {bracket_path}")
    model, cfg = load_model(ckpt)
    flow = args.flow or cfg.flow
    bracket = load_bracket(bracket_path)
    estimator = make_estimator(flow)
    motions = None
    if estimator is None:
        motions = read_motions(bracket_path)
        estimator = ZeroFlow()
    out = Path(args.out)
    write_resolved(out, "infer", {"bracket": str(bracket_path), "ckpt": str(ckpt), "flow": flow,
                                  "tile": args.tile})
    if args.tile:
        hdr = restore_tiled(bracket, model, estimator, args.tile, motions=motions)
    else:
        hdr = restore(bracket, model, estimator, motions=motions)
    stem = bracket_path.stem
    save_image(out / f"{stem}_hdr.brk", hdr)
    plotting.write_pgm(out / f"{stem}_preview.pgm", plotting.tonemap_preview(hdr.data))
    emit_table("infer", ["bracket", "height", "width", "hdr", "preview"],
               [[bracket_path, *hdr.hw, out / f"{stem}_hdr.brk", out / f"{stem}_preview.pgm"]])
    return 0


def cmd_augment_preview(args) -> int:
    rng = np.random.default_rng(args.seed)
    if args.bracket:
        frames = np.asarray(load_bracket(args.bracket).frames)
    else:
        scene = synth_scene(rng, 2 * args.size, 2 * args.size)
        frames = np.asarray(render_bracket(scene, DegradationParams(), rng)[0].frames)
    spec = AugmentSpec(*args.spec) if args.spec else random_spec(rng)
    out = Path(args.out)
    write_resolved(out, "augment-preview", {"seed": args.seed, "bracket": args.bracket,
                                            "spec": [spec.flip_v, spec.flip_h, spec.rot90_quarter_turns]})
    rows = []
    for i, f in enumerate(frames):
        mosaic = unpack_array(f)
        colors = color_index_mosaic(*mosaic.shape)
        after = augment_array(mosaic, spec)
        after_colors = augment_array(colors, spec)
        plotting.write_ppm(out / f"before_{i:02d}.ppm", plotting.site_overlay(mosaic, colors))
        # sites keep their original filter color, so a broken pattern shows as a color shift
        plotting.write_ppm(out / f"after_{i:02d}.ppm", plotting.site_overlay(after, after_colors))
        rows.append([i, "before", "x".join(map(str, mosaic.shape)), pattern_of(colors)])
        rows.append([i, "after", "x".join(map(str, after.shape)), pattern_of(after_colors)])

    cm = color_index_mosaic(8, 8)
    ones = np.ones((8, 8))
    variants = [("original", cm), ("preserving", augment_array(cm, spec)),
                ("naive_flip_v", naive_flip_v_array(cm)), ("naive_flip_h", naive_flip_h_array(cm))]
    panels = []
    for name, c in variants:
        img = plotting.site_overlay(ones[: c.shape[0], : c.shape[1]], c)
        plotting.write_ppm(out / f"pattern_{name}.ppm", img)
        panels.append((f"{name}\n{pattern_of(c)}", img))
        rows.append(["-", name, "x".join(map(str, c.shape)), pattern_of(c)])
    plotting.plot_augment_preview(panels, out / "augment_preview.png")
    emit_table("augment-preview", ["frame", "image", "mosaic_shape", "pattern"], rows)
    return 0


def cmd_ablate(args) -> int:
    cfg = train_config(load_settings(args))
    out = Path(args.out)
    write_resolved(out, "ablate", {"data": str(args.data), "train": cfg.to_dict()})
    table = run_ablation(cfg, Path(args.data), out)
    write_ablation(table, out)
    plotting.plot_ablation(table, out / "ablation.png")
    mark = {True: "yes", False: "no"}
    emit_table("ablation", ["Variant", "BayerAug", "EFAM", "FFAM", "PSNR", "SSIM"],
               [[r["Variant"], mark[r["BayerAug"]], mark[r["EFAM"]], mark[r["FFAM"]],
                 f"{r['PSNR']:.4f}", f"{r['SSIM']:.5f}"] for r in table])
    return 0


# ------------------------------------------------------------------ parser

def _spec_arg(text: str):
    parts = text.split(",")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("spec is flip_v,flip_h,quarter_turns e.g. 1,0,3")
    return bool(int(parts[0])), bool(int(parts[1])), int(parts[2])


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bracket-restore", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def config_args(sp):
        sp.add_argument("--config", help="key=value configuration file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one key (repeatable)")

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--scenes", type=int, required=True)
    s.add_argument("--size", type=int, default=64, help="packed height and width")
    s.add_argument("--height", type=int, help="packed height (overrides --size)")
    s.add_argument("--width", type=int, help="packed width (overrides --size)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    config_args(s)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train a model")
    s.add_argument("--data", required=True, help="dataset directory or manifest")
    s.add_argument("--out", required=True)
    s.add_argument("--resume", help="checkpoint to continue from")
    config_args(s)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint")
    s.add_argument("--ckpt", required=True, help="checkpoint file or run directory (uses best.ckpt)")
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="val")
    s.add_argument("--flow", choices=("pyramid", "oracle", "zero"), help="default: as trained")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("infer", help="restore one bracket")
    s.add_argument("--bracket", required=True)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--tile", type=int, default=0, help="tile size in packed pixels (0 = whole image)")
    s.add_argument("--flow", choices=("pyramid", "oracle", "zero"), help="default: as trained")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("augment-preview", help="render Bayer-preserving augmentation before/after")
    s.add_argument("--bracket", help="bracket file; default is a synthetic scene")
    s.add_argument("--size", type=int, default=32, help="packed size of the synthetic scene")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--spec", type=_spec_arg, help="fixed spec flip_v,flip_h,quarter_turns")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_augment_preview)

    s = sub.add_parser("ablate", help="train and evaluate the four ablation variants")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    config_args(s)
    s.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"bracket-restore {args.command}: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"bracket-restore {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
