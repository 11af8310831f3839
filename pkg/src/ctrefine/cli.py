"""Command-line pipeline for FBP-volume refinement.

One binary, six subcommands: ``generate`` (synthetic volume pairs),
``train`` (patch extraction + residual training), ``infer`` (full-volume
reconstruction), ``eval`` (masked PSNR report), ``bench`` (inference
timing table), and ``gradcheck`` (finite-difference self-test).

Configuration precedence: built-in defaults < ``--config`` file
(flat ``key = value`` text) < command-line flags. Unknown config keys and
unknown flags are fatal. The effective configuration is echoed into a
manifest next to every output.

Exit codes: 0 success, 1 generic failure, 2 missing input,
3 shape/variant mismatch.
"""

from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

from . import gradcheck as gradcheck_mod
from . import metrics
from .inference import infer_volume, time_inference
from .network import KINDS, NetworkParams, NetworkVariant, load_checkpoint, save_checkpoint
from .simulate import concat_patchsets, extract_patches, generate_phantom_volume, make_pair
from .storage import (
    ContainerError,
    ShapeMismatchError,
    VolumeHU,
    load_volume,
    save_volume,
)
from .tensor_ops import ShapeError
from .training import TrainingConfig, train, write_history

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_MISSING_INPUT = 2
EXIT_SHAPE_MISMATCH = 3

GENERATE_MANIFEST = "generate_manifest.txt"


class UsageError(Exception):
    """Bad flags or config keys; maps to the generic failure exit code."""


class MissingInputError(Exception):
    """A required input file or directory does not exist."""


# ---------------------------------------------------------------------------
# flat key = value config files


def read_config_file(path) -> dict[str, str]:
    if not os.path.exists(path):
        raise MissingInputError(f"config file not found: {path}")
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected 'key = value', got {raw.strip()!r}")
            key, value = line.split("=", 1)
            values[key.strip()] = value.strip()
    return values


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"expected a boolean, got {text!r}")


def _convert(key: str, text: str, default):
    try:
        if isinstance(default, bool):
            return _parse_bool(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError as exc:
        raise UsageError(f"config key {key}: {exc}") from exc
    return text


def resolve_config(defaults: dict, config_path: str | None, flag_values: dict) -> dict:
    cfg = dict(defaults)
    if config_path:
        file_values = read_config_file(config_path)
        unknown = sorted(set(file_values) - set(defaults))
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        for key, text in file_values.items():
            cfg[key] = _convert(key, text, defaults[key])
    for key, value in flag_values.items():
        if key in cfg and value is not None:
            cfg[key] = value
    return cfg


def write_manifest(path, command: str, cfg: dict, extra: list[tuple[str, str]] = ()) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"command = {command}\n")
        for key in sorted(cfg):
            fh.write(f"{key} = {cfg[key]}\n")
        for key, value in extra:
            fh.write(f"{key} = {value}\n")


def _parse_dims(text: str) -> tuple[int, int, int]:
    parts = text.replace("x", " ").split()
    if len(parts) != 3:
        raise UsageError(f"dims must be three integers 'Z H W', got {text!r}")
    try:
        z, h, w = (int(p) for p in parts)
    except ValueError as exc:
        raise UsageError(f"dims must be integers: {exc}") from exc
    return z, h, w


def _require_file(path, what: str) -> str:
    if not path:
        raise UsageError(f"{what} path is required")
    if not os.path.exists(path):
        raise MissingInputError(f"{what} not found: {path}")
    return path


def _normalize_f64(volume: VolumeHU) -> np.ndarray:
    lo, hi = volume.hu_window
    return (volume.voxels.astype(np.float64) - lo) / (hi - lo)


# ---------------------------------------------------------------------------
# generate


GENERATE_DEFAULTS = {
    "seed": 0,
    "volumes": 3,
    "dims": "16 64 64",
    "views": 24,
    "noise_sigma": 15.0,
    "detectors": 0,
    "out": "data",
}


def cmd_generate(cfg: dict) -> int:
    dims = _parse_dims(cfg["dims"])
    os.makedirs(cfg["out"], exist_ok=True)
    detectors = cfg["detectors"] if cfg["detectors"] > 0 else None
    entries = []
    for i in range(cfg["volumes"]):
        seed = cfg["seed"] + i
        _, truth = generate_phantom_volume(seed, dims)
        fbp_vol, truth = make_pair(truth, cfg["views"], cfg["noise_sigma"], seed,
                                   detectors=detectors)
        truth_name = f"vol{i:02d}_truth.vol"
        fbp_name = f"vol{i:02d}_fbp.vol"
        save_volume(truth, os.path.join(cfg["out"], truth_name))
        save_volume(fbp_vol, os.path.join(cfg["out"], fbp_name))
        entries += [(f"vol{i}_truth", truth_name), (f"vol{i}_fbp", fbp_name),
                    (f"vol{i}_seed", str(seed))]
        print(f"wrote {truth_name} / {fbp_name} (seed {seed})")
    write_manifest(os.path.join(cfg["out"], GENERATE_MANIFEST), "generate", cfg, entries)
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


TRAIN_DEFAULTS = {
    "seed": 0,
    "data": "data",
    "variant": "2d",
    "window": 0,  # 0 = variant default: 1 (2d), 3 (2.5d), 7 (3d)
    "depth": 17,
    "width": 64,
    "epochs": 2,
    "batch_size": 128,
    "shards": 1,
    "learning_rate": 1e-3,
    "val_fraction": 0.2,
    "patch_size": 30,
    "patch_count": 50000,
    "augment": True,
    "checkpoint_every_steps": 0,
    "train_eval_samples": 2048,
    "val_eval_samples": 2048,
    "out": "train_out",
}


def _resolve_variant(cfg: dict) -> NetworkVariant:
    kind = cfg["variant"]
    if kind not in KINDS:
        raise UsageError(f"variant must be one of {KINDS}, got {kind!r}")
    window = cfg["window"]
    if window == 0:
        window = {"2d": 1, "2.5d": 3, "3d": 7}[kind]
    return NetworkVariant(kind=kind, window=window, depth=cfg["depth"], width=cfg["width"])


def load_pairs(data_dir: str) -> list[tuple[VolumeHU, VolumeHU]]:
    """Read (fbp, truth) volume pairs listed by the generate manifest."""
    manifest_path = os.path.join(data_dir, GENERATE_MANIFEST)
    if not os.path.exists(manifest_path):
        raise MissingInputError(f"generate manifest not found: {manifest_path}")
    fields = read_config_file(manifest_path)
    pairs = []
    i = 0
    while f"vol{i}_fbp" in fields:
        fbp_path = os.path.join(data_dir, fields[f"vol{i}_fbp"])
        truth_path = os.path.join(data_dir, fields[f"vol{i}_truth"])
        for p in (fbp_path, truth_path):
            if not os.path.exists(p):
                raise MissingInputError(f"volume listed in manifest not found: {p}")
        pairs.append((load_volume(fbp_path), load_volume(truth_path)))
        i += 1
    if not pairs:
        raise UsageError(f"{manifest_path} lists no volume pairs")
    return pairs


def cmd_train(cfg: dict) -> int:
    variant = _resolve_variant(cfg)
    pairs = load_pairs(cfg["data"])
    os.makedirs(cfg["out"], exist_ok=True)

    per_volume = max(1, cfg["patch_count"] // len(pairs))
    sets = []
    for i, (fbp_vol, truth_vol) in enumerate(pairs):
        y = _normalize_f64(fbp_vol).astype(np.float32)
        x = _normalize_f64(truth_vol).astype(np.float32)
        sets.append(extract_patches(
            y, x, cfg["patch_size"], variant.window, per_volume, cfg["augment"],
            seed=cfg["seed"], volumetric_target=(variant.kind == "3d"), volume_id=i,
        ))
    dataset = concat_patchsets(sets)
    print(f"training {variant.label()} depth={variant.depth} width={variant.width} "
          f"on {len(dataset)} patches from {len(pairs)} volumes")

    tc = TrainingConfig(
        learning_rate=cfg["learning_rate"], batch_size=cfg["batch_size"],
        shards=cfg["shards"], epochs=cfg["epochs"], seed=cfg["seed"],
        val_fraction=cfg["val_fraction"],
        checkpoint_every_steps=cfg["checkpoint_every_steps"],
        train_eval_samples=cfg["train_eval_samples"],
        val_eval_samples=cfg["val_eval_samples"],
    )
    params, history = train(dataset, variant, tc, checkpoint_dir=cfg["out"])
    ckpt_path = os.path.join(cfg["out"], "final.ckpt")
    save_checkpoint(params, ckpt_path)
    write_history(history, os.path.join(cfg["out"], "history.csv"))
    write_manifest(os.path.join(cfg["out"], "train_manifest.txt"), "train", cfg,
                   [("resolved_window", str(variant.window)),
                    ("checkpoint", "final.ckpt"), ("patches", str(len(dataset)))])
    if history:
        last = history[-1]
        print(f"epoch {last.epoch}: train_loss {last.train_loss:.6g} "
              f"val_loss {last.val_loss:.6g} val_psnr {last.val_psnr_db:.2f} dB")
    print(f"wrote {ckpt_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# infer


INFER_DEFAULTS = {
    "checkpoint": "",
    "input": "",
    "out": "reconstruction.vol",
    "chunk": 4,
}


def cmd_infer(cfg: dict) -> int:
    ckpt_path = _require_file(cfg["checkpoint"], "checkpoint")
    in_path = _require_file(cfg["input"], "input volume")
    params = load_checkpoint(ckpt_path)
    volume = load_volume(in_path)
    y = _normalize_f64(volume)
    t0 = time.perf_counter()
    xhat = infer_volume(params, y, chunk=cfg["chunk"])
    wall = time.perf_counter() - t0
    lo, hi = volume.hu_window
    out_volume = VolumeHU(voxels=(xhat * (hi - lo) + lo).astype(np.float32),
                          voxel_spacing=volume.voxel_spacing, hu_window=volume.hu_window)
    save_volume(out_volume, cfg["out"])
    write_manifest(cfg["out"] + ".manifest.txt", "infer", cfg,
                   [("variant", params.variant.label()), ("wall_time_s", f"{wall:.3f}")])
    print(f"inference wall time: {wall:.3f} s ({params.variant.label()}, "
          f"{volume.dims[0]} slices)")
    print(f"wrote {cfg['out']}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


EVAL_DEFAULTS = {
    "reference": "",
    "fbp": "",
    "methods": "",  # space-separated label=path entries
    "out": "report.csv",
    "plots": False,
}


def _parse_methods(methods_text: str, flag_entries: list[str] | None) -> list[tuple[str, str]]:
    entries = []
    for token in (methods_text.split() if methods_text else []):
        entries.append(token)
    for token in flag_entries or []:
        entries.append(token)
    methods = []
    for token in entries:
        if "=" not in token:
            raise UsageError(f"method entries take the form label=path, got {token!r}")
        label, path = token.split("=", 1)
        methods.append((label.strip(), path.strip()))
    return methods


def cmd_eval(cfg: dict, method_flags: list[str] | None = None) -> int:
    ref_path = _require_file(cfg["reference"], "reference volume")
    fbp_path = _require_file(cfg["fbp"], "fbp volume")
    reference = load_volume(ref_path)
    fbp_vol = load_volume(fbp_path)
    if fbp_vol.dims != reference.dims:
        raise ShapeError(
            f"fbp volume {fbp_path} dims {fbp_vol.dims} do not match reference "
            f"{ref_path} dims {reference.dims}"
        )
    volumes = {"fbp": fbp_vol}
    for label, path in _parse_methods(cfg["methods"], method_flags):
        vol = load_volume(_require_file(path, f"method {label!r} volume"))
        if vol.dims != reference.dims:
            raise ShapeError(f"method {label!r} volume {path} dims {vol.dims} "
                             f"do not match reference {ref_path} dims {reference.dims}")
        volumes[label] = vol
    report = metrics.per_slice_report(volumes, reference, fbp_vol)
    written = metrics.emit_report(report, cfg["out"], with_plots=cfg["plots"])
    write_manifest(cfg["out"] + ".manifest.txt", "eval", cfg)
    for s in report.summary:
        print(f"{s.method}: mean {s.mean_psnr_db:.2f} dB, volume {s.volume_psnr_db:.2f} dB, "
              f"max improvement {s.max_improvement_db:+.2f} dB")
    for path in written:
        print(f"wrote {path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# bench


BENCH_DEFAULTS = {
    "volume": "",
    "checkpoints": "",  # space-separated checkpoint paths
    "repeats": 3,
    "chunk": 4,
    "out": "bench.csv",
}

_BENCH_ORDER = {("2d", 1): 0, ("2.5d", 3): 1, ("2.5d", 5): 2, ("2.5d", 7): 3, ("3d", 7): 4,
                ("3d", 3): 5, ("3d", 5): 6}


def cmd_bench(cfg: dict, checkpoint_flags: list[str] | None = None) -> int:
    vol_path = _require_file(cfg["volume"], "volume")
    volume = load_volume(vol_path)
    y = _normalize_f64(volume).astype(np.float32)
    paths = (cfg["checkpoints"].split() if cfg["checkpoints"] else []) + (checkpoint_flags or [])
    if not paths:
        raise UsageError("at least one checkpoint is required")
    loaded: list[tuple[int, str, NetworkParams]] = []
    missing: list[str] = []
    for path in paths:
        if not os.path.exists(path):
            print(f"warning: checkpoint not found, skipped: {path}", file=sys.stderr)
            missing.append(path)
            continue
        params = load_checkpoint(path)
        v = params.variant
        order = _BENCH_ORDER.get((v.kind, v.window), 99)
        loaded.append((order, v.label(), params))
    loaded.sort(key=lambda item: item[0])

    timing = []
    for _, label, params in loaded:
        stats = time_inference(params, y, repeats=cfg["repeats"], chunk=cfg["chunk"])
        timing.append(metrics.TimingEntry(method=label, mean_s=stats.mean_s,
                                          min_s=stats.min_s, repeats=stats.repeats))
        print(f"{label}: mean {stats.mean_s:.3f} s, min {stats.min_s:.3f} s "
              f"over {stats.repeats} runs")
    with open(cfg["out"], "w", encoding="utf-8") as fh:
        fh.write("method,mean_s,min_s,repeats\n")
        for t in timing:
            fh.write(f"{t.method},{t.mean_s:.6f},{t.min_s:.6f},{t.repeats}\n")
        for path in missing:
            fh.write(f"{path} (missing),nan,nan,0\n")
    write_manifest(cfg["out"] + ".manifest.txt", "bench", cfg)
    print(f"wrote {cfg['out']}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck


GRADCHECK_DEFAULTS = {
    "seed": 0,
    "variant": "2d",
    "corrupt": "",  # self-test hook: name of a check whose gradient is perturbed
}


def cmd_gradcheck(cfg: dict) -> int:
    if cfg["variant"] not in KINDS:
        raise UsageError(f"variant must be one of {KINDS}, got {cfg['variant']!r}")
    report = gradcheck_mod.run_gradcheck(variant_kind=cfg["variant"], seed=cfg["seed"],
                                         corrupt=cfg["corrupt"] or None)
    print(gradcheck_mod.format_report(report))
    return EXIT_OK if report.passed else EXIT_FAILURE


# ---------------------------------------------------------------------------
# parser / dispatch


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_flags(sub, defaults: dict, flag_types: dict | None = None):
    sub.add_argument("--config", metavar="PATH", help="flat key = value config file")
    types = flag_types or {}
    for key, default in defaults.items():
        flag = "--" + key.replace("_", "-")
        if isinstance(default, bool):
            sub.add_argument(flag, dest=key, type=_parse_bool, default=None,
                             metavar="BOOL", help=f"default: {default}")
        else:
            typ = types.get(key, type(default) if not isinstance(default, str) else str)
            sub.add_argument(flag, dest=key, type=typ, default=None,
                             help=f"default: {default!r}")


def build_parser() -> _Parser:
    parser = _Parser(prog="ctrefine",
                     description="Residual-network refinement of FBP CT volumes.")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("generate", help="synthesize ground-truth/FBP volume pairs")
    _add_flags(p, GENERATE_DEFAULTS)

    p = subs.add_parser("train", help="extract patches and train a network")
    _add_flags(p, TRAIN_DEFAULTS)

    p = subs.add_parser("infer", help="reconstruct a volume with a trained network")
    _add_flags(p, INFER_DEFAULTS)

    p = subs.add_parser("eval", help="masked PSNR report for reconstructed volumes")
    _add_flags(p, EVAL_DEFAULTS)
    p.add_argument("--method", action="append", metavar="LABEL=PATH",
                   help="reconstruction to evaluate (repeatable)")

    p = subs.add_parser("bench", help="inference timing table over checkpoints")
    _add_flags(p, BENCH_DEFAULTS)
    p.add_argument("--checkpoint", action="append", metavar="PATH",
                   help="checkpoint to time (repeatable)")

    p = subs.add_parser("gradcheck", help="finite-difference self-test of all gradients")
    _add_flags(p, GRADCHECK_DEFAULTS)
    return parser


_DEFAULTS = {
    "generate": GENERATE_DEFAULTS,
    "train": TRAIN_DEFAULTS,
    "infer": INFER_DEFAULTS,
    "eval": EVAL_DEFAULTS,
    "bench": BENCH_DEFAULTS,
    "gradcheck": GRADCHECK_DEFAULTS,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)

    defaults = _DEFAULTS[args.command]
    flag_values = {k: v for k, v in vars(args).items() if k in defaults}
    try:
        cfg = resolve_config(defaults, args.config, flag_values)
        if args.command == "generate":
            return cmd_generate(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "infer":
            return cmd_infer(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, method_flags=args.method)
        if args.command == "bench":
            return cmd_bench(cfg, checkpoint_flags=args.checkpoint)
        return cmd_gradcheck(cfg)
    except MissingInputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING_INPUT
    except (ShapeError, ShapeMismatchError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SHAPE_MISMATCH
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except (ContainerError, OSError, ValueError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
