"""Command line entry points: synth, preprocess, train, eval, heatmap.

Option values resolve in three layers: explicit flags beat the --config
file, which beats built-in defaults. The config file is flat
`key = value` text (keys match flag names with underscores); unknown
keys are rejected. Exit codes: 0 success, 1 validation error, 2
runtime or numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .heatmap import region_heatmap, stitch_heatmaps, write_image
from .metrics import evaluate
from .model import ModelCheckpoint, ModelConfig, train
from .pipeline import (
    MIN_TISSUE_DEFAULT,
    SyntheticSlideSpec,
    load_canvas,
    load_mask,
    load_sample,
    preprocess_slide,
    read_manifest,
    save_canvas,
    save_mask,
    save_sample,
    stratified_folds,
    synthesize_slides,
    write_manifest,
)


class ValidationError(ValueError):
    """Bad command line, config file, or input files."""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would exit(2); we map usage errors to 1
        raise ValidationError(message)


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


@dataclass(frozen=True)
class Opt:
    flag: str
    kind: Callable[[str], Any]
    default: Any
    help: str
    choices: tuple[str, ...] | None = None
    is_flag: bool = False  # presence toggle; config form takes a boolean value

    @property
    def dest(self) -> str:
        return self.flag.lstrip("-").replace("-", "_")


_CONFIG_OPT = Opt("--config", str, None, "flat key = value file supplying defaults")

_GEOMETRY_OPTS = [
    Opt("--region-size", int, 1024, "region tile edge, pixels"),
    Opt("--patch-size", int, 256, "patch edge inside a region, pixels"),
    Opt("--min-tissue", float, MIN_TISSUE_DEFAULT, "retention threshold on region tissue fraction"),
]

COMMANDS: dict[str, dict] = {
    "synth": {
        "help": "generate a synthetic slide corpus (masks, pixel canvases, manifest)",
        "opts": [
            _CONFIG_OPT,
            Opt("--out-dir", str, "data", "directory for manifest and slide files"),
            Opt("--n-slides", int, 120, "number of slides to generate"),
            Opt("--seed", int, 0, "generator seed"),
            Opt("--canvas-size", int, 2048, "slide edge, pixels (square)"),
            *_GEOMETRY_OPTS,
            Opt("--noise", float, 0.05, "intensity noise stddev"),
            Opt("--spacing", float, 0.5, "micrometers per pixel, recorded in the manifest"),
        ],
    },
    "preprocess": {
        "help": "tile manifest slides into per-slide feature containers",
        "opts": [
            _CONFIG_OPT,
            Opt("--data-dir", str, "data", "directory holding manifest.jsonl"),
            Opt("--out-dir", str, None, "output directory (default: <data-dir>/preprocessed)"),
            *_GEOMETRY_OPTS,
        ],
    },
    "train": {
        "help": "train per-fold models, masked and/or plain",
        "opts": [
            _CONFIG_OPT,
            Opt("--data-dir", str, "data", "directory holding preprocessed/ containers"),
            Opt("--out-dir", str, "runs", "directory for checkpoints and folds.json"),
            Opt("--masking", str, "both", "attention variant(s) to train", choices=("on", "off", "both")),
            Opt("--folds", int, 5, "stratified fold count"),
            Opt("--epochs", int, 8, "passes over the training folds"),
            Opt("--lr", float, 1e-3, "Adam learning rate"),
            Opt("--seed", int, 0, "fold splitting and model init seed"),
            Opt("--embed-dim", int, 64, "token width"),
            Opt("--region-depth", int, 2, "region transformer blocks"),
            Opt("--slide-depth", int, 2, "slide transformer blocks"),
            Opt("--num-heads", int, 4, "attention heads"),
            Opt("--mlp-ratio", float, 4.0, "MLP hidden width / token width"),
            Opt("--num-classes", int, 6, "grade classes"),
            Opt("--resume", _parse_bool, None, "continue existing checkpoints in out-dir", is_flag=True),
        ],
    },
    "eval": {
        "help": "score checkpoints on their held-out folds and write reports",
        "opts": [
            _CONFIG_OPT,
            Opt("--data-dir", str, "data", "directory holding preprocessed/ containers"),
            Opt("--runs-dir", str, "runs", "directory with checkpoints and folds.json"),
            Opt("--out-dir", str, None, "report directory (default: <runs-dir>)"),
        ],
    },
    "heatmap": {
        "help": "render attention heatmaps for slides under one checkpoint",
        "opts": [
            _CONFIG_OPT,
            Opt("--data-dir", str, "data", "directory holding preprocessed/ containers"),
            Opt("--checkpoint", str, None, "checkpoint file to render with (required)"),
            Opt("--slide-id", str, None, "single slide to render (default: all)"),
            Opt("--layer", int, -1, "region-transformer block to read attention from"),
            Opt("--downsample", int, 4, "stitching downsample factor"),
            Opt("--colormap", str, "heat", "PNG colormap", choices=("heat", "gray")),
            Opt("--out-dir", str, "heatmaps", "output directory"),
        ],
    },
}


def _build_parser(cmd: str) -> _Parser:
    spec = COMMANDS[cmd]
    parser = _Parser(prog=f"maskedvit {cmd}", description=spec["help"])
    for opt in spec["opts"]:
        if opt.is_flag:
            parser.add_argument(opt.flag, action="store_const", const=True, default=None, help=opt.help)
        else:
            shown = opt.default if opt.default is not None else "none"
            parser.add_argument(
                opt.flag,
                type=str,
                default=None,
                choices=opt.choices,
                help=f"{opt.help} (default: {shown})",
            )
    return parser


def _load_config_file(path: str) -> dict[str, str]:
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"config file not found: {path}")
    values: dict[str, str] = {}
    for line_no, raw in enumerate(p.read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValidationError(f"{path}:{line_no}: expected 'key = value', got {raw!r}")
        key, value = key.strip(), value.strip()
        if not key:
            raise ValidationError(f"{path}:{line_no}: empty key")
        if key in values:
            raise ValidationError(f"{path}:{line_no}: duplicate key {key!r}")
        values[key] = value
    return values


def _resolve(cmd: str, ns: argparse.Namespace) -> argparse.Namespace:
    """Merge CLI > config file > defaults into a fully populated namespace."""
    opts = {opt.dest: opt for opt in COMMANDS[cmd]["opts"]}
    config_values: dict[str, str] = {}
    if ns.config is not None:
        config_values = _load_config_file(ns.config)
        unknown = sorted(set(config_values) - set(opts) - {"config"})
        if unknown:
            raise ValidationError(
                f"unknown config keys for '{cmd}': {', '.join(unknown)}"
            )
        if "config" in config_values:
            raise ValidationError("a config file cannot set 'config'")
    resolved = argparse.Namespace()
    for dest, opt in opts.items():
        raw_cli = getattr(ns, dest)
        if raw_cli is not None:
            value = raw_cli if opt.is_flag else _convert(opt, raw_cli, source="flag")
        elif dest in config_values:
            value = _convert(opt, config_values[dest], source="config")
        else:
            value = opt.default
        setattr(resolved, dest, value)
    return resolved


def _convert(opt: Opt, raw: str, source: str) -> Any:
    try:
        value = opt.kind(raw)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"bad {source} value for {opt.flag}: {raw!r} ({exc})") from exc
    if opt.choices is not None and value not in opt.choices:
        raise ValidationError(
            f"bad {source} value for {opt.flag}: {value!r} (choose from {', '.join(opt.choices)})"
        )
    return value


# -- helpers -------------------------------------------------------------------


def _derive_seed(seed: int, fold: int) -> int:
    # variant-independent: both attention variants of a fold share init and shuffle
    return int(np.random.SeedSequence([seed, fold]).generate_state(1)[0])


def _load_dataset(preprocessed_dir: Path):
    if not preprocessed_dir.is_dir():
        raise ValidationError(f"no preprocessed directory at {preprocessed_dir}")
    paths = sorted(preprocessed_dir.glob("*.slide"))
    if not paths:
        raise ValidationError(f"no .slide containers in {preprocessed_dir}")
    return [load_sample(p) for p in paths]


def _canonical_json(payload: dict) -> str:
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


_VARIANT_MASKING = {"masked": True, "plain": False}


# -- commands ------------------------------------------------------------------


def cmd_synth(ns) -> int:
    if ns.n_slides < 1:
        raise ValidationError("--n-slides must be >= 1")
    spec = SyntheticSlideSpec(
        width=ns.canvas_size,
        height=ns.canvas_size,
        region_size=ns.region_size,
        patch_size=ns.patch_size,
        min_tissue=ns.min_tissue,
        noise=ns.noise,
        spacing=ns.spacing,
        seed=ns.seed,
    )
    out = Path(ns.out_dir)
    slides = synthesize_slides(spec, ns.n_slides, ns.seed)
    records = []
    for s in slides:
        mask_rel = f"slides/{s.slide_id}.mask.png"
        canvas_rel = f"slides/{s.slide_id}.canvas.png"
        save_mask(s.mask, out / mask_rel)
        save_canvas(s.canvas, out / canvas_rel)
        records.append(
            {
                "slide_id": s.slide_id,
                "mask_path": mask_rel,
                "canvas_path": canvas_rel,
                "label": s.label,
                "spacing": s.mask.spacing,
            }
        )
    write_manifest(records, out / "manifest.jsonl")
    counts = np.bincount([s.label for s in slides], minlength=spec.num_classes)
    print(f"synth: {len(slides)} slides -> {out} (labels {counts.tolist()})")
    return 0


def cmd_preprocess(ns) -> int:
    data = Path(ns.data_dir)
    manifest = data / "manifest.jsonl"
    if not manifest.exists():
        raise ValidationError(f"no manifest at {manifest}")
    out = Path(ns.out_dir) if ns.out_dir else data / "preprocessed"
    kept = skipped = 0
    for rec in read_manifest(manifest):
        slide_id = str(rec["slide_id"])
        mask = load_mask(data / rec["mask_path"])
        canvas = load_canvas(data / rec["canvas_path"])
        sample = preprocess_slide(
            mask, canvas, slide_id, int(rec["label"]),
            ns.region_size, ns.patch_size, ns.min_tissue,
        )
        if sample is None:
            print(
                f"warning: {slide_id}: no region reaches min tissue {ns.min_tissue}; skipped",
                file=sys.stderr,
            )
            skipped += 1
            continue
        save_sample(sample, out / f"{slide_id}.slide")
        kept += 1
    print(f"preprocess: {kept} slides written, {skipped} skipped -> {out}")
    return 0


def cmd_train(ns) -> int:
    data = Path(ns.data_dir)
    samples = _load_dataset(data / "preprocessed")
    labels = [s.label for s in samples]
    folds = stratified_folds(labels, ns.folds, ns.seed)
    out = Path(ns.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "folds.json").write_text(
        _canonical_json(
            {
                "seed": ns.seed,
                "k": ns.folds,
                "slide_ids": [s.slide_id for s in samples],
                "folds": folds,
            }
        )
    )
    variants = {"both": ["masked", "plain"], "on": ["masked"], "off": ["plain"]}[ns.masking]
    first = samples[0]
    for fold_index, fold in enumerate(folds):
        held_out = set(fold)
        train_set = [samples[j] for j in range(len(samples)) if j not in held_out]
        config = ModelConfig(
            region_size=first.region_size,
            patch_size=first.patch_size,
            feature_dim=first.features.shape[2],
            embed_dim=ns.embed_dim,
            region_depth=ns.region_depth,
            slide_depth=ns.slide_depth,
            num_heads=ns.num_heads,
            mlp_ratio=ns.mlp_ratio,
            num_classes=ns.num_classes,
            seed=_derive_seed(ns.seed, fold_index),
        )
        for variant in variants:
            path = out / f"fold{fold_index}.{variant}.ckpt"
            resume_ckpt = None
            if ns.resume and path.exists():
                resume_ckpt = ModelCheckpoint.load(path)
                print(
                    f"resuming fold {fold_index} {variant} from step {resume_ckpt.step} "
                    f"(masking={'on' if resume_ckpt.masking else 'off'})"
                )
            ckpt, history = train(
                train_set,
                config,
                masking=_VARIANT_MASKING[variant],
                epochs=ns.epochs,
                lr=ns.lr,
                resume=resume_ckpt,
            )
            ckpt.meta.update(
                {
                    "fold": fold_index,
                    "variant": variant,
                    "epochs": ns.epochs,
                    "lr": ns.lr,
                    "history": history,
                }
            )
            ckpt.save(path)
            print(
                f"train: fold {fold_index} {variant}: {len(train_set)} slides, "
                f"step={ckpt.step}, final mean loss {history[-1]['mean_loss']:.4f} -> {path.name}"
            )
    return 0


def cmd_eval(ns) -> int:
    data = Path(ns.data_dir)
    runs = Path(ns.runs_dir)
    out = Path(ns.out_dir) if ns.out_dir else runs
    folds_path = runs / "folds.json"
    if not folds_path.exists():
        raise ValidationError(f"no folds.json in {runs}; run train first")
    folds_info = json.loads(folds_path.read_text())
    samples = _load_dataset(data / "preprocessed")
    ids = [s.slide_id for s in samples]
    if ids != folds_info["slide_ids"]:
        raise ValidationError("preprocessed slides do not match the ones folds.json was built from")
    folds = folds_info["folds"]

    started = time.time()
    variants_report: dict[str, dict] = {}
    for variant in ("masked", "plain"):
        per_fold = []
        for fold_index, fold in enumerate(folds):
            path = runs / f"fold{fold_index}.{variant}.ckpt"
            if not path.exists():
                continue
            ckpt = ModelCheckpoint.load(path)
            print(
                f"eval: loaded {path.name}: masking={'on' if ckpt.masking else 'off'}, "
                f"step={ckpt.step}"
            )
            if ckpt.masking != _VARIANT_MASKING[variant]:
                raise ValidationError(f"{path.name} says masking={ckpt.masking}, name says {variant}")
            model, _ = ckpt.restore()
            result = evaluate(model, [samples[j] for j in fold])
            per_fold.append(
                {
                    "fold": fold_index,
                    "kappa": result.kappa,
                    "n_slides": len(fold),
                    "step": ckpt.step,
                    "confusion": result.confusion.to_lists(),
                }
            )
        if not per_fold:
            continue
        if len(per_fold) != len(folds):
            raise ValidationError(f"variant {variant!r} is missing some fold checkpoints")
        kappas = np.array([f["kappa"] for f in per_fold])
        variants_report[variant] = {
            "per_fold": per_fold,
            "fold_kappas": [float(k) for k in kappas],
            "mean_kappa": float(kappas.mean()),
            "std_kappa": float(kappas.std()),  # population std over the folds
        }
    if not variants_report:
        raise ValidationError(f"no checkpoints found in {runs}")

    report: dict[str, Any] = {
        "folds": folds,
        "slide_ids": ids,
        "seed": folds_info["seed"],
        "variants": variants_report,
    }
    if "masked" in variants_report and "plain" in variants_report:
        report["kappa_difference"] = (
            variants_report["masked"]["mean_kappa"] - variants_report["plain"]["mean_kappa"]
        )
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(_canonical_json(report))

    lines = [_format_table(variants_report, len(folds))]
    if "kappa_difference" in report:
        lines.append(f"mean kappa difference (masked - plain): {report['kappa_difference']:+.4f}")
    table = "\n".join(lines)
    print(table)
    (out / "report.txt").write_text(
        table + f"\nwall_clock_seconds: {time.time() - started:.2f}\n"
    )
    return 0


def _format_table(variants_report: dict[str, dict], k: int) -> str:
    header = ["variant"] + [f"fold{j}" for j in range(k)] + ["mean", "std"]
    rows = [header]
    for variant in ("masked", "plain"):
        if variant not in variants_report:
            continue
        block = variants_report[variant]
        rows.append(
            [variant]
            + [f"{v:.4f}" for v in block["fold_kappas"]]
            + [f"{block['mean_kappa']:.4f}", f"{block['std_kappa']:.4f}"]
        )
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    return "\n".join("  ".join(cell.ljust(w) for cell, w in zip(row, widths)) for row in rows)


def cmd_heatmap(ns) -> int:
    if not ns.checkpoint:
        raise ValidationError("--checkpoint is required")
    ckpt = ModelCheckpoint.load(ns.checkpoint)
    model, _ = ckpt.restore()
    variant = "masked" if model.masking else "plain"
    print(f"heatmap: checkpoint masking={'on' if model.masking else 'off'}, step={ckpt.step}")
    data = Path(ns.data_dir)
    samples = _load_dataset(data / "preprocessed")
    if ns.slide_id is not None:
        samples = [s for s in samples if s.slide_id == ns.slide_id]
        if not samples:
            raise ValidationError(f"slide {ns.slide_id!r} not found in {data / 'preprocessed'}")
    out = Path(ns.out_dir)
    depth = len(model.region_blocks)
    if not -depth <= ns.layer < depth:
        raise ValidationError(f"--layer {ns.layer} out of range for {depth} blocks")
    layer = ns.layer % depth
    cfg = model.config
    total = 0
    for sample in samples:
        attn = model.region_attention(sample, layer).data
        rasters = []
        slide_dir = out / sample.slide_id
        for r in range(attn.shape[0]):
            raster = region_heatmap(
                attn[r],
                sample.tissue[r],
                cfg.region_size,
                cfg.patch_size,
                reduction="mean",
                mask_background=model.masking,
            )
            raster.provenance.update(
                {"layer": layer, "variant": variant, "slide_id": sample.slide_id}
            )
            x, y = (int(v) for v in sample.region_coords[r])
            write_image(raster, slide_dir / f"region{r}_x{x}_y{y}.png", ns.colormap)
            rasters.append(raster)
            total += 1
        stitched = stitch_heatmaps(
            rasters, sample.region_coords, sample.slide_size, ns.downsample
        )
        stitched.provenance.update(
            {"layer": layer, "variant": variant, "slide_id": sample.slide_id}
        )
        write_image(stitched, slide_dir / "stitched.png", ns.colormap)
    print(f"heatmap: wrote {total} region maps and {len(samples)} stitched maps -> {out}")
    return 0


_HANDLERS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "eval": cmd_eval,
    "heatmap": cmd_heatmap,
}


def _global_help() -> str:
    lines = ["usage: maskedvit <command> [options]", "", "commands:"]
    for name, spec in COMMANDS.items():
        lines.append(f"  {name:<12} {spec['help']}")
    lines.append("")
    lines.append("run 'maskedvit <command> --help' for the command's options")
    return "\n".join(lines)


def main(argv: "list[str] | None" = None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    try:
        if not argv or argv[0] in ("-h", "--help"):
            print(_global_help())
            return 0
        cmd, rest = argv[0], argv[1:]
        if cmd not in COMMANDS:
            raise ValidationError(f"unknown command {cmd!r}; choose from {', '.join(COMMANDS)}")
        parser = _build_parser(cmd)
        try:
            ns = parser.parse_args(rest)
        except SystemExit as exc:  # --help prints and exits 0
            return int(exc.code or 0)
        resolved = _resolve(cmd, ns)
        return _HANDLERS[cmd](resolved)
    except (ValidationError, ValueError, FileNotFoundError, IndexError, KeyError) as exc:
        # malformed flags, config, or input files
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (RuntimeError, ArithmeticError) as exc:
        # training divergence and other numeric trouble
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


def run() -> None:
    sys.exit(main())
