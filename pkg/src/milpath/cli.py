"""Command-line entry point.

Subcommands map one-to-one onto the library: tile (tissue mask + patch
grid), synth (synthetic cohort), train (single split), bootstrap (replicated
resplit/retrain evaluation), holdout (site-wise generalization), permtest
(paired metric comparison), heatmap (attention overlay rendering), and
validate (manifest + bag checks with a curation report).

Exit codes: 0 success, 1 usage error, 2 bad input data, 3 runtime failure.
Verbosity comes from the MILPATH_LOG env var (error|warn|info|debug).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from . import evalstat, heatmap, milnet, tiler, trainer
from .bagio import (
    BagError,
    BalanceError,
    CohortManifest,
    CurationError,
    ManifestError,
    SplitError,
    load_bags,
    load_manifest,
    make_site_holdout,
    make_splits,
    read_bag,
    save_manifest,
)
from .bagio import curate as curate_manifest
from .evalstat import EvalError, bootstrap_run, holdout_run, load_report, perm_test
from .heatmap import HeatmapError
from .milnet import CheckpointError, ModelError
from .tiler import SyntheticBagSpec, TilerError, synth_cohort
from .trainer import TrainConfig, TrainerError, TrainingDivergedError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_RUNTIME = 3

LOG_LEVELS = {
    "error": logging.ERROR,
    "warn": logging.WARNING,
    "info": logging.INFO,
    "debug": logging.DEBUG,
}

LEVEL_CHOICES = ("category", "family", "type")


class ConfigError(Exception):
    """Bad experiment config; message names the offending field path."""


@dataclass
class ExperimentConfig:
    seed: int = 0
    task_level: str = "category"
    curation_min_cases: int = 10
    manifest_path: str = ""
    bag_dir: str = ""
    out_dir: str = "milpath_out"
    train: TrainConfig = field(default_factory=TrainConfig)
    n_replicates: int = evalstat.DEFAULT_BOOTSTRAP_REPLICATES
    fractions: tuple[float, float, float] = evalstat.DEFAULT_FRACTIONS
    workers: int = 1
    holdout_train_sites: tuple[str, ...] = ()
    holdout_replicates: int = evalstat.DEFAULT_HOLDOUT_REPLICATES

    def validate(self) -> None:
        if self.task_level not in LEVEL_CHOICES:
            raise ConfigError(f"config error at task_level: must be one of {LEVEL_CHOICES}")
        if self.curation_min_cases < 1:
            raise ConfigError("config error at curation_min_cases: must be >= 1")
        if self.n_replicates < 1:
            raise ConfigError("config error at bootstrap.n_replicates: must be >= 1")
        if self.holdout_replicates < 1:
            raise ConfigError("config error at holdout.n_replicates: must be >= 1")
        if len(self.fractions) != 3:
            raise ConfigError("config error at bootstrap.fractions: need [train, val, test]")
        if self.workers < 0:
            raise ConfigError("config error at bootstrap.workers: must be >= 0 (0 = auto)")
        try:
            self.train.validate()
        except TrainerError as exc:
            raise ConfigError(f"config error at train: {exc}") from exc

    def to_json_dict(self) -> dict:
        t = self.train
        return {
            "seed": self.seed,
            "task_level": self.task_level,
            "curation_min_cases": self.curation_min_cases,
            "paths": {
                "manifest": self.manifest_path,
                "bag_dir": self.bag_dir,
                "out_dir": self.out_dir,
            },
            "model": {
                "mode": t.mode,
                "d_proj": t.d_proj,
                "d_attn": t.d_attn,
                "dropout_in": t.dropout_in,
                "dropout_hidden": t.dropout_hidden,
                "bag_loss_weight": t.bag_loss_weight,
                "inst_loss_weight": t.inst_loss_weight,
                "subtyping": t.subtyping,
            },
            "train": {
                "lr0": t.lr0,
                "min_epochs": t.min_epochs,
                "max_epochs": t.max_epochs,
                "patience": t.patience,
                "weight_decay": t.weight_decay,
                "eta_min": t.eta_min,
                "clam_k": t.clam_k,
                "val_instance_loss": t.val_instance_loss,
            },
            "bootstrap": {
                "n_replicates": self.n_replicates,
                "fractions": list(self.fractions),
                "workers": self.workers,
            },
            "holdout": {
                "train_sites": list(self.holdout_train_sites),
                "n_replicates": self.holdout_replicates,
            },
        }


def _section(doc: dict, name: str, allowed: set[str]) -> dict:
    part = doc.get(name, {})
    if not isinstance(part, dict):
        raise ConfigError(f"config error at {name}: expected an object")
    for key in part:
        if key not in allowed:
            raise ConfigError(f"config error at {name}.{key}: unknown field")
    return part


def _typed(section: dict, prefix: str, key: str, kind, default):
    if key not in section or section[key] is None:
        return default
    value = section[key]
    path = f"{prefix}.{key}" if prefix else key
    if kind is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if kind is int and isinstance(value, int) and not isinstance(value, bool):
        return value
    if kind is bool and isinstance(value, bool):
        return value
    if kind is str and isinstance(value, str):
        return value
    if kind is list and isinstance(value, list):
        return value
    raise ConfigError(f"config error at {path}: expected {kind.__name__}")


_TOP_KEYS = {"seed", "task_level", "curation_min_cases", "paths", "model", "train", "bootstrap", "holdout"}
_PATH_KEYS = {"manifest", "bag_dir", "out_dir"}
_MODEL_KEYS = {"mode", "d_proj", "d_attn", "dropout_in", "dropout_hidden", "bag_loss_weight", "inst_loss_weight", "subtyping"}
_TRAIN_KEYS = {"lr0", "min_epochs", "max_epochs", "patience", "weight_decay", "eta_min", "clam_k", "val_instance_loss"}
_BOOT_KEYS = {"n_replicates", "fractions", "workers"}
_HOLD_KEYS = {"train_sites", "n_replicates"}


def parse_config(doc: dict, config_dir: Path | None = None) -> ExperimentConfig:
    """Build a validated ExperimentConfig; errors name the field path.

    Relative paths in the file resolve against the config file's directory.
    """
    if not isinstance(doc, dict):
        raise ConfigError("config error at <root>: expected a JSON object")
    for key in doc:
        if key not in _TOP_KEYS:
            raise ConfigError(f"config error at {key}: unknown field")
    paths = _section(doc, "paths", _PATH_KEYS)
    model = _section(doc, "model", _MODEL_KEYS)
    train = _section(doc, "train", _TRAIN_KEYS)
    boot = _section(doc, "bootstrap", _BOOT_KEYS)
    hold = _section(doc, "holdout", _HOLD_KEYS)

    train_config = TrainConfig(
        lr0=_typed(train, "train", "lr0", float, 1e-4),
        min_epochs=_typed(train, "train", "min_epochs", int, 10),
        max_epochs=_typed(train, "train", "max_epochs", int, 20),
        patience=_typed(train, "train", "patience", int, 5),
        weight_decay=_typed(train, "train", "weight_decay", float, 1e-2),
        eta_min=_typed(train, "train", "eta_min", float, 1e-6),
        seed=_typed(doc, "", "seed", int, 0),
        mode=_typed(model, "model", "mode", str, "abmil"),
        d_proj=_typed(model, "model", "d_proj", int, 512),
        d_attn=_typed(model, "model", "d_attn", int, 384),
        dropout_in=_typed(model, "model", "dropout_in", float, 0.1),
        dropout_hidden=_typed(model, "model", "dropout_hidden", float, 0.25),
        bag_loss_weight=_typed(model, "model", "bag_loss_weight", float, None),
        inst_loss_weight=_typed(model, "model", "inst_loss_weight", float, None),
        clam_k=_typed(train, "train", "clam_k", int, 8),
        subtyping=_typed(model, "model", "subtyping", bool, False),
        val_instance_loss=_typed(train, "train", "val_instance_loss", bool, False),
    )
    fractions = _typed(boot, "bootstrap", "fractions", list, [0.5, 0.2, 0.3])
    if len(fractions) != 3 or not all(
        isinstance(x, (int, float)) and not isinstance(x, bool) for x in fractions
    ):
        raise ConfigError("config error at bootstrap.fractions: need 3 numbers")
    sites = _typed(hold, "holdout", "train_sites", list, [])
    if not all(isinstance(s, str) for s in sites):
        raise ConfigError("config error at holdout.train_sites: expected strings")

    def _resolve(p: str) -> str:
        if not p or config_dir is None or Path(p).is_absolute():
            return p
        return str(config_dir / p)

    config = ExperimentConfig(
        seed=_typed(doc, "", "seed", int, 0),
        task_level=_typed(doc, "", "task_level", str, "category"),
        curation_min_cases=_typed(doc, "", "curation_min_cases", int, 10),
        manifest_path=_resolve(_typed(paths, "paths", "manifest", str, "")),
        bag_dir=_resolve(_typed(paths, "paths", "bag_dir", str, "")),
        out_dir=_resolve(_typed(paths, "paths", "out_dir", str, "milpath_out")),
        train=train_config,
        n_replicates=_typed(boot, "bootstrap", "n_replicates", int, evalstat.DEFAULT_BOOTSTRAP_REPLICATES),
        fractions=tuple(float(x) for x in fractions),
        workers=_typed(boot, "bootstrap", "workers", int, 1),
        holdout_train_sites=tuple(sites),
        holdout_replicates=_typed(hold, "holdout", "n_replicates", int, evalstat.DEFAULT_HOLDOUT_REPLICATES),
    )
    config.validate()
    return config


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text("utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config error in {path}: line {exc.lineno}: {exc.msg}") from exc
    return parse_config(doc, config_dir=path.parent)


def _apply_overrides(config: ExperimentConfig, args: argparse.Namespace) -> ExperimentConfig:
    """Command-line flags win over config-file values."""
    if getattr(args, "seed", None) is not None:
        config.seed = args.seed
        config.train.seed = args.seed
    if getattr(args, "level", None) is not None:
        config.task_level = args.level
    if getattr(args, "out_dir", None) is not None:
        config.out_dir = args.out_dir
    if getattr(args, "replicates", None) is not None:
        config.n_replicates = args.replicates
        config.holdout_replicates = args.replicates
    if getattr(args, "workers", None) is not None:
        config.workers = args.workers
    if getattr(args, "mode", None) is not None:
        config.train.mode = args.mode
    if getattr(args, "min_cases", None) is not None:
        config.curation_min_cases = args.min_cases
    if getattr(args, "train_sites", None) is not None:
        config.holdout_train_sites = tuple(
            s for s in args.train_sites.split(",") if s
        )
    config.validate()
    return config


def _resolve_workers(workers: int) -> int:
    return workers if workers > 0 else (os.cpu_count() or 1)


def _write_effective_config(config: ExperimentConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    text = json.dumps(config.to_json_dict(), sort_keys=True, indent=2) + "\n"
    (out_dir / "effective_config.json").write_text(text, "utf-8")


def _load_cohort(config: ExperimentConfig) -> tuple[CohortManifest, dict]:
    """Curated manifest plus bags, per the config's level and threshold."""
    if not config.manifest_path:
        raise ConfigError("config error at paths.manifest: required for this command")
    if not config.bag_dir:
        raise ConfigError("config error at paths.bag_dir: required for this command")
    manifest = load_manifest(config.manifest_path)
    result = curate_manifest(manifest, config.task_level, config.curation_min_cases)
    for line in result.report.lines():
        logger.info("%s", line)
    bags = load_bags(result.manifest, config.bag_dir)
    return result.manifest, bags


# ---------------------------------------------------------------------------
# Subcommand handlers
# ---------------------------------------------------------------------------


def _cmd_tile(args: argparse.Namespace) -> int:
    image = tiler.load_image(args.image)
    mask = tiler.segment_tissue(image, downsample=args.downsample)
    grid = tiler.extract_patches(
        image, mask, patch_size=args.patch_size, min_tissue_fraction=args.min_tissue
    )
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = Path(args.image).stem
    grid_path = out_dir / f"{stem}.grid.json"
    tiler.save_grid(grid, grid_path)
    if args.mask_png:
        tiler.save_mask_png(mask, out_dir / f"{stem}.mask.png")
    print(f"{grid.coords.shape[0]} patches (threshold {mask.threshold}) -> {grid_path}")
    return EXIT_OK


def _cmd_synth(args: argparse.Namespace) -> int:
    spec = SyntheticBagSpec(
        n_classes=args.classes,
        feature_dim=args.dim,
        bag_size=(args.bag_min, args.bag_max),
        signal_fraction=args.signal_fraction,
        separation=args.separation,
        noise_scale=args.noise,
        seed=args.seed if args.seed is not None else 0,
    )
    try:
        spec.validate()
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    sites = tuple(s for s in args.sites.split(",") if s)
    if not sites:
        print("error: --sites must name at least one site", file=sys.stderr)
        return EXIT_USAGE
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest, _ = synth_cohort(spec, args.cases, sites=sites, out_dir=out_dir)
    save_manifest(manifest, out_dir / "manifest.json")
    print(f"{len(manifest.cases)} cases ({args.classes} classes) -> {out_dir}")
    return EXIT_OK


def _cmd_train(args: argparse.Namespace) -> int:
    config = _apply_overrides(load_config(args.config), args)
    manifest, bags = _load_cohort(config)
    classes, index = evalstat._class_index(manifest, config.task_level)
    labels = evalstat._labels_by_case(manifest, config.task_level, index)
    plan = make_splits(
        manifest, config.task_level, config.fractions, 1, config.seed
    )[0]
    d_in = next(iter(bags.values())).feature_dim
    model = config.train.build_model(d_in, len(classes))
    model, log = trainer.fit(
        model,
        [bags[c] for c in plan.train],
        [labels[c] for c in plan.train],
        [bags[c] for c in plan.val],
        [labels[c] for c in plan.val],
        config.train,
    )
    out_dir = Path(config.out_dir)
    _write_effective_config(config, out_dir)
    milnet.save_model(
        model, out_dir / "model.milmodel", config_echo=config.to_json_dict()
    )
    trainer.write_train_log(log, out_dir / "train_log.jsonl")
    best = log.epochs[log.best_epoch]
    print(
        f"best epoch {log.best_epoch} (val loss {best.val_loss:.6f}, "
        f"{log.stop_reason}) -> {out_dir / 'model.milmodel'}"
    )
    return EXIT_OK


def _cmd_bootstrap(args: argparse.Namespace) -> int:
    config = _apply_overrides(load_config(args.config), args)
    manifest, bags = _load_cohort(config)
    out_dir = Path(config.out_dir)
    _write_effective_config(config, out_dir)
    report = bootstrap_run(
        manifest,
        config.task_level,
        config.train,
        bags,
        n_replicates=config.n_replicates,
        base_seed=config.seed,
        fractions=config.fractions,
        workers=_resolve_workers(config.workers),
        checkpoint_dir=out_dir / "models" if args.save_models else None,
    )
    evalstat.save_report(report, out_dir / "report.json")
    evalstat.write_metrics_csv(report, out_dir / "metrics.csv")
    for name in evalstat.METRIC_NAMES:
        agg = report.aggregate[name]
        print(
            f"{name}: {agg['mean']:.4f} +/- {agg['std']:.4f} "
            f"[{agg['ci_low']:.4f}, {agg['ci_high']:.4f}]"
        )
    if report.incomplete:
        print(f"warning: {len(report.failures)} replicates failed", file=sys.stderr)
    print(f"report -> {out_dir / 'report.json'}")
    return EXIT_OK


def _cmd_holdout(args: argparse.Namespace) -> int:
    config = _apply_overrides(load_config(args.config), args)
    if not config.holdout_train_sites:
        print(
            "error: holdout needs train sites (config holdout.train_sites or --train-sites)",
            file=sys.stderr,
        )
        return EXIT_USAGE
    if not config.manifest_path or not config.bag_dir:
        raise ConfigError("config error at paths: manifest and bag_dir required")
    manifest = load_manifest(config.manifest_path)
    split = make_site_holdout(
        manifest,
        config.holdout_train_sites,
        config.task_level,
        config.curation_min_cases,
    )
    for w in split.warnings:
        logger.warning("%s", w)
    bags = load_bags(split.train, config.bag_dir)
    bags.update(load_bags(split.test, config.bag_dir))
    out_dir = Path(config.out_dir)
    _write_effective_config(config, out_dir)
    report = holdout_run(
        split.train,
        split.test,
        config.task_level,
        config.train,
        bags,
        n_replicates=config.holdout_replicates,
        base_seed=config.seed,
        fractions=config.fractions,
        workers=_resolve_workers(config.workers),
        checkpoint_dir=out_dir / "models" if args.save_models else None,
    )
    evalstat.save_report(report, out_dir / "report.json")
    evalstat.write_metrics_csv(report, out_dir / "metrics.csv")
    a = report.in_site.aggregate["mcc"]["mean"]
    b = report.out_of_site.aggregate["mcc"]["mean"]
    print(f"mcc in-site {a:.4f} / out-of-site {b:.4f} ({report.direction} {report.mcc_drop:+.4f})")
    print(f"report -> {out_dir / 'report.json'}")
    return EXIT_OK


def _cmd_permtest(args: argparse.Namespace) -> int:
    report_a = load_report(args.a)
    report_b = load_report(args.b)
    for name, rep in (("--a", report_a), ("--b", report_b)):
        if not isinstance(rep, evalstat.BootstrapReport):
            print(f"error: {name} must point at a bootstrap report", file=sys.stderr)
            return EXIT_DATA
    ids_a = [r.replicate_id for r in report_a.replicates]
    ids_b = [r.replicate_id for r in report_b.replicates]
    if ids_a != ids_b:
        print(
            "error: reports are not paired (replicate ids differ); "
            f"{len(ids_a)} vs {len(ids_b)} replicates",
            file=sys.stderr,
        )
        return EXIT_DATA
    result = perm_test(
        report_a.metric_values(args.metric),
        report_b.metric_values(args.metric),
        n_perm=args.permutations,
        seed=args.seed if args.seed is not None else 0,
        n_comparisons=args.comparisons,
    )
    doc = result.to_json_dict()
    doc["metric"] = args.metric
    print(
        f"{args.metric}: diff {result.observed_mean_diff:+.6f}, "
        f"p = {result.p_value:.6g} (alpha {doc['alpha']:.6g}, "
        f"{'significant' if result.significant else 'not significant'})"
    )
    if args.out:
        Path(args.out).write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n", "utf-8")
        print(f"result -> {args.out}")
    return EXIT_OK


def _cmd_heatmap(args: argparse.Namespace) -> int:
    model, _ = milnet.load_model(args.model)
    bag = read_bag(args.bag)
    overlay = heatmap.attention_scores(
        model, bag, normalization=args.normalization, patch_size=args.patch_size
    )
    if args.overlay_out:
        heatmap.save_overlay(overlay, args.overlay_out)
    base = tiler.load_image(args.base) if args.base else None
    annotations = heatmap.load_annotations(args.annotations) if args.annotations else None
    image = heatmap.render(
        overlay,
        base_image=base,
        alpha=args.alpha,
        slide=args.slide,
        annotations=annotations,
    )
    heatmap.save_png(image, args.out)
    print(f"{overlay.n_instances} instances -> {args.out}")
    return EXIT_OK


def _cmd_validate(args: argparse.Namespace) -> int:
    if args.config:
        config = _apply_overrides(load_config(args.config), args)
        manifest_path, bag_dir = config.manifest_path, config.bag_dir
        level, min_cases = config.task_level, config.curation_min_cases
    else:
        if not args.manifest or not args.bag_dir:
            print(
                "error: validate needs --config or both --manifest and --bag-dir",
                file=sys.stderr,
            )
            return EXIT_USAGE
        manifest_path, bag_dir = args.manifest, args.bag_dir
        level = args.level or "category"
        min_cases = args.min_cases if args.min_cases is not None else 10
    manifest = load_manifest(manifest_path)
    manifest.validate(base_dir=bag_dir, check_paths=True)
    bags = load_bags(manifest, bag_dir)
    print(f"{len(manifest.cases)} cases, {len(bags)} bags OK")
    result = curate_manifest(manifest, level, min_cases)
    for line in result.report.lines():
        print(line)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; the contract here is 1."""

    def error(self, message):  # noqa: D102 - argparse hook
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _formatter(prog: str) -> argparse.HelpFormatter:
    # Pinned width so --help output is stable across terminals.
    return argparse.HelpFormatter(prog, width=80)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="milpath",
        description="Attention-based multiple-instance learning over patch-feature bags.",
        formatter_class=_formatter,
    )
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    p = sub.add_parser(
        "tile",
        help="segment tissue and write a patch grid",
        description="Segment tissue in a raster image and write the patch grid JSON.",
        formatter_class=_formatter,
    )
    p.add_argument("--image", required=True, help="input RGB raster image")
    p.add_argument("--out-dir", required=True, help="output directory")
    p.add_argument("--patch-size", type=int, default=224, help="patch edge in pixels (default 224)")
    p.add_argument("--min-tissue", type=float, default=0.5, help="minimum tissue fraction per patch (default 0.5)")
    p.add_argument("--downsample", type=int, default=32, help="mask downsample factor (default 32)")
    p.add_argument("--mask-png", action="store_true", help="also write the binary tissue mask as PNG")
    p.set_defaults(func=_cmd_tile)

    p = sub.add_parser(
        "synth",
        help="generate a synthetic cohort",
        description="Generate a synthetic cohort of feature bags plus its manifest.",
        formatter_class=_formatter,
    )
    p.add_argument("--classes", type=int, required=True, help="number of classes")
    p.add_argument("--cases", type=int, required=True, help="cases per class")
    p.add_argument("--dim", type=int, required=True, help="feature dimension")
    p.add_argument("--out-dir", required=True, help="output directory")
    p.add_argument("--bag-min", type=int, default=32, help="minimum bag size (default 32)")
    p.add_argument("--bag-max", type=int, default=96, help="maximum bag size (default 96)")
    p.add_argument("--signal-fraction", type=float, default=0.2, help="signal instance fraction (default 0.2)")
    p.add_argument("--separation", type=float, default=6.0, help="class mean separation in noise units (default 6)")
    p.add_argument("--noise", type=float, default=1.0, help="noise scale (default 1)")
    p.add_argument("--sites", default=",".join(tiler.DEFAULT_SITES), help="comma-separated site names")
    p.add_argument("--seed", type=int, default=None, help="random seed (default 0)")
    p.set_defaults(func=_cmd_synth)

    def _common_run_flags(p: argparse.ArgumentParser, replicates_help: str) -> None:
        p.add_argument("--config", required=True, help="experiment config JSON")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--level", choices=LEVEL_CHOICES, default=None, help="override task level")
        p.add_argument("--out-dir", default=None, help="override output directory")
        p.add_argument("--replicates", type=int, default=None, help=replicates_help)
        p.add_argument("--workers", type=int, default=None, help="worker pool width (0 = all cores)")
        p.add_argument("--mode", choices=("abmil", "clam"), default=None, help="override model mode")
        p.add_argument("--min-cases", type=int, default=None, help="override curation threshold")

    p = sub.add_parser(
        "train",
        help="train one model on one stratified split",
        description="Train a single model on one stratified split and save the checkpoint.",
        formatter_class=_formatter,
    )
    _common_run_flags(p, "unused; kept for config-flag symmetry")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser(
        "bootstrap",
        help="replicated resplit/retrain evaluation",
        description="Run the replicated bootstrap evaluation and write report JSON + CSV.",
        formatter_class=_formatter,
    )
    _common_run_flags(p, "bootstrap replicates (default 150)")
    p.add_argument("--save-models", action="store_true", help="save each replicate checkpoint")
    p.set_defaults(func=_cmd_bootstrap)

    p = sub.add_parser(
        "holdout",
        help="site-holdout generalization study",
        description="Hold out sites, train on the rest, and compare in-site vs out-of-site metrics.",
        formatter_class=_formatter,
    )
    _common_run_flags(p, "holdout replicates (default 5)")
    p.add_argument("--train-sites", default=None, help="comma-separated training sites (overrides config)")
    p.add_argument("--save-models", action="store_true", help="save each replicate checkpoint")
    p.set_defaults(func=_cmd_holdout)

    p = sub.add_parser(
        "permtest",
        help="paired permutation test between two reports",
        description="Paired sign-flip permutation test between two bootstrap reports.",
        formatter_class=_formatter,
    )
    p.add_argument("--a", required=True, help="first bootstrap report JSON")
    p.add_argument("--b", required=True, help="second bootstrap report JSON")
    p.add_argument("--metric", choices=evalstat.METRIC_NAMES, default="mcc", help="metric to compare (default mcc)")
    p.add_argument("--permutations", type=int, default=10000, help="number of sign-flip permutations (default 10000)")
    p.add_argument("--comparisons", type=int, default=1, help="Bonferroni correction factor (default 1)")
    p.add_argument("--seed", type=int, default=None, help="random seed (default 0)")
    p.add_argument("--out", default=None, help="write the result JSON here")
    p.set_defaults(func=_cmd_permtest)

    p = sub.add_parser(
        "heatmap",
        help="render an attention heatmap for one bag",
        description="Score a bag with a trained model and render the attention overlay.",
        formatter_class=_formatter,
    )
    p.add_argument("--model", required=True, help="model checkpoint")
    p.add_argument("--bag", required=True, help="feature bag file")
    p.add_argument("--out", required=True, help="output PNG path")
    p.add_argument("--normalization", choices=heatmap.NORMALIZATION_MODES, default="minmax", help="score normalization (default minmax)")
    p.add_argument("--alpha", type=float, default=heatmap.DEFAULT_ALPHA, help="overlay opacity in [0,1] (default 0.5)")
    p.add_argument("--slide", type=int, default=None, help="slide index to render (default: the only one)")
    p.add_argument("--base", default=None, help="base raster image to blend over")
    p.add_argument("--annotations", default=None, help="polygon annotation JSON to outline")
    p.add_argument("--overlay-out", default=None, help="also write the overlay JSON here")
    p.add_argument("--patch-size", type=int, default=224, help="patch edge in pixels (default 224)")
    p.set_defaults(func=_cmd_heatmap)

    p = sub.add_parser(
        "validate",
        help="check a manifest and its bags, print the curation report",
        description="Validate manifest and bag files, then print the curation report.",
        formatter_class=_formatter,
    )
    p.add_argument("--config", default=None, help="experiment config JSON")
    p.add_argument("--manifest", default=None, help="manifest path (with --bag-dir)")
    p.add_argument("--bag-dir", default=None, help="bag directory (with --manifest)")
    p.add_argument("--level", choices=LEVEL_CHOICES, default=None, help="curation level (default category)")
    p.add_argument("--min-cases", type=int, default=None, help="curation threshold (default 10)")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.set_defaults(func=_cmd_validate)

    return parser


def _setup_logging() -> None:
    raw = os.environ.get("MILPATH_LOG", "warn").lower()
    level = LOG_LEVELS.get(raw)
    if level is None:
        print(
            f"warning: MILPATH_LOG={raw!r} not in {sorted(LOG_LEVELS)}; using warn",
            file=sys.stderr,
        )
        level = logging.WARNING
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def run(argv: Sequence[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except TrainingDivergedError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (
        ConfigError,
        BagError,
        ManifestError,
        CurationError,
        SplitError,
        BalanceError,
        TilerError,
        HeatmapError,
        CheckpointError,
        TrainerError,
        json.JSONDecodeError,
        FileNotFoundError,
        IsADirectoryError,
        NotADirectoryError,
        PermissionError,
        UnicodeDecodeError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (EvalError, ModelError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - last-resort mapping to exit code
        logger.exception("unhandled failure")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
