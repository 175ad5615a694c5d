"""Attention-based multiple-instance learning over patch-feature bags.

The pipeline: tile raster images into patch grids (`tiler`), store
per-patch feature vectors as compact bag files (`bagio`), train gated
attention models with optional instance-level clustering (`milnet`,
`trainer`), evaluate with replicated bootstrap resplits and paired
permutation tests (`evalstat`), and render attention heatmaps (`heatmap`).
"""

from .bagio import (
    BagError,
    CaseRecord,
    CohortManifest,
    FeatureBag,
    curate,
    load_bags,
    load_manifest,
    make_bag,
    make_site_holdout,
    make_splits,
    read_bag,
    save_manifest,
    write_bag,
)
from .evalstat import (
    BootstrapReport,
    HoldoutReport,
    PredictionSet,
    bootstrap_run,
    holdout_run,
    load_report,
    perm_test,
    save_report,
    select_median_model,
)
from .heatmap import AttentionOverlay, attention_scores, render
from .milnet import MilModel, backward, forward, init_model, load_model, save_model
from .tiler import (
    PatchGrid,
    SyntheticBagSpec,
    extract_patches,
    segment_tissue,
    synth_cohort,
)
from .trainer import TrainConfig, TrainLog, fit

__version__ = "0.1.0"

__all__ = [
    "AttentionOverlay",
    "BagError",
    "BootstrapReport",
    "CaseRecord",
    "CohortManifest",
    "FeatureBag",
    "HoldoutReport",
    "MilModel",
    "PatchGrid",
    "PredictionSet",
    "SyntheticBagSpec",
    "TrainConfig",
    "TrainLog",
    "attention_scores",
    "backward",
    "bootstrap_run",
    "curate",
    "extract_patches",
    "fit",
    "forward",
    "holdout_run",
    "init_model",
    "load_bags",
    "load_manifest",
    "load_model",
    "load_report",
    "make_bag",
    "make_site_holdout",
    "make_splits",
    "perm_test",
    "read_bag",
    "render",
    "save_manifest",
    "save_model",
    "save_report",
    "segment_tissue",
    "select_median_model",
    "synth_cohort",
    "write_bag",
]
