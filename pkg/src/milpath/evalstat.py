"""Metrics, bootstrap replication, permutation testing, and holdout studies.

Replicates are independent: replicate i draws its own stratified split
(seeded by base_seed XOR i), trains a fresh model, and is scored on its own
held-out test cases. Aggregation is a deterministic fold in replicate-id
order no matter how many workers ran the replicates.
"""

from __future__ import annotations

import concurrent.futures
import csv
import json
import logging
import multiprocessing
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from . import milnet, trainer
from .bagio import CohortManifest, FeatureBag, SplitPlan, make_splits
from .trainer import TrainConfig

logger = logging.getLogger(__name__)

DEFAULT_FRACTIONS = (0.5, 0.2, 0.3)
DEFAULT_BOOTSTRAP_REPLICATES = 150
DEFAULT_HOLDOUT_REPLICATES = 5
CI_PERCENTILES = (2.5, 97.5)
ALPHA = 0.05


class EvalError(Exception):
    """Metric or evaluation-protocol failure."""


# ---------------------------------------------------------------------------
# Predictions and metrics
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class PredictionSet:
    case_ids: list[str]
    y_true: np.ndarray  # (n,) int
    y_pred: np.ndarray  # (n,) int
    probs: np.ndarray  # (n, C) float64

    @property
    def n_cases(self) -> int:
        return len(self.case_ids)

    @property
    def n_classes(self) -> int:
        return int(self.probs.shape[1])

    def validate(self) -> None:
        n = len(self.case_ids)
        if self.y_true.shape != (n,) or self.y_pred.shape != (n,):
            raise EvalError("prediction arrays misaligned with case ids")
        if self.probs.shape[0] != n or self.probs.ndim != 2:
            raise EvalError("probability matrix misaligned with case ids")
        c = self.probs.shape[1]
        if np.any(self.probs < 0):
            raise EvalError("negative probability")
        if np.any(np.abs(self.probs.sum(axis=1) - 1.0) > 1e-6):
            raise EvalError("probabilities must sum to 1")
        if np.any(self.y_true < 0) or np.any(self.y_true >= c):
            raise EvalError("true class index out of range")
        if not np.array_equal(self.y_pred, np.argmax(self.probs, axis=1)):
            raise EvalError("predicted class must be argmax of probabilities")

    def to_json_dict(self) -> dict:
        return {
            "case_ids": list(self.case_ids),
            "y_true": [int(t) for t in self.y_true],
            "y_pred": [int(t) for t in self.y_pred],
            "probs": [[float(x) for x in row] for row in self.probs],
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "PredictionSet":
        return cls(
            case_ids=list(doc["case_ids"]),
            y_true=np.asarray(doc["y_true"], dtype=np.int64),
            y_pred=np.asarray(doc["y_pred"], dtype=np.int64),
            probs=np.asarray(doc["probs"], dtype=np.float64),
        )


def predictions_for(
    model: milnet.MilModel,
    bags: Sequence[FeatureBag],
    case_ids: Sequence[str],
    labels: Sequence[int],
) -> PredictionSet:
    """Evaluation-mode predictions; predicted class is the argmax (first on ties)."""
    probs = np.stack([milnet.predict_probs(model, bag) for bag in bags])
    preds = PredictionSet(
        case_ids=list(case_ids),
        y_true=np.asarray(labels, dtype=np.int64),
        y_pred=np.argmax(probs, axis=1),
        probs=probs,
    )
    preds.validate()
    return preds


@dataclass
class MetricVector:
    mcc: float
    balanced_accuracy: float
    weighted_f1: float
    auroc_macro_ovr: float

    def as_dict(self) -> dict[str, float]:
        return {
            "mcc": self.mcc,
            "balanced_accuracy": self.balanced_accuracy,
            "weighted_f1": self.weighted_f1,
            "auroc_macro_ovr": self.auroc_macro_ovr,
        }


METRIC_NAMES = ("mcc", "balanced_accuracy", "weighted_f1", "auroc_macro_ovr")


def confusion(preds: PredictionSet, n_classes: int) -> np.ndarray:
    """Count matrix, rows = truth, columns = prediction."""
    if np.any(preds.y_true >= n_classes) or np.any(preds.y_pred >= n_classes):
        raise EvalError("class index out of range for confusion matrix")
    mat = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(mat, (preds.y_true, preds.y_pred), 1)
    return mat


def mcc(cm: np.ndarray) -> float:
    """Multiclass correlation from the confusion matrix; degenerate -> 0."""
    cm = np.asarray(cm, dtype=np.float64)
    s = cm.sum()
    if s <= 0:
        raise EvalError("empty confusion matrix")
    c = np.trace(cm)
    t = cm.sum(axis=1)  # true counts per class
    p = cm.sum(axis=0)  # predicted counts per class
    num = c * s - t @ p
    den = np.sqrt((s * s - p @ p) * (s * s - t @ t))
    if den == 0:
        return 0.0
    return float(num / den)


def balanced_accuracy(cm: np.ndarray) -> float:
    """Mean recall over classes that actually occur."""
    cm = np.asarray(cm, dtype=np.float64)
    rows = cm.sum(axis=1)
    present = rows > 0
    if not present.any():
        raise EvalError("confusion matrix has no true cases")
    recalls = np.diag(cm)[present] / rows[present]
    return float(recalls.mean())


def per_class_f1(cm: np.ndarray) -> np.ndarray:
    """F1 per class; 0 when precision + recall is 0."""
    cm = np.asarray(cm, dtype=np.float64)
    tp = np.diag(cm)
    rows = cm.sum(axis=1)
    cols = cm.sum(axis=0)
    f1 = np.zeros(cm.shape[0])
    for k in range(cm.shape[0]):
        prec = tp[k] / cols[k] if cols[k] > 0 else 0.0
        rec = tp[k] / rows[k] if rows[k] > 0 else 0.0
        if prec + rec > 0:
            f1[k] = 2 * prec * rec / (prec + rec)
    return f1


def weighted_f1(cm: np.ndarray) -> float:
    """Per-class F1 weighted by true-class counts."""
    cm = np.asarray(cm, dtype=np.float64)
    rows = cm.sum(axis=1)
    total = rows.sum()
    if total <= 0:
        raise EvalError("confusion matrix has no true cases")
    return float((per_class_f1(cm) * rows / total).sum())


def _binary_auroc(scores: np.ndarray, positive: np.ndarray) -> float:
    """Rank-based AUROC with midrank tie handling."""
    n_pos = int(positive.sum())
    n_neg = int(positive.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise EvalError("AUROC needs at least one positive and one negative")
    ranks = rankdata(scores, method="average")
    pos_rank_sum = ranks[positive].sum()
    return float((pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auroc(preds: PredictionSet) -> float:
    """Macro one-vs-rest AUROC; classes without both outcomes are skipped."""
    values = []
    for c in range(preds.n_classes):
        positive = preds.y_true == c
        n_pos = int(positive.sum())
        if n_pos == 0 or n_pos == preds.n_cases:
            warnings.warn(
                f"class {c} lacks positives or negatives; skipped in AUROC",
                stacklevel=2,
            )
            continue
        values.append(_binary_auroc(preds.probs[:, c], positive))
    if not values:
        raise EvalError("no class had both positive and negative cases")
    return float(np.mean(values))


def metric_vector(preds: PredictionSet, n_classes: int) -> MetricVector:
    cm = confusion(preds, n_classes)
    return MetricVector(
        mcc=mcc(cm),
        balanced_accuracy=balanced_accuracy(cm),
        weighted_f1=weighted_f1(cm),
        auroc_macro_ovr=auroc(preds),
    )


# ---------------------------------------------------------------------------
# Bootstrap
# ---------------------------------------------------------------------------


@dataclass
class ReplicateResult:
    replicate_id: int
    seed: int
    metrics: MetricVector
    per_class_f1: list[float]  # NaN when a class has no true cases
    confusion: np.ndarray
    predictions: PredictionSet
    best_epoch: int
    stop_reason: str
    checkpoint: str | None = None

    def to_json_dict(self) -> dict:
        return {
            "replicate_id": self.replicate_id,
            "seed": self.seed,
            "metrics": self.metrics.as_dict(),
            "per_class_f1": [None if np.isnan(x) else float(x) for x in self.per_class_f1],
            "confusion": [[int(x) for x in row] for row in self.confusion],
            "predictions": self.predictions.to_json_dict(),
            "best_epoch": self.best_epoch,
            "stop_reason": self.stop_reason,
            "checkpoint": self.checkpoint,
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "ReplicateResult":
        return cls(
            replicate_id=int(doc["replicate_id"]),
            seed=int(doc["seed"]),
            metrics=MetricVector(**doc["metrics"]),
            per_class_f1=[np.nan if x is None else float(x) for x in doc["per_class_f1"]],
            confusion=np.asarray(doc["confusion"], dtype=np.int64),
            predictions=PredictionSet.from_json_dict(doc["predictions"]),
            best_epoch=int(doc["best_epoch"]),
            stop_reason=str(doc["stop_reason"]),
            checkpoint=doc.get("checkpoint"),
        )


@dataclass
class BootstrapReport:
    kind: str
    task_level: str
    classes: list[str]
    protocol: dict
    replicates: list[ReplicateResult]
    aggregate: dict[str, dict[str, float]]
    per_class_f1_summary: dict[str, dict[str, float | None]]
    confusion_row_normalized: np.ndarray
    incomplete: bool = False
    failures: list[dict] = field(default_factory=list)

    def metric_values(self, name: str) -> np.ndarray:
        if name not in METRIC_NAMES:
            raise EvalError(f"unknown metric {name!r}; choose from {METRIC_NAMES}")
        return np.asarray([getattr(r.metrics, name) for r in self.replicates])

    def to_json_dict(self) -> dict:
        return {
            "kind": self.kind,
            "task_level": self.task_level,
            "classes": list(self.classes),
            "protocol": self.protocol,
            "replicates": [r.to_json_dict() for r in self.replicates],
            "aggregate": self.aggregate,
            "per_class_f1": self.per_class_f1_summary,
            "confusion_row_normalized": [
                [float(x) for x in row] for row in self.confusion_row_normalized
            ],
            "incomplete": self.incomplete,
            "failures": self.failures,
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "BootstrapReport":
        return cls(
            kind=doc["kind"],
            task_level=doc["task_level"],
            classes=list(doc["classes"]),
            protocol=doc["protocol"],
            replicates=[ReplicateResult.from_json_dict(r) for r in doc["replicates"]],
            aggregate=doc["aggregate"],
            per_class_f1_summary=doc["per_class_f1"],
            confusion_row_normalized=np.asarray(
                doc["confusion_row_normalized"], dtype=np.float64
            ),
            incomplete=bool(doc["incomplete"]),
            failures=list(doc["failures"]),
        )


def save_report(report: "BootstrapReport | HoldoutReport", path: str | Path) -> None:
    Path(path).write_text(
        json.dumps(report.to_json_dict(), sort_keys=True, indent=2) + "\n", "utf-8"
    )


def load_report(path: str | Path) -> "BootstrapReport | HoldoutReport":
    doc = json.loads(Path(path).read_text("utf-8"))
    if doc.get("kind") == "holdout":
        return HoldoutReport.from_json_dict(doc)
    return BootstrapReport.from_json_dict(doc)


def _summary(values: np.ndarray) -> dict[str, float]:
    values = np.asarray(values, dtype=np.float64)
    lo, hi = np.percentile(values, CI_PERCENTILES)
    std = float(values.std(ddof=1)) if values.size > 1 else 0.0
    return {
        "mean": float(values.mean()),
        "std": std,
        "ci_low": float(lo),
        "ci_high": float(hi),
    }


def aggregate_metrics(replicates: Sequence[ReplicateResult]) -> dict[str, dict[str, float]]:
    return {
        name: _summary(np.asarray([getattr(r.metrics, name) for r in replicates]))
        for name in METRIC_NAMES
    }


def _aggregate_per_class_f1(
    replicates: Sequence[ReplicateResult], classes: Sequence[str]
) -> dict[str, dict[str, float | None]]:
    out: dict[str, dict[str, float | None]] = {}
    table = np.asarray([r.per_class_f1 for r in replicates], dtype=np.float64)
    for k, name in enumerate(classes):
        col = table[:, k]
        valid = col[~np.isnan(col)]
        if valid.size == 0:
            out[name] = {"mean": None, "std": None, "n_evaluable": 0}
        else:
            out[name] = {
                "mean": float(valid.mean()),
                "std": float(valid.std(ddof=1)) if valid.size > 1 else 0.0,
                "n_evaluable": int(valid.size),
            }
    return out


def _average_confusion(replicates: Sequence[ReplicateResult]) -> np.ndarray:
    """Mean count matrix over replicates, then each row divided by its sum."""
    mean = np.mean([r.confusion for r in replicates], axis=0)
    rows = mean.sum(axis=1, keepdims=True)
    return np.divide(mean, rows, out=np.zeros_like(mean), where=rows > 0)


def _per_class_f1_with_nan(cm: np.ndarray) -> list[float]:
    f1 = per_class_f1(cm)
    rows = np.asarray(cm).sum(axis=1)
    return [float(f1[k]) if rows[k] > 0 else float("nan") for k in range(len(f1))]


def _class_index(manifest: CohortManifest, level: str) -> tuple[list[str], dict[str, int]]:
    classes = sorted(manifest.classes_at(level))
    if len(classes) < 2:
        raise EvalError(f"need at least 2 classes at level {level!r}, got {classes}")
    return classes, {name: i for i, name in enumerate(classes)}


def _labels_by_case(manifest: CohortManifest, level: str, index: dict[str, int]) -> dict[str, int]:
    out = {}
    for c in manifest.cases:
        lab = c.label_at(level)
        if lab is None:
            raise EvalError(f"case {c.case_id!r} has no label at level {level!r}")
        out[c.case_id] = index[lab]
    return out


def _replicate_task(payload: dict) -> dict:
    """Train one replicate and score every requested evaluation split.

    Top-level function so worker processes can unpickle it.
    """
    rep: int = payload["replicate_id"]
    plan: SplitPlan = payload["plan"]
    config: TrainConfig = payload["config"]
    bags: dict[str, FeatureBag] = payload["bags"]
    labels: dict[str, int] = payload["labels"]
    n_classes: int = payload["n_classes"]
    eval_sets: dict[str, list[str]] = payload["eval_sets"]
    checkpoint_dir: str | None = payload["checkpoint_dir"]

    # Same XOR-derived seed as the replicate's split plan; fit() spawns
    # child streams from it, so split and training draws never collide.
    seed = plan.seed
    rep_config = TrainConfig(**{**config.__dict__, "seed": seed})
    d_in = next(iter(bags.values())).feature_dim
    model = rep_config.build_model(d_in, n_classes)
    train_bags = [bags[cid] for cid in plan.train]
    train_labels = [labels[cid] for cid in plan.train]
    val_bags = [bags[cid] for cid in plan.val]
    val_labels = [labels[cid] for cid in plan.val]
    model, log = trainer.fit(
        model, train_bags, train_labels, val_bags, val_labels, rep_config
    )
    result: dict = {
        "replicate_id": rep,
        "seed": seed,
        "best_epoch": log.best_epoch,
        "stop_reason": log.stop_reason,
        "checkpoint": None,
        "evals": {},
    }
    if checkpoint_dir is not None:
        ckpt = Path(checkpoint_dir) / f"replicate_{rep:04d}.milmodel"
        milnet.save_model(model, ckpt)
        result["checkpoint"] = ckpt.name
    for name, case_ids in eval_sets.items():
        eval_bags = [bags[cid] for cid in case_ids]
        eval_labels = [labels[cid] for cid in case_ids]
        preds = predictions_for(model, eval_bags, case_ids, eval_labels)
        cm = confusion(preds, n_classes)
        result["evals"][name] = {
            "metrics": metric_vector(preds, n_classes),
            "per_class_f1": _per_class_f1_with_nan(cm),
            "confusion": cm,
            "predictions": preds,
        }
    return result


def _run_replicates(
    payloads: list[dict], workers: int
) -> tuple[dict[int, dict], list[dict]]:
    """Execute replicate tasks and fold results in replicate-id order."""
    results: dict[int, dict] = {}
    failures: list[dict] = []
    if workers <= 1:
        for payload in payloads:
            try:
                out = _replicate_task(payload)
                results[out["replicate_id"]] = out
            except Exception as exc:  # noqa: BLE001 - replicate isolation
                failures.append(
                    {"replicate_id": payload["replicate_id"], "error": repr(exc)}
                )
    else:
        ctx = multiprocessing.get_context("fork")
        with concurrent.futures.ProcessPoolExecutor(
            max_workers=workers, mp_context=ctx
        ) as pool:
            futures = {
                pool.submit(_replicate_task, payload): payload["replicate_id"]
                for payload in payloads
            }
            for fut in concurrent.futures.as_completed(futures):
                rep = futures[fut]
                try:
                    out = fut.result()
                    results[out["replicate_id"]] = out
                except Exception as exc:  # noqa: BLE001 - replicate isolation
                    failures.append({"replicate_id": rep, "error": repr(exc)})
    failures.sort(key=lambda f: f["replicate_id"])
    return results, failures


def _protocol_echo(
    config: TrainConfig,
    fractions: Sequence[float],
    n_replicates: int,
    base_seed: int,
    extra: dict | None = None,
) -> dict:
    echo = {
        "fractions": [float(f) for f in fractions],
        "n_replicates": int(n_replicates),
        "min_epochs": config.min_epochs,
        "max_epochs": config.max_epochs,
        "patience": config.patience,
        "lr0": config.lr0,
        "clam_k": config.clam_k,
        "batch_size": config.batch_size,
        "weight_decay": config.weight_decay,
        "eta_min": config.eta_min,
        "mode": config.mode,
        "base_seed": int(base_seed),
    }
    if extra:
        echo.update(extra)
    return echo


def bootstrap_run(
    manifest: CohortManifest,
    level: str,
    config: TrainConfig,
    bags: dict[str, FeatureBag],
    n_replicates: int = DEFAULT_BOOTSTRAP_REPLICATES,
    base_seed: int = 0,
    fractions: Sequence[float] = DEFAULT_FRACTIONS,
    workers: int = 1,
    checkpoint_dir: str | Path | None = None,
) -> BootstrapReport:
    """Stratified resplit -> retrain -> test, n_replicates times."""
    config.validate()
    classes, index = _class_index(manifest, level)
    labels = _labels_by_case(manifest, level, index)
    missing = [cid for cid in labels if cid not in bags]
    if missing:
        raise EvalError(f"no bag loaded for cases {missing[:3]}...")
    plans = make_splits(manifest, level, fractions, n_replicates, base_seed)
    if checkpoint_dir is not None:
        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
    payloads = [
        {
            "replicate_id": plan.replicate_id,
            "plan": plan,
            "config": config,
            "bags": bags,
            "labels": labels,
            "n_classes": len(classes),
            "eval_sets": {"test": list(plan.test)},
            "checkpoint_dir": str(checkpoint_dir) if checkpoint_dir else None,
        }
        for plan in plans
    ]
    results, failures = _run_replicates(payloads, workers)
    replicates = []
    for rep in sorted(results):
        out = results[rep]
        ev = out["evals"]["test"]
        replicates.append(
            ReplicateResult(
                replicate_id=rep,
                seed=out["seed"],
                metrics=ev["metrics"],
                per_class_f1=ev["per_class_f1"],
                confusion=ev["confusion"],
                predictions=ev["predictions"],
                best_epoch=out["best_epoch"],
                stop_reason=out["stop_reason"],
                checkpoint=out["checkpoint"],
            )
        )
    if not replicates:
        raise EvalError(f"all {n_replicates} replicates failed: {failures[:2]}")
    return BootstrapReport(
        kind="bootstrap",
        task_level=level,
        classes=classes,
        protocol=_protocol_echo(config, fractions, n_replicates, base_seed),
        replicates=replicates,
        aggregate=aggregate_metrics(replicates),
        per_class_f1_summary=_aggregate_per_class_f1(replicates, classes),
        confusion_row_normalized=_average_confusion(replicates),
        incomplete=bool(failures),
        failures=failures,
    )


# ---------------------------------------------------------------------------
# Permutation test
# ---------------------------------------------------------------------------


@dataclass
class PermTestResult:
    observed_mean_diff: float
    p_value: float
    n_permutations: int
    bonferroni_factor: int
    significant: bool  # at alpha = 0.05 / bonferroni_factor

    def to_json_dict(self) -> dict:
        return {
            "observed_mean_diff": self.observed_mean_diff,
            "p_value": self.p_value,
            "n_permutations": self.n_permutations,
            "bonferroni_factor": self.bonferroni_factor,
            "alpha": ALPHA / self.bonferroni_factor,
            "significant": self.significant,
        }


def perm_test(
    values_a: Sequence[float],
    values_b: Sequence[float],
    n_perm: int = 10000,
    seed: int = 0,
    n_comparisons: int = 1,
) -> PermTestResult:
    """Two-sided paired permutation test by random sign flips.

    p = (1 + #{|perm stat| >= |observed|}) / (n_perm + 1), so p is never 0.
    """
    a = np.asarray(values_a, dtype=np.float64)
    b = np.asarray(values_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size == 0:
        raise EvalError("paired vectors must be 1-D and of equal, non-zero length")
    if n_perm < 1:
        raise EvalError("n_perm must be >= 1")
    if n_comparisons < 1:
        raise EvalError("n_comparisons must be >= 1")
    d = a - b
    observed = float(d.mean())
    rng = np.random.Generator(np.random.Philox(key=int(seed) & 0xFFFFFFFFFFFFFFFF))
    count = 0
    remaining = n_perm
    chunk = max(1, min(4096, n_perm))
    while remaining > 0:
        m = min(chunk, remaining)
        signs = rng.integers(0, 2, size=(m, d.size)).astype(np.float64) * 2.0 - 1.0
        stats = (signs * d).mean(axis=1)
        count += int(np.sum(np.abs(stats) >= abs(observed)))
        remaining -= m
    p = (1 + count) / (n_perm + 1)
    return PermTestResult(
        observed_mean_diff=observed,
        p_value=float(p),
        n_permutations=n_perm,
        bonferroni_factor=n_comparisons,
        significant=bool(p <= ALPHA / n_comparisons),
    )


# ---------------------------------------------------------------------------
# Site holdout
# ---------------------------------------------------------------------------


@dataclass
class HoldoutReport:
    in_site: BootstrapReport
    out_of_site: BootstrapReport
    mcc_drop: float  # mean out-of-site MCC minus mean in-site MCC
    direction: str  # "up" | "down"
    protocol: dict

    def to_json_dict(self) -> dict:
        return {
            "kind": "holdout",
            "protocol": self.protocol,
            "in_site": self.in_site.to_json_dict(),
            "out_of_site": self.out_of_site.to_json_dict(),
            "mcc_drop": self.mcc_drop,
            "direction": self.direction,
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "HoldoutReport":
        return cls(
            in_site=BootstrapReport.from_json_dict(doc["in_site"]),
            out_of_site=BootstrapReport.from_json_dict(doc["out_of_site"]),
            mcc_drop=float(doc["mcc_drop"]),
            direction=str(doc["direction"]),
            protocol=doc["protocol"],
        )


def holdout_run(
    train_manifest: CohortManifest,
    test_manifest: CohortManifest,
    level: str,
    config: TrainConfig,
    bags: dict[str, FeatureBag],
    n_replicates: int = DEFAULT_HOLDOUT_REPLICATES,
    base_seed: int = 0,
    fractions: Sequence[float] = DEFAULT_FRACTIONS,
    workers: int = 1,
    checkpoint_dir: str | Path | None = None,
) -> HoldoutReport:
    """Train on in-site splits; score the in-site test third and the full
    out-of-site set with the same replicate models."""
    config.validate()
    classes, index = _class_index(train_manifest, level)
    labels = _labels_by_case(train_manifest, level, index)
    out_cases = [c.case_id for c in test_manifest.cases]
    for c in test_manifest.cases:
        lab = c.label_at(level)
        if lab not in index:
            raise EvalError(
                f"out-of-site case {c.case_id!r} has class {lab!r} unknown to the train side"
            )
        labels[c.case_id] = index[lab]
    plans = make_splits(train_manifest, level, fractions, n_replicates, base_seed)
    if checkpoint_dir is not None:
        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
    payloads = [
        {
            "replicate_id": plan.replicate_id,
            "plan": plan,
            "config": config,
            "bags": bags,
            "labels": labels,
            "n_classes": len(classes),
            "eval_sets": {"test": list(plan.test), "out": out_cases},
            "checkpoint_dir": str(checkpoint_dir) if checkpoint_dir else None,
        }
        for plan in plans
    ]
    results, failures = _run_replicates(payloads, workers)
    in_reps: list[ReplicateResult] = []
    out_reps: list[ReplicateResult] = []
    for rep in sorted(results):
        out = results[rep]
        for name, bucket in (("test", in_reps), ("out", out_reps)):
            ev = out["evals"][name]
            bucket.append(
                ReplicateResult(
                    replicate_id=rep,
                    seed=out["seed"],
                    metrics=ev["metrics"],
                    per_class_f1=ev["per_class_f1"],
                    confusion=ev["confusion"],
                    predictions=ev["predictions"],
                    best_epoch=out["best_epoch"],
                    stop_reason=out["stop_reason"],
                    checkpoint=out["checkpoint"],
                )
            )
    if not in_reps:
        raise EvalError(f"all {n_replicates} replicates failed: {failures[:2]}")
    protocol = _protocol_echo(
        config,
        fractions,
        n_replicates,
        base_seed,
        extra={"holdout_classes": classes},
    )
    def _report(reps: list[ReplicateResult]) -> BootstrapReport:
        return BootstrapReport(
            kind="bootstrap",
            task_level=level,
            classes=classes,
            protocol=protocol,
            replicates=reps,
            aggregate=aggregate_metrics(reps),
            per_class_f1_summary=_aggregate_per_class_f1(reps, classes),
            confusion_row_normalized=_average_confusion(reps),
            incomplete=bool(failures),
            failures=failures,
        )
    in_report = _report(in_reps)
    out_report = _report(out_reps)
    drop = out_report.aggregate["mcc"]["mean"] - in_report.aggregate["mcc"]["mean"]
    return HoldoutReport(
        in_site=in_report,
        out_of_site=out_report,
        mcc_drop=float(drop),
        direction="up" if drop >= 0 else "down",
        protocol=protocol,
    )


def select_median_model(report: BootstrapReport) -> int:
    """Replicate whose test MCC sits closest to the median; ties -> lowest id."""
    if not report.replicates:
        raise EvalError("report has no replicates")
    mccs = report.metric_values("mcc")
    median = np.median(mccs)
    dist = np.abs(mccs - median)
    best = int(np.argmin(dist))  # argmin takes the first (lowest id) on ties
    return report.replicates[best].replicate_id


# ---------------------------------------------------------------------------
# CSV output
# ---------------------------------------------------------------------------


def write_metrics_csv(report: "BootstrapReport | HoldoutReport", path: str | Path) -> None:
    """Metric table: mean, std, and 95% CI per metric (in/out + drop for holdout)."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        if isinstance(report, HoldoutReport):
            writer.writerow(
                [
                    "metric",
                    "in_site_mean", "in_site_std", "in_site_ci_low", "in_site_ci_high",
                    "out_mean", "out_std", "out_ci_low", "out_ci_high",
                    "drop", "direction",
                ]
            )
            for name in METRIC_NAMES:
                a = report.in_site.aggregate[name]
                b = report.out_of_site.aggregate[name]
                diff = b["mean"] - a["mean"]
                writer.writerow(
                    [
                        name,
                        repr(a["mean"]), repr(a["std"]), repr(a["ci_low"]), repr(a["ci_high"]),
                        repr(b["mean"]), repr(b["std"]), repr(b["ci_low"]), repr(b["ci_high"]),
                        repr(diff), "up" if diff >= 0 else "down",
                    ]
                )
        else:
            writer.writerow(["metric", "mean", "std", "ci_low", "ci_high"])
            for name in METRIC_NAMES:
                agg = report.aggregate[name]
                writer.writerow(
                    [
                        name,
                        repr(agg["mean"]), repr(agg["std"]),
                        repr(agg["ci_low"]), repr(agg["ci_high"]),
                    ]
                )
