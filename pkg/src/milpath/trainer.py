"""Training routine: AdamW, cosine annealing, weighted sampling, early stopping.

One fit runs sequential per-bag updates (batch size is fixed at 1), draws
cases with probability inversely proportional to their class frequency, and
steps the learning rate once per epoch along a cosine from lr0 down to
eta_min. Early stopping watches the validation loss with a small improvement
tolerance; the returned parameters come from the best validation epoch.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import milnet
from .bagio import FeatureBag
from .milnet import MilModel

logger = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
IMPROVEMENT_TOL = 1e-6


class TrainerError(Exception):
    """Configuration or training failure."""


class TrainingDivergedError(TrainerError):
    """Validation loss became non-finite; carries the log so far."""

    def __init__(self, message: str, log: "TrainLog"):
        super().__init__(message)
        self.log = log


@dataclass
class TrainConfig:
    lr0: float = 1e-4
    min_epochs: int = 10
    max_epochs: int = 20
    patience: int = 5
    batch_size: int = 1  # the method trains one bag at a time
    weight_decay: float = 1e-2
    eta_min: float = 1e-6
    seed: int = 0
    mode: str = "abmil"
    d_proj: int = 512
    d_attn: int = 384
    dropout_in: float = 0.1
    dropout_hidden: float = 0.25
    bag_loss_weight: float | None = None  # None -> mode default
    inst_loss_weight: float | None = None
    clam_k: int = 8
    subtyping: bool = False
    val_instance_loss: bool = False  # include the clam instance term in val loss

    def validate(self) -> None:
        if self.lr0 <= 0:
            raise TrainerError("lr0 must be > 0")
        if self.min_epochs > self.max_epochs:
            raise TrainerError("min_epochs must be <= max_epochs")
        if self.min_epochs < 1:
            raise TrainerError("min_epochs must be >= 1")
        if self.patience < 1:
            raise TrainerError("patience must be >= 1")
        if self.batch_size != 1:
            raise TrainerError("batch_size is fixed at 1")
        if self.eta_min < 0 or self.eta_min > self.lr0:
            raise TrainerError("eta_min must be in [0, lr0]")
        if self.weight_decay < 0:
            raise TrainerError("weight_decay must be >= 0")
        if self.mode not in ("abmil", "clam"):
            raise TrainerError(f"unknown mode {self.mode!r}")

    def build_model(self, d_in: int, n_classes: int) -> MilModel:
        return milnet.init_model(
            d_in=d_in,
            n_classes=n_classes,
            mode=self.mode,
            d_proj=self.d_proj,
            d_attn=self.d_attn,
            dropout_in=self.dropout_in,
            dropout_hidden=self.dropout_hidden,
            seed=self.seed,
            bag_loss_weight=self.bag_loss_weight,
            inst_loss_weight=self.inst_loss_weight,
            clam_k=self.clam_k,
            subtyping=self.subtyping,
        )


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    lr: float = 0.0
    refused_steps: int = 0  # non-finite gradient events

    @classmethod
    def for_model(cls, model: MilModel) -> "OptimizerState":
        return cls(
            m={k: np.zeros_like(p) for k, p in model.params.items()},
            v={k: np.zeros_like(p) for k, p in model.params.items()},
        )


def adamw_step(
    state: OptimizerState,
    model: MilModel,
    grads: dict[str, np.ndarray],
    lr: float,
    weight_decay: float,
    beta1: float = ADAM_BETA1,
    beta2: float = ADAM_BETA2,
    eps: float = ADAM_EPS,
) -> bool:
    """One decoupled-weight-decay Adam update in place.

    Returns False (and refuses to touch parameters or moments) when any
    gradient is non-finite.
    """
    for gr in grads.values():
        if not np.all(np.isfinite(gr)):
            state.refused_steps += 1
            logger.warning("non-finite gradient; update refused")
            return False
    state.t += 1
    state.lr = lr
    bc1 = 1.0 - beta1**state.t
    bc2 = 1.0 - beta2**state.t
    for name in model.param_names():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        theta = model.params[name]
        theta -= lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * theta)
    model.version += 1
    return True


def cosine_lr(epoch: int, t_max: int, lr0: float, eta_min: float) -> float:
    """Cosine annealing with per-epoch stepping."""
    if not 0 <= epoch <= t_max:
        raise TrainerError(f"epoch {epoch} outside [0, {t_max}]")
    return eta_min + 0.5 * (lr0 - eta_min) * (1.0 + np.cos(np.pi * epoch / t_max))


def case_probabilities(labels: Sequence[int]) -> np.ndarray:
    """P(case) proportional to 1/count(class(case))."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise TrainerError("no cases to sample")
    counts = np.bincount(labels)
    weights = 1.0 / counts[labels]
    return weights / weights.sum()


def weighted_sampler(
    labels: Sequence[int], seed: int, chunk: int = 1024
) -> Iterator[int]:
    """Infinite with-replacement case stream, inverse class frequency."""
    p = case_probabilities(labels)
    n = len(labels)
    rng = np.random.Generator(np.random.Philox(key=int(seed) & 0xFFFFFFFFFFFFFFFF))
    while True:
        for i in rng.choice(n, size=chunk, replace=True, p=p):
            yield int(i)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float


@dataclass
class TrainLog:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1  # 0-based index into epochs
    stop_reason: str = ""  # "early_stop" | "max_epochs"

    def to_jsonl(self) -> str:
        lines = [json.dumps(asdict(e), sort_keys=True) for e in self.epochs]
        lines.append(
            json.dumps(
                {"best_epoch": self.best_epoch, "stop_reason": self.stop_reason},
                sort_keys=True,
            )
        )
        return "\n".join(lines) + "\n"


def write_train_log(log: TrainLog, path: str | Path) -> None:
    Path(path).write_text(log.to_jsonl(), "utf-8")


def best_epoch_so_far(val_losses: Sequence[float], tol: float = IMPROVEMENT_TOL) -> int:
    """Index of the last epoch that improved the running best by > tol."""
    best = np.inf
    best_epoch = -1
    for e, loss in enumerate(val_losses):
        if loss < best - tol:
            best = loss
            best_epoch = e
    return best_epoch


def should_stop(
    val_losses: Sequence[float],
    min_epochs: int,
    patience: int,
    tol: float = IMPROVEMENT_TOL,
) -> bool:
    """Early-stop decision after ``len(val_losses)`` completed epochs."""
    done = len(val_losses)
    if done < min_epochs:
        return False
    best = best_epoch_so_far(val_losses, tol)
    return (done - 1) - best >= patience


def _val_loss(
    model: MilModel, bags: Sequence[FeatureBag], labels: Sequence[int], config: TrainConfig
) -> float:
    """Mean validation loss, evaluation mode (no dropout).

    By default this is the bag cross-entropy alone so abmil and clam runs
    stop on the same quantity; the config flag adds the weighted instance
    term back in.
    """
    total = 0.0
    for bag, label in zip(bags, labels):
        trace = milnet.forward(model, bag, training=False)
        loss = milnet.bag_loss(trace, label)
        if config.val_instance_loss and model.mode == "clam":
            loss = (
                model.bag_loss_weight * loss
                + model.inst_loss_weight * milnet.instance_loss(model, trace, label)
            )
        total += loss
    return total / len(bags)


def fit(
    model: MilModel,
    train_bags: Sequence[FeatureBag],
    train_labels: Sequence[int],
    val_bags: Sequence[FeatureBag],
    val_labels: Sequence[int],
    config: TrainConfig,
) -> tuple[MilModel, TrainLog]:
    """Train in place and return the model restored to its best epoch."""
    config.validate()
    if len(train_bags) != len(train_labels):
        raise TrainerError("train bags and labels differ in length")
    if not val_bags or len(val_bags) != len(val_labels):
        raise TrainerError("validation set must be non-empty and aligned")
    seeds = np.random.SeedSequence(int(config.seed) & 0xFFFFFFFFFFFFFFFF).spawn(2)
    sampler = weighted_sampler(train_labels, seed=int(seeds[0].generate_state(1)[0]))
    dropout_rng = np.random.Generator(np.random.Philox(seeds[1]))
    state = OptimizerState.for_model(model)
    log = TrainLog()
    best_val = np.inf
    best_params = model.copy_params()
    n_train = len(train_bags)
    val_history: list[float] = []
    for epoch in range(config.max_epochs):
        lr = cosine_lr(epoch, config.max_epochs, config.lr0, config.eta_min)
        epoch_loss = 0.0
        for _ in range(n_train):
            i = next(sampler)
            trace = milnet.forward(model, train_bags[i], training=True, rng=dropout_rng)
            report = milnet.loss_report(model, trace, train_labels[i])
            grads = milnet.backward(model, trace, train_labels[i])
            adamw_step(state, model, grads, lr=lr, weight_decay=config.weight_decay)
            epoch_loss += report.total
        val = _val_loss(model, val_bags, val_labels, config)
        log.epochs.append(
            EpochRecord(
                epoch=epoch,
                train_loss=epoch_loss / n_train,
                val_loss=float(val),
                lr=float(lr),
            )
        )
        if not np.isfinite(val):
            raise TrainingDivergedError(
                f"validation loss became non-finite at epoch {epoch}", log
            )
        val_history.append(float(val))
        if val < best_val - IMPROVEMENT_TOL:
            best_val = float(val)
            best_params = model.copy_params()
            log.best_epoch = epoch
        if should_stop(val_history, config.min_epochs, config.patience):
            log.stop_reason = "early_stop"
            break
    else:
        log.stop_reason = "max_epochs"
    if log.best_epoch < 0:
        # No epoch improved on +inf only if every val loss was inf-adjacent;
        # fall back to the last epoch's parameters.
        log.best_epoch = len(log.epochs) - 1
    model.set_params(best_params)
    return model, log
