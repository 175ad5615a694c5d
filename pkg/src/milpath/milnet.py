"""Gated-attention MIL model with hand-written exact gradients.

Forward path per bag of K instances x_k (D-dim):

    h_k = ReLU(W_p x_k + b_p)                     projection, D -> P
    s_k = w^T (tanh(V h_k + b_v) * sigmoid(U h_k + b_u))
    a   = softmax(s)                              attention over instances
    z   = sum_k a_k h_k                           pooled representation
    logits = W_c z + b_c                          bag classifier, P -> C

Input dropout hits x before the projection and hidden dropout hits h after
the ReLU, training mode only. The clam mode adds per-class instance heads
(P -> 2) trained with a smooth top-1 SVM loss on the top-k / bottom-k
attended instances. Everything is float64 internally; gradients are derived
by hand and validated against central finite differences in the test suite.
"""

from __future__ import annotations

import json
import math
import os
import struct
import tempfile
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .bagio import FeatureBag

SVM_MARGIN = 1.0
SVM_TAU = 1.0

CKPT_MAGIC = b"MILM"
CKPT_VERSION = 1


class ModelError(Exception):
    """Model construction or evaluation failure."""


class DimensionError(ModelError):
    """Shape mismatch between model and inputs."""


class NonFiniteError(ModelError):
    """A layer produced NaN or Inf."""


class StaleTraceError(ModelError):
    """Trace does not correspond to the model's current parameters."""


class CheckpointError(ModelError):
    """Unreadable or corrupt checkpoint file."""


def _default_loss_weights(mode: str) -> tuple[float, float]:
    return (0.7, 0.3) if mode == "clam" else (1.0, 0.0)


@dataclass
class MilModel:
    mode: str  # "abmil" | "clam"
    d_in: int
    d_proj: int
    d_attn: int
    n_classes: int
    dropout_in: float
    dropout_hidden: float
    bag_loss_weight: float
    inst_loss_weight: float
    clam_k: int
    subtyping: bool
    params: dict[str, np.ndarray]
    grads: dict[str, np.ndarray] = field(default_factory=dict)
    version: int = 0  # bumped on every parameter update

    def param_names(self) -> list[str]:
        names = [
            "proj_w", "proj_b",
            "attn_v_w", "attn_v_b",
            "attn_u_w", "attn_u_b",
            "attn_w",
            "head_w", "head_b",
        ]
        if self.mode == "clam":
            names += ["inst_w", "inst_b"]
        return names

    def validate(self) -> None:
        if self.mode not in ("abmil", "clam"):
            raise ModelError(f"unknown mode {self.mode!r}")
        if min(self.d_in, self.d_proj, self.d_attn, self.n_classes) < 1:
            raise ModelError("all dimensions must be positive")
        shapes = _param_shapes(self)
        for name in self.param_names():
            p = self.params.get(name)
            if p is None or p.shape != shapes[name]:
                raise ModelError(f"parameter {name} missing or misshaped")
            if not np.all(np.isfinite(p)):
                raise NonFiniteError(f"non-finite values in parameter {name}")

    def copy_params(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}

    def set_params(self, params: dict[str, np.ndarray]) -> None:
        for k in self.param_names():
            self.params[k][...] = params[k]
        self.version += 1


def _param_shapes(model: MilModel) -> dict[str, tuple]:
    d, p, a, c = model.d_in, model.d_proj, model.d_attn, model.n_classes
    shapes = {
        "proj_w": (p, d), "proj_b": (p,),
        "attn_v_w": (a, p), "attn_v_b": (a,),
        "attn_u_w": (a, p), "attn_u_b": (a,),
        "attn_w": (a,),
        "head_w": (c, p), "head_b": (c,),
    }
    if model.mode == "clam":
        shapes["inst_w"] = (c, 2, p)
        shapes["inst_b"] = (c, 2)
    return shapes


def init_model(
    d_in: int,
    n_classes: int,
    mode: str = "abmil",
    d_proj: int = 512,
    d_attn: int = 384,
    dropout_in: float = 0.1,
    dropout_hidden: float = 0.25,
    seed: int = 0,
    bag_loss_weight: float | None = None,
    inst_loss_weight: float | None = None,
    clam_k: int = 8,
    subtyping: bool = False,
) -> MilModel:
    """Kaiming-uniform weights (fan-in), zero biases, fixed seed."""
    rng = np.random.Generator(np.random.Philox(key=int(seed) & 0xFFFFFFFFFFFFFFFF))

    def kaiming(shape: tuple, fan_in: int) -> np.ndarray:
        bound = math.sqrt(6.0 / fan_in)
        return rng.uniform(-bound, bound, size=shape)

    w_bag, w_inst = _default_loss_weights(mode)
    model = MilModel(
        mode=mode,
        d_in=d_in,
        d_proj=d_proj,
        d_attn=d_attn,
        n_classes=n_classes,
        dropout_in=dropout_in,
        dropout_hidden=dropout_hidden,
        bag_loss_weight=w_bag if bag_loss_weight is None else bag_loss_weight,
        inst_loss_weight=w_inst if inst_loss_weight is None else inst_loss_weight,
        clam_k=clam_k,
        subtyping=subtyping,
        params={},
    )
    params = {
        "proj_w": kaiming((d_proj, d_in), d_in),
        "proj_b": np.zeros(d_proj),
        "attn_v_w": kaiming((d_attn, d_proj), d_proj),
        "attn_v_b": np.zeros(d_attn),
        "attn_u_w": kaiming((d_attn, d_proj), d_proj),
        "attn_u_b": np.zeros(d_attn),
        "attn_w": kaiming((d_attn,), d_attn),
        "head_w": kaiming((n_classes, d_proj), d_proj),
        "head_b": np.zeros(n_classes),
    }
    if mode == "clam":
        params["inst_w"] = kaiming((n_classes, 2, d_proj), d_proj)
        params["inst_b"] = np.zeros((n_classes, 2))
    model.params = params
    model.grads = {k: np.zeros_like(v) for k, v in params.items()}
    model.validate()
    return model


@dataclass
class ForwardTrace:
    case_id: str
    training: bool
    param_version: int
    x: np.ndarray  # (K, D) float64 inputs
    mask_in: np.ndarray | None  # inverted-dropout scale masks, None in eval
    xd: np.ndarray  # (K, D) after input dropout
    pre_h: np.ndarray  # (K, P) pre-ReLU
    mask_h: np.ndarray | None
    h: np.ndarray  # (K, P) projected instances
    v: np.ndarray  # (K, A) tanh branch
    u: np.ndarray  # (K, A) sigmoid branch
    scores: np.ndarray  # (K,) pre-softmax
    attn: np.ndarray  # (K,) softmax of scores
    pooled: np.ndarray  # (P,)
    logits: np.ndarray  # (C,)
    probs: np.ndarray  # (C,)
    rng_state: dict | None  # generator state snapshot at forward entry

    @property
    def n_instances(self) -> int:
        return int(self.x.shape[0])


@dataclass
class LossReport:
    bag_loss: float
    instance_loss: float
    total: float


def _check_finite(arr: np.ndarray, layer: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite activation in layer {layer!r}")


def _attention_softmax(scores: np.ndarray) -> np.ndarray:
    """Max-subtracted softmax with an order-canonical denominator.

    Summing the exponentials in sorted order makes the weights bit-identical
    under any permutation of the instances.
    """
    e = np.exp(scores - scores.max())
    denom = np.sort(e).sum()
    return e / denom


def _softmax(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max())
    return e / e.sum()


def forward(
    model: MilModel,
    bag: FeatureBag | np.ndarray,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> ForwardTrace:
    """Run the bag through the model and record every intermediate."""
    if isinstance(bag, FeatureBag):
        case_id = bag.case_id
        x = bag.features.astype(np.float64)
    else:
        case_id = ""
        x = np.asarray(bag, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError(f"bag features must be 2-D, got shape {x.shape}")
    if x.shape[1] != model.d_in:
        raise DimensionError(
            f"bag feature dim {x.shape[1]} != model input dim {model.d_in}"
        )
    k = x.shape[0]
    rng_state = None
    mask_in = None
    mask_h = None
    if training and (model.dropout_in > 0 or model.dropout_hidden > 0):
        if rng is None:
            raise ModelError("training-mode forward with dropout needs an rng")
        rng_state = rng.bit_generator.state
    p = model.params
    if training and model.dropout_in > 0:
        keep = 1.0 - model.dropout_in
        mask_in = (rng.random((k, model.d_in)) < keep) / keep
        xd = x * mask_in
    else:
        xd = x
    pre_h = xd @ p["proj_w"].T + p["proj_b"]
    _check_finite(pre_h, "proj")
    h = np.maximum(pre_h, 0.0)
    if training and model.dropout_hidden > 0:
        keep = 1.0 - model.dropout_hidden
        mask_h = (rng.random((k, model.d_proj)) < keep) / keep
        h = h * mask_h
    v = np.tanh(h @ p["attn_v_w"].T + p["attn_v_b"])
    u = expit(h @ p["attn_u_w"].T + p["attn_u_b"])
    _check_finite(v, "attn_V")
    _check_finite(u, "attn_U")
    scores = (v * u) @ p["attn_w"]
    _check_finite(scores, "attn_w")
    attn = _attention_softmax(scores)
    pooled = attn @ h
    logits = p["head_w"] @ pooled + p["head_b"]
    _check_finite(logits, "bag_head")
    probs = _softmax(logits)
    return ForwardTrace(
        case_id=case_id,
        training=training,
        param_version=model.version,
        x=x,
        mask_in=mask_in,
        xd=xd,
        pre_h=pre_h,
        mask_h=mask_h,
        h=h,
        v=v,
        u=u,
        scores=scores,
        attn=attn,
        pooled=pooled,
        logits=logits,
        probs=probs,
        rng_state=rng_state,
    )


def bag_loss(trace: ForwardTrace, label: int) -> float:
    """Cross-entropy of the bag logits against the case label."""
    logits = trace.logits
    if not 0 <= label < logits.shape[0]:
        raise ModelError(f"label {label} out of range for {logits.shape[0]} classes")
    m = logits.max()
    lse = m + np.log(np.exp(logits - m).sum())
    return float(lse - logits[label])


def clam_select(trace: ForwardTrace, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices of the k highest and k lowest attention scores.

    Ties break toward the lower instance index; the two sets never overlap.
    When K < 2k, k is reduced to floor(K/2) with a warning.
    """
    if k < 1:
        raise ModelError("k must be >= 1")
    n = trace.attn.shape[0]
    if n < 2 * k:
        k_eff = n // 2
        if k_eff < 1:
            raise ModelError(f"bag of {n} instance(s) is too small for instance clustering")
        warnings.warn(
            f"bag has {n} instances < 2k={2 * k}; reducing k to {k_eff}",
            stacklevel=2,
        )
        k = k_eff
    a = trace.attn
    # Stable argsorts keep equal scores in index order.
    top = np.argsort(-a, kind="stable")[:k]
    ascending = np.argsort(a, kind="stable")
    top_set = set(top.tolist())
    bottom = np.fromiter(
        (i for i in ascending if i not in top_set), dtype=np.int64, count=-1
    )[:k]
    return top.astype(np.int64), bottom


def _smooth_top1_svm(
    logits: np.ndarray, targets: np.ndarray, tau: float, margin: float
) -> tuple[float, np.ndarray]:
    """Per-instance smooth top-1 SVM loss and its gradient w.r.t. logits.

    loss_i = tau * log sum_j exp((margin*[j != y_i] + o_ij - o_iy) / tau)
    """
    n = logits.shape[0]
    rows = np.arange(n)
    delta = np.full_like(logits, margin)
    delta[rows, targets] = 0.0
    shifted = (delta + logits - logits[rows, targets, None]) / tau
    m = shifted.max(axis=1, keepdims=True)
    e = np.exp(shifted - m)
    z = e.sum(axis=1, keepdims=True)
    losses = tau * (m[:, 0] + np.log(z[:, 0]))
    q = e / z
    grad = q.copy()
    grad[rows, targets] -= 1.0
    return float(losses.mean()), grad / n


def _instance_evaluations(
    model: MilModel, trace: ForwardTrace, label: int, k: int | None
) -> list[tuple[int, np.ndarray, np.ndarray]]:
    """(class head, selected indices, pseudo-labels) per evaluated head."""
    if model.mode != "clam":
        raise ModelError("instance loss requires clam mode")
    if not 0 <= label < model.n_classes:
        raise ModelError(f"label {label} out of range for {model.n_classes} classes")
    k = model.clam_k if k is None else k
    top, bottom = clam_select(trace, k)
    evals = [
        (
            label,
            np.concatenate([top, bottom]),
            np.concatenate([np.ones(len(top), dtype=np.int64), np.zeros(len(bottom), dtype=np.int64)]),
        )
    ]
    if model.subtyping:
        for c in range(model.n_classes):
            if c != label:
                evals.append((c, top.copy(), np.zeros(len(top), dtype=np.int64)))
    return evals


def instance_loss(
    model: MilModel,
    trace: ForwardTrace,
    label: int,
    k: int | None = None,
    tau: float = SVM_TAU,
    margin: float = SVM_MARGIN,
) -> float:
    """Smooth top-1 SVM loss over top/bottom-k instances, averaged per head."""
    evals = _instance_evaluations(model, trace, label, k)
    total = 0.0
    for head, idx, pseudo in evals:
        logits = trace.h[idx] @ model.params["inst_w"][head].T + model.params["inst_b"][head]
        loss, _ = _smooth_top1_svm(logits, pseudo, tau, margin)
        total += loss
    return total / len(evals)


def loss_report(model: MilModel, trace: ForwardTrace, label: int) -> LossReport:
    bl = bag_loss(trace, label)
    il = 0.0
    if model.mode == "clam" and model.inst_loss_weight != 0.0:
        il = instance_loss(model, trace, label)
    return LossReport(
        bag_loss=bl,
        instance_loss=il,
        total=model.bag_loss_weight * bl + model.inst_loss_weight * il,
    )


def backward(model: MilModel, trace: ForwardTrace, label: int) -> dict[str, np.ndarray]:
    """Exact gradients of LossReport.total for every parameter.

    Reuses the dropout masks recorded in the trace; rejects traces produced
    before the last parameter update.
    """
    if not trace.training:
        raise StaleTraceError("backward requires a training-mode trace")
    if trace.param_version != model.version:
        raise StaleTraceError(
            f"trace was produced at parameter version {trace.param_version}, "
            f"model is at {model.version}"
        )
    if not 0 <= label < model.n_classes:
        raise ModelError(f"label {label} out of range for {model.n_classes} classes")
    p = model.params
    g = {k: np.zeros_like(v) for k, v in p.items()}
    c_bag = model.bag_loss_weight

    # Bag head: d total / d logits = c_bag * (softmax - onehot).
    dlogits = trace.probs.copy()
    dlogits[label] -= 1.0
    dlogits *= c_bag
    g["head_w"] += np.outer(dlogits, trace.pooled)
    g["head_b"] += dlogits
    dz = p["head_w"].T @ dlogits

    # Pooling z = a @ h splits into the attention path and the feature path.
    da = trace.h @ dz
    dh = np.outer(trace.attn, dz)

    # Softmax Jacobian: ds = a * (da - <a, da>).
    ds = trace.attn * (da - trace.attn @ da)

    # Gated attention: s = (v * u) @ w.
    gate = trace.v * trace.u
    g["attn_w"] += gate.T @ ds
    dgate = np.outer(ds, p["attn_w"])
    dv = dgate * trace.u
    du = dgate * trace.v
    dpre_v = dv * (1.0 - trace.v**2)
    dpre_u = du * trace.u * (1.0 - trace.u)
    g["attn_v_w"] += dpre_v.T @ trace.h
    g["attn_v_b"] += dpre_v.sum(axis=0)
    g["attn_u_w"] += dpre_u.T @ trace.h
    g["attn_u_b"] += dpre_u.sum(axis=0)
    dh += dpre_v @ p["attn_v_w"] + dpre_u @ p["attn_u_w"]

    # CLAM instance branch; selection indices are treated as constants.
    if model.mode == "clam" and model.inst_loss_weight != 0.0:
        evals = _instance_evaluations(model, trace, label, None)
        scale = model.inst_loss_weight / len(evals)
        for head, idx, pseudo in evals:
            h_sel = trace.h[idx]
            logits = h_sel @ p["inst_w"][head].T + p["inst_b"][head]
            _, dlog = _smooth_top1_svm(logits, pseudo, SVM_TAU, SVM_MARGIN)
            dlog = dlog * scale
            g["inst_w"][head] += dlog.T @ h_sel
            g["inst_b"][head] += dlog.sum(axis=0)
            np.add.at(dh, idx, dlog @ p["inst_w"][head])

    # Hidden dropout, ReLU, projection.
    if trace.mask_h is not None:
        dh = dh * trace.mask_h
    dpre_h = dh * (trace.pre_h > 0)
    g["proj_w"] += dpre_h.T @ trace.xd
    g["proj_b"] += dpre_h.sum(axis=0)

    model.grads = g
    return g


def predict_probs(model: MilModel, bag: FeatureBag | np.ndarray) -> np.ndarray:
    """Evaluation-mode class probabilities for one bag."""
    return forward(model, bag, training=False).probs


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def _model_meta(model: MilModel) -> dict:
    return {
        "mode": model.mode,
        "d_in": model.d_in,
        "d_proj": model.d_proj,
        "d_attn": model.d_attn,
        "n_classes": model.n_classes,
        "dropout_in": model.dropout_in,
        "dropout_hidden": model.dropout_hidden,
        "bag_loss_weight": model.bag_loss_weight,
        "inst_loss_weight": model.inst_loss_weight,
        "clam_k": model.clam_k,
        "subtyping": model.subtyping,
    }


def save_model(model: MilModel, path: str | Path, config_echo: dict | None = None) -> None:
    """Versioned binary checkpoint: JSON meta header + f32 tensors, little-endian."""
    model.validate()
    meta = _model_meta(model)
    if config_echo:
        meta["config_echo"] = config_echo
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    names = model.param_names()
    chunks = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(meta_bytes)), meta_bytes]
    chunks.append(struct.pack("<I", len(names)))
    for name in names:
        tensor = np.ascontiguousarray(model.params[name], dtype="<f4")
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<B", tensor.ndim))
        chunks.append(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
        chunks.append(tensor.tobytes())
    blob = b"".join(chunks)
    path = Path(path)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent or Path("."), suffix=".ckpt.tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp_name, path)
    except BaseException:
        try:
            os.unlink(tmp_name)
        except OSError:
            pass
        raise


def load_model(path: str | Path) -> tuple[MilModel, dict]:
    """Load a checkpoint; returns (model, meta). Parameters come back as f32."""
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != CKPT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {data[:4]!r}")
    version, meta_len = struct.unpack_from("<II", data, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 12
    try:
        meta = json.loads(data[off : off + meta_len].decode("utf-8"))
        off += meta_len
        (n_tensors,) = struct.unpack_from("<I", data, off)
        off += 4
        params = {}
        for _ in range(n_tensors):
            (name_len,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off : off + name_len].decode("utf-8")
            off += name_len
            (ndim,) = struct.unpack_from("<B", data, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", data, off)
            off += 4 * ndim
            count = int(np.prod(shape)) if ndim else 1
            tensor = np.frombuffer(data, dtype="<f4", count=count, offset=off)
            off += count * 4
            params[name] = tensor.reshape(shape).astype(np.float64)
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, ValueError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
    if off != len(data):
        raise CheckpointError(
            f"trailing data in checkpoint: expected {off} bytes, got {len(data)}"
        )
    model = MilModel(
        mode=meta["mode"],
        d_in=meta["d_in"],
        d_proj=meta["d_proj"],
        d_attn=meta["d_attn"],
        n_classes=meta["n_classes"],
        dropout_in=meta["dropout_in"],
        dropout_hidden=meta["dropout_hidden"],
        bag_loss_weight=meta["bag_loss_weight"],
        inst_loss_weight=meta["inst_loss_weight"],
        clam_k=meta["clam_k"],
        subtyping=meta["subtyping"],
        params=params,
    )
    model.grads = {k: np.zeros_like(v) for k, v in params.items()}
    model.validate()
    return model, meta
