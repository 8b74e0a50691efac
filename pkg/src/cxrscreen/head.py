"""Two-class linear classification head trained on frozen features.

Softmax over logits W @ x + b, cross-entropy against one-hot targets, exact
analytic gradients, and a self-contained bias-corrected ADAM optimizer. All
arithmetic is float64 regardless of the float32 feature storage; class order
is fixed (index 0 = NON_COVID, index 1 = COVID) so a saved head is
unambiguous.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .backbone import BACKBONE_CODES, CODE_TO_BACKBONE, FeatureMatrix
from .errors import InputError, NumericError, ValidationError
from .evaluate import ScoreEntry, ScoreSet
from .manifest import ImageRecord, Label
from .seeds import make_rng

NON_COVID_INDEX = 0
COVID_INDEX = 1

HEAD_MAGIC = b"HEAD1"


def softmax(logits: np.ndarray) -> np.ndarray:
    """Numerically stable softmax along the last axis (max subtraction)."""
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise NumericError("non-finite logits")
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def cross_entropy(p: np.ndarray, q: np.ndarray) -> float:
    """-sum(p_i * log q_i) for a one-hot p; equals -log q at the true class."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    true_index = int(np.argmax(p))
    qt = float(q[true_index])
    if qt <= 0.0:
        raise NumericError(f"zero predicted probability for class {true_index}")
    return -float(np.log(qt))


def grad_head(
    w: np.ndarray, b: np.ndarray, feature: np.ndarray, p: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Analytic cross-entropy gradient for one sample.

    Returns (dW, db) = ((q - p) outer feature, q - p) with
    q = softmax(W @ feature + b).
    """
    x = np.asarray(feature, dtype=np.float64)
    q = softmax(np.asarray(w, dtype=np.float64) @ x + np.asarray(b, dtype=np.float64))
    dz = q - np.asarray(p, dtype=np.float64)
    return np.outer(dz, x), dz


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 20
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    shuffle_seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValidationError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ValidationError(f"learning_rate must be > 0, got {self.learning_rate}")

    def echo(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "epsilon": self.epsilon,
            "shuffle_seed": self.shuffle_seed,
        }

    def echo_text(self) -> str:
        return "".join(f"{k}={v!r}\n" for k, v in self.echo().items())


@dataclass
class AdamState:
    """First/second moment accumulators plus the shared step counter."""

    m: tuple[np.ndarray, ...]
    v: tuple[np.ndarray, ...]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: tuple[np.ndarray, ...]) -> "AdamState":
        return cls(
            m=tuple(np.zeros_like(p, dtype=np.float64) for p in params),
            v=tuple(np.zeros_like(p, dtype=np.float64) for p in params),
            t=0,
        )


def adam_step(
    params: tuple[np.ndarray, ...],
    grads: tuple[np.ndarray, ...],
    state: AdamState,
    cfg: TrainConfig,
) -> tuple[tuple[np.ndarray, ...], AdamState]:
    """One bias-corrected ADAM update.

    m <- b1*m + (1-b1)*g,  v <- b2*v + (1-b2)*g^2,
    param <- param - lr * m_hat / (sqrt(v_hat) + eps).
    Zero gradients from a fresh state leave parameters exactly unchanged.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValidationError("parameter, gradient, and state shapes must line up")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient")
    t = state.t + 1
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = np.asarray(g, dtype=np.float64)
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g
        m_hat = m / (1.0 - cfg.beta1**t)
        v_hat = v / (1.0 - cfg.beta2**t)
        new_params.append(p - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.epsilon))
        new_m.append(m)
        new_v.append(v)
    return tuple(new_params), AdamState(m=tuple(new_m), v=tuple(new_v), t=t)


@dataclass
class LinearHead:
    """Trained weights plus the provenance needed to score new features."""

    weights: np.ndarray  # (2, D) float64
    bias: np.ndarray  # (2,) float64
    backbone: str
    config_echo: str = ""

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.weights.shape[0] != 2:
            raise ValidationError(f"weights must be (2, D), got {self.weights.shape}")
        if self.bias.shape != (2,):
            raise ValidationError(f"bias must be (2,), got {self.bias.shape}")
        if self.backbone not in BACKBONE_CODES:
            raise ValidationError(f"unknown backbone {self.backbone!r}")

    @property
    def feature_dim(self) -> int:
        return self.weights.shape[1]


@dataclass(frozen=True)
class TrainHistory:
    epoch_mean_loss: tuple[float, ...]


def _as_label_indices(labels: Sequence[Label] | Sequence[int] | np.ndarray) -> np.ndarray:
    idx = np.array(
        [
            COVID_INDEX
            if (lab is Label.COVID or lab == COVID_INDEX)
            else NON_COVID_INDEX
            for lab in labels
        ],
        dtype=np.int64,
    )
    for lab in labels:
        if not (isinstance(lab, Label) or lab in (0, 1)):
            raise ValidationError(f"label must be a Label or 0/1 index, got {lab!r}")
    return idx


def _batch_loss_and_grads(
    w: np.ndarray, b: np.ndarray, x: np.ndarray, labels: np.ndarray
) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean cross-entropy and mean gradients over one (n, D) batch."""
    q = softmax(x @ w.T + b)
    qt = q[np.arange(len(labels)), labels]
    if np.any(qt <= 0.0):
        raise NumericError("zero predicted probability in batch")
    loss = float(np.mean(-np.log(qt)))
    dz = q.copy()
    dz[np.arange(len(labels)), labels] -= 1.0
    n = len(labels)
    return loss, dz.T @ x / n, dz.mean(axis=0)


def train_head(
    features: FeatureMatrix,
    labels: Sequence[Label] | Sequence[int] | np.ndarray,
    cfg: TrainConfig = TrainConfig(),
) -> tuple[LinearHead, TrainHistory]:
    """Mini-batch ADAM training from zero-initialized weights.

    labels align with feature rows. Rows are put in canonical row_id order
    before each epoch's seeded permutation, so the result does not depend on
    how rows were ordered on disk. The last partial batch is kept.
    """
    n = len(features.row_ids)
    if n == 0:
        raise ValidationError("cannot train on an empty feature matrix")
    label_idx = _as_label_indices(labels)
    if len(label_idx) != n:
        raise ValidationError(f"{len(label_idx)} labels for {n} feature rows")
    if len(set(label_idx.tolist())) < 2:
        raise ValidationError("training features must contain both classes")

    order = np.argsort(np.array(features.row_ids))
    x = features.matrix.astype(np.float64)[order]
    label_idx = label_idx[order]

    dim = x.shape[1]
    w = np.zeros((2, dim), dtype=np.float64)
    b = np.zeros(2, dtype=np.float64)
    state = AdamState.zeros_like((w, b))
    history: list[float] = []

    for epoch in range(cfg.epochs):
        perm = make_rng(cfg.shuffle_seed, epoch).permutation(n)
        epoch_losses = []
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            loss, dw, db = _batch_loss_and_grads(w, b, x[idx], label_idx[idx])
            if not np.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch}")
            (w, b), state = adam_step((w, b), (dw, db), state, cfg)
            epoch_losses.append(loss)
        history.append(float(np.mean(epoch_losses)))

    head = LinearHead(
        weights=w, bias=b, backbone=features.backbone, config_echo=cfg.echo_text()
    )
    return head, TrainHistory(epoch_mean_loss=tuple(history))


def predict_scores(
    head: LinearHead, features: FeatureMatrix, manifest_rows: Sequence[ImageRecord]
) -> ScoreSet:
    """Positive-class probability per feature row, tagged from manifest rows.

    Every feature row must have a matching manifest record (row_id ==
    image_path) supplying its label and subgroup.
    """
    if head.backbone != features.backbone:
        raise ValidationError(
            f"head was trained on {head.backbone} features, got {features.backbone}"
        )
    if features.matrix.shape[1] != head.feature_dim:
        raise ValidationError(
            f"feature dim {features.matrix.shape[1]} != head dim {head.feature_dim}"
        )
    by_path = {r.image_path: r for r in manifest_rows}
    missing = [rid for rid in features.row_ids if rid not in by_path]
    if missing:
        raise ValidationError(
            f"{len(missing)} feature rows have no manifest record, first: {missing[0]}"
        )
    x = features.matrix.astype(np.float64)
    q = softmax(x @ head.weights.T + head.bias)
    entries = tuple(
        ScoreEntry(
            score=float(q[i, COVID_INDEX]),
            label=by_path[rid].label,
            subgroup=by_path[rid].subgroup,
            image_path=rid,
        )
        for i, rid in enumerate(features.row_ids)
    )
    return ScoreSet(entries=entries)


# ---------------------------------------------------------------------------
# Head file format: magic, u32 D, u8 backbone code, W then b as little-endian
# float64, then the TrainConfig echo as key=value lines to end of file.
# ---------------------------------------------------------------------------

def save_head(head: LinearHead, path: str | Path) -> None:
    buf = io.BytesIO()
    buf.write(HEAD_MAGIC)
    buf.write(struct.pack("<I", head.feature_dim))
    buf.write(struct.pack("<B", BACKBONE_CODES[head.backbone]))
    buf.write(head.weights.astype("<f8").tobytes(order="C"))
    buf.write(head.bias.astype("<f8").tobytes())
    buf.write(head.config_echo.encode("utf-8"))
    Path(path).write_bytes(buf.getvalue())


def load_head(path: str | Path) -> LinearHead:
    p = Path(path)
    if not p.is_file():
        raise InputError(f"head file not found: {p}")
    raw = p.read_bytes()
    if raw[:5] != HEAD_MAGIC:
        raise InputError(f"not a head file: {p}")
    off = 5
    (dim,) = struct.unpack_from("<I", raw, off)
    off += 4
    (code,) = struct.unpack_from("<B", raw, off)
    off += 1
    if code not in CODE_TO_BACKBONE:
        raise InputError(f"unknown backbone code {code} in {p}")
    w_bytes = 2 * dim * 8
    if off + w_bytes + 16 > len(raw):
        raise InputError(f"truncated head file: {p}")
    weights = np.frombuffer(raw[off : off + w_bytes], dtype="<f8").reshape(2, dim).copy()
    off += w_bytes
    bias = np.frombuffer(raw[off : off + 16], dtype="<f8").copy()
    off += 16
    echo = raw[off:].decode("utf-8")
    return LinearHead(weights=weights, bias=bias, backbone=CODE_TO_BACKBONE[code], config_echo=echo)
