"""Frame-pair CNN: preprocessing, training, prediction and metrics.

The two frames enter on separate input channels. Output node 0 is the
probability of a good pair, node 1 of a bad pair; dataset label 1 means good.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import FormatError, PreconditionError
from .nn import AdamState, BatchNorm, Conv, Dense, GlobalAvgPool, Model, ReLU, adam_step
from .nn.functional import softmax, softmax_cross_entropy
from .rf_core import PairRecord, RfFrame, block_mean, load_frame, standardize

logger = logging.getLogger(__name__)

AXIAL_DOWNSAMPLE = 2


@dataclass(frozen=True)
class ArchitectureSpec:
    input_dims: tuple[int, int, int] = (2, 256, 64)
    stages: tuple[tuple[int, int, int], ...] = ((8, 5, 2), (16, 3, 2), (32, 3, 2), (32, 3, 2))
    order: str = "conv_relu_bn"

    def __post_init__(self):
        if self.input_dims[0] != 2:
            raise ValueError("the network takes exactly two input channels")
        if self.order not in ("conv_relu_bn", "conv_bn_relu"):
            raise ValueError(f"unknown layer order {self.order!r}")
        if not self.stages:
            raise ValueError("at least one conv stage is required")

    def to_dict(self) -> dict:
        return dict(input_dims=list(self.input_dims),
                    stages=[list(s) for s in self.stages], order=self.order)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureSpec":
        return cls(input_dims=tuple(d["input_dims"]),
                   stages=tuple(tuple(s) for s in d["stages"]),
                   order=d.get("order", "conv_relu_bn"))


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 16
    max_epochs: int = 30
    val_fraction: float = 0.2
    early_stop_patience: int = 5
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2 for batch norm")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be positive")


@dataclass(frozen=True)
class Prediction:
    p_good: float
    p_bad: float
    decision: int


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    confusion: tuple[int, int, int, int]
    f1_undefined: bool = False


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = math.inf
    best_val_accuracy: float = 0.0
    n_train: int = 0
    n_val: int = 0

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_loss", "val_accuracy"])
            for e in self.epochs:
                w.writerow([e["epoch"], f"{e['train_loss']:.6f}", f"{e['val_loss']:.6f}",
                            f"{e['val_accuracy']:.6f}"])


# -- model assembly ------------------------------------------------------------

def build_model(arch: ArchitectureSpec | None = None, seed: int = 0,
                dtype=np.float32) -> Model:
    """Conv stages (ReLU and batch norm each), global average pool, 2-way dense head.

    Weights are He-initialized from ``seed``.
    """
    arch = arch or ArchitectureSpec()
    rng = np.random.default_rng(seed)
    layers = []
    in_ch = arch.input_dims[0]
    for out_ch, k, stride in arch.stages:
        fan_in = in_ch * k * k
        w = (rng.standard_normal((out_ch, in_ch, k, k)) * math.sqrt(2.0 / fan_in)).astype(dtype)
        conv = Conv(w, np.zeros(out_ch, dtype), stride=stride, padding=k // 2)
        bn = BatchNorm(out_ch, dtype=dtype)
        if arch.order == "conv_relu_bn":
            layers += [conv, ReLU(), bn]
        else:
            layers += [conv, bn, ReLU()]
        in_ch = out_ch
    w = (rng.standard_normal((2, in_ch)) * math.sqrt(2.0 / in_ch)).astype(dtype)
    layers += [GlobalAvgPool(), Dense(w, np.zeros(2, dtype))]
    return Model(layers, {"architecture": arch.to_dict()})


def model_arch(model: Model) -> ArchitectureSpec:
    try:
        return ArchitectureSpec.from_dict(model.arch["architecture"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"model lacks a usable architecture descriptor: {exc}") from exc


# -- preprocessing -------------------------------------------------------------

def _area_weights(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic matrix averaging input bins onto ``n_out`` equal output bins."""
    edges = np.arange(n_out + 1) * (n_in / n_out)
    lo = np.arange(n_in)
    w = np.clip(np.minimum(edges[1:, None], lo[None, :] + 1)
                - np.maximum(edges[:-1, None], lo[None, :]), 0.0, None)
    return w / w.sum(axis=1, keepdims=True)


def area_resize(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = x.shape
    if h < out_h or w < out_w:
        raise ValueError(f"frame {h}x{w} smaller than model input {out_h}x{out_w}")
    if (h, w) == (out_h, out_w):
        return x
    if h % out_h == 0 and w % out_w == 0:
        return block_mean(block_mean(x, h // out_h, axis=0), w // out_w, axis=1)
    return _area_weights(h, out_h) @ x @ _area_weights(w, out_w).T


def preprocess_frame(frame: RfFrame, out_h: int, out_w: int) -> np.ndarray:
    x = block_mean(np.asarray(frame.samples, dtype=np.float64), AXIAL_DOWNSAMPLE, axis=0)
    return area_resize(standardize(x), out_h, out_w).astype(np.float32)


def preprocess_pair(a: RfFrame, b: RfFrame, arch: ArchitectureSpec | None = None) -> np.ndarray:
    """``(1, 2, model_h, model_w)`` float32 tensor; frame ``a`` on channel 0."""
    arch = arch or ArchitectureSpec()
    if a.shape != b.shape:
        raise ValueError(f"frame dimensions differ: {a.shape} vs {b.shape}")
    _, h, w = arch.input_dims
    return np.stack([preprocess_frame(a, h, w), preprocess_frame(b, h, w)])[None]


def load_pairs(records: Sequence[PairRecord], frame_dir, arch: ArchitectureSpec | None = None):
    """Preprocess every record's frames into ``(X, y)``."""
    arch = arch or ArchitectureSpec()
    base = Path(frame_dir)
    X = np.empty((len(records),) + tuple(arch.input_dims), np.float32)
    y = np.empty(len(records), np.int64)
    for i, r in enumerate(records):
        a = load_frame(base / r.frame_a_ref)
        b = load_frame(base / r.frame_b_ref)
        X[i] = preprocess_pair(a, b, arch)[0]
        y[i] = r.label
    return X, y


# -- training ------------------------------------------------------------------

def _targets(labels: np.ndarray) -> np.ndarray:
    return 1 - np.asarray(labels, dtype=np.int64)


def _forward_probs(model: Model, X: np.ndarray, batch: int = 64) -> np.ndarray:
    out = [softmax(model.forward(X[i:i + batch], train=False).astype(np.float64))
           for i in range(0, len(X), batch)]
    return np.concatenate(out) if out else np.empty((0, 2))


def split_indices(n: int, val_fraction: float, seed: int):
    # a trailing 0 in the entropy list would reproduce default_rng(seed), the
    # same stream synth_dataset uses to pick good pairs
    perm = np.random.default_rng([seed, 2]).permutation(n)
    n_train = int(round(n * (1 - val_fraction)))
    return perm[:n_train], perm[n_train:]


def train_arrays(X: np.ndarray, y: np.ndarray, arch: ArchitectureSpec | None = None,
                 cfg: TrainConfig | None = None, progress=None):
    """Train on preprocessed tensors; returns ``(model, TrainReport)``.

    The returned model holds the parameters of the epoch with the lowest
    validation loss.
    """
    arch = arch or ArchitectureSpec()
    cfg = cfg or TrainConfig()
    y = np.asarray(y, dtype=np.int64)
    if len(y) < 50:
        raise PreconditionError(f"need at least 50 labeled pairs, got {len(y)}")
    if len(np.unique(y)) < 2:
        raise PreconditionError("single-class dataset")
    tr, va = split_indices(len(y), cfg.val_fraction, cfg.seed)
    model = build_model(arch, cfg.seed)
    opt = AdamState(lr=cfg.lr)
    report = TrainReport(n_train=len(tr), n_val=len(va))
    best = model.snapshot()
    stale = 0
    Xv, tv = X[va], _targets(y[va])

    for epoch in range(cfg.max_epochs):
        order = tr[np.random.default_rng([cfg.seed, 1, epoch]).permutation(len(tr))]
        losses = []
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            if len(idx) < 2:
                continue
            logits = model.forward(X[idx], train=True)
            loss, _, grad = softmax_cross_entropy(logits, _targets(y[idx]))
            model.backward(grad.astype(logits.dtype))
            adam_step(model.params(), model.grads(), opt)
            losses.append(loss * len(idx))
        train_loss = float(np.sum(losses) / len(order))

        probs = _forward_probs(model, Xv)
        val_loss = float(-np.mean(np.log(np.clip(probs[np.arange(len(tv)), tv], 1e-12, None))))
        val_acc = float(np.mean(np.argmax(probs, axis=1) == tv))
        report.epochs.append(dict(epoch=epoch, train_loss=train_loss, val_loss=val_loss,
                                  val_accuracy=val_acc))
        if progress is not None:
            progress(report.epochs[-1])
        if val_loss < report.best_val_loss:
            report.best_val_loss, report.best_val_accuracy = val_loss, val_acc
            report.best_epoch = epoch
            best = model.snapshot()
            stale = 0
        else:
            stale += 1
            if stale >= cfg.early_stop_patience:
                break
    model.restore(best)
    return model, report


def train(records: Sequence[PairRecord], frame_dir, arch: ArchitectureSpec | None = None,
          cfg: TrainConfig | None = None, progress=None):
    records = list(records)
    labels = {r.label for r in records}
    if len(labels) < 2:
        raise PreconditionError("single-class dataset")
    if len(records) < 50:
        raise PreconditionError(f"need at least 50 labeled pairs, got {len(records)}")
    X, y = load_pairs(records, frame_dir, arch)
    return train_arrays(X, y, arch, cfg, progress)


# -- inference and metrics -----------------------------------------------------

def _to_prediction(p: np.ndarray) -> Prediction:
    p_good, p_bad = float(p[0]), float(p[1])
    return Prediction(p_good=p_good, p_bad=p_bad, decision=int(p_good > 0.5))


def predict_tensor(model: Model, x: np.ndarray) -> list[Prediction]:
    return [_to_prediction(p) for p in _forward_probs(model, x)]


def predict(model: Model, a: RfFrame, b: RfFrame) -> Prediction:
    return predict_tensor(model, preprocess_pair(a, b, model_arch(model)))[0]


def compute_metrics(predicted: Iterable[int], labels: Iterable[int]) -> Metrics:
    """Binary metrics with label 1 (suitable) as the positive class."""
    p = np.asarray(list(predicted), dtype=np.int64)
    t = np.asarray(list(labels), dtype=np.int64)
    if len(t) == 0:
        raise ValueError("cannot evaluate an empty set")
    if p.shape != t.shape:
        raise ValueError("predictions and labels differ in length")
    tp = int(np.sum((p == 1) & (t == 1)))
    fp = int(np.sum((p == 1) & (t == 0)))
    fn = int(np.sum((p == 0) & (t == 1)))
    tn = int(np.sum((p == 0) & (t == 0)))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    undefined = precision + recall == 0
    f1 = 0.0 if undefined else 2 * precision * recall / (precision + recall)
    return Metrics(accuracy=(tp + tn) / len(t), precision=precision, recall=recall, f1=f1,
                   confusion=(tp, fp, fn, tn), f1_undefined=undefined)


def evaluate_arrays(model: Model, X: np.ndarray, y: np.ndarray) -> Metrics:
    preds = [q.decision for q in predict_tensor(model, X)]
    return compute_metrics(preds, y)


def evaluate(model: Model, pairs: Iterable[tuple[RfFrame, RfFrame, int]]) -> Metrics:
    preds, labels = [], []
    for a, b, label in pairs:
        preds.append(predict(model, a, b).decision)
        labels.append(label)
    return compute_metrics(preds, labels)


def metrics_dict(m: Metrics) -> dict:
    return asdict(m)
