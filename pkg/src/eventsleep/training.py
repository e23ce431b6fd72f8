"""Losses, AdamW, the early-stopped training loop, subject-wise CV and metrics."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from . import network as net
from .corpus import LabeledSequence
from .exceptions import FormatError, NumericError, ParameterError
from .network import ModelConfig, ModelParams
from .s2e import context_windows, window_validity
from .signal_io import STAGE_NAMES

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 64
    max_epochs: int = 50
    patience: int = 8
    seed: int = 0
    monitor: str = "accuracy"  # or "loss"
    class_weights: tuple[float, ...] | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    dtype: str = "float32"
    time_budget: float | None = None  # seconds; no epoch is started that would likely overrun it

    def __post_init__(self):
        for n in ("lr", "batch_size", "max_epochs", "patience"):
            if not getattr(self, n) > 0:
                raise ParameterError(f"{n} must be positive")
        if self.weight_decay < 0:
            raise ParameterError("weight_decay must be >= 0")
        if self.patience > self.max_epochs:
            raise ParameterError("patience must not exceed max_epochs")
        if self.time_budget is not None and not self.time_budget > 0:
            raise ParameterError("time_budget must be positive")
        if self.monitor not in ("accuracy", "loss"):
            raise ParameterError(f"unknown monitor {self.monitor!r}")
        if self.class_weights is not None and len(self.class_weights) != net.N_CLASSES:
            raise ParameterError("class_weights needs one entry per stage")


# --------------------------------------------------------------------------
# minibatches


@dataclass(frozen=True, eq=False)
class Minibatch:
    """Epoch pool plus windows indexing into it.

    ``positions`` is (B, 2L+1) with -1 for slots outside the recording;
    ``valid`` carries the S2E mask of each slot.
    """

    rasters: np.ndarray
    positions: np.ndarray
    valid: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return int(self.labels.size)


def build_minibatch(data: Sequence[LabeledSequence], targets, L: int) -> Minibatch:
    """``targets`` is a list of (sequence index, epoch position) pairs."""
    off = np.arange(-L, L + 1)
    pool: dict[tuple[int, int], int] = {}
    rasters = []
    B = len(targets)
    positions = np.full((B, 2 * L + 1), -1, dtype=np.int64)
    valid = np.zeros((B, 2 * L + 1), dtype=np.uint8)
    labels = np.empty(B, dtype=np.int64)
    for b, (s, e) in enumerate(targets):
        seq = data[s]
        n = len(seq.batch)
        labels[b] = seq.labels[e]
        for j, o in enumerate(off):
            q = e + o
            if 0 <= q < n:
                key = (s, q)
                if key not in pool:
                    pool[key] = len(rasters)
                    rasters.append(seq.batch.rasters[q])
                positions[b, j] = pool[key]
                valid[b, j] = seq.batch.mask[q]
    return Minibatch(np.stack(rasters), positions, valid, labels)


def iterate_minibatches(data, batch_size: int, L: int, rng: np.random.Generator):
    """Subjects in shuffled order, targets shuffled within each subject.

    Keeping a subject's windows together lets overlapping windows share one
    encoding of each epoch.
    """
    targets = []
    for s in rng.permutation(len(data)):
        n = len(data[s].batch)
        targets.extend((int(s), int(e)) for e in rng.permutation(n))
    for i in range(0, len(targets), batch_size):
        yield build_minibatch(data, targets[i : i + batch_size], L)


# --------------------------------------------------------------------------
# loss and gradients


class LossGrad(NamedTuple):
    loss: float
    grads: dict
    bn_stats: dict
    logits: np.ndarray


def cross_entropy(logits, labels, weights=None):
    """Mean (optionally class-weighted) CE and its gradient w.r.t. logits."""
    B = logits.shape[0]
    probs = net.softmax(logits, axis=1)
    logp = logits - logits.max(axis=1, keepdims=True)
    logp = logp - np.log(np.exp(logp).sum(axis=1, keepdims=True))
    w = np.ones(B) if weights is None else np.asarray(weights, dtype=np.float64)[labels]
    norm = w.sum()
    loss = -float(np.sum(w * logp[np.arange(B), labels]) / norm)
    d = probs.copy()
    d[np.arange(B), labels] -= 1.0
    d *= (w / norm)[:, None]
    return loss, d.astype(logits.dtype)


def loss_and_grad(params: ModelParams, cfg: ModelConfig, mb: Minibatch, class_weights=None) -> LossGrad:
    logits, cache, stats = net.forward_pool(params, cfg, mb.rasters, mb.positions, mb.valid, "train")
    loss, dlogits = cross_entropy(logits, mb.labels, class_weights)
    if not math.isfinite(loss):
        raise NumericError("non-finite loss")
    grads = net.backward(params, cfg, cache, dlogits)
    for n, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in {n}")
    return LossGrad(loss, grads, stats, logits)


# --------------------------------------------------------------------------
# AdamW


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "AdamState":
        names = params.learnable()
        return cls({n: np.zeros_like(params[n]) for n in names}, {n: np.zeros_like(params[n]) for n in names})


def adamw_step(params: ModelParams, grads: dict, state: AdamState, cfg: TrainConfig) -> None:
    """Decoupled weight decay Adam update, in place on ``params`` and ``state``."""
    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for n, g in grads.items():
        p = params[n]
        if g.shape != p.shape:
            raise RuntimeError(f"gradient shape {g.shape} != parameter shape {p.shape} for {n}")
        m, v = state.m[n], state.v[n]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        if cfg.weight_decay:
            p *= 1.0 - cfg.lr * cfg.weight_decay
        p -= cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)


# --------------------------------------------------------------------------
# inference over whole recordings


def predict_sequence(params: ModelParams, cfg: ModelConfig, batch, chunk: int = 64) -> np.ndarray:
    """Eval-mode class probabilities (n_epochs, 5), one window per epoch."""
    n = len(batch)
    if n == 0:
        return np.zeros((0, net.N_CLASSES))
    tokens = net.encode_epochs(batch.rasters, params, cfg, "eval", chunk=chunk)
    pos = context_windows(n, cfg.window_radius)
    valid = window_validity(batch.mask, pos)
    res = net.context_forward(net.gather_windows(tokens, pos), valid, params, cfg)
    return net.softmax(res.logits.astype(np.float64), axis=1)


def predict_corpus(params, cfg, data: Sequence[LabeledSequence]):
    preds, labels = [], []
    for seq in data:
        p = predict_sequence(params, cfg, seq.batch)
        preds.append(p.argmax(axis=1))
        labels.append(seq.labels)
    if not preds:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    return np.concatenate(preds), np.concatenate(labels)


# --------------------------------------------------------------------------
# training loop


class EpochRecord(NamedTuple):
    epoch: int
    train_loss: float
    val_accuracy: float
    best_so_far: float


@dataclass
class TrainResult:
    params: ModelParams
    history: list[EpochRecord]
    best_epoch: int


def train(
    train_data: Sequence[LabeledSequence],
    val_data: Sequence[LabeledSequence],
    cfg: ModelConfig,
    tcfg: TrainConfig,
    init: ModelParams | None = None,
    val_metric=None,
) -> TrainResult:
    """Minibatch AdamW with early stopping on validation accuracy.

    ``val_metric`` overrides the monitored score (higher is better); it
    receives the parameters and returns a float. Used by tests.
    """
    if not train_data or not val_data:
        raise ParameterError("train and validation splits must be non-empty")
    dtype = np.dtype(tcfg.dtype)
    params = (init or net.init_params(cfg, tcfg.seed)).astype(dtype)
    state = AdamState.zeros_like(params)
    rng = np.random.default_rng(tcfg.seed)
    best, best_params, best_epoch, stale = -math.inf, params.copy(), 0, 0
    history: list[EpochRecord] = []
    t0 = time.perf_counter()
    for epoch in range(1, tcfg.max_epochs + 1):
        losses, weights = [], []
        for mb in iterate_minibatches(train_data, tcfg.batch_size, cfg.window_radius, rng):
            lg = loss_and_grad(params, cfg, mb, tcfg.class_weights)
            adamw_step(params, lg.grads, state, tcfg)
            net.apply_bn_stats(params, lg.bn_stats)
            losses.append(lg.loss)
            weights.append(len(mb))
        train_loss = float(np.average(losses, weights=weights))
        if val_metric is not None:
            score = float(val_metric(params))
            val_acc = score
        else:
            pred, y = predict_corpus(params, cfg, val_data)
            val_acc = float(np.mean(pred == y))
            score = val_acc
            if tcfg.monitor == "loss":
                score = -validation_loss(params, cfg, val_data)
        if score > best:
            best, best_params, best_epoch, stale = score, params.copy(), epoch, 0
        else:
            stale += 1
        history.append(EpochRecord(epoch, train_loss, val_acc, max(best, val_acc) if tcfg.monitor == "accuracy" else best))
        log.info("epoch %d loss %.4f val_acc %.4f", epoch, train_loss, val_acc)
        if stale >= tcfg.patience:
            break
        elapsed = time.perf_counter() - t0
        if tcfg.time_budget is not None and elapsed * (epoch + 1) / epoch > tcfg.time_budget:
            log.info("time budget reached after epoch %d", epoch)
            break
    return TrainResult(best_params, history, best_epoch)


def validation_loss(params, cfg, data) -> float:
    tot, n = 0.0, 0
    for seq in data:
        p = predict_sequence(params, cfg, seq.batch)
        tot -= float(np.sum(np.log(np.maximum(p[np.arange(len(p)), seq.labels], 1e-300))))
        n += len(p)
    return tot / max(n, 1)


HISTORY_HEADER = ["epoch", "train_loss", "val_accuracy", "best_so_far"]


def write_history(history: Sequence[EpochRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_HEADER)
        for r in history:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.val_accuracy), repr(r.best_so_far)])


# --------------------------------------------------------------------------
# cross-validation


@dataclass(frozen=True)
class Fold:
    test: tuple[str, ...]
    val: tuple[str, ...]
    train: tuple[str, ...]


@dataclass(frozen=True)
class CvPlan:
    n_folds: int
    val_fraction: float
    seed: int
    folds: tuple[Fold, ...]

    @property
    def subject_to_fold(self) -> dict[str, int]:
        return {s: i for i, f in enumerate(self.folds) for s in f.test}


def cv_split(subject_ids: Sequence[str], n_folds: int = 5, val_fraction: float = 0.15, seed: int = 0) -> CvPlan:
    """Seeded shuffle, round-robin test folds, ``ceil(val_fraction * n_train)`` validation subjects."""
    subjects = sorted(set(subject_ids))
    if len(subjects) < n_folds:
        raise ParameterError(f"{len(subjects)} subjects cannot fill {n_folds} folds")
    if not 0 <= val_fraction < 1:
        raise ParameterError("val_fraction must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    order = [subjects[i] for i in rng.permutation(len(subjects))]
    folds = []
    for f in range(n_folds):
        test = order[f::n_folds]
        rest = [s for s in order if s not in set(test)]
        n_val = math.ceil(val_fraction * len(rest))
        pick = set(rng.choice(len(rest), size=n_val, replace=False).tolist()) if n_val else set()
        val = [s for i, s in enumerate(rest) if i in pick]
        train_ = [s for i, s in enumerate(rest) if i not in pick]
        folds.append(Fold(tuple(sorted(test)), tuple(sorted(val)), tuple(sorted(train_))))
    return CvPlan(n_folds, val_fraction, seed, tuple(folds))


def write_plan(plan: CvPlan, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "fold", "role"])
        for i, f in enumerate(plan.folds):
            for role in ("test", "val", "train"):
                for s in getattr(f, role):
                    w.writerow([s, i, role])


# --------------------------------------------------------------------------
# metrics


@dataclass(frozen=True)
class EvalReport:
    accuracy: float
    macro_f1: float
    kappa: float
    confusion: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray

    @property
    def per_class(self) -> dict[str, tuple[float, float, float]]:
        return {
            STAGE_NAMES[i]: (float(self.precision[i]), float(self.recall[i]), float(self.f1[i]))
            for i in range(len(STAGE_NAMES))
        }


def _safe_div(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.divide(a, b, out=np.zeros_like(a), where=b != 0)


def evaluate(predictions, labels, n_classes: int = net.N_CLASSES) -> EvalReport:
    """Confusion-matrix metrics. Macro-F1 averages classes seen in labels or predictions."""
    p = np.asarray(predictions, dtype=np.int64)
    y = np.asarray(labels, dtype=np.int64)
    if p.shape != y.shape or p.ndim != 1 or p.size == 0:
        raise ParameterError("predictions and labels must be equal-length, non-empty 1-D")
    for name, a in (("prediction", p), ("label", y)):
        if a.min() < 0 or a.max() >= n_classes:
            raise FormatError(f"{name} outside 0..{n_classes - 1}")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (y, p), 1)
    n = cm.sum()
    tp = np.diag(cm)
    prec = _safe_div(tp, cm.sum(axis=0))
    rec = _safe_div(tp, cm.sum(axis=1))
    f1 = _safe_div(2 * prec * rec, prec + rec)
    seen = (cm.sum(axis=0) + cm.sum(axis=1)) > 0
    po = tp.sum() / n
    pe = float(np.sum(cm.sum(axis=0) * cm.sum(axis=1))) / float(n * n)
    kappa = float("nan") if pe == 1.0 else (po - pe) / (1.0 - pe)
    return EvalReport(float(po), float(f1[seen].mean()), float(kappa), cm, prec, rec, f1)


def write_confusion(report: EvalReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["true\\pred", *STAGE_NAMES])
        for i, row in enumerate(report.confusion):
            w.writerow([STAGE_NAMES[i], *(int(v) for v in row)])


def write_per_class(report: EvalReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["stage", "precision", "recall", "f1"])
        for i, name in enumerate(STAGE_NAMES):
            w.writerow([name, repr(float(report.precision[i])), repr(float(report.recall[i])), repr(float(report.f1[i]))])
