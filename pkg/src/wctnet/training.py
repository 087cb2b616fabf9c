"""Adam optimisation with plateau learning-rate decay and early stopping."""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .ecgio import Label
from .errors import ConfigError, DataError, IoError, StateError
from .model import ModelParams, forward, predict_proba
from .segment import SegmentSet
from .tensor import Parameter

logger = logging.getLogger(__name__)

CLASS_ORDER = (Label.SVT_A, Label.VT)  # one-hot column order; VT is column 1


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    max_epochs: int = 100
    lr: float = 0.001
    lr_decay_factor: float = 0.1
    lr_patience_epochs: int = 2
    early_stop_patience_epochs: int = 2
    val_fraction: float = 0.1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def validate(self) -> None:
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("batch_size and max_epochs must be >= 1")
        if not self.lr > 0 or not 0 < self.lr_decay_factor <= 1:
            raise ConfigError("lr must be positive and lr_decay_factor in (0, 1]")
        if self.lr_patience_epochs < 1 or self.early_stop_patience_epochs < 1:
            raise ConfigError("patience values must be >= 1")
        if not 0 < self.val_fraction < 0.5:
            raise ConfigError(f"val_fraction must be in (0, 0.5), got {self.val_fraction}")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1 and self.adam_eps > 0):
            raise ConfigError("invalid Adam hyperparameters")


def encode_labels(labels: Sequence[Label]) -> np.ndarray:
    out = np.zeros((len(labels), len(CLASS_ORDER)))
    for i, label in enumerate(labels):
        out[i, CLASS_ORDER.index(Label.parse(label))] = 1.0
    return out


def decode_labels(onehot_or_probs: np.ndarray) -> list[Label]:
    return [CLASS_ORDER[i] for i in np.argmax(onehot_or_probs, axis=1)]


def onehot_targets(y: np.ndarray) -> np.ndarray:
    """Integer targets (1 = VT) to one-hot rows in CLASS_ORDER."""
    out = np.zeros((len(y), 2))
    out[np.arange(len(y)), y] = 1.0
    return out


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def zeros(cls, params: Sequence[Parameter]) -> "AdamState":
        return cls(
            {p.name: np.zeros_like(p.data) for p in params if p.trainable},
            {p.name: np.zeros_like(p.data) for p in params if p.trainable},
            0,
        )


def adam_step(
    params: Sequence[Parameter],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update of every trainable parameter, in place.

    Gradients are read from ``param.value.grad``.
    """
    trainable = [p for p in params if p.trainable]
    for p in trainable:
        if p.value.grad is None:
            raise StateError(f"parameter {p.name} has no gradient; run backward() first")
        if p.name not in state.m:
            state.m[p.name] = np.zeros_like(p.data)
            state.v[p.name] = np.zeros_like(p.data)
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for p in trainable:
        g = p.value.grad
        m = state.m[p.name]
        v = state.v[p.name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.value.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


# ---------------------------------------------------------------------------
# Validation split


def split_validation(
    train_patients: SegmentSet, val_fraction: float = 0.1, seed: int = 0
) -> tuple[SegmentSet, SegmentSet]:
    """Hold out whole patients for validation, stratified by class.

    The validation patient count is ``round(val_fraction * n)`` (at least
    one), apportioned across classes by largest remainder, and capped so
    every class keeps at least one training patient. With a single patient
    in each class nothing can be held out and the validation set is empty.
    """
    labels = train_patients.patient_labels()
    if len(labels) < 2:
        raise DataError(f"need at least 2 patients to split, got {len(labels)}")
    if len(set(labels.values())) < len(CLASS_ORDER):
        raise DataError("each class needs at least one patient")
    return _grouped_split(train_patients, val_fraction, seed)


def _grouped_split(segset: SegmentSet, val_fraction: float, seed: int) -> tuple[SegmentSet, SegmentSet]:
    # stratifies over the classes actually present
    labels = segset.patient_labels()
    classes = [c for c in CLASS_ORDER if c in set(labels.values())]
    by_class = {c: sorted(p for p, lab in labels.items() if lab is c) for c in classes}

    n = len(labels)
    n_val = max(1, int(round(val_fraction * n)))
    capacity = {c: len(p) - 1 for c, p in by_class.items()}
    n_val = min(n_val, sum(capacity.values()))

    quota = {c: n_val * len(by_class[c]) / n for c in classes}
    alloc = {c: min(int(math.floor(quota[c])), capacity[c]) for c in classes}
    order = sorted(classes, key=lambda c: (-(quota[c] - math.floor(quota[c])), -len(by_class[c]), c.value))
    while sum(alloc.values()) < n_val:
        for c in order:
            if sum(alloc.values()) < n_val and alloc[c] < capacity[c]:
                alloc[c] += 1

    rng = np.random.default_rng([seed, 7919])
    val_ids: set[str] = set()
    for c in CLASS_ORDER:
        if c not in by_class:
            continue
        pids = by_class[c]
        picks = rng.permutation(len(pids))[: alloc[c]]
        val_ids.update(pids[i] for i in picks)
    train_ids = [p for p in labels if p not in val_ids]
    return segset.select(train_ids), segset.select(val_ids)


# ---------------------------------------------------------------------------
# Schedule


class PlateauMonitor:
    """Two independent patience counters over a monitored loss.

    Any strict decrease counts as an improvement. After ``lr_patience``
    non-improving epochs the learning rate is multiplied by ``factor`` and
    that counter restarts; after ``stop_patience`` non-improving epochs
    training should stop.
    """

    def __init__(self, lr: float, factor: float = 0.1, lr_patience: int = 2, stop_patience: int = 2):
        self.lr = lr
        self.factor = factor
        self.lr_patience = lr_patience
        self.stop_patience = stop_patience
        self.best = math.inf
        self.best_epoch: int | None = None
        self._lr_wait = 0
        self._stop_wait = 0

    def update(self, epoch: int, loss: float) -> tuple[bool, bool]:
        """Returns (improved, stop)."""
        if loss < self.best:
            self.best = loss
            self.best_epoch = epoch
            self._lr_wait = 0
            self._stop_wait = 0
            return True, False
        self._lr_wait += 1
        self._stop_wait += 1
        if self._lr_wait >= self.lr_patience:
            self.lr *= self.factor
            self._lr_wait = 0
        return False, self._stop_wait >= self.stop_patience


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float


@dataclass
class TrainReport:
    epochs: list[EpochRecord]
    stopped_epoch: int
    best_epoch: int
    best_val_loss: float
    early_stopped: bool
    train_patients: list[str]
    val_patients: list[str]
    final_lr: float = 0.0  # after the last schedule update, which may postdate the last epoch
    best_state: dict[str, np.ndarray] = field(repr=False, default_factory=dict)

    def to_csv(self, path: str | os.PathLike) -> None:
        try:
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["epoch", "train_loss", "val_loss", "lr"])
                for e in self.epochs:
                    w.writerow([e.epoch, repr(e.train_loss), repr(e.val_loss), repr(e.lr)])
        except OSError as exc:
            raise IoError(f"cannot write train report {path}: {exc.strerror or exc}") from exc


def dataset_loss(params: ModelParams, x: np.ndarray, onehot: np.ndarray, batch_size: int = 64) -> float:
    """Inference-mode mean cross-entropy over a whole array."""
    probs = predict_proba(params, x, batch_size)
    return T.cross_entropy(T.Tensor(probs), onehot).item()


def train(
    params: ModelParams,
    train_set: SegmentSet,
    config: TrainConfig | None = None,
    val_loss_fn: Callable[[int, ModelParams], float] | None = None,
) -> TrainReport:
    """Fit ``params`` in place and return the per-epoch history.

    The monitored loss is the inference-mode loss of a patient-grouped
    validation split; when no patient can be held out it falls back to the
    training subset. ``val_loss_fn(epoch, params)`` replaces that
    computation (used to script schedules in tests). On exit the weights
    of the best monitored epoch are restored.
    """
    config = config or TrainConfig()
    config.validate()
    if len(train_set) == 0:
        raise DataError("training subset is empty")
    if len(train_set.patient_labels()) < 2:
        fit_set, val_set = train_set, SegmentSet([])
    else:
        if len(set(train_set.patient_labels().values())) < len(CLASS_ORDER):
            logger.warning("training data covers a single class")
        fit_set, val_set = _grouped_split(train_set, config.val_fraction, config.seed)
    x, y = fit_set.arrays()
    targets = onehot_targets(y)
    if len(val_set):
        xv, yv = val_set.arrays()
        val_targets = onehot_targets(yv)
    else:
        xv, val_targets = x, targets

    trainable = params.trainable()
    state = AdamState.zeros(trainable)
    monitor = PlateauMonitor(
        config.lr, config.lr_decay_factor, config.lr_patience_epochs, config.early_stop_patience_epochs
    )
    history: list[EpochRecord] = []
    best_state = params.state()
    stopped = False
    epoch = 0
    for epoch in range(1, config.max_epochs + 1):
        lr = monitor.lr
        order = np.random.default_rng([config.seed, epoch]).permutation(len(x))
        total = 0.0
        for b, start in enumerate(range(0, len(x), config.batch_size)):
            idx = order[start:start + config.batch_size]
            probs = forward(params, x[idx], T.TRAIN, rng_seed=(config.seed, epoch, b))
            loss = T.cross_entropy(probs, targets[idx])
            T.backward(loss, trainable)
            adam_step(trainable, state, lr, config.adam_beta1, config.adam_beta2, config.adam_eps)
            total += loss.item() * len(idx)
        train_loss = total / len(x)
        if val_loss_fn is not None:
            val_loss = float(val_loss_fn(epoch, params))
        else:
            val_loss = dataset_loss(params, xv, val_targets)
        history.append(EpochRecord(epoch, train_loss, val_loss, lr))
        logger.debug("epoch %d train %.5f val %.5f lr %g", epoch, train_loss, val_loss, lr)

        improved, stop = monitor.update(epoch, val_loss)
        if improved:
            best_state = params.state()
        if stop:
            stopped = True
            break

    params.load_state(best_state)
    return TrainReport(
        epochs=history,
        stopped_epoch=epoch,
        best_epoch=monitor.best_epoch or epoch,
        best_val_loss=monitor.best,
        early_stopped=stopped,
        train_patients=fit_set.patients(),
        val_patients=val_set.patients(),
        final_lr=monitor.lr,
        best_state=best_state,
    )


def accuracy(params: ModelParams, segset: SegmentSet) -> float:
    x, y = segset.arrays()
    pred = np.argmax(predict_proba(params, x), axis=1)
    return float(np.mean(pred == y))
