"""Patient-level leave-one-out cross-validation and classification metrics.

VT is the positive class throughout.
"""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .ecgio import Label
from .errors import DataError, FormatError, IoError
from .model import ModelConfig, ModelParams, build_model, predict_proba, save_weights
from .segment import SegmentSet
from .training import TrainConfig, TrainReport, train

Z_95 = 1.96


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int = 0
    fn: int = 0
    fp: int = 0
    tn: int = 0

    def __post_init__(self) -> None:
        if min(self.tp, self.fn, self.fp, self.tn) < 0:
            raise DataError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fn + self.fp + self.tn

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.tp + other.tp, self.fn + other.fn, self.fp + other.fp, self.tn + other.tn)

    @classmethod
    def from_labels(cls, true: Iterable[Label], pred: Iterable[Label]) -> "ConfusionMatrix":
        tp = fn = fp = tn = 0
        for t, p in zip(true, pred):
            if t is Label.VT:
                tp += p is Label.VT
                fn += p is not Label.VT
            else:
                fp += p is Label.VT
                tn += p is not Label.VT
        return cls(tp, fn, fp, tn)


@dataclass(frozen=True)
class SegmentPrediction:
    peak_index: int
    true_label: Label
    predicted_label: Label
    prob_vt: float

    @property
    def correct(self) -> bool:
        return self.true_label is self.predicted_label


@dataclass
class FoldResult:
    held_out_patient: str
    predictions: list[SegmentPrediction]
    train_patients: list[str] = field(default_factory=list)
    val_patients: list[str] = field(default_factory=list)
    test_patients: list[str] = field(default_factory=list)
    report: TrainReport | None = None
    params: ModelParams | None = field(default=None, repr=False)

    @property
    def confusion(self) -> ConfusionMatrix:
        return ConfusionMatrix.from_labels(
            (p.true_label for p in self.predictions), (p.predicted_label for p in self.predictions)
        )

    @property
    def accuracy(self) -> float | None:
        if not self.predictions:
            return None
        return sum(p.correct for p in self.predictions) / len(self.predictions)


@dataclass
class MetricsReport:
    sensitivity: float | None
    specificity: float | None
    accuracy: float | None
    f1: float | None
    precision: float | None
    accuracy_ci95: tuple[float, float] | None = None
    mean_patient_accuracy: float | None = None
    per_patient_accuracy: dict[str, float] = field(default_factory=dict)
    confusion: ConfusionMatrix | None = None

    @property
    def undefined(self) -> list[str]:
        names = ("sensitivity", "specificity", "accuracy", "f1", "precision")
        return [n for n in names if getattr(self, n) is None]


def _ratio(num: int, den: int) -> float | None:
    return num / den if den > 0 else None


def compute_metrics(cm: ConfusionMatrix) -> MetricsReport:
    """Scalar metrics; any metric with a zero denominator is ``None``."""
    sens = _ratio(cm.tp, cm.tp + cm.fn)
    spec = _ratio(cm.tn, cm.tn + cm.fp)
    acc = _ratio(cm.tp + cm.tn, cm.total)
    prec = _ratio(cm.tp, cm.tp + cm.fp)
    if sens is None or prec is None:
        f1 = None
    elif prec + sens == 0:
        f1 = 0.0
    else:
        f1 = 2 * prec * sens / (prec + sens)
    return MetricsReport(sens, spec, acc, f1, prec, confusion=cm)


def accuracy_ci95(per_patient_accuracy: Sequence[float]) -> tuple[float, float]:
    """Normal-approximation interval of the patient-mean accuracy, clipped to [0, 1].

    mean +/- 1.96 * s / sqrt(n) with ``s`` the sample standard deviation.
    """
    values = np.asarray(list(per_patient_accuracy), dtype=np.float64)
    n = values.size
    if n < 2:
        raise DataError(f"a confidence interval needs at least 2 patients, got {n}")
    mean = values.mean()
    half = Z_95 * values.std(ddof=1) / math.sqrt(n)
    return max(0.0, mean - half), min(1.0, mean + half)


def aggregate_confusion(folds: Sequence[FoldResult]) -> ConfusionMatrix:
    total = ConfusionMatrix()
    for fold in folds:
        total = total + fold.confusion
    return total


def per_patient_accuracy(folds: Sequence[FoldResult]) -> dict[str, float]:
    out = {}
    for fold in sorted(folds, key=lambda f: f.held_out_patient):
        acc = fold.accuracy
        if acc is not None:
            out[fold.held_out_patient] = acc
    return out


def build_report(folds: Sequence[FoldResult]) -> MetricsReport:
    cm = aggregate_confusion(folds)
    report = compute_metrics(cm)
    report.per_patient_accuracy = per_patient_accuracy(folds)
    accs = list(report.per_patient_accuracy.values())
    if accs:
        report.mean_patient_accuracy = float(np.mean(accs))
    if len(accs) >= 2:
        report.accuracy_ci95 = accuracy_ci95(accs)
    return report


# ---------------------------------------------------------------------------
# LOOCV


def check_no_leakage(fold: FoldResult) -> None:
    seen = set(fold.train_patients) | set(fold.val_patients)
    if fold.held_out_patient in seen:
        raise DataError(f"fold {fold.held_out_patient}: held-out patient appears in training data")
    if set(fold.test_patients) - {fold.held_out_patient}:
        raise DataError(f"fold {fold.held_out_patient}: test set contains other patients")


def fold_seed(seed: int, fold_index: int) -> int:
    return int(np.random.SeedSequence([seed, fold_index]).generate_state(1)[0])


def run_fold(
    dataset: SegmentSet,
    held_out: str,
    fold_index: int,
    train_config: TrainConfig,
    model_config: ModelConfig,
) -> FoldResult:
    """Train on every patient except ``held_out`` and predict its segments."""
    others = [p for p in dataset.patients() if p != held_out]
    train_part = dataset.select(others)
    test_part = dataset.select([held_out])

    seed = fold_seed(train_config.seed, fold_index)
    params = build_model(model_config, rng_seed=seed)
    cfg = TrainConfig(**{**train_config.__dict__, "seed": seed})
    report = train(params, train_part, cfg)

    x, y = test_part.arrays()
    probs = predict_proba(params, x)
    preds = [
        SegmentPrediction(
            seg.peak_index,
            seg.label,
            Label.VT if pr[1] > pr[0] else Label.SVT_A,
            float(pr[1]),
        )
        for seg, pr in zip(test_part.segments, probs)
    ]
    fold = FoldResult(
        held_out_patient=held_out,
        predictions=preds,
        train_patients=report.train_patients,
        val_patients=report.val_patients,
        test_patients=test_part.patients(),
        report=report,
        params=params,
    )
    check_no_leakage(fold)
    return fold


def _run_fold_args(args) -> FoldResult:
    return run_fold(*args)


def loocv(
    dataset: SegmentSet | Sequence[SegmentSet],
    train_config: TrainConfig | None = None,
    model_config: ModelConfig | None = None,
    jobs: int = 1,
) -> list[FoldResult]:
    """One fold per patient, returned in patient-id order."""
    if not isinstance(dataset, SegmentSet):
        dataset = SegmentSet.concat(dataset)
    train_config = train_config or TrainConfig()
    model_config = model_config or ModelConfig()
    labels = dataset.patient_labels()
    if len(labels) < 2:
        raise DataError(f"LOOCV needs at least 2 patients, got {len(labels)}")
    if len(set(labels.values())) < 2:
        raise DataError("LOOCV needs both VT and SVT_A patients")

    patients = sorted(labels)
    tasks = [(dataset, pid, i, train_config, model_config) for i, pid in enumerate(patients)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            folds = list(pool.map(_run_fold_args, tasks))
    else:
        folds = [_run_fold_args(t) for t in tasks]
    return sorted(folds, key=lambda f: f.held_out_patient)


# ---------------------------------------------------------------------------
# Artifacts


def _fmt(v: float | None) -> str:
    return "undefined" if v is None else repr(float(v))


def write_fold(fold: FoldResult, fold_dir: str | os.PathLike) -> None:
    """predictions.csv, train_report.csv and weights.bin for one fold."""
    fold_dir = Path(fold_dir)
    try:
        fold_dir.mkdir(parents=True, exist_ok=True)
        with open(fold_dir / "predictions.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["patient_id", "peak_index", "true_label", "predicted_label", "prob_vt"])
            for p in fold.predictions:
                w.writerow([fold.held_out_patient, p.peak_index, p.true_label.value, p.predicted_label.value, repr(p.prob_vt)])
        with open(fold_dir / "split.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["patient_id", "role"])
            for pid in fold.train_patients:
                w.writerow([pid, "train"])
            for pid in fold.val_patients:
                w.writerow([pid, "val"])
            w.writerow([fold.held_out_patient, "test"])
    except OSError as exc:
        raise IoError(f"cannot write fold artifacts to {fold_dir}: {exc.strerror or exc}") from exc
    if fold.report is not None:
        fold.report.to_csv(fold_dir / "train_report.csv")
    if fold.params is not None:
        save_weights(fold.params, fold_dir / "weights.bin")


def read_folds(folds_dir: str | os.PathLike) -> list[FoldResult]:
    """Rebuild fold predictions and splits from a ``folds/`` directory."""
    folds_dir = Path(folds_dir)
    if not folds_dir.is_dir():
        raise IoError(f"missing LOOCV artifacts: {folds_dir} does not exist")
    folds = []
    for sub in sorted(p for p in folds_dir.iterdir() if p.is_dir()):
        try:
            with open(sub / "predictions.csv", newline="") as fh:
                rows = list(csv.DictReader(fh))
            with open(sub / "split.csv", newline="") as fh:
                split = list(csv.DictReader(fh))
        except OSError as exc:
            raise IoError(f"missing LOOCV artifacts in {sub}: {exc.strerror or exc}") from exc
        try:
            preds = [
                SegmentPrediction(int(r["peak_index"]), Label.parse(r["true_label"]),
                                  Label.parse(r["predicted_label"]), float(r["prob_vt"]))
                for r in rows
            ]
            test = [r["patient_id"] for r in split if r["role"] == "test"]
            folds.append(FoldResult(
                held_out_patient=test[0],
                predictions=preds,
                train_patients=[r["patient_id"] for r in split if r["role"] == "train"],
                val_patients=[r["patient_id"] for r in split if r["role"] == "val"],
                test_patients=sorted({r["patient_id"] for r in rows}) or test,
            ))
        except (KeyError, ValueError, IndexError) as exc:
            raise FormatError(f"{sub}: malformed fold artifact ({exc})") from exc
    if not folds:
        raise IoError(f"missing LOOCV artifacts: no folds in {folds_dir}")
    return sorted(folds, key=lambda f: f.held_out_patient)


def write_report(report: MetricsReport, out_dir: str | os.PathLike) -> None:
    """confusion.csv, metrics.csv and per_patient_accuracy.csv."""
    out_dir = Path(out_dir)
    cm = report.confusion or ConfusionMatrix()
    ci = report.accuracy_ci95
    rows = [
        ("sensitivity", report.sensitivity),
        ("specificity", report.specificity),
        ("precision", report.precision),
        ("accuracy", report.accuracy),
        ("f1", report.f1),
        ("mean_patient_accuracy", report.mean_patient_accuracy),
        ("accuracy_ci95_low", ci[0] if ci else None),
        ("accuracy_ci95_high", ci[1] if ci else None),
    ]
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "confusion.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["tp", "fn", "fp", "tn"])
            w.writerow([cm.tp, cm.fn, cm.fp, cm.tn])
        with open(out_dir / "metrics.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["metric", "value"])
            for name, value in rows:
                w.writerow([name, _fmt(value)])
            w.writerow(["n_patients", len(report.per_patient_accuracy)])
            w.writerow(["n_segments", cm.total])
        with open(out_dir / "per_patient_accuracy.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["patient_id", "accuracy"])
            for pid, acc in report.per_patient_accuracy.items():
                w.writerow([pid, repr(acc)])
    except OSError as exc:
        raise IoError(f"cannot write report to {out_dir}: {exc.strerror or exc}") from exc
