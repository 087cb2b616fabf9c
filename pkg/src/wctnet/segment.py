"""R-peak detection and fixed-length beat windows."""

from __future__ import annotations

import csv
import os
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.ndimage import uniform_filter1d
from scipy.signal import find_peaks

from .ecgio import LEAD_NAMES, N_LEADS, EcgRecord, Label
from .errors import ConfigError, DataError, FormatError, IoError, ShapeError

SEGMENT_LEN = 500
HALF_WINDOW = SEGMENT_LEN // 2
SEGMENT_RATE_HZ = 1000
DEFAULT_PEAK_LEAD = LEAD_NAMES.index("II")

REFRACTORY_MS = 200.0
INTEGRATION_MS = 150.0


def lead_index(name_or_index: str | int) -> int:
    if isinstance(name_or_index, int) or str(name_or_index).isdigit():
        idx = int(name_or_index)
    elif name_or_index in LEAD_NAMES:
        idx = LEAD_NAMES.index(name_or_index)
    else:
        raise ConfigError(f"unknown lead {name_or_index!r}")
    if not 0 <= idx < N_LEADS:
        raise ConfigError(f"lead index {idx} out of range [0, {N_LEADS})")
    return idx


def detect_r_peaks(record: EcgRecord, lead_index: int = DEFAULT_PEAK_LEAD) -> list[int]:
    """Pan-Tompkins style detector on a single lead of a preprocessed record.

    derivative -> square -> 150 ms moving-window integration -> adaptive
    signal/noise thresholds with search-back, then each accepted integrator
    peak is refined to the largest absolute deflection of the lead within
    the integration window.
    """
    if not 0 <= lead_index < N_LEADS:
        raise ConfigError(f"lead index {lead_index} out of range [0, {N_LEADS})")
    fs = record.sampling_rate_hz
    n = record.n_samples
    if n < fs:
        raise DataError(f"record {record.patient_id} is shorter than 1 s ({n} samples)")
    x = record.leads[:, lead_index]
    if not np.any(x):
        return []

    # five-point derivative, centred so it adds no delay
    deriv = np.convolve(x, np.array([2.0, 1.0, 0.0, -1.0, -2.0]) * fs / 8.0, mode="same")
    win = max(int(round(INTEGRATION_MS * fs / 1000.0)), 1)
    mwi = uniform_filter1d(deriv**2, size=win, mode="nearest")

    refractory = int(round(REFRACTORY_MS * fs / 1000.0))
    cand, _ = find_peaks(mwi, distance=refractory)
    if cand.size == 0:
        return []
    heights = mwi[cand]

    learn = mwi[: 2 * fs]
    spki = 0.25 * learn.max()
    npki = 0.5 * learn.mean()
    accepted: list[int] = []
    rr_recent: list[int] = []
    for k, (pos, h) in enumerate(zip(cand, heights)):
        thr1 = npki + 0.25 * (spki - npki)
        if accepted and rr_recent:
            # search-back for a missed beat in a long gap
            rr_avg = float(np.mean(rr_recent[-8:]))
            if pos - accepted[-1] > 1.66 * rr_avg:
                gap = [j for j in range(k) if accepted[-1] + refractory <= cand[j] < pos - refractory]
                gap = [j for j in gap if heights[j] > 0.5 * thr1]
                if gap:
                    j = max(gap, key=lambda j: heights[j])
                    rr_recent.append(int(cand[j]) - accepted[-1])
                    accepted.append(int(cand[j]))
                    spki = 0.25 * heights[j] + 0.75 * spki
        if h > thr1:
            if accepted:
                rr_recent.append(int(pos) - accepted[-1])
            accepted.append(int(pos))
            spki = 0.125 * h + 0.875 * spki
        else:
            npki = 0.125 * h + 0.875 * npki

    half = win // 2
    peaks: list[int] = []
    for pos in accepted:
        lo, hi = max(pos - half, 0), min(pos + half + 1, n)
        r = lo + int(np.argmax(np.abs(x[lo:hi])))
        if peaks and r - peaks[-1] < refractory:
            if abs(x[r]) > abs(x[peaks[-1]]):
                peaks[-1] = r
            continue
        peaks.append(r)
    return peaks


@dataclass(eq=False)
class Segment:
    samples: np.ndarray
    label: Label
    patient_id: str
    peak_index: int

    def __post_init__(self) -> None:
        self.label = Label.parse(self.label)
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.shape != (SEGMENT_LEN, N_LEADS):
            raise ShapeError(f"segment must be {SEGMENT_LEN}x{N_LEADS}, got {samples.shape}")
        if not np.isfinite(samples).all():
            raise DataError(f"segment of {self.patient_id} at {self.peak_index} has non-finite values")
        self.samples = samples


@dataclass
class SegmentSet:
    segments: list[Segment] = field(default_factory=list)

    @property
    def counts_per_class(self) -> dict[Label, int]:
        counts = Counter(s.label for s in self.segments)
        return {label: counts.get(label, 0) for label in Label}

    def __len__(self) -> int:
        return len(self.segments)

    def __iter__(self):
        return iter(self.segments)

    def patients(self) -> list[str]:
        """Patient ids in order of first appearance."""
        return list(dict.fromkeys(s.patient_id for s in self.segments))

    def patient_labels(self) -> dict[str, Label]:
        return {s.patient_id: s.label for s in self.segments}

    def by_patient(self) -> dict[str, "SegmentSet"]:
        groups: dict[str, list[Segment]] = {}
        for s in self.segments:
            groups.setdefault(s.patient_id, []).append(s)
        return {pid: SegmentSet(segs) for pid, segs in groups.items()}

    def select(self, patient_ids: Iterable[str]) -> "SegmentSet":
        keep = set(patient_ids)
        return SegmentSet([s for s in self.segments if s.patient_id in keep])

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Stacked samples [N, 500, 12] and integer targets (1 = VT)."""
        if not self.segments:
            return np.zeros((0, SEGMENT_LEN, N_LEADS)), np.zeros(0, dtype=np.int64)
        x = np.stack([s.samples for s in self.segments])
        y = np.array([1 if s.label is Label.VT else 0 for s in self.segments], dtype=np.int64)
        return x, y

    @classmethod
    def concat(cls, sets: Iterable["SegmentSet"]) -> "SegmentSet":
        return cls([s for ss in sets for s in ss.segments])


def extract_segments(record: EcgRecord, peaks: Sequence[int]) -> SegmentSet:
    """Cut rows [p - 250, p + 250) around every peak that fits inside the record."""
    if record.sampling_rate_hz != SEGMENT_RATE_HZ:
        raise ConfigError(
            f"record {record.patient_id} is sampled at {record.sampling_rate_hz} Hz; "
            f"segmentation requires {SEGMENT_RATE_HZ} Hz"
        )
    n = record.n_samples
    out = []
    for p in peaks:
        p = int(p)
        if p - HALF_WINDOW < 0 or p + HALF_WINDOW > n:
            continue
        out.append(Segment(record.leads[p - HALF_WINDOW:p + HALF_WINDOW].copy(), record.label, record.patient_id, p))
    return SegmentSet(out)


def segment_record(record: EcgRecord, peak_lead: int = DEFAULT_PEAK_LEAD) -> SegmentSet:
    return extract_segments(record, detect_r_peaks(record, peak_lead))


# ---------------------------------------------------------------------------
# Persistence: windows/<n>.csv plus index.csv


INDEX_FIELDS = ("file", "patient_id", "label", "peak_index")


def save_segments(segset: SegmentSet, out_dir: str | os.PathLike) -> None:
    out_dir = Path(out_dir)
    try:
        (out_dir / "windows").mkdir(parents=True, exist_ok=True)
        with open(out_dir / "index.csv", "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(INDEX_FIELDS)
            for i, seg in enumerate(segset.segments):
                rel = f"windows/{i:06d}.csv"
                with open(out_dir / rel, "w", newline="") as wf:
                    wf.write(",".join(LEAD_NAMES) + "\n")
                    np.savetxt(wf, seg.samples, fmt="%.17g", delimiter=",")
                writer.writerow([rel, seg.patient_id, seg.label.value, seg.peak_index])
    except OSError as exc:
        raise IoError(f"cannot write segments to {out_dir}: {exc.strerror or exc}") from exc


def load_segments(seg_dir: str | os.PathLike) -> SegmentSet:
    seg_dir = Path(seg_dir)
    index = seg_dir / "index.csv"
    try:
        with open(index, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise IoError(f"cannot read segment index {index}: {exc.strerror or exc}") from exc
    segments = []
    for row in rows:
        try:
            path = seg_dir / row["file"]
            samples = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
            segments.append(Segment(samples, Label.parse(row["label"]), row["patient_id"], int(row["peak_index"])))
        except (KeyError, TypeError) as exc:
            raise FormatError(f"{index}: malformed row {row}") from exc
        except ValueError as exc:
            raise FormatError(f"{index}: unreadable window {row.get('file')}: {exc}") from exc
        except OSError as exc:
            raise IoError(f"cannot read window {row.get('file')}: {exc.strerror or exc}") from exc
    return SegmentSet(segments)
