"""12-lead ECG records: CSV persistence, dataset manifests and a synthetic generator."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataError, FormatError, IoError, ShapeError

LEAD_NAMES: tuple[str, ...] = (
    "I", "II", "III", "aVR", "aVL", "aVF", "V1", "V2", "V3", "V4", "V5", "V6",
)
N_LEADS = len(LEAD_NAMES)
DEFAULT_SAMPLING_RATE_HZ = 1000
MANIFEST_FORMAT_VERSION = "1.0"


class Label(str, Enum):
    VT = "VT"
    SVT_A = "SVT_A"

    @classmethod
    def parse(cls, value: str | "Label") -> "Label":
        try:
            return cls(value)
        except ValueError:
            raise FormatError(f"unknown rhythm label {value!r}; expected VT or SVT_A") from None


@dataclass(eq=False)
class EcgRecord:
    patient_id: str
    label: Label
    sampling_rate_hz: int
    leads: np.ndarray
    lead_names: tuple[str, ...] = LEAD_NAMES

    def __post_init__(self) -> None:
        self.label = Label.parse(self.label)
        leads = np.asarray(self.leads, dtype=np.float64)
        if leads.ndim != 2 or leads.shape[1] != N_LEADS:
            raise ShapeError(f"record {self.patient_id}: expected [n_samples x 12] leads, got {leads.shape}")
        if leads.shape[0] < 1:
            raise ShapeError(f"record {self.patient_id}: no samples")
        if not np.isfinite(leads).all():
            raise DataError(f"record {self.patient_id}: non-finite sample values")
        if int(self.sampling_rate_hz) <= 0:
            raise ConfigError(f"record {self.patient_id}: sampling rate must be positive")
        if tuple(self.lead_names) != LEAD_NAMES:
            raise FormatError(f"record {self.patient_id}: lead order must be {','.join(LEAD_NAMES)}")
        self.leads = leads
        self.sampling_rate_hz = int(self.sampling_rate_hz)
        self.lead_names = tuple(self.lead_names)

    @property
    def n_samples(self) -> int:
        return self.leads.shape[0]

    def with_leads(self, leads: np.ndarray) -> "EcgRecord":
        return EcgRecord(self.patient_id, self.label, self.sampling_rate_hz, leads)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EcgRecord):
            return NotImplemented
        return (
            self.patient_id == other.patient_id
            and self.label == other.label
            and self.sampling_rate_hz == other.sampling_rate_hz
            and self.lead_names == other.lead_names
            and np.array_equal(self.leads, other.leads)
        )


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    patient_id: str
    label: Label


@dataclass
class DatasetManifest:
    records: list[ManifestEntry]
    sampling_rate_hz: int = DEFAULT_SAMPLING_RATE_HZ
    format_version: str = MANIFEST_FORMAT_VERSION

    def __post_init__(self) -> None:
        seen: set[str] = set()
        for entry in self.records:
            if entry.patient_id in seen:
                raise FormatError(f"duplicate patient_id {entry.patient_id!r} in manifest")
            seen.add(entry.patient_id)


# ---------------------------------------------------------------------------
# Record CSV


def save_record(record: EcgRecord, path: str | os.PathLike) -> None:
    """Write ``record`` as a headered 12-column CSV of millivolt values.

    Values are written with 17 significant digits so reloading is exact.
    """
    path = Path(path)
    try:
        with open(path, "w", newline="") as fh:
            fh.write(",".join(LEAD_NAMES) + "\n")
            np.savetxt(fh, record.leads, fmt="%.17g", delimiter=",")
    except OSError as exc:
        raise IoError(f"cannot write record to {path}: {exc.strerror or exc}") from exc


def load_record(
    path: str | os.PathLike,
    manifest_entry: ManifestEntry,
    sampling_rate_hz: int = DEFAULT_SAMPLING_RATE_HZ,
) -> EcgRecord:
    path = Path(path)
    try:
        with open(path, "r") as fh:
            header = fh.readline().strip()
            body = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read record {path}: {exc.strerror or exc}") from exc

    names = [h.strip() for h in header.split(",")] if header else []
    if len(names) != N_LEADS:
        raise ShapeError(f"{path}: header has {len(names)} columns, expected {N_LEADS}")
    if tuple(names) != LEAD_NAMES:
        raise FormatError(f"{path}: malformed header {header!r}")

    rows = [line for line in body.splitlines() if line.strip()]
    if not rows:
        raise ShapeError(f"{path}: no sample rows")
    leads = np.empty((len(rows), N_LEADS), dtype=np.float64)
    for i, line in enumerate(rows):
        cells = line.split(",")
        if len(cells) != N_LEADS:
            raise ShapeError(f"{path}: row {i + 1} has {len(cells)} columns, expected {N_LEADS}")
        try:
            leads[i] = [float(c) for c in cells]
        except ValueError:
            raise FormatError(f"{path}: row {i + 1} is not numeric") from None
    if not np.isfinite(leads).all():
        raise DataError(f"{path}: non-finite sample value")
    return EcgRecord(manifest_entry.patient_id, manifest_entry.label, sampling_rate_hz, leads)


# ---------------------------------------------------------------------------
# Manifest


def save_manifest(manifest: DatasetManifest, path: str | os.PathLike) -> None:
    doc = {
        "format_version": manifest.format_version,
        "sampling_rate_hz": manifest.sampling_rate_hz,
        "records": [
            {"path": e.path, "patient_id": e.patient_id, "label": e.label.value}
            for e in manifest.records
        ],
    }
    try:
        Path(path).write_text(json.dumps(doc, indent=2) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write manifest {path}: {exc.strerror or exc}") from exc


def load_manifest(path: str | os.PathLike) -> DatasetManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise IoError(f"cannot read manifest {path}: {exc.strerror or exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc.msg})") from exc
    try:
        entries = [
            ManifestEntry(str(r["path"]), str(r["patient_id"]), Label.parse(r["label"]))
            for r in doc["records"]
        ]
        manifest = DatasetManifest(entries, int(doc["sampling_rate_hz"]), str(doc["format_version"]))
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: missing or malformed manifest field ({exc})") from exc
    for entry in manifest.records:
        if not (path.parent / entry.path).is_file():
            raise IoError(f"{path}: record file {entry.path} does not exist")
    return manifest


def load_dataset(manifest_path: str | os.PathLike) -> list[EcgRecord]:
    """Load every record referenced by a manifest (paths relative to the manifest)."""
    manifest_path = Path(manifest_path)
    manifest = load_manifest(manifest_path)
    return [
        load_record(manifest_path.parent / e.path, e, manifest.sampling_rate_hz)
        for e in manifest.records
    ]


def save_dataset(records: Sequence[EcgRecord], out_dir: str | os.PathLike) -> Path:
    """Write records as ``records/<patient_id>.csv`` plus ``manifest.json``; returns the manifest path."""
    out_dir = Path(out_dir)
    try:
        (out_dir / "records").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {out_dir}: {exc.strerror or exc}") from exc
    rates = {r.sampling_rate_hz for r in records}
    if len(rates) > 1:
        raise ConfigError(f"mixed sampling rates in dataset: {sorted(rates)}")
    entries = []
    for rec in records:
        rel = f"records/{rec.patient_id}.csv"
        save_record(rec, out_dir / rel)
        entries.append(ManifestEntry(rel, rec.patient_id, rec.label))
    manifest = DatasetManifest(entries, rates.pop() if rates else DEFAULT_SAMPLING_RATE_HZ)
    save_manifest(manifest, out_dir / "manifest.json")
    return out_dir / "manifest.json"


# ---------------------------------------------------------------------------
# Synthetic data
#
# Each beat is a sum of Gaussian bumps per lead. Bumps are (offset, sigma,
# amplitude) with offset and sigma in units of the QRS width; amplitude is a
# multiple of the patient's QRS amplitude. Lead II carries a dominant upright
# R at offset 0 in both classes, which is the beat's fiducial point.

_SVT_A_TEMPLATE: dict[str, list[tuple[float, float, float]]] = {
    # right-bundle-branch aberrancy: rsR' in V1, slurred S in I/V6
    "I": [(0.0, 0.14, 0.8), (0.32, 0.12, -0.3)],
    "II": [(0.0, 0.14, 1.2), (0.30, 0.10, -0.2)],
    "III": [(0.0, 0.14, 0.5)],
    "aVR": [(0.0, 0.14, -0.9), (0.30, 0.10, 0.2)],
    "aVL": [(0.0, 0.14, 0.3), (0.30, 0.12, -0.2)],
    "aVF": [(0.0, 0.14, 0.8)],
    "V1": [(-0.25, 0.08, 0.3), (0.0, 0.08, -0.4), (0.28, 0.12, 1.0)],
    "V2": [(-0.25, 0.08, 0.4), (0.0, 0.10, -0.6), (0.28, 0.12, 0.6)],
    "V3": [(0.0, 0.12, 0.6), (0.28, 0.12, -0.5)],
    "V4": [(0.0, 0.12, 0.9), (0.30, 0.12, -0.4)],
    "V5": [(0.0, 0.12, 1.1), (0.30, 0.12, -0.4)],
    "V6": [(-0.25, 0.06, -0.1), (0.0, 0.12, 1.0), (0.32, 0.14, -0.5)],
}

_VT_TEMPLATE: dict[str, list[tuple[float, float, float]]] = {
    # ventricular origin: monophasic R in V1, QS in V6, initial R in aVR
    "I": [(0.05, 0.20, 0.3)],
    "II": [(0.0, 0.18, 1.0)],
    "III": [(0.0, 0.18, 0.9)],
    "aVR": [(-0.15, 0.12, 0.6), (0.15, 0.16, -0.4)],
    "aVL": [(0.05, 0.20, -0.4)],
    "aVF": [(0.0, 0.18, 0.9)],
    "V1": [(0.05, 0.22, 1.2)],
    "V2": [(0.05, 0.22, 1.1)],
    "V3": [(0.05, 0.22, 0.9)],
    "V4": [(0.05, 0.22, 0.6)],
    "V5": [(0.05, 0.20, -0.6)],
    "V6": [(0.05, 0.20, -1.0)],
}

_TEMPLATES = {Label.VT: _VT_TEMPLATE, Label.SVT_A: _SVT_A_TEMPLATE}

# T wave: offset after the fiducial (ms), width (ms), relative amplitude.
_T_OFFSET_MS = 170.0
_T_SIGMA_MS = 35.0
_T_RATIO = -0.25
_TEMPLATE_SPAN_MS = (-300, 400)


@dataclass(frozen=True)
class MorphologyParams:
    qrs_width_ms: float
    amplitude_mv: float
    noise_std_mv: float


def _default_rates() -> dict[Label, tuple[float, float]]:
    return {Label.VT: (150.0, 250.0), Label.SVT_A: (150.0, 250.0)}


def _default_morphology() -> dict[Label, MorphologyParams]:
    return {
        Label.VT: MorphologyParams(qrs_width_ms=160.0, amplitude_mv=1.2, noise_std_mv=0.04),
        Label.SVT_A: MorphologyParams(qrs_width_ms=135.0, amplitude_mv=1.0, noise_std_mv=0.04),
    }


@dataclass
class SyntheticConfig:
    """Parameters of the synthetic wide-complex-tachycardia cohort.

    ``informative_leads`` restricts the class difference to the named leads:
    every other lead renders the same morphology for both classes.
    """

    n_patients_per_class: int = 5
    record_duration_s: float = 60.0
    heart_rate_bpm_range: dict[Label, tuple[float, float]] = field(default_factory=_default_rates)
    morphology_params: dict[Label, MorphologyParams] = field(default_factory=_default_morphology)
    seed: int = 0
    sampling_rate_hz: int = DEFAULT_SAMPLING_RATE_HZ
    informative_leads: tuple[str, ...] | None = None
    baseline_wander_mv: float = 0.15
    rr_jitter: float = 0.01

    def validate(self) -> None:
        if self.n_patients_per_class < 1:
            raise ConfigError("n_patients_per_class must be >= 1")
        if not self.record_duration_s > 0:
            raise ConfigError("record_duration_s must be positive")
        if self.sampling_rate_hz <= 0:
            raise ConfigError("sampling_rate_hz must be positive")
        for label in Label:
            if label not in self.heart_rate_bpm_range or label not in self.morphology_params:
                raise ConfigError(f"missing parameters for class {label.value}")
            low, high = self.heart_rate_bpm_range[label]
            if low > high:
                raise ConfigError(f"{label.value}: heart rate range low {low} > high {high}")
            if low < 150 or high > 250:
                raise ConfigError(f"{label.value}: heart rate range must lie within 150-250 bpm")
            m = self.morphology_params[label]
            if not m.qrs_width_ms > 120:
                raise ConfigError(f"{label.value}: QRS width must exceed 120 ms (wide complex)")
            if m.amplitude_mv <= 0 or m.noise_std_mv < 0:
                raise ConfigError(f"{label.value}: amplitude must be positive and noise non-negative")
        if self.informative_leads is not None:
            unknown = set(self.informative_leads) - set(LEAD_NAMES)
            if unknown or not self.informative_leads:
                raise ConfigError(f"informative_leads must be a non-empty subset of lead names, got {self.informative_leads}")


def beat_template(
    label: Label | str,
    qrs_width_ms: float,
    amplitude_mv: float,
    sampling_rate_hz: int = DEFAULT_SAMPLING_RATE_HZ,
    lead_gains: np.ndarray | None = None,
    neutral_leads: Iterable[str] = (),
    neutral_width_ms: float | None = None,
    neutral_amplitude_mv: float | None = None,
) -> tuple[np.ndarray, int]:
    """Render one beat as a [n_tau x 12] array; returns it with the fiducial row index."""
    label = Label.parse(label)
    neutral = set(neutral_leads)
    lo, hi = _TEMPLATE_SPAN_MS
    fs_ms = sampling_rate_hz / 1000.0
    n_lo = int(round(lo * fs_ms))
    tau = np.arange(n_lo, int(round(hi * fs_ms)) + 1) / fs_ms  # ms
    out = np.zeros((tau.size, N_LEADS))
    gains = np.ones(N_LEADS) if lead_gains is None else lead_gains
    for j, name in enumerate(LEAD_NAMES):
        if name in neutral:
            bumps = _SVT_A_TEMPLATE[name]
            width = neutral_width_ms if neutral_width_ms is not None else qrs_width_ms
            amp_mv = neutral_amplitude_mv if neutral_amplitude_mv is not None else amplitude_mv
        else:
            bumps = _TEMPLATES[label][name]
            width = qrs_width_ms
            amp_mv = amplitude_mv
        wave = np.zeros_like(tau)
        for offset, sigma, amp in bumps:
            wave += amp * np.exp(-0.5 * ((tau - offset * width) / (sigma * width)) ** 2)
        dominant = max(bumps, key=lambda b: abs(b[2]))[2]
        wave += _T_RATIO * dominant * np.exp(-0.5 * ((tau - _T_OFFSET_MS) / _T_SIGMA_MS) ** 2)
        out[:, j] = gains[j] * amp_mv * wave
    return out, -n_lo


def render_beats(
    beat_indices: Sequence[int],
    n_samples: int,
    label: Label | str = Label.SVT_A,
    qrs_width_ms: float = 140.0,
    amplitude_mv: float = 1.0,
    sampling_rate_hz: int = DEFAULT_SAMPLING_RATE_HZ,
    beat_scales: Sequence[float] | None = None,
    **template_kwargs,
) -> np.ndarray:
    """Place one templated beat at each fiducial index; returns [n_samples x 12] millivolts."""
    template, centre = beat_template(label, qrs_width_ms, amplitude_mv, sampling_rate_hz, **template_kwargs)
    leads = np.zeros((n_samples, N_LEADS))
    n_tau = template.shape[0]
    for k, idx in enumerate(beat_indices):
        scale = 1.0 if beat_scales is None else beat_scales[k]
        start = int(idx) - centre
        lo, hi = max(start, 0), min(start + n_tau, n_samples)
        if lo < hi:
            leads[lo:hi] += scale * template[lo - start:hi - start]
    return leads


def synthesize_patient(
    config: SyntheticConfig, label: Label, index: int
) -> tuple[EcgRecord, np.ndarray]:
    """Generate one patient's record; returns it with the true beat fiducial indices."""
    rng = np.random.default_rng([config.seed, 0 if label is Label.VT else 1, index])
    fs = config.sampling_rate_hz
    n_samples = int(round(config.record_duration_s * fs))
    morph = config.morphology_params[label]
    low, high = config.heart_rate_bpm_range[label]

    # stratified over the patient index so both classes span the rate range alike
    n = config.n_patients_per_class
    bpm = low + (high - low) * ((index % n) + rng.uniform()) / n
    rr = 60.0 * fs / bpm
    width = morph.qrs_width_ms * rng.uniform(0.93, 1.07)
    amplitude = morph.amplitude_mv * math.exp(rng.normal(0.0, 0.15))
    gains = 1.0 + rng.normal(0.0, 0.08, N_LEADS)

    n_beats = int(math.floor(n_samples / rr - 0.5)) + 1
    first = 0.5 * rr
    beats = first + rr * np.arange(n_beats) + rng.normal(0.0, config.rr_jitter * rr, n_beats)
    beats = np.round(beats).astype(np.int64)
    beats = beats[(beats >= 0) & (beats < n_samples)]
    scales = 1.0 + rng.normal(0.0, 0.03, beats.size)

    neutral: tuple[str, ...] = ()
    neutral_width = neutral_amp = None
    if config.informative_leads is not None:
        # neutral leads keep this patient's jitter but the SVT_A base morphology
        neutral = tuple(n for n in LEAD_NAMES if n not in config.informative_leads)
        svt = config.morphology_params[Label.SVT_A]
        neutral_width = svt.qrs_width_ms * width / morph.qrs_width_ms
        neutral_amp = svt.amplitude_mv * amplitude / morph.amplitude_mv
    leads = render_beats(
        beats, n_samples, label, width, amplitude, fs, beat_scales=scales,
        lead_gains=gains, neutral_leads=neutral, neutral_width_ms=neutral_width, neutral_amplitude_mv=neutral_amp,
    )

    t = np.arange(n_samples) / fs
    wander_hz = rng.uniform(0.15, 0.4, N_LEADS)
    phase = rng.uniform(0.0, 2 * np.pi, N_LEADS)
    leads += config.baseline_wander_mv * np.sin(2 * np.pi * wander_hz * t[:, None] + phase)
    leads += rng.normal(0.0, morph.noise_std_mv, leads.shape)

    pid = f"{label.value}_{index:03d}"
    return EcgRecord(pid, label, fs, leads), beats


def generate_synthetic_dataset(config: SyntheticConfig) -> list[EcgRecord]:
    config.validate()
    records = []
    for label in (Label.VT, Label.SVT_A):
        for i in range(config.n_patients_per_class):
            records.append(synthesize_patient(config, label, i)[0])
    return records
