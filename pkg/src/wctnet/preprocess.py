"""Zero-phase Butterworth band-pass filtering and per-lead z-scoring."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import signal

from .ecgio import EcgRecord
from .errors import ConfigError, DataError


@dataclass(frozen=True)
class FilterSpec:
    low_cut_hz: float = 0.5
    high_cut_hz: float = 140.0
    order: int = 4
    sampling_rate_hz: int = 1000

    def validate(self) -> None:
        if self.order < 1:
            raise ConfigError(f"filter order must be >= 1, got {self.order}")
        nyquist = self.sampling_rate_hz / 2
        if not 0 < self.low_cut_hz < self.high_cut_hz < nyquist:
            raise ConfigError(
                f"need 0 < low ({self.low_cut_hz}) < high ({self.high_cut_hz}) < Nyquist ({nyquist}) Hz"
            )

    def sos(self) -> np.ndarray:
        self.validate()
        return signal.butter(
            self.order,
            [self.low_cut_hz, self.high_cut_hz],
            btype="bandpass",
            output="sos",
            fs=self.sampling_rate_hz,
        )


def bandpass(x: np.ndarray, spec: FilterSpec) -> np.ndarray:
    """Filter along axis 0 forward and backward; columns are independent leads."""
    sos = spec.sos()
    n = x.shape[0]
    if n < 3 * spec.order:
        raise DataError(f"signal of {n} samples is shorter than 3 x filter order ({3 * spec.order})")
    padlen = min(3 * spec.order, n - 1)
    return signal.sosfiltfilt(sos, x, axis=0, padtype="even", padlen=padlen)


def apply_bandpass(record: EcgRecord, spec: FilterSpec | None = None) -> EcgRecord:
    if spec is None:
        spec = FilterSpec(sampling_rate_hz=record.sampling_rate_hz)
    elif spec.sampling_rate_hz != record.sampling_rate_hz:
        raise ConfigError(
            f"filter designed for {spec.sampling_rate_hz} Hz but record {record.patient_id} "
            f"is sampled at {record.sampling_rate_hz} Hz"
        )
    return record.with_leads(bandpass(record.leads, spec))


def zscore(x: np.ndarray, lead_names=None) -> np.ndarray:
    mean = x.mean(axis=0)
    std = x.std(axis=0)  # population convention
    scale = np.maximum(np.abs(x).max(axis=0), 1.0)
    flat = std <= 1e-12 * scale
    if flat.any():
        j = int(np.flatnonzero(flat)[0])
        name = lead_names[j] if lead_names is not None else str(j)
        raise DataError(f"lead {name} has zero variance and cannot be normalized")
    return (x - mean) / std


def normalize_record(record: EcgRecord) -> EcgRecord:
    """Shift and scale every lead to zero mean and unit (population) standard deviation."""
    try:
        leads = zscore(record.leads, record.lead_names)
    except DataError as exc:
        raise DataError(f"record {record.patient_id}: {exc}") from None
    return record.with_leads(leads)


def preprocess_record(record: EcgRecord, spec: FilterSpec | None = None) -> EcgRecord:
    return normalize_record(apply_bandpass(record, spec))
