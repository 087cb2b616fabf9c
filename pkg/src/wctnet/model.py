"""Parallel per-lead CNN feature extractors feeding a stacked LSTM classifier head."""

from __future__ import annotations

import os
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ConfigError, FormatError, IoError, ShapeError
from .tensor import Parameter, Tensor

WEIGHT_MAGIC = b"WCTW1"


@dataclass(frozen=True)
class ModelConfig:
    n_leads: int = 12
    segment_len: int = 500
    conv_filters: int = 32
    conv_kernel: int = 16
    conv1_stride: int = 1
    conv2_stride: int = 4
    dropout_rate: float = 0.2
    lstm1_units: int = 128
    lstm2_units: int = 64
    dense1_units: int = 128
    n_classes: int = 2

    def validate(self) -> None:
        for f in fields(self):
            if f.name == "dropout_rate":
                continue
            if getattr(self, f.name) < 1:
                raise ConfigError(f"model {f.name} must be >= 1, got {getattr(self, f.name)}")
        if not 1 <= self.n_leads <= 12:
            raise ConfigError(f"n_leads must be in [1, 12], got {self.n_leads}")
        if not 0 <= self.dropout_rate < 1:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")

    @property
    def feature_len(self) -> int:
        after_conv1 = -(-self.segment_len // self.conv1_stride)
        return -(-after_conv1 // self.conv2_stride)

    def overrides(self) -> dict:
        """Fields that differ from the published architecture."""
        default = ModelConfig()
        return {k: v for k, v in asdict(self).items() if getattr(default, k) != v}


def parameter_schema(config: ModelConfig) -> list[tuple[str, tuple[int, ...], int | None]]:
    """(name, shape, fan_in) for every tensor; fan_in is None for non-weight tensors."""
    K, F = config.conv_kernel, config.conv_filters
    schema: list[tuple[str, tuple[int, ...], int | None]] = []
    for k in range(config.n_leads):
        p = f"lead{k:02d}"
        for block, c_in in (("1", 1), ("2", F)):
            schema += [
                (f"{p}.conv{block}.w", (K, c_in, F), K * c_in),
                (f"{p}.conv{block}.b", (F,), None),
                (f"{p}.bn{block}.gamma", (F,), None),
                (f"{p}.bn{block}.beta", (F,), None),
                (f"{p}.bn{block}.mean", (F,), None),
                (f"{p}.bn{block}.var", (F,), None),
            ]
    d_in = config.n_leads * F
    u1, u2 = config.lstm1_units, config.lstm2_units
    schema += [
        ("lstm1.w", (d_in + u1, 4 * u1), d_in + u1),
        ("lstm1.b", (4 * u1,), None),
        ("lstm2.w", (u1 + u2, 4 * u2), u1 + u2),
        ("lstm2.b", (4 * u2,), None),
        ("dense1.w", (u2, config.dense1_units), u2),
        ("dense1.b", (config.dense1_units,), None),
        ("dense2.w", (config.dense1_units, config.n_classes), config.dense1_units),
        ("dense2.b", (config.n_classes,), None),
    ]
    return schema


def _is_running_stat(name: str) -> bool:
    return name.endswith(".mean") or name.endswith(".var")


class ModelParams:
    """Ordered, named weight set of one model instance."""

    def __init__(self, config: ModelConfig, params: list[Parameter]):
        self.config = config
        self._params = {p.name: p for p in params}
        if len(self._params) != len(params):
            raise ConfigError("parameter names must be unique")

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def trainable(self) -> list[Parameter]:
        return [p for p in self if p.trainable]

    def n_trainable(self) -> int:
        return sum(p.data.size for p in self.trainable())

    def state(self) -> dict[str, np.ndarray]:
        """Copy of every tensor's values."""
        return {name: p.data.copy() for name, p in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self._params.items():
            p.value.data[...] = state[name]

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.config,
            [Parameter(p.name, Tensor(p.data.copy()), p.trainable) for p in self],
        )

    def equals(self, other: "ModelParams") -> bool:
        return self.names() == other.names() and all(
            np.array_equal(self[n].data, other[n].data) for n in self.names()
        )


def build_model(config: ModelConfig | None = None, rng_seed: int = 0) -> ModelParams:
    config = config or ModelConfig()
    config.validate()
    params = []
    for idx, (name, shape, fan_in) in enumerate(parameter_schema(config)):
        if fan_in is not None:
            value = T.he_normal_init(shape, fan_in, rng_seed=[rng_seed, idx])
        elif name.endswith(".gamma") or name.endswith(".var"):
            value = Tensor(np.ones(shape))
        else:
            value = Tensor(np.zeros(shape))
        params.append(Parameter(name, value, trainable=not _is_running_stat(name)))
    return ModelParams(config, params)


# ---------------------------------------------------------------------------
# Forward pass

_LEAD_DROPOUT_ID = 100
_HEAD_DROPOUT_ID = 200


def _key(rng_seed, layer_id: int) -> list[int]:
    base = list(rng_seed) if isinstance(rng_seed, (tuple, list)) else [int(rng_seed)]
    return [base[0], layer_id, *base[1:]]


def _record(trace: dict | None, name: str, t: Tensor) -> None:
    if trace is not None:
        trace[name] = t.shape[1:]


def lead_features(
    params: ModelParams,
    batch: Tensor,
    mode: str = T.INFER,
    rng_seed=0,
    trace: dict | None = None,
) -> list[Tensor]:
    """Per-lead conv/bn/relu x2 + dropout; one [B, L', F] tensor per lead."""
    cfg = params.config
    feats = []
    for k in range(cfg.n_leads):
        p = f"lead{k:02d}"
        h = T.take_channel(batch, k)
        for block, stride in (("1", cfg.conv1_stride), ("2", cfg.conv2_stride)):
            h = T.conv1d(h, params[f"{p}.conv{block}.w"].value, params[f"{p}.conv{block}.b"].value, stride)
            _record(trace if k == 0 else None, f"conv{block}", h)
            h = T.batchnorm(
                h,
                params[f"{p}.bn{block}.gamma"].value,
                params[f"{p}.bn{block}.beta"].value,
                params[f"{p}.bn{block}.mean"].data,
                params[f"{p}.bn{block}.var"].data,
                mode,
            )
            _record(trace if k == 0 else None, f"bn{block}", h)
            h = T.relu(h)
            _record(trace if k == 0 else None, f"relu{block}", h)
        h = T.dropout(h, cfg.dropout_rate, mode, _key(rng_seed, _LEAD_DROPOUT_ID + k))
        _record(trace if k == 0 else None, "dropout1", h)
        feats.append(h)
    return feats


def head(
    params: ModelParams,
    features: Tensor,
    mode: str = T.INFER,
    rng_seed=0,
    trace: dict | None = None,
) -> Tensor:
    """Stacked LSTMs on concatenated lead features, then dense/relu/dropout/dense/softmax."""
    cfg = params.config
    h = T.lstm_layer(features, params["lstm1.w"].value, params["lstm1.b"].value, cfg.lstm1_units, True)
    _record(trace, "lstm1", h)
    h = T.lstm_layer(h, params["lstm2.w"].value, params["lstm2.b"].value, cfg.lstm2_units, True)
    _record(trace, "lstm2", h)
    # sequence reduction: last time step
    h = T.time_step(h, -1)
    _record(trace, "last_step", h)
    h = T.dense(h, params["dense1.w"].value, params["dense1.b"].value)
    _record(trace, "dense1", h)
    h = T.relu(h)
    _record(trace, "relu3", h)
    h = T.dropout(h, cfg.dropout_rate, mode, _key(rng_seed, _HEAD_DROPOUT_ID))
    _record(trace, "dropout2", h)
    h = T.dense(h, params["dense2.w"].value, params["dense2.b"].value)
    _record(trace, "dense2", h)
    out = T.softmax(h)
    _record(trace, "softmax", out)
    return out


def forward(
    params: ModelParams,
    batch,
    mode: str = T.INFER,
    rng_seed=0,
    trace: dict | None = None,
) -> Tensor:
    """Class probabilities [B, n_classes] for a [B, segment_len, n_leads] batch."""
    cfg = params.config
    batch = batch if isinstance(batch, Tensor) else Tensor(batch)
    expected = (cfg.segment_len, cfg.n_leads)
    if batch.data.ndim != 3 or batch.shape[1:] != expected or batch.shape[0] < 1:
        raise ShapeError(f"model input must be [B, {expected[0]}, {expected[1]}], got {batch.shape}")
    feats = lead_features(params, batch, mode, rng_seed, trace)
    x = T.concat_leads(feats, cfg.n_leads)
    _record(trace, "concat", x)
    return head(params, x, mode, rng_seed, trace)


def predict_proba(params: ModelParams, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Inference-mode probabilities for an [N, L, leads] array, evaluated in chunks."""
    if len(x) == 0:
        return np.zeros((0, params.config.n_classes))
    return np.concatenate([
        forward(params, x[i:i + batch_size], T.INFER).data for i in range(0, len(x), batch_size)
    ])


# ---------------------------------------------------------------------------
# Weight file


def save_weights(params: ModelParams, path: str | os.PathLike) -> None:
    """Write every tensor as: name length, name, rank, dims, little-endian float64 values."""
    chunks = [WEIGHT_MAGIC]
    for p in params:
        name = p.name.encode("utf-8")
        arr = np.ascontiguousarray(p.data, dtype="<f8")
        chunks.append(struct.pack("<I", len(name)) + name)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    try:
        Path(path).write_bytes(b"".join(chunks))
    except OSError as exc:
        raise IoError(f"cannot write weights to {path}: {exc.strerror or exc}") from exc


def read_weight_file(path: str | os.PathLike) -> list[tuple[str, np.ndarray]]:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read weights {path}: {exc.strerror or exc}") from exc
    if not buf.startswith(WEIGHT_MAGIC):
        raise FormatError(f"{path}: missing {WEIGHT_MAGIC.decode()} magic")
    pos = len(WEIGHT_MAGIC)
    out = []

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"{path}: truncated after {len(out)} tensors")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    while pos < len(buf):
        (name_len,) = struct.unpack("<I", take(4))
        try:
            name = take(name_len).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"{path}: tensor name is not UTF-8") from None
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        values = np.frombuffer(take(8 * count), dtype="<f8").astype(np.float64).reshape(dims)
        out.append((name, values))
    return out


def load_weights(path: str | os.PathLike, config: ModelConfig | None = None) -> ModelParams:
    """Read a weight file and check it against the schema of ``config``."""
    config = config or ModelConfig()
    config.validate()
    tensors = read_weight_file(path)
    schema = parameter_schema(config)
    for i, (name, shape, _) in enumerate(schema):
        if i >= len(tensors):
            raise FormatError(f"{path}: missing tensor {name}")
        got_name, arr = tensors[i]
        if got_name != name or arr.shape != shape:
            raise FormatError(f"{path}: tensor {got_name} {arr.shape} does not match expected {name} {shape}")
    if len(tensors) > len(schema):
        raise FormatError(f"{path}: unexpected extra tensor {tensors[len(schema)][0]}")
    return ModelParams(
        config,
        [Parameter(name, Tensor(arr.copy()), not _is_running_stat(name)) for name, arr in tensors],
    )
