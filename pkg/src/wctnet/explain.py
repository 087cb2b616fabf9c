"""Shapley attributions for lead-level and sample-level explanations.

A coalition game maps a subset of players to a model score. Players absent
from the coalition are replaced by a baseline signal, and the score is the
probability of the class the model predicts for the unmasked segment.

Games may expose ``evaluate_masks(masks)`` taking integer bit masks
(bit i set = player i present); otherwise they are called with a sorted
tuple of player indices, one coalition at a time.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np

from . import tensor as T
from .ecgio import LEAD_NAMES
from .errors import ConfigError, DataError, IoError, ShapeError
from .model import ModelParams, forward, head, lead_features
from .segment import Segment, SegmentSet

MAX_EXACT_PLAYERS = 20

CoalitionValueFn = Callable[[tuple[int, ...]], float]


@dataclass
class ShapleyReport:
    players: list
    values: np.ndarray
    baseline_value: float
    full_value: float
    method: str
    n_permutations: int = 0
    seed: int | None = None
    std_errors: np.ndarray | None = None
    target_class: int | None = None
    sample_ranges: list[tuple[int, int]] | None = None

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if len(self.values) != len(self.players):
            raise ShapeError("one value per player is required")
        if self.method == "exact" and len(self.players) > MAX_EXACT_PLAYERS:
            raise ConfigError(f"exact Shapley supports at most {MAX_EXACT_PLAYERS} players")

    @property
    def efficiency_residual(self) -> float:
        return float(self.values.sum() - (self.full_value - self.baseline_value))


@dataclass
class AttributionMask:
    threshold: float
    selected: list[int] = field(default_factory=list)


def _mask_to_tuple(mask: int, n: int) -> tuple[int, ...]:
    return tuple(i for i in range(n) if (mask >> i) & 1)


def _evaluate(value_fn, masks: Sequence[int], n: int) -> np.ndarray:
    if hasattr(value_fn, "evaluate_masks"):
        out = np.asarray(value_fn.evaluate_masks(list(masks)), dtype=np.float64)
    else:
        out = np.array([float(value_fn(_mask_to_tuple(int(m), n))) for m in masks])
    if out.shape != (len(masks),):
        raise ShapeError("coalition game returned the wrong number of values")
    return out


def exact_shapley(value_fn: CoalitionValueFn, n_players: int, players: Sequence | None = None) -> ShapleyReport:
    """Shapley values by enumerating all 2**n coalitions."""
    if n_players > MAX_EXACT_PLAYERS:
        raise ConfigError(f"exact Shapley over {n_players} players exceeds the limit of {MAX_EXACT_PLAYERS}")
    if n_players < 1:
        raise ConfigError("need at least one player")
    n = n_players
    masks = np.arange(1 << n, dtype=np.int64)
    v = _evaluate(value_fn, masks, n)
    sizes = np.zeros(masks.size, dtype=np.int64)
    for b in range(n):
        sizes += (masks >> b) & 1
    fact = math.factorial
    weight = np.array([fact(s) * fact(n - s - 1) / fact(n) for s in range(n)])
    phi = np.empty(n)
    for i in range(n):
        bit = np.int64(1) << i
        without = masks[(masks & bit) == 0]
        phi[i] = np.sum(weight[sizes[without]] * (v[without | bit] - v[without]))
    return ShapleyReport(
        players=list(players) if players is not None else list(range(n)),
        values=phi,
        baseline_value=float(v[0]),
        full_value=float(v[-1]),
        method="exact",
    )


def mc_shapley(
    value_fn: CoalitionValueFn,
    n_players: int,
    n_permutations: int,
    seed: int = 0,
    players: Sequence | None = None,
) -> ShapleyReport:
    """Permutation-sampling estimate of Shapley values.

    Each sampled permutation contributes every player's marginal gain when
    it joins the players preceding it; per-permutation gains telescope to
    v(N) - v(empty), so the estimate is efficient for any budget.
    """
    if n_permutations < 1:
        raise ConfigError("n_permutations must be >= 1")
    if n_players < 1:
        raise ConfigError("need at least one player")
    n = n_players
    rng = np.random.default_rng(seed)
    perms = [rng.permutation(n) for _ in range(n_permutations)]

    prefix_masks: list[list[int]] = []
    unique: dict[int, int] = {0: 0}
    for perm in perms:
        mask = 0
        row = [0]
        for j in perm:
            mask |= 1 << int(j)
            row.append(mask)
            unique.setdefault(mask, len(unique))
        prefix_masks.append(row)
    keys = list(unique)
    values = _evaluate(value_fn, keys, n)
    lookup = {k: values[i] for i, k in enumerate(keys)}

    gains = np.empty((n_permutations, n))
    for p, (perm, row) in enumerate(zip(perms, prefix_masks)):
        for pos, j in enumerate(perm):
            gains[p, j] = lookup[row[pos + 1]] - lookup[row[pos]]
    phi = gains.mean(axis=0)
    se = gains.std(axis=0, ddof=1) / math.sqrt(n_permutations) if n_permutations > 1 else np.full(n, np.inf)
    full_mask = (1 << n) - 1
    return ShapleyReport(
        players=list(players) if players is not None else list(range(n)),
        values=phi,
        baseline_value=float(lookup[0]),
        full_value=float(lookup[full_mask]),
        method="monte_carlo",
        n_permutations=n_permutations,
        seed=seed,
        std_errors=se,
    )


# ---------------------------------------------------------------------------
# Model games


def train_mean_baseline(segments: SegmentSet) -> np.ndarray:
    x, _ = segments.arrays()
    if len(x) == 0:
        raise DataError("cannot build a mean baseline from an empty segment set")
    return x.mean(axis=0)


def _resolve_baseline(baseline, shape: tuple[int, int]) -> np.ndarray:
    if isinstance(baseline, str):
        if baseline == "zeros":
            return np.zeros(shape)
        raise ConfigError(f"baseline must be 'zeros' or an array (use train_mean_baseline), got {baseline!r}")
    arr = np.asarray(baseline, dtype=np.float64)
    if arr.shape != shape:
        raise ShapeError(f"baseline must have shape {shape}, got {arr.shape}")
    return arr


def _segment_array(segment, shape: tuple[int, int]) -> np.ndarray:
    x = segment.samples if isinstance(segment, Segment) else np.asarray(segment, dtype=np.float64)
    if x.shape != shape:
        raise ShapeError(f"segment must have shape {shape}, got {x.shape}")
    return x


def _lead_maps(params: ModelParams, x: np.ndarray) -> np.ndarray:
    """Inference-mode per-lead feature maps stacked as [n_leads, L', F]."""
    feats = lead_features(params, T.Tensor(x[None]), T.INFER)
    return np.stack([f.data[0] for f in feats])


class _LeadGame:
    """Coalitions of leads; absent leads see the baseline signal.

    In inference mode each lead's feature extractor depends only on that
    lead, so features are computed once for the segment and once for the
    baseline and then mixed per coalition before the shared head.
    """

    def __init__(self, params: ModelParams, x: np.ndarray, base: np.ndarray, target: int, batch_size: int):
        self.params = params
        self.fx = _lead_maps(params, x)
        self.fb = _lead_maps(params, base)
        self.target = target
        self.batch_size = batch_size

    def evaluate_masks(self, masks: Sequence[int]) -> np.ndarray:
        n_leads = self.fx.shape[0]
        masks = np.asarray(masks, dtype=np.int64)
        out = np.empty(masks.size)
        for start in range(0, masks.size, self.batch_size):
            chunk = masks[start:start + self.batch_size]
            present = ((chunk[:, None] >> np.arange(n_leads)) & 1).astype(bool)  # [b, n_leads]
            mixed = np.where(present[:, :, None, None], self.fx[None], self.fb[None])  # [b, leads, L', F]
            feats = mixed.transpose(0, 2, 1, 3).reshape(chunk.size, self.fx.shape[1], -1)
            probs = head(self.params, T.Tensor(feats), T.INFER).data
            out[start:start + chunk.size] = probs[:, self.target]
        return out


class _SampleGame:
    """Coalitions of contiguous sample groups within one lead."""

    def __init__(self, params, x, base, lead, n_groups, target, batch_size):
        self.params = params
        self.x = x
        self.base = base
        self.lead = lead
        self.n_groups = n_groups
        self.group = x.shape[0] // n_groups
        self.target = target
        self.batch_size = batch_size
        self.fixed = _lead_maps(params, x)

    def evaluate_masks(self, masks: Sequence[int]) -> np.ndarray:
        out = np.empty(len(masks))
        g = self.group
        for start in range(0, len(masks), self.batch_size):
            chunk = masks[start:start + self.batch_size]
            signals = np.repeat(self.x[None], len(chunk), axis=0)
            for r, mask in enumerate(chunk):
                for j in range(self.n_groups):
                    if not (mask >> j) & 1:
                        signals[r, j * g:(j + 1) * g, self.lead] = self.base[j * g:(j + 1) * g, self.lead]
            feats = lead_features(self.params, T.Tensor(signals), T.INFER)
            lead_map = feats[self.lead].data
            mixed = np.repeat(self.fixed[None], len(chunk), axis=0)
            mixed[:, self.lead] = lead_map
            concat = mixed.transpose(0, 2, 1, 3).reshape(len(chunk), self.fixed.shape[1], -1)
            probs = head(self.params, T.Tensor(concat), T.INFER).data
            out[start:start + len(chunk)] = probs[:, self.target]
        return out


def _predicted_class(params: ModelParams, x: np.ndarray) -> int:
    return int(np.argmax(forward(params, x[None], T.INFER).data[0]))


def lead_attribution(
    params: ModelParams,
    segment: Segment | np.ndarray,
    baseline="zeros",
    batch_size: int = 512,
) -> ShapleyReport:
    """Exact Shapley values of the model's leads for one segment."""
    cfg = params.config
    shape = (cfg.segment_len, cfg.n_leads)
    x = _segment_array(segment, shape)
    base = _resolve_baseline(baseline, shape)
    target = _predicted_class(params, x)
    game = _LeadGame(params, x, base, target, batch_size)
    report = exact_shapley(game, cfg.n_leads, players=list(LEAD_NAMES[: cfg.n_leads]))
    report.target_class = target
    return report


def sample_attribution(
    params: ModelParams,
    segment: Segment | np.ndarray,
    lead_index: int,
    n_groups: int,
    n_permutations: int,
    seed: int = 0,
    baseline="zeros",
    batch_size: int = 256,
    exact: bool = False,
) -> ShapleyReport:
    """Shapley values of contiguous sample groups within one lead.

    Monte-Carlo by default; ``exact=True`` enumerates all coalitions
    instead (only feasible for a handful of groups).
    """
    cfg = params.config
    shape = (cfg.segment_len, cfg.n_leads)
    if n_groups < 1 or cfg.segment_len % n_groups:
        raise ConfigError(f"n_groups={n_groups} must divide the segment length {cfg.segment_len}")
    if not 0 <= lead_index < cfg.n_leads:
        raise ConfigError(f"lead index {lead_index} out of range")
    x = _segment_array(segment, shape)
    base = _resolve_baseline(baseline, shape)
    target = _predicted_class(params, x)
    game = _SampleGame(params, x, base, lead_index, n_groups, target, batch_size)
    g = cfg.segment_len // n_groups
    ranges = [(j * g, (j + 1) * g) for j in range(n_groups)]
    players = [f"{LEAD_NAMES[lead_index]}[{a}:{b}]" for a, b in ranges]
    if exact:
        report = exact_shapley(game, n_groups, players=players)
    else:
        report = mc_shapley(game, n_groups, n_permutations, seed, players=players)
    report.target_class = target
    report.sample_ranges = ranges
    return report


# ---------------------------------------------------------------------------
# Thresholding and aggregation


def threshold_mask(report: ShapleyReport) -> AttributionMask:
    """Select players whose value is at least mean + sample std of all values."""
    values = np.asarray(report.values, dtype=np.float64)
    if values.size < 2:
        raise DataError("thresholding needs at least 2 values")
    if np.all(values == values[0]):
        return AttributionMask(float(values[0]), list(range(values.size)))
    threshold = float(values.mean() + values.std(ddof=1))
    # absorb rounding so ties at the threshold are stable under a common shift
    tol = 1e-12 * max(1.0, float(np.abs(values).max()))
    selected = [i for i, v in enumerate(values) if v >= threshold - tol]
    return AttributionMask(threshold, selected)


class LeadScore(NamedTuple):
    lead: str
    score: float
    tied: bool


def global_lead_importance(reports: Sequence[ShapleyReport]) -> list[LeadScore]:
    """Mean absolute lead attribution over reports, highest first."""
    if not reports:
        raise DataError("no reports to aggregate")
    players = list(reports[0].players)
    canonical = list(LEAD_NAMES[: len(players)])
    for r in reports:
        if list(r.players) != canonical:
            raise DataError(f"reports must list leads in canonical order {canonical}, got {list(r.players)}")
    scores = np.mean([np.abs(r.values) for r in reports], axis=0)
    order = sorted(range(len(players)), key=lambda i: (-scores[i], i))
    return [
        LeadScore(players[i], float(scores[i]), bool(np.sum(scores == scores[i]) > 1))
        for i in order
    ]


def write_shapley_csv(report: ShapleyReport, path: str | os.PathLike, mask: AttributionMask | None = None) -> None:
    mask = mask or threshold_mask(report)
    chosen = set(mask.selected)
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["player", "value", "selected"])
            for i, (player, value) in enumerate(zip(report.players, report.values)):
                w.writerow([player, repr(float(value)), int(i in chosen)])
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc.strerror or exc}") from exc


def write_lead_importance_csv(ranking: Sequence[LeadScore], path: str | os.PathLike) -> None:
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["rank", "lead", "mean_abs_shapley", "tied"])
            for rank, s in enumerate(ranking, 1):
                w.writerow([rank, s.lead, repr(s.score), int(s.tied)])
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc.strerror or exc}") from exc
