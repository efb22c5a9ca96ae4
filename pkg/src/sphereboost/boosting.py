"""Sample-level boosting state: weight table, hardness statistics, scale adaptation.

Between rounds, every sample's weight is multiplied by p^(-alpha) where p is
the previous model's softmax confidence on it, so hard samples gain weight.
During a round, a running mean/std of the weights converts each weight into
a normalized hardness score d_hat, which shrinks or grows that sample's
logit scale within [0.67s, 1.33s].
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ContractError, CoverageError, DataFormatError
from .margin import PROB_FLOOR

SCALE_CLIP = 0.33

WEIGHT_META_VERSION = 1


@dataclass
class WeightTable:
    """Per-sample boosting weights for one round, keyed by stable sample id."""

    round_index: int
    sample_ids: np.ndarray   # (N,) int64
    weights: np.ndarray      # (N,) float64, all > 0
    alpha: float

    def __post_init__(self):
        self.sample_ids = np.asarray(self.sample_ids, dtype=np.int64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.sample_ids.shape != self.weights.shape or self.sample_ids.ndim != 1:
            raise ContractError("sample_ids and weights must be matching 1-d arrays")
        if len(np.unique(self.sample_ids)) != len(self.sample_ids):
            raise ContractError("sample ids must be unique")
        if np.any(self.weights <= 0) or not np.all(np.isfinite(self.weights)):
            raise ContractError("weights must be positive and finite")
        if self.alpha < 0:
            raise ContractError(f"alpha must be >= 0, got {self.alpha}")

    def __len__(self) -> int:
        return len(self.sample_ids)

    def lookup(self, sample_ids: np.ndarray) -> np.ndarray:
        """Weights for the given ids (CoverageError on unknown ids)."""
        order = np.argsort(self.sample_ids)
        pos = np.searchsorted(self.sample_ids, sample_ids, sorter=order)
        if np.any(pos >= len(self)) or np.any(
            self.sample_ids[order[np.minimum(pos, len(self) - 1)]] != sample_ids
        ):
            raise CoverageError("unknown sample id in lookup")
        return self.weights[order[pos]]


def init_table(num_samples: int, alpha: float,
               sample_ids: np.ndarray | None = None) -> WeightTable:
    """Round-1 table: every weight exactly 1."""
    if num_samples < 1:
        raise ContractError(f"num_samples must be >= 1, got {num_samples}")
    ids = np.arange(num_samples, dtype=np.int64) if sample_ids is None \
        else np.asarray(sample_ids, dtype=np.int64)
    if len(ids) != num_samples:
        raise ContractError("sample_ids length must equal num_samples")
    return WeightTable(round_index=1, sample_ids=ids,
                       weights=np.ones(num_samples), alpha=alpha)


def update_weights(table: WeightTable, probs) -> WeightTable:
    """Next round's table: weight <- weight * p^(-alpha).

    ``probs`` is either an array aligned with table.sample_ids or a mapping
    sample_id -> p.  Every table entry must be covered and every p must lie
    in [1e-12, 1].
    """
    if isinstance(probs, dict):
        missing = [int(i) for i in table.sample_ids if int(i) not in probs]
        if missing:
            raise CoverageError(f"probs missing sample ids (first: {missing[0]})")
        p = np.array([probs[int(i)] for i in table.sample_ids], dtype=np.float64)
    else:
        p = np.asarray(probs, dtype=np.float64)
        if p.shape != table.weights.shape:
            raise CoverageError(
                f"probs shape {p.shape} does not cover the {len(table)} table entries"
            )
    if np.any(p < PROB_FLOOR) or np.any(p > 1.0):
        raise ContractError("probabilities must lie in [1e-12, 1]")
    return WeightTable(
        round_index=table.round_index + 1,
        sample_ids=table.sample_ids.copy(),
        weights=table.weights * p ** (-table.alpha),
        alpha=table.alpha,
    )


def renormalize(table: WeightTable) -> WeightTable:
    """Optional classical-boosting rescale so the weights sum to N."""
    factor = len(table) / float(table.weights.sum())
    return replace(table, sample_ids=table.sample_ids.copy(),
                   weights=table.weights * factor)


@dataclass(frozen=True)
class HardnessStats:
    """Running mean/std of seen weights plus the concentration factor."""

    running_mean: float = 1.0
    running_std: float = 0.0
    ema_momentum: float = 0.99
    lam: float = 1.0
    epsilon: float = 1e-6

    def __post_init__(self):
        if not 0.0 <= self.ema_momentum < 1.0:
            raise ContractError(f"ema_momentum must be in [0, 1), got {self.ema_momentum}")
        if not self.lam > 0:
            raise ContractError(f"lambda must be > 0, got {self.lam}")
        if not (math.isfinite(self.running_mean) and math.isfinite(self.running_std)
                and self.running_std >= 0):
            raise ContractError("running statistics must be finite, std >= 0")


def stats_from_weights(weights: np.ndarray, ema_momentum: float, lam: float,
                       epsilon: float = 1e-6) -> HardnessStats:
    """Seed the running statistics from a full weight table (population std).

    Starting a round from the table's own mean/std avoids a long warm-up in
    which the std floor would saturate the scale clip on every batch.
    """
    w = np.asarray(weights, dtype=np.float64)
    return HardnessStats(running_mean=float(w.mean()), running_std=float(w.std()),
                         ema_momentum=ema_momentum, lam=lam, epsilon=epsilon)


def update_running_stats(stats: HardnessStats, batch_weights: np.ndarray) -> HardnessStats:
    """EMA toward the batch mean and batch population std.

    Written in increment form a + (1-m)*(b - a), which equals
    m*a + (1-m)*b but is exact at the fixed point b == a (round-1
    neutrality must be bit-exact).
    """
    w = np.asarray(batch_weights, dtype=np.float64)
    if w.size == 0:
        raise ContractError("batch_weights must be non-empty")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ContractError("batch weights must be non-negative and finite")
    keep = 1.0 - stats.ema_momentum
    mean = stats.running_mean + keep * (float(w.mean()) - stats.running_mean)
    std = stats.running_std + keep * (float(w.std()) - stats.running_std)
    return replace(stats, running_mean=mean, running_std=std)


def normalize_hardness(weight, stats: HardnessStats):
    """d_hat = lambda * (d - mean) / max(std, epsilon); scalar or vectorized."""
    denom = max(stats.running_std, stats.epsilon)
    return (weight - stats.running_mean) / denom * stats.lam


def adapt_scale(base_scale: float, d_hat):
    """s' = s - clip(d_hat, -0.33, 0.33) * s, so s' covers [0.67s, 1.33s]."""
    if not base_scale > 0:
        raise ContractError(f"base_scale must be > 0, got {base_scale}")
    return base_scale - np.clip(d_hat, -SCALE_CLIP, SCALE_CLIP) * base_scale


def save_weight_table(path, table: WeightTable, lam: float, ema_momentum: float) -> None:
    """CSV `sample_id,weight` (17 significant digits) plus a JSON sidecar
    with the round metadata."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "weight"])
        for sid, w in zip(table.sample_ids, table.weights):
            writer.writerow([int(sid), format(float(w), ".17g")])
    meta = {
        "version": WEIGHT_META_VERSION,
        "round": table.round_index,
        "alpha": table.alpha,
        "lambda": lam,
        "ema_momentum": ema_momentum,
    }
    Path(sidecar_path(path)).write_text(json.dumps(meta, sort_keys=True) + "\n")


def sidecar_path(csv_path) -> Path:
    return Path(str(csv_path) + ".meta.json")


def load_weight_table(path) -> tuple[WeightTable, dict]:
    """Inverse of save_weight_table; bit-exact weight round-trip."""
    path = Path(path)
    meta_file = sidecar_path(path)
    if not meta_file.exists():
        raise DataFormatError(f"missing weight-table sidecar {meta_file}")
    meta = json.loads(meta_file.read_text())
    if meta.get("version") != WEIGHT_META_VERSION:
        raise DataFormatError(
            f"unsupported weight-table version {meta.get('version')!r}"
        )
    ids, weights = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["sample_id", "weight"]:
            raise DataFormatError(f"bad weight-table header {header!r} in {path}")
        for row in reader:
            ids.append(int(row[0]))
            weights.append(float(row[1]))
    table = WeightTable(
        round_index=int(meta["round"]),
        sample_ids=np.array(ids, dtype=np.int64),
        weights=np.array(weights, dtype=np.float64),
        alpha=float(meta["alpha"]),
    )
    return table, meta
