"""Angular-margin softmax head with per-sample loss weights and scales.

The positive-class logit is ``scale * cos(m_s*theta + m_a) - m_c`` (theta the
angle between the sample and its own class center); every negative logit is
``scale * cos(theta_j)``.  The head exposes the per-sample softmax
probability (the hardness signal driving the boosting weights), the weighted
negative-log-likelihood, and its analytic backward pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ConfigError, ContractError, DomainError, NumericError, ShapeError

PROB_FLOOR = 1e-12
LOG_PROB_FLOOR = math.log(PROB_FLOOR)

THETA_SLACK = 1e-9
UNIT_NORM_TOL = 1e-6

# (m_s, m_a, m_c): multiplicative angle, additive angle (radians), cosine offset.
# Literature-standard margins.  The adaface-like preset is the norm-free
# stand-in: with feature-norm adaptivity switched off, that loss reduces to
# a pure cosine margin at its standard m=0.4.
MARGIN_PRESETS: dict[str, tuple[float, float, float]] = {
    "cosface": (1.0, 0.0, 0.35),
    "arcface": (1.0, 0.5, 0.0),
    "adaface-like": (1.0, 0.0, 0.4),
}

DEFAULT_BASE_SCALE = 30.0


@dataclass(frozen=True)
class MarginParams:
    """Margin tuple plus the base logit scale.

    ``theta_max`` is the operating range of the positive-class angle used to
    validate the multiplicative margin: when m_s > 1 the transformed angle
    m_s*theta + m_a must stay within [0, pi] across [0, theta_max].
    """

    m_s: float = 1.0
    m_a: float = 0.0
    m_c: float = 0.0
    base_scale: float = DEFAULT_BASE_SCALE
    theta_max: float = math.pi

    def __post_init__(self):
        if self.m_s < 0 or self.m_a < 0 or self.m_c < 0:
            raise ConfigError(
                f"margins must be >= 0, got m_s={self.m_s} m_a={self.m_a} m_c={self.m_c}"
            )
        if not self.base_scale > 0:
            raise ConfigError(f"margin.base_scale must be > 0, got {self.base_scale}")
        if not 0 < self.theta_max <= math.pi:
            raise ConfigError(f"margin.theta_max must be in (0, pi], got {self.theta_max}")
        if self.m_s > 1.0 and self.m_s * self.theta_max + self.m_a > math.pi + THETA_SLACK:
            raise ConfigError(
                f"m_s={self.m_s} with m_a={self.m_a} pushes m_s*theta+m_a past pi "
                f"over theta in [0, {self.theta_max:.4f}]; shrink theta_max or the margins"
            )

    @classmethod
    def preset(cls, name: str, base_scale: float = DEFAULT_BASE_SCALE) -> "MarginParams":
        try:
            m_s, m_a, m_c = MARGIN_PRESETS[name]
        except KeyError:
            raise ConfigError(
                f"unknown margin preset {name!r}; known: {sorted(MARGIN_PRESETS)}"
            ) from None
        return cls(m_s=m_s, m_a=m_a, m_c=m_c, base_scale=base_scale)


@dataclass
class LogitRow:
    """One sample's per-class logits; the labelled entry used the margin branch."""

    logits: np.ndarray
    label: int
    applied_scale: float


@dataclass
class LogitBatch:
    """Batched logit rows plus the forward cache the backward pass needs."""

    logits: np.ndarray       # (B, C)
    labels: np.ndarray       # (B,) int64
    scales: np.ndarray       # (B,) applied per-sample scales
    cos: np.ndarray          # (B, C) clamped cosine matrix
    probs: np.ndarray        # (B, C) softmax rows
    logp_pos: np.ndarray     # (B,) unclamped log-probability of the label

    def __len__(self) -> int:
        return self.logits.shape[0]

    def row(self, i: int) -> LogitRow:
        return LogitRow(self.logits[i].copy(), int(self.labels[i]), float(self.scales[i]))

    def rows(self) -> list[LogitRow]:
        return [self.row(i) for i in range(len(self))]


def margin_logit(theta: float, params: MarginParams, scale: float,
                 is_positive: bool) -> float:
    """Scalar combined-margin logit for one (angle, class) pair."""
    if not -THETA_SLACK <= theta <= math.pi + THETA_SLACK:
        raise DomainError(f"theta must lie in [0, pi], got {theta}")
    if not scale > 0:
        raise ContractError(f"scale must be > 0, got {scale}")
    if is_positive:
        return scale * math.cos(params.m_s * theta + params.m_a) - params.m_c
    return scale * math.cos(theta)


def _check_unit(name: str, m: np.ndarray) -> None:
    norms = np.linalg.norm(m, axis=-1)
    off = np.abs(norms - 1.0)
    if np.any(off > UNIT_NORM_TOL):
        bad = int(np.argmax(off))
        raise ContractError(
            f"{name} row {bad} has norm {norms[bad]:.8f}; unit norm required"
        )


def forward_logits(features: np.ndarray, centers: np.ndarray, labels: np.ndarray,
                   params: MarginParams, per_sample_scale: np.ndarray) -> LogitBatch:
    """Margin logits for a batch of unit features against unit centers.

    theta_{j,i} = arccos(clamp(<x_i, w_j>, -1, 1)); the labelled class gets
    the margin branch at that sample's scale, every other class gets
    scale * cos(theta).
    """
    features = np.ascontiguousarray(features, dtype=np.float64)
    centers = np.ascontiguousarray(centers, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    scales = np.asarray(per_sample_scale, dtype=np.float64)
    if features.ndim != 2 or centers.ndim != 2 or features.shape[1] != centers.shape[1]:
        raise ShapeError(
            f"features {features.shape} and centers {centers.shape} do not align"
        )
    if labels.shape != (features.shape[0],) or scales.shape != (features.shape[0],):
        raise ShapeError("labels and per_sample_scale must have one entry per feature row")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= centers.shape[0]:
        raise ContractError("labels must index center rows")
    if np.any(scales <= 0):
        raise ContractError("per_sample_scale entries must be > 0")
    _check_unit("features", features)
    _check_unit("centers", centers)

    cos = np.clip(features @ centers.T, -1.0, 1.0)
    logits, probs, logp_pos = kernels.margin_head_forward(
        cos, labels, scales, params.m_s, params.m_a, params.m_c
    )
    return LogitBatch(logits=logits, labels=labels, scales=scales, cos=cos,
                      probs=probs, logp_pos=logp_pos)


def softmax_prob(row: LogitRow) -> float:
    """Softmax probability of the labelled class, clamped to [1e-12, 1]."""
    logits = np.asarray(row.logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise NumericError("logits must be finite")
    shifted = logits - logits.max()
    p = math.exp(shifted[row.label]) / np.sum(np.exp(shifted))
    return min(max(p, PROB_FLOOR), 1.0)


def softmax_probs(batch: LogitBatch) -> np.ndarray:
    """Per-sample positive-class probabilities, clamped to [1e-12, 1]."""
    rows = np.arange(len(batch))
    return np.clip(batch.probs[rows, batch.labels], PROB_FLOOR, 1.0)


def weighted_loss(batch: LogitBatch, weights: np.ndarray) -> float:
    """L = -(1/N) * sum_i d_i * log p_i, with p clamped at the floor."""
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (len(batch),):
        raise ShapeError("weights must have one entry per batch row")
    logp = np.maximum(batch.logp_pos, LOG_PROB_FLOOR)
    return float(-np.mean(weights * logp))


def loss_backward(batch: LogitBatch, weights: np.ndarray, features: np.ndarray,
                  centers: np.ndarray, params: MarginParams) -> tuple[np.ndarray, np.ndarray]:
    """Analytic gradients of weighted_loss w.r.t. unit features and unit centers."""
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (len(batch),):
        raise ShapeError("weights must have one entry per batch row")
    grad_cos = kernels.margin_head_backward(
        batch.cos, batch.probs, batch.labels, batch.scales, weights,
        params.m_s, params.m_a, params.m_c,
        1.0 / len(batch), batch.logp_pos, LOG_PROB_FLOOR,
    )
    grad_features = grad_cos @ centers
    grad_centers = grad_cos.T @ features
    return grad_features, grad_centers


def approx_denominator(pos_logit: float, num_classes: int) -> float:
    """Converged-negatives approximation of the softmax denominator:
    exp(pos_logit) + C - 1 (all negative cosines taken as zero)."""
    if num_classes < 1:
        raise ContractError(f"num_classes must be >= 1, got {num_classes}")
    return math.exp(pos_logit) + num_classes - 1


def effective_margin_decomposition(weight: float,
                                   params: MarginParams) -> tuple[float, float]:
    """A loss weight d acts on the positive logit as a rescaled head:
    exp(f)^d = exp(d*s*cos(m_s*theta+m_a) - d*m_c).  Returns (d*s, d*m_c)."""
    if not weight > 0:
        raise ContractError(f"weight must be > 0, got {weight}")
    return weight * params.base_scale, weight * params.m_c


def orthogonal_negatives_prob(theta: float, scale: float, num_classes: int,
                              params: MarginParams | None = None) -> float:
    """Positive-class probability when every negative center is orthogonal.

    Builds the full C-class logit row (one margin-branch entry at the given
    angle, C-1 zeros) and runs it through the real softmax path, so the
    denominator is an exact summation.
    """
    if num_classes < 2:
        raise ContractError("need at least one negative class")
    params = params or MarginParams(m_s=1.0, m_a=0.0, m_c=0.0, base_scale=scale)
    logits = np.zeros(num_classes)
    logits[0] = margin_logit(theta, params, scale, is_positive=True)
    return softmax_prob(LogitRow(logits=logits, label=0, applied_scale=scale))
