"""Ensemble match scoring and open-set metrics.

A pair's match score is the combination-weighted sum of per-model cosines
between unit embeddings.  Verification reports accuracy at the balanced-
optimal threshold and TAR at fixed FAR targets; identification reports
closed-set rank-k accuracy against a gallery.  Both are stratified by the
generation tier: a pair counts as hard when either member is hard, a probe
carries its own tier.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import SynthDataset, TIER_EASY
from .errors import ContractError, SchemaError
from .model import EmbeddingModel, embed_batch

FAR_TARGETS = (1e-3, 1e-2, 1e-1)
RANKS = (1, 5, 20)

REPORT_VERSION = 1

STRATA = ("overall", "easy", "hard")


@dataclass
class Ensemble:
    """Ordered trained models with one combination weight each."""

    models: list[EmbeddingModel]
    betas: tuple[float, ...]

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if len(self.models) != len(self.betas) or not self.models:
            raise ContractError(
                f"need one beta per model and at least one model, got "
                f"{len(self.models)} models / {len(self.betas)} betas"
            )
        if not all(np.isfinite(self.betas)):
            raise ContractError("betas must be finite")

    def __len__(self) -> int:
        return len(self.models)


def ensemble_score(sample_a: np.ndarray, sample_b: np.ndarray,
                   ensemble: Ensemble) -> float:
    """Sum over models of beta_k * cos(embed_k(a), embed_k(b))."""
    a = np.asarray(sample_a, dtype=np.float64)[None, :]
    b = np.asarray(sample_b, dtype=np.float64)[None, :]
    total = 0.0
    for beta, model in zip(ensemble.betas, ensemble.models):
        ea = embed_batch(model, a)[0]
        eb = embed_batch(model, b)[0]
        total += beta * float(ea @ eb)
    return total


def pair_scores(ensemble: Ensemble, x_a: np.ndarray, x_b: np.ndarray) -> np.ndarray:
    """Batched ensemble_score over aligned rows of x_a and x_b."""
    scores = np.zeros(len(x_a))
    for beta, model in zip(ensemble.betas, ensemble.models):
        ea = embed_batch(model, x_a)
        eb = embed_batch(model, x_b)
        scores += beta * np.sum(ea * eb, axis=1)
    return scores


def cross_scores(ensemble: Ensemble, x_rows: np.ndarray, x_cols: np.ndarray) -> np.ndarray:
    """(len(x_rows), len(x_cols)) matrix of ensemble scores."""
    scores = np.zeros((len(x_rows), len(x_cols)))
    for beta, model in zip(ensemble.betas, ensemble.models):
        er = embed_batch(model, x_rows)
        ec = embed_batch(model, x_cols)
        scores += beta * (er @ ec.T)
    return scores


# ---------------------------------------------------------------------------
# Verification (1:1)

@dataclass
class PairBatch:
    """Materialized verification pairs: inputs, genuine flags, hardness tags."""

    x_a: np.ndarray
    x_b: np.ndarray
    same: np.ndarray      # bool
    hard: np.ndarray      # bool: True when either member is hard tier


@dataclass
class VerificationMetrics:
    accuracy: float | None
    tar_at_far: dict[float, float] | None
    genuine_pairs: int
    impostor_pairs: int


def roc_points(genuine: np.ndarray, impostor: np.ndarray
               ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Threshold sweep over all distinct scores plus +-inf.

    Accept rule: score >= threshold (ties accept).  Returns ascending
    thresholds with the FAR and TAR at each.
    """
    genuine = np.asarray(genuine, dtype=np.float64)
    impostor = np.asarray(impostor, dtype=np.float64)
    thr = np.unique(np.concatenate([genuine, impostor]))
    thr = np.concatenate([[-np.inf], thr, [np.inf]])
    g_sorted = np.sort(genuine)
    i_sorted = np.sort(impostor)
    tar = (len(genuine) - np.searchsorted(g_sorted, thr, side="left")) / len(genuine)
    far = (len(impostor) - np.searchsorted(i_sorted, thr, side="left")) / len(impostor)
    return thr, far, tar


def _verification_metrics(genuine: np.ndarray, impostor: np.ndarray) -> VerificationMetrics:
    if len(genuine) == 0 or len(impostor) == 0:
        return VerificationMetrics(accuracy=None, tar_at_far=None,
                                   genuine_pairs=len(genuine), impostor_pairs=len(impostor))
    thr, far, tar = roc_points(genuine, impostor)
    # TAR@FAR: the most permissive (smallest) threshold whose FAR meets the
    # target, i.e. max TAR subject to FAR <= target.
    tar_at_far = {}
    for target in FAR_TARGETS:
        idx = int(np.argmax(far <= target))  # far is non-increasing over thr
        tar_at_far[target] = float(tar[idx])
    balanced = (tar + (1.0 - far)) / 2.0
    best = int(np.argmax(balanced))  # ties resolve to the smallest threshold
    n_g, n_i = len(genuine), len(impostor)
    accuracy = (tar[best] * n_g + (1.0 - far[best]) * n_i) / (n_g + n_i)
    return VerificationMetrics(accuracy=float(accuracy), tar_at_far=tar_at_far,
                               genuine_pairs=n_g, impostor_pairs=n_i)


def verification_eval(pairs: PairBatch, ensemble: Ensemble
                      ) -> dict[str, VerificationMetrics]:
    """Stratified verification metrics (overall / easy / hard)."""
    if len(pairs.x_a) == 0:
        raise ContractError("verification needs at least one pair")
    if not pairs.same.any() or pairs.same.all():
        raise ContractError(
            "verification needs both genuine and impostor pairs; "
            f"got {int(pairs.same.sum())} genuine of {len(pairs.same)}"
        )
    scores = pair_scores(ensemble, pairs.x_a, pairs.x_b)
    out: dict[str, VerificationMetrics] = {}
    masks = {
        "overall": np.ones(len(scores), dtype=bool),
        "easy": ~pairs.hard,
        "hard": pairs.hard,
    }
    for name, mask in masks.items():
        out[name] = _verification_metrics(scores[mask & pairs.same],
                                          scores[mask & ~pairs.same])
    return out


# ---------------------------------------------------------------------------
# Identification (1:N, closed set)

@dataclass
class ProbeBatch:
    x: np.ndarray
    class_ids: np.ndarray
    hard: np.ndarray      # bool, the probe's own tier


@dataclass
class GalleryBatch:
    x: np.ndarray
    class_ids: np.ndarray


@dataclass
class IdentificationMetrics:
    rank_accuracy: dict[int, float] | None
    probe_count: int


def _rank_metrics(ranks: np.ndarray) -> IdentificationMetrics:
    if len(ranks) == 0:
        return IdentificationMetrics(rank_accuracy=None, probe_count=0)
    acc = {k: float(np.mean(ranks <= k)) for k in RANKS}
    return IdentificationMetrics(rank_accuracy=acc, probe_count=len(ranks))


def probe_ranks(scores: np.ndarray, probe_classes: np.ndarray,
                gallery_classes: np.ndarray) -> np.ndarray:
    """1-based rank of each probe's true class, descending score order,
    ties broken toward the lower class id."""
    ranks = np.empty(len(scores), dtype=np.int64)
    for i in range(len(scores)):
        order = np.lexsort((gallery_classes, -scores[i]))
        ranks[i] = int(np.flatnonzero(gallery_classes[order] == probe_classes[i])[0]) + 1
    return ranks


def identification_eval(probes: ProbeBatch, gallery: GalleryBatch,
                        ensemble: Ensemble) -> dict[str, IdentificationMetrics]:
    """Stratified closed-set rank-k accuracy."""
    if len(probes.x) == 0:
        raise ContractError("identification needs at least one probe")
    if len(np.unique(gallery.class_ids)) != len(gallery.class_ids):
        raise ContractError("gallery classes must be unique")
    missing = np.setdiff1d(probes.class_ids, gallery.class_ids)
    if len(missing):
        raise ContractError(
            f"probe class {int(missing[0])} absent from gallery (closed-set protocol)"
        )
    scores = cross_scores(ensemble, probes.x, gallery.x)
    ranks = probe_ranks(scores, probes.class_ids, gallery.class_ids)
    return {
        "overall": _rank_metrics(ranks),
        "easy": _rank_metrics(ranks[~probes.hard]),
        "hard": _rank_metrics(ranks[probes.hard]),
    }


# ---------------------------------------------------------------------------
# Full report

@dataclass
class EvalReport:
    verification: dict[str, VerificationMetrics]
    identification: dict[str, IdentificationMetrics]
    gallery_size: int

    def to_json_dict(self) -> dict:
        return {
            "format_version": REPORT_VERSION,
            "gallery_size": self.gallery_size,
            "verification": {
                k: {
                    "accuracy": v.accuracy,
                    "tar_at_far": None if v.tar_at_far is None
                    else {repr(t): v.tar_at_far[t] for t in FAR_TARGETS},
                    "genuine_pairs": v.genuine_pairs,
                    "impostor_pairs": v.impostor_pairs,
                } for k, v in self.verification.items()
            },
            "identification": {
                k: {
                    "rank_accuracy": None if v.rank_accuracy is None
                    else {str(r): v.rank_accuracy[r] for r in RANKS},
                    "probes": v.probe_count,
                } for k, v in self.identification.items()
            },
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "EvalReport":
        if d.get("format_version") != REPORT_VERSION:
            raise SchemaError(f"report version {d.get('format_version')!r} unsupported")
        ver = {
            k: VerificationMetrics(
                accuracy=v["accuracy"],
                tar_at_far=None if v["tar_at_far"] is None
                else {t: v["tar_at_far"][repr(t)] for t in FAR_TARGETS},
                genuine_pairs=v["genuine_pairs"],
                impostor_pairs=v["impostor_pairs"],
            ) for k, v in d["verification"].items()
        }
        ident = {
            k: IdentificationMetrics(
                rank_accuracy=None if v["rank_accuracy"] is None
                else {r: v["rank_accuracy"][str(r)] for r in RANKS},
                probe_count=v["probes"],
            ) for k, v in d["identification"].items()
        }
        return cls(verification=ver, identification=ident,
                   gallery_size=d["gallery_size"])

    def flat_metrics(self) -> dict[tuple[str, str, str], float | None]:
        """(section, stratum, metric) -> value, in a stable order."""
        out: dict[tuple[str, str, str], float | None] = {}
        for stratum in STRATA:
            v = self.verification[stratum]
            out[("verification", stratum, "accuracy")] = v.accuracy
            for t in FAR_TARGETS:
                out[("verification", stratum, f"tar@far={t!r}")] = \
                    None if v.tar_at_far is None else v.tar_at_far[t]
        for stratum in STRATA:
            i = self.identification[stratum]
            for r in RANKS:
                out[("identification", stratum, f"rank-{r}")] = \
                    None if i.rank_accuracy is None else i.rank_accuracy[r]
        return out


def evaluate(dataset: SynthDataset, ensemble: Ensemble) -> EvalReport:
    """Evaluate an ensemble on the dataset's held-out split."""
    pairs = build_pair_batch(dataset)
    probes, gallery = build_identification_batches(dataset)
    return EvalReport(
        verification=verification_eval(pairs, ensemble),
        identification=identification_eval(probes, gallery, ensemble),
        gallery_size=len(gallery.x),
    )


def build_pair_batch(dataset: SynthDataset) -> PairBatch:
    split = dataset.split
    rows_a = dataset.eval_rows(split.pair_a)
    rows_b = dataset.eval_rows(split.pair_b)
    return PairBatch(
        x_a=dataset.eval_x[rows_a],
        x_b=dataset.eval_x[rows_b],
        same=split.pair_same.copy(),
        hard=split.pair_tag > 0,
    )


def build_identification_batches(dataset: SynthDataset) -> tuple[ProbeBatch, GalleryBatch]:
    split = dataset.split
    probe_rows = dataset.eval_rows(split.probe_ids)
    gallery_rows = dataset.eval_rows(split.gallery_ids)
    probes = ProbeBatch(
        x=dataset.eval_x[probe_rows],
        class_ids=dataset.eval_y[probe_rows].astype(np.int64),
        hard=dataset.eval_tier[probe_rows] != TIER_EASY,
    )
    gallery = GalleryBatch(
        x=dataset.eval_x[gallery_rows],
        class_ids=dataset.eval_y[gallery_rows].astype(np.int64),
    )
    return probes, gallery


def save_report(path, report: EvalReport) -> None:
    Path(path).write_text(json.dumps(report.to_json_dict(), indent=2, sort_keys=True) + "\n")


def load_report(path) -> EvalReport:
    return EvalReport.from_json_dict(json.loads(Path(path).read_text()))


def report_csv_lines(report: EvalReport) -> list[str]:
    lines = ["section,stratum,metric,value"]
    for (section, stratum, metric), value in report.flat_metrics().items():
        rendered = "" if value is None else format(value, ".17g")
        lines.append(f"{section},{stratum},{metric},{rendered}")
    return lines


def compare_runs(report_a: EvalReport, report_b: EvalReport
                 ) -> list[tuple[str, str, str, float | None, float | None, float | None]]:
    """Aligned metric-by-metric deltas (b - a); SchemaError on mismatched metric sets."""
    a = report_a.flat_metrics()
    b = report_b.flat_metrics()
    if a.keys() != b.keys():
        raise SchemaError("reports do not share the same metric set")
    rows = []
    for key in a:
        va, vb = a[key], b[key]
        delta = None if va is None or vb is None else vb - va
        rows.append((*key, va, vb, delta))
    return rows


def comparison_csv_lines(rows) -> list[str]:
    lines = ["section,stratum,metric,run_a,run_b,delta"]
    for section, stratum, metric, va, vb, delta in rows:
        fmt = lambda v: "" if v is None else format(v, ".17g")
        lines.append(f"{section},{stratum},{metric},{fmt(va)},{fmt(vb)},{fmt(delta)}")
    return lines


def comparison_text(rows) -> str:
    header = ("section", "stratum", "metric", "run_a", "run_b", "delta")
    body = [
        (s, st, m,
         "-" if va is None else f"{va:.4f}",
         "-" if vb is None else f"{vb:.4f}",
         "-" if d is None else f"{d:+.4f}")
        for s, st, m, va, vb, d in rows
    ]
    widths = [max(len(header[i]), *(len(r[i]) for r in body)) for i in range(6)]
    fmt_row = lambda r: "  ".join(str(r[i]).ljust(widths[i]) for i in range(6))
    return "\n".join([fmt_row(header)] + [fmt_row(r) for r in body]) + "\n"
