"""K-round boosted training pipeline.

Round 1 trains from scratch with uniform weights.  After each round, a full
deterministic pass scores every training sample with the margin softmax
probability; the weight table is updated (hard samples gain weight) and the
next round fine-tunes from the previous checkpoint (V1), fine-tunes on the
misclassified subset only (V2), or restarts from a fresh init (V3).  The
per-model combination weights come from the config.

Everything is reproducible from (config, dataset): round k's init and
shuffle streams are derived from the seed and the round index, never from
sequential RNG state, so a resumed pipeline is bit-identical to a
straight-through run.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import boosting
from .boosting import (HardnessStats, WeightTable, adapt_scale, init_table,
                       normalize_hardness, stats_from_weights, update_running_stats,
                       update_weights)
from .checkpoint import load_checkpoint, save_checkpoint
from .data import SynthDataset
from .errors import ConfigError, EmptyHardSetError, NumericError
from .evaluation import Ensemble
from .margin import (MarginParams, forward_logits, loss_backward, softmax_probs,
                     weighted_loss)
from .model import (EmbeddingModel, backward_batch, embed_batch, forward_batch,
                    init_model, unit_rows, unit_rows_backward)
from .optim import SgdConfig, SgdState, effective_lr, sgd_step

VARIANTS = ("Baseline", "V1", "V2", "V3")

MANIFEST_VERSION = 1

_PURPOSE_INIT = 0
_PURPOSE_SHUFFLE = 1

_PROB_CHUNK = 1024


def _default_sgd() -> SgdConfig:
    return SgdConfig(learning_rate=0.1, momentum=0.9, weight_decay=1e-4,
                     lr_drop_epochs=(15, 25), lr_drop_factor=10.0)


@dataclass(frozen=True)
class TrainConfig:
    variant: str = "V1"
    rounds: int = 2
    epochs_per_round: int = 30
    batch_size: int = 128
    alpha: float = 0.1
    lam: float = 1.0
    ema_momentum: float = 0.99
    hardness_epsilon: float = 1e-6
    betas: tuple[float, ...] = ()
    renormalize_weights: bool = False
    finetune_lr_scale: float = 0.5
    finetune_epochs: int = 120
    seed: int = 0
    sgd: SgdConfig = field(default_factory=_default_sgd)
    margin: MarginParams = field(default_factory=lambda: MarginParams.preset("cosface"))
    hidden_width: int = 64
    num_hidden: int = 2
    embed_dim: int = 16

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"train.variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.variant == "Baseline":
            object.__setattr__(self, "rounds", 1)  # Baseline is single-round by definition
        if not 1 <= self.rounds <= 4:
            raise ConfigError(f"train.rounds must be in [1, 4], got {self.rounds}")
        if self.epochs_per_round < 0:
            raise ConfigError(f"train.epochs_per_round must be >= 0, got {self.epochs_per_round}")
        if self.batch_size < 1:
            raise ConfigError(f"train.batch_size must be >= 1, got {self.batch_size}")
        if self.alpha < 0:
            raise ConfigError(f"train.alpha must be >= 0, got {self.alpha}")
        if not self.lam > 0:
            raise ConfigError(f"train.lambda must be > 0, got {self.lam}")
        if not 0 <= self.ema_momentum < 1:
            raise ConfigError(f"train.ema_momentum must be in [0, 1), got {self.ema_momentum}")
        if not self.finetune_lr_scale > 0:
            raise ConfigError(f"train.finetune_lr_scale must be > 0, got {self.finetune_lr_scale}")
        if self.finetune_epochs < 0:
            raise ConfigError(f"train.finetune_epochs must be >= 0, got {self.finetune_epochs}")
        betas = tuple(float(b) for b in self.betas)
        if not betas:
            betas = (1.0,) + (0.1,) * (self.rounds - 1)
        if len(betas) != self.rounds:
            raise ConfigError(
                f"train.betas needs one entry per round ({self.rounds}), got {len(betas)}"
            )
        if not all(np.isfinite(betas)):
            raise ConfigError("train.betas entries must be finite")
        object.__setattr__(self, "betas", betas)
        if self.hidden_width < 1 or self.num_hidden < 0 or self.embed_dim < 2:
            raise ConfigError("model dims must satisfy hidden_width>=1, num_hidden>=0, embed_dim>=2")


@dataclass
class RoundRecord:
    round_index: int
    final_loss: float
    epoch_metrics: list[tuple[int, float, float]]  # (epoch, mean loss, lr)
    wall_clock_s: float
    init_digest: str
    final_digest: str
    loaded_from_checkpoint: bool = False


@dataclass
class RoundOutput:
    index: int
    model: EmbeddingModel
    record: RoundRecord
    table: WeightTable              # weights in effect during this round
    probs: np.ndarray | None = None  # post-round hardness pass (None for the last round)


@dataclass
class BoostResult:
    ensemble: Ensemble
    rounds: list[RoundOutput]
    config: TrainConfig


def params_digest(model: EmbeddingModel) -> str:
    h = hashlib.sha256()
    for arr in model.parameters():
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()


def _rng(seed: int, round_index: int, purpose: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(
        np.random.SeedSequence(entropy=seed, spawn_key=(round_index, purpose))
    ))


def fresh_model(config: TrainConfig, input_dim: int, num_classes: int,
                round_index: int = 1) -> EmbeddingModel:
    rng = _rng(config.seed, round_index, _PURPOSE_INIT)
    return init_model(input_dim, (config.hidden_width,) * config.num_hidden,
                      config.embed_dim, num_classes, rng)


def train_round(init: EmbeddingModel, dataset: SynthDataset, table: WeightTable,
                stats: HardnessStats, config: TrainConfig, *,
                round_index: int = 1, sgd_config: SgdConfig | None = None,
                row_subset: np.ndarray | None = None, epochs: int | None = None,
                ) -> tuple[EmbeddingModel, SgdState, RoundRecord]:
    """One full training round over shuffled mini-batches.

    Per batch: embed, per-sample scale from the running hardness stats,
    margin forward, weighted loss, analytic backward, SGD step, then the
    stats update.  The input model is not mutated.
    """
    t0 = time.perf_counter()
    sgd_config = sgd_config or config.sgd
    model = init.copy()
    init_digest = params_digest(model)
    params = model.parameters()
    state = SgdState(params)
    weights_all = table.lookup(dataset.train_ids)

    rows_pool = np.arange(dataset.num_train) if row_subset is None \
        else np.asarray(row_subset, dtype=np.int64)
    rng = _rng(config.seed, round_index, _PURPOSE_SHUFFLE)
    base_scale = config.margin.base_scale

    if epochs is None:
        epochs = config.epochs_per_round
    epoch_metrics: list[tuple[int, float, float]] = []
    for epoch in range(epochs):
        lr = effective_lr(sgd_config, epoch)
        perm = rng.permutation(len(rows_pool))
        loss_sum = 0.0
        for start in range(0, len(rows_pool), config.batch_size):
            rows = rows_pool[perm[start:start + config.batch_size]]
            bx = dataset.train_x[rows]
            by = dataset.train_y[rows].astype(np.int64)
            bw = weights_all[rows]

            d_hat = normalize_hardness(bw, stats)
            scales = adapt_scale(base_scale, d_hat)

            emb, cache = forward_batch(model, bx)
            centers_unit, center_norms = unit_rows(model.centers)
            batch = forward_logits(emb, centers_unit, by, config.margin, scales)
            loss = weighted_loss(batch, bw)
            if not np.isfinite(loss):
                bad = rows[~np.isfinite(batch.logp_pos)]
                raise NumericError(
                    f"non-finite loss in round {round_index}, epoch {epoch}, "
                    f"batch at row {start}; offending sample ids "
                    f"{dataset.train_ids[bad][:8].tolist()}"
                )
            loss_sum += loss * len(rows)

            grad_emb, grad_centers_unit = loss_backward(
                batch, bw, emb, centers_unit, config.margin
            )
            layer_grads = backward_batch(model, cache, grad_emb)
            grad_centers = unit_rows_backward(grad_centers_unit, centers_unit, center_norms)
            flat_grads = [g for pair in layer_grads for g in pair] + [grad_centers]
            sgd_step(params, flat_grads, state, sgd_config, epoch)

            stats = update_running_stats(stats, bw)
        epoch_metrics.append((epoch, loss_sum / len(rows_pool), lr))

    final_loss = epoch_metrics[-1][1] if epoch_metrics else float("nan")
    record = RoundRecord(
        round_index=round_index,
        final_loss=final_loss,
        epoch_metrics=epoch_metrics,
        wall_clock_s=time.perf_counter() - t0,
        init_digest=init_digest,
        final_digest=params_digest(model),
    )
    return model, state, record


def compute_dataset_probs(model: EmbeddingModel, dataset: SynthDataset,
                          margin: MarginParams) -> np.ndarray:
    """Margin-softmax probability of every training sample's own class.

    One deterministic full pass at the uniform base scale (no hardness
    adaptation); the result is aligned with dataset.train_ids.
    """
    centers_unit, _ = unit_rows(model.centers)
    out = np.empty(dataset.num_train)
    scale_chunk = np.full(_PROB_CHUNK, margin.base_scale)
    for start in range(0, dataset.num_train, _PROB_CHUNK):
        stop = min(start + _PROB_CHUNK, dataset.num_train)
        emb = embed_batch(model, dataset.train_x[start:stop])
        labels = dataset.train_y[start:stop].astype(np.int64)
        batch = forward_logits(emb, centers_unit, labels, margin,
                               scale_chunk[: stop - start])
        out[start:stop] = softmax_probs(batch)
    return out


def misclassified_rows(model: EmbeddingModel, dataset: SynthDataset) -> np.ndarray:
    """Rows whose plain cosine argmax against the centers is not the label."""
    centers_unit, _ = unit_rows(model.centers)
    bad = []
    for start in range(0, dataset.num_train, _PROB_CHUNK):
        stop = min(start + _PROB_CHUNK, dataset.num_train)
        emb = embed_batch(model, dataset.train_x[start:stop])
        pred = np.argmax(emb @ centers_unit.T, axis=1)
        bad.append(start + np.flatnonzero(pred != dataset.train_y[start:stop]))
    return np.concatenate(bad)


def _finetune_sgd(config: TrainConfig) -> SgdConfig:
    # Fine-tuning runs at a scaled-down constant rate with no drops: the
    # sustained drift under the reweighted loss is what differentiates the
    # next model from its parent (an annealed fine-tune collapses back onto
    # the parent and the combination gains nothing; measured, not assumed).
    return replace(config.sgd,
                   learning_rate=config.sgd.learning_rate * config.finetune_lr_scale,
                   lr_drop_epochs=())


def boost_train(dataset: SynthDataset, config: TrainConfig, *,
                run_dir: str | Path | None = None, resume: bool = False,
                stop_after_round: int | None = None,
                config_text: str | None = None) -> BoostResult:
    """Run the full K-round pipeline; optionally persist/resume a run directory."""
    writer = RunWriter(run_dir, config, config_text) if run_dir is not None else None
    last_round = config.rounds if stop_after_round is None \
        else min(config.rounds, stop_after_round)

    table = init_table(dataset.num_train, config.alpha, dataset.train_ids)
    rounds: list[RoundOutput] = []
    model_prev: EmbeddingModel | None = None

    for k in range(1, last_round + 1):
        if k == 1:
            init = fresh_model(config, dataset.config.input_dim,
                               int(dataset.train_y.max()) + 1, round_index=1)
            sgd_cfg = config.sgd
            row_subset = None
            epochs = None
        else:
            if config.variant == "V3":
                # From-scratch rounds keep the full schedule and budget.
                init = fresh_model(config, dataset.config.input_dim,
                                   int(dataset.train_y.max()) + 1, round_index=k)
                sgd_cfg = config.sgd
                epochs = None
            else:
                init = model_prev
                sgd_cfg = _finetune_sgd(config)
                epochs = config.finetune_epochs
            row_subset = None
            if config.variant == "V2":
                row_subset = misclassified_rows(model_prev, dataset)
                if len(row_subset) == 0:
                    raise EmptyHardSetError(
                        f"round {k}: no misclassified samples to fine-tune on"
                    )

        if writer is not None and resume and writer.round_complete(k):
            model_k, state = load_checkpoint(writer.round_dir(k) / "checkpoint.bin")
            record = RoundRecord(round_index=k, final_loss=float("nan"),
                                 epoch_metrics=[], wall_clock_s=0.0,
                                 init_digest=params_digest(init),
                                 final_digest=params_digest(model_k),
                                 loaded_from_checkpoint=True)
        else:
            stats = stats_from_weights(table.weights, config.ema_momentum,
                                       config.lam, config.hardness_epsilon)
            model_k, state, record = train_round(
                init, dataset, table, stats, config,
                round_index=k, sgd_config=sgd_cfg, row_subset=row_subset,
                epochs=epochs,
            )
            if writer is not None:
                writer.write_round(k, model_k, state, table, record)

        out = RoundOutput(index=k, model=model_k, record=record, table=table)
        rounds.append(out)
        model_prev = model_k

        if k < last_round:
            out.probs = compute_dataset_probs(model_k, dataset, config.margin)
            table = update_weights(table, out.probs)
            if config.renormalize_weights:
                table = boosting.renormalize(table)

    ensemble = Ensemble(models=[r.model for r in rounds],
                        betas=config.betas[: len(rounds)])
    if writer is not None and last_round == config.rounds:
        writer.write_ensemble_manifest(rounds)
    return BoostResult(ensemble=ensemble, rounds=rounds, config=config)


class RunWriter:
    """Run-directory layout: config.snapshot, round_<k>/{checkpoint.bin,
    weights.csv,metrics.csv,complete}, ensemble.manifest.

    Files contain no timestamps: identical (config, dataset, seed) runs
    produce byte-identical directories.  Wall-clock lives on the in-memory
    records only.
    """

    def __init__(self, run_dir, config: TrainConfig, config_text: str | None):
        from .config import render_train_config  # config imports TrainConfig back
        self.root = Path(run_dir)
        self.root.mkdir(parents=True, exist_ok=True)
        self.config = config
        snapshot = config_text if config_text is not None else render_train_config(config)
        self._write_once(self.root / "config.snapshot", snapshot)

    def _write_once(self, path: Path, text: str) -> None:
        if not path.exists():
            path.write_text(text)

    def round_dir(self, k: int) -> Path:
        return self.root / f"round_{k}"

    def round_complete(self, k: int) -> bool:
        d = self.round_dir(k)
        return all((d / name).exists()
                   for name in ("checkpoint.bin", "weights.csv", "metrics.csv", "complete"))

    def write_round(self, k: int, model: EmbeddingModel, state: SgdState,
                    table: WeightTable, record: RoundRecord) -> None:
        d = self.round_dir(k)
        d.mkdir(parents=True, exist_ok=True)
        save_checkpoint(d / "checkpoint.bin", model, state)
        boosting.save_weight_table(d / "weights.csv", table,
                                   self.config.lam, self.config.ema_momentum)
        lines = ["epoch,loss,lr"]
        lines += [f"{e},{format(loss, '.17g')},{format(lr, '.17g')}"
                  for e, loss, lr in record.epoch_metrics]
        (d / "metrics.csv").write_text("\n".join(lines) + "\n")
        (d / "complete").write_text("")

    def write_ensemble_manifest(self, rounds: list[RoundOutput]) -> None:
        from .checkpoint import checkpoint_digest
        entries = []
        for r in rounds:
            rel = f"round_{r.index}/checkpoint.bin"
            entries.append({
                "index": r.index,
                "checkpoint": rel,
                "checkpoint_sha256": checkpoint_digest(self.root / rel),
                "weights": f"round_{r.index}/weights.csv",
            })
        manifest = {
            "format_version": MANIFEST_VERSION,
            "variant": self.config.variant,
            "seed": self.config.seed,
            "betas": list(self.config.betas[: len(rounds)]),
            "rounds": entries,
        }
        (self.root / "ensemble.manifest").write_text(
            json.dumps(manifest, indent=2, sort_keys=True) + "\n"
        )


def load_ensemble(run_dir, betas_override: tuple[float, ...] | None = None) -> Ensemble:
    """Rebuild the ensemble from a run directory's manifest."""
    root = Path(run_dir)
    manifest = json.loads((root / "ensemble.manifest").read_text())
    if manifest.get("format_version") != MANIFEST_VERSION:
        from .errors import UnsupportedVersionError
        raise UnsupportedVersionError(
            f"ensemble manifest version {manifest.get('format_version')!r} unsupported"
        )
    models = []
    for entry in manifest["rounds"]:
        model, _ = load_checkpoint(root / entry["checkpoint"])
        models.append(model)
    betas = tuple(betas_override) if betas_override is not None \
        else tuple(manifest["betas"])
    return Ensemble(models=models, betas=betas)
