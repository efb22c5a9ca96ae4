"""Acceptance suite: one test per release criterion, tolerances pinned inline.

Criteria 6/7/9 share a 40-run sweep over variants, presets and seeds on the
default synthetic dataset; the sweep is computed once (in parallel worker
processes) by a session fixture.  Per-seed variant runs are paired: every
variant shares its round-1 model with the Baseline of the same seed, so the
directional comparisons use medians of per-seed differences.
"""

import math
import shutil
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import pytest

from sphereboost import boosting, data, evaluation, trainer
from sphereboost.boosting import (adapt_scale, init_table, normalize_hardness,
                                  stats_from_weights, update_weights)
from sphereboost.cli import _ablate_worker, main
from sphereboost.margin import (MarginParams, approx_denominator,
                                effective_margin_decomposition, forward_logits,
                                loss_backward, margin_logit,
                                orthogonal_negatives_prob, weighted_loss)
from sphereboost.model import (backward_batch, forward_batch, init_model, unit_rows,
                               unit_rows_backward)
from sphereboost.optim import grad_check

from conftest import tiny_train_config

SEEDS = (0, 1, 2, 3, 4)
PP = 100.0  # fractions to percentage points


def _ok(criterion: str, detail: str) -> None:
    print(f"[PASS] {criterion}: {detail}")


# ---------------------------------------------------------------------------
# shared sweep for criteria 6, 7, 9

@pytest.fixture(scope="session")
def sweep(tmp_path_factory):
    root = tmp_path_factory.mktemp("sweep")
    dataset = data.generate(data.GenConfig())
    dataset_path = root / "dataset.bin"
    data.save_dataset(dataset_path, dataset)

    configs = {
        "default": None,
        "arcface": root / "arcface.cfg",
        "adaface-like": root / "ada.cfg",
    }
    (root / "arcface.cfg").write_text("margin.preset = arcface\n")
    (root / "ada.cfg").write_text("margin.preset = adaface-like\n")

    jobs = []
    for variant in ("Baseline", "V1", "V2", "V3"):
        for seed in SEEDS:
            jobs.append(("default", variant, seed))
    for preset in ("arcface", "adaface-like"):
        for variant in ("Baseline", "V1"):
            for seed in SEEDS:
                jobs.append((preset, variant, seed))

    payloads = [
        (str(dataset_path),
         None if configs[label] is None else str(configs[label]),
         "variant", variant, seed, str(root / label))
        for label, variant, seed in jobs
    ]
    t0 = time.perf_counter()
    results = {}
    with ProcessPoolExecutor(max_workers=4) as pool:
        for (label, variant, seed), (_, _, flat, err) in zip(
                jobs, pool.map(_ablate_worker, payloads)):
            assert err is None, f"{label}/{variant}/seed{seed} failed: {err}"
            results[(label, variant, seed)] = flat
    elapsed = time.perf_counter() - t0
    return {"results": results, "elapsed_s": elapsed}


def _metric(sweep_data, label, variant, seed, key):
    return sweep_data["results"][(label, variant, seed)][key]


def _hard_rank1_gaps(sweep_data, label, variant_a, variant_b):
    key = "identification/hard/rank-1"
    return [PP * (_metric(sweep_data, label, variant_a, s, key)
                  - _metric(sweep_data, label, variant_b, s, key))
            for s in SEEDS]


# ---------------------------------------------------------------------------

def test_c01_gradient_fidelity_full_loss():
    """Analytic gradients of the weighted margin loss (arccos, margin branch,
    per-sample adapted scale, backbone, center normalization) vs central
    differences: max relative error < 1e-5 on 20 random instances, < 30 s."""
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(1000 + seed)
        model = init_model(6, (10, 8), 5, 6, rng)
        x = rng.standard_normal((5, 6))
        labels = rng.integers(0, 6, 5)
        weights = rng.uniform(0.3, 2.5, 5)
        params_m = MarginParams(m_s=1.0, m_a=rng.uniform(0.1, 0.4),
                                m_c=rng.uniform(0.1, 0.4), base_scale=20.0)
        stats = stats_from_weights(weights, ema_momentum=0.99, lam=1.0)
        scales = adapt_scale(params_m.base_scale, normalize_hardness(weights, stats))

        def loss_value():
            emb, _ = forward_batch(model, x)
            centers_unit, _ = unit_rows(model.centers)
            batch = forward_logits(emb, centers_unit, labels, params_m, scales)
            return weighted_loss(batch, weights)

        emb, cache = forward_batch(model, x)
        centers_unit, center_norms = unit_rows(model.centers)
        batch = forward_logits(emb, centers_unit, labels, params_m, scales)
        gf, gc_unit = loss_backward(batch, weights, emb, centers_unit, params_m)
        layer_grads = backward_batch(model, cache, gf)
        analytic = [g for pair in layer_grads for g in pair]
        analytic.append(unit_rows_backward(gc_unit, centers_unit, center_norms))

        report = grad_check(model.parameters(), model.parameter_names(),
                            loss_value, analytic, h=1e-6)
        worst = max(worst, max(report.values()))
        assert max(report.values()) < 1e-5, (seed, report)
    elapsed = time.perf_counter() - t0
    assert elapsed < 30.0
    _ok("criterion 1", f"20 instances, worst rel err {worst:.2e}, {elapsed:.1f}s")


def test_c02_algebraic_identities():
    """Weight-as-margin identity (1000 tuples, 1e-12); converged-denominator
    equality under orthogonal negatives; weight-update composition (1e-12)."""
    rng = np.random.default_rng(7)
    for _ in range(1000):
        theta = rng.uniform(0.0, math.pi)
        d = rng.uniform(0.1, 3.0)
        m_a, m_c = rng.uniform(0.0, 0.5, 2)
        s = rng.uniform(1.0, 40.0)
        params = MarginParams(m_s=1.0, m_a=m_a, m_c=m_c, base_scale=s)
        lhs = math.exp(margin_logit(theta, params, s, True)) ** d
        eff_scale, eff_margin = effective_margin_decomposition(d, params)
        rhs = math.exp(eff_scale * math.cos(theta + m_a) - eff_margin)
        assert abs(lhs - rhs) <= 1e-12 * max(abs(lhs), abs(rhs))

    for c in (1, 2, 17, 5000):
        for pos in (-3.0, 0.0, 12.5, 30.0):
            exact = math.exp(pos) + float(np.sum(np.exp(np.zeros(c - 1))))
            assert approx_denominator(pos, c) == exact

    for _ in range(1000):
        n = int(rng.integers(1, 8))
        alpha = float(rng.uniform(0.0, 0.5))
        p = rng.uniform(1e-6, 1.0, n)
        q = rng.uniform(1e-6, 1.0, n)
        t = init_table(n, alpha)
        two = update_weights(update_weights(t, p), q).weights
        one = update_weights(t, p * q).weights
        assert np.all(np.abs(two - one) <= 1e-12 * np.abs(one))
    _ok("criterion 2", "margin identity, denominator equality, composition all hold")


def test_c03_round_one_neutrality(tmp_path):
    """Baseline and V1-round-1 checkpoints are byte-identical; uniform weights
    give d_hat = 0 and adapted scale exactly s for every sample."""
    ds = data.generate(data.GenConfig(num_classes=12, samples_per_class=30,
                                      input_dim=16, seed=3))
    base_cfg = tiny_train_config(variant="Baseline", rounds=1, epochs_per_round=6)
    v1_cfg = tiny_train_config(variant="V1", rounds=2, epochs_per_round=6)
    trainer.boost_train(ds, base_cfg, run_dir=tmp_path / "base")
    trainer.boost_train(ds, v1_cfg, run_dir=tmp_path / "v1", stop_after_round=1)
    a = (tmp_path / "base" / "round_1" / "checkpoint.bin").read_bytes()
    b = (tmp_path / "v1" / "round_1" / "checkpoint.bin").read_bytes()
    assert a == b

    table = init_table(ds.num_train, alpha=0.1, sample_ids=ds.train_ids)
    stats = stats_from_weights(table.weights, ema_momentum=0.99, lam=1.0)
    for _ in range(10):
        stats = boosting.update_running_stats(stats, table.weights[:128])
    d_hat = normalize_hardness(table.weights, stats)
    scales = adapt_scale(30.0, d_hat)
    assert np.all(d_hat == 0.0)
    assert np.all(scales == 30.0)
    _ok("criterion 3", "round-1 checkpoints byte-identical; d_hat=0, s'=s")


def test_c04_scale_saturation_properties():
    """Exact-summation softmax with 10000 orthogonal negatives: small scale
    caps the best probability; large scale saturates and stays high at 80 deg."""
    c = 10001
    p_small = orthogonal_negatives_prob(0.0, 10.0, c)
    p_large = orthogonal_negatives_prob(0.0, 64.0, c)
    p_wide = orthogonal_negatives_prob(math.radians(80.0), 64.0, c)

    def oracle(theta, s):
        return math.exp(s * math.cos(theta)) / (math.exp(s * math.cos(theta)) + c - 1)

    assert p_small == pytest.approx(oracle(0.0, 10.0), rel=1e-12)
    assert p_small == pytest.approx(0.688, abs=1e-3)
    assert p_wide == pytest.approx(oracle(math.radians(80.0), 64.0), rel=1e-12)
    assert p_wide == pytest.approx(0.870, abs=1e-3)
    assert p_small < 0.7
    assert p_large > 1.0 - 1e-6
    assert p_wide > 0.85
    _ok("criterion 4", f"p(0,s=10)={p_small:.4f} < 0.7; p(0,s=64)>{1 - 1e-6}; "
                       f"p(80deg,s=64)={p_wide:.4f} > 0.85")


def test_c05_hardness_discovery_on_defaults():
    """After round 1 on the default dataset, easy-tier samples score higher
    than hard-tier by at least 3 standard errors."""
    ds = data.generate(data.GenConfig())
    cfg = trainer.TrainConfig(variant="Baseline", rounds=1, seed=0)
    result = trainer.boost_train(ds, cfg)
    probs = trainer.compute_dataset_probs(result.rounds[0].model, ds, cfg.margin)
    easy = probs[ds.train_tier == data.TIER_EASY]
    hard = probs[ds.train_tier == data.TIER_HARD]
    se = math.sqrt(easy.var(ddof=1) / len(easy) + hard.var(ddof=1) / len(hard))
    sep = (easy.mean() - hard.mean()) / se
    assert sep >= 3.0
    _ok("criterion 5", f"mean p easy {easy.mean():.4f} vs hard {hard.mean():.4f} "
                       f"({sep:.0f} standard errors)")


def test_c06_directional_variant_ordering(sweep):
    """Hard-probe rank-1, medians of per-seed paired differences on defaults:
    V1 beats Baseline by >= 1.0 pp; V1 beats V2 and V3.  Sweep < 60 min."""
    v1_vs_base = statistics.median(_hard_rank1_gaps(sweep, "default", "V1", "Baseline"))
    v1_vs_v2 = statistics.median(_hard_rank1_gaps(sweep, "default", "V1", "V2"))
    v1_vs_v3 = statistics.median(_hard_rank1_gaps(sweep, "default", "V1", "V3"))
    assert v1_vs_base >= 1.0
    assert v1_vs_v2 > 0.0
    assert v1_vs_v3 > 0.0
    assert sweep["elapsed_s"] < 3600.0
    _ok("criterion 6", f"V1-Baseline {v1_vs_base:+.2f}pp, V1-V2 {v1_vs_v2:+.2f}pp, "
                       f"V1-V3 {v1_vs_v3:+.2f}pp (sweep {sweep['elapsed_s']:.0f}s)")


def test_c07_easy_set_preservation(sweep):
    """V1's easy-easy verification accuracy does not trail Baseline by more
    than 0.5 pp (median of per-seed differences)."""
    key = "verification/easy/accuracy"
    deltas = [PP * (_metric(sweep, "default", "V1", s, key)
                    - _metric(sweep, "default", "Baseline", s, key))
              for s in SEEDS]
    med = statistics.median(deltas)
    assert med >= -0.5
    _ok("criterion 7", f"easy-easy accuracy delta {med:+.2f}pp (median)")


def test_c08_alpha_ablation_harness(tmp_path):
    """The sweep harness emits the 4-point exponent table; the table is the
    deliverable (no winner asserted at desk scale)."""
    ds = data.generate(data.GenConfig(num_classes=10, samples_per_class=24,
                                      input_dim=16, seed=5))
    dataset_path = tmp_path / "ds.bin"
    data.save_dataset(dataset_path, ds)
    cfg = tmp_path / "train.cfg"
    cfg.write_text("train.epochs_per_round = 3\ntrain.finetune_epochs = 3\n"
                   "train.batch_size = 32\nmodel.hidden_width = 16\n"
                   "model.embed_dim = 8\nsgd.lr_drop_epochs = 2\n")
    out = tmp_path / "ablate"
    code = main(["ablate", "--dataset", str(dataset_path), "--config", str(cfg),
                 "--sweep", "alpha=0.05,0.1,0.3,0.5", "--seeds", "0",
                 "--out", str(out), "--jobs", "2"])
    assert code == 0
    table = (out / "ablation_table.csv").read_text().splitlines()
    points = [line.split(",")[0] for line in table[1:]]
    assert points == ["alpha=0.05", "alpha=0.1", "alpha=0.3", "alpha=0.5"]
    for line in table[1:]:
        assert line.split(",")[1] == "1"  # every point trained
    _ok("criterion 8", "alpha table emitted with rows 0.05/0.1/0.3/0.5")


def test_c09_margin_preset_orthogonality(sweep):
    """The V1-vs-Baseline hard-probe gain (criterion 6 bar) holds for at
    least two of the three margin presets."""
    passing = []
    details = []
    for label in ("default", "arcface", "adaface-like"):
        med = statistics.median(_hard_rank1_gaps(sweep, label, "V1", "Baseline"))
        name = "cosface" if label == "default" else label
        details.append(f"{name} {med:+.2f}pp")
        if med >= 1.0:
            passing.append(name)
    assert len(passing) >= 2, details
    _ok("criterion 9", "; ".join(details) + f" -> {len(passing)}/3 presets pass")


def test_c10_metric_oracles_and_beta_invariance(tiny_dataset):
    """TAR@FAR and rank-k match exhaustive oracles on hand-built score sets;
    rescaling every combination weight leaves the whole report unchanged."""
    from test_eval import (oracle_best_accuracy, oracle_ranks, oracle_tar_at_far)
    from sphereboost.evaluation import _verification_metrics, probe_ranks

    genuine = np.array([0.9, 0.8, 0.7, 0.2])
    impostor = np.array([0.6, 0.5, 0.4, 0.3])
    m = _verification_metrics(genuine, impostor)
    assert oracle_tar_at_far(genuine, impostor, 0.25) == 0.75
    for target in (1e-3, 1e-2, 1e-1):
        assert m.tar_at_far[target] == oracle_tar_at_far(genuine, impostor, target)
    assert m.accuracy == pytest.approx(oracle_best_accuracy(genuine, impostor), abs=1e-15)

    rng = np.random.default_rng(0)
    for _ in range(20):
        g = np.round(rng.uniform(size=rng.integers(2, 10)), 2)
        i = np.round(rng.uniform(size=rng.integers(2, 10)), 2)
        mm = _verification_metrics(g, i)
        for target in (1e-3, 1e-2, 1e-1):
            assert mm.tar_at_far[target] == oracle_tar_at_far(g, i, target)
        scores = np.round(rng.uniform(size=(6, 5)), 1)
        gallery_classes = rng.permutation(5).astype(np.int64)
        probe_classes = gallery_classes[rng.integers(0, 5, 6)]
        assert np.array_equal(probe_ranks(scores, probe_classes, gallery_classes),
                              oracle_ranks(scores, probe_classes, gallery_classes))

    cfg = tiny_train_config(variant="V1", rounds=2)
    result = trainer.boost_train(tiny_dataset, cfg)
    report = evaluation.evaluate(tiny_dataset, result.ensemble)
    scaled = evaluation.Ensemble(models=result.ensemble.models,
                                 betas=tuple(3.7 * b for b in result.ensemble.betas))
    scaled_report = evaluation.evaluate(tiny_dataset, scaled)
    a, b = report.flat_metrics(), scaled_report.flat_metrics()
    for key in a:
        if a[key] is None:
            assert b[key] is None
        else:
            assert b[key] == pytest.approx(a[key], abs=1e-12)
    _ok("criterion 10", "brute-force metric oracles and beta-rescaling invariance hold")


def test_c11_determinism_and_persistence(tmp_path):
    """Same invocation -> byte-identical run directory; dataset/checkpoint/
    weight-table round-trips bit-exact; resumed pipeline == straight-through."""
    ds = data.generate(data.GenConfig(num_classes=12, samples_per_class=30,
                                      input_dim=16, seed=9))
    dataset_path = tmp_path / "ds.bin"
    data.save_dataset(dataset_path, ds)
    loaded = data.load_dataset(dataset_path)
    again = tmp_path / "ds2.bin"
    data.save_dataset(again, loaded)
    assert again.read_bytes() == dataset_path.read_bytes()

    cfg_text = ("train.variant = V1\ntrain.rounds = 2\ntrain.epochs_per_round = 5\n"
                "train.finetune_epochs = 5\ntrain.batch_size = 32\ntrain.seed = 4\n"
                "model.hidden_width = 16\nmodel.embed_dim = 8\nsgd.lr_drop_epochs = 3\n")
    cfg_path = tmp_path / "train.cfg"
    cfg_path.write_text(cfg_text)

    def run_train(out, extra=()):
        code = main(["train", "--dataset", str(dataset_path), "--config",
                     str(cfg_path), "--out", str(out), *extra])
        assert code == 0

    def tree(path: Path):
        return {str(p.relative_to(path)): p.read_bytes()
                for p in sorted(path.rglob("*")) if p.is_file()}

    out = tmp_path / "run"
    run_train(out)
    first = tree(out)
    shutil.rmtree(out)
    run_train(out)
    assert tree(out) == first

    staged = tmp_path / "staged"
    run_train(staged, extra=["--stop-after-round", "1"])
    run_train(staged, extra=["--resume"])
    staged_tree = tree(staged)
    for name, blob in first.items():
        if name != "manifest.json":  # manifest records the differing argv
            assert staged_tree[name] == blob, name

    from sphereboost.checkpoint import load_checkpoint, save_checkpoint
    model, state = load_checkpoint(out / "round_2" / "checkpoint.bin")
    resaved = tmp_path / "resaved.bin"
    save_checkpoint(resaved, model, state)
    assert resaved.read_bytes() == (out / "round_2" / "checkpoint.bin").read_bytes()

    table, _ = boosting.load_weight_table(out / "round_2" / "weights.csv")
    resaved_csv = tmp_path / "weights.csv"
    boosting.save_weight_table(resaved_csv, table, lam=1.0, ema_momentum=0.99)
    assert resaved_csv.read_bytes() == (out / "round_2" / "weights.csv").read_bytes()
    _ok("criterion 11", "byte-identical reruns, bit-exact round-trips, resume == straight")
