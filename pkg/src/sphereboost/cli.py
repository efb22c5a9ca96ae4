"""Command-line interface: generate / train / eval / ablate / report.

Exit codes: 0 ok, 2 configuration error, 3 data or file-format error,
4 numeric failure.  All randomness flows from the seed (CLI --seed wins
over the config file); identical invocations produce byte-identical
artifacts, so nothing time-dependent is written into output directories.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import json
import math
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from . import boosting, config as config_mod, data, evaluation, margin, trainer
from .errors import (ConfigError, ContractError, DataFormatError, EmptyHardSetError,
                     NumericError, SchemaError, SphereBoostError)

MANIFEST_VERSION = 1

FORMAT_VERSIONS = {
    "dataset": data.FORMAT_VERSION,
    "checkpoint": 1,
    "report": evaluation.REPORT_VERSION,
    "manifest": MANIFEST_VERSION,
}


def _write_manifest(out_dir: Path, argv: list[str], seed: int | None,
                    config_text: str | None, artifacts: dict[str, str]) -> None:
    manifest = {
        "format_version": MANIFEST_VERSION,
        "command": ["sphereboost", *argv],
        "seed": seed,
        "config_snapshot": config_text,
        "artifacts": artifacts,
        "format_versions": FORMAT_VERSIONS,
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    )


def cmd_generate(args, argv) -> int:
    if args.config is not None:
        doc = config_mod.read_document(args.config)
        cfg = config_mod.load_gen_config(doc, seed_override=args.seed)
    else:
        cfg = config_mod.load_gen_config({}, seed_override=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    dataset = data.generate(cfg)
    data.save_dataset(out / "dataset.bin", dataset)
    artifacts = {"dataset": "dataset.bin"}
    if args.export_csv:
        data.export_samples_csv(out / "samples.csv", dataset)
        artifacts["samples_csv"] = "samples.csv"
    config_text = config_mod.render_gen_config(cfg)
    (out / "config.snapshot").write_text(config_text)
    _write_manifest(out, argv, cfg.seed, config_text, artifacts)
    print(f"generated {dataset.num_train} train / {len(dataset.eval_ids)} eval samples "
          f"({len(dataset.split.pair_a)} pairs, {len(dataset.split.probe_ids)} probes) "
          f"-> {out} [{time.perf_counter() - t0:.2f}s]")
    return 0


def _load_train_inputs(dataset_path, config_path, seed_override):
    dataset = data.load_dataset(dataset_path)
    if config_path is not None:
        text = Path(config_path).read_text()
        doc = config_mod.parse_document(text)
    else:
        doc = {}
    cfg = config_mod.load_train_config(doc, seed_override=seed_override)
    return dataset, cfg


def cmd_train(args, argv) -> int:
    dataset, cfg = _load_train_inputs(args.dataset, args.config, args.seed)
    out = Path(args.out)
    t0 = time.perf_counter()
    result = trainer.boost_train(
        dataset, cfg, run_dir=out, resume=args.resume,
        stop_after_round=args.stop_after_round,
        config_text=config_mod.render_train_config(cfg),
    )
    _write_manifest(out, argv, cfg.seed, config_mod.render_train_config(cfg), {
        "ensemble_manifest": "ensemble.manifest",
        "rounds": ",".join(f"round_{r.index}" for r in result.rounds),
    })
    for r in result.rounds:
        status = "loaded" if r.record.loaded_from_checkpoint else \
            f"loss {r.record.final_loss:.4f}"
        print(f"round {r.index}: {status} [{r.record.wall_clock_s:.2f}s]")
    print(f"trained variant={cfg.variant} rounds={len(result.rounds)} -> {out} "
          f"[{time.perf_counter() - t0:.2f}s]")
    return 0


def cmd_eval(args, argv) -> int:
    dataset = data.load_dataset(args.dataset)
    betas = None
    if args.betas is not None:
        betas = tuple(float(b) for b in args.betas.split(","))
    ensemble = trainer.load_ensemble(args.run, betas_override=betas)
    out = Path(args.out) if args.out else Path(args.run) / "eval"
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    report = evaluation.evaluate(dataset, ensemble)
    evaluation.save_report(out / "report.json", report)
    (out / "report.csv").write_text("\n".join(evaluation.report_csv_lines(report)) + "\n")
    artifacts = {"report_json": "report.json", "report_csv": "report.csv"}
    if args.emit_roc:
        pairs = evaluation.build_pair_batch(dataset)
        scores = evaluation.pair_scores(ensemble, pairs.x_a, pairs.x_b)
        _, far, tar = evaluation.roc_points(scores[pairs.same], scores[~pairs.same])
        lines = ["far,tar"] + [f"{format(f, '.17g')},{format(t, '.17g')}"
                               for f, t in zip(far, tar)]
        (out / "roc.csv").write_text("\n".join(lines) + "\n")
        artifacts["roc_csv"] = "roc.csv"
    _write_manifest(out, argv, None, None, artifacts)
    overall = report.verification["overall"].accuracy
    hard = report.identification["hard"].rank_accuracy
    hard_r1 = "-" if hard is None else f"{hard[1]:.4f}"
    print(f"verification overall accuracy {overall:.4f}; hard rank-1 {hard_r1} "
          f"-> {out} [{time.perf_counter() - t0:.2f}s]")
    return 0


# ---------------------------------------------------------------------------
# Ablation sweeps

SWEEP_PARAMS = ("alpha", "variant", "margin")

TABLE_METRICS = (
    ("verification", "easy", "accuracy"),
    ("verification", "overall", "accuracy"),
    ("verification", "overall", "tar@far=0.01"),
    ("identification", "hard", "rank-1"),
)
TABLE_HEADERS = ("easy_acc", "overall_acc", "tar@far=0.01", "hard_rank1")


def _apply_sweep_value(cfg: trainer.TrainConfig, param: str, value: str,
                       seed: int) -> trainer.TrainConfig:
    from dataclasses import replace
    if param == "alpha":
        return replace(cfg, alpha=float(value), seed=seed)
    if param == "variant":
        rounds = 1 if value == "Baseline" else max(cfg.rounds, 2)
        return replace(cfg, variant=value, rounds=rounds, betas=(), seed=seed)
    if param == "margin":
        preset = margin.MarginParams.preset(value, base_scale=cfg.margin.base_scale)
        return replace(cfg, margin=preset, seed=seed)
    raise ConfigError(f"sweep parameter must be one of {SWEEP_PARAMS}, got {param!r}")


def _ablate_worker(payload: tuple) -> tuple[str, int, dict | None, str | None]:
    """One sweep point x seed: train, evaluate, persist; returns flat metrics."""
    dataset_path, config_path, param, value, seed, out_dir = payload
    label = f"{param}={value}"
    try:
        dataset, base_cfg = _load_train_inputs(dataset_path, config_path, None)
        cfg = _apply_sweep_value(base_cfg, param, value, seed)
        run_dir = Path(out_dir) / label.replace("=", "_") / f"seed_{seed}"
        result = trainer.boost_train(dataset, cfg, run_dir=run_dir,
                                     config_text=config_mod.render_train_config(cfg))
        report = evaluation.evaluate(dataset, result.ensemble)
        evaluation.save_report(run_dir / "report.json", report)
        flat = {"/".join(k): v for k, v in report.flat_metrics().items()}
        return label, seed, flat, None
    except SphereBoostError as exc:
        return label, seed, None, f"{type(exc).__name__}: {exc}"


def cmd_ablate(args, argv) -> int:
    if "=" not in args.sweep:
        raise ConfigError("--sweep expects param=value1,value2,...")
    param, _, values_text = args.sweep.partition("=")
    param = param.strip()
    if param not in SWEEP_PARAMS:
        raise ConfigError(f"sweep parameter must be one of {SWEEP_PARAMS}, got {param!r}")
    values = [v.strip() for v in values_text.split(",") if v.strip()]
    if not values:
        raise ConfigError("--sweep needs at least one value")
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [0]

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    payloads = [(args.dataset, args.config, param, v, s, str(out))
                for v in values for s in seeds]
    t0 = time.perf_counter()
    results: dict[tuple[str, int], tuple[dict | None, str | None]] = {}
    if args.jobs > 1 and len(payloads) > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=args.jobs) as pool:
            for label, seed, flat, err in pool.map(_ablate_worker, payloads):
                results[(label, seed)] = (flat, err)
    else:
        for payload in payloads:
            label, seed, flat, err = _ablate_worker(payload)
            results[(label, seed)] = (flat, err)

    rows = []
    failures = []
    for v in values:
        label = f"{param}={v}"
        per_seed = [results[(label, s)] for s in seeds]
        errors = [err for _, err in per_seed if err]
        if errors:
            failures.append((label, errors[0]))
        good = [flat for flat, err in per_seed if flat is not None]
        medians = {}
        for key_tuple, header in zip(TABLE_METRICS, TABLE_HEADERS):
            key = "/".join(key_tuple)
            vals = [g[key] for g in good if g.get(key) is not None]
            medians[header] = statistics.median(vals) if vals else None
        rows.append((label, len(good), medians))

    lines = ["point,seeds_ok," + ",".join(TABLE_HEADERS)]
    for label, n_ok, medians in rows:
        rendered = [("" if medians[h] is None else format(medians[h], ".6f"))
                    for h in TABLE_HEADERS]
        lines.append(f"{label},{n_ok}," + ",".join(rendered))
    (out / "ablation_table.csv").write_text("\n".join(lines) + "\n")

    widths = [max(len(r[0]) for r in rows + [("point", 0, {})]), 8]
    text = ["  ".join(["point".ljust(widths[0]), "seeds_ok"] + list(TABLE_HEADERS))]
    for label, n_ok, medians in rows:
        cells = [label.ljust(widths[0]), str(n_ok).ljust(8)]
        cells += [("-" if medians[h] is None else f"{medians[h]:.4f}").ljust(len(h))
                  for h in TABLE_HEADERS]
        text.append("  ".join(cells))
    (out / "ablation_table.txt").write_text("\n".join(text) + "\n")
    print("\n".join(text))
    for label, err in failures:
        print(f"FAILED {label}: {err}", file=sys.stderr)
    print(f"ablation sweep: {len(values)} points x {len(seeds)} seeds -> {out} "
          f"[{time.perf_counter() - t0:.2f}s]")
    return 0 if not failures else 3


# ---------------------------------------------------------------------------
# Reports

def cmd_report_compare(args, argv) -> int:
    report_a = evaluation.load_report(args.report_a)
    report_b = evaluation.load_report(args.report_b)
    rows = evaluation.compare_runs(report_a, report_b)
    text = evaluation.comparison_text(rows)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "comparison.csv").write_text(
            "\n".join(evaluation.comparison_csv_lines(rows)) + "\n")
        (out / "comparison.txt").write_text(text)
    print(text, end="")
    return 0


def cmd_report_hardness(args, argv) -> int:
    dataset = data.load_dataset(args.dataset)
    run = Path(args.run)
    round_dir = run / f"round_{args.round}"
    from .checkpoint import load_checkpoint
    model, _ = load_checkpoint(round_dir / "checkpoint.bin")
    table, _ = boosting.load_weight_table(round_dir / "weights.csv")
    manifest = json.loads((run / "ensemble.manifest").read_text())
    cfg_doc = config_mod.parse_document((run / "config.snapshot").read_text())
    cfg = config_mod.load_train_config(cfg_doc)
    del manifest

    from .model import embed_batch, unit_rows
    centers_unit, _ = unit_rows(model.centers)
    probs = trainer.compute_dataset_probs(model, dataset, cfg.margin)
    weights = table.lookup(dataset.train_ids)
    lines = ["sample_id,theta,prob,weight"]
    chunk = 1024
    for start in range(0, dataset.num_train, chunk):
        stop = min(start + chunk, dataset.num_train)
        emb = embed_batch(model, dataset.train_x[start:stop])
        labels = dataset.train_y[start:stop].astype(np.int64)
        cos_pos = np.clip(np.sum(emb * centers_unit[labels], axis=1), -1.0, 1.0)
        theta = np.arccos(cos_pos)
        for i in range(stop - start):
            row = start + i
            lines.append(
                f"{int(dataset.train_ids[row])},{format(theta[i], '.17g')},"
                f"{format(probs[row], '.17g')},{format(weights[row], '.17g')}"
            )
    Path(args.out).write_text("\n".join(lines) + "\n")
    print(f"wrote hardness dump for round {args.round} -> {args.out}")
    return 0


def cmd_report_scale_curve(args, argv) -> int:
    scales = [float(s) for s in args.scales.split(",")]
    thetas = np.linspace(0.0, math.pi / 2, args.points)
    lines = ["scale,theta_deg,prob"]
    for s in scales:
        for theta in thetas:
            p = margin.orthogonal_negatives_prob(float(theta), s, args.classes)
            lines.append(f"{format(s, '.17g')},{format(math.degrees(theta), '.17g')},"
                         f"{format(p, '.17g')}")
    Path(args.out).write_text("\n".join(lines) + "\n")
    print(f"wrote {len(scales)} scale curves ({args.points} points each) -> {args.out}")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sphereboost",
        description="Boosted ensembles of angular-margin embedding models "
                    "on the unit hypersphere.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate a synthetic dataset")
    p.add_argument("--config", help="dataset config document (data.* keys); "
                                    "defaults: 62 classes, 120 samples/class, dim 32, "
                                    "85%% easy sigma=0.15, hard sigma=0.8")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None,
                   help="overrides data.seed; the single source of randomness")
    p.add_argument("--export-csv", action="store_true",
                   help="also write samples.csv for inspection")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="run the boosted training pipeline")
    p.add_argument("--dataset", required=True, help="dataset.bin from `generate`")
    p.add_argument("--config", help="train config document (train./sgd./margin./model. keys); "
                                    "defaults: variant V1, 2 rounds, 30 epochs/round, "
                                    "batch 128, alpha 0.1, lambda 1.0, betas 1,0.1, "
                                    "SGD lr 0.1 (drops x10 at epochs 15,25), momentum 0.9, "
                                    "weight decay 1e-4, margin preset cosface at scale 30, "
                                    "fine-tune rounds 120 epochs at half rate")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--seed", type=int, default=None, help="overrides train.seed")
    p.add_argument("--resume", action="store_true",
                   help="reuse completed round_<k> directories (bit-identical to a "
                        "straight-through run)")
    p.add_argument("--stop-after-round", type=int, default=None,
                   help="stop the pipeline after this round (for staged runs)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained run on a dataset")
    p.add_argument("--run", required=True, help="run directory from `train`")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", default=None, help="output directory (default <run>/eval)")
    p.add_argument("--betas", default=None,
                   help="comma list overriding the manifest combination weights, "
                        "e.g. `1,0` to score model 1 alone")
    p.add_argument("--emit-roc", action="store_true", help="write far,tar points as roc.csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="sweep one parameter, train each point, "
                                      "emit a comparison table")
    p.add_argument("--dataset", required=True)
    p.add_argument("--config", help="base train config document")
    p.add_argument("--sweep", required=True,
                   help="param=v1,v2,... with param in alpha|variant|margin "
                        "(e.g. alpha=0.05,0.1,0.3,0.5)")
    p.add_argument("--seeds", default=None, help="comma list of seeds (default: 0)")
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1,
                   help="sweep points run as parallel processes")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="comparison tables and plot data")
    rsub = p.add_subparsers(dest="report_command", required=True)

    rp = rsub.add_parser("compare", help="metric-by-metric delta of two eval reports")
    rp.add_argument("report_a")
    rp.add_argument("report_b")
    rp.add_argument("--out", default=None, help="directory for comparison.csv/.txt")
    rp.set_defaults(func=cmd_report_compare)

    rp = rsub.add_parser("hardness", help="per-sample (theta, prob, weight) dump "
                                          "for one trained round")
    rp.add_argument("--run", required=True)
    rp.add_argument("--round", type=int, default=1)
    rp.add_argument("--dataset", required=True)
    rp.add_argument("--out", required=True)
    rp.set_defaults(func=cmd_report_hardness)

    rp = rsub.add_parser("scale-curve", help="softmax probability vs angle under "
                                             "orthogonal negatives, per scale")
    rp.add_argument("--scales", default="10,30,64", help="comma list of logit scales")
    rp.add_argument("--classes", type=int, default=10001)
    rp.add_argument("--points", type=int, default=91)
    rp.add_argument("--out", required=True)
    rp.set_defaults(func=cmd_report_scale_curve)

    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args, argv)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except (DataFormatError, ContractError, SchemaError, EmptyHardSetError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4
    except SphereBoostError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entrypoint() -> None:
    sys.exit(main())
