"""Command-line entry points: dataset generation, training, evaluation,
ablation sweeps and gradient checks.

Every command writes a run manifest (config snapshot, seed, dataset
fingerprint, package version, metric history) sufficient to reproduce the
run. Exit codes: 0 success, 2 usage / configuration error, 3 numeric
failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .core import (
    ConfigError,
    LossWeights,
    ModelConfig,
    NumericsError,
    ParseError,
    RangeError,
    ablation_config,
    desk_config,
    validate_config,
)
from .data import (
    SynthSpec,
    dataset_fingerprint,
    generate_synthetic,
    load_jsonl,
    save_dataset,
    save_predictions,
)
from .evalkit import correspondence_alignment_analysis, evaluate_dataset
from .pipeline import (
    GRADCHECK_TERMS,
    TrainConfig,
    gradient_check,
    load_checkpoint,
    predict_dataset,
    save_checkpoint,
    train,
)

USAGE_ERROR = 2
NUMERIC_ERROR = 3

CONFIG_SECTIONS = {"model": ModelConfig, "loss": LossWeights, "train": TrainConfig}


def default_run_config() -> dict:
    """Full config with every field explicit (model / loss / train)."""
    return {
        "model": dataclasses.asdict(desk_config()),
        "loss": dataclasses.asdict(LossWeights()),
        "train": dataclasses.asdict(TrainConfig()),
    }


def load_run_config(path: str | None) -> tuple[ModelConfig, LossWeights, TrainConfig, dict]:
    """Parse a JSON run config. Provided files must be complete: every field
    of every section spelled out, so manifests stay diffable."""
    if path is None:
        raw = default_run_config()
    else:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        for section, cls in CONFIG_SECTIONS.items():
            if section not in raw:
                raise ConfigError(f"missing config field: {section}")
            for f in dataclasses.fields(cls):
                if f.name not in raw[section]:
                    raise ConfigError(f"missing config field: {section}.{f.name}")
            unknown = set(raw[section]) - {f.name for f in dataclasses.fields(cls)}
            if unknown:
                raise ConfigError(f"unknown config fields in {section}: {sorted(unknown)}")
    model = validate_config(ModelConfig(**raw["model"]))
    loss = LossWeights(**raw["loss"])
    tc = TrainConfig(**raw["train"])
    return model, loss, tc, raw


def _write_manifest(path: Path, payload: dict) -> None:
    payload = dict(payload)
    payload["artifact_version"] = __version__
    path.write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")


# -- subcommands ----------------------------------------------------------------


def cmd_gen(args) -> int:
    if args.spec:
        try:
            spec = SynthSpec.from_json(json.loads(Path(args.spec).read_text(encoding="utf-8")))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"bad synthetic spec file: {exc}") from exc
    else:
        spec = SynthSpec()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records = generate_synthetic(spec)
    jsonl = out / "dataset.jsonl"
    save_dataset(records, jsonl)
    fingerprint = dataset_fingerprint(jsonl)
    _write_manifest(out / "manifest.json", {
        "command": "gen",
        "spec": spec.to_json(),
        "n_records": len(records),
        "fingerprint": fingerprint,
    })
    print(f"wrote {len(records)} records to {jsonl} (fingerprint {fingerprint[:12]})")
    return 0


def _load_data(data_dir: str, clip_seconds: float):
    jsonl = Path(data_dir) / "dataset.jsonl"
    if not jsonl.is_file():
        raise ConfigError(f"no dataset.jsonl under {data_dir}")
    return jsonl, load_jsonl(jsonl, clip_seconds)


def cmd_train(args) -> int:
    model_cfg, loss_w, tc, raw_cfg = load_run_config(args.config)
    if args.epochs is not None:
        tc = tc.replace(epochs=args.epochs)
    if args.row:
        model_cfg = ablation_config(args.row, model_cfg)
        raw_cfg["model"] = dataclasses.asdict(model_cfg)
    jsonl, records = _load_data(args.data, args.clip_seconds)
    split = max(1, int(len(records) * (1.0 - args.holdout)))
    train_recs, eval_recs = records[:split], records[split:]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    state = load_checkpoint(args.resume) if args.resume else None

    def checkpoint_hook(current):
        if args.ckpt_interval and current.epoch % args.ckpt_interval == 0:
            save_checkpoint(current, out / f"epoch{current.epoch:04d}.ckpt")

    try:
        state = train(train_recs, model_cfg, loss_w, tc, seed=args.seed,
                      eval_records=eval_recs or None, state=state,
                      log=lambda e: print(f"epoch {e['epoch']}: loss {e['loss']:.4f}"),
                      epoch_hook=checkpoint_hook)
    except NumericsError:
        if state is not None:
            save_checkpoint(state, out / "last_good.ckpt")
        raise
    save_checkpoint(state, out / "final.ckpt")
    if eval_recs:
        report = evaluate_dataset(state.model, eval_recs)
        report.save(out / "metrics.json")
    _write_manifest(out / "manifest.json", {
        "command": "train",
        "config": raw_cfg,
        "seed": args.seed,
        "epochs_run": state.epoch,
        "dataset_fingerprint": dataset_fingerprint(jsonl),
        "holdout": args.holdout,
        "history": state.history,
    })
    print(f"trained {state.epoch} epochs; checkpoint at {out / 'final.ckpt'}")
    return 0


def cmd_eval(args) -> int:
    state = load_checkpoint(args.ckpt)
    jsonl, records = _load_data(args.data, args.clip_seconds)
    if records and records[0].features.clips.shape[1] != state.model.cfg.d_feat:
        raise ConfigError(
            f"feature dim {records[0].features.clips.shape[1]} does not match "
            f"checkpoint d_feat {state.model.cfg.d_feat}")
    triples = predict_dataset(state.model, records)
    report = evaluate_dataset(state.model, records)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.save(out)
    if args.predictions:
        save_predictions([(rec.features.query_id, pred, rec.duration_s)
                          for rec, pred, _ in triples], args.predictions)
    if args.analysis:
        analysis = correspondence_alignment_analysis(
            [corr for _, _, corr in triples],
            [rec.gt.saliency for rec, _, _ in triples],
            [q["avg_map"] for q in report.per_query],
        )
        analysis.save_csv(out.with_suffix(".alignment.csv"))
    _write_manifest(out.with_suffix(".manifest.json"), {
        "command": "eval",
        "checkpoint": str(args.ckpt),
        "dataset_fingerprint": dataset_fingerprint(jsonl),
        "metrics": report.to_json(),
    })
    print(f"r1@0.5={report.r1[0.5]:.4f} map_avg={report.map_avg:.4f} "
          f"hd_map={report.hd_map:.4f} hit1={report.hit1:.4f}")
    return 0


def _ablate_one(packed):
    """Worker for one (row-or-variant, seed) training run."""
    kind, value, seed, data_dir, clip_seconds, config_path, epochs, holdout = packed
    model_cfg, loss_w, tc, _ = load_run_config(config_path)
    if epochs is not None:
        tc = tc.replace(epochs=epochs)
    tc = tc.replace(eval_interval=0, target_r1_05=None, target_hd_map=None)
    if kind == "row":
        model_cfg = ablation_config(value, model_cfg)
    else:
        model_cfg = ablation_config("g", model_cfg).replace(attention_variant=value)
    _, records = _load_data(data_dir, clip_seconds)
    split = max(1, int(len(records) * (1.0 - holdout)))
    state = train(records[:split], model_cfg, loss_w, tc, seed=seed,
                  eval_records=records[split:] or records[:split])
    metrics = state.history[-1]["metrics"]
    return kind, value, seed, metrics


def cmd_ablate(args) -> int:
    rows = [r.strip() for r in args.rows.split(",") if r.strip()] if args.rows else []
    variants = [v.strip() for v in args.variants.split(",") if v.strip()] if args.variants else []
    for row in rows:
        if row not in "abcdefg":
            raise ConfigError(f"unknown ablation row {row!r}")
    for var in variants:
        if var not in ("aca", "plain_softmax", "sigmoid", "softmax_one"):
            raise ConfigError(f"unknown attention variant {var!r}")
    if not rows and not variants:
        raise ConfigError("nothing to ablate: pass --rows and/or --variants")

    jobs = []
    for row in rows:
        for seed in range(args.seeds):
            jobs.append(("row", row, seed, args.data, args.clip_seconds,
                         args.config, args.epochs, args.holdout))
    for var in variants:
        for seed in range(args.seeds):
            jobs.append(("variant", var, seed, args.data, args.clip_seconds,
                         args.config, args.epochs, args.holdout))

    if args.jobs > 1:
        from multiprocessing import Pool

        with Pool(args.jobs) as pool:
            results = pool.map(_ablate_one, jobs)
    else:
        results = [_ablate_one(j) for j in jobs]

    grouped: dict[tuple[str, str], list[dict]] = {}
    for kind, value, seed, metrics in results:
        grouped.setdefault((kind, value), []).append(metrics)

    columns = ["r1@0.5", "r1@0.7", "map@0.5", "map@0.75", "map_avg", "hd_map", "hit1"]
    table_rows = []
    for (kind, value), reports in grouped.items():
        def cell(pick):
            vals = [pick(m) for m in reports]
            return f"{np.mean(vals):.3f}±{np.std(vals):.3f}"
        table_rows.append({
            "config": f"{kind}:{value}",
            "r1@0.5": cell(lambda m: m["r1"]["0.5"]),
            "r1@0.7": cell(lambda m: m["r1"]["0.7"]),
            "map@0.5": cell(lambda m: m["map"]["0.5"]),
            "map@0.75": cell(lambda m: m["map"]["0.75"]),
            "map_avg": cell(lambda m: m["map_avg"]),
            "hd_map": cell(lambda m: m["hd_map"]),
            "hit1": cell(lambda m: m["hit1"]),
        })

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "ablation.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["config"] + columns)
        writer.writeheader()
        writer.writerows(table_rows)
    _write_manifest(out / "manifest.json", {
        "command": "ablate",
        "rows": rows, "variants": variants, "seeds": args.seeds,
        "epochs": args.epochs,
        "dataset_fingerprint": dataset_fingerprint(Path(args.data) / "dataset.jsonl"),
        "results": [{"kind": k, "value": v, "seed": s, "metrics": m}
                    for k, v, s, m in results],
    })
    header = f"{'config':16s}" + "".join(f"{c:>16s}" for c in columns)
    print(header)
    for r in table_rows:
        print(f"{r['config']:16s}" + "".join(f"{r[c]:>16s}" for c in columns))
    return 0


def cmd_gradcheck(args) -> int:
    report = gradient_check(seed=args.seed, coords_per_group=args.coords)
    failed = [t for t, r in report.items() if not r["passed"]]
    for term in GRADCHECK_TERMS:
        r = report[term]
        status = "ok" if r["passed"] else "FAIL"
        print(f"{term:10s} max_rel_err={r['max_rel_err']:.3e} [{status}]")
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2), encoding="utf-8")
    if failed:
        raise NumericsError(f"gradient check failed for: {', '.join(failed)}")
    return 0


# -- argument parsing --------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vtground",
        description="Desk-scale video temporal grounding: generate data, train, "
                    "evaluate, ablate, gradient-check.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--spec", help="JSON synthetic spec (defaults used if omitted)")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--config", help="JSON run config (all fields explicit)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output run directory")
    p.add_argument("--epochs", type=int, help="override epochs from config")
    p.add_argument("--row", help="ablation row letter a..g applied to the model config")
    p.add_argument("--resume", help="resume from checkpoint")
    p.add_argument("--holdout", type=float, default=0.2, help="eval fraction")
    p.add_argument("--ckpt-interval", type=int, default=0,
                   help="also checkpoint every N epochs (0: final only)")
    p.add_argument("--clip-seconds", type=float, default=2.0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="metric report JSON path")
    p.add_argument("--predictions", help="also write predictions JSONL here")
    p.add_argument("--analysis", action=argparse.BooleanOptionalAction, default=True,
                   help="emit the correspondence-alignment CSV")
    p.add_argument("--clip-seconds", type=float, default=2.0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train ablation rows / attention variants")
    p.add_argument("--data", required=True)
    p.add_argument("--rows", help="comma list of rows a..g")
    p.add_argument("--variants", help="comma list of attention variants")
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--epochs", type=int)
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1, help="parallel training workers")
    p.add_argument("--holdout", type=float, default=0.2)
    p.add_argument("--clip-seconds", type=float, default=2.0)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--coords", type=int, default=3, help="probe coordinates per parameter group")
    p.add_argument("--out", help="write the JSON report here")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits with 2 on usage errors already
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ConfigError, ParseError, RangeError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except NumericsError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return NUMERIC_ERROR


if __name__ == "__main__":
    sys.exit(main())
