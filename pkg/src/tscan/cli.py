"""Command-line entry point: synth, prepare, train, eval, ablate, explain.

Every command logs to stderr, writes data only to files, and drops a
run_manifest.json (config hash, seeds, versions) beside its outputs so a
run can be reproduced bit-identically. Exit code 0 means every declared
output was written.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import metrics as mx
from . import pipeline as pl
from . import plots
from .layers import LayerConfig
from .model import FUSIONS, TASK_CLASSES, ModelConfig, TSCANModel, attention_report
from .training import TrainConfig, logistic_baseline, train

log = logging.getLogger("tscan")

TASK_ALIASES = {"ihm": "ihm", "los": "los", "decomp": "decompensation",
                "pheno": "phenotype"}


class CliError(Exception):
    pass


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {text}")
    return value


def _data_root(value: str | None, flag: str) -> Path:
    if value:
        return Path(value)
    env = os.environ.get("TSCAN_DATA_DIR")
    if env:
        return Path(env)
    raise CliError(f"{flag} not given and TSCAN_DATA_DIR is not set")


def _config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def _write_run_manifest(out_dir: Path, command: str, config: dict,
                        outputs: list[Path]) -> None:
    rel = [str(p.relative_to(out_dir)) if p.is_relative_to(out_dir) else str(p)
           for p in outputs]
    manifest = {
        "command": command,
        "config": config,
        "config_hash": _config_hash(config),
        "versions": {"tscan": __version__, "numpy": np.__version__,
                     "python": sys.version.split()[0]},
        "outputs": sorted(rel),
    }
    path = out_dir / "run_manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True,
                               default=str) + "\n")
    missing = [str(p) for p in outputs if not p.exists()]
    if missing:
        raise CliError(f"declared outputs missing: {missing}")


def _prepare_out_dir(path: Path, force: bool) -> None:
    if path.exists() and any(path.iterdir()) and not force:
        raise CliError(f"output dir {path} is not empty (use --force)")
    path.mkdir(parents=True, exist_ok=True)


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    out = Path(args.out)
    _prepare_out_dir(out, args.force)
    vdict = pl.load_dictionary(args.dict)
    log.info("generating %d patients (seed %d, dictionary %s)",
             args.patients, args.seed, vdict.name)
    cohort = pl.synth_cohort(args.seed, args.patients, vdict)
    pl.write_stays_csv(cohort.stays, out / "stays.csv")
    pl.write_events_csv(cohort.events, out / "events.csv")
    pl.write_phenotypes_csv(cohort.phenotypes, pl.PHENOTYPE_NAMES,
                            out / "phenotypes.csv")
    config = {"seed": args.seed, "patients": args.patients, "dict": args.dict}
    _write_run_manifest(out, "synth", config,
                        [out / "stays.csv", out / "events.csv",
                         out / "phenotypes.csv"])
    log.info("wrote %d stays, %d events to %s",
             len(cohort.stays), len(cohort.events), out)
    return 0


# ---------------------------------------------------------------------------
# prepare
# ---------------------------------------------------------------------------

def cmd_prepare(args) -> int:
    in_dir = _data_root(args.in_dir, "--in")
    out = Path(args.out)
    _prepare_out_dir(out, args.force)
    task = TASK_ALIASES[args.task]
    vdict = pl.load_dictionary(args.dict)
    stays = pl.read_stays_csv(in_dir / "stays.csv")
    events = pl.read_events_csv(in_dir / "events.csv")
    pheno_path = in_dir / "phenotypes.csv"
    phenotypes = pl.read_phenotypes_csv(pheno_path) if pheno_path.exists() else {}
    log.info("preparing task %s from %d stays / %d events", task, len(stays),
             len(events))
    manifest = pl.prepare_dataset(stays, events, phenotypes, vdict, task, out,
                                  t=args.t, stride=args.stride,
                                  split_seed=args.split_seed, jobs=args.jobs)
    config = {"task": task, "dict": args.dict, "t": manifest["t"],
              "stride": manifest["stride"], "split_seed": args.split_seed}
    outputs = [out / "manifest.json"]
    outputs += sorted((out / "episodes").glob("*.csv"))
    _write_run_manifest(out, "prepare", config, outputs)
    log.info("counts: %s", json.dumps(manifest["counts"]))
    return 0


# ---------------------------------------------------------------------------
# train / eval
# ---------------------------------------------------------------------------

def _load_experiment(path: Path) -> dict:
    spec = json.loads(path.read_text())
    if not isinstance(spec, dict):
        raise CliError(f"experiment file {path} must hold a JSON object")
    return spec


def _model_config_from(spec: dict, manifest: dict) -> ModelConfig:
    model_spec = dict(spec.get("model", {}))
    task = manifest["task"]
    for key, value in (("t", manifest["t"]), ("d", manifest["d"]),
                       ("task", task),
                       ("n_classes", TASK_CLASSES[task])):
        if key in model_spec and model_spec[key] != value:
            raise CliError(f"experiment model.{key}={model_spec[key]} conflicts "
                           f"with prepared data ({value})")
        model_spec[key] = value
    model_spec.setdefault("n", 4)
    layer = model_spec.get("layer", {})
    model_spec["layer"] = LayerConfig.from_dict(layer) if isinstance(layer, dict) \
        else layer
    return ModelConfig(**model_spec)


def _validate_checkpoint(model: TSCANModel, manifest: dict) -> None:
    cfg = model.config
    problems = []
    if cfg.d != manifest["d"]:
        problems.append(f"d={cfg.d} vs data {manifest['d']}")
    if cfg.t != manifest["t"]:
        problems.append(f"t={cfg.t} vs data {manifest['t']}")
    if cfg.task != manifest["task"]:
        problems.append(f"task={cfg.task} vs data {manifest['task']}")
    if problems:
        raise CliError("checkpoint/data mismatch: " + "; ".join(problems))


def _run_training(spec: dict, data_dir: Path, out: Path) -> tuple:
    manifest = pl.load_manifest(data_dir)
    model_config = _model_config_from(spec, manifest)
    train_config = TrainConfig.from_dict(spec.get("train", {}))
    train_samples = pl.load_prepared_samples(data_dir, "train", manifest)
    val_samples = pl.load_prepared_samples(data_dir, "val", manifest)
    if not train_samples or not val_samples:
        raise CliError(f"empty split: train={len(train_samples)} "
                       f"val={len(val_samples)}")
    log.info("training %s fusion=%s on %d train / %d val samples",
             model_config.task, model_config.fusion, len(train_samples),
             len(val_samples))
    result = train(train_samples, val_samples, model_config, train_config)
    log.info("best epoch %d: val %s = %.4f", result.log.best_epoch,
             result.log.metric_name, result.log.best_metric())
    return result, model_config, train_config, manifest


def cmd_train(args) -> int:
    spec = _load_experiment(Path(args.experiment))
    data_dir = _data_root(args.data or spec.get("data"), "--data")
    out = Path(args.out or spec.get("out") or "train-out")
    _prepare_out_dir(out, args.force)
    result, model_config, train_config, _ = _run_training(spec, data_dir, out)
    ckpt = out / "model.ckpt"
    result.model.save(ckpt)
    (out / "trainlog.csv").write_text(result.log.to_csv())
    plots.training_curve_figure(result.log, out / "training_curve.png")
    config = {"experiment": spec, "data": str(data_dir),
              "model": model_config.to_dict(), "train": train_config.to_dict()}
    _write_run_manifest(out, "train", config,
                        [ckpt, Path(str(ckpt) + ".json"),
                         out / "trainlog.csv", out / "training_curve.png"])
    return 0


def cmd_eval(args) -> int:
    data_dir = _data_root(args.data, "--data")
    manifest = pl.load_manifest(data_dir)
    model = TSCANModel.load(args.checkpoint)
    _validate_checkpoint(model, manifest)
    samples = pl.load_prepared_samples(data_dir, args.split, manifest)
    if not samples:
        raise CliError(f"no samples in split {args.split!r}")
    log.info("evaluating %d samples from split %s", len(samples), args.split)
    probs = model.predict_many([s.x for s in samples])
    labels = [s.y for s in samples]
    remaining = ([s.remaining_hours for s in samples]
                 if manifest["task"] == "los" else None)
    result = mx.evaluate_task(manifest["task"], probs, labels,
                              remaining_hours=remaining, with_ci=args.ci)
    result.metadata["split"] = args.split
    result.metadata["checkpoint"] = str(args.checkpoint)
    print(result.to_json())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        target = out / f"eval_{args.split}.json"
        target.write_text(result.to_json() + "\n")
        _write_run_manifest(out, "eval",
                            {"checkpoint": str(args.checkpoint),
                             "data": str(data_dir), "split": args.split},
                            [target])
    return 0


# ---------------------------------------------------------------------------
# ablate
# ---------------------------------------------------------------------------

def cmd_ablate(args) -> int:
    spec = _load_experiment(Path(args.experiment))
    data_dir = _data_root(args.data or spec.get("data"), "--data")
    out = Path(args.out or spec.get("out") or "ablate-out")
    _prepare_out_dir(out, args.force)
    manifest = pl.load_manifest(data_dir)
    val_samples = pl.load_prepared_samples(data_dir, "val", manifest)
    results: dict[str, mx.EvalResult] = {}
    rows = []
    for fusion in FUSIONS:
        fusion_spec = json.loads(json.dumps(spec))
        fusion_spec.setdefault("model", {})["fusion"] = fusion
        result, model_config, train_config, _ = _run_training(
            fusion_spec, data_dir, out)
        run_dir = out / fusion
        run_dir.mkdir(exist_ok=True)
        result.model.save(run_dir / "model.ckpt")
        (run_dir / "trainlog.csv").write_text(result.log.to_csv())
        probs = result.model.predict_many([s.x for s in val_samples])
        labels = [s.y for s in val_samples]
        remaining = ([s.remaining_hours for s in val_samples]
                     if manifest["task"] == "los" else None)
        ev = mx.evaluate_task(manifest["task"], probs, labels,
                              remaining_hours=remaining)
        results[fusion] = ev
        rows.append({"fusion": fusion, **ev.values})
        log.info("fusion %s: %s", fusion, json.dumps(ev.values))
    (out / "ablation.csv").write_text(mx.compare_csv(results))
    primary = ("auc_roc" if "auc_roc" in rows[0]
               else sorted(k for k in rows[0] if k != "fusion")[0])
    plots.ablation_figure(rows, primary, out / "ablation.png")
    config = {"experiment": spec, "data": str(data_dir), "split": "val"}
    _write_run_manifest(out, "ablate", config,
                        [out / "ablation.csv", out / "ablation.png"])
    return 0


# ---------------------------------------------------------------------------
# explain
# ---------------------------------------------------------------------------

def cmd_explain(args) -> int:
    data_dir = _data_root(args.data, "--data")
    manifest = pl.load_manifest(data_dir)
    model = TSCANModel.load(args.checkpoint)
    _validate_checkpoint(model, manifest)
    samples = pl.load_prepared_samples(data_dir, args.split, manifest)
    if args.samples is not None:
        samples = samples[:args.samples]
    if not samples:
        raise CliError(f"no samples in split {args.split!r}")
    out = Path(args.out)
    _prepare_out_dir(out, args.force)
    log.info("aggregating attention over %d samples", len(samples))
    report = attention_report(model, [s.x for s in samples])
    outputs = []
    if report.temporal_weights is not None:
        chunk_len = model.config.chunk_len
        for j, weights in enumerate(report.temporal_weights):
            path = out / f"temporal_chunk_{j}.csv"
            with open(path, "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["hour", "weight"])
                for i, w in enumerate(weights):
                    writer.writerow([j * chunk_len + i, repr(float(w))])
            outputs.append(path)
        outputs.append(plots.temporal_weights_figure(
            report, out / "temporal_weights.png"))
    if report.indicator_weights is not None:
        path = out / "indicators.csv"
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["variable", "weight"])
            for name, w in zip(manifest["columns"], report.indicator_weights):
                writer.writerow([name, repr(float(w))])
        outputs.append(path)
        outputs.append(plots.indicator_weights_figure(
            report, manifest["columns"], out / "indicator_weights.png"))
    report_path = out / "report.json"
    report_path.write_text(json.dumps(report.to_json_dict(), indent=2,
                                      sort_keys=True) + "\n")
    outputs.append(report_path)
    config = {"checkpoint": str(args.checkpoint), "data": str(data_dir),
              "split": args.split, "samples": args.samples}
    _write_run_manifest(out, "explain", config, outputs)
    return 0


# ---------------------------------------------------------------------------
# baseline (logistic reference)
# ---------------------------------------------------------------------------

def cmd_baseline(args) -> int:
    data_dir = _data_root(args.data, "--data")
    manifest = pl.load_manifest(data_dir)
    train_samples = pl.load_prepared_samples(data_dir, "train", manifest)
    eval_samples = pl.load_prepared_samples(data_dir, args.split, manifest)
    result = logistic_baseline(train_samples, eval_samples, manifest["task"])
    result.metrics.metadata["split"] = args.split
    print(result.metrics.to_json())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        target = out / f"baseline_{args.split}.json"
        target.write_text(result.metrics.to_json() + "\n")
        _write_run_manifest(out, "baseline",
                            {"data": str(data_dir), "split": args.split},
                            [target])
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tscan",
        description="Temporal-spatial correlation attention experiments on "
                    "clinical time series")
    parser.add_argument("--verbose", "-v", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic cohort")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--patients", type=_positive_int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dict", default="24")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prepare", help="filter, match, assemble, extract")
    p.add_argument("--task", choices=sorted(TASK_ALIASES), required=True)
    p.add_argument("--dict", default="24")
    p.add_argument("--in", dest="in_dir", default=None,
                   help="raw cohort dir (default $TSCAN_DATA_DIR)")
    p.add_argument("--out", required=True)
    p.add_argument("--t", type=_positive_int, default=None)
    p.add_argument("--stride", type=_positive_int, default=None)
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--jobs", type=_positive_int, default=1)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train from an experiment JSON")
    p.add_argument("--experiment", required=True)
    p.add_argument("--data", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", default=None)
    p.add_argument("--split", choices=["train", "val", "test"], default="test")
    p.add_argument("--ci", action="store_true",
                   help="bootstrap confidence intervals (1000 resamples)")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run all six fusion configurations")
    p.add_argument("--experiment", required=True)
    p.add_argument("--data", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("explain", help="export attention reports")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", default=None)
    p.add_argument("--split", choices=["train", "val", "test"], default="val")
    p.add_argument("--samples", type=_positive_int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("baseline", help="logistic-regression reference")
    p.add_argument("--data", default=None)
    p.add_argument("--split", choices=["train", "val", "test"], default="val")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_baseline)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(stream=sys.stderr,
                        level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliError, pl.PipelineError, mx.UndefinedMetricError,
            FileNotFoundError, ValueError) as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
