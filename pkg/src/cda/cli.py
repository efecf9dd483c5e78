"""Command-line entry point wiring data generation, training, cross-
validation, and reporting.

Exit codes: 0 success, 2 usage or configuration error, 3 data or file
format error, 4 training invariant violation. Default output locations
come from the CDA_RUNS_DIR environment variable (falling back to
./runs) with a run name derived from the resolved config, so identical
invocations land in the same place.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import evaluation
from .config import ExperimentConfig, load_config, save_config
from .datagen import derive_seed, generate_dataset, load_domain_arrays, load_manifest
from .errors import ConfigError, DataFormatError, FreezeViolationError
from .trainer import VARIANTS, TrainingData, run_variant

REPORT_FORMAT_VERSION = 1


def _runs_root() -> Path:
    return Path(os.environ.get("CDA_RUNS_DIR", "runs"))


def _default_run_dir(kind: str, config: ExperimentConfig) -> Path:
    digest = hashlib.sha256(
        json.dumps(config.to_dict(), sort_keys=True).encode("utf-8")
    ).hexdigest()[:10]
    return _runs_root() / f"{kind}-{config.variant}-{digest}"


def _load_benchmark(config: ExperimentConfig):
    if config.data.manifest is None:
        raise ConfigError("no dataset: pass --data or set data.manifest")
    manifest_path = Path(config.data.manifest)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.json"
    manifest = load_manifest(manifest_path)
    root = manifest_path.parent
    source = load_domain_arrays(manifest, root, "source")
    target = load_domain_arrays(manifest, root, "target")
    if (source.y < 0).any():
        raise DataFormatError("source samples must all be labeled")
    return manifest, source, target


def cmd_gen_data(args: argparse.Namespace) -> int:
    config = load_config(args.config, args.set, **{"data.seed": args.seed})
    source_spec, target_spec = config.data.domain_specs()
    manifest = generate_dataset(source_spec, target_spec, args.out)
    counts = {d: len(manifest.domain_samples(d)) for d in ("source", "target")}
    print(
        f"wrote {counts['source']} source + {counts['target']} target volumes "
        f"({'x'.join(map(str, manifest.dims))}) to {args.out}"
    )
    return 0


def _fold_jobs(config: ExperimentConfig, source, target, manifest):
    """All (repeat, fold) jobs for a crossval run, in deterministic order."""
    if (target.y < 0).any():
        raise DataFormatError("crossval needs ground-truth labels on every target sample")
    ids_by_class: dict[int, list[str]] = {}
    for sample_id, label in zip(target.ids, target.y):
        ids_by_class.setdefault(int(label), []).append(sample_id)
    index_of = {sample_id: i for i, sample_id in enumerate(target.ids)}
    jobs = []
    for repeat in range(config.cv.repeats):
        repeat_seed = derive_seed(config.cv.seed, "repeat", repeat)
        splits = evaluation.stratified_kfold(ids_by_class, config.cv.folds, repeat_seed)
        for split in splits:
            test_idx = np.array([index_of[i] for i in split.test_ids], dtype=np.int64)
            train_idx = np.array([index_of[i] for i in split.train_ids], dtype=np.int64)
            jobs.append((repeat, repeat_seed, split, test_idx, train_idx))
    return jobs


def _run_fold(config: ExperimentConfig, source, target, job, out_dir: Path | None):
    repeat, repeat_seed, split, test_idx, train_idx = job
    data = TrainingData(
        source_x=source.x,
        source_y=source.y,
        target_x=target.x[train_idx],
        eval_x=target.x[test_idx],
        eval_y=target.y[test_idx],
        eval_ids=[target.ids[i] for i in test_idx],
    )
    run_seed = derive_seed(config.init_seed, "repeat", repeat, "fold", split.fold_index)
    run_dir = None
    if out_dir is not None:
        run_dir = out_dir / "runs" / f"r{repeat}_f{split.fold_index}"
    _, report = run_variant(
        config.variant,
        data,
        config.model,
        config.plan,
        config.opt,
        run_seed,
        run_dir=run_dir,
        save_checkpoints=config.save_checkpoints,
        focal=config.focal if config.focal.alpha is not None else None,
        inference_branch=config.inference_branch,
    )
    return {
        "repeat": repeat,
        "repeat_seed": repeat_seed,
        "fold": split.fold_index,
        "run_seed": run_seed,
        "test_ids": list(split.test_ids),
        "report": report,
    }


def _pool_repeat(fold_results: list[dict], num_classes: int) -> dict | None:
    """One-vs-rest metrics over each repeat's pooled predictions (K >= 3)."""
    if num_classes < 3:
        return None
    preds: list[int] = []
    labels: list[int] = []
    for cell in fold_results:
        preds.extend(cell["report"]["predictions"]["pred"])
        labels.extend(cell["report"]["predictions"]["true"])
    return evaluation.one_vs_rest_metrics(preds, labels, num_classes)


def build_crossval_report(config: ExperimentConfig, results: list[dict], num_classes: int) -> dict:
    results = sorted(results, key=lambda r: (r["repeat"], r["fold"]))
    repeats = []
    for repeat in range(config.cv.repeats):
        cells = [r for r in results if r["repeat"] == repeat]
        repeats.append(
            {
                "repeat": repeat,
                "seed": cells[0]["repeat_seed"],
                "folds": [
                    {
                        "fold": c["fold"],
                        "run_seed": c["run_seed"],
                        "test_ids": c["test_ids"],
                        "metrics": c["report"]["metrics"],
                        "counters": c["report"]["counters"],
                        "flags": c["report"]["flags"],
                        "predictions": c["report"]["predictions"],
                    }
                    for c in cells
                ],
                "pooled": _pool_repeat(cells, num_classes),
            }
        )
    fold_metrics = [c["report"]["metrics"] for c in results]
    aggregate = evaluation.aggregate_metrics(fold_metrics)
    pooled_cells = [r["pooled"] for r in repeats if r["pooled"] is not None]
    if pooled_cells:
        aggregate["pooled"] = evaluation.aggregate_metrics(pooled_cells)
    return {
        "format_version": REPORT_FORMAT_VERSION,
        "kind": "crossval",
        "variant": config.variant,
        "cv": {"folds": config.cv.folds, "repeats": config.cv.repeats, "seed": config.cv.seed},
        "metadata": {
            "std_convention": "population",
            "num_classes": num_classes,
            "seeds": {
                "data": config.data.seed,
                "init": config.init_seed,
                "cv": config.cv.seed,
            },
        },
        "repeats": repeats,
        "aggregate": aggregate,
        "p_values": {},
    }


def crossval_csv_rows(report: dict) -> list[dict]:
    rows = []
    for repeat in report["repeats"]:
        for fold in repeat["folds"]:
            row = {"variant": report["variant"], "repeat": repeat["repeat"], "fold": fold["fold"]}
            for key, value in fold["metrics"].items():
                if isinstance(value, (int, float)):
                    row[key] = value
            rows.append(row)
    return rows


def _write_csv(rows: list[dict], path: Path) -> None:
    import csv

    columns: list[str] = []
    for row in rows:
        for key in row:
            if key not in columns:
                columns.append(key)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        writer.writerows(rows)


def cmd_crossval(args: argparse.Namespace) -> int:
    config = load_config(
        args.config,
        args.set,
        **{
            "data.manifest": str(Path(args.data).resolve()) if args.data else None,
            "variant": args.variant,
            "cv.folds": args.folds,
            "cv.repeats": args.repeats,
        },
    )
    manifest, source, target = _load_benchmark(config)
    out_dir = Path(args.out) if args.out else _default_run_dir("crossval", config)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_config(config, out_dir / "config.json")

    jobs = _fold_jobs(config, source, target, manifest)
    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(lambda j: _run_fold(config, source, target, j, out_dir), jobs))
    else:
        results = [_run_fold(config, source, target, job, out_dir) for job in jobs]

    report = build_crossval_report(config, results, manifest.num_classes)
    (out_dir / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    _write_csv(crossval_csv_rows(report), out_dir / "report.csv")
    agg = report["aggregate"]
    shown = ", ".join(
        f"{k} {v['mean']:.4f}±{v['std']:.4f}" for k, v in agg.items() if isinstance(v, dict) and "mean" in v
    )
    print(f"crossval {config.variant}: {shown}")
    print(f"report: {out_dir / 'report.json'}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    config = load_config(
        args.config,
        args.set,
        **{"data.manifest": str(Path(args.data).resolve()), "variant": args.variant},
    )
    manifest, source, target = _load_benchmark(config)
    labeled = target.y >= 0
    if not labeled.any():
        raise DataFormatError("train needs at least one labeled target sample to evaluate")
    out_dir = Path(args.out) if args.out else _default_run_dir("train", config)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_config(config, out_dir / "config.json")
    data = TrainingData(
        source_x=source.x,
        source_y=source.y,
        target_x=target.x,
        eval_x=target.x[labeled],
        eval_y=target.y[labeled],
        eval_ids=[i for i, ok in zip(target.ids, labeled) if ok],
    )
    _, report = run_variant(
        config.variant,
        data,
        config.model,
        config.plan,
        config.opt,
        config.init_seed,
        run_dir=out_dir,
        save_checkpoints=config.save_checkpoints,
        focal=config.focal if config.focal.alpha is not None else None,
        inference_branch=config.inference_branch,
    )
    shown = ", ".join(
        f"{k} {v:.4f}" for k, v in report["metrics"].items() if isinstance(v, (int, float))
    )
    print(f"train {config.variant}: {shown}")
    print(f"run directory: {out_dir}")
    return 0


def _load_run_report(run_dir: Path) -> dict:
    path = run_dir / "report.json"
    if not path.exists():
        raise DataFormatError(f"{run_dir}: no report.json found")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: malformed report: {exc}") from exc


def _fold_series(report: dict, metric: str) -> list[float]:
    """Per-(repeat, fold) metric values in deterministic order."""
    values = []
    for repeat in report["repeats"]:
        for fold in repeat["folds"]:
            if metric in fold["metrics"]:
                values.append(fold["metrics"][metric])
    return values


def cmd_report(args: argparse.Namespace) -> int:
    reports = []
    for run in args.runs:
        report = _load_run_report(Path(run))
        if "repeats" not in report:
            raise DataFormatError(f"{run}: not an aggregated crossval report")
        reports.append(report)
    by_variant = {r["variant"]: r for r in reports}
    if len(by_variant) != len(reports):
        raise ConfigError("multiple reports share a variant id; pass one run per variant")

    summary: dict = {"format_version": REPORT_FORMAT_VERSION, "variants": {}}
    rows: list[dict] = []
    for variant, report in sorted(by_variant.items()):
        summary["variants"][variant] = {
            "aggregate": report["aggregate"],
            "cv": report["cv"],
            "p_values": dict(report.get("p_values", {})),
        }
        rows.extend(crossval_csv_rows(report))

    if args.ttest is not None:
        if args.ttest not in by_variant:
            raise ConfigError(f"t-test baseline {args.ttest!r} not among the given runs")
        base = by_variant[args.ttest]
        for variant, report in by_variant.items():
            if variant == args.ttest:
                continue
            p_values = {}
            for metric in report["repeats"][0]["folds"][0]["metrics"]:
                series = _fold_series(report, metric)
                base_series = _fold_series(base, metric)
                if (
                    series
                    and len(series) == len(base_series)
                    and all(isinstance(v, (int, float)) for v in series)
                ):
                    result = evaluation.paired_t_test(series, base_series)
                    p_values[metric] = {
                        "vs": args.ttest,
                        "p": result.p_value,
                        "statistic": result.statistic,
                        "df": result.df,
                        "flags": list(result.flags),
                    }
            summary["variants"][variant]["p_values"] = p_values

    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    if args.csv:
        _write_csv(rows, Path(args.csv))
    for variant, entry in sorted(summary["variants"].items()):
        agg = entry["aggregate"]
        shown = ", ".join(
            f"{k} {v['mean']:.4f}±{v['std']:.4f}"
            for k, v in agg.items()
            if isinstance(v, dict) and "mean" in v
        )
        print(f"{variant}: {shown}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cda",
        description="Cross-site volumetric classification: synthetic benchmark, "
        "three-stage adaptation training, cross-validated evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="dotted config override, e.g. plan.tau=0.05 (repeatable)",
    )

    p = sub.add_parser("gen-data", parents=[common], help="synthesize the two-domain benchmark")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", type=int, default=None, help="data seed (overrides config)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train one variant, write a run directory")
    p.add_argument("--data", required=True, help="dataset directory or manifest path")
    p.add_argument("--out", default=None, help="run directory (default under CDA_RUNS_DIR)")
    p.add_argument("--variant", choices=sorted(VARIANTS), default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("crossval", parents=[common], help="k-fold multi-repeat evaluation")
    p.add_argument("--data", default=None, help="dataset directory or manifest path")
    p.add_argument("--out", default=None)
    p.add_argument("--variant", choices=sorted(VARIANTS), default=None)
    p.add_argument("--folds", type=int, default=None)
    p.add_argument("--repeats", type=int, default=None)
    p.add_argument("--jobs", type=int, default=1, help="concurrent fold jobs")
    p.set_defaults(func=cmd_crossval)

    p = sub.add_parser("report", parents=[common], help="summarize finished crossval runs")
    p.add_argument("--runs", nargs="+", required=True, help="crossval run directories")
    p.add_argument("--out", required=True, help="summary JSON path")
    p.add_argument("--csv", default=None, help="flat CSV path")
    p.add_argument("--ttest", default=None, metavar="VARIANT", help="paired t-test baseline variant")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DataFormatError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except FreezeViolationError as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
