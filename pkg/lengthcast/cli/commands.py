"""
Subcommand handlers. Each returns the JSON-ready result printed on stdout.
"""

from __future__ import annotations

import argparse
from dataclasses import dataclass
from typing import Any, Dict, List, Sequence, Tuple

import numpy as np

from lengthcast.cli.dependencies import (
    echo,
    resolve_cost_model,
    resolve_synth_config,
    resolve_train_config,
)
from lengthcast.config import Settings
from lengthcast.errors import UsageError
from lengthcast.models.records import ActivationRecord
from lengthcast.models.schemas import PoolingMode, SchedulingPolicy
from lengthcast.services import dataio, plp, schedsim, trainer
from lengthcast.services.head_store import load_head, save_head
from lengthcast.services.pooling import entropy_importance_report
from lengthcast.services.synth import synth_generate
from lengthcast.utils import report_persistence
from lengthcast.utils.logging import get_logger
from lengthcast.utils.sanitization import (
    ensure_input_file,
    ensure_output_path,
    parse_choice_list,
    parse_float_list,
    parse_ratios,
)

logger = get_logger("commands")

SPLITS = ("train", "val", "test", "all")


@dataclass
class CommandContext:
    settings: Settings
    file_config: Dict[str, Dict[str, Any]]


def _split_seed(args: argparse.Namespace, ctx: CommandContext) -> int:
    return ctx.settings.default_seed if args.split_seed is None else args.split_seed


def _load_splits(args: argparse.Namespace, ctx: CommandContext) -> Tuple[List[ActivationRecord], ...]:
    records = dataio.read_dump(ensure_input_file(args.data, "--data"))
    return dataio.split(records, parse_ratios(args.ratios), _split_seed(args, ctx))


def _select(args: argparse.Namespace, ctx: CommandContext) -> List[ActivationRecord]:
    if args.split == "all":
        return dataio.read_dump(ensure_input_file(args.data, "--data"))
    train_set, val_set, test_set = _load_splits(args, ctx)[:3]
    return {"train": train_set, "val": val_set, "test": test_set}[args.split]


def _data_context(args: argparse.Namespace, ctx: CommandContext) -> Dict[str, Any]:
    return {
        "data": args.data,
        "ratios": list(parse_ratios(args.ratios)),
        "split_seed": _split_seed(args, ctx),
    }


def _length_stats(lengths: Sequence[int]) -> Dict[str, float]:
    values = np.asarray(lengths, dtype=np.float64)
    return {
        "mean_length": float(values.mean()),
        "median_length": float(np.median(values)),
        "min_length": int(values.min()),
        "max_length": int(values.max()),
    }


def cmd_synth(args: argparse.Namespace, ctx: CommandContext) -> Dict[str, Any]:
    out = ensure_output_path(args.out, "--out")
    config = resolve_synth_config(args, ctx.file_config, ctx.settings)
    records = synth_generate(config)
    manifest = dataio.write_dump(records, out, note=args.note)
    return {"records": len(records), "path": str(out), "manifest": str(manifest), **_length_stats([r.y for r in records])}


def cmd_train(args: argparse.Namespace, ctx: CommandContext) -> Dict[str, Any]:
    model_out = ensure_output_path(args.model_out, "--model-out")
    history_out = ensure_output_path(args.history_out, "--history-out") if args.history_out else None
    config = resolve_train_config(args, ctx.file_config, ctx.settings)
    train_set, val_set, _ = _load_splits(args, ctx)
    result = trainer.train(train_set, val_set, config)
    save_head(model_out, result.params, result.bins)
    if history_out:
        report_persistence.save_history(history_out, result.history, echo(config, **_data_context(args, ctx)))
    best = result.history[result.best_epoch]
    return {
        "model": str(model_out),
        "bins": result.bins.K,
        "best_epoch": result.best_epoch,
        "best_val_mae": best.val_mae,
        "train_records": len(train_set),
        "val_records": len(val_set),
    }


def _head_context(args: argparse.Namespace, params) -> Dict[str, Any]:
    return {
        "model": args.model,
        "trained_pooling": params.pooling.value,
        "trained_alpha": params.alpha,
        "loss_lambda": params.loss_lambda,
        "norm_scale": params.norm_scale,
        "normalize_mse": params.norm_scale != 1.0,
    }


def _alpha_for(args: argparse.Namespace, params) -> float:
    return params.alpha if args.alpha is None else args.alpha


def _pooling_for(args: argparse.Namespace, params) -> PoolingMode:
    # An explicit --pooling is a cross-pooling evaluation; otherwise pool as the head was trained.
    return params.pooling if args.pooling is None else PoolingMode(args.pooling)

def cmd_eval(args: argparse.Namespace, ctx: CommandContext) -> Dict[str, Any]:
    params, bins = load_head(ensure_input_file(args.model, "--model"))
    predictions_out = ensure_output_path(args.predictions_out, "--predictions-out") if args.predictions_out else None
    dataset = _select(args, ctx)
    pooling, alpha = _pooling_for(args, params), _alpha_for(args, params)
    config = {
        "command": "eval",
        "pooling": pooling.value,
        "alpha": alpha,
        "split": args.split,
        "bins": bins.K,
        "bin_scheme": bins.scheme.value,
        "target_space": bins.space.value,
        **_data_context(args, ctx),
        **_head_context(args, params),
    }
    report = trainer.evaluate(params, bins, dataset, pooling, alpha, config)
    if predictions_out:
        report_persistence.save_predictions(predictions_out, report)
    return {"split": args.split, "count": report.count, "mae": report.mae, "rmse": report.rmse}


def cmd_plp_train(args: argparse.Namespace, ctx: CommandContext) -> Dict[str, Any]:
    model_out = ensure_output_path(args.model_out, "--model-out")
    history_out = ensure_output_path(args.history_out, "--history-out") if args.history_out else None
    config = resolve_train_config(args, ctx.file_config, ctx.settings)
    train_set, val_set, _ = _load_splits(args, ctx)
    result = plp.plp_train(train_set, val_set, config)
    save_head(model_out, result.params, result.bins)
    if history_out:
        report_persistence.save_history(history_out, result.history, echo(config, **_data_context(args, ctx)))
    best = result.history[result.best_epoch]
    return {
        "model": str(model_out),
        "bins": result.bins.K,
        "best_epoch": result.best_epoch,
        "best_val_mae": best.val_mae,
        "best_val_loss": best.val_loss,
    }


def cmd_plp_eval(args: argparse.Namespace, ctx: CommandContext) -> Dict[str, Any]:
    params, bins = load_head(ensure_input_file(args.model, "--model"))
    curve_out = ensure_output_path(args.out, "--out") if args.out else None
    fractions = parse_float_list(args.fractions, "--fractions")
    dataset = _select(args, ctx)
    alpha = _alpha_for(args, params)
    curve = plp.plp_eval_curve(params, bins, dataset, fractions, alpha)
    if curve_out:
        config = {"command": "plp-eval", "alpha": alpha, "split": args.split, "fractions": fractions}
        config.update(_data_context(args, ctx))
        config.update(_head_context(args, params))
        report_persistence.save_curve(curve_out, curve, config)
    return {"split": args.split, "curve": [point.dict() for point in curve.checkpoints]}


def cmd_attribute(args: argparse.Namespace, ctx: CommandContext) -> Dict[str, Any]:
    params, bins = load_head(ensure_input_file(args.model, "--model"))
    out = ensure_output_path(args.out, "--out") if args.out else None
    dataset = _select(args, ctx)
    alpha = _alpha_for(args, params)
    report = entropy_importance_report(dataset, params, bins, alpha, args.entropy_bins)
    if out:
        config = {"command": "attribute", "alpha": alpha, "split": args.split, "entropy_bins": args.entropy_bins}
        config.update(_data_context(args, ctx))
        config.update(_head_context(args, params))
        config["pearson_r"] = report.pearson_r
        rows = [[b.entropy_lo, b.entropy_hi, b.count, b.mean_importance] for b in report.bins]
        report_persistence.save_csv(out, ["entropy_lo", "entropy_hi", "count", "mean_importance"], rows, config)
    return {
        "pearson_r": report.pearson_r,
        "num_tokens": report.num_tokens,
        "bin_means": [b.mean_importance for b in report.bins],
    }


def _simulation_jobs(args: argparse.Namespace, ctx: CommandContext) -> Tuple[List, Dict[str, Any]]:
    """Jobs to schedule plus the predictor settings to echo in the report header."""
    sources = [bool(args.jobs), bool(args.model), bool(args.num_jobs)]
    if sum(sources) != 1:
        raise UsageError("simulate needs exactly one of --jobs, --model (with --data) or --num-jobs.")
    if args.jobs:
        return schedsim.read_jobs(ensure_input_file(args.jobs, "--jobs")), {"jobs_file": args.jobs}
    if args.model:
        if not args.data:
            raise UsageError("--model requires --data.")
        params, bins = load_head(ensure_input_file(args.model, "--model"))
        dataset = _select(args, ctx)
        pooling, alpha = _pooling_for(args, params), _alpha_for(args, params)
        report = trainer.evaluate(params, bins, dataset, pooling, alpha)
        context = {"pooling": pooling.value, "alpha": alpha, "split": args.split, "data": args.data}
        context.update(_head_context(args, params))
        return schedsim.jobs_from_predictions(report, dataset), context
    seed = ctx.settings.default_seed if args.seed is None else args.seed
    jobs = schedsim.lognormal_jobs(args.num_jobs, seed=seed, prediction_noise=args.prediction_noise)
    return jobs, {"num_jobs": args.num_jobs, "prediction_noise": args.prediction_noise}


def cmd_simulate(args: argparse.Namespace, ctx: CommandContext) -> Dict[str, Any]:
    out = ensure_output_path(args.out, "--out") if args.out else None
    jobs_out = ensure_output_path(args.jobs_out, "--jobs-out") if args.jobs_out else None
    policies = parse_choice_list(args.policies, "--policies", SchedulingPolicy)
    if args.batch_size < 1:
        raise UsageError(f"--batch-size: must be >= 1, got {args.batch_size}.")
    cost = resolve_cost_model(args, ctx.file_config)
    seed = ctx.settings.default_seed if args.seed is None else args.seed
    jobs, source_context = _simulation_jobs(args, ctx)
    if args.arrival_rate is not None:
        jobs = schedsim.assign_poisson_arrivals(jobs, args.arrival_rate, seed)
    if jobs_out:
        schedsim.write_jobs(jobs_out, jobs)
    reports = schedsim.compare_policies(jobs, policies, args.batch_size, cost, seed)
    if out:
        config = echo(
            cost,
            command="simulate",
            batch_size=args.batch_size,
            seed=seed,
            jobs=len(jobs),
            arrival_rate=args.arrival_rate,
            policies=[p.value for p in policies],
            **source_context,
        )
        report_persistence.save_policy_table(out, reports, config)
    return {
        "jobs": len(jobs),
        "batch_size": args.batch_size,
        "policies": [
            {
                "policy": r.policy,
                "throughput": r.throughput,
                "mean_jct": r.mean_jct,
                "padding_ratio": r.padding_ratio,
            }
            for r in reports
        ],
    }


def cmd_inspect(args: argparse.Namespace, ctx: CommandContext) -> Dict[str, Any]:
    path = ensure_input_file(args.data, "--data")
    header = dataio.read_header(path)
    result: Dict[str, Any] = {"header": header.dict(), "has_manifest": dataio.manifest_path(path).exists()}
    if result["has_manifest"]:
        manifest_header, entries = dataio.read_manifest(path)
        result["note"] = manifest_header.note
        result["records"] = len(entries)
        result["prompt_tokens"] = sum(entry.n for entry in entries)
        result["response_tokens"] = sum(entry.T for entry in entries)
        lengths = [entry.y for entry in entries]
        result["first_ids"] = [entry.id for entry in entries[: args.head]]
    else:
        records = dataio.read_dump(path)
        result["records"] = len(records)
        result["prompt_tokens"] = sum(record.prompt.n for record in records)
        result["response_tokens"] = sum(record.T for record in records)
        lengths = [record.y for record in records]
        result["first_ids"] = [record.id for record in records[: args.head]]
    if lengths:
        result.update(_length_stats(lengths))
    return result


def cmd_ablate(args: argparse.Namespace, ctx: CommandContext) -> Dict[str, Any]:
    out = ensure_output_path(args.out, "--out") if args.out else None
    config = resolve_train_config(args, ctx.file_config, ctx.settings)
    train_set, val_set, test_set = _load_splits(args, ctx)
    if args.kind == "lambda":
        values = parse_float_list(args.lambdas, "--lambdas")
        rows = trainer.lambda_sweep(train_set, val_set, test_set, config, values)
        columns = ["lambda", "best_val_mae", "test_mae"]
    else:
        modes = parse_choice_list(args.modes, "--modes", PoolingMode)
        rows = trainer.pooling_ablation(train_set, val_set, test_set, config, modes)
        columns = ["pooling", "best_val_mae", "test_mae"]
    if out:
        report_persistence.save_csv(
            out,
            columns,
            [[row[column] for column in columns] for row in rows],
            echo(config, command="ablate", kind=args.kind, **_data_context(args, ctx)),
        )
    return {"kind": args.kind, "rows": rows}


HANDLERS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "plp-train": cmd_plp_train,
    "plp-eval": cmd_plp_eval,
    "attribute": cmd_attribute,
    "simulate": cmd_simulate,
    "inspect": cmd_inspect,
    "ablate": cmd_ablate,
}
