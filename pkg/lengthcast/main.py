from __future__ import annotations

import argparse
import json
import sys
from typing import Any, Dict, Optional, Sequence

from lengthcast import __version__
from lengthcast.cli.commands import HANDLERS, SPLITS, CommandContext
from lengthcast.cli.dependencies import get_app_settings, load_config_file
from lengthcast.errors import LengthcastError, UsageError
from lengthcast.models.schemas import BinScheme, CostModel, PoolingMode, SynthConfig, TrainConfig
from lengthcast.services.dataio import DumpFormatError
from lengthcast.utils.logging import bind_run_context, configure_logging, get_logger

logger = get_logger("main")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

STORED_ALPHA_HELP = "EGTP temperature (default: the alpha stored in the model)"


def _default(model, field: str) -> str:
    info = model.__fields__[field]
    default = info.default.value if hasattr(info.default, "value") else info.default
    return f"{info.field_info.description} (default: {default})"


def _add_train_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("training")
    group.add_argument("--learning-rate", dest="learning_rate", type=float, help=_default(TrainConfig, "learning_rate"))
    group.add_argument("--epochs", type=int, help=_default(TrainConfig, "epochs"))
    group.add_argument("--batch-size", dest="batch_size", type=int, help=_default(TrainConfig, "batch_size"))
    group.add_argument("--seed", type=int, help=_default(TrainConfig, "seed") + "; env LENGTHCAST_SEED")
    group.add_argument("--lambda", dest="loss_lambda", type=float, help=_default(TrainConfig, "loss_lambda"))
    group.add_argument("--num-bins", dest="num_bins", type=int, help=_default(TrainConfig, "num_bins"))
    group.add_argument("--beta1", type=float, help=_default(TrainConfig, "beta1"))
    group.add_argument("--beta2", type=float, help=_default(TrainConfig, "beta2"))
    group.add_argument("--epsilon", type=float, help=_default(TrainConfig, "epsilon"))
    group.add_argument("--weight-decay", dest="weight_decay", type=float, help=_default(TrainConfig, "weight_decay"))
    group.add_argument(
        "--pooling", choices=[m.value for m in PoolingMode], help=_default(TrainConfig, "pooling")
    )
    group.add_argument("--alpha", type=float, help=_default(TrainConfig, "alpha"))
    group.add_argument(
        "--bin-scheme", dest="bin_scheme", choices=[s.value for s in BinScheme], help=_default(TrainConfig, "bin_scheme")
    )
    group.add_argument(
        "--raw-mse",
        dest="normalize_mse",
        action="store_const",
        const=False,
        help="Use the unnormalized squared error in the joint loss",
    )
    group.add_argument(
        "--log-scale", dest="log_scale", action="store_const", const=True, help=_default(TrainConfig, "log_scale")
    )
    group.add_argument(
        "--no-standardize", dest="standardize", action="store_const", const=False,
        help="Train on raw pooled inputs",
    )
    group.add_argument("--max-plp-steps", dest="max_plp_steps", type=int, help=_default(TrainConfig, "max_plp_steps"))


def _add_synth_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("synthetic data")
    for field, flag, kind in (
        ("num_records", "--num-records", int),
        ("d", "--dim", int),
        ("prompt_len_min", "--prompt-len-min", int),
        ("prompt_len_max", "--prompt-len-max", int),
        ("length_mu", "--length-mu", float),
        ("length_sigma", "--length-sigma", float),
        ("max_length", "--max-length", int),
        ("signal_fraction", "--signal-fraction", float),
        ("signal_entropy_hi", "--signal-entropy-hi", float),
        ("signal_entropy_lo", "--signal-entropy-lo", float),
        ("noise_sigma", "--noise-sigma", float),
        ("seed", "--seed", int),
    ):
        group.add_argument(flag, dest=field, type=kind, help=_default(SynthConfig, field))
    group.add_argument(
        "--no-response",
        dest="include_response",
        action="store_const",
        const=False,
        help="Write static-only records without response activations",
    )


def _add_data_flags(parser: argparse.ArgumentParser, with_split: bool = False) -> None:
    parser.add_argument("--data", required=True, help="FLEN activation dump")
    parser.add_argument("--ratios", default="3:1:1", help="train:val:test split ratios (default: 3:1:1)")
    parser.add_argument("--split-seed", dest="split_seed", type=int, help="Split shuffle seed (default: LENGTHCAST_SEED, 42)")
    if with_split:
        parser.add_argument("--split", choices=SPLITS, default="test", help="Records to use (default: test)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lengthcast",
        description="Output-length prediction from hidden activations and batch-scheduling simulation.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", help="JSON run-config with train/synth/cost sections (env LENGTHCAST_CONFIG)")
    parser.add_argument("--log-level", dest="log_level", help="Override LOG_LEVEL (default: INFO)")
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="Generate a planted-signal synthetic dump")
    synth.add_argument("--out", required=True, help="Output FLEN path; the manifest goes next to it")
    synth.add_argument("--note", help="Free-form note stored in the manifest header")
    _add_synth_flags(synth)

    train = sub.add_parser("train", help="Train a static length head")
    _add_data_flags(train)
    train.add_argument("--model-out", dest="model_out", required=True, help="Output FLHD model path")
    train.add_argument("--history-out", dest="history_out", help="Per-epoch history CSV")
    _add_train_flags(train)

    evaluate = sub.add_parser("eval", help="Evaluate a static head (MAE/RMSE)")
    _add_data_flags(evaluate, with_split=True)
    evaluate.add_argument("--model", required=True, help="FLHD model path")
    evaluate.add_argument(
        "--pooling", choices=[m.value for m in PoolingMode],
        help="Cross-pooling override for the prompt pooling (default: the pooling stored in the model)",
    )
    evaluate.add_argument("--alpha", type=float, help=STORED_ALPHA_HELP)
    evaluate.add_argument("--predictions-out", dest="predictions_out", help="Per-record predictions CSV")

    plp_train = sub.add_parser("plp-train", help="Train a progressive remaining-length head")
    _add_data_flags(plp_train)
    plp_train.add_argument("--model-out", dest="model_out", required=True, help="Output FLHD model path")
    plp_train.add_argument("--history-out", dest="history_out", help="Per-epoch history CSV")
    _add_train_flags(plp_train)

    plp_eval = sub.add_parser("plp-eval", help="Remaining-length MAE at fractions of each response")
    _add_data_flags(plp_eval, with_split=True)
    plp_eval.add_argument("--model", required=True, help="FLHD model path from plp-train")
    plp_eval.add_argument("--fractions", default="0,0.25,0.5,0.75", help="Increasing fractions in [0, 1) (default: 0,0.25,0.5,0.75)")
    plp_eval.add_argument("--alpha", type=float, help=STORED_ALPHA_HELP)
    plp_eval.add_argument("--out", help="Curve CSV (fraction, mae)")

    attribute = sub.add_parser("attribute", help="Token entropy vs. gradient importance")
    _add_data_flags(attribute, with_split=True)
    attribute.add_argument("--model", required=True, help="FLHD model path from train")
    attribute.add_argument("--alpha", type=float, help=STORED_ALPHA_HELP)
    attribute.add_argument("--entropy-bins", dest="entropy_bins", type=int, default=5, help="Equal-width entropy bins (default: 5)")
    attribute.add_argument("--out", help="Per-bin CSV")

    simulate = sub.add_parser("simulate", help="Compare batching policies")
    simulate.add_argument("--jobs", help="Jobs CSV (id, prompt_len, true_out, predicted_out[, submit_time])")
    simulate.add_argument("--model", help="Predict job lengths with this FLHD head over --data")
    simulate.add_argument("--data", help="FLEN dump used with --model")
    simulate.add_argument("--ratios", default="3:1:1", help="Split ratios used with --model (default: 3:1:1)")
    simulate.add_argument("--split-seed", dest="split_seed", type=int, help="Split seed used with --model")
    simulate.add_argument("--split", choices=SPLITS, default="test", help="Records used with --model (default: test)")
    simulate.add_argument(
        "--pooling", choices=[m.value for m in PoolingMode],
        help="Pooling used with --model (default: the pooling stored in the model)",
    )
    simulate.add_argument("--alpha", type=float, help=STORED_ALPHA_HELP)
    simulate.add_argument("--num-jobs", dest="num_jobs", type=int, help="Generate this many seeded lognormal jobs")
    simulate.add_argument(
        "--prediction-noise", dest="prediction_noise", type=float, default=0.0,
        help="Log-scale noise on generated predictions (default: 0)",
    )
    simulate.add_argument(
        "--policies", default="fcfs,sjf_oracle,sjf_predicted",
        help="Comma-separated policies among fcfs, random, sjf_oracle, sjf_predicted",
    )
    simulate.add_argument("--batch-size", dest="batch_size", type=int, default=16, help="Batch size B (default: 16)")
    simulate.add_argument("--seed", type=int, help="Seed for random policy, job generation and arrivals")
    simulate.add_argument("--arrival-rate", dest="arrival_rate", type=float, help="Poisson arrivals, jobs per second")
    simulate.add_argument(
        "--t-prefill-per-token", dest="t_prefill_per_token", type=float,
        help=_default(CostModel, "t_prefill_per_token"),
    )
    simulate.add_argument(
        "--t-decode-per-step", dest="t_decode_per_step", type=float,
        help=_default(CostModel, "t_decode_per_step"),
    )
    simulate.add_argument("--jobs-out", dest="jobs_out", help="Write the simulated jobs as CSV")
    simulate.add_argument("--out", help="Policy comparison CSV")

    inspect = sub.add_parser("inspect", help="Show a dump's header and manifest summary")
    inspect.add_argument("--data", required=True, help="FLEN activation dump")
    inspect.add_argument("--head", type=int, default=5, help="Record ids to list (default: 5)")

    ablate = sub.add_parser("ablate", help="Loss-weight sweep or pooling ablation")
    _add_data_flags(ablate)
    ablate.add_argument("--kind", choices=("lambda", "pooling"), required=True)
    ablate.add_argument("--lambdas", default="0,0.5,0.9,0.95,1", help="Loss weights to sweep (default: 0,0.5,0.9,0.95,1)")
    ablate.add_argument("--modes", default="egtp,mean,max,last", help="Pooling modes to compare (default: all)")
    ablate.add_argument("--out", help="Result CSV")
    _add_train_flags(ablate)
    return parser


def _emit(result: Dict[str, Any]) -> None:
    sys.stdout.write(json.dumps(result, sort_keys=True, default=str) + "\n")


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv) if argv is not None else None)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE

    try:
        settings = get_app_settings()
        configure_logging(
            level=args.log_level or settings.log_level,
            log_file=settings.log_file,
            log_max_bytes=settings.log_max_bytes,
            log_backup_count=settings.log_backup_count,
        )
        bind_run_context(command=args.command, seed=getattr(args, "seed", None))
        ctx = CommandContext(settings=settings, file_config=load_config_file(args.config or settings.config_path))
        result = HANDLERS[args.command](args, ctx)
    except UsageError as exc:
        logger.error("usage_error", command=args.command, error=str(exc))
        sys.stderr.write(f"lengthcast {args.command}: error: {exc}\n")
        return EXIT_USAGE
    except DumpFormatError as exc:
        logger.error("dump_format_error", command=args.command, kind=exc.kind, error=str(exc))
        sys.stderr.write(f"lengthcast {args.command}: {exc.kind}: {exc}\n")
        return EXIT_FAILURE
    except (LengthcastError, OSError) as exc:
        logger.error("command_failed", command=args.command, error=str(exc), error_type=type(exc).__name__)
        sys.stderr.write(f"lengthcast {args.command}: {type(exc).__name__}: {exc}\n")
        return EXIT_FAILURE
    _emit(result)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
