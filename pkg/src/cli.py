"""
cli.py
Command-line entry point: synth, train, backtest, varlab, report, sweep and compare.

Exit codes: 0 success, 1 runtime failure, 2 usage or validation error
(bad config, missing file, bad arguments). Messages go to stderr without a
traceback; the traceback is logged at DEBUG.
"""
import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from app.models import MixtureSpec, PredictorKind, PredictorSpec, Regime, RunConfig, Split
from src.checkpoint import load_checkpoint, save_checkpoint
from src.dataset_io import (load_dataset, load_predictions, save_dataset, save_predictions, split_by_time,
                            standardize_factors)
from src.errors import ConfigError, FusionLabError
from src.evaluation import full_report, write_report
from src.experiments import METHODS, ExperimentSetup, method_sweep, method_table, seed_sweep, summarize
from src.mixture import MixtureModel
from src.settings import echo_config, get_settings, load_run_config
from src.synth import default_boundaries, demo_config, generate_with_latents, latents_path_for, save_latents
from src.training import evaluate, final_mse, save_train_log, train
from src.variance_lab import IdentitySpec, training_entanglement_probe, verify_identity

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


def _run_config(args, settings):
    """The effective run config: the --config file (with --seed applied) or defaults for --seed."""
    if args.config:
        return load_run_config(args.config, args.seed, settings.log_every)
    if args.seed is None:
        raise ConfigError('seed', "is mandatory (pass --config or --seed)")
    config = RunConfig(seed=args.seed)
    config.train.seed = args.seed
    config.train.log_every = settings.log_every
    return config


def _data_path(args, config):
    path = args.data or config.data.path
    if not path:
        raise ConfigError('data.path', "no dataset given (pass --data or set data.path)")
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    return path


def _prepare(dataset, config):
    """Re-split when the config sets boundaries, then standardize factors with train-split statistics."""
    if config.data.train_end is not None or config.data.val_end is not None:
        if config.data.train_end is None or config.data.val_end is None:
            raise ConfigError('data.train_end', "train_end and val_end must be given together")
        dataset = split_by_time(dataset, config.data.train_end, config.data.val_end)
    dataset, _ = standardize_factors(dataset, config.data.standardize)
    return dataset


def _model_spec(config, dataset):
    kind = config.model.kind.upper()
    if kind == "MIXTURE":
        return MixtureSpec(dataset.d_f, dataset.d_n, config.model.hidden_dim, config.train.dropout)
    try:
        predictor_kind = PredictorKind(kind)
    except ValueError:
        raise ConfigError('model.kind', f"unknown kind {config.model.kind!r}") from None
    return PredictorSpec(predictor_kind, dataset.d_f, dataset.d_n, config.model.hidden_dim, config.train.dropout)


# ----------------------
# Subcommands
# ----------------------

def cmd_synth(args, settings):
    config = _run_config(args, settings)
    if config.synth is None:
        config.synth = demo_config(config.seed)
    synth = config.synth
    out = Path(args.out) if args.out else settings.data_dir / f"synth-seed{synth.seed}.mfnr"
    out.parent.mkdir(parents=True, exist_ok=True)

    dataset, latents = generate_with_latents(synth)
    if config.data.train_end is not None and config.data.val_end is not None:
        boundaries = (config.data.train_end, config.data.val_end)
    else:
        boundaries = default_boundaries(synth)
    dataset = split_by_time(dataset, *boundaries)
    save_dataset(dataset, out)
    save_latents(latents, latents_path_for(out))
    echo_config(config, out.parent, name=f"{out.stem}.config.json")

    n_both = sum(r == Regime.BOTH for r in synth.regime_schedule)
    print(f"Wrote {len(dataset)} instances (d_f={dataset.d_f}, d_n={dataset.d_n}) to {out}.")
    print(f"Regimes: {len(synth.regime_schedule) - n_both} factors-only months, {n_both} both months. "
          f"Split sizes train/val/test: {dataset.split_size(Split.TRAIN)}/{dataset.split_size(Split.VAL)}/"
          f"{dataset.split_size(Split.TEST)}.")
    return EXIT_OK


def cmd_train(args, settings):
    config = _run_config(args, settings)
    dataset = _prepare(load_dataset(_data_path(args, config)), config)
    spec = _model_spec(config, dataset)
    out_dir = Path(args.out) if args.out else settings.out_dir / f"{config.train.scheme.value}-seed{config.seed}"
    echo_config(config, out_dir)

    model, log = train(dataset, spec, config.train, out_dir=out_dir)
    save_checkpoint(model, out_dir, seed=config.seed, step=log.records[-1].step if len(log) else 0)
    save_train_log(log, out_dir / "curves.csv")

    print(f"Trained {config.model.kind} ({config.train.scheme.value}) for {config.train.epochs} epochs; "
          f"artifacts in {out_dir}.")
    for component, value in sorted(final_mse(log).items()):
        print(f"  final training MSE [{component}]: {value:.6g}")
    return EXIT_OK


def _run_config_near(args, settings, directory, fallback_seed=0):
    """
    --config wins; otherwise the config.json echoed into `directory` by the run that produced it,
    so evaluation repeats that run's splitting and standardization. Defaults only when neither exists.
    """
    if args.config:
        return _run_config(args, settings)
    echoed = Path(directory) / "config.json"
    if echoed.exists():
        logger.info("using the run config echoed at %s", echoed)
        return load_run_config(echoed, args.seed, settings.log_every)
    if args.seed is not None:
        return _run_config(args, settings)
    logger.warning("no --config and no %s; using default data preparation", echoed)
    return RunConfig(seed=fallback_seed)


def cmd_backtest(args, settings):
    if not args.checkpoint:
        raise ConfigError('checkpoint', "backtest needs --checkpoint")
    model, manifest = load_checkpoint(args.checkpoint)
    config = _run_config_near(args, settings, args.checkpoint, fallback_seed=manifest.get("seed") or 0)
    dataset = _prepare(load_dataset(_data_path(args, config)), config)
    out_dir = Path(args.out) if args.out else Path(args.checkpoint) / "backtest"

    predictions = evaluate(model, dataset, Split.TEST)
    report = full_report(predictions, dataset, eps=config.eval.mape_eps, pooled=config.eval.ic_pooled)
    write_report(report, out_dir)
    save_predictions(predictions, dataset, out_dir / "predictions.csv")
    echo_config(config, out_dir)
    _print_report(report, out_dir)
    return EXIT_OK


def cmd_report(args, settings):
    if not args.predictions:
        raise ConfigError('predictions', "report needs --predictions")
    config = _run_config_near(args, settings, Path(args.predictions).parent)
    dataset = _prepare(load_dataset(_data_path(args, config)), config)
    predictions = load_predictions(args.predictions, dataset, Split.TEST)
    out_dir = Path(args.out) if args.out else Path(args.predictions).parent
    report = full_report(predictions, dataset, eps=config.eval.mape_eps, pooled=config.eval.ic_pooled)
    write_report(report, out_dir)
    echo_config(config, out_dir)
    _print_report(report, out_dir)
    return EXIT_OK


def _print_report(report, out_dir):
    fmt = lambda value, spec: "n/a" if value is None else format(value, spec)
    print(f"Backtest over {len(report.timestamps)} months written to {out_dir}.")
    print(f"  IC {fmt(report.ic, '.4f')} ({report.ic_sections_skipped} sections skipped), MAPE {report.mape:.4f}")
    for name in ("long_only", "long_short", "universe"):
        print(f"  {name:<10} annualized {fmt(report.annualized_return[name], '+.4f')}  "
              f"Sharpe {fmt(report.sharpe_ratio[name], '.3f')}  "
              f"max drawdown {fmt(report.max_drawdown[name], '.4f')}")


def cmd_varlab(args, settings):
    config = _run_config(args, settings)
    out_dir = Path(args.out) if args.out else settings.out_dir / f"varlab-seed{config.seed}"
    spec = IdentitySpec.from_section(config.varlab)
    identity_ss, probe_ss = np.random.SeedSequence(config.seed).spawn(2)
    check = verify_identity(spec, config.varlab.n_samples, np.random.default_rng(identity_ss))
    result = {"seed": config.seed, "identity": check.to_dict()}

    if args.checkpoint:
        model, _ = load_checkpoint(args.checkpoint)
        if not isinstance(model, MixtureModel):
            raise ConfigError('checkpoint', "the entanglement probe needs a mixture checkpoint")
        dataset = _prepare(load_dataset(_data_path(args, config)), config)
        result["probe"] = training_entanglement_probe(model, dataset, config.varlab.probe_instances,
                                                      rng=np.random.default_rng(probe_ss))

    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "varlab.json").write_text(json.dumps(result, indent=2) + "\n")
    echo_config(config, out_dir)
    print(f"Var(delta): empirical {check.empirical:.6g}, closed form {check.closed_form:.6g}, "
          f"gap {100 * check.relative_gap:.2f}% at N={check.n}. Report in {out_dir / 'varlab.json'}.")
    return EXIT_OK


def cmd_sweep(args, settings):
    out_dir = Path(args.out) if args.out else settings.out_dir / "sweep"
    out_dir.mkdir(parents=True, exist_ok=True)
    sweep = seed_sweep(args.seeds)
    sweep.to_csv(out_dir / "sweep.csv", float_format="%.17g")
    summary = summarize(sweep)
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"Swept {summary['n_seeds']} seeds; results in {out_dir}.")
    for name, count in summary.items():
        if name != "n_seeds":
            print(f"  {name}: {count}/{summary['n_seeds']}")
    return EXIT_OK


def cmd_compare(args, settings):
    out_dir = Path(args.out) if args.out else settings.out_dir / "compare"
    out_dir.mkdir(parents=True, exist_ok=True)
    methods = method_sweep(args.seeds, ExperimentSetup())
    methods.to_csv(out_dir / "methods.csv", index=False, float_format="%.17g")
    table = method_table(methods)
    table.to_csv(out_dir / "table.csv", float_format="%.17g")
    print(f"Compared {len(METHODS)} methods on {methods['universe'].nunique()} universes over "
          f"{len(args.seeds)} seeds; results in {out_dir}.")
    columns = ["test_mse", "ic", "annualized_long_short", "sharpe_long_short"]
    print(table[columns].to_string(float_format="{:.4f}".format))
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "backtest": cmd_backtest,
    "varlab": cmd_varlab,
    "report": cmd_report,
    "sweep": cmd_sweep,
    "compare": cmd_compare,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="fusionlab", description="Fusion-learning return predictors and backtests.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="run config (JSON)")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--out", help="output file (synth) or directory")
        return p

    common(sub.add_parser("synth", help="generate a synthetic panel (MFNR + latents sidecar)"))
    common(sub.add_parser("train", help="train a predictor or mixture")).add_argument("--data")
    backtest = common(sub.add_parser("backtest", help="decile backtest of a checkpoint on the test split"))
    backtest.add_argument("--checkpoint")
    backtest.add_argument("--data")
    varlab = common(sub.add_parser("varlab", help="gradient-variance identity check and entanglement probe"))
    varlab.add_argument("--checkpoint")
    varlab.add_argument("--data")
    report = common(sub.add_parser("report", help="backtest report from a predictions CSV"))
    report.add_argument("--predictions")
    report.add_argument("--data")
    sweep = common(sub.add_parser("sweep", help="seed-swept mixture vs standalone comparison"))
    sweep.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    compare = common(sub.add_parser("compare", help="backtest every method on panels with and without news signal"))
    compare.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    return parser


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK

    try:
        settings = get_settings()
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=getattr(logging, settings.log_level, logging.INFO),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    try:
        return COMMANDS[args.command](args, settings)
    except (ConfigError, FileNotFoundError) as e:
        logger.debug("usage error", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FusionLabError as e:
        logger.debug("runtime failure", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as e:
        logger.error("unexpected failure in %s: %s", args.command, e)
        logger.debug("traceback", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
