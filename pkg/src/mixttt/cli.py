"""
Command-line entry point for MixTTT
mixttt <pretrain|corrupt|ttt|verify> [--config PATH] [--seed N] [--out DIR]
"""

import functools
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import click
import pandas as pd
from pydantic import ValidationError

from . import __version__
from .analytics.drift import drift_delta, drift_experiment
from .analytics.gradients import (
    GRADCHECK_TOLERANCE,
    chain_rule_check,
    grad_norm_compare,
    gradient_check,
    joint_loss,
)
from .analytics.taylor import quadratic_taylor_selftest, toy_configuration, toy_network_specs, toy_taylor_reports
from .config.run_config import RunConfig
from .config.settings import settings
from .data.corruptions import NATIVE_CORRUPTIONS, CorruptionSpec, corrupt_dataset, corrupted_set_path, load_corrupted_set
from .data.datasets import Dataset, load_dataset, save_dataset
from .models.network import SplitNetwork, build_network
from .ttt.aux_tasks import TrainFeatureStats, compute_train_feature_stats
from .ttt.engine import load_checkpoint, pretrain, run_suite, save_checkpoint, summarize_error_table
from .ttt.mixup import TrainPartnerPool
from .utils.errors import ConfigurationError, MixTTTError
from .utils.logging import setup_logging
from .utils.reports import write_csv, write_json

logger = logging.getLogger(__name__)

CHAIN_RULE_TOLERANCE = 1e-3


def handle_errors(command):
    """Map library exceptions onto the exit-code contract"""

    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except MixTTTError as e:
            logger.error(f"❌ {e}")
            click.echo(f"❌ {type(e).__name__}: {e}", err=True)
            sys.exit(e.exit_code)
        except ValidationError as e:
            click.echo(f"❌ ConfigurationError: {e}", err=True)
            sys.exit(2)
        except OSError as e:
            click.echo(f"❌ I/O error: {e}", err=True)
            sys.exit(4)

    return wrapper


def common_options(command):
    command = click.option("--out", "out", type=click.Path(), default=None, help="Output directory")(command)
    command = click.option("--seed", type=int, default=None, help="Global seed (overrides the config)")(command)
    command = click.option(
        "--config", "config_path", type=click.Path(), default=None, help="Flat key=value run config"
    )(command)
    return command


def load_run_config(config_path: Optional[str], **overrides) -> RunConfig:
    if config_path is not None and not Path(config_path).exists():
        raise ConfigurationError(f"config file not found: {config_path}")
    config = RunConfig.from_file(config_path, overrides)
    setup_logging(settings.log_level, config.output_path / settings.log_file)
    logger.info(f"🚀 config_hash={config.config_hash()} seed={config.seed}")
    return config


def _limited(dataset: Dataset, limit: Optional[int]) -> Dataset:
    if limit is None or limit >= len(dataset):
        return dataset
    return dataset.subset(list(range(limit)))


def _load_train(config: RunConfig) -> Dataset:
    dataset = load_dataset(config.require_path("train_path"), config.main_classes)
    return _limited(dataset, config.train_limit)


def _load_model(config: RunConfig, image_shape) -> Tuple[SplitNetwork, Optional[TrainFeatureStats]]:
    path = config.checkpoint_path
    if not path.exists():
        raise ConfigurationError(f"'checkpoint' points to a missing path: {path}")
    network = build_network(config.network_spec(image_shape), config.seed)
    feature_stats = load_checkpoint(network, path)
    network.eval()
    return network, feature_stats


def _test_set(config: RunConfig, kind: str, severity: int, clean: Dict[str, Dataset]) -> Dataset:
    """Prepared file from corruption_dir when present, otherwise generated from test_path"""
    if config.corruption_dir and corrupted_set_path(config.corruption_dir, kind, severity).exists():
        dataset = load_corrupted_set(config.corruption_dir, kind, severity)
    elif kind in NATIVE_CORRUPTIONS:
        if "test" not in clean:
            clean["test"] = load_dataset(config.require_path("test_path"), config.main_classes)
        dataset = corrupt_dataset(clean["test"], CorruptionSpec(kind=kind, severity=severity, seed=config.seed))
    else:
        dataset = load_corrupted_set(config.corruption_dir or ".", kind, severity)
    return _limited(dataset, config.test_limit)


def _ensure_feature_stats(
    config: RunConfig, network: SplitNetwork, stats: Optional[TrainFeatureStats], train: Dataset
) -> Optional[TrainFeatureStats]:
    if stats is None and config.task == "contrastive_align":
        logger.info("Checkpoint has no feature statistics; computing them from train_path")
        return compute_train_feature_stats(network, train.images)
    return stats


@click.group()
@click.version_option(__version__, prog_name="mixttt")
def cli():
    """MixTTT: test-time training with train/test mixing."""


@cli.command("pretrain")
@common_options
@handle_errors
def pretrain_command(config_path, seed, out):
    """Multi-task pretraining; writes the checkpoint and per-epoch metrics."""
    config = load_run_config(config_path, seed=seed, output_dir=out)
    train = _load_train(config)
    eval_set = None
    if config.test_path:
        clean = load_dataset(config.require_path("test_path"), config.main_classes)
        eval_set = _limited(clean, config.test_limit)

    network = build_network(config.network_spec(train.image_shape), config.seed)
    click.echo(f"🧠 Pretraining on {len(train)} images for {config.epochs} epochs")
    result = pretrain(network, train, config.pretrain_config(), eval_set=eval_set)
    feature_stats = compute_train_feature_stats(result.network, train.images)

    save_checkpoint(result.network, config.checkpoint_path, feature_stats)
    metrics_path = write_csv(result.metrics, config.output_path / "pretrain_metrics.csv", config.config_hash())
    click.echo(f"✅ Checkpoint: {config.checkpoint_path}")
    click.echo(f"📊 Metrics: {metrics_path}")


@cli.command("corrupt")
@click.option("--in", "input_path", type=click.Path(), default=None, help="Clean dataset file")
@click.option("--kind", default=None, help="Corruption kind (overrides corruptions)")
@click.option("--severity", type=int, default=None, help="Severity 1-5 (overrides severities)")
@common_options
@handle_errors
def corrupt_command(input_path, kind, severity, config_path, seed, out):
    """Generate corrupted copies of a clean dataset."""
    config = load_run_config(
        config_path,
        seed=seed,
        output_dir=None if out is None or out.endswith(".mttt") else out,
        test_path=input_path,
        corruptions=kind,
        severities=None if severity is None else str(severity),
    )
    if kind is not None and kind not in NATIVE_CORRUPTIONS:
        raise ConfigurationError(f"'kind': {kind} is ingest-only and cannot be generated")

    clean = load_dataset(config.require_path("test_path"))
    specs = config.corruption_specs()
    skipped = [c for c in config.corruptions if c not in NATIVE_CORRUPTIONS]
    for name in skipped:
        logger.warning(f"{name} is ingest-only; not generated")

    target = Path(out) if out else Path(config.corruption_dir or config.output_dir)
    single_file = target.suffix == ".mttt"
    if single_file and len(specs) != 1:
        raise ConfigurationError(f"'out': a single file needs exactly one corruption, got {len(specs)}")

    for spec in specs:
        path = target if single_file else corrupted_set_path(target, spec.kind, spec.severity)
        save_dataset(corrupt_dataset(clean, spec), path)
        click.echo(f"💾 {spec.kind} s{spec.severity} -> {path}")


@cli.command("ttt")
@common_options
@handle_errors
def ttt_command(config_path, seed, out):
    """Error-rate table for baseline, plain TTT and MixTTT over the corruption suite."""
    config = load_run_config(config_path, seed=seed, output_dir=out)
    methods = config.suite_methods()
    needs_pool = any(m.episode is not None and m.episode.mix_enabled for m in methods)

    clean: Dict[str, Dataset] = {}
    test_sets = {(kind, sev): _test_set(config, kind, sev, clean) for kind, sev in config.corruption_pairs()}
    if not test_sets:
        raise ConfigurationError("'corruptions': nothing to evaluate")
    image_shape = next(iter(test_sets.values())).image_shape

    network, feature_stats = _load_model(config, image_shape)
    train = _load_train(config) if needs_pool or config.task == "contrastive_align" else None
    pool = TrainPartnerPool(train) if needs_pool else None
    if train is not None:
        feature_stats = _ensure_feature_stats(config, network, feature_stats, train)

    errors = run_suite(
        network, test_sets, methods, pool, feature_stats, threads=settings.thread_cap, seed=config.seed
    )
    summary = summarize_error_table(errors)
    config_hash = config.config_hash()
    write_csv(errors, config.output_path / "errors.csv", config_hash)
    write_csv(summary, config.output_path / "errors_summary.csv", config_hash)

    click.echo(summary.to_string(index=False, float_format=lambda v: f"{v:.2f}"))
    click.echo(f"✅ Error tables written to {config.output_path}")


# ---- verify ---------------------------------------------------------------


def _verify_taylor(config: RunConfig, checks: dict) -> pd.DataFrame:
    frames = []
    reports = toy_taylor_reports(config.taylor_configs)
    for index, report in enumerate(reports):
        frame = report.to_frame()
        frame.insert(0, "configuration", f"toy_{index}")
        frames.append(frame)
    quadratic = quadratic_taylor_selftest(seed=config.seed)
    frame = quadratic.to_frame()
    frame.insert(0, "configuration", "quadratic")
    frames.append(frame)

    ratios = [r for report in reports for r in report.remainder_ratios]
    checks["taylor"] = {
        "passed": all(report.passes() for report in reports) and quadratic.passes(),
        "exponents": [report.fitted_exponent for report in reports],
        "quadratic_exponent": quadratic.fitted_exponent,
        "min_ratio": min(ratios) if ratios else None,
        "max_ratio": max(ratios) if ratios else None,
    }
    return pd.concat(frames, ignore_index=True)


def _verify_gradients(config: RunConfig, checks: dict) -> pd.DataFrame:
    frames = []
    for index in range(len(toy_network_specs())):
        toy = toy_configuration(index)
        frame = gradient_check(
            toy.network,
            joint_loss(toy.y_t, 0),
            toy.x_t.unsqueeze(0),
            coordinates=config.gradcheck_coordinates,
            seed=config.seed,
        )
        frame.insert(0, "configuration", f"toy_{index}")
        frames.append(frame)

    table = pd.concat(frames, ignore_index=True)
    worst = float(table["relative_error"].max())
    checks["gradcheck"] = {
        "passed": worst <= GRADCHECK_TOLERANCE,
        "coordinates": int(len(table)),
        "max_relative_error": worst,
    }
    return table


def _verify_chain_rule(checks: dict) -> None:
    residuals = []
    for index in range(len(toy_network_specs())):
        toy = toy_configuration(index)
        residuals.append(chain_rule_check(toy.network, toy.x_t, toy.y_t))
    checks["chain_rule"] = {"passed": max(residuals) <= CHAIN_RULE_TOLERANCE, "residuals": residuals}


def _verification_setup(config: RunConfig, cache: dict):
    if "network" not in cache:
        clean: Dict[str, Dataset] = {}
        test_set = _test_set(config, config.verify_corruption, config.verify_severity, clean)
        network, feature_stats = _load_model(config, test_set.image_shape)
        train = _load_train(config)
        cache.update(
            network=network,
            feature_stats=_ensure_feature_stats(config, network, feature_stats, train),
            pool=TrainPartnerPool(train),
            test_set=test_set,
        )
    return cache


def _verify_grad_norm(config: RunConfig, checks: dict, cache: dict) -> pd.DataFrame:
    setup = _verification_setup(config, cache)
    images = setup["test_set"].images[: config.grad_norm_samples]
    comparison = grad_norm_compare(
        setup["network"],
        images,
        config.episode_config(mix_enabled=False),
        config.episode_config(mix_enabled=True),
        setup["pool"],
        setup["feature_stats"],
    )
    checks["grad_norm"] = comparison.summary()
    return comparison.to_frame()


def _verify_drift(config: RunConfig, checks: dict, cache: dict) -> Tuple[pd.DataFrame, pd.DataFrame]:
    setup = _verification_setup(config, cache)
    dataset = _limited(setup["test_set"], config.drift_samples)
    drift_rows: List[pd.DataFrame] = []
    projections: List[pd.DataFrame] = []
    deltas = []
    degenerate = False

    for seed in config.drift_seeds:
        seed_deltas = {}
        for method, mix in (("ttt", False), ("mixttt", True)):
            report = drift_experiment(
                setup["network"],
                dataset,
                config.episode_config(mix_enabled=mix, seed=seed),
                setup["pool"],
                setup["feature_stats"],
                checkpoints=config.drift_checkpoints,
                threads=settings.thread_cap,
            )
            degenerate = degenerate or report.any_degenerate
            seed_deltas[method] = drift_delta(report)
            frame = report.to_frame()
            frame.insert(0, "method", method)
            frame.insert(0, "seed", seed)
            drift_rows.append(frame)
            if seed == config.drift_seeds[0]:
                coords = report.coordinates.copy()
                coords["method"] = method
                projections.append(coords)
        deltas.append(seed_deltas)
        logger.info(f"🌀 Drift seed {seed}: ttt={seed_deltas['ttt']:.4f} mixttt={seed_deltas['mixttt']:.4f}")

    wins = sum(1 for d in deltas if d["ttt"] > d["mixttt"])
    checks["drift"] = {
        "passed": (wins >= config.drift_required_wins) and not degenerate,
        "wins": wins,
        "required_wins": config.drift_required_wins,
        "degenerate": degenerate,
        "deltas": deltas,
    }
    return pd.concat(drift_rows, ignore_index=True), pd.concat(projections, ignore_index=True)


@cli.command("verify")
@common_options
@handle_errors
def verify_command(config_path, seed, out):
    """Run the enabled property checks; exit 1 when any of them fails."""
    config = load_run_config(config_path, seed=seed, output_dir=out)
    config_hash = config.config_hash()
    output = config.output_path
    checks: dict = {}
    cache: dict = {}

    if config.verify_taylor:
        write_csv(_verify_taylor(config, checks), output / "taylor.csv", config_hash)
    if config.verify_gradcheck:
        write_csv(_verify_gradients(config, checks), output / "gradcheck.csv", config_hash)
    if config.verify_chain_rule:
        _verify_chain_rule(checks)
    if config.verify_grad_norm:
        write_csv(_verify_grad_norm(config, checks, cache), output / "grad_norm.csv", config_hash)
    if config.verify_drift:
        drift, projection = _verify_drift(config, checks, cache)
        write_csv(drift, output / "drift.csv", config_hash)
        write_csv(projection, output / "projection.csv", config_hash)

    passed = all(check["passed"] for check in checks.values())
    write_json({"checks": checks, "passed": passed}, output / "summary.json", config_hash)

    for name, check in checks.items():
        click.echo(f"{'✅' if check['passed'] else '❌'} {name}")
    if not passed:
        click.echo("❌ Verification failed", err=True)
        sys.exit(1)
    click.echo("✅ All enabled checks passed")


def main():
    cli()


if __name__ == "__main__":
    main()
