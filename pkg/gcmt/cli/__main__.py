import functools
import sys
from pathlib import Path
from typing import Any, Callable, List, Optional, Sequence, Tuple

import click
import numpy as np
from colorama import Fore, Style, init
from filelock import FileLock, Timeout
from tabulate import tabulate

from gcmt.core.checkpoint import load_network, save_checkpoint
from gcmt.core.config import ExperimentConfig, load_config, write_resolved_config
from gcmt.core.engines import get_engine
from gcmt.core.errors import ConfigValidationError, GCMTError
from gcmt.core.evalkit import EvalResult, evaluate_network, export_result
from gcmt.core.model import Network
from gcmt.core.synthdata import SyntheticDataset, generate_domain, read_dataset, write_dataset
from gcmt.core.trainer import PretrainConfig, TrainConfig, classification_accuracy, pretrain_source, train
from gcmt.workflows.experiments import SWEEPABLE, ExperimentReport, run_ablation, run_multi_source, run_sweep

LOCK_NAME = ".gcmt.lock"

EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_MISSING_FILE = 3


def _header(*names: str) -> List[str]:
    return [Fore.GREEN + Style.BRIGHT + name + Style.RESET_ALL for name in names]


def _fail(error: BaseException, code: int) -> None:
    status = f"{Fore.RED}ERROR!{Style.RESET_ALL}" if sys.stderr.isatty() else "ERROR!"
    message = getattr(error, "msg", None) or str(error)
    click.echo(f"{status} {error.__class__.__name__}: {' '.join(message.split())}", err=True)
    sys.exit(code)


def experiment_command(fn: Callable[..., None]) -> Callable[..., None]:
    """Shared options, config resolution, output lock and error reporting of every subcommand."""

    @click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None, help="TOML config file.")
    @click.option("--seed", type=int, default=None, help="Experiment seed, overrides the file.")
    @click.option("--out", "out_dir", type=str, default=None, help="Output directory, overrides the file.")
    @click.option("--set", "overrides", multiple=True, help="Override `section.key=value`; repeatable.")
    @functools.wraps(fn)
    def wrapper(
        config_path: Optional[str],
        seed: Optional[int],
        out_dir: Optional[str],
        overrides: Tuple[str, ...],
        **kwargs: Any,
    ) -> None:
        try:
            if config_path is not None and not Path(config_path).is_file():
                raise FileNotFoundError(f"config file not found: {config_path}")

            config = load_config(config_path, overrides, seed, out_dir)
            config.out_path.mkdir(parents=True, exist_ok=True)
            with FileLock(str(config.out_path / LOCK_NAME), timeout=1):
                write_resolved_config(config)
                fn(config, **kwargs)
        except ConfigValidationError as e:
            _fail(e, EXIT_CONFIG)
        except FileNotFoundError as e:
            _fail(e, EXIT_MISSING_FILE)
        except Timeout as e:
            _fail(e, EXIT_ERROR)
        except GCMTError as e:
            _fail(e, EXIT_ERROR)
        except OSError as e:
            _fail(e, EXIT_ERROR)

    return wrapper


def _require(paths: Sequence[Path]) -> None:
    missing = [str(path) for path in paths if not path.is_file()]
    if missing:
        raise FileNotFoundError(f"missing input files: {', '.join(missing)}")


def _load_dataset(path: Path) -> SyntheticDataset:
    _require([path])
    return read_dataset(path)


def _load_networks(paths: Sequence[Path]) -> List[Network]:
    _require(paths)
    return [load_network(path) for path in paths]


def _split_numbers(text: str) -> List[float]:
    try:
        return [float(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise ConfigValidationError(f"expected comma separated numbers, got `{text}`", keys=[text])


def _echo_report(report: ExperimentReport) -> None:
    headers = _header("Arm", "Mean mAP", *(f"seed {seed}" for seed in report.seeds))
    rows = [[Fore.CYAN + str(row[0]) + Style.RESET_ALL, *row[1:]] for row in report.rows()]
    click.echo(tabulate(rows, headers=headers, tablefmt="grid", floatfmt=".4f"))


@click.group()
def cli():
    init(autoreset=True)


@cli.command("gen-data")
@experiment_command
def gen_data(config: ExperimentConfig) -> None:
    """Generate every configured domain into `<out>/data/<domain>.csv`."""
    table: List[List[Any]] = []
    for spec in config.data.domains:
        dataset = generate_domain(spec)
        path = config.dataset_path(spec.name)
        write_dataset(dataset, path)
        table.append(
            [
                Fore.CYAN + spec.name + Style.RESET_ALL,
                len(dataset),
                spec.identity_count,
                *(len(dataset.split(split)) for split in ("train", "query", "gallery")),
                str(path),
            ]
        )

    headers = _header("Domain", "Samples", "Identities", "Train", "Query", "Gallery", "File")
    click.echo(tabulate(table, headers=headers, tablefmt="grid"))


@cli.command()
@experiment_command
def pretrain(config: ExperimentConfig) -> None:
    """Supervised pretraining on every source domain."""
    settings = PretrainConfig(**config.pretrain.model_dump(exclude={"sources"}))
    table: List[List[Any]] = []
    for source in config.pretrain.sources:
        dataset = _load_dataset(config.dataset_path(source)).split("train")
        path = config.pretrain_path(source)
        network = pretrain_source(dataset, settings, path)
        _, labels = np.unique(dataset.identities, return_inverse=True)
        accuracy = classification_accuracy(network, dataset.vectors, labels)
        table.append([Fore.CYAN + source + Style.RESET_ALL, len(dataset), accuracy, str(path)])

    headers = _header("Source", "Samples", "Train accuracy", "Checkpoint")
    click.echo(tabulate(table, headers=headers, tablefmt="grid", floatfmt=".4f"))


@cli.command()
@experiment_command
def adapt(config: ExperimentConfig) -> None:
    """Mean-teaching adaptation to the target domain."""
    checkpoints = _load_networks(config.adapt_checkpoints())
    target = _load_dataset(config.dataset_path(config.adapt.target))
    settings = TrainConfig(**config.adapt.model_dump(exclude={"target", "checkpoints"}))

    with get_engine(config.engine) as engine:
        result = train(settings, checkpoints, target, engine)

    result.metric_log.write(config.out_path / "adapt" / "metrics.csv")
    for index, pair in enumerate(result.pairs):
        save_checkpoint(pair.teacher, config.teacher_path(index))

    last = result.metric_log.epochs()[-1]
    best = result.metric_log.best_teacher(last)
    table = [
        [
            (Fore.YELLOW if row.teacher_idx == best else Fore.CYAN) + f"teacher {row.teacher_idx}" + Style.RESET_ALL,
            row.map,
            row.rank1,
            row.rank5,
            row.rank10,
        ]
        for row in result.metric_log.epoch_rows(last)
    ]
    headers = _header("Network", "mAP", "Rank-1", "Rank-5", "Rank-10")
    click.echo(tabulate(table, headers=headers, tablefmt="grid", floatfmt=".4f"))
    click.echo(f"\n{Fore.BLUE}Best teacher: {Fore.WHITE}{best}{Style.RESET_ALL}")


@cli.command("eval")
@experiment_command
def eval_command(config: ExperimentConfig) -> None:
    """Evaluate checkpoints on the query/gallery splits of a dataset."""
    dataset = _load_dataset(config.eval_dataset())
    paths = config.eval_checkpoints()
    networks = _load_networks(paths)

    results: List[EvalResult] = []
    for index, network in enumerate(networks):
        result = evaluate_network(network, dataset)
        export_result(result, config.out_path / "eval" / f"result_{index}.txt")
        results.append(result)

    best = max(range(len(results)), key=lambda j: (results[j].map, -j))
    export_result(results[best], config.out_path / "eval" / "result.txt")

    table = [
        [Fore.CYAN + str(path) + Style.RESET_ALL, r.map, r.rank(1), r.rank(5), r.rank(10)]
        + [r.query_count, r.excluded_count]
        for path, r in zip(paths, results)
    ]
    headers = _header("Checkpoint", "mAP", "Rank-1", "Rank-5", "Rank-10", "Queries", "Excluded")
    click.echo(tabulate(table, headers=headers, tablefmt="grid", floatfmt=".4f"))


@cli.command()
@click.option("--seeds", default="0,1,2", show_default=True, help="Comma separated seeds.")
@click.option("--multi-source", is_flag=True, help="Compare single sources against a two-pair run instead.")
@experiment_command
def ablate(config: ExperimentConfig, seeds: str, multi_source: bool) -> None:
    """Source-only vs. without GCC vs. with GCC, averaged over seeds."""
    seed_list = [int(seed) for seed in _split_numbers(seeds)]
    with get_engine(config.engine) as engine:
        if multi_source:
            report = run_multi_source(config, seed_list, engine)
        else:
            report = run_ablation(config, seed_list, engine)
    _echo_report(report)


@cli.command()
@click.option("--parameter", type=click.Choice(SWEEPABLE), required=True, help="Adaptation parameter to vary.")
@click.option("--values", required=True, help="Comma separated values.")
@click.option("--seeds", default="0", show_default=True, help="Comma separated seeds.")
@experiment_command
def sweep(config: ExperimentConfig, parameter: str, values: str, seeds: str) -> None:
    """Best-teacher mAP for each value of one adaptation parameter."""
    seed_list = [int(seed) for seed in _split_numbers(seeds)]
    with get_engine(config.engine) as engine:
        report = run_sweep(config, parameter, _split_numbers(values), seed_list, engine)
    _echo_report(report)


if __name__ == "__main__":
    cli()
