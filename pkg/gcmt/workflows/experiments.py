"""Multi-run experiments: GCC ablation, multi-source adaptation and parameter sweeps."""

from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from gcmt.core.abc import EngineAPI
from gcmt.core.config import ExperimentConfig
from gcmt.core.errors import ConfigValidationError
from gcmt.core.model import Network
from gcmt.core.synthdata import SyntheticDataset, generate_domain
from gcmt.core.trainer import PretrainConfig, TrainConfig, pretrain_source, train
from gcmt.utils.logging import get_logger

# Get the logger
logger = get_logger()

SWEEPABLE = ("beta", "lambda_gcc", "knn_k")


@dataclass
class ExperimentReport:
    """Best-teacher target mAP of every arm, one value per seed."""

    name: str
    seeds: List[int]
    arms: Dict[str, List[float]] = field(default_factory=dict)

    def add(self, arm: str, value: float) -> None:
        self.arms.setdefault(arm, []).append(value)

    def mean(self, arm: str) -> float:
        return float(np.mean(self.arms[arm]))

    def rows(self) -> List[List[Any]]:
        """`[arm, mean, per-seed values...]` per arm, in insertion order."""
        return [[arm, self.mean(arm), *values] for arm, values in self.arms.items()]


def build_datasets(config: ExperimentConfig) -> Dict[str, SyntheticDataset]:
    """Generate every configured domain."""
    return {domain.name: generate_domain(domain) for domain in config.data.domains}


def pretrain_sources(
    config: ExperimentConfig, datasets: Dict[str, SyntheticDataset], seed: int
) -> Dict[str, Network]:
    """One supervised source network per configured source, all with `seed`."""
    settings = PretrainConfig(**config.pretrain.model_dump(exclude={"sources", "seed"}), seed=seed)
    return {
        source: pretrain_source(datasets[source].split("train"), settings) for source in config.pretrain.sources
    }


def _train_config(config: ExperimentConfig, seed: int, **overrides: Any) -> TrainConfig:
    values = config.adapt.model_dump(exclude={"target", "checkpoints"})
    values.update(seed=seed, **overrides)
    return TrainConfig(**values)


def run_ablation(
    config: ExperimentConfig, seeds: Sequence[int], engine: Optional[EngineAPI] = None
) -> ExperimentReport:
    """Source-only vs. mean teaching without GCC vs. with GCC, from the first source."""
    datasets = build_datasets(config)
    target = datasets[config.adapt.target]
    source = config.pretrain.sources[0]
    report = ExperimentReport("ablation", list(seeds))

    for seed in seeds:
        checkpoint = pretrain_sources(config, datasets, seed)[source]
        with_gcc = train(_train_config(config, seed, m=1), [checkpoint], target, engine)
        without_gcc = train(_train_config(config, seed, m=1, lambda_gcc=0.0), [checkpoint], target, engine)

        report.add("source-only", with_gcc.metric_log.best_map(0))
        report.add("lambda_gcc=0", without_gcc.metric_log.best_map())
        report.add(f"lambda_gcc={config.adapt.lambda_gcc:g}", with_gcc.metric_log.best_map())
        logger.info(f"ablation seed {seed}: {[values[-1] for values in report.arms.values()]}")

    return report


def run_multi_source(
    config: ExperimentConfig, seeds: Sequence[int], engine: Optional[EngineAPI] = None
) -> ExperimentReport:
    """Each of the first two sources alone, then both as a two-pair run."""
    if len(config.pretrain.sources) < 2:
        raise ConfigValidationError("multi-source runs need two pretrain sources", keys=["pretrain.sources"])

    datasets = build_datasets(config)
    target = datasets[config.adapt.target]
    first, second = config.pretrain.sources[:2]
    report = ExperimentReport("multi-source", list(seeds))

    for seed in seeds:
        networks = pretrain_sources(config, datasets, seed)
        for source in (first, second):
            single = train(_train_config(config, seed, m=1), [networks[source]], target, engine)
            report.add(source, single.metric_log.best_map())

        joint = train(_train_config(config, seed, m=2), [networks[first], networks[second]], target, engine)
        report.add(f"{first}+{second}", joint.metric_log.best_map())

    return report


def run_sweep(
    config: ExperimentConfig,
    parameter: str,
    values: Sequence[float],
    seeds: Sequence[int],
    engine: Optional[EngineAPI] = None,
) -> ExperimentReport:
    """Adapt from the first source once per value of `parameter`."""
    if parameter not in SWEEPABLE:
        raise ConfigValidationError(f"cannot sweep `{parameter}`, expected one of {SWEEPABLE}", keys=[parameter])

    datasets = build_datasets(config)
    target = datasets[config.adapt.target]
    source = config.pretrain.sources[0]
    report = ExperimentReport(f"sweep-{parameter}", list(seeds))

    for seed in seeds:
        checkpoint = pretrain_sources(config, datasets, seed)[source]
        for value in values:
            cast = int(value) if parameter == "knn_k" else float(value)
            result = train(_train_config(config, seed, m=1, **{parameter: cast}), [checkpoint], target, engine)
            report.add(f"{parameter}={cast:g}", result.metric_log.best_map())

    return report
