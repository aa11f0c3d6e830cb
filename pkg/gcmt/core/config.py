from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Union

import toml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from gcmt.core.errors import ConfigValidationError
from gcmt.core.synthdata import DomainSpec
from gcmt.core.trainer import PretrainConfig, TrainConfig
from gcmt.utils.logging import get_logger

# Get the logger
logger = get_logger()

RESOLVED_CONFIG = "resolved_config.toml"


def default_domains() -> List[DomainSpec]:
    """Labelled source domain and an unlabelled target domain sharing one world."""
    return [
        DomainSpec(name="source", seed=1, evaluation=False),
        DomainSpec(name="target", seed=2, evaluation=True),
    ]


class DataConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    domains: List[DomainSpec] = Field(default_factory=default_domains)

    @model_validator(mode="after")
    def _unique_names(self) -> "DataConfig":
        names = [domain.name for domain in self.domains]
        if len(set(names)) != len(names):
            raise ValueError(f"domain names must be unique, got {names}")
        return self

    def get(self, name: str) -> DomainSpec:
        for domain in self.domains:
            if domain.name == name:
                return domain
        raise ConfigValidationError(f"unknown domain `{name}`", keys=["data.domains"])


class PretrainSection(PretrainConfig):
    """Pretraining settings plus the source domains, one checkpoint per source."""

    sources: List[str] = Field(default_factory=lambda: ["source"])


class AdaptConfig(TrainConfig):
    """Adaptation settings; `checkpoints` default to the pretrained sources."""

    target: str = "target"
    checkpoints: List[str] = Field(default_factory=list)


class EvalConfig(BaseModel):
    """Evaluation inputs; empty values default to the adaptation outputs."""

    model_config = ConfigDict(extra="forbid")

    dataset: Optional[str] = None
    checkpoints: List[str] = Field(default_factory=list)


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    seed: int = 0
    out_dir: str = "gcmt-out"
    engine: Literal["SerialEngine", "PoolEngine"] = "SerialEngine"
    data: DataConfig = Field(default_factory=DataConfig)
    pretrain: PretrainSection = Field(default_factory=PretrainSection)
    adapt: AdaptConfig = Field(default_factory=AdaptConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)

    @model_validator(mode="before")
    @classmethod
    def _inherit_seed(cls, values: Any) -> Any:
        """Sections without their own seed use the experiment seed."""
        if not isinstance(values, dict) or "seed" not in values:
            return values

        values = dict(values)
        for section in ("pretrain", "adapt"):
            block = values.get(section)
            if block is None:
                values[section] = {"seed": values["seed"]}
            elif isinstance(block, dict) and "seed" not in block:
                values[section] = {**block, "seed": values["seed"]}
        return values

    @property
    def out_path(self) -> Path:
        return Path(self.out_dir)

    def dataset_path(self, domain: str) -> Path:
        return self.out_path / "data" / f"{domain}.csv"

    def pretrain_path(self, source: str) -> Path:
        return self.out_path / "checkpoints" / f"{source}.ckpt"

    def adapt_checkpoints(self) -> List[Path]:
        """Checkpoints adapted from, one per pair."""
        if self.adapt.checkpoints:
            return [Path(path) for path in self.adapt.checkpoints]
        return [self.pretrain_path(source) for source in self.pretrain.sources]

    def teacher_path(self, index: int) -> Path:
        return self.out_path / "adapt" / f"teacher_{index}.ckpt"

    def eval_checkpoints(self) -> List[Path]:
        if self.eval.checkpoints:
            return [Path(path) for path in self.eval.checkpoints]
        return [self.teacher_path(j) for j in range(self.adapt.m)]

    def eval_dataset(self) -> Path:
        if self.eval.dataset:
            return Path(self.eval.dataset)
        return self.dataset_path(self.adapt.target)


def _error_keys(error: ValidationError) -> List[str]:
    keys = []
    for item in error.errors():
        key = ".".join(str(part) for part in item["loc"])
        if key not in keys:
            keys.append(key)
    return keys


def validate_config(raw: Dict[str, Any]) -> ExperimentConfig:
    """Build an `ExperimentConfig`; every offending dotted key is reported at once."""
    try:
        config = ExperimentConfig.model_validate(raw)
    except ValidationError as e:
        keys = _error_keys(e)
        details = "; ".join(f"{'.'.join(str(p) for p in item['loc'])}: {item['msg']}" for item in e.errors())
        raise ConfigValidationError(f"invalid configuration ({details})", keys=keys)

    declared = {domain.name for domain in config.data.domains}
    keys = [f"pretrain.sources.{i}" for i, name in enumerate(config.pretrain.sources) if name not in declared]
    if config.adapt.target not in declared:
        keys.append("adapt.target")
    if keys:
        raise ConfigValidationError(f"configuration references undeclared domains: {keys}", keys=keys)

    return config


def parse_override(assignment: str) -> Dict[str, Any]:
    """`section.key=value` into a nested dict; the value is read as a TOML literal, else as a string."""
    if "=" not in assignment:
        raise ConfigValidationError(f"override `{assignment}` is not of the form key=value", keys=[assignment])

    dotted, text = assignment.split("=", 1)
    keys = [part for part in dotted.strip().split(".") if part]
    if not keys:
        raise ConfigValidationError(f"override `{assignment}` has an empty key", keys=[assignment])

    try:
        value: Any = toml.loads(f"value = {text.strip()}")["value"]
    except toml.TomlDecodeError:
        value = text.strip()

    nested: Dict[str, Any] = {keys[-1]: value}
    for key in reversed(keys[:-1]):
        nested = {key: nested}
    return nested


def _merge(base: Dict[str, Any], update: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def load_config(
    path: Optional[Union[str, Path]] = None,
    overrides: Sequence[str] = (),
    seed: Optional[int] = None,
    out_dir: Optional[str] = None,
) -> ExperimentConfig:
    """File values over defaults, then `--set` overrides, then `--seed` / `--out`."""
    raw: Dict[str, Any] = {}
    if path is not None:
        try:
            raw = toml.load(Path(path))
        except toml.TomlDecodeError as e:
            raise ConfigValidationError(f"{path} is not valid TOML: {e}", keys=[str(path)])
        logger.info(f"configuration read from {path}")

    for assignment in overrides:
        raw = _merge(raw, parse_override(assignment))

    if seed is not None:
        raw = _merge(raw, {"seed": seed, "pretrain": {"seed": seed}, "adapt": {"seed": seed}})
    if out_dir is not None:
        raw["out_dir"] = out_dir

    return validate_config(raw)


def dump_config(config: ExperimentConfig) -> str:
    """TOML text of the config with every default expanded."""
    return toml.dumps(config.model_dump(mode="json", exclude_none=True))


def write_resolved_config(config: ExperimentConfig) -> Path:
    """Write `resolved_config.toml` into the output directory."""
    path = config.out_path / RESOLVED_CONFIG
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_config(config), encoding="utf-8")
    logger.info(f"resolved configuration written to {path}")
    return path
