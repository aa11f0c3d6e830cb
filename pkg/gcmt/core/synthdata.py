"""Synthetic multi-domain, multi-camera identity datasets in feature space, and their CSV files."""

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from gcmt.core.errors import (
    DatasetParseError,
    DimensionError,
    MalformedHeaderError,
    ParameterError,
    RowWidthError,
    UnknownSplitError,
)
from gcmt.typing import IndexArray, Matrix
from gcmt.utils.logging import get_logger

# Get the logger
logger = get_logger()

SPLITS = ("train", "query", "gallery")
META_COLUMNS = ["id", "camera", "domain", "split"]


class DomainSpec(BaseModel):
    """Generator settings of one domain.

    Domains built with the same `world_seed` share a base latent-to-input map;
    `domain_shift` is the weight of the domain's own random component, so 0
    means no domain gap.
    """

    model_config = ConfigDict(extra="forbid")

    name: str = "target"
    identity_count: int = Field(100, ge=1)
    cameras_per_domain: int = Field(4, ge=1)
    images_per_identity_per_camera: int = Field(6, ge=1)
    latent_dim: int = Field(16, ge=1)
    input_dim: int = Field(32, ge=1)
    noise_sigma: float = Field(0.08, ge=0)
    domain_shift: float = Field(0.8, ge=0, le=1)
    camera_shift: float = Field(0.3, ge=0)
    world_seed: int = 0
    seed: int = 0
    evaluation: bool = True


@dataclass(frozen=True)
class SyntheticDataset:
    """Samples of one or more domains with identity, camera and split tags."""

    vectors: Matrix
    identities: IndexArray
    cameras: IndexArray
    domains: Tuple[str, ...]
    splits: Tuple[str, ...]

    def __post_init__(self) -> None:
        size = self.vectors.shape[0]
        if not (len(self.identities) == len(self.cameras) == len(self.domains) == len(self.splits) == size):
            raise DimensionError("dataset columns have different lengths")

    def __len__(self) -> int:
        return int(self.vectors.shape[0])

    @property
    def input_dim(self) -> int:
        return int(self.vectors.shape[1])

    def subset(self, indices: Sequence[int]) -> "SyntheticDataset":
        """Samples at `indices`, in that order."""
        idx = np.asarray(indices, dtype=np.int64)
        return SyntheticDataset(
            self.vectors[idx],
            self.identities[idx],
            self.cameras[idx],
            tuple(self.domains[i] for i in idx),
            tuple(self.splits[i] for i in idx),
        )

    def split(self, name: str) -> "SyntheticDataset":
        """Samples tagged with split `name`."""
        return self.subset([i for i, tag in enumerate(self.splits) if tag == name])

    def domain(self, name: str) -> "SyntheticDataset":
        """Samples of domain `name`."""
        return self.subset([i for i, tag in enumerate(self.domains) if tag == name])

    def domain_names(self) -> List[str]:
        """Domain names in order of first appearance."""
        return list(dict.fromkeys(self.domains))

    @staticmethod
    def concat(datasets: Sequence["SyntheticDataset"]) -> "SyntheticDataset":
        """Stack datasets row-wise."""
        if not datasets:
            raise ParameterError("nothing to concatenate")
        if len({ds.input_dim for ds in datasets}) > 1:
            raise DimensionError(f"input widths differ: {[ds.input_dim for ds in datasets]}")

        return SyntheticDataset(
            np.concatenate([ds.vectors for ds in datasets]),
            np.concatenate([ds.identities for ds in datasets]).astype(np.int64),
            np.concatenate([ds.cameras for ds in datasets]).astype(np.int64),
            tuple(tag for ds in datasets for tag in ds.domains),
            tuple(tag for ds in datasets for tag in ds.splits),
        )


def _check_counts(spec: DomainSpec) -> None:
    counts = {
        "identity_count": spec.identity_count,
        "cameras_per_domain": spec.cameras_per_domain,
        "images_per_identity_per_camera": spec.images_per_identity_per_camera,
        "latent_dim": spec.latent_dim,
        "input_dim": spec.input_dim,
    }
    bad = [name for name, value in counts.items() if value < 1]
    if bad:
        raise ParameterError(f"counts must be >= 1: {bad}", fields=bad)
    if spec.noise_sigma < 0:
        raise ParameterError(f"noise_sigma must be >= 0, got {spec.noise_sigma}")
    if spec.evaluation and (spec.cameras_per_domain < 2 or spec.images_per_identity_per_camera < 2):
        raise ParameterError("evaluation domains need at least 2 cameras and 2 images per identity and camera")


def _split_tag(identity: int, camera: int, image: int, cameras: int) -> str:
    if image == 0:
        return "gallery"
    if image == 1 and camera == identity % cameras:
        return "query"
    return "train"


def generate_domain(spec: DomainSpec) -> SyntheticDataset:
    """Draw one domain; sample = camera map of the domain map of an identity latent, plus noise."""
    _check_counts(spec)

    world = np.random.default_rng(spec.world_seed)
    rng = np.random.default_rng(spec.seed)
    latent, width = spec.latent_dim, spec.input_dim

    base = world.normal(0.0, 1.0 / np.sqrt(latent), size=(latent, width))
    own = rng.normal(0.0, 1.0 / np.sqrt(latent), size=(latent, width))
    domain_map = np.sqrt(1.0 - spec.domain_shift**2) * base + spec.domain_shift * own
    domain_offset = spec.domain_shift * rng.normal(0.0, 1.0 / np.sqrt(width), size=(1, width))

    camera_maps = [
        np.eye(width) + spec.camera_shift * rng.normal(0.0, 1.0 / np.sqrt(width), size=(width, width))
        for _ in range(spec.cameras_per_domain)
    ]
    camera_offsets = [
        spec.camera_shift * rng.normal(0.0, 1.0 / np.sqrt(width), size=(1, width))
        for _ in range(spec.cameras_per_domain)
    ]

    latents = rng.normal(size=(spec.identity_count, latent))
    latents /= np.linalg.norm(latents, axis=1, keepdims=True)
    clean = latents @ domain_map + domain_offset

    images = spec.images_per_identity_per_camera
    vectors: List[Matrix] = []
    identities: List[int] = []
    cameras: List[int] = []
    splits: List[str] = []
    for identity in range(spec.identity_count):
        for camera in range(spec.cameras_per_domain):
            view = clean[identity : identity + 1] @ camera_maps[camera] + camera_offsets[camera]
            vectors.append(np.repeat(view, images, axis=0) + rng.normal(0.0, spec.noise_sigma, size=(images, width)))
            for image in range(images):
                identities.append(identity)
                cameras.append(camera)
                splits.append(
                    _split_tag(identity, camera, image, spec.cameras_per_domain) if spec.evaluation else "train"
                )

    dataset = SyntheticDataset(
        np.concatenate(vectors),
        np.asarray(identities, dtype=np.int64),
        np.asarray(cameras, dtype=np.int64),
        tuple([spec.name] * len(identities)),
        tuple(splits),
    )
    logger.info(f"domain `{spec.name}`: {len(dataset)} samples, {spec.identity_count} identities")
    return dataset


def write_dataset(ds: SyntheticDataset, path: Union[str, Path]) -> None:
    """CSV `id,camera,domain,split,x0..x{d-1}` with 9 significant digits."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(META_COLUMNS + [f"x{j}" for j in range(ds.input_dim)])
        for i in range(len(ds)):
            writer.writerow(
                [int(ds.identities[i]), int(ds.cameras[i]), ds.domains[i], ds.splits[i]]
                + [f"{value:.9g}" for value in ds.vectors[i]]
            )

    logger.info(f"dataset with {len(ds)} samples written to {path}")


def _parse_header(header: List[str]) -> int:
    if header[:4] != META_COLUMNS:
        expected, got = ",".join(META_COLUMNS), ",".join(header[:4])
        raise MalformedHeaderError(f"header must start with {expected}, got {got}", line=1)

    features = header[4:]
    if not features:
        raise MalformedHeaderError("header declares no feature columns", line=1)
    if features != [f"x{j}" for j in range(len(features))]:
        raise MalformedHeaderError("feature columns must be x0..x{d-1} in order", line=1)

    return len(features)


def read_dataset(path: Union[str, Path]) -> SyntheticDataset:
    """Parse a dataset CSV written by `write_dataset` or any tool using the same schema."""
    raw = Path(path).read_bytes()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as e:
        raise DatasetParseError(f"byte {e.start} is not UTF-8", line=raw.count(b"\n", 0, e.start) + 1)
    rows = list(csv.reader(io.StringIO(text, newline="")))

    if not rows:
        raise MalformedHeaderError(f"{path} is empty", line=1)

    width = _parse_header(rows[0])
    vectors: List[List[float]] = []
    identities: List[int] = []
    cameras: List[int] = []
    domains: List[str] = []
    splits: List[str] = []
    for line, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != width + 4:
            raise RowWidthError(f"expected {width + 4} fields, got {len(row)}", line=line)
        if row[3] not in SPLITS:
            raise UnknownSplitError(f"unknown split `{row[3]}`", line=line)
        try:
            identities.append(int(row[0]))
            cameras.append(int(row[1]))
            vectors.append([float(value) for value in row[4:]])
        except ValueError as e:
            raise DatasetParseError(f"non-numeric field: {e}", line=line)
        domains.append(row[2])
        splits.append(row[3])

    logger.info(f"dataset with {len(identities)} samples read from {path}")
    return SyntheticDataset(
        np.asarray(vectors, dtype=np.float64).reshape(len(vectors), width),
        np.asarray(identities, dtype=np.int64),
        np.asarray(cameras, dtype=np.int64),
        tuple(domains),
        tuple(splits),
    )
