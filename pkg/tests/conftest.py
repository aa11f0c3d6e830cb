import numpy as np
import pytest

from gcmt.core.model import Network, init_network
from gcmt.core.synthdata import DomainSpec, SyntheticDataset, generate_domain
from gcmt.core.trainer import TrainConfig


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_target_spec() -> DomainSpec:
    return DomainSpec(
        name="target",
        identity_count=12,
        cameras_per_domain=2,
        images_per_identity_per_camera=3,
        latent_dim=8,
        input_dim=12,
        seed=2,
    )


@pytest.fixture
def tiny_target(tiny_target_spec) -> SyntheticDataset:
    return generate_domain(tiny_target_spec)


@pytest.fixture
def tiny_network(rng) -> Network:
    return init_network([12, 10, 6], 12, rng)


@pytest.fixture
def tiny_train_config() -> TrainConfig:
    return TrainConfig(
        epochs=1,
        iters_per_epoch=2,
        batch_identities=4,
        images_per_identity=2,
        cluster_count=6,
        knn_k=3,
        kmeans_max_iters=50,
        seed=5,
    )


@pytest.fixture
def tiny_config_dict(tmp_path) -> dict:
    """Experiment config small enough for end-to-end runs in a test."""
    domain = {
        "identity_count": 12,
        "cameras_per_domain": 2,
        "images_per_identity_per_camera": 3,
        "latent_dim": 8,
        "input_dim": 12,
    }
    return {
        "seed": 3,
        "out_dir": str(tmp_path / "out"),
        "data": {
            "domains": [
                {"name": "source", "seed": 1, "evaluation": False, **domain},
                {"name": "target", "seed": 2, "evaluation": True, **domain},
            ]
        },
        "pretrain": {"hidden_dims": [10], "feature_dim": 6, "epochs": 2, "batch_size": 16},
        "adapt": {
            "epochs": 1,
            "iters_per_epoch": 2,
            "batch_identities": 4,
            "images_per_identity": 2,
            "cluster_count": 6,
            "knn_k": 3,
            "kmeans_max_iters": 50,
        },
    }
