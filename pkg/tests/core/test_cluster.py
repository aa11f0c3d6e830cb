import numpy as np
import pytest

from gcmt.core.cluster import (
    PseudoLabeling,
    _squared_distances,
    average_teacher_features,
    kmeans,
    relabel_epoch,
)
from gcmt.core.errors import ClusterSizeError, ConsistencyError, DimensionError, ParameterError, ValidationError
from gcmt.core.model import ClassifierHead, EncoderParams, Layer, Network, NetworkPair
from gcmt.core.numcore import l2_normalize_rows
from gcmt.core.synthdata import DomainSpec, generate_domain


def _identity_pair(width: int) -> NetworkPair:
    encoder = EncoderParams((Layer(np.eye(width), np.zeros((1, width))),))
    return NetworkPair.from_network(Network(encoder, ClassifierHead(np.eye(width)[:, :1])))


def _purity_is_perfect(assignments: np.ndarray, identities: np.ndarray) -> bool:
    return all(len(set(identities[assignments == c].tolist())) == 1 for c in np.unique(assignments))


def test_average_teacher_features_examples(rng):
    features = l2_normalize_rows(rng.normal(size=(4, 3)))
    np.testing.assert_allclose(average_teacher_features([features]), features, atol=1e-12)
    np.testing.assert_allclose(average_teacher_features([features, features]), features, atol=1e-12)

    mixed = average_teacher_features([np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])])
    np.testing.assert_allclose(mixed, [[1.0 / np.sqrt(2.0), 1.0 / np.sqrt(2.0)]])


def test_average_teacher_features_errors():
    with pytest.raises(ParameterError):
        average_teacher_features([])
    with pytest.raises(DimensionError):
        average_teacher_features([np.ones((2, 2)), np.ones((3, 2))])


def test_kmeans_two_tight_groups():
    points = np.array([[10.0, 0.0], [10.0, 0.2], [0.0, 10.0], [0.2, 10.0]])
    labeling = kmeans(points, 2, seed=0)

    assert labeling.assignments[0] == labeling.assignments[1]
    assert labeling.assignments[2] == labeling.assignments[3]
    assert labeling.assignments[0] != labeling.assignments[2]
    assert labeling.inertia == pytest.approx(4 * 0.1**2, abs=1e-9)
    np.testing.assert_allclose(np.linalg.norm(labeling.cluster_means, axis=1), 1.0)


def test_kmeans_single_cluster(rng):
    points = rng.normal(size=(20, 3))
    labeling = kmeans(points, 1, seed=0)
    np.testing.assert_array_equal(labeling.assignments, np.zeros(20))
    np.testing.assert_allclose(labeling.cluster_means[0], l2_normalize_rows(points.mean(axis=0, keepdims=True))[0])


def test_kmeans_one_point_per_cluster(rng):
    points = rng.normal(size=(9, 3))
    labeling = kmeans(points, 9, seed=0)
    assert sorted(labeling.assignments.tolist()) == list(range(9))
    assert labeling.inertia == pytest.approx(0.0, abs=1e-12)


def test_kmeans_argument_errors(rng):
    with pytest.raises(ClusterSizeError):
        kmeans(rng.normal(size=(3, 2)), 4)
    with pytest.raises(ParameterError):
        kmeans(rng.normal(size=(3, 2)), 0)
    with pytest.raises(ParameterError):
        kmeans(rng.normal(size=(3, 2)), 2, max_iters=0)


def test_kmeans_random_runs_converge_to_a_fixpoint():
    for seed in range(100):
        data_rng = np.random.default_rng(seed)
        points = data_rng.normal(size=(int(data_rng.integers(20, 80)), 3))
        count = int(data_rng.integers(1, 8))
        labeling = kmeans(points, count, max_iters=300, seed=seed)

        assert np.all(np.bincount(labeling.assignments, minlength=count) > 0)
        if labeling.iterations < 300:
            centers = np.stack([points[members].mean(axis=0) for members in labeling.members()])
            np.testing.assert_array_equal(np.argmin(_squared_distances(points, centers), axis=1), labeling.assignments)


def test_kmeans_detects_increasing_inertia(rng, mocker):
    mocker.patch(
        "gcmt.core.cluster._update_centers",
        side_effect=lambda points, labels, distances, count: np.full((count, points.shape[1]), 100.0),
    )
    with pytest.raises(ConsistencyError):
        kmeans(rng.normal(size=(30, 2)), 3, seed=0)


def test_kmeans_repairs_empty_clusters():
    # four coincident points and one outlier; three clusters must all stay populated
    points = np.array([[0.0, 0.0]] * 4 + [[5.0, 5.0]])
    labeling = kmeans(points, 3, seed=1)
    assert np.all(np.bincount(labeling.assignments, minlength=3) > 0)


def test_kmeans_is_deterministic(rng):
    points = rng.normal(size=(60, 4))
    first, second = kmeans(points, 5, seed=[3, 1]), kmeans(points, 5, seed=[3, 1])
    np.testing.assert_array_equal(first.assignments, second.assignments)
    np.testing.assert_array_equal(first.cluster_means, second.cluster_means)


def test_kmeans_purity_on_separable_identities():
    spec = DomainSpec(identity_count=100, cameras_per_domain=1, noise_sigma=0.01, evaluation=False, seed=4)
    dataset = generate_domain(spec)
    labeling = kmeans(dataset.vectors, 100, seed=0)
    assert labeling.cluster_count == 100
    assert _purity_is_perfect(labeling.assignments, dataset.identities)


def test_relabel_epoch_recovers_identities_and_resets_heads():
    spec = DomainSpec(identity_count=100, cameras_per_domain=1, noise_sigma=0.01, evaluation=False, seed=6)
    dataset = generate_domain(spec)
    pairs = [_identity_pair(dataset.input_dim)]

    labeling, updated = relabel_epoch(pairs, dataset.vectors, 100, seed=0, epoch=3)
    assert labeling.epoch == 3
    assert _purity_is_perfect(labeling.assignments, dataset.identities)
    assert updated[0].student.head.class_count == 100
    np.testing.assert_array_equal(updated[0].teacher.head.weight, labeling.cluster_means.T)

    again, _ = relabel_epoch(pairs, dataset.vectors, 100, seed=0, epoch=3)
    np.testing.assert_array_equal(again.assignments, labeling.assignments)


def test_kmeans_means_stay_unit_when_members_cancel():
    antipodal = np.array([[1.0, 0.0], [-1.0, 0.0]])
    labeling = kmeans(antipodal, 1, seed=0)
    np.testing.assert_allclose(np.linalg.norm(labeling.cluster_means, axis=1), [1.0])
    np.testing.assert_array_equal(labeling.cluster_means, [[1.0, 0.0]])

    _, updated = relabel_epoch([_identity_pair(2)], antipodal, 1, seed=0)
    np.testing.assert_array_equal(updated[0].student.head.weight, [[1.0], [0.0]])


def test_relabel_epoch_rejects_empty_dataset():
    with pytest.raises(ValidationError):
        relabel_epoch([_identity_pair(3)], np.zeros((0, 3)), 1)


def test_pseudo_labeling_members():
    labeling = PseudoLabeling(np.array([1, 0, 1, 2]), np.eye(3), 0.0)
    members = labeling.members()
    assert [m.tolist() for m in members] == [[1], [0, 2], [3]]
    assert labeling.cluster_count == 3
