import numpy as np
import pytest

from gcmt.core.errors import ConsistencyError, DimensionError, ParameterError, ValidationError
from gcmt.core.model import (
    ClassifierHead,
    EncoderParams,
    Layer,
    Network,
    NetworkPair,
    backward_features,
    ema_update,
    forward_features,
    forward_logits,
    init_encoder,
    init_network,
    parameter_distance,
    reinit_head,
)
from gcmt.core.numcore import finite_diff_check, l2_normalize_rows


def _scalar_network(value: float) -> Network:
    encoder = EncoderParams((Layer(np.array([[value]]), np.array([[0.0]])),))
    return Network(encoder, ClassifierHead(np.array([[value]])))


def test_forward_features_identity_network(rng):
    encoder = EncoderParams((Layer(np.eye(4), np.zeros((1, 4))),))
    batch = l2_normalize_rows(rng.normal(size=(5, 4)))
    features, _ = forward_features(encoder, batch)
    np.testing.assert_allclose(features, batch, atol=1e-12)


def test_forward_features_rows_are_unit(rng):
    encoder = init_encoder([8, 16, 4], rng)
    features, cache = forward_features(encoder, rng.normal(size=(10, 8)) * 5.0)
    np.testing.assert_allclose(np.linalg.norm(features, axis=1), 1.0, atol=1e-9)
    assert len(cache.inputs) == 2 and len(cache.activations) == 1


def test_forward_features_empty_batch(rng):
    encoder = init_encoder([8, 4], rng)
    features, _ = forward_features(encoder, np.zeros((0, 8)))
    assert features.shape == (0, 4)


def test_forward_features_width_mismatch(rng):
    with pytest.raises(DimensionError):
        forward_features(init_encoder([8, 4], rng), np.zeros((2, 7)))


def test_encoder_rejects_broken_chains():
    with pytest.raises(DimensionError):
        EncoderParams((Layer(np.ones((3, 4)), np.zeros((1, 4))), Layer(np.ones((5, 2)), np.zeros((1, 2)))))
    with pytest.raises(ValidationError):
        EncoderParams(())
    with pytest.raises(ParameterError):
        init_encoder([4], np.random.default_rng(0))


def test_forward_logits_examples(rng):
    features = l2_normalize_rows(rng.normal(size=(6, 3)))
    single = forward_logits(ClassifierHead(rng.normal(size=(3, 1))), features)
    np.testing.assert_allclose(single, 1.0)

    uniform = forward_logits(ClassifierHead(np.zeros((3, 5))), features)
    np.testing.assert_allclose(uniform, 0.2, atol=1e-12)

    own = forward_logits(ClassifierHead(np.eye(3)), np.eye(3))
    assert np.all(np.argmax(own, axis=1) == np.arange(3))
    np.testing.assert_allclose(own.sum(axis=1), 1.0, atol=1e-12)


def test_pair_starts_with_identical_copies(tiny_network):
    pair = NetworkPair.from_network(tiny_network)
    assert parameter_distance(pair.student, pair.teacher) == 0.0
    assert pair.student.encoder.layers[0].weight is not pair.teacher.encoder.layers[0].weight

    with pytest.raises(ParameterError):
        NetworkPair.from_network(tiny_network, ema_decay=1.5)


def test_ema_update_scalar_case():
    pair = NetworkPair(_scalar_network(1.0), _scalar_network(2.0), ema_decay=0.999)
    updated = ema_update(pair)
    assert updated.teacher.encoder.layers[0].weight[0, 0] == pytest.approx(1.999, abs=1e-12)
    assert updated.teacher.head.weight[0, 0] == pytest.approx(1.999, abs=1e-12)
    assert updated.student is pair.student


def test_ema_update_fixed_point(tiny_network):
    pair = NetworkPair.from_network(tiny_network)
    assert parameter_distance(ema_update(pair).teacher, pair.teacher) == 0.0


@pytest.mark.parametrize("steps", [1, 10, 100])
def test_ema_geometric_law(steps):
    pair = NetworkPair(_scalar_network(1.0), _scalar_network(2.0), ema_decay=0.999)
    for _ in range(steps):
        pair = ema_update(pair)

    gap = pair.teacher.encoder.layers[0].weight[0, 0] - 1.0
    assert gap == pytest.approx(0.999**steps, rel=1e-9)


def test_ema_update_stays_on_segment(rng):
    student = init_network([5, 4, 3], 2, rng)
    teacher = init_network([5, 4, 3], 2, rng)
    updated = ema_update(NetworkPair(student, teacher, 0.9)).teacher

    for name, value in updated.parameters().items():
        low = np.minimum(student.parameters()[name], teacher.parameters()[name])
        high = np.maximum(student.parameters()[name], teacher.parameters()[name])
        assert np.all(value >= low - 1e-15) and np.all(value <= high + 1e-15)


def test_ema_update_shape_mismatch(rng):
    pair = NetworkPair(init_network([5, 3], 2, rng), init_network([5, 3], 4, rng))
    with pytest.raises(ConsistencyError):
        ema_update(pair)


def test_reinit_head_examples(tiny_network):
    pair = NetworkPair.from_network(tiny_network)
    means = np.zeros((2, 6))
    means[0, 0] = means[1, 1] = 1.0

    pair = reinit_head(pair, means)
    feature = means[:1]
    probs = forward_logits(pair.student.head, feature)
    assert probs[0, 0] == pytest.approx(np.exp(1.0) / (np.exp(1.0) + 1.0), abs=1e-12)
    assert parameter_distance(reinit_head(pair, means).teacher, pair.teacher) == 0.0

    bigger = l2_normalize_rows(np.random.default_rng(0).normal(size=(7, 6)))
    assert reinit_head(pair, bigger).teacher.head.class_count == 7


def test_reinit_head_rejects_non_unit_rows(tiny_network):
    pair = NetworkPair.from_network(tiny_network)
    with pytest.raises(ValidationError):
        reinit_head(pair, np.full((2, 6), 0.5))
    with pytest.raises(DimensionError):
        reinit_head(pair, np.eye(3))


def test_with_parameters_rejects_unknown_names(tiny_network):
    with pytest.raises(ValidationError):
        tiny_network.with_parameters({"decoder.weight": np.zeros((1, 1))})


def test_backward_features_passes_finite_differences(rng):
    network = init_network([5, 6, 3], 2, rng)
    batch = rng.normal(size=(4, 5))
    upstream = rng.normal(size=(4, 3))

    _, cache = forward_features(network.encoder, batch)
    grads = backward_features(network.encoder, cache, upstream)

    encoder_params = {name: value for name, value in network.parameters().items() if name.startswith("encoder.")}
    assert set(grads) == set(encoder_params)

    for name, value in encoder_params.items():

        def loss(p, name=name):
            features, _ = forward_features(network.with_parameters({name: p}).encoder, batch)
            return float(np.sum(features * upstream))

        assert finite_diff_check(loss, value, grads[name], h=1e-5) < 1e-4, name
