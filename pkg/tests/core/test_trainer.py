import itertools

import numpy as np
import pytest

from gcmt.core.checkpoint import load_network
from gcmt.core.cluster import PseudoLabeling
from gcmt.core.errors import ParameterError, SamplingStateError, TrainingDivergedError
from gcmt.core.evalkit import EvalResult
from gcmt.core.graphs import build_teacher_graph
from gcmt.core.losses import total_loss
from gcmt.core.model import NetworkPair, init_network, parameter_distance
from gcmt.core.numcore import finite_diff_check, l2_normalize_rows
from gcmt.core.synthdata import DomainSpec, generate_domain
from gcmt.core.trainer import (
    METRIC_COLUMNS,
    MetricLog,
    ObjectiveResult,
    PretrainConfig,
    TrainConfig,
    augment,
    classification_accuracy,
    init_state,
    pk_sample,
    pretrain_source,
    relabel,
    student_objective,
    teacher_targets,
    train,
    train_iteration,
)

ENCODER_NAMES = ["encoder.0.weight", "encoder.0.bias", "encoder.1.weight", "encoder.1.bias"]


@pytest.fixture
def source():
    spec = DomainSpec(
        name="source",
        identity_count=10,
        cameras_per_domain=2,
        images_per_identity_per_camera=3,
        latent_dim=8,
        input_dim=16,
        noise_sigma=0.05,
        evaluation=False,
        seed=1,
    )
    return generate_domain(spec)


def _objective_inputs(rng, size, knn_k, m):
    students = [init_network([5, 4, 3], 3, rng) for _ in range(m)]
    students = [s.with_parameters({"head.weight": rng.normal(size=(3, 3))}) for s in students]
    teachers = [init_network([5, 4, 3], 3, rng) for _ in range(m)]
    views = [rng.normal(size=(size, 5)) for _ in range(m)]
    labels = rng.integers(0, 3, size=size)
    return students, views, labels, teacher_targets(teachers, views, knn_k)


def _eval_result(map_value):
    return EvalResult(map_value, (map_value, 1.0), query_count=2)


def test_train_config_defaults():
    config = TrainConfig()
    assert (config.m, config.knn_k, config.lambda_gcc, config.beta) == (1, 12, 0.6, 0.05)
    assert config.ema_decay == 0.999 and config.learning_rate == 0.00035
    assert (config.batch_identities, config.images_per_identity) == (4, 16)
    assert config.batch_size == 64

    published = TrainConfig.published_schedule(m=2)
    assert (published.epochs, published.iters_per_epoch, published.cluster_count, published.m) == (120, 400, 500, 2)
    assert (published.batch_identities, published.images_per_identity) == (16, 4)


def _foreign_neighbours(config, rng):
    """Teacher K-NN edges leaving the pseudo identity on a batch of well separated clusters."""
    labeling = PseudoLabeling(np.repeat(np.arange(20), 20), np.eye(20), 0.0)
    batch = pk_sample(labeling, config.batch_identities, config.images_per_identity, rng)
    groups = labeling.assignments[batch]
    features = l2_normalize_rows(np.eye(20)[groups] + rng.normal(0.0, 0.01, size=(len(batch), 20)))
    graph = build_teacher_graph(features, config.knn_k)
    return int(np.sum(groups[graph.row_ids()] != groups[graph.indices]))


def test_desk_batch_keeps_teacher_neighbours_inside_a_pseudo_identity(rng):
    assert _foreign_neighbours(TrainConfig(), rng) == 0
    # 4 images per identity leave 9 of 12 neighbours to other identities
    assert _foreign_neighbours(TrainConfig.published_schedule(), rng) == 64 * 9


def test_train_config_rejects_bad_values():
    with pytest.raises(ValueError):
        TrainConfig(batch_identities=1, images_per_identity=1)
    with pytest.raises(ValueError):
        TrainConfig(lamda_gcc=0.5)
    with pytest.raises(ValueError):
        TrainConfig(ema_decay=1.5)


def test_learning_rate_step_decay():
    config = TrainConfig()
    assert config.learning_rate_at(0) == config.learning_rate_at(19) == 0.00035
    assert config.learning_rate_at(20) == pytest.approx(0.000035)
    assert config.learning_rate_at(119) == pytest.approx(0.000035)


def test_pretrain_source_fits_separable_identities(source):
    config = PretrainConfig(hidden_dims=[16], feature_dim=8, epochs=30, batch_size=16, learning_rate=0.01, seed=0)
    network = pretrain_source(source, config)
    assert network.head.class_count == 10
    assert classification_accuracy(network, source.vectors, source.identities) > 0.95


def test_pretrain_zero_epochs_is_the_initialisation(source):
    config = PretrainConfig(hidden_dims=[16], feature_dim=8, epochs=0, seed=7)
    network = pretrain_source(source, config)
    initial = init_network([16, 16, 8], 10, np.random.default_rng(7))
    assert parameter_distance(network, initial, ENCODER_NAMES) == 0.0

    other = pretrain_source(source, config.model_copy(update={"seed": 8}))
    assert parameter_distance(network, other, ENCODER_NAMES) > 0.0


def test_pretrain_saves_checkpoint(tmp_path, source):
    path = tmp_path / "source.ckpt"
    network = pretrain_source(source, PretrainConfig(hidden_dims=[16], feature_dim=8, epochs=1), path)
    loaded = load_network(path)
    assert loaded.encoder.dims == network.encoder.dims
    assert parameter_distance(loaded, network) < 1e-6


def test_pretrain_rejects_empty_dataset(source):
    with pytest.raises(SamplingStateError):
        pretrain_source(source.subset([]), PretrainConfig())


def test_pk_sample_draws_whole_groups(rng):
    labeling = PseudoLabeling(np.repeat(np.arange(6), 5), np.eye(6), 0.0)
    batch = pk_sample(labeling, 4, 3, rng)

    assert batch.shape == (12,)
    groups = labeling.assignments[batch].reshape(4, 3)
    assert np.all(groups == groups[:, :1])
    assert len(set(groups[:, 0].tolist())) == 4
    for group in batch.reshape(4, 3):
        assert len(set(group.tolist())) == 3


def test_pk_sample_falls_back_to_replacement(rng):
    labeling = PseudoLabeling(np.array([0, 0, 1]), np.eye(2), 0.0)
    batch = pk_sample(labeling, 4, 3, rng)
    assert batch.shape == (12,)
    assert set(batch.tolist()) <= {0, 1, 2}


def test_pk_sample_on_empty_labeling(rng):
    with pytest.raises(SamplingStateError):
        pk_sample(PseudoLabeling(np.zeros(0, dtype=np.int64), np.zeros((0, 2)), 0.0), 2, 2, rng)


def test_augment(rng):
    batch = rng.normal(size=(4, 6))
    np.testing.assert_array_equal(augment(batch, 0.0, 0.0, rng), batch)

    dropped = augment(np.ones((1, 1000)), 0.1, 0.5, rng)
    assert abs(int(np.sum(dropped == 0.0)) - 500) < 79

    with pytest.raises(ParameterError):
        augment(batch, 0.1, 1.0, rng)
    with pytest.raises(ParameterError):
        augment(batch, -0.1, 0.1, rng)


def test_teacher_targets_without_graph(rng):
    _, _, _, targets = _objective_inputs(rng, 8, 0, 2)
    assert targets.fused is None and targets.knn_k == 0
    np.testing.assert_allclose(targets.mean_probabilities.sum(axis=1), 1.0)


@pytest.mark.parametrize("size,knn_k,m", list(itertools.product([8, 16], [2, 4], [1, 2])))
def test_objective_gradients_match_finite_differences(rng, size, knn_k, m):
    students, views, labels, targets = _objective_inputs(rng, size, knn_k, m)
    objective = student_objective(students, views, labels, targets, beta=0.1, lambda_gcc=0.6)
    component_of = {"l_ce": "ce", "l_mce": "mce", "l_gcc": "gcc"}

    for j, name in itertools.product(range(m), students[0].parameters()):
        params = students[j].parameters()[name]

        def report_at(value, j=j, name=name):
            changed = list(students)
            changed[j] = students[j].with_parameters({name: value})
            return student_objective(changed, views, labels, targets, beta=0.1, lambda_gcc=0.6).report

        error = finite_diff_check(lambda v: report_at(v).l_total, params, objective.gradients[j][name])
        assert error < 1e-4, f"l_total, student {j}, {name}"
        for field, component in component_of.items():
            analytic = getattr(objective.components[j], component).gradients[name]
            error = finite_diff_check(lambda v, field=field: getattr(report_at(v), field), params, analytic)
            assert error < 1e-4, f"{field}, student {j}, {name}"


def test_graph_term_contributes_to_gradients(rng):
    students, views, labels, targets = _objective_inputs(rng, 8, 3, 1)
    objective = student_objective(students, views, labels, targets, beta=0.1, lambda_gcc=0.6)
    assert objective.report.l_gcc > 0.0
    assert objective.components[0].gcc.global_norm() > 0.0
    assert np.all(objective.components[0].gcc.gradients["head.weight"] == 0.0)


def test_iteration_without_graph_term(tiny_network, tiny_target, tiny_train_config):
    config = tiny_train_config.model_copy(update={"lambda_gcc": 0.0})
    state = relabel(init_state(config, [tiny_network], tiny_target.split("train").vectors), config)
    state = train_iteration(state, config)

    assert state.iteration == 1
    assert state.last_report.l_total == pytest.approx(state.last_report.l_lp)
    assert all(norm > 0.0 for norm in state.last_grad_norms)


def test_iteration_is_deterministic(tiny_network, tiny_target, tiny_train_config):
    def run():
        state = init_state(tiny_train_config, [tiny_network], tiny_target.split("train").vectors)
        state = relabel(state, tiny_train_config)
        for _ in range(2):
            state = train_iteration(state, tiny_train_config)
        return state

    first, second = run(), run()
    assert parameter_distance(first.pairs[0].student, second.pairs[0].student) == 0.0
    assert first.last_report == second.last_report


def test_teacher_follows_exponential_moving_average(tiny_network, tiny_target, tiny_train_config):
    config = tiny_train_config.model_copy(update={"ema_decay": 0.9})
    state = relabel(init_state(config, [tiny_network], tiny_target.split("train").vectors), config)
    expected = state.pairs[0].teacher.parameters()

    for _ in range(3):
        state = train_iteration(state, config)
        student = state.pairs[0].student.parameters()
        expected = {name: 0.9 * value + 0.1 * student[name] for name, value in expected.items()}

    teacher = state.pairs[0].teacher.parameters()
    for name, value in expected.items():
        np.testing.assert_allclose(teacher[name], value, rtol=1e-12, atol=1e-14)


def test_iteration_requires_labeling(tiny_network, tiny_target, tiny_train_config):
    state = init_state(tiny_train_config, [tiny_network], tiny_target.split("train").vectors)
    with pytest.raises(SamplingStateError):
        train_iteration(state, tiny_train_config)


def test_divergence_is_reported_with_the_batch(mocker, tiny_network, tiny_target, tiny_train_config):
    nan_report = total_loss(float("nan"), 0.0, 0.0, 0.6)
    mocker.patch("gcmt.core.trainer.student_objective", return_value=ObjectiveResult(nan_report, [], []))
    state = init_state(tiny_train_config, [tiny_network], tiny_target.split("train").vectors)
    state = relabel(state, tiny_train_config)

    with pytest.raises(TrainingDivergedError) as e:
        train_iteration(state, tiny_train_config)
    assert len(e.value.batch_indices) == tiny_train_config.batch_size
    assert e.value.report is nan_report


def test_relabel_resets_head_moments(tiny_network, tiny_target, tiny_train_config):
    state = init_state(tiny_train_config, [tiny_network], tiny_target.split("train").vectors)
    state = relabel(state, tiny_train_config)
    state = train_iteration(state, tiny_train_config)
    optimizer = state.optimizers[0]
    assert optimizer.state("head.weight") is not None

    state = relabel(state, tiny_train_config)
    assert optimizer.state("head.weight") is None
    assert optimizer.state("encoder.0.weight") is not None
    assert state.pairs[0].student.head.class_count == tiny_train_config.cluster_count


def test_init_state_checks_checkpoints(tiny_network, tiny_target, tiny_train_config):
    vectors = tiny_target.split("train").vectors
    with pytest.raises(ParameterError):
        init_state(tiny_train_config.model_copy(update={"m": 2}), [tiny_network], vectors)


def test_train_without_epochs_records_the_baseline(tiny_network, tiny_target, tiny_train_config):
    config = tiny_train_config.model_copy(update={"epochs": 0})
    result = train(config, [tiny_network], tiny_target)

    assert result.metric_log.epochs() == [0]
    assert parameter_distance(result.pairs[0].teacher, tiny_network) == 0.0
    row = result.metric_log.rows[0]
    assert (row.l_ce, row.l_mce, row.l_gcc, row.l_total) == (0.0, 0.0, 0.0, 0.0)


def test_train_runs_two_pairs(tiny_target, tiny_train_config, rng):
    config = tiny_train_config.model_copy(update={"m": 2})
    checkpoints = [init_network([12, 10, 6], 12, rng) for _ in range(2)]
    result = train(config, checkpoints, tiny_target)

    assert result.metric_log.epochs() == [0, 1]
    assert [row.teacher_idx for row in result.metric_log.epoch_rows(1)] == [0, 1]
    assert all(isinstance(pair, NetworkPair) for pair in result.pairs)
    assert 0.0 <= result.metric_log.best_map() <= 1.0


def test_train_is_reproducible(tiny_network, tiny_target, tiny_train_config):
    first = train(tiny_train_config, [tiny_network], tiny_target).metric_log.to_csv()
    second = train(tiny_train_config, [tiny_network], tiny_target).metric_log.to_csv()
    assert first == second


def test_metric_log_best_teacher_and_csv():
    log = MetricLog()
    report = total_loss(0.5, 0.25, 0.125, 0.6)
    log.record(1, report, [_eval_result(0.5), _eval_result(0.5)])
    log.record(2, report, [_eval_result(0.25), _eval_result(0.75)])

    assert log.best_teacher(1) == 0
    assert log.best_teacher(2) == 1
    assert log.best_map() == 0.75
    with pytest.raises(ParameterError):
        log.best_teacher(3)

    lines = log.to_csv().splitlines()
    assert lines[0] == ",".join(METRIC_COLUMNS)
    assert lines[1] == "1,0.5,0.25,0.125,0.825,0,0.5,0.5,1,1"
    assert len(lines) == 5
