"""Source pretraining and mean-teaching adaptation with graph consistency."""

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from gcmt.core.abc import EngineAPI
from gcmt.core.checkpoint import save_checkpoint
from gcmt.core.cluster import PseudoLabeling, relabel_epoch
from gcmt.core.engines import SerialEngine
from gcmt.core.errors import DimensionError, ParameterError, SamplingStateError, TrainingDivergedError
from gcmt.core.evalkit import EvalResult, evaluate_network
from gcmt.core.graphs import (
    DenseRowStochastic,
    SparseRowGraph,
    build_student_graph,
    build_teacher_graph,
    fuse_teacher_graphs,
    normalize_teacher_graph,
)
from gcmt.core.losses import LossReport, ce_loss, gcc_loss, mce_loss, total_loss
from gcmt.core.model import (
    ClassifierHead,
    FeatureCache,
    Network,
    NetworkPair,
    backward_features,
    backward_logits,
    ema_update,
    forward_features,
    forward_logits,
    init_network,
)
from gcmt.core.numcore import AdamOptimizer, GradBundle, l2_normalize_rows
from gcmt.core.synthdata import SyntheticDataset
from gcmt.typing import IndexArray, Matrix, ParamDict
from gcmt.utils.logging import get_logger

# Get the logger
logger = get_logger()

METRIC_COLUMNS = ["epoch", "l_ce", "l_mce", "l_gcc", "l_total", "teacher_idx", "map", "rank1", "rank5", "rank10"]


class TrainConfig(BaseModel):
    """Adaptation hyper-parameters; defaults are the desk-scale schedule."""

    model_config = ConfigDict(extra="forbid")

    m: int = Field(1, ge=1)
    epochs: int = Field(20, ge=0)
    iters_per_epoch: int = Field(50, ge=1)
    # desk batch: K_img - 1 >= knn_k keeps the teacher neighbourhood inside one pseudo identity
    batch_identities: int = Field(4, ge=1)
    images_per_identity: int = Field(16, ge=1)
    cluster_count: int = Field(100, ge=1)
    knn_k: int = Field(12, ge=0)
    beta: float = Field(0.05, gt=0)
    lambda_gcc: float = Field(0.6, ge=0)
    ema_decay: float = Field(0.999, ge=0, le=1)
    learning_rate: float = Field(0.00035, gt=0)
    lr_decay_factor: float = Field(0.1, gt=0)
    lr_decay_epoch: int = Field(20, ge=0)
    aug_noise_sigma: float = Field(0.05, ge=0)
    aug_drop_prob: float = Field(0.1, ge=0, lt=1)
    kmeans_max_iters: int = Field(100, ge=1)
    seed: int = 0

    @model_validator(mode="after")
    def _check_batch(self) -> "TrainConfig":
        if self.batch_size < 2:
            raise ValueError(f"batch_identities * images_per_identity must be >= 2, got {self.batch_size}")
        return self

    @property
    def batch_size(self) -> int:
        return self.batch_identities * self.images_per_identity

    def learning_rate_at(self, epoch: int) -> float:
        """Step decay: the base rate for 0-based epochs before `lr_decay_epoch`, decayed afterwards."""
        if epoch >= self.lr_decay_epoch:
            return self.learning_rate * self.lr_decay_factor
        return self.learning_rate

    @classmethod
    def published_schedule(cls, **overrides: object) -> "TrainConfig":
        """Full-length published schedule: 120 epochs of 400 iterations, 500 clusters, 16 x 4 batches."""
        values: Dict[str, object] = {
            "epochs": 120,
            "iters_per_epoch": 400,
            "cluster_count": 500,
            "batch_identities": 16,
            "images_per_identity": 4,
        }
        values.update(overrides)
        return cls(**values)


class PretrainConfig(BaseModel):
    """Supervised source pretraining settings."""

    model_config = ConfigDict(extra="forbid")

    hidden_dims: List[int] = Field(default_factory=lambda: [64])
    feature_dim: int = Field(16, ge=1)
    epochs: int = Field(30, ge=0)
    batch_size: int = Field(64, ge=1)
    learning_rate: float = Field(0.005, gt=0)
    seed: int = 0


@dataclass
class MetricRow:
    """One teacher's metrics after one epoch."""

    epoch: int
    l_ce: float
    l_mce: float
    l_gcc: float
    l_total: float
    teacher_idx: int
    map: float
    rank1: float
    rank5: float
    rank10: float

    def values(self) -> List[str]:
        """CSV fields; floats with 9 significant digits."""
        return [
            str(self.epoch),
            *(f"{v:.9g}" for v in (self.l_ce, self.l_mce, self.l_gcc, self.l_total)),
            str(self.teacher_idx),
            *(f"{v:.9g}" for v in (self.map, self.rank1, self.rank5, self.rank10)),
        ]


@dataclass
class MetricLog:
    """Per-epoch, per-teacher losses and retrieval metrics."""

    rows: List[MetricRow] = field(default_factory=list)

    def record(self, epoch: int, losses: LossReport, results: Sequence[EvalResult]) -> None:
        """Append one row per teacher."""
        for teacher_idx, result in enumerate(results):
            self.rows.append(
                MetricRow(
                    epoch,
                    losses.l_ce,
                    losses.l_mce,
                    losses.l_gcc,
                    losses.l_total,
                    teacher_idx,
                    result.map,
                    result.rank(1),
                    result.rank(5),
                    result.rank(10),
                )
            )
        best = self.best_teacher(epoch)
        logger.info(f"epoch {epoch}: best teacher {best} with mAP {self.epoch_rows(epoch)[best].map:.4f}")

    def epochs(self) -> List[int]:
        return sorted({row.epoch for row in self.rows})

    def epoch_rows(self, epoch: int) -> List[MetricRow]:
        """Rows of `epoch` in teacher order."""
        return [row for row in self.rows if row.epoch == epoch]

    def best_teacher(self, epoch: int) -> int:
        """Teacher index with the highest mAP in `epoch`; lower index on ties."""
        rows = self.epoch_rows(epoch)
        if not rows:
            raise ParameterError(f"no metrics recorded for epoch {epoch}")
        return max(rows, key=lambda row: (row.map, -row.teacher_idx)).teacher_idx

    def best_map(self, epoch: Optional[int] = None) -> float:
        """Best-teacher mAP of `epoch`, the last recorded epoch by default."""
        if epoch is None:
            epoch = self.epochs()[-1]
        return self.epoch_rows(epoch)[self.best_teacher(epoch)].map

    def to_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)
        for row in self.rows:
            writer.writerow(row.values())
        return buffer.getvalue()

    def write(self, path: Union[str, Path]) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_csv(), encoding="utf-8")
        logger.info(f"metric log written to {path}")


@dataclass
class TrainState:
    """Everything the adaptation loop mutates; owned by a single loop."""

    pairs: List[NetworkPair]
    optimizers: List[AdamOptimizer]
    vectors: Matrix
    rng: np.random.Generator
    labeling: Optional[PseudoLabeling] = None
    epoch: int = 0
    iteration: int = 0
    metric_log: MetricLog = field(default_factory=MetricLog)
    last_report: Optional[LossReport] = None
    last_grad_norms: List[float] = field(default_factory=list)


@dataclass(frozen=True)
class TeacherTargets:
    """Constant supervision of one batch: fused teacher graph and per-teacher probabilities."""

    probabilities: Tuple[Matrix, ...]
    fused: Optional[SparseRowGraph]
    knn_k: int

    @property
    def mean_probabilities(self) -> Matrix:
        return np.mean(np.stack(self.probabilities), axis=0)


@dataclass(frozen=True)
class StudentTerms:
    """One student's loss components with their parameter gradients."""

    ce: GradBundle
    mce: GradBundle
    gcc: GradBundle


@dataclass(frozen=True)
class ObjectiveResult:
    """Loss report of a batch plus total and per-component gradients of each student."""

    report: LossReport
    gradients: List[ParamDict]
    components: List[StudentTerms]


@dataclass(frozen=True)
class TrainResult:
    pairs: List[NetworkPair]
    metric_log: MetricLog


def classification_accuracy(network: Network, vectors: Matrix, labels: Sequence[int]) -> float:
    """Fraction of rows whose most probable class equals the label."""
    features, _ = forward_features(network.encoder, vectors)
    predicted = np.argmax(forward_logits(network.head, features), axis=1)
    return float(np.mean(predicted == np.asarray(labels)))


def _class_means(features: Matrix, labels: IndexArray, class_count: int) -> Matrix:
    sums = np.zeros((class_count, features.shape[1]))
    np.add.at(sums, labels, features)
    return l2_normalize_rows(sums)


def _network_gradients(network: Network, forward: Tuple[Matrix, FeatureCache], grad_logits: Matrix) -> ParamDict:
    features, cache = forward
    grad_head, grad_features = backward_logits(network.head, features, grad_logits)
    grads = backward_features(network.encoder, cache, grad_features)
    grads["head.weight"] = grad_head
    return grads


def pretrain_source(
    dataset: SyntheticDataset,
    config: PretrainConfig,
    checkpoint_path: Optional[Union[str, Path]] = None,
) -> Network:
    """Supervised CE training of encoder and head on true identities.

    The head starts from the normalised per-identity mean features of the
    initial encoder.
    """
    if len(dataset) == 0:
        raise SamplingStateError("cannot pretrain on an empty dataset")

    rng = np.random.default_rng(config.seed)
    classes, labels = np.unique(dataset.identities, return_inverse=True)
    labels = labels.astype(np.int64)
    dims = [dataset.input_dim, *config.hidden_dims, config.feature_dim]

    network = init_network(dims, len(classes), rng)
    features, _ = forward_features(network.encoder, dataset.vectors)
    network = Network(network.encoder, ClassifierHead(_class_means(features, labels, len(classes)).T.copy()))

    optimizer = AdamOptimizer(config.learning_rate)
    for epoch in range(config.epochs):
        order = rng.permutation(len(dataset))
        losses = []
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            forward = forward_features(network.encoder, dataset.vectors[batch])
            probabilities = forward_logits(network.head, forward[0])
            loss, grad_logits = ce_loss(probabilities, labels[batch])
            grads = _network_gradients(network, forward, grad_logits)
            network = network.with_parameters(optimizer.step(network.parameters(), grads))
            losses.append(loss)

        logger.info(f"pretrain epoch {epoch + 1}/{config.epochs}: mean CE {np.mean(losses):.4f}")

    logger.info(f"pretrained source network, accuracy {classification_accuracy(network, dataset.vectors, labels):.4f}")
    if checkpoint_path is not None:
        save_checkpoint(network, checkpoint_path)

    return network


def pk_sample(
    labeling: PseudoLabeling, batch_identities: int, images_per_identity: int, rng: np.random.Generator
) -> IndexArray:
    """P clusters, K members each; replacement only where a cluster or the cluster set is too small."""
    clusters = [members for members in labeling.members() if members.size]
    if not clusters:
        raise SamplingStateError("pseudo labeling has no non-empty cluster")

    chosen = rng.choice(len(clusters), size=batch_identities, replace=len(clusters) < batch_identities)
    batch = [
        rng.choice(clusters[c], size=images_per_identity, replace=clusters[c].size < images_per_identity)
        for c in chosen
    ]
    return np.concatenate(batch).astype(np.int64)


def augment(batch: Matrix, sigma: float, drop_prob: float, rng: np.random.Generator) -> Matrix:
    """Gaussian noise, then independent coordinate dropout; both draws always happen."""
    if sigma < 0 or not 0 <= drop_prob < 1:
        raise ParameterError(f"invalid augmentation sigma={sigma}, drop_prob={drop_prob}")

    noisy = batch + rng.normal(0.0, sigma, size=batch.shape)
    dropped = rng.random(batch.shape) < drop_prob
    return np.where(dropped, 0.0, noisy)


def teacher_targets(
    teachers: Sequence[Network],
    views: Sequence[Matrix],
    knn_k: int,
    engine: Optional[EngineAPI] = None,
) -> TeacherTargets:
    """Teacher probabilities and, when `knn_k > 0`, the fused normalised K-NN graph."""
    engine = engine or SerialEngine()

    def run(pair: Tuple[Network, Matrix]) -> Tuple[Matrix, Optional[SparseRowGraph]]:
        teacher, view = pair
        features, _ = forward_features(teacher.encoder, view)
        graph = normalize_teacher_graph(build_teacher_graph(features, knn_k)) if knn_k > 0 else None
        return forward_logits(teacher.head, features), graph

    outputs = engine.map(run, list(zip(teachers, views)))
    graphs = [graph for _, graph in outputs if graph is not None]
    fused = fuse_teacher_graphs(graphs) if graphs else None
    effective_k = min(knn_k, views[0].shape[0] - 1) if knn_k > 0 else 0
    return TeacherTargets(tuple(probs for probs, _ in outputs), fused, effective_k)


def _student_terms(
    student: Network,
    view: Matrix,
    pseudo_labels: IndexArray,
    targets: TeacherTargets,
    beta: float,
) -> StudentTerms:
    forward = forward_features(student.encoder, view)
    features, cache = forward
    probabilities = forward_logits(student.head, features)

    l_ce, grad_ce = ce_loss(probabilities, pseudo_labels)
    l_mce, (grad_mce,) = mce_loss([probabilities], [targets.mean_probabilities])

    if targets.fused is not None:
        graph: DenseRowStochastic = build_student_graph(features, beta)
        l_gcc, (grad_features,) = gcc_loss([graph], targets.fused, targets.knn_k)
        gcc_grads = backward_features(student.encoder, cache, grad_features)
        gcc_grads["head.weight"] = np.zeros_like(student.head.weight)
    else:
        l_gcc = 0.0
        gcc_grads = {name: np.zeros_like(value) for name, value in student.parameters().items()}

    return StudentTerms(
        GradBundle(l_ce, _network_gradients(student, forward, grad_ce)),
        GradBundle(l_mce, _network_gradients(student, forward, grad_mce)),
        GradBundle(l_gcc, gcc_grads),
    )


def student_objective(
    students: Sequence[Network],
    views: Sequence[Matrix],
    pseudo_labels: Sequence[int],
    targets: TeacherTargets,
    beta: float,
    lambda_gcc: float,
    engine: Optional[EngineAPI] = None,
) -> ObjectiveResult:
    """L = L_CE + L_MCE + lambda_gcc * L_GCC summed over students, with exact gradients.

    Teacher quantities in `targets` are constants.
    """
    if len(students) != len(views) or len(students) != len(targets.probabilities):
        raise DimensionError(
            f"{len(students)} students, {len(views)} views, {len(targets.probabilities)} teachers"
        )

    labels = np.asarray(pseudo_labels, dtype=np.int64)
    engine = engine or SerialEngine()
    terms = engine.map(
        lambda pair: _student_terms(pair[0], pair[1], labels, targets, beta),
        list(zip(students, views)),
    )

    report = total_loss(
        sum(t.ce.value for t in terms),
        sum(t.mce.value for t in terms),
        sum(t.gcc.value for t in terms),
        lambda_gcc,
    )
    gradients = [(t.ce + t.mce + t.gcc.scaled(lambda_gcc)).gradients for t in terms]
    return ObjectiveResult(report, gradients, terms)


def init_state(config: TrainConfig, checkpoints: Sequence[Network], vectors: Matrix) -> TrainState:
    """Pairs with teacher = student = checkpoint, one Adam per student."""
    if len(checkpoints) != config.m:
        raise ParameterError(f"config expects m={config.m} pairs, got {len(checkpoints)} checkpoints")
    dims = {tuple(network.encoder.dims) for network in checkpoints}
    if len(dims) > 1:
        raise DimensionError(f"checkpoint encoders differ in shape: {sorted(dims)}")
    if vectors.shape[1] != checkpoints[0].encoder.input_dim:
        raise DimensionError(
            f"target width {vectors.shape[1]} != encoder input width {checkpoints[0].encoder.input_dim}"
        )

    return TrainState(
        pairs=[NetworkPair.from_network(net, config.ema_decay, f"pair-{j}") for j, net in enumerate(checkpoints)],
        optimizers=[AdamOptimizer(config.learning_rate) for _ in checkpoints],
        vectors=vectors,
        rng=np.random.default_rng(config.seed),
    )


def relabel(state: TrainState, config: TrainConfig) -> TrainState:
    """Cluster the target with the current teachers and reset every head and its Adam moments."""
    state.labeling, state.pairs = relabel_epoch(
        state.pairs,
        state.vectors,
        config.cluster_count,
        seed=[config.seed, state.epoch],
        epoch=state.epoch,
        max_iters=config.kmeans_max_iters,
    )
    for optimizer in state.optimizers:
        optimizer.reset("head.weight")
    return state


def train_iteration(state: TrainState, config: TrainConfig, engine: Optional[EngineAPI] = None) -> TrainState:
    """Sample, augment per pair, fuse teacher graphs, step every student, then EMA every teacher."""
    if state.labeling is None:
        raise SamplingStateError("train_iteration needs a pseudo labeling; call relabel first")

    engine = engine or SerialEngine()
    batch = pk_sample(state.labeling, config.batch_identities, config.images_per_identity, state.rng)
    inputs = state.vectors[batch]
    views = [augment(inputs, config.aug_noise_sigma, config.aug_drop_prob, state.rng) for _ in state.pairs]

    targets = teacher_targets([pair.teacher for pair in state.pairs], views, config.knn_k, engine)
    objective = student_objective(
        [pair.student for pair in state.pairs],
        views,
        state.labeling.assignments[batch],
        targets,
        config.beta,
        config.lambda_gcc,
        engine,
    )

    if not objective.report.is_finite():
        raise TrainingDivergedError(
            f"non-finite loss at epoch {state.epoch}, iteration {state.iteration}",
            batch_indices=batch.tolist(),
            report=objective.report,
        )

    pairs: List[NetworkPair] = []
    norms: List[float] = []
    for pair, optimizer, grads in zip(state.pairs, state.optimizers, objective.gradients):
        norms.append(GradBundle(0.0, grads).global_norm())
        params = optimizer.step(pair.student.parameters(), grads)
        if not all(np.all(np.isfinite(value)) for value in params.values()):
            raise TrainingDivergedError(
                f"{pair.pair_id}: non-finite parameters after the optimizer step",
                batch_indices=batch.tolist(),
                report=objective.report,
            )
        student = pair.student.with_parameters(params)
        pairs.append(ema_update(NetworkPair(student, pair.teacher, pair.ema_decay, pair.pair_id)))

    state.pairs = pairs
    state.iteration += 1
    state.last_report = objective.report
    state.last_grad_norms = norms
    logger.debug(
        f"iteration {state.iteration}: l_ce={objective.report.l_ce:.5f} l_mce={objective.report.l_mce:.5f} "
        f"l_gcc={objective.report.l_gcc:.5f} l_total={objective.report.l_total:.5f}"
    )
    return state


def _mean_report(reports: Sequence[LossReport], lambda_gcc: float) -> LossReport:
    if not reports:
        return total_loss(0.0, 0.0, 0.0, lambda_gcc)
    return total_loss(
        float(np.mean([r.l_ce for r in reports])),
        float(np.mean([r.l_mce for r in reports])),
        float(np.mean([r.l_gcc for r in reports])),
        lambda_gcc,
    )


def evaluate_teachers(pairs: Sequence[NetworkPair], dataset: SyntheticDataset) -> List[EvalResult]:
    """Retrieval metrics of every teacher network."""
    return [evaluate_network(pair.teacher, dataset) for pair in pairs]


def _train_epoch(
    state: TrainState, config: TrainConfig, target: SyntheticDataset, epoch: int, engine: EngineAPI
) -> None:
    state.epoch = epoch
    learning_rate = config.learning_rate_at(epoch)
    for optimizer in state.optimizers:
        optimizer.set_learning_rate(learning_rate)

    logger.info(f"epoch {epoch + 1}/{config.epochs} (lr {learning_rate:g})")
    relabel(state, config)

    reports: List[LossReport] = []
    for _ in range(config.iters_per_epoch):
        train_iteration(state, config, engine)
        if state.last_report is not None:
            reports.append(state.last_report)

    state.metric_log.record(epoch + 1, _mean_report(reports, config.lambda_gcc), evaluate_teachers(state.pairs, target))


def train(
    config: TrainConfig,
    checkpoints: Sequence[Network],
    target: SyntheticDataset,
    engine: Optional[EngineAPI] = None,
) -> TrainResult:
    """Adapt `checkpoints` to the unlabelled `target` train split.

    Epoch 0 of the metric log is the source-only baseline; epoch e >= 1 holds
    the mean losses of adaptation epoch e and the teachers' metrics after it.
    """
    engine = engine or SerialEngine()
    train_split = target.split("train")
    state = init_state(config, checkpoints, train_split.vectors)

    state.metric_log.record(0, _mean_report([], config.lambda_gcc), evaluate_teachers(state.pairs, target))

    for epoch in range(config.epochs):
        with logger.contextualize(epoch=epoch + 1):
            _train_epoch(state, config, target, epoch, engine)

    logger.info(f"adaptation finished: best teacher mAP {state.metric_log.best_map():.4f}")
    return TrainResult(state.pairs, state.metric_log)
