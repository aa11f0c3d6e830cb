"""MLP encoder with L2-normalised output, linear classifier head, EMA teachers."""

import re
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from gcmt.core.errors import ConsistencyError, DimensionError, ParameterError, ValidationError
from gcmt.core.numcore import as_matrix, l2_normalize_backward, l2_normalize_rows, matmul, row_softmax
from gcmt.typing import Matrix, ParamDict
from gcmt.utils.logging import get_logger

# Get the logger
logger = get_logger()

_ENCODER_PARAM = re.compile(r"^encoder\.(\d+)\.(weight|bias)$")
UNIT_TOLERANCE = 1e-6


@dataclass(frozen=True)
class Layer:
    """Affine layer `x @ weight + bias`."""

    weight: Matrix
    bias: Matrix

    @property
    def in_dim(self) -> int:
        return int(self.weight.shape[0])

    @property
    def out_dim(self) -> int:
        return int(self.weight.shape[1])


@dataclass(frozen=True)
class EncoderParams:
    """Stack of layers, tanh between them, L2 normalisation on top."""

    layers: Tuple[Layer, ...]

    def __post_init__(self) -> None:
        if not self.layers:
            raise ValidationError("encoder needs at least one layer")
        for position, layer in enumerate(self.layers):
            if layer.bias.shape != (1, layer.out_dim):
                raise DimensionError(f"layer {position} bias {layer.bias.shape} does not match width {layer.out_dim}")
            if position and self.layers[position - 1].out_dim != layer.in_dim:
                raise DimensionError(
                    f"layer {position} expects {layer.in_dim} inputs, "
                    f"previous layer yields {self.layers[position - 1].out_dim}"
                )

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def feature_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def dims(self) -> List[int]:
        """Layer widths from input to feature, e.g. `[32, 64, 16]`."""
        return [self.input_dim] + [layer.out_dim for layer in self.layers]


@dataclass(frozen=True)
class ClassifierHead:
    """Linear C-way classifier over unit features."""

    weight: Matrix

    @property
    def feature_dim(self) -> int:
        return int(self.weight.shape[0])

    @property
    def class_count(self) -> int:
        return int(self.weight.shape[1])


@dataclass(frozen=True)
class Network:
    """Encoder plus classifier head."""

    encoder: EncoderParams
    head: ClassifierHead

    def __post_init__(self) -> None:
        if self.head.feature_dim != self.encoder.feature_dim:
            raise DimensionError(
                f"head expects {self.head.feature_dim}-d features, encoder yields {self.encoder.feature_dim}"
            )

    def parameters(self) -> ParamDict:
        """Named parameters in manifest order."""
        params: ParamDict = {}
        for position, layer in enumerate(self.encoder.layers):
            params[f"encoder.{position}.weight"] = layer.weight
            params[f"encoder.{position}.bias"] = layer.bias
        params["head.weight"] = self.head.weight
        return params

    def with_parameters(self, params: ParamDict) -> "Network":
        """Copy of the network with parameters replaced by name."""
        layers = list(self.encoder.layers)
        head = self.head
        for name, value in params.items():
            match = _ENCODER_PARAM.match(name)
            if match:
                position, kind = int(match.group(1)), match.group(2)
                layers[position] = replace(layers[position], **{kind: value})
            elif name == "head.weight":
                head = ClassifierHead(value)
            else:
                raise ValidationError(f"unknown parameter `{name}`")

        return Network(EncoderParams(tuple(layers)), head)


@dataclass(frozen=True)
class NetworkPair:
    """Student network and its temporal-average teacher."""

    student: Network
    teacher: Network
    ema_decay: float = 0.999
    pair_id: str = "pair-0"

    @classmethod
    def from_network(cls, network: Network, ema_decay: float = 0.999, pair_id: str = "pair-0") -> "NetworkPair":
        """Student and teacher both start as exact copies of `network`."""
        if not 0.0 <= ema_decay <= 1.0:
            raise ParameterError(f"ema_decay must lie in [0, 1], got {ema_decay}")
        student = network.with_parameters({name: value.copy() for name, value in network.parameters().items()})
        teacher = network.with_parameters({name: value.copy() for name, value in network.parameters().items()})
        return cls(student, teacher, ema_decay, pair_id)


@dataclass(frozen=True)
class FeatureCache:
    """Intermediate values of `forward_features` needed by the backward pass."""

    inputs: Tuple[Matrix, ...]
    activations: Tuple[Matrix, ...]
    raw_features: Matrix


def init_encoder(dims: Sequence[int], rng: np.random.Generator) -> EncoderParams:
    """Gaussian init with std 1/sqrt(fan_in), zero biases."""
    if len(dims) < 2 or any(d < 1 for d in dims):
        raise ParameterError(f"invalid encoder dims {list(dims)}")

    layers = tuple(
        Layer(
            rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out)),
            np.zeros((1, fan_out)),
        )
        for fan_in, fan_out in zip(dims[:-1], dims[1:])
    )
    return EncoderParams(layers)


def init_network(dims: Sequence[int], class_count: int, rng: np.random.Generator) -> Network:
    """Fresh encoder with a small random head."""
    encoder = init_encoder(dims, rng)
    head = ClassifierHead(rng.normal(0.0, 0.01, size=(encoder.feature_dim, class_count)))
    return Network(encoder, head)


def forward_features(enc: EncoderParams, batch: Matrix) -> Tuple[Matrix, FeatureCache]:
    """Unit-row features of `batch` and the cache for `backward_features`."""
    batch = as_matrix("batch", batch)
    if batch.shape[1] != enc.input_dim:
        raise DimensionError(f"batch width {batch.shape[1]} != encoder input width {enc.input_dim}")

    inputs: List[Matrix] = []
    activations: List[Matrix] = []
    hidden = batch
    for position, layer in enumerate(enc.layers):
        inputs.append(hidden)
        pre = matmul(hidden, layer.weight) + layer.bias
        if position < len(enc.layers) - 1:
            hidden = np.tanh(pre)
            activations.append(hidden)
        else:
            hidden = pre

    features = l2_normalize_rows(hidden)
    return features, FeatureCache(tuple(inputs), tuple(activations), hidden)


def backward_features(enc: EncoderParams, cache: FeatureCache, grad_features: Matrix) -> ParamDict:
    """Gradients of encoder parameters given dL/d(features)."""
    if grad_features.shape != cache.raw_features.shape:
        raise DimensionError(f"feature gradient {grad_features.shape} != features {cache.raw_features.shape}")

    grads: ParamDict = {}
    grad_pre = l2_normalize_backward(cache.raw_features, grad_features)
    for position in range(len(enc.layers) - 1, -1, -1):
        layer = enc.layers[position]
        grads[f"encoder.{position}.weight"] = cache.inputs[position].T @ grad_pre
        grads[f"encoder.{position}.bias"] = np.sum(grad_pre, axis=0, keepdims=True)
        if position:
            activation = cache.activations[position - 1]
            grad_pre = (grad_pre @ layer.weight.T) * (1.0 - activation * activation)

    return grads


def forward_logits(head: ClassifierHead, features: Matrix) -> Matrix:
    """Class probabilities `softmax(features @ weight)`."""
    features = as_matrix("features", features)
    if features.shape[1] != head.feature_dim:
        raise DimensionError(f"feature width {features.shape[1]} != head input width {head.feature_dim}")

    return row_softmax(matmul(features, head.weight), 1.0)


def backward_logits(head: ClassifierHead, features: Matrix, grad_logits: Matrix) -> Tuple[Matrix, Matrix]:
    """Return `(d head.weight, d features)` given dL/d(logits)."""
    return features.T @ grad_logits, grad_logits @ head.weight.T


def _blend(teacher: Network, student: Network, decay: float) -> Network:
    student_params = student.parameters()
    teacher_params = teacher.parameters()
    if student_params.keys() != teacher_params.keys():
        raise ConsistencyError("student and teacher expose different parameters")

    blended: ParamDict = {}
    for name, value in teacher_params.items():
        if value.shape != student_params[name].shape:
            raise ConsistencyError(
                f"`{name}` shape differs between teacher {value.shape} and student {student_params[name].shape}"
            )
        blended[name] = decay * value + (1.0 - decay) * student_params[name]

    return teacher.with_parameters(blended)


def ema_update(pair: NetworkPair) -> NetworkPair:
    """Teacher <- decay * teacher + (1 - decay) * student, encoder and head."""
    return replace(pair, teacher=_blend(pair.teacher, pair.student, pair.ema_decay))


def _unit_rows(cluster_means: Matrix) -> Matrix:
    cluster_means = as_matrix("cluster_means", cluster_means)
    norms = np.linalg.norm(cluster_means, axis=1)
    bad = np.flatnonzero(np.abs(norms - 1.0) > UNIT_TOLERANCE)
    if bad.size:
        raise ValidationError(f"cluster means must be unit rows, rows {bad[:10].tolist()} are not", rows=bad.tolist())
    return cluster_means


def reinit_head(pair: NetworkPair, cluster_means: Matrix) -> NetworkPair:
    """Replace student and teacher heads by `cluster_means.T`."""
    cluster_means = _unit_rows(cluster_means)
    if cluster_means.shape[1] != pair.student.encoder.feature_dim:
        raise DimensionError(
            f"cluster means width {cluster_means.shape[1]} != feature dim {pair.student.encoder.feature_dim}"
        )

    logger.debug(f"{pair.pair_id}: head re-initialised with {cluster_means.shape[0]} classes")
    student = Network(pair.student.encoder, ClassifierHead(cluster_means.T.copy()))
    teacher = Network(pair.teacher.encoder, ClassifierHead(cluster_means.T.copy()))
    return replace(pair, student=student, teacher=teacher)


def parameter_distance(a: Network, b: Network, names: Optional[Sequence[str]] = None) -> float:
    """Max absolute difference over (a subset of) named parameters."""
    params_a: Dict[str, Matrix] = a.parameters()
    params_b: Dict[str, Matrix] = b.parameters()
    selected = names if names is not None else list(params_a)
    distances = [float(np.max(np.abs(params_a[name] - params_b[name]), initial=0.0)) for name in selected]
    return max(distances, default=0.0)
