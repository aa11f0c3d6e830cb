"""Dense matrix primitives, closed-form backward passes and Adam."""

from dataclasses import dataclass, field, replace
from typing import Callable, Dict, Optional, Tuple

import numpy as np
from typeguard import TypeCheckError, check_type

from gcmt.core.errors import DimensionError, NumericError, ParameterError
from gcmt.typing import Matrix, ParamDict
from gcmt.utils.logging import get_logger

# Get the logger
logger = get_logger()

NORM_EPS = 1e-12


def as_matrix(name: str, value: object) -> Matrix:
    """Check that `value` is a 2-D array and return it as float64."""
    try:
        check_type(value, np.ndarray)
    except TypeCheckError as e:
        raise TypeError(f"`{name}` received invalid type - {e}")

    array: np.ndarray = value  # type: ignore[assignment]
    if array.ndim != 2:
        raise DimensionError(f"`{name}` must be 2-D, got shape {array.shape}", shape=array.shape)

    return np.asarray(array, dtype=np.float64)


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Matrix product `a @ b`."""
    a = as_matrix("a", a)
    b = as_matrix("b", b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}", left=a.shape, right=b.shape)

    return a @ b


def row_softmax(m: Matrix, temperature: float = 1.0) -> Matrix:
    """Softmax of every row of `m / temperature` with max subtraction.

    Entries equal to `-inf` are masked out and receive probability 0.
    """
    if not temperature > 0:
        raise ParameterError(f"temperature must be positive, got {temperature}", temperature=temperature)

    m = as_matrix("m", m)
    if m.shape[0] == 0 or m.shape[1] == 0:
        return np.zeros_like(m)

    z = m / temperature
    z = z - np.max(z, axis=1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=1, keepdims=True)


def row_softmax_backward(probs: Matrix, grad_probs: Matrix, temperature: float = 1.0) -> Matrix:
    """Vector-Jacobian product of `row_softmax` w.r.t. its input matrix."""
    if probs.shape != grad_probs.shape:
        raise DimensionError(f"gradient shape {grad_probs.shape} != {probs.shape}")

    inner = np.sum(grad_probs * probs, axis=1, keepdims=True)
    return probs * (grad_probs - inner) / temperature


def l2_normalize_rows(m: Matrix) -> Matrix:
    """Divide each row by max(||row||, 1e-12)."""
    m = as_matrix("m", m)
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    return m / np.maximum(norms, NORM_EPS)


def l2_normalize_backward(raw: Matrix, grad_normalized: Matrix) -> Matrix:
    """Vector-Jacobian product of `l2_normalize_rows` at `raw`."""
    norms = np.linalg.norm(raw, axis=1, keepdims=True)
    safe = np.maximum(norms, NORM_EPS)
    unit = raw / safe
    radial = np.sum(unit * grad_normalized, axis=1, keepdims=True)
    # guarded rows are a plain scaling by 1/eps
    projected = np.where(norms > NORM_EPS, grad_normalized - unit * radial, grad_normalized)
    return projected / safe


@dataclass(frozen=True)
class GradBundle:
    """Scalar value with its gradients keyed by parameter name."""

    value: float
    gradients: ParamDict = field(default_factory=dict)

    def __add__(self, other: "GradBundle") -> "GradBundle":
        """Sum values and gradients of two bundles."""
        merged = {name: grad.copy() for name, grad in self.gradients.items()}
        for name, grad in other.gradients.items():
            if name in merged:
                if merged[name].shape != grad.shape:
                    raise DimensionError(f"gradient `{name}` shapes differ: {merged[name].shape} vs {grad.shape}")
                merged[name] = merged[name] + grad
            else:
                merged[name] = grad.copy()

        return GradBundle(self.value + other.value, merged)

    def scaled(self, factor: float) -> "GradBundle":
        """Multiply value and gradients by `factor`."""
        return GradBundle(self.value * factor, {name: grad * factor for name, grad in self.gradients.items()})

    def global_norm(self) -> float:
        """L2 norm over all gradient entries."""
        return float(np.sqrt(sum(float(np.sum(grad * grad)) for grad in self.gradients.values())))


@dataclass(frozen=True)
class AdamState:
    """Moments of one parameter matrix."""

    first_moment: Matrix
    second_moment: Matrix
    step: int = 0
    learning_rate: float = 0.00035
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def zeros_like(cls, param: Matrix, learning_rate: float = 0.00035) -> "AdamState":
        """Fresh state for a parameter of the same shape."""
        return cls(np.zeros_like(param), np.zeros_like(param), learning_rate=learning_rate)


def adam_step(state: AdamState, params: Matrix, grads: Matrix) -> Tuple[AdamState, Matrix]:
    """One bias-corrected Adam update; returns `(new_state, new_params)`."""
    if params.shape != grads.shape or params.shape != state.first_moment.shape:
        raise DimensionError(
            f"adam shapes disagree: params {params.shape}, grads {grads.shape}, state {state.first_moment.shape}"
        )

    step = state.step + 1
    first = state.beta1 * state.first_moment + (1.0 - state.beta1) * grads
    second = state.beta2 * state.second_moment + (1.0 - state.beta2) * grads * grads
    first_hat = first / (1.0 - state.beta1**step)
    second_hat = second / (1.0 - state.beta2**step)
    new_params = params - state.learning_rate * first_hat / (np.sqrt(second_hat) + state.epsilon)

    return replace(state, first_moment=first, second_moment=second, step=step), new_params


class AdamOptimizer:
    """Adam over a dict of named parameters."""

    def __init__(self, learning_rate: float = 0.00035, beta1: float = 0.9, beta2: float = 0.999) -> None:
        """Adam optimizer constructor."""
        self._learning_rate = learning_rate
        self._beta1 = beta1
        self._beta2 = beta2
        self._states: Dict[str, AdamState] = {}

    @property
    def learning_rate(self) -> float:
        """Current learning rate."""
        return self._learning_rate

    def set_learning_rate(self, learning_rate: float) -> None:
        """Change the learning rate for all subsequent steps."""
        if learning_rate != self._learning_rate:
            logger.info(f"learning rate {self._learning_rate} -> {learning_rate}")
        self._learning_rate = learning_rate

    def state(self, name: str) -> Optional[AdamState]:
        """Adam state of a parameter, if it has been stepped."""
        return self._states.get(name)

    def reset(self, name: str) -> None:
        """Forget the moments of one parameter."""
        self._states.pop(name, None)

    def step(self, params: ParamDict, grads: ParamDict) -> ParamDict:
        """Apply one Adam step to every parameter with a gradient."""
        updated = dict(params)
        for name in sorted(grads):
            if name not in params:
                raise DimensionError(f"gradient for unknown parameter `{name}`")

            state = self._states.get(name)
            if state is None or state.first_moment.shape != params[name].shape:
                state = AdamState(
                    np.zeros_like(params[name]),
                    np.zeros_like(params[name]),
                    beta1=self._beta1,
                    beta2=self._beta2,
                )
            state = replace(state, learning_rate=self._learning_rate)
            self._states[name], updated[name] = adam_step(state, params[name], grads[name])

        return updated


def finite_diff_check(
    loss_fn: Callable[[Matrix], float],
    params: Matrix,
    analytic: Matrix,
    h: float = 1e-5,
) -> float:
    """Max over coordinates of |analytic - numeric| / max(1, |numeric|) with central differences."""
    if not h > 0:
        raise ParameterError(f"step must be positive, got {h}")
    if params.shape != analytic.shape:
        raise DimensionError(f"analytic gradient shape {analytic.shape} != parameter shape {params.shape}")

    base = np.array(params, dtype=np.float64, copy=True)
    worst = 0.0
    for index in np.ndindex(*base.shape):
        original = base[index]

        base[index] = original + h
        plus = float(loss_fn(base.copy()))
        base[index] = original - h
        minus = float(loss_fn(base.copy()))
        base[index] = original

        if not (np.isfinite(plus) and np.isfinite(minus)):
            raise NumericError(f"loss is not finite at coordinate {index}", index=index)

        numeric = (plus - minus) / (2.0 * h)
        error = abs(float(analytic[index]) - numeric) / max(1.0, abs(numeric))
        worst = max(worst, error)

    return worst
