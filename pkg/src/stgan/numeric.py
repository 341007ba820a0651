"""Dense float64 kernels: matmul, activations, BCE terms, Adam, finite differences.

Everything downstream builds on these primitives, so they stay deliberately
small and fully deterministic. All tensors are C-contiguous float64 ndarrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from .errors import ContractViolation, ShapeError

Tensor = np.ndarray

# probabilities are clamped to [PROB_EPS, 1 - PROB_EPS] before any log
PROB_EPS = 1e-7

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def tensor(data) -> Tensor:
    """Materialize data as a C-contiguous float64 array."""
    return np.ascontiguousarray(data, dtype=np.float64)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product with explicit shape checking."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(
            f"matmul expects 2-D operands, got {a.ndim}-D and {b.ndim}-D"
        )
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"matmul: inner dimensions disagree, {tuple(a.shape)} x {tuple(b.shape)}"
        )
    return a @ b


def sigmoid(x: Tensor) -> Tensor:
    # exp may overflow to inf for very negative x; 1/(1+inf) is exactly 0,
    # which is the correctly rounded float64 answer, so only the warning
    # needs suppressing.
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def activation(kind: str, x: Tensor) -> Tensor:
    """Elementwise nonlinearity. kind is 'sigmoid' or 'tanh'."""
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "tanh":
        return np.tanh(np.asarray(x, dtype=np.float64))
    raise ShapeError(f"unknown activation kind {kind!r}")


def clamp_prob(p):
    """Clamp probabilities away from 0 and 1 so logs stay finite."""
    return np.clip(p, PROB_EPS, 1.0 - PROB_EPS)


def bce_term(kind: str, d_out: float) -> float:
    """One binary-cross-entropy term of the adversarial losses.

    kind selects which term: 'real' and 'fake_for_g' penalize the output for
    being far from 1, 'fake_for_d' penalizes it for being far from 0. The
    probability is clamped before the log.
    """
    p = min(max(float(d_out), PROB_EPS), 1.0 - PROB_EPS)
    if kind in ("real", "fake_for_g"):
        return -math.log(p)
    if kind == "fake_for_d":
        return -math.log(1.0 - p)
    raise ShapeError(f"unknown bce term kind {kind!r}")


@dataclass
class Param:
    """A named tensor plus its gradient accumulator."""

    name: str
    value: Tensor
    grad: Tensor | None


class ParameterStore:
    """Ordered name -> Param registry.

    Iteration follows insertion order, which fixes the update order of Adam
    and the layout of checkpoints.
    """

    def __init__(self) -> None:
        self._params: dict[str, Param] = {}

    def register(self, name: str, value) -> Param:
        if name in self._params:
            raise ContractViolation(f"parameter {name!r} registered twice")
        v = tensor(value)
        p = Param(name=name, value=v, grad=np.zeros_like(v))
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Param:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self) -> Iterator[tuple[str, Param]]:
        return iter(self._params.items())

    def zero_grads(self) -> None:
        for p in self._params.values():
            if p.grad is None or p.grad.shape != p.value.shape:
                p.grad = np.zeros_like(p.value)
            else:
                p.grad.fill(0.0)

    @property
    def size(self) -> int:
        return sum(p.value.size for p in self._params.values())


@dataclass
class AdamState:
    """First/second moment estimates plus the shared step counter."""

    m: dict[str, Tensor] = field(default_factory=dict)
    v: dict[str, Tensor] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def for_store(cls, params: ParameterStore) -> "AdamState":
        state = cls()
        for name, p in params.items():
            state.m[name] = np.zeros_like(p.value)
            state.v[name] = np.zeros_like(p.value)
        return state


def adam_step(
    params: ParameterStore,
    state: AdamState,
    lr: float,
    beta1: float = ADAM_BETA1,
    beta2: float = ADAM_BETA2,
    eps: float = ADAM_EPS,
) -> None:
    """One bias-corrected Adam update over every parameter in the store.

    The step counter increments exactly once per call. Update rule per
    parameter: value -= lr * m_hat / (sqrt(v_hat) + eps), i.e. eps sits
    outside the square root.
    """
    state.t += 1
    t = state.t
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in params.items():
        g = p.grad
        if g is None:
            raise ContractViolation(f"parameter {name!r} has no gradient")
        if g.shape != p.value.shape:
            raise ContractViolation(
                f"gradient shape {g.shape} does not match parameter "
                f"{name!r} shape {p.value.shape}"
            )
        if name not in state.m:
            raise ContractViolation(f"parameter {name!r} unknown to this AdamState")
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.value -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def finite_diff_grad(
    loss_fn: Callable[[ParameterStore], float],
    params: ParameterStore,
    eps: float = 1e-5,
) -> dict[str, Tensor]:
    """Central-difference gradient of loss_fn for every parameter.

    Perturbs each coordinate in place and restores it, so loss_fn must read
    parameter values fresh on every call. O(2 * total size) evaluations:
    intended for small validation instances only.
    """
    grads: dict[str, Tensor] = {}
    for name, p in params.items():
        flat = p.value.reshape(-1)
        g = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = loss_fn(params)
            flat[i] = orig - eps
            f_minus = loss_fn(params)
            flat[i] = orig
            g[i] = (f_plus - f_minus) / (2.0 * eps)
        grads[name] = g.reshape(p.value.shape)
    return grads


def max_rel_error(a: Tensor, b: Tensor, floor: float = 1e-8) -> float:
    """max_i |a_i - b_i| / max(|a_i|, |b_i|, floor), the gradient-check metric."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ShapeError(f"max_rel_error: shapes {a.shape} vs {b.shape}")
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0
