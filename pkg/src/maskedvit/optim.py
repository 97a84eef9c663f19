"""Adam updates and a central-difference gradient checker."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Parameter, Tensor, backward, zero_grad


class DimensionMismatchError(ValueError):
    """Optimizer state does not line up with the parameters."""


class NondeterministicFunctionError(RuntimeError):
    """grad_check was handed a function that changes value between calls."""


@dataclass
class AdamState:
    """First/second moment estimates keyed by parameter name, plus the step count."""

    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def initial(cls, params: Sequence[Parameter]) -> "AdamState":
        return cls(
            step=0,
            m={p.name: np.zeros_like(p.data) for p in params},
            v={p.name: np.zeros_like(p.data) for p in params},
        )


def adam_step(
    params: Sequence[Parameter],
    grads: dict[str, np.ndarray],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    state: AdamState | None = None,
) -> AdamState:
    """One Adam update, in place on `params`; returns the advanced state.

    With an all-zero gradient and fresh state the update is exactly zero,
    so parameters are untouched.
    """
    if state is None:
        state = AdamState.initial(params)
    state.step += 1
    t = state.step
    bias1 = 1.0 - beta1**t
    bias2 = 1.0 - beta2**t
    for p in params:
        g = grads.get(p.name)
        if g is None:
            g = np.zeros_like(p.data)
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.data.shape:
            raise DimensionMismatchError(
                f"gradient for {p.name!r} has shape {g.shape}, parameter is {p.data.shape}"
            )
        m = state.m.get(p.name)
        v = state.v.get(p.name)
        if m is None or v is None:
            raise DimensionMismatchError(f"optimizer state missing entry for {p.name!r}")
        if m.shape != p.data.shape or v.shape != p.data.shape:
            raise DimensionMismatchError(
                f"optimizer state for {p.name!r} has shape {m.shape}/{v.shape}, "
                f"parameter is {p.data.shape}"
            )
        m[...] = beta1 * m + (1.0 - beta1) * g
        v[...] = beta2 * v + (1.0 - beta2) * (g * g)
        m_hat = m / bias1
        v_hat = v / bias2
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return state


class Adam:
    """Stateful wrapper around `adam_step` that reads gradients off the parameters."""

    def __init__(
        self,
        params: Sequence[Parameter],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        state: AdamState | None = None,
    ):
        self.params = list(params)
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise DimensionMismatchError("parameter names must be unique")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = state if state is not None else AdamState.initial(self.params)

    def step(self) -> None:
        grads = {
            p.name: (p.grad if p.grad is not None else np.zeros_like(p.data))
            for p in self.params
        }
        adam_step(
            self.params, grads, self.lr, self.beta1, self.beta2, self.eps, self.state
        )

    def zero_grad(self) -> None:
        zero_grad(self.params)


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Parameter],
    eps: float = 1e-5,
) -> float:
    """Compare backward() gradients against central differences.

    `f` takes no arguments, reads the live `params`, and returns a scalar
    Tensor; it must be deterministic (checked by evaluating twice). Every
    entry of every parameter is perturbed by +/- eps. Returns the worst
    relative error  |analytic - numeric| / max(1, |numeric|).
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")

    def value() -> float:
        out = f()
        if out.data.size != 1:
            raise ValueError(f"f() must return a scalar, got shape {out.shape}")
        return float(out.data.reshape(()))

    first, second = value(), value()
    if first != second:
        raise NondeterministicFunctionError(
            f"f() returned {first!r} then {second!r} on identical parameters"
        )

    zero_grad(params)
    backward(f())
    analytic = {
        p.name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for p in params
    }

    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)  # view; in-place perturbation, restored below
        grad_flat = analytic[p.name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = value()
            flat[i] = orig - eps
            lo = value()
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * eps)
            rel = abs(grad_flat[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, rel)
    zero_grad(params)
    return worst
