"""Adam optimizer with bias-corrected first and second moments."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, ShapeError
from .tensor import Tensor


@dataclass
class AdamState:
    """Optimizer state over one flat parameter vector.

    m/v are moment estimates aligned with the concatenation of the
    parameter tensors in their canonical order; t counts completed steps.
    """

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    alpha: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(
        cls,
        params: list[Tensor],
        alpha: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ) -> "AdamState":
        total = sum(p.size for p in params)
        return cls(
            m=np.zeros(total, dtype=np.float64),
            v=np.zeros(total, dtype=np.float64),
            alpha=alpha,
            beta1=beta1,
            beta2=beta2,
            eps=eps,
        )


def adam_step(
    params: list[Tensor],
    grads: list[np.ndarray] | None,
    state: AdamState,
) -> AdamState:
    """One in-place Adam update over ``params``.

    ``grads`` defaults to each parameter's accumulated ``.grad``. If any
    gradient is non-finite the step is rejected and neither the
    parameters nor the state change.
    """
    if grads is None:
        grads = []
        for p in params:
            if p.grad is None:
                raise ShapeError("adam_step: parameter has no gradient")
            grads.append(p.grad)
    if len(grads) != len(params):
        raise ShapeError(
            f"adam_step: {len(params)} parameters but {len(grads)} gradients"
        )
    for p, g in zip(params, grads):
        if g.shape != p.data.shape:
            raise ShapeError(
                f"adam_step: gradient shape {g.shape} does not match parameter {p.data.shape}"
            )
    total = sum(p.size for p in params)
    if state.m.shape != (total,) or state.v.shape != (total,):
        raise ShapeError(
            f"adam_step: state sized for {state.m.size} values, parameters hold {total}"
        )

    flat_g = np.concatenate([np.asarray(g, dtype=np.float64).ravel() for g in grads])
    if not np.isfinite(flat_g).all():
        raise NumericalError("adam_step: non-finite gradient; step rejected")

    state.t += 1
    state.m[:] = state.beta1 * state.m + (1 - state.beta1) * flat_g
    state.v[:] = state.beta2 * state.v + (1 - state.beta2) * flat_g**2
    m_hat = state.m / (1 - state.beta1**state.t)
    v_hat = state.v / (1 - state.beta2**state.t)
    delta = state.alpha * m_hat / (np.sqrt(v_hat) + state.eps)

    offset = 0
    for p in params:
        n = p.size
        p.data -= delta[offset : offset + n].reshape(p.data.shape).astype(p.dtype)
        offset += n
    return state
