"""Adam optimizer with bias correction, operating on named parameter dicts."""

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .tensor import DTYPE, Tensor


@dataclass
class AdamState:
    """Per-parameter first/second moment buffers plus hyperparameters.

    ``step`` increases by exactly one per ``adam_step`` call.
    """

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> AdamState:
    """Apply one bias-corrected Adam update in place.

    ``params`` maps name -> Tensor, ``grads`` maps name -> ndarray of the same
    shape. Deterministic given inputs; updates run in the dict's iteration
    order with pure elementwise arithmetic.
    """
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            raise KeyError(f"adam_step: missing gradient for parameter {name!r}")
        if g.shape != p.data.shape:
            raise ShapeError(
                f"adam_step: grad shape {g.shape} != param shape {p.data.shape} for {name!r}")

    state.step += 1
    t = state.step
    b1 = DTYPE(state.beta1)
    b2 = DTYPE(state.beta2)
    corr1 = DTYPE(1.0 - state.beta1 ** t)
    corr2 = DTYPE(1.0 - state.beta2 ** t)
    lr = DTYPE(state.lr)
    eps = DTYPE(state.eps)

    one = DTYPE(1)
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=DTYPE)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        # in-place moment updates; one scratch buffer for the step itself
        m *= b1
        np.add(m, (one - b1) * g, out=m)
        v *= b2
        np.add(v, (one - b2) * np.square(g), out=v)
        step = np.asarray(np.sqrt(v / corr2), dtype=DTYPE)  # 0-d params stay arrays
        step += eps
        np.divide(m, step, out=step)
        step *= lr / corr1
        p.data -= step
    return state


def collect_grads(params: dict) -> dict:
    """Pull ``.grad`` off each parameter, requiring every one to be present."""
    grads = {}
    for name, p in params.items():
        if p.grad is None:
            raise ValueError(f"parameter {name!r} received no gradient")
        grads[name] = p.grad
    return grads


def zero_grads(params: dict) -> None:
    for p in params.values():
        p.grad = None


__all__ = ["AdamState", "adam_step", "collect_grads", "zero_grads", "Tensor"]
