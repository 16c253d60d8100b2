"""Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ShapeMismatch


@dataclass
class AdamState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, arrays, **kw) -> "AdamState":
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays], **kw)


def adam_update(params, grads, state: AdamState, lr: float):
    """Apply one Adam step in place to the arrays in ``params``.

    m <- b1 m + (1 - b1) g ; v <- b2 v + (1 - b2) g^2
    theta <- theta - lr * m_hat / (sqrt(v_hat) + eps), with m_hat = m / (1 - b1^t)
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeMismatch(
            f"{len(params)} parameters, {len(grads)} gradients, {len(state.m)} moments"
        )
    for p, g, m in zip(params, grads, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeMismatch(f"parameter {p.shape} vs gradient {np.shape(g)}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def adam_step(model, lr: float, grads=None):
    """Update ``model`` (a VNetModel) from its accumulated gradients, or ``grads``."""
    params = model.parameters()
    if grads is None:
        grads = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in params]
    adam_update([t.data for t in params], grads, model.adam, lr)
    return model
