"""AdamW with decoupled weight decay and global gradient-norm clipping.

Defaults follow the training recipe: betas (0.9, 0.95), epsilon 1e-15,
weight decay 0.0, clip threshold 1.0. Frozen parameters are simply not
present in the optimizer state and are never touched.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .params import ParamTree


@dataclass
class OptimizerState:
    names: list[str]
    betas: tuple[float, float] = (0.9, 0.95)
    eps: float = 1e-15
    weight_decay: float = 0.0
    clip_norm: float = 1.0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @staticmethod
    def for_params(tree: ParamTree, names, **kwargs) -> "OptimizerState":
        state = OptimizerState(names=list(names), **kwargs)
        for n in state.names:
            shape = tree[n].data.shape
            state.m[n] = np.zeros(shape)
            state.v[n] = np.zeros(shape)
        return state


def global_grad_norm(tree: ParamTree, names) -> float:
    total = 0.0
    for n in names:
        g = tree[n].grad
        if g is None:
            raise ValueError(f"missing gradient on unfrozen parameter {n!r}")
        total += float((g * g).sum())
    return float(np.sqrt(total))


def adamw_step(tree: ParamTree, state: OptimizerState, lr: float) -> float:
    """One update over `state.names`; returns the pre-clip gradient norm.

    The global norm is computed across all optimized parameters and, when it
    exceeds `clip_norm`, every gradient is rescaled before entering the
    moment estimates. Stored gradients are left untouched.
    """
    norm = global_grad_norm(tree, state.names)
    scale = state.clip_norm / norm if norm > state.clip_norm else 1.0

    state.step += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for n in state.names:
        p = tree[n]
        g = p.grad if scale == 1.0 else p.grad * scale
        m = state.m[n]
        v = state.v[n]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        if state.weight_decay != 0.0:
            update = update + state.weight_decay * p.data
        p.data = p.data - lr * update
    return norm
