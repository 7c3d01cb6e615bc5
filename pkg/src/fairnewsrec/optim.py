"""Adam with bias correction, plus global-norm gradient clipping."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, MutableMapping

import numpy as np


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_apply(
    state: AdamState,
    params: MutableMapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
) -> MutableMapping[str, np.ndarray]:
    """One Adam update of every parameter named in ``grads``.

    Updated arrays replace the entries of ``params``; the old arrays are not
    mutated, so callers holding references still see the pre-step values.
    """
    for name, g in grads.items():
        if params[name].shape != g.shape:
            raise ValueError(
                f"adam_apply: gradient for {name!r} has shape {g.shape}, "
                f"parameter has {params[name].shape}"
            )
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, g in grads.items():
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(g)
            v = np.zeros_like(g)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        params[name] = params[name] - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    norm = global_norm(grads)
    if max_norm > 0 and norm > max_norm:
        k = max_norm / norm
        grads = {n: g * k for n, g in grads.items()}
    return grads, norm
