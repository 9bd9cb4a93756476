"""Parameter updates (SGD / Adam), gradient clipping, and the finite-difference oracle."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .errors import DimensionError, TrainingError
from .tensor import Tape, Tensor


@dataclass
class OptimizerState:
    """Learning rate, step counter and (for Adam) moment buffers keyed by parameter name."""

    learning_rate: float
    kind: str = "sgd"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")


def optimizer_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray],
                   state: OptimizerState) -> None:
    """Update ``params`` in place from ``grads`` (both keyed by parameter name)."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
        if g.shape != params[name].shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter {name!r} shape {params[name].shape}")
    state.step += 1
    lr = state.learning_rate
    if state.kind == "sgd":
        for name, g in grads.items():
            params[name].data -= lr * g
        return
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[name].data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def clip_global_norm(grads: dict, max_norm: float) -> float:
    """Scale ``grads`` in place so their global L2 norm is at most ``max_norm``; return the pre-clip norm."""
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for k in grads:
            grads[k] = grads[k] * scale
    return total


def finite_diff_check(f: Callable[[], Tensor], params: Mapping[str, Tensor] | list,
                      h: float = 1e-5, num_coords: int | None = 64,
                      seed: int = 0) -> float:
    """Largest relative error between taped and central-difference gradients.

    ``f`` recomputes a scalar loss from the current parameter values. At most
    ``num_coords`` coordinates are sampled uniformly over all parameters
    (``None`` checks every coordinate). The error of one coordinate is
    ``|analytic - numeric| / (|analytic| + 1e-8)``.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    items = list(params.items()) if isinstance(params, Mapping) else [(str(i), p) for i, p in enumerate(params)]
    for _, p in items:
        p.requires_grad = True
    with Tape() as tape:
        loss = f()
    grads = tape.backward(loss)
    analytic = [grads.get(p, np.zeros_like(p.data)) for _, p in items]

    coords = [(i, j) for i, (_, p) in enumerate(items) for j in range(p.data.size)]
    if num_coords is not None and num_coords < len(coords):
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(coords), size=num_coords, replace=False)
        coords = [coords[k] for k in pick]

    worst = 0.0
    for i, j in coords:
        flat = items[i][1].data.reshape(-1)
        orig = flat[j]
        flat[j] = orig + h
        fp = float(f().data)
        flat[j] = orig - h
        fm = float(f().data)
        flat[j] = orig
        numeric = (fp - fm) / (2.0 * h)
        a = float(analytic[i].reshape(-1)[j])
        worst = max(worst, abs(a - numeric) / (abs(a) + 1e-8))
    return worst
