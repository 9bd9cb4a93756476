"""Comparison methods: plain in-context learning and a norm-constrained linear fit."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ContractError, SolverError
from .training import TrainConfig


@dataclass
class StableLinearModel:
    A: np.ndarray
    margin: float = 1e-3
    iterations: int = 0

    def __call__(self, x) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) @ self.A.T

    predict = __call__

    @property
    def spectral_norm(self) -> float:
        return float(np.linalg.norm(self.A, 2)) if self.A.size else 0.0


def project_spectral_ball(A: np.ndarray, radius: float) -> np.ndarray:
    """Nearest matrix (Frobenius) with operator 2-norm <= radius: clamp singular values."""
    U, s, Vt = np.linalg.svd(A)
    if s.size == 0 or s[0] <= radius:
        return A
    return (U * np.minimum(s, radius)) @ Vt


def fit_stable_linear(x, fx, margin: float = 1e-3, tol: float = 1e-8,
                      max_iter: int = 100_000) -> StableLinearModel:
    """Least squares A x_i ~ f(x_i) subject to |A|_2 <= 1 - margin.

    Accelerated projected gradient (with restart), started from the projected
    unconstrained solution. Stops when the gradient-mapping step
    |A - P(A - grad / L)|_F drops to ``tol`` (relative to max(1, |A|_F)).
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    fx = np.atleast_2d(np.asarray(fx, dtype=np.float64))
    if x.shape != fx.shape:
        raise ContractError(f"state and successor arrays differ in shape: {x.shape} vs {fx.shape}")
    if len(x) < 1:
        raise ContractError("stable-linear fit needs at least one pair")
    if not 0.0 < margin < 1.0:
        raise ContractError("margin must lie in (0, 1)")
    radius = 1.0 - margin
    XtX = x.T @ x
    FtX = fx.T @ x
    L = 2.0 * float(np.linalg.eigvalsh(XtX).max())
    A0 = np.linalg.lstsq(x, fx, rcond=None)[0].T
    A = project_spectral_ball(A0, radius)
    if L <= 0.0:
        return StableLinearModel(A, margin, 0)

    def grad(M):
        return 2.0 * (M @ XtX - FtX)

    def step(M):
        return project_spectral_ball(M - grad(M) / L, radius)

    Y, t = A.copy(), 1.0
    for it in range(max_iter + 1):
        nxt = step(A)
        if np.linalg.norm(nxt - A) <= tol * max(1.0, np.linalg.norm(A)):
            return StableLinearModel(nxt, margin, it)
        A_new = step(Y)
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        if np.sum((Y - A_new) * (A_new - A)) > 0:   # momentum points uphill: restart
            Y, t = A_new.copy(), 1.0
        else:
            Y = A_new + ((t - 1.0) / t_new) * (A_new - A)
            t = t_new
        A = A_new
    raise SolverError(f"stable-linear fit did not reach tolerance {tol:g} in {max_iter} iterations")


def plain_icl_config(base: TrainConfig | None = None, **overrides) -> TrainConfig:
    """Training preset for the plain in-context baseline: prediction error only, never a LYAP phase."""
    cfg = replace(base or TrainConfig(), **overrides)
    return replace(cfg, lam=0.0, switch_interval=max(cfg.total_steps, 1), train_lyapunov=False)
