"""State-dependent attenuation so predictions satisfy the Lyapunov decrease condition.

For a state x with prediction G(x) the attenuator is the largest
gamma in [0, 1] with

    H(gamma) = V(gamma * G(x)) - beta * V(x) <= 0.

H(0) = -beta V(x) < 0 away from the origin because V(0) = 0 exactly and
V(x) >= eps |x|^2, so a sign change always exists when H(1) > 0.

Every function takes ``G`` and ``V`` either as models (with a ``context``)
or as context-bound callables mapping states (N, d) to (N, d) and (N,).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .data import Context
from .errors import ContractError, EnforcementError
from .models import Conditioned, IclTransformer

ORIGIN_TOL = 1e-12
TOL_ROOT = 1e-10
TOL_ENFORCE = 1e-8
GRID_CELLS = 32
MAX_ITER = 60


class Branch(str, Enum):
    PASSTHROUGH = "PASSTHROUGH"
    BISECTED = "BISECTED"
    ORIGIN = "ORIGIN"


@dataclass
class GammaResult:
    gamma: float
    decrease_margin: float
    iterations: int
    branch: Branch

    def to_dict(self) -> dict:
        return {"gamma": self.gamma, "margin": self.decrease_margin,
                "iterations": self.iterations, "branch": self.branch.value}


@dataclass
class GammaBatch:
    """Vectorized counterpart of GammaResult for N states."""

    gamma: np.ndarray          # (N,)
    margin: np.ndarray         # (N,)
    iterations: np.ndarray     # (N,) int
    branch: np.ndarray         # (N,) branch names (Branch values)

    def __len__(self) -> int:
        return len(self.gamma)

    def __getitem__(self, i) -> GammaResult:
        return GammaResult(float(self.gamma[i]), float(self.margin[i]), int(self.iterations[i]), Branch(self.branch[i]))

    def fractions(self) -> dict[str, float]:
        n = max(len(self), 1)
        return {b.value: float(np.sum(self.branch == b.value)) / n for b in Branch}


def bind(model_or_fn, context: Context | None):
    if isinstance(model_or_fn, IclTransformer):
        if context is None:
            raise ContractError("a context is required to condition a model")
        return Conditioned(model_or_fn, context)
    if isinstance(model_or_fn, Conditioned) or callable(model_or_fn):
        return model_or_fn
    raise ContractError(f"cannot evaluate {type(model_or_fn).__name__} as a model")


def _as_batch(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0:
        x = x.reshape(1)
    single = x.ndim == 1
    return (x[None] if single else x), single


def _call_v(V, states) -> np.ndarray:
    return np.asarray(V(states), dtype=np.float64).reshape(len(states))


def decrease_condition(G, V, x, context: Context | None = None, beta: float = 0.95):
    """V(G(x)) - beta V(x) for one state (float) or a batch (N,)."""
    g, v = bind(G, context), bind(V, context)
    X, single = _as_batch(x)
    m = _call_v(v, np.asarray(g(X)).reshape(X.shape)) - beta * _call_v(v, X)
    return float(m[0]) if single else m


def h_function(G, V, x, gamma, context: Context | None = None, beta: float = 0.95):
    """H(gamma) = V(gamma G(x)) - beta V(x); gamma scalar or one value per state."""
    g, v = bind(G, context), bind(V, context)
    X, single = _as_batch(x)
    gam = np.broadcast_to(np.asarray(gamma, dtype=np.float64), (len(X),))
    if np.any(gam < 0) or np.any(gam > 1):
        raise ContractError("gamma must lie in [0, 1]")
    gx = np.asarray(g(X)).reshape(X.shape)
    h = _call_v(v, gam[:, None] * gx) - beta * _call_v(v, X)
    return float(h[0]) if single else h


def compute_gamma_batch(G, V, X, context: Context | None = None, beta: float = 0.95,
                        tol_root: float = TOL_ROOT, max_iter: int = MAX_ITER,
                        grid_cells: int = GRID_CELLS, origin_tol: float = ORIGIN_TOL,
                        predictions: np.ndarray | None = None) -> GammaBatch:
    """Attenuators for states X (N, d).

    States with H(1) > 0 scan gamma = 1, 1 - 1/cells, ..., 0 for the first
    grid value with H <= 0, then bisect the bracketing cell down to
    ``tol_root`` and keep the left end (H <= 0 there by construction).
    """
    if tol_root <= 0:
        raise ContractError("tol_root must be positive")
    if grid_cells < 1 or max_iter < 0:
        raise ContractError("grid_cells must be >= 1 and max_iter >= 0")
    g, v = bind(G, context), bind(V, context)
    X = np.asarray(X, dtype=np.float64)
    N = len(X)
    gx = np.asarray(g(X) if predictions is None else predictions, dtype=np.float64).reshape(X.shape)
    vx = _call_v(v, X)

    gamma = np.ones(N)
    iters = np.zeros(N, dtype=np.int64)
    branch = np.full(N, Branch.PASSTHROUGH.value, dtype=object)
    margin = _call_v(v, gx) - beta * vx

    origin = np.linalg.norm(X, axis=1) < origin_tol
    gamma[origin] = 0.0
    branch[origin] = Branch.ORIGIN.value
    if origin.any():
        margin[origin] = _call_v(v, np.zeros((int(origin.sum()), X.shape[1]))) - beta * vx[origin]

    # ties (H(1) == 0) pass through
    idx = np.flatnonzero(~origin & ~(margin <= 0))
    if idx.size == 0:
        return GammaBatch(gamma, margin, iters, branch)
    if not np.all(np.isfinite(gx[idx])) or not np.all(np.isfinite(vx[idx])):
        bad = idx[~(np.isfinite(gx[idx]).all(axis=1) & np.isfinite(vx[idx]))][0]
        raise EnforcementError(f"non-finite model output at state {X[bad].tolist()}")

    grid = 1.0 - np.arange(1, grid_cells + 1) / grid_cells                # descending, ends at 0
    M = idx.size
    gam_grid = np.broadcast_to(grid, (M, grid_cells))
    pts = (gam_grid[..., None] * gx[idx][:, None, :]).reshape(M * grid_cells, -1)
    h_grid = (_call_v(v, pts).reshape(M, grid_cells) - beta * vx[idx][:, None])
    ok = h_grid <= 0
    if not ok.any(axis=1).all():
        bad = idx[~ok.any(axis=1)][0]
        raise EnforcementError(f"no sign change of H on the grid at state {X[bad].tolist()} "
                               f"(H(0) = {h_grid[~ok.any(axis=1)][0, -1]:.3e})")
    first = ok.argmax(axis=1)
    lo = grid[first]
    hi = lo + 1.0 / grid_cells
    h_lo = h_grid[np.arange(M), first]
    gxi = gx[idx]
    n_iter = 0
    while n_iter < max_iter and (hi - lo).max() > tol_root:
        mid = 0.5 * (lo + hi)
        h_mid = _call_v(v, mid[:, None] * gxi) - beta * vx[idx]
        left = h_mid <= 0
        lo = np.where(left, mid, lo)
        h_lo = np.where(left, h_mid, h_lo)
        hi = np.where(left, hi, mid)
        n_iter += 1
    gamma[idx] = lo
    margin[idx] = h_lo
    iters[idx] = n_iter
    branch[idx] = Branch.BISECTED.value
    return GammaBatch(gamma, margin, iters, branch)


def compute_gamma(G, V, x, context: Context | None = None, beta: float = 0.95,
                  tol_root: float = TOL_ROOT, max_iter: int = MAX_ITER,
                  grid_cells: int = GRID_CELLS, origin_tol: float = ORIGIN_TOL) -> GammaResult:
    X, _ = _as_batch(x)
    return compute_gamma_batch(G, V, X[:1], context, beta, tol_root, max_iter, grid_cells, origin_tol)[0]


def expected_iterations(tol_root: float = TOL_ROOT, grid_cells: int = GRID_CELLS) -> int:
    """Bisection steps needed to shrink one grid cell to ``tol_root``."""
    return max(0, math.ceil(math.log2((1.0 / grid_cells) / tol_root)))


def attenuate_batch(G, V, X, context: Context | None = None, beta: float = 0.95,
                    tol_enforce: float = TOL_ENFORCE, **kw) -> tuple[np.ndarray, GammaBatch]:
    """gamma(x) G(x) for states X (N, d), checking the decrease margin afterwards."""
    g, v = bind(G, context), bind(V, context)
    X = np.asarray(X, dtype=np.float64)
    gx = np.asarray(g(X), dtype=np.float64).reshape(X.shape)
    res = compute_gamma_batch(g, v, X, beta=beta, predictions=gx, **kw)
    out = res.gamma[:, None] * gx
    # recompute on the actual outputs so the check does not trust the search
    res.margin = _call_v(v, out) - beta * _call_v(v, X)
    bad = np.flatnonzero(~(res.margin <= tol_enforce) & (res.branch != Branch.ORIGIN.value))
    if bad.size:
        i = bad[0]
        raise EnforcementError(f"decrease margin {res.margin[i]:.3e} > {tol_enforce:g} at state {X[i].tolist()}")
    return out, res


def attenuated_predict(G, V, x, context: Context | None = None, beta: float = 0.95,
                       tol_enforce: float = TOL_ENFORCE, **kw) -> tuple[np.ndarray, GammaResult]:
    X, _ = _as_batch(x)
    out, res = attenuate_batch(G, V, X[:1], context, beta, tol_enforce, **kw)
    return out[0], res[0]
