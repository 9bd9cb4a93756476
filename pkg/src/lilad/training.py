"""Alternating (adversarial) training of the dynamics and Lyapunov models."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .data import PromptPrefix, TaskPool
from .errors import ContractError, DimensionError, TrainingError
from .models import IclDynamicsModel, IclLyapunovModel, save_model
from .optim import OptimizerState, clip_global_norm, optimizer_step
from .tensor import Tape, Tensor

DYN = "DYN"
LYAP = "LYAP"


def phase_of(k: int, switch_interval: int) -> str:
    if k < 0:
        raise ContractError("step index must be >= 0")
    if switch_interval < 1:
        raise ContractError("switch_interval must be >= 1")
    return DYN if (k // switch_interval) % 2 == 0 else LYAP


@dataclass
class TrainConfig:
    total_steps: int = 2000
    switch_interval: int = 100
    lam: float = 0.1
    beta: float = 0.95
    lr_dyn: float = 1e-3
    lr_lyap: float = 1e-3
    batch_tasks: int = 8
    # prompt length n; prefix lengths p are drawn from {0, ..., n - 1}. None -> max_context + 1
    prompt_len: int | None = None
    seed: int = 0
    optimizer: str = "sgd"
    clip_norm: float = 1.0
    squared_error: bool = False
    all_positions: bool = False
    train_lyapunov: bool = True
    checkpoint_every: int = 0
    early_stop: bool = True
    early_stop_window: int = 10
    early_stop_rtol: float = 1e-5

    def __post_init__(self):
        if self.total_steps < 0:
            raise ContractError("total_steps must be >= 0")
        if self.switch_interval < 1:
            raise ContractError("switch_interval must be >= 1")
        if self.total_steps and self.switch_interval > self.total_steps:
            raise ContractError("switch_interval must not exceed total_steps")
        if not 0.0 < self.beta < 1.0:
            raise ContractError("beta must lie in (0, 1)")
        if self.lam < 0:
            raise ContractError("lam must be >= 0")
        if self.lr_dyn <= 0 or self.lr_lyap <= 0:
            raise ContractError("learning rates must be positive")
        if self.batch_tasks < 1:
            raise ContractError("batch_tasks must be >= 1")
        if self.prompt_len is not None and self.prompt_len < 1:
            raise ContractError("prompt_len must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ContractError(f"unknown optimizer {self.optimizer!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainLog:
    records: list = field(default_factory=list)

    def append(self, **rec) -> None:
        self.records.append(rec)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def phases(self) -> list[str]:
        return [r["phase"] for r in self.records]

    @property
    def losses(self) -> list[float]:
        return [r["loss"] for r in self.records]

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(json.dumps(r, sort_keys=True) + "\n")

    @classmethod
    def read_jsonl(cls, path) -> "TrainLog":
        with open(path) as fh:
            return cls([json.loads(line) for line in fh if line.strip()])


# ---------------------------------------------------------------------------
# batches

@dataclass
class Batch:
    """Contexts padded to a common length plus per-query visibility limits.

    ``limits[b, s] = 2 * (number of context pairs seen by query s)``; padded
    context rows are never visible.
    """

    cx: np.ndarray        # (B, J, d)
    cfx: np.ndarray       # (B, J, d)
    queries: np.ndarray   # (B, S, d)
    targets: np.ndarray   # (B, S, d)
    limits: np.ndarray    # (B, S)

    @property
    def size(self) -> int:
        return self.limits.size


def batch_from_prefixes(prefixes: list[PromptPrefix]) -> Batch:
    if not prefixes:
        raise ContractError("empty prefix batch")
    d = len(prefixes[0].query)
    J = max(p.j for p in prefixes)
    B = len(prefixes)
    cx = np.zeros((B, J, d))
    cfx = np.zeros((B, J, d))
    for b, p in enumerate(prefixes):
        if len(p.query) != d:
            raise DimensionError("prefixes of different state dimension in one batch")
        cx[b, :p.j] = p.context_x
        cfx[b, :p.j] = p.context_fx
    q = np.stack([p.query for p in prefixes])[:, None]
    tg = np.stack([p.target if p.target is not None else np.full(d, np.nan) for p in prefixes])[:, None]
    lim = np.array([[2 * p.j] for p in prefixes])
    return Batch(cx, cfx, q, tg, lim)


def sample_batch(pool: TaskPool, n: int, batch_tasks: int, rng: np.random.Generator,
                 all_positions: bool = False) -> Batch:
    """Sample ``batch_tasks`` tasks, one n-pair prompt each, and one prefix length per task.

    With ``all_positions`` every prefix p = 0..n-1 of each prompt is a query.
    """
    B = batch_tasks
    d = pool.spec.state_dim
    task_idx = rng.integers(0, len(pool), size=B)
    px = np.empty((B, n, d))
    pfx = np.empty((B, n, d))
    for b, t in enumerate(task_idx):
        ds = pool.tasks[t]
        if len(ds) < n:
            raise TrainingError(f"task {ds.task_id} has {len(ds)} pairs, prompts need {n}")
        rows = rng.choice(len(ds), size=n, replace=False)
        px[b] = ds.x[rows]
        pfx[b] = ds.fx[rows]
    if all_positions:
        lim = np.broadcast_to(2 * np.arange(n), (B, n)).copy()
        return Batch(px[:, :n - 1], pfx[:, :n - 1], px, pfx, lim)
    p = rng.integers(0, n, size=B)
    J = int(p.max())
    visible = np.arange(J)[None, :] < p[:, None]
    cx = np.where(visible[..., None], px[:, :J], 0.0)
    cfx = np.where(visible[..., None], pfx[:, :J], 0.0)
    ar = np.arange(B)
    return Batch(cx, cfx, px[ar, p][:, None], pfx[ar, p][:, None], (2 * p)[:, None])


# ---------------------------------------------------------------------------
# losses

QueryFn = Callable[[Tensor], Tensor]


def bind_dynamics(G, batch: Batch) -> QueryFn:
    """Map queries (B, S, d) -> predictions (B, S, d) on the batch contexts.

    ``G`` is a dynamics model or already such a callable (stubs).
    """
    if isinstance(G, IclDynamicsModel):
        enc = G.encode(batch.cx, batch.cfx)
        return lambda q: G.predict(enc, q, batch.limits)
    return lambda q: T.as_tensor(G(q))


def bind_lyapunov(V, batch: Batch) -> QueryFn:
    """Map queries (B, S, d) -> V values (B, S); raw(0 | C) is shared by all calls."""
    if isinstance(V, IclLyapunovModel):
        enc = V.encode(batch.cx, batch.cfx)
        raw_zero = V.raw(enc, np.zeros(batch.queries.shape), batch.limits)
        return lambda q: V.value(enc, q, batch.limits, raw_zero=raw_zero)
    return lambda q: T.as_tensor(V(q))


def decrease_hinge(v_next: Tensor, v_now: Tensor, beta: float) -> Tensor:
    return T.relu(v_next - v_now * beta)


def prediction_error(pred: Tensor, target, squared: bool = False) -> Tensor:
    diff = pred - T.as_tensor(target)
    return (diff * diff).sum(axis=-1) if squared else T.norm_lastdim(diff)


def _check_finite(loss: Tensor, what: str, batch_index) -> Tensor:
    if not np.isfinite(loss.data).all():
        raise TrainingError(f"non-finite {what} at batch {batch_index}")
    return loss


def dynamics_loss(G, V, batch: Batch, lam: float, beta: float, squared: bool = False,
                  batch_index=None, with_hinge: bool = False):
    """Mean prediction-error norm plus ``lam`` times the mean decrease hinge.

    V's gradients are only recorded if its parameters require grad; the
    caller freezes it. With ``lam == 0`` V is not evaluated and may be None.
    """
    g = bind_dynamics(G, batch)
    pred = g(Tensor(batch.queries))
    err = prediction_error(pred, batch.targets, squared)
    loss = err.mean()
    hinge = None
    if lam > 0:
        if V is None:
            raise ContractError("dynamics loss with lam > 0 needs a Lyapunov model")
        v = bind_lyapunov(V, batch)
        hinge = decrease_hinge(v(pred), v(Tensor(batch.queries)), beta)
        loss = loss + hinge.mean() * lam
    _check_finite(loss, "dynamics loss", batch_index)
    return (loss, hinge) if with_hinge else loss


def lyapunov_loss(G, V, batch: Batch, beta: float, batch_index=None, with_hinge: bool = False):
    """Mean decrease hinge max(V(G(q)) - beta V(q), 0) with G treated as frozen."""
    g = bind_dynamics(G, batch)
    with Tape.paused():
        pred = Tensor(g(Tensor(batch.queries)).data)
    v = bind_lyapunov(V, batch)
    hinge = decrease_hinge(v(pred), v(Tensor(batch.queries)), beta)
    loss = _check_finite(hinge.mean(), "Lyapunov loss", batch_index)
    return (loss, hinge) if with_hinge else loss


def violation_rate(G, V, prefixes, beta: float) -> float:
    """Fraction of prefixes with V(G(q|C)|C) - beta V(q|C) > 0."""
    batch = prefixes if isinstance(prefixes, Batch) else batch_from_prefixes(list(prefixes))
    if batch.size == 0:
        raise ContractError("violation rate of an empty sample")
    with Tape.paused():
        pred = bind_dynamics(G, batch)(Tensor(batch.queries))
        v = bind_lyapunov(V, batch)
        margin = v(pred).data - beta * v(Tensor(batch.queries)).data
    return float(np.mean(margin > 0))


def prefix_batches(prefixes: list[PromptPrefix], size: int = 256):
    for i in range(0, len(prefixes), size):
        yield batch_from_prefixes(prefixes[i:i + size])


# ---------------------------------------------------------------------------
# the loop

@dataclass
class TrainResult:
    G: IclDynamicsModel
    V: IclLyapunovModel | None
    log: TrainLog
    steps_done: int
    stopped_early: bool = False
    opt_dyn: OptimizerState | None = None
    opt_lyap: OptimizerState | None = None
    rng_state: dict | None = None


def _named_grads(model, grads) -> dict:
    return {name: grads[p] for name, p in model.params.items() if p in grads}


def train(pool: TaskPool, G: IclDynamicsModel, V: IclLyapunovModel | None, cfg: TrainConfig,
          out_dir=None, start_step: int = 0, opt_dyn: OptimizerState | None = None,
          opt_lyap: OptimizerState | None = None, rng_state: dict | None = None,
          log: TrainLog | None = None, progress: Callable[[dict], None] | None = None) -> TrainResult:
    """Run steps ``start_step .. total_steps - 1`` of alternating training.

    The active model of each phase receives one clipped optimizer step; the
    other model's parameters have ``requires_grad`` off so no gradient is
    even formed for them. A non-finite loss restores the models to the last
    good checkpoint (saved to ``out_dir`` when given) and raises
    ``TrainingError``.
    """
    if len(pool) == 0:
        raise ContractError("empty task pool")
    d = pool.spec.state_dim
    if G.arch.state_dim != d or (V is not None and V.arch.state_dim != d):
        raise DimensionError(f"model state_dim does not match pool dimension {d}")
    if V is None and (cfg.lam > 0 or (cfg.total_steps > cfg.switch_interval and cfg.train_lyapunov)):
        raise ContractError("training without a Lyapunov model needs lam = 0 and no LYAP phase")
    n = cfg.prompt_len or G.arch.max_context + 1
    if n - 1 > G.arch.max_context or (V is not None and n - 1 > V.arch.max_context):
        raise ContractError(f"prompt length {n} exceeds model context capacity")

    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(1)[0])
    if rng_state is not None:
        rng.bit_generator.state = rng_state
    opt_dyn = opt_dyn or OptimizerState(cfg.lr_dyn, cfg.optimizer)
    if V is not None:
        opt_lyap = opt_lyap or OptimizerState(cfg.lr_lyap, cfg.optimizer)
    log = log if log is not None else TrainLog()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    def snapshot(step):
        return {"step": step, "G": G.state_copy(), "V": V.state_copy() if V is not None else None,
                "rng": rng.bit_generator.state}

    def write_ckpt(step):
        extra = {"rng_state": rng.bit_generator.state}
        save_model(G, out / "G.ckpt", cfg.to_dict(), step, opt_dyn, extra)
        if V is not None:
            save_model(V, out / "V.ckpt", cfg.to_dict(), step, opt_lyap, extra)

    good = snapshot(start_step)
    window: list[tuple[float, float]] = []
    acc = {DYN: [], LYAP: []}
    t0 = time.perf_counter()
    stopped = False
    k = start_step
    try:
        while k < cfg.total_steps:
            phase = phase_of(k, cfg.switch_interval)
            if phase == LYAP and V is None:
                raise ContractError("LYAP phase without a Lyapunov model")
            batch = sample_batch(pool, n, cfg.batch_tasks, rng, cfg.all_positions)
            G.set_trainable(phase == DYN)
            if V is not None:
                V.set_trainable(phase == LYAP)
            with Tape() as tape:
                if phase == DYN:
                    loss, hinge = dynamics_loss(G, V, batch, cfg.lam, cfg.beta, cfg.squared_error,
                                                batch_index=k, with_hinge=True)
                else:
                    loss, hinge = lyapunov_loss(G, V, batch, cfg.beta, batch_index=k, with_hinge=True)
            model, opt = (G, opt_dyn) if phase == DYN else (V, opt_lyap)
            grads = _named_grads(model, tape.backward(loss))
            gnorm = clip_global_norm(grads, cfg.clip_norm)
            optimizer_step(model.params, grads, opt)
            rate = float(np.mean(hinge.data > 0)) if hinge is not None else None
            rec = {"step": k, "phase": phase, "loss": float(loss.data), "violation_rate": rate,
                   "grad_norm": gnorm, "wall_time": time.perf_counter() - t0}
            log.append(**rec)
            if progress is not None:
                progress(rec)
            acc[phase].append(rec["loss"])
            k += 1
            if cfg.checkpoint_every and k % cfg.checkpoint_every == 0:
                good = snapshot(k)
                if out is not None:
                    write_ckpt(k)
                if cfg.early_stop and _converged(window, acc, cfg):
                    stopped = True
                    break
    except TrainingError:
        G.load_state(good["G"])
        if V is not None:
            V.load_state(good["V"])
        rng.bit_generator.state = good["rng"]
        if out is not None:
            log.write_jsonl(out / "train_log.jsonl")
        raise
    finally:
        G.set_trainable(True)
        if V is not None:
            V.set_trainable(True)
    if out is not None:
        write_ckpt(k)
        log.write_jsonl(out / "train_log.jsonl")
    return TrainResult(G, V, log, k, stopped, opt_dyn, opt_lyap if V is not None else None,
                       rng.bit_generator.state)


def _converged(window, acc, cfg: TrainConfig) -> bool:
    """Both phase losses changed less than rtol (relative) over the last window of checkpoints."""
    means = tuple(float(np.mean(acc[p])) if acc[p] else np.nan for p in (DYN, LYAP))
    acc[DYN].clear()
    acc[LYAP].clear()
    window.append(means)
    if len(window) < cfg.early_stop_window:
        return False
    recent = np.array(window[-cfg.early_stop_window:])
    for col in recent.T:
        col = col[np.isfinite(col)]
        if col.size < 2:
            if cfg.train_lyapunov:
                return False
            continue
        scale = max(abs(col).max(), 1e-300)
        if (col.max() - col.min()) / scale >= cfg.early_stop_rtol and col.max() > 0:
            return False
    return True
