"""Test-time protocol: unseen systems, context adaptation, rollouts and error tables."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .baselines import fit_stable_linear
from .data import INIT_BOXES, Context, generate_task_dataset, sample_initial_states
from .errors import ContractError, DimensionError, RolloutError
from .models import Conditioned, IclDynamicsModel, IclLyapunovModel
from .stability import attenuate_batch
from .systems import ParameterSample, SystemSpec, Trajectory, rollout, sample_parameters

METHODS = ("lilad", "plain-icl", "stable-linear")


@dataclass
class EvalProtocol:
    num_test_systems: int = 5
    initial_states_per_system: int = 4
    rollout_steps: int | None = None        # None -> 300 for ODEs, 100 for the PDE
    context_len: int = 32
    seed: int = 10_007
    cov_scale: float = 1.0                  # > 1 widens the test parameter distribution
    context_source_pairs: int = 2000        # context pairs are drawn from this many fresh pairs
    context_rollout_steps: int = 50
    min_init_fraction: float = 0.25         # reject x0 closer to 0 than this fraction of the box

    def __post_init__(self):
        if self.num_test_systems < 1 or self.initial_states_per_system < 1:
            raise ContractError("protocol needs at least one system and one initial state")
        if self.context_len < 0:
            raise ContractError("context_len must be >= 0")
        if self.rollout_steps is not None and self.rollout_steps < 0:
            raise ContractError("rollout_steps must be >= 0")
        if self.cov_scale <= 0:
            raise ContractError("cov_scale must be positive")

    @property
    def total_trajectories(self) -> int:
        return self.num_test_systems * self.initial_states_per_system

    def steps_for(self, spec: SystemSpec) -> int:
        if self.rollout_steps is not None:
            return self.rollout_steps
        return 100 if spec.name == "pde" else 300


@dataclass
class TestTask:
    task_id: int
    param: ParameterSample
    context: Context
    initial_states: np.ndarray    # (m, d)


def _sample_far_initial_states(spec: SystemSpec, count: int, frac: float, rng) -> np.ndarray:
    if spec.name not in INIT_BOXES or frac <= 0:
        return sample_initial_states(spec, count, rng)
    radius = float(np.linalg.norm(INIT_BOXES[spec.name][1]))
    out = []
    for _ in range(1000):
        cand = sample_initial_states(spec, count, rng)
        out.extend(cand[np.linalg.norm(cand, axis=1) >= frac * radius])
        if len(out) >= count:
            return np.array(out[:count])
    raise ContractError("could not sample initial states away from the origin")


def instantiate_test_tasks(spec: SystemSpec, protocol: EvalProtocol) -> list[TestTask]:
    ss_param, ss_ctx, ss_init = np.random.SeedSequence(protocol.seed).spawn(3)
    test_spec = spec
    if protocol.cov_scale != 1.0:
        test_spec = replace(spec, param_cov_diag=spec.param_cov_diag * protocol.cov_scale)
    params = sample_parameters(test_spec, protocol.num_test_systems, np.random.default_rng(ss_param))
    ctx_seeds = [int(s.generate_state(1)[0]) for s in ss_ctx.spawn(protocol.num_test_systems)]
    init_rng = np.random.default_rng(ss_init)
    tasks = []
    for i, p in enumerate(params):
        j = protocol.context_len
        if j:
            ds = generate_task_dataset(spec, p, max(j, protocol.context_source_pairs), ctx_seeds[i],
                                       rollout_steps=protocol.context_rollout_steps, task_id=i)
            rows = np.random.default_rng(ctx_seeds[i] ^ 0x5EED).choice(len(ds), size=j, replace=False)
            ctx = Context(ds.x[rows], ds.fx[rows])
        else:
            ctx = Context.empty(spec.state_dim)
        x0 = _sample_far_initial_states(spec, protocol.initial_states_per_system,
                                        protocol.min_init_fraction, init_rng)
        tasks.append(TestTask(i, p, ctx, x0))
    return tasks


# ---------------------------------------------------------------------------
# predictors: callables mapping states (N, d) -> next states (N, d)

class RawPredictor:
    """Plain in-context prediction G(x | C)."""

    def __init__(self, G: IclDynamicsModel, context: Context):
        self.g = Conditioned(G, context)

    def __call__(self, X):
        return self.g(X)


class LiladPredictor:
    """gamma(x) G(x | C); keeps one GammaBatch per call in ``diagnostics``."""

    def __init__(self, G: IclDynamicsModel, V: IclLyapunovModel, context: Context, beta: float = 0.95,
                 tol_enforce: float = 1e-8):
        self.g = Conditioned(G, context)
        self.v = Conditioned(V, context)
        self.beta = beta
        self.tol_enforce = tol_enforce
        self.diagnostics = []

    def __call__(self, X):
        out, res = attenuate_batch(self.g, self.v, X, beta=self.beta, tol_enforce=self.tol_enforce)
        self.diagnostics.append(res)
        return out


class LinearPredictor:
    def __init__(self, context: Context, margin: float = 1e-3):
        if context.j < 1:
            raise ContractError("stable-linear baseline needs a non-empty context")
        self.model = fit_stable_linear(context.x, context.fx, margin)

    def __call__(self, X):
        return self.model(X)


def model_rollout(predictor, x0, steps: int, context: Context | None = None,
                  strict: bool = False) -> Trajectory | list[Trajectory]:
    """Feed predictions back as queries for ``steps`` steps (x0 of shape (d,) or (m, d)).

    A non-finite prediction stops that trajectory and flags it as diverged
    (or raises RolloutError with ``strict``).
    """
    if steps < 0:
        raise ContractError("steps must be >= 0")
    x0 = np.asarray(x0, dtype=np.float64)
    single = x0.ndim == 1
    X = x0[None] if single else x0
    call = (lambda s: predictor(s, context)) if context is not None else predictor
    m, d = X.shape
    states = np.full((steps + 1, m, d), np.nan)
    states[0] = X
    length = np.full(m, steps + 1)
    alive = np.ones(m, dtype=bool)
    cur = X.copy()
    for k in range(1, steps + 1):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        nxt = np.asarray(call(cur[idx]), dtype=np.float64).reshape(idx.size, d)
        bad = ~np.isfinite(nxt).all(axis=1)
        if bad.any():
            if strict:
                raise RolloutError(f"non-finite prediction at step {k}")
            alive[idx[bad]] = False
            length[idx[bad]] = k
        good = idx[~bad]
        states[k, good] = nxt[~bad]
        cur[good] = nxt[~bad]
    trajs = [Trajectory(states[:length[i], i].copy(), 0.0, 0, bool(length[i] < steps + 1)) for i in range(m)]
    return trajs[0] if single else trajs


def mae_rmse(pred, truth) -> tuple[float, float]:
    """Errors averaged jointly over all time steps (including step 0) and coordinates."""
    p = pred.states if isinstance(pred, Trajectory) else np.asarray(pred, dtype=np.float64)
    t = truth.states if isinstance(truth, Trajectory) else np.asarray(truth, dtype=np.float64)
    if p.shape != t.shape:
        raise ContractError(f"trajectory shapes differ: {p.shape} vs {t.shape}")
    if p.size == 0:
        raise ContractError("empty trajectories")
    e = p - t
    return float(np.mean(np.abs(e))), float(np.sqrt(np.mean(e * e)))


# ---------------------------------------------------------------------------
# tables

@dataclass
class EvalRecord:
    method: str
    system: str
    task_id: int
    init_index: int
    mae: float
    rmse: float
    diverged: bool = False
    final_norm_ratio: float | None = None
    certificate_ok: bool | None = None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MetricsTable:
    """Mean and population std of MAE/RMSE per (method, system)."""

    rows: list = field(default_factory=list)

    def cell(self, method: str, system: str) -> dict:
        for r in self.rows:
            if r["method"] == method and r["system"] == system:
                return r
        raise KeyError((method, system))

    def to_records(self) -> list[dict]:
        return [dict(r) for r in self.rows]

    def to_json(self) -> str:
        return json.dumps(self.to_records(), sort_keys=True, indent=1)


def _stats(values: list[float]) -> tuple[float, float]:
    a = np.asarray(sorted(values), dtype=np.float64)   # sorting makes the reduction order-invariant
    if not np.all(np.isfinite(a)):
        return float("inf"), float("nan")
    return float(a.mean()), float(a.std())


def build_table(records: list[EvalRecord], by: tuple[str, ...] = ("method", "system")) -> MetricsTable:
    if not records:
        raise ContractError("no trajectories to tabulate")
    groups: dict[tuple, list[EvalRecord]] = {}
    for r in records:
        groups.setdefault(tuple(getattr(r, k) for k in by), []).append(r)
    rows = []
    for key in sorted(groups, key=lambda k: tuple(str(x) for x in k)):
        rs = groups[key]
        mae_m, mae_s = _stats([r.mae for r in rs])
        rmse_m, rmse_s = _stats([r.rmse for r in rs])
        row = dict(zip(by, key))
        row.update(mae_mean=mae_m, mae_std=mae_s, rmse_mean=rmse_m, rmse_std=rmse_s, count=len(rs),
                   diverged=sum(r.diverged for r in rs))
        rows.append(row)
    return MetricsTable(rows)


# ---------------------------------------------------------------------------
# full protocol

@dataclass
class EvalResult:
    records: list
    table: MetricsTable
    trajectories: dict = field(default_factory=dict)   # name -> array
    gamma_log: list = field(default_factory=list)

    def write(self, out_dir, dump_trajectories: bool = True) -> None:
        from pathlib import Path
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.json").write_text(json.dumps(
            {"table": self.table.to_records(), "records": [r.to_dict() for r in self.records]},
            sort_keys=True, indent=1))
        if dump_trajectories and self.trajectories:
            np.savez(out / "trajectories.npz", **self.trajectories)
        if self.gamma_log:
            with open(out / "gamma_log.jsonl", "w") as fh:
                for g in self.gamma_log:
                    fh.write(json.dumps(g, sort_keys=True) + "\n")


def make_predictor(method: str, context: Context, G=None, V=None, beta: float = 0.95,
                   margin: float = 1e-3):
    if method == "lilad":
        if G is None or V is None:
            raise ContractError("method 'lilad' needs both a dynamics and a Lyapunov checkpoint")
        return LiladPredictor(G, V, context, beta)
    if method == "plain-icl":
        if G is None:
            raise ContractError("method 'plain-icl' needs a dynamics checkpoint")
        return RawPredictor(G, context)
    if method == "stable-linear":
        return LinearPredictor(context, margin)
    raise ContractError(f"unknown method {method!r}; expected one of {METHODS}")


def certificate_holds(v_seq: np.ndarray, beta: float, tol: float = 1e-6) -> bool:
    k = np.arange(len(v_seq))
    return bool(np.all(v_seq <= beta ** k * v_seq[0] + tol / (1.0 - beta)))


def evaluate(spec: SystemSpec, protocol: EvalProtocol, method: str, G=None, V=None,
             beta: float = 0.95, tasks: list[TestTask] | None = None, threads: int = 1) -> EvalResult:
    for m in (G, V):
        if m is not None and m.arch.state_dim != spec.state_dim:
            raise DimensionError(f"checkpoint state_dim {m.arch.state_dim} != system dimension {spec.state_dim}")
    tasks = tasks if tasks is not None else instantiate_test_tasks(spec, protocol)
    steps = protocol.steps_for(spec)

    def run(task: TestTask):
        pred_fn = make_predictor(method, task.context, G, V, beta)
        truth = rollout(spec, task.param, task.initial_states, steps).states     # (steps+1, m, d)
        preds = model_rollout(pred_fn, task.initial_states, steps)
        v_cond = Conditioned(V, task.context) if V is not None else None
        recs, dumps, glog = [], {}, []
        for i, tr in enumerate(preds):
            t_i = truth[:, i]
            if tr.diverged:
                mae = rmse = float("inf")
            else:
                mae, rmse = mae_rmse(tr.states, t_i)
            n0 = float(np.linalg.norm(tr.states[0]))
            ratio = float(np.linalg.norm(tr.states[-1]) / n0) if n0 > 0 else None
            cert = None
            if method == "lilad" and v_cond is not None:
                cert = certificate_holds(v_cond(tr.states), beta)
            recs.append(EvalRecord(method, spec.name, task.task_id, i, mae, rmse, tr.diverged, ratio, cert))
            dumps[f"{method}/task{task.task_id}/init{i}/pred"] = tr.states
            dumps[f"{method}/task{task.task_id}/init{i}/truth"] = t_i
        if isinstance(pred_fn, LiladPredictor):
            # diagnostics[k] holds the states still alive at step k + 1, in order
            for k, res in enumerate(pred_fn.diagnostics):
                alive = [i for i, tr in enumerate(preds) if len(tr) > k]
                for pos, i in enumerate(alive):
                    rec = res[pos].to_dict()
                    rec.update(task_id=task.task_id, init_index=i, step=k + 1)
                    glog.append(rec)
        return recs, dumps, glog

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            outs = list(ex.map(run, tasks))
    else:
        outs = [run(t) for t in tasks]
    records, dumps, glog = [], {}, []
    for r, d_, g in outs:
        records.extend(r)
        dumps.update(d_)
        glog.extend(g)
    return EvalResult(records, build_table(records), dumps, glog)
