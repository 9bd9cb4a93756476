"""Multi-task trajectory pools, prompts and prompt prefixes, pool persistence."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .container import read_container, write_container
from .errors import CapacityError, ContractError, DataError, DimensionError, FormatError
from .systems import (ParameterSample, SystemSpec, rk4_step, sample_parameters,
                      system_from_description)

POOL_MAGIC = b"LILADPOL"
POOL_VERSION = 1

# Uniform boxes for initial states (low, high). SEIR and PDE use custom samplers.
INIT_BOXES = {
    "sp": (np.array([-np.pi / 2, -1.0]), np.array([np.pi / 2, 1.0])),
    # state order (theta1, omega1, theta2, omega2)
    "dp": (np.array([-np.pi / 4, -0.5, -np.pi / 4, -0.5]), np.array([np.pi / 4, 0.5, np.pi / 4, 0.5])),
    "mg": (np.full(5, -0.3), np.full(5, 0.3)),
}


def sample_initial_states(spec: SystemSpec, count: int, rng: np.random.Generator) -> np.ndarray:
    name = spec.name
    if name in INIT_BOXES:
        lo, hi = INIT_BOXES[name]
        return rng.uniform(lo, hi, size=(count, spec.state_dim))
    if name == "seir":
        out = np.zeros((count, 8))
        for base in (0, 4):
            S = rng.uniform(0.5, 0.99, count)
            E = rng.uniform(0.0, 0.1, count)
            I = rng.uniform(0.0, 0.1, count)
            out[:, base:base + 4] = np.stack([S, E, I, -(S + E + I)], axis=1)
        return out
    if name == "pde":
        return np.stack([_smooth_bumps(rng) for _ in range(count)])
    raise ContractError(f"no initial-state sampler for {name!r}")


def _smooth_bumps(rng: np.random.Generator, n: int = 10) -> np.ndarray:
    ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    field_ = np.zeros((n, n))
    for _ in range(rng.integers(1, 4)):
        ci, cj = rng.uniform(0, n - 1, 2)
        width = rng.uniform(1.5, 3.0)
        amp = rng.uniform(-2.0, 2.0)
        field_ += amp * np.exp(-((ii - ci) ** 2 + (jj - cj) ** 2) / (2 * width ** 2))
    return np.clip(field_, -2.0, 2.0).reshape(-1)


@dataclass
class TaskDataset:
    """Shuffled (state, next state) pairs of one parameter sample."""

    task_id: int
    param: ParameterSample
    x: np.ndarray              # (N, d)
    fx: np.ndarray             # (N, d)
    time_index: np.ndarray     # (N,) step index of x inside its source rollout
    seed: int = 0
    envelope: tuple = None     # (low, high) per coordinate seen while simulating

    def __len__(self) -> int:
        return len(self.x)


def generate_task_dataset(spec: SystemSpec, param: ParameterSample, num_pairs: int, seed: int,
                          rollout_steps: int = 50, task_id: int | None = None) -> TaskDataset:
    """Simulate rollouts from random initial states and shuffle their consecutive pairs."""
    if num_pairs < 1:
        raise ContractError("num_pairs must be >= 1")
    if rollout_steps < 1:
        raise ContractError("rollout_steps must be >= 1")
    rng = np.random.default_rng(seed)
    n_roll = -(-num_pairs // rollout_steps)
    x = sample_initial_states(spec, n_roll, rng)
    p = param.values
    f = lambda y: spec.rhs(y, p)
    states = [x]
    for _ in range(rollout_steps):
        x = rk4_step(f, x, spec.dt)
        states.append(x)
    traj = np.stack(states, axis=1)                       # (rollouts, steps + 1, d)
    xs = traj[:, :-1].reshape(-1, spec.state_dim)[:num_pairs]
    fxs = traj[:, 1:].reshape(-1, spec.state_dim)[:num_pairs]
    tidx = np.tile(np.arange(rollout_steps, dtype=np.float64), n_roll)[:num_pairs]
    perm = rng.permutation(num_pairs)
    flat = traj.reshape(-1, spec.state_dim)
    return TaskDataset(task_id if task_id is not None else param.sample_id, param,
                       xs[perm], fxs[perm], tidx[perm], seed,
                       envelope=(flat.min(axis=0), flat.max(axis=0)))


@dataclass
class Prompt:
    """n context pairs followed by one held-out query pair (index n)."""

    x: np.ndarray     # (n + 1, d)
    fx: np.ndarray    # (n + 1, d)
    task_id: int = 0

    @property
    def n(self) -> int:
        return len(self.x) - 1


@dataclass
class PromptPrefix:
    """The first j context pairs, the (j+1)-th state as query, its successor as target."""

    context_x: np.ndarray    # (j, d)
    context_fx: np.ndarray   # (j, d)
    query: np.ndarray        # (d,)
    target: np.ndarray | None = None
    task_id: int = 0

    @property
    def j(self) -> int:
        return len(self.context_x)

    @property
    def num_tokens(self) -> int:
        return 2 * self.j + 1

    @property
    def context(self) -> "Context":
        return Context(self.context_x, self.context_fx)


@dataclass
class Context:
    """A context prefix without a query; what a test-time system adapts from."""

    x: np.ndarray
    fx: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.fx = np.asarray(self.fx, dtype=np.float64)
        if self.x.ndim != 2 or self.x.shape != self.fx.shape:
            raise DimensionError(f"context arrays must both be (j, d), got {self.x.shape} and {self.fx.shape}")

    @property
    def j(self) -> int:
        return len(self.x)

    @classmethod
    def empty(cls, d: int) -> "Context":
        return cls(np.zeros((0, d)), np.zeros((0, d)))


def build_prompt(dataset: TaskDataset, n: int, seed: int | np.random.Generator) -> Prompt:
    """n context pairs plus one query drawn without replacement."""
    if n < 0:
        raise ContractError("n must be >= 0")
    if n + 1 > len(dataset):
        raise DataError(f"task {dataset.task_id} has {len(dataset)} pairs, prompt needs {n + 1}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    idx = rng.choice(len(dataset), size=n + 1, replace=False)
    return Prompt(dataset.x[idx], dataset.fx[idx], dataset.task_id)


def prefix(prompt: Prompt, j: int) -> PromptPrefix:
    if not 0 <= j <= prompt.n:
        raise IndexError(f"prefix length {j} outside [0, {prompt.n}]")
    return PromptPrefix(prompt.x[:j], prompt.fx[:j], prompt.x[j], prompt.fx[j], prompt.task_id)


def check_capacity(j: int, max_context: int) -> None:
    if j > max_context:
        raise CapacityError(f"context of {j} pairs exceeds model capacity {max_context}")


# ---------------------------------------------------------------------------
# pools

@dataclass
class TaskPool:
    spec: SystemSpec
    tasks: list[TaskDataset]
    seeds: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.tasks)


def generate_pool(spec: SystemSpec, num_tasks: int, pairs_per_task: int, seed: int,
                  rollout_steps: int = 50, threads: int = 1) -> TaskPool:
    """Sample ``num_tasks`` parameter draws and simulate one dataset per draw."""
    ss = np.random.SeedSequence(seed)
    param_seq, task_seq = ss.spawn(2)
    params = sample_parameters(spec, num_tasks, np.random.default_rng(param_seq))
    task_seeds = [int(s.generate_state(1)[0]) for s in task_seq.spawn(num_tasks)]

    def make(i):
        return generate_task_dataset(spec, params[i], pairs_per_task, task_seeds[i],
                                     rollout_steps=rollout_steps, task_id=i)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            tasks = list(ex.map(make, range(num_tasks)))
    else:
        tasks = [make(i) for i in range(num_tasks)]
    return TaskPool(spec, tasks, {"seed": seed, "task_seeds": task_seeds, "rollout_steps": rollout_steps})


def save_pool(pool: TaskPool, path) -> None:
    header = {
        "kind": "pool",
        "system": pool.spec.describe(),
        "seeds": pool.seeds,
        "tasks": [{"task_id": t.task_id, "sample_id": t.param.sample_id, "param": t.param.values.tolist(),
                   "num_pairs": len(t), "seed": t.seed,
                   "envelope": [t.envelope[0].tolist(), t.envelope[1].tolist()] if t.envelope else None}
                  for t in pool.tasks],
    }
    blocks = [np.concatenate([t.x, t.fx, t.time_index[:, None]], axis=1) for t in pool.tasks]
    write_container(path, POOL_MAGIC, POOL_VERSION, header, blocks)


def load_pool(path) -> TaskPool:
    header, blocks = read_container(path, POOL_MAGIC, POOL_VERSION)
    if header.get("kind") != "pool" or len(blocks) != len(header.get("tasks", ())):
        raise FormatError(f"{path}: not a pool file")
    spec = system_from_description(header["system"])
    d = spec.state_dim
    tasks = []
    for meta, blk in zip(header["tasks"], blocks):
        if blk.shape != (meta["num_pairs"], 2 * d + 1):
            raise FormatError(f"{path}: task {meta['task_id']} block has shape {blk.shape}")
        env = meta.get("envelope")
        tasks.append(TaskDataset(meta["task_id"], ParameterSample(meta["param"], meta["sample_id"]),
                                 blk[:, :d].copy(), blk[:, d:2 * d].copy(), blk[:, 2 * d].copy(), meta["seed"],
                                 envelope=(np.array(env[0]), np.array(env[1])) if env else None))
    return TaskPool(spec, tasks, header.get("seeds", {}))
