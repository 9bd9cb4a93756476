"""Command-line entry point: gen-data, train, eval, stability-check.

Exit codes: 0 success, 1 usage, 2 data/format, 3 numerical/enforcement.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
import zlib
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import plain_icl_config
from .data import INIT_BOXES, Context, generate_pool, load_pool, save_pool
from .errors import ContractError, DataError, FormatError, LiladError
from .evaluation import METHODS, EvalProtocol, evaluate, instantiate_test_tasks
from .models import ArchConfig, IclDynamicsModel, IclLyapunovModel, WarpConfig, load_model
from .stability import Branch, attenuate_batch
from .systems import SYSTEM_NAMES, make_system
from .training import TrainConfig, TrainLog, train


class UsageError(LiladError):
    exit_code = 1


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def named_seed(seed: int, name: str) -> int:
    """Independent sub-seed for one randomness source ("data", "init", "batch", "eval")."""
    return int(np.random.SeedSequence([seed, zlib.crc32(name.encode())]).generate_state(1)[0])


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def _write_manifest(path: Path, command: str, argv: list[str], config: dict, seeds: dict,
                    inputs: dict, outputs: dict, start: str) -> None:
    manifest = {"command": command, "argv": argv, "config": config, "seeds": seeds,
                "tool": "lilad", "version": __version__, "inputs": inputs, "outputs": outputs,
                "start": start, "end": _now()}
    path.write_text(json.dumps(manifest, sort_keys=True, indent=1, default=str))


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON ({exc})") from exc
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


def _system(name: str, dt=None):
    try:
        return make_system(name, dt=dt)
    except ContractError as exc:
        raise UsageError(str(exc)) from exc


# ---------------------------------------------------------------------------
# gen-data

def cmd_gen_data(args, argv) -> int:
    start = _now()
    spec = _system(args.system, args.dt)
    seed = named_seed(args.seed, "data")
    pool = generate_pool(spec, args.tasks, args.pairs, seed, rollout_steps=args.rollout_steps,
                         threads=args.threads)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_pool(pool, out)
    cfg = {"system": spec.describe(), "tasks": args.tasks, "pairs": args.pairs,
           "rollout_steps": args.rollout_steps}
    _write_manifest(out.with_name(out.name + ".manifest.json"), "gen-data", argv, cfg,
                    {"seed": args.seed, "data": seed}, {}, {"pool": str(out)}, start)
    print(f"wrote {out}: {args.tasks} tasks x {args.pairs} pairs of {spec.name}")
    return 0


# ---------------------------------------------------------------------------
# train

_TRAIN_FLAGS = {"steps": "total_steps", "switch": "switch_interval", "lam": "lam", "beta": "beta",
                "lr_dyn": "lr_dyn", "lr_lyap": "lr_lyap", "batch_tasks": "batch_tasks",
                "prompt_len": "prompt_len", "optimizer": "optimizer", "clip_norm": "clip_norm",
                "all_positions": "all_positions", "squared_error": "squared_error",
                "checkpoint_every": "checkpoint_every"}
_ARCH_FLAGS = {"embed_dim": "embed_dim", "blocks": "num_blocks", "heads": "num_heads",
               "max_context": "max_context"}


def _flag_overrides(args, table) -> dict:
    return {key: getattr(args, flag) for flag, key in table.items() if getattr(args, flag) is not None}


def _train_config(tcfg: dict, baseline) -> TrainConfig:
    if baseline == "plain-icl":
        # the preset never switches phase; a leftover switch interval must not fail validation
        tcfg = dict(tcfg, switch_interval=max(tcfg.get("total_steps", TrainConfig.total_steps), 1))
    return TrainConfig.from_dict(tcfg)


def cmd_train(args, argv) -> int:
    start = _now()
    pool = load_pool(args.pool)
    d = pool.spec.state_dim
    file_cfg = _read_json(args.config) if args.config else {}
    unknown = set(file_cfg) - {"train", "arch", "warp"}
    if unknown:
        raise UsageError(f"unknown config sections {sorted(unknown)}")
    out = Path(args.out or (args.resume or "."))
    out.mkdir(parents=True, exist_ok=True)
    seeds = {"seed": args.seed, "init": named_seed(args.seed, "init"), "batch": named_seed(args.seed, "batch")}

    start_step, opt_dyn, opt_lyap, rng_state, log = 0, None, None, None, None
    if args.resume:
        rdir = Path(args.resume)
        G, header, opt_dyn = load_model(rdir / "G.ckpt", with_state=True)
        tcfg = dict(header["config"])
        V = None
        if (rdir / "V.ckpt").exists() and args.baseline is None and tcfg.get("train_lyapunov", True):
            V, _, opt_lyap = load_model(rdir / "V.ckpt", with_state=True)
        start_step = int(header["step"])
        rng_state = header["extra"].get("rng_state")
        if (rdir / "train_log.jsonl").exists():
            log = TrainLog.read_jsonl(rdir / "train_log.jsonl")
            log.records = [r for r in log.records if r["step"] < start_step]
        tcfg.update(file_cfg.get("train", {}))
        tcfg.update(_flag_overrides(args, _TRAIN_FLAGS))
        cfg = _train_config(tcfg, args.baseline)
        arch_cfg = asdict(G.arch)
    else:
        arch_cfg = {"state_dim": d, "embed_dim": 32, "num_blocks": 2, "num_heads": 2, "max_context": 32}
        arch_cfg.update(file_cfg.get("arch", {}))
        arch_cfg.update(_flag_overrides(args, _ARCH_FLAGS))
        if arch_cfg["state_dim"] != d:
            raise ContractError(f"config state_dim {arch_cfg['state_dim']} != pool dimension {d}")
        tcfg = {"seed": seeds["batch"]}
        tcfg.update(file_cfg.get("train", {}))
        tcfg.update(_flag_overrides(args, _TRAIN_FLAGS))
        cfg = _train_config(tcfg, args.baseline)
        arch = ArchConfig(**arch_cfg)
        init = np.random.SeedSequence(seeds["init"]).generate_state(2)
        G = IclDynamicsModel(arch, seed=int(init[0]))
        V = None
        if args.baseline is None:
            V = IclLyapunovModel(arch, WarpConfig(**file_cfg.get("warp", {})), seed=int(init[1]))
    if args.baseline == "plain-icl":
        cfg = plain_icl_config(cfg)
        V = None

    def progress(rec):
        if args.verbose and rec["step"] % max(1, args.verbose) == 0:
            print(json.dumps(rec, sort_keys=True), file=sys.stderr)

    res = train(pool, G, V, cfg, out_dir=out, start_step=start_step, opt_dyn=opt_dyn, opt_lyap=opt_lyap,
                rng_state=rng_state, log=log, progress=progress)
    outputs = {"G": str(out / "G.ckpt"), "log": str(out / "train_log.jsonl")}
    if V is not None:
        outputs["V"] = str(out / "V.ckpt")
    _write_manifest(out / "manifest.json", "train", argv,
                    {"train": cfg.to_dict(), "arch": arch_cfg, "baseline": args.baseline,
                     "resumed_from_step": start_step}, seeds, {"pool": str(args.pool)}, outputs, start)
    print(f"trained {res.steps_done} steps -> {out}" + (" (early stop)" if res.stopped_early else ""))
    return 0


# ---------------------------------------------------------------------------
# eval

_PROTOCOL_FLAGS = {"test_systems": "num_test_systems", "inits": "initial_states_per_system",
                   "rollout_steps": "rollout_steps", "context_len": "context_len", "cov_scale": "cov_scale"}


def _protocol(args, file_cfg) -> EvalProtocol:
    p = {"seed": named_seed(args.seed, "eval")}
    p.update(file_cfg.get("protocol", {}))
    p.update(_flag_overrides(args, _PROTOCOL_FLAGS))
    try:
        return EvalProtocol(**p)
    except TypeError as exc:
        raise UsageError(f"bad protocol config: {exc}") from exc


def _load_pair(ckpt_dir, need_v: bool):
    if ckpt_dir is None:
        raise UsageError("--checkpoints is required for this method")
    cdir = Path(ckpt_dir)
    G = load_model(cdir / "G.ckpt")
    V = load_model(cdir / "V.ckpt") if need_v else None
    if not isinstance(G, IclDynamicsModel) or (need_v and not isinstance(V, IclLyapunovModel)):
        raise FormatError(f"{cdir}: checkpoint kinds do not match G.ckpt / V.ckpt")
    return G, V


def cmd_eval(args, argv) -> int:
    start = _now()
    method = args.baseline or args.method
    if method not in METHODS:
        raise UsageError(f"unknown method {method!r}")
    spec = _system(args.system, args.dt)
    file_cfg = _read_json(args.config) if args.config else {}
    protocol = _protocol(args, file_cfg)
    G = V = None
    if method != "stable-linear":
        G, V = _load_pair(args.checkpoints, method == "lilad")
    res = evaluate(spec, protocol, method, G, V, beta=args.beta, threads=args.threads)
    out = Path(args.out)
    res.write(out, dump_trajectories=not args.no_dumps)
    _write_manifest(out / "manifest.json", "eval", argv,
                    {"method": method, "system": spec.describe(), "protocol": asdict(protocol), "beta": args.beta},
                    {"seed": args.seed, "eval": protocol.seed}, {"checkpoints": args.checkpoints},
                    {"metrics": str(out / "metrics.json")}, start)
    for row in res.table.to_records():
        print(f"{row['method']:>13s} {row['system']:>5s}  MAE {row['mae_mean']:.6g} +- {row['mae_std']:.3g}"
              f"  RMSE {row['rmse_mean']:.6g} +- {row['rmse_std']:.3g}  (n={row['count']})")
    return 0


# ---------------------------------------------------------------------------
# stability-check

def _read_states(path, d: int) -> np.ndarray:
    data = _read_json(path)
    if isinstance(data, dict):
        data = data.get("states")
    try:
        X = np.asarray(data, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise FormatError(f"{path}: states must be a list of {d}-vectors") from exc
    if X.size == 0:
        return np.zeros((0, d))
    if X.ndim != 2 or X.shape[1] != d or not np.isfinite(X).all():
        raise FormatError(f"{path}: states must be a list of finite {d}-vectors, got shape {X.shape}")
    return X


def _grid_states(spec, n: int) -> np.ndarray:
    if spec.name not in INIT_BOXES or spec.state_dim != 2:
        raise UsageError("--grid is only defined for two-dimensional boxed systems; pass --states")
    lo, hi = INIT_BOXES[spec.name]
    a, b = np.meshgrid(np.linspace(lo[0], hi[0], n), np.linspace(lo[1], hi[1], n), indexing="ij")
    return np.stack([a.ravel(), b.ravel()], axis=1)


def cmd_stability_check(args, argv) -> int:
    start = _now()
    spec = _system(args.system)
    G, V = _load_pair(args.checkpoints, True)
    if G.arch.state_dim != spec.state_dim:
        raise ContractError(f"checkpoint state_dim {G.arch.state_dim} != system dimension {spec.state_dim}")
    if args.context:
        c = _read_json(args.context)
        try:
            ctx = Context(np.asarray(c["x"], dtype=np.float64).reshape(-1, spec.state_dim),
                          np.asarray(c["fx"], dtype=np.float64).reshape(-1, spec.state_dim))
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{args.context}: context needs 'x' and 'fx' arrays") from exc
        ctx_src = args.context
    else:
        protocol = EvalProtocol(num_test_systems=args.task + 1, seed=named_seed(args.seed, "eval"),
                                context_len=args.context_len)
        ctx = instantiate_test_tasks(spec, protocol)[args.task].context
        ctx_src = f"test task {args.task} (eval seed {protocol.seed})"
    X = _read_states(args.states, spec.state_dim) if args.states else _grid_states(spec, args.grid)
    lines = []
    summary = {b.value: 0.0 for b in Branch}
    if len(X):
        _, res = attenuate_batch(G, V, X, ctx, beta=args.beta, tol_enforce=args.tol)
        for i in range(len(X)):
            rec = res[i].to_dict()
            rec["x"] = X[i].tolist()
            lines.append(json.dumps(rec, sort_keys=True))
        summary = res.fractions()
    out = Path(args.out) if args.out else None
    text = "\n".join(lines) + ("\n" if lines else "")
    if out is None:
        sys.stdout.write(text)
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
        _write_manifest(out.with_name(out.name + ".manifest.json"), "stability-check", argv,
                        {"system": spec.name, "beta": args.beta, "tol": args.tol, "grid": args.grid,
                         "context": ctx_src}, {"seed": args.seed},
                        {"checkpoints": args.checkpoints, "states": args.states}, {"report": str(out)}, start)
    print("summary " + " ".join(f"{k}={v:.4f}" for k, v in summary.items()) + f" states={len(X)}",
          file=sys.stderr if out is None else sys.stdout)
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lilad", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"lilad {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def common(sp):
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--threads", type=int, default=1, help="cap on worker threads")

    g = sub.add_parser("gen-data", help="simulate a multi-task pool")
    g.add_argument("--system", required=True, choices=SYSTEM_NAMES + ("pde_sm",))
    g.add_argument("--tasks", type=int, required=True)
    g.add_argument("--pairs", type=int, required=True, help="pairs per task")
    g.add_argument("--rollout-steps", type=int, default=50)
    g.add_argument("--dt", type=float)
    g.add_argument("--out", required=True)
    common(g)

    t = sub.add_parser("train", help="alternating training of G and V")
    t.add_argument("--pool", required=True)
    t.add_argument("--config", help="JSON file with 'train', 'arch', 'warp' sections")
    t.add_argument("--out")
    t.add_argument("--baseline", choices=("plain-icl",))
    t.add_argument("--resume", help="checkpoint directory to continue from")
    t.add_argument("--verbose", type=int, default=0, help="log every N steps to stderr")
    for flag, typ in (("steps", int), ("switch", int), ("lam", float), ("beta", float), ("lr-dyn", float),
                      ("lr-lyap", float), ("batch-tasks", int), ("prompt-len", int), ("clip-norm", float),
                      ("checkpoint-every", int), ("embed-dim", int), ("blocks", int), ("heads", int),
                      ("max-context", int)):
        t.add_argument(f"--{flag}", type=typ)
    t.add_argument("--optimizer", choices=("sgd", "adam"))
    t.add_argument("--all-positions", action="store_const", const=True)
    t.add_argument("--squared-error", action="store_const", const=True)
    common(t)

    e = sub.add_parser("eval", help="test-time protocol and error tables")
    e.add_argument("--system", required=True, choices=SYSTEM_NAMES + ("pde_sm",))
    e.add_argument("--method", default="lilad", choices=METHODS)
    e.add_argument("--baseline", choices=("plain-icl", "stable-linear"))
    e.add_argument("--checkpoints")
    e.add_argument("--config", help="JSON file with a 'protocol' section")
    e.add_argument("--out", required=True)
    e.add_argument("--beta", type=float, default=0.95)
    e.add_argument("--dt", type=float)
    e.add_argument("--no-dumps", action="store_true")
    for flag, typ in (("test-systems", int), ("inits", int), ("rollout-steps", int), ("context-len", int),
                      ("cov-scale", float)):
        e.add_argument(f"--{flag}", type=typ)
    common(e)

    s = sub.add_parser("stability-check", help="attenuation sweep over states")
    s.add_argument("--system", required=True, choices=SYSTEM_NAMES + ("pde_sm",))
    s.add_argument("--checkpoints", required=True)
    s.add_argument("--context", help="JSON file with 'x' and 'fx'; default: an eval test context")
    s.add_argument("--task", type=int, default=0)
    s.add_argument("--context-len", type=int, default=32)
    s.add_argument("--states", help="JSON list of states")
    s.add_argument("--grid", type=int, default=41, help="points per axis over the state box")
    s.add_argument("--beta", type=float, default=0.95)
    s.add_argument("--tol", type=float, default=1e-8)
    s.add_argument("--out")
    common(s)
    return p


_COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
             "stability-check": cmd_stability_check}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "threads", 1) < 1:
            raise UsageError("--threads must be >= 1")
        return _COMMANDS[args.command](args, argv)
    except LiladError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
