"""In-context transformer models for the dynamics G and the Lyapunov certificate V.

Both share one decoder layout: a linear input layer over interleaved
``[x_1, f(x_1), ..., x_j, f(x_j), query]`` tokens (plus learned type and
absolute positional embeddings), pre-norm causal transformer blocks with
GELU MLPs, a final layer norm and a linear output layer.

Context tokens and query tokens are computed as two streams. The context
stream is ordinary causal self-attention. Each query token attends to the
first ``limit`` context tokens and to itself, which is exactly what the
query at position ``limit`` of a causal sequence would see. This lets one
pass evaluate every prefix of a prompt, and lets a query be swapped (for
``V(G(x|C)|C)`` or ``V(0|C)``) without touching the context.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .container import read_container, write_container
from .data import Context, PromptPrefix, check_capacity
from .errors import CapacityError, ContractError, DimensionError, FormatError
from .tensor import Tape, Tensor

CKPT_MAGIC = b"LILADCKP"
CKPT_VERSION = 1
_NEG = -1e30


@dataclass
class ArchConfig:
    state_dim: int
    embed_dim: int = 32
    num_blocks: int = 2
    num_heads: int = 2
    max_context: int = 32

    def __post_init__(self):
        for k in ("state_dim", "embed_dim", "num_blocks", "num_heads", "max_context"):
            if getattr(self, k) < 1:
                raise ContractError(f"{k} must be positive")
        if self.embed_dim % self.num_heads:
            raise ContractError("embed_dim must be divisible by num_heads")

    @property
    def num_positions(self) -> int:
        return 2 * self.max_context + 1


@dataclass
class WarpConfig:
    """Output warping of V: sigma(c tanh(raw(q)) - c tanh(raw(0))) + eps |q|^2."""

    c: float = 10.0
    delta: float = 0.1
    eps: float = 1e-3

    def __post_init__(self):
        if min(self.c, self.delta, self.eps) <= 0:
            raise ContractError("warp constants c, delta, eps must be positive")


def smoothed_relu(x, delta: float):
    """Scalar/array version of the quadratic-knee ReLU (no tape)."""
    if delta <= 0:
        raise ContractError("delta must be positive")
    x = np.asarray(x, dtype=np.float64)
    out = np.where(x >= delta, x - 0.5 * delta, np.where(x > 0, x * x / (2.0 * delta), 0.0))
    out = np.where(np.isnan(x), x, out)
    return float(out) if out.ndim == 0 else out


class Encoded:
    """Per-block keys/values of a (batched) context, plus its final hidden states."""

    __slots__ = ("kv", "hidden", "num_tokens")

    def __init__(self, kv, hidden, num_tokens):
        self.kv = kv
        self.hidden = hidden
        self.num_tokens = num_tokens


class IclTransformer:
    """Weights and forward pass shared by the two in-context models."""

    kind = "base"

    def __init__(self, arch: ArchConfig, out_dim: int, seed: int = 0):
        self.arch = arch
        self.out_dim = out_dim
        self.params: dict[str, Tensor] = {}
        self._init_params(np.random.default_rng(seed))

    # -- weights -----------------------------------------------------------
    def _add(self, name, arr):
        self.params[name] = Tensor(np.ascontiguousarray(arr, dtype=np.float64), requires_grad=True, name=name)

    def _init_params(self, rng):
        a = self.arch
        d, E = a.state_dim, a.embed_dim
        proj_std = 1.0 / math.sqrt(E) / math.sqrt(2 * a.num_blocks)
        self._add("in.W", rng.normal(0, 1.0 / math.sqrt(d), (d, E)))
        self._add("in.b", np.zeros(E))
        self._add("type_emb", rng.normal(0, 0.1, (2, E)))
        self._add("pos_emb", rng.normal(0, 0.1, (a.num_positions, E)))
        for i in range(a.num_blocks):
            p = f"blk{i}."
            self._add(p + "ln1.g", np.ones(E))
            self._add(p + "ln1.b", np.zeros(E))
            self._add(p + "attn.W", rng.normal(0, 1.0 / math.sqrt(E), (E, 3 * E)))
            # query and value biases only: a key bias shifts every score of a query equally
            self._add(p + "attn.b", np.zeros(2 * E))
            self._add(p + "proj.W", rng.normal(0, proj_std, (E, E)))
            self._add(p + "proj.b", np.zeros(E))
            self._add(p + "ln2.g", np.ones(E))
            self._add(p + "ln2.b", np.zeros(E))
            self._add(p + "fc.W", rng.normal(0, 1.0 / math.sqrt(E), (E, 4 * E)))
            self._add(p + "fc.b", np.zeros(4 * E))
            self._add(p + "fc2.W", rng.normal(0, proj_std / 2, (4 * E, E)))
            self._add(p + "fc2.b", np.zeros(E))
        self._add("lnf.g", np.ones(E))
        self._add("lnf.b", np.zeros(E))
        self._add("out.W", rng.normal(0, 0.1 / math.sqrt(E), (E, self.out_dim)))
        self._add("out.b", np.zeros(self.out_dim))

    def set_trainable(self, flag: bool) -> None:
        for p in self.params.values():
            p.requires_grad = flag

    def state_copy(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            if self.params[k].shape != v.shape:
                raise DimensionError(f"weight {k!r}: shape {v.shape} != {self.params[k].shape}")
            self.params[k].data[...] = v

    @property
    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    # -- forward -----------------------------------------------------------
    def _embed(self, tokens: Tensor, types: np.ndarray, positions: np.ndarray) -> Tensor:
        P = self.params
        return tokens @ P["in.W"] + P["in.b"] + P["type_emb"][types] + P["pos_emb"][positions]

    def _split_heads(self, x: Tensor) -> Tensor:
        B, L, _ = x.shape
        H = self.arch.num_heads
        return x.reshape(B, L, H, -1).transpose(0, 2, 1, 3)

    def _merge_heads(self, x: Tensor) -> Tensor:
        B, H, L, Dh = x.shape
        return x.transpose(0, 2, 1, 3).reshape(B, L, H * Dh)

    def _mlp(self, h: Tensor, p: str) -> Tensor:
        P = self.params
        a = T.layer_norm(h, P[p + "ln2.g"], P[p + "ln2.b"])
        return T.gelu(a @ P[p + "fc.W"] + P[p + "fc.b"]) @ P[p + "fc2.W"] + P[p + "fc2.b"]

    def _qkv(self, h: Tensor, p: str):
        P = self.params
        E = self.arch.embed_dim
        a = T.layer_norm(h, P[p + "ln1.g"], P[p + "ln1.b"])
        qkv = a @ P[p + "attn.W"]
        b = P[p + "attn.b"]
        return (self._split_heads(qkv[..., :E] + b[:E]), self._split_heads(qkv[..., E:2 * E]),
                self._split_heads(qkv[..., 2 * E:] + b[E:]))

    def embed_context(self, cx: np.ndarray, cfx: np.ndarray) -> Tensor:
        B, j, d = cx.shape
        tokens = np.empty((B, 2 * j, d))
        tokens[:, 0::2] = cx
        tokens[:, 1::2] = cfx
        types = np.tile(np.array([0, 1]), j)
        return self._embed(Tensor(tokens), types, np.arange(2 * j))

    def encode(self, cx: np.ndarray, cfx: np.ndarray) -> Encoded:
        """Run the causal context stream for contexts of shape (B, j, d)."""
        cx = np.asarray(cx, dtype=np.float64)
        cfx = np.asarray(cfx, dtype=np.float64)
        if cx.ndim != 3 or cx.shape != cfx.shape or cx.shape[-1] != self.arch.state_dim:
            raise DimensionError(f"context must be (B, j, {self.arch.state_dim}), got {cx.shape}")
        check_capacity(cx.shape[1], self.arch.max_context)
        B, j, _ = cx.shape
        n_tok = 2 * j
        if n_tok == 0:
            return Encoded([None] * self.arch.num_blocks, None, 0)
        P = self.params
        h = self.embed_context(cx, cfx)
        Dh = self.arch.embed_dim // self.arch.num_heads
        scale = 1.0 / math.sqrt(Dh)
        causal = np.triu(np.full((n_tok, n_tok), _NEG), 1)
        kv = []
        for i in range(self.arch.num_blocks):
            p = f"blk{i}."
            q, k, v = self._qkv(h, p)
            w = T.softmax_lastdim(q @ T.swap_last(k) * scale + causal)
            h = h + self._merge_heads(w @ v) @ P[p + "proj.W"] + P[p + "proj.b"]
            h = h + self._mlp(h, p)
            kv.append((k, v))
        return Encoded(kv, h, n_tok)

    def query(self, enc: Encoded, q, limits: np.ndarray) -> Tensor:
        """Outputs (B, S, out_dim) for query states q (B, S, d).

        ``limits[b, s]`` is the number of context tokens (2 * prefix length)
        visible to query s of batch element b; it is also its position index.
        """
        q = T.as_tensor(q)
        B, S, d = q.shape
        if d != self.arch.state_dim:
            raise DimensionError(f"query dimension {d} != state_dim {self.arch.state_dim}")
        limits = np.broadcast_to(np.asarray(limits, dtype=np.int64), (B, S))
        if limits.size and (limits.max() > enc.num_tokens or limits.min() < 0):
            raise CapacityError("query limit outside the encoded context")
        P = self.params
        s = self._embed(q, np.zeros((B, S), dtype=np.int64), limits)
        Dh = self.arch.embed_dim // self.arch.num_heads
        scale = 1.0 / math.sqrt(Dh)
        mask = None
        if enc.num_tokens:
            visible = np.arange(enc.num_tokens)[None, None, :] < limits[:, :, None]
            mask = np.where(visible, 0.0, _NEG)[:, None, :, :]
        for i in range(self.arch.num_blocks):
            p = f"blk{i}."
            qs, ks, vs = self._qkv(s, p)
            self_score = (qs * ks).sum(axis=-1, keepdims=True) * scale
            if enc.num_tokens:
                k_ctx, v_ctx = enc.kv[i]
                ctx_score = qs @ T.swap_last(k_ctx) * scale + mask
                w = T.softmax_lastdim(T.concat([ctx_score, self_score], axis=-1))
                n = enc.num_tokens
                att = w[..., :n] @ v_ctx + w[..., n:] * vs
            else:
                att = T.softmax_lastdim(self_score) * vs
            s = s + self._merge_heads(att) @ P[p + "proj.W"] + P[p + "proj.b"]
            s = s + self._mlp(s, p)
        s = T.layer_norm(s, P["lnf.g"], P["lnf.b"])
        return s @ P["out.W"] + P["out.b"]

    # -- single-prefix convenience ------------------------------------------
    def _prefix_batch(self, prefix: PromptPrefix, override_query=None):
        enc = self.encode(prefix.context_x[None], prefix.context_fx[None])
        qv = prefix.query if override_query is None else override_query
        qv = T.as_tensor(qv)
        return enc, qv.reshape(1, 1, self.arch.state_dim), np.array([[2 * prefix.j]])


class IclDynamicsModel(IclTransformer):
    """G(x | C): next-state prediction for query x given context C."""

    kind = "dynamics"

    def __init__(self, arch: ArchConfig, seed: int = 0):
        super().__init__(arch, arch.state_dim, seed)

    def predict(self, enc: Encoded, q, limits) -> Tensor:
        return self.query(enc, q, limits)


class IclLyapunovModel(IclTransformer):
    """V(x | C) with output warping, so V >= eps |x|^2 and V(0 | C) = 0."""

    kind = "lyapunov"

    def __init__(self, arch: ArchConfig, warp: WarpConfig | None = None, seed: int = 0):
        self.warp = warp or WarpConfig()
        super().__init__(arch, 1, seed)

    def raw(self, enc: Encoded, q, limits) -> Tensor:
        return self.query(enc, q, limits)[..., 0]

    def value(self, enc: Encoded, q, limits, raw_zero: Tensor | None = None) -> Tensor:
        """Warped V for queries q (B, S, d) -> (B, S).

        ``raw_zero`` may carry a precomputed raw(0 | C) of the same (B, S)
        shape; it must come from this model with identical limits.
        """
        q = T.as_tensor(q)
        if raw_zero is None:
            raw_zero = self.raw(enc, np.zeros(q.shape), limits)
        c, delta, eps = self.warp.c, self.warp.delta, self.warp.eps
        gap = T.tanh(self.raw(enc, q, limits)) * c - T.tanh(raw_zero) * c
        return T.smoothed_relu(gap, delta) + (q * q).sum(axis=-1) * eps


# ---------------------------------------------------------------------------
# single-prompt operations

def embed_prompt(model: IclTransformer, prefix: PromptPrefix, override_query=None) -> np.ndarray:
    """Token embeddings (2j + 1, embed_dim) of a prefix, optionally with a replaced query."""
    check_capacity(prefix.j, model.arch.max_context)
    ctx = model.embed_context(prefix.context_x[None], prefix.context_fx[None]).data[0]
    qv = prefix.query if override_query is None else np.asarray(override_query, dtype=np.float64)
    qtok = model._embed(Tensor(qv.reshape(1, 1, -1)), np.zeros((1, 1), dtype=np.int64),
                        np.array([[2 * prefix.j]])).data[0]
    return np.concatenate([ctx, qtok], axis=0)


def dynamics_forward(model: IclDynamicsModel, prefix: PromptPrefix, override_query=None) -> np.ndarray:
    enc, q, lim = model._prefix_batch(prefix, override_query)
    return model.predict(enc, q, lim).data[0, 0].copy()


def lyapunov_forward(model: IclLyapunovModel, prefix: PromptPrefix, override_query=None) -> float:
    enc, q, lim = model._prefix_batch(prefix, override_query)
    return float(model.value(enc, q, lim).data[0, 0])


class Conditioned:
    """A model bound to one context; call it on a batch of states (N, d).

    Dynamics models return (N, d), Lyapunov models return (N,). Context
    keys/values are computed once; V's raw(0 | C) is cached per batch size so
    that V(0 | C) is evaluated along exactly the same arithmetic path as
    any query and comes out as exactly 0.
    """

    def __init__(self, model: IclTransformer, context: Context):
        self.model = model
        self.context = context
        d = model.arch.state_dim
        if context.j and context.x.shape[1] != d:
            raise DimensionError(f"context dimension {context.x.shape[1]} != model state_dim {d}")
        with Tape.paused():
            self._enc = model.encode(context.x.reshape(1, context.j, d), context.fx.reshape(1, context.j, d))
        self._zero_cache: dict[int, Tensor] = {}

    chunk = 4096

    def __call__(self, states) -> np.ndarray:
        x = np.asarray(states, dtype=np.float64)
        single = x.ndim == 1
        X = x.reshape(-1, self.model.arch.state_dim)
        with Tape.paused():
            parts = [self._eval(X[i:i + self.chunk]) for i in range(0, len(X), self.chunk)]
        if not parts:
            shape = (0,) if isinstance(self.model, IclLyapunovModel) else (0, X.shape[1])
            return np.zeros(shape)
        out = np.concatenate(parts) if len(parts) > 1 else parts[0]
        if single:
            return float(out[0]) if out.ndim == 1 else out[0]
        return out

    def _eval(self, X: np.ndarray) -> np.ndarray:
        n = len(X)
        X = X[None]
        lim = np.full((1, n), 2 * self.context.j)
        if isinstance(self.model, IclLyapunovModel):
            rz = self._zero_cache.get(n)
            if rz is None:
                rz = self._zero_cache[n] = self.model.raw(self._enc, np.zeros_like(X), lim)
            return self.model.value(self._enc, X, lim, raw_zero=rz).data[0]
        return self.model.predict(self._enc, X, lim).data[0]


# ---------------------------------------------------------------------------
# checkpoints

def save_model(model: IclTransformer, path, config: dict | None = None, step: int = 0,
               optimizer=None, extra: dict | None = None) -> None:
    names = list(model.params)
    blocks = [model.params[k].data for k in names]
    opt_meta = None
    if optimizer is not None:
        opt_meta = {"kind": optimizer.kind, "learning_rate": optimizer.learning_rate,
                    "beta1": optimizer.beta1, "beta2": optimizer.beta2, "eps": optimizer.eps,
                    "step": optimizer.step, "moments": sorted(optimizer.m)}
        for k in opt_meta["moments"]:
            blocks.append(optimizer.m[k])
            blocks.append(optimizer.v[k])
    header = {"kind": model.kind, "arch": asdict(model.arch), "names": names,
              "warp": asdict(model.warp) if isinstance(model, IclLyapunovModel) else None,
              "config": config or {}, "step": step, "optimizer": opt_meta, "extra": extra or {}}
    write_container(path, CKPT_MAGIC, CKPT_VERSION, header, blocks)


def load_model(path, with_state: bool = False):
    """Load a checkpoint; with ``with_state`` also return (header, optimizer state or None)."""
    from .optim import OptimizerState

    header, blocks = read_container(path, CKPT_MAGIC, CKPT_VERSION)
    kind = header.get("kind")
    arch = ArchConfig(**header["arch"])
    if kind == "dynamics":
        model = IclDynamicsModel(arch)
    elif kind == "lyapunov":
        model = IclLyapunovModel(arch, WarpConfig(**header["warp"]))
    else:
        raise FormatError(f"{path}: unknown model kind {kind!r}")
    names = header["names"]
    if len(blocks) < len(names) or set(names) != set(model.params):
        raise FormatError(f"{path}: weight blocks do not match the architecture")
    model.load_state(dict(zip(names, blocks)))
    if not with_state:
        return model
    opt = None
    meta = header.get("optimizer")
    if meta:
        opt = OptimizerState(meta["learning_rate"], meta["kind"], meta["beta1"], meta["beta2"],
                             meta["eps"], meta["step"])
        rest = blocks[len(names):]
        for i, k in enumerate(meta["moments"]):
            opt.m[k] = rest[2 * i].copy()
            opt.v[k] = rest[2 * i + 1].copy()
    return model, header, opt
