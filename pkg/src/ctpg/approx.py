"""Function approximation with exact gradients.

Everything is stored as one flat float64 vector per block so that Adam,
Polyak averaging, finite differences and checkpointing all operate on the
same representation.  Layers are numpy views into that vector.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

SCHEMA_VERSION = 1


class DivergenceError(RuntimeError):
    """Raised when a non-finite value shows up in parameters or gradients."""


@dataclass(frozen=True)
class NetSpec:
    input_dim: int
    output_dim: int
    hidden_sizes: tuple[int, ...] = (64, 64)
    nonlinearity: str = "relu"

    def __post_init__(self):
        if self.input_dim <= 0 or self.output_dim <= 0 or any(h <= 0 for h in self.hidden_sizes):
            raise ValueError("network dimensions must be positive")
        if not self.hidden_sizes:
            raise ValueError("hidden_sizes must be non-empty for network mode")
        if self.nonlinearity != "relu":
            raise ValueError(f"unsupported nonlinearity {self.nonlinearity!r}")

    @property
    def layer_shapes(self) -> list[tuple[tuple[int, int], tuple[int]]]:
        dims = [self.input_dim, *self.hidden_sizes, self.output_dim]
        return [((o, i), (o,)) for i, o in zip(dims[:-1], dims[1:])]

    @property
    def n_params(self) -> int:
        return sum(o * i + o for (o, i), _ in self.layer_shapes)


@dataclass
class ParamBlock:
    """Flat parameter vector plus the shapes it is carved into."""

    data: np.ndarray
    shapes: list[tuple[int, ...]]

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float64)
        expected = sum(int(np.prod(s)) for s in self.shapes)
        if self.data.size != expected:
            raise ValueError(f"parameter count {self.data.size} != {expected} implied by shapes")

    @property
    def size(self) -> int:
        return self.data.size

    def views(self, data: np.ndarray | None = None) -> list[np.ndarray]:
        data = self.data if data is None else data
        out, offset = [], 0
        for shape in self.shapes:
            n = int(np.prod(shape))
            out.append(data[offset:offset + n].reshape(shape))
            offset += n
        return out

    def copy(self) -> "ParamBlock":
        return ParamBlock(self.data.copy(), list(self.shapes))

    def check_finite(self) -> None:
        if not np.all(np.isfinite(self.data)):
            raise DivergenceError("non-finite parameters")


def _mlp_shapes(spec: NetSpec) -> list[tuple[int, ...]]:
    shapes = []
    for w, b in spec.layer_shapes:
        shapes += [w, b]
    return shapes


def init_mlp(spec: NetSpec, rng: np.random.Generator) -> ParamBlock:
    parts = []
    for (o, i), _ in spec.layer_shapes:
        bound = 1.0 / np.sqrt(i)
        parts.append(rng.uniform(-bound, bound, size=o * i))
        parts.append(rng.uniform(-bound, bound, size=o))
    return ParamBlock(np.concatenate(parts), _mlp_shapes(spec))


def _forward_cache(params: ParamBlock, spec: NetSpec, x: np.ndarray):
    views = params.views()
    acts = [x]
    pre = []
    h = x
    n_layers = len(views) // 2
    for k in range(n_layers):
        W, b = views[2 * k], views[2 * k + 1]
        z = h @ W.T + b
        if k < n_layers - 1:
            pre.append(z)
            h = np.maximum(z, 0.0)
            acts.append(h)
        else:
            h = z
    return h, (acts, pre)


def forward(params: ParamBlock, spec: NetSpec, x) -> np.ndarray:
    """Evaluate the network on one input vector or a batch ``(B, input_dim)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != spec.input_dim:
        raise ValueError(f"input has length {x.shape[-1]}, expected {spec.input_dim}")
    out, _ = _forward_cache(params, spec, np.atleast_2d(x))
    return out[0] if x.ndim == 1 else out


def _backward(params: ParamBlock, cache, upstream: np.ndarray):
    views = params.views()
    acts, pre = cache
    grad = np.zeros_like(params.data)
    gviews = params.views(grad)
    n_layers = len(views) // 2
    g = upstream
    for k in reversed(range(n_layers)):
        W = views[2 * k]
        gviews[2 * k][...] = g.T @ acts[k]
        gviews[2 * k + 1][...] = g.sum(axis=0)
        g = g @ W
        if k > 0:
            g = g * (pre[k - 1] > 0.0)
    return grad, g


def gradient(params: ParamBlock, spec: NetSpec, x, upstream):
    """Gradient of ``<upstream, forward(x)>`` w.r.t. the flat parameters and the input.

    Batched inputs sum the per-example gradients.
    """
    x = np.asarray(x, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    if x.shape[-1] != spec.input_dim:
        raise ValueError(f"input has length {x.shape[-1]}, expected {spec.input_dim}")
    if upstream.shape[-1] != spec.output_dim:
        raise ValueError(f"upstream has length {upstream.shape[-1]}, expected {spec.output_dim}")
    single = x.ndim == 1
    _, cache = _forward_cache(params, spec, np.atleast_2d(x))
    grad, gx = _backward(params, cache, np.atleast_2d(upstream))
    return grad, (gx[0] if single else gx)


# ---------------------------------------------------------------------------
# optimizers


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One Adam update; returns ``(new_params, new_state)`` without mutating inputs."""
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != np.shape(params):
        raise ValueError("gradient shape does not match parameters")
    if not np.all(np.isfinite(grads)):
        raise DivergenceError("non-finite gradient")
    t = state.t + 1
    m = beta1 * state.m + (1.0 - beta1) * grads
    v = beta2 * state.v + (1.0 - beta2) * grads * grads
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    new = params - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new, AdamState(m, v, t)


class Optimizer:
    """In-place optimizer over a flat vector; ``kind`` is ``adam`` or ``sgd``."""

    def __init__(self, n: int, lr: float, kind: str = "adam"):
        if kind not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {kind!r}")
        self.kind, self.lr = kind, lr
        self.state = AdamState.zeros(n)

    def step(self, params: np.ndarray, grads: np.ndarray) -> None:
        if self.kind == "sgd":
            if not np.all(np.isfinite(grads)):
                raise DivergenceError("non-finite gradient")
            params -= self.lr * grads
        else:
            new, self.state = adam_step(params, grads, self.state, self.lr)
            params[...] = new
        if not np.all(np.isfinite(params)):
            raise DivergenceError("non-finite parameters after update")


# ---------------------------------------------------------------------------
# multi-task function approximators


class TaskNet:
    """Task-conditioned approximator over one flat parameter vector.

    ``kind="table"``: a lookup table ``(n_tasks, n_states, output_dim)``;
    inputs are integer state indices.
    ``kind="mlp"``: a ReLU network on float inputs, either one network per
    task or (``shared=True``) a shared trunk with a linear head per task.
    """

    def __init__(self, kind: str, n_tasks: int, output_dim: int, rng: np.random.Generator | None = None,
                 n_states: int = 0, input_dim: int = 0, hidden_sizes: Sequence[int] = (64, 64),
                 shared: bool = False):
        self.kind, self.n_tasks, self.output_dim, self.shared = kind, n_tasks, output_dim, shared
        if kind == "table":
            if n_states <= 0:
                raise ValueError("table mode needs n_states > 0")
            self.n_states = n_states
            self.block = ParamBlock(np.zeros(n_tasks * n_states * output_dim), [(n_tasks, n_states, output_dim)])
        elif kind == "mlp":
            self.spec = NetSpec(input_dim, output_dim, tuple(hidden_sizes))
            self.input_dim = input_dim
            rng = np.random.default_rng(0) if rng is None else rng
            layers = self.spec.layer_shapes
            shapes, parts = [], []
            for k, ((o, i), _) in enumerate(layers):
                per_task = not shared or k == len(layers) - 1
                lead = (n_tasks,) if per_task else ()
                bound = 1.0 / np.sqrt(i)
                shapes += [lead + (o, i), lead + (o,)]
                parts.append(rng.uniform(-bound, bound, size=int(np.prod(lead + (o, i)))))
                parts.append(rng.uniform(-bound, bound, size=int(np.prod(lead + (o,)))))
            self.block = ParamBlock(np.concatenate(parts), shapes)
        else:
            raise ValueError(f"unknown approximator kind {kind!r}")

    @property
    def params(self) -> np.ndarray:
        return self.block.data

    @property
    def size(self) -> int:
        return self.block.size

    # forward / backward ------------------------------------------------------
    def forward(self, tasks, x, params: np.ndarray | None = None):
        out, _ = self.forward_cache(tasks, x, params)
        return out

    def forward_cache(self, tasks, x, params: np.ndarray | None = None):
        tasks = np.asarray(tasks, dtype=np.int64)
        views = self.block.views(self.block.data if params is None else params)
        if self.kind == "table":
            idx = np.asarray(x, dtype=np.int64)
            return views[0][tasks, idx], (tasks, idx)
        x = np.asarray(x, dtype=np.float64)
        groups = [(t, np.flatnonzero(tasks == t)) for t in np.unique(tasks)]
        n_layers = len(views) // 2
        h = x
        acts, pre = [x], []
        for k in range(n_layers):
            W, b = views[2 * k], views[2 * k + 1]
            if W.ndim == 2:
                z = h @ W.T + b
            else:
                z = np.empty((h.shape[0], W.shape[1]))
                for t, rows in groups:
                    z[rows] = h[rows] @ W[t].T + b[t]
            if k < n_layers - 1:
                pre.append(z)
                h = np.maximum(z, 0.0)
                acts.append(h)
            else:
                h = z
        return h, (groups, acts, pre)

    def backward(self, cache, upstream, params: np.ndarray | None = None):
        """Return ``(flat_grad, input_grad)``; ``input_grad`` is None for tables."""
        upstream = np.asarray(upstream, dtype=np.float64)
        grad = np.zeros(self.block.size)
        gviews = self.block.views(grad)
        if self.kind == "table":
            tasks, idx = cache
            np.add.at(gviews[0], (tasks, idx), upstream)
            return grad, None
        views = self.block.views(self.block.data if params is None else params)
        groups, acts, pre = cache
        n_layers = len(views) // 2
        g = upstream
        for k in reversed(range(n_layers)):
            W = views[2 * k]
            if W.ndim == 2:
                gviews[2 * k][...] = g.T @ acts[k]
                gviews[2 * k + 1][...] = g.sum(axis=0)
                g = g @ W
            else:
                g_in = np.empty((g.shape[0], W.shape[2]))
                for t, rows in groups:
                    gviews[2 * k][t] = g[rows].T @ acts[k][rows]
                    gviews[2 * k + 1][t] = g[rows].sum(axis=0)
                    g_in[rows] = g[rows] @ W[t]
                g = g_in
            if k > 0:
                g = g * (pre[k - 1] > 0.0)
        return grad, g


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, blocks: dict[str, np.ndarray], rng_states: dict | None = None,
                    meta: dict | None = None) -> None:
    """Write a self-describing ``.npz`` container.

    The JSON header records the schema version, each block's shape and dtype
    (little-endian float64) and serialized generator states.
    """
    header = {
        "schema_version": SCHEMA_VERSION,
        "blocks": {k: {"shape": list(np.shape(v)), "dtype": "<f8"} for k, v in blocks.items()},
        "rng": rng_states or {},
        "meta": meta or {},
    }
    arrays = {f"block/{k}": np.asarray(v, dtype="<f8") for k, v in blocks.items()}
    with open(path, "wb") as fh:
        np.savez(fh, header=np.array(json.dumps(header)), **arrays)


def load_checkpoint(path):
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["header"]))
        if header.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported checkpoint schema {header.get('schema_version')}")
        blocks = {}
        for name, desc in header["blocks"].items():
            arr = z[f"block/{name}"]
            if list(arr.shape) != desc["shape"]:
                raise ValueError(f"block {name} has shape {arr.shape}, header says {desc['shape']}")
            blocks[name] = arr.astype(np.float64)
    return blocks, header


def rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def rng_from_state(state: dict) -> np.random.Generator:
    bg = getattr(np.random, state["bit_generator"])()
    bg.state = state
    return np.random.Generator(bg)
