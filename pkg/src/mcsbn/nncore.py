"""Small differentiable building blocks with hand-written gradients.

Everything here works on plain numpy arrays. Batched routines take inputs
either as dense ``(N, d_in)`` arrays or as scipy CSR multi-hot matrices;
the latter is how session bag-of-words vectors enter the channel GRUs.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

# Row count of the fixed-shape blocks used by ``rowwise_matmul``.
ROW_CHUNK = 64


class ShapeError(ValueError):
    """Raised when tensor dimensions do not line up."""


def sigmoid(x):
    # tanh form is overflow-free for large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def rowwise_matmul(x: np.ndarray, w_t: np.ndarray) -> np.ndarray:
    """``x @ w_t`` computed in fixed blocks of ``ROW_CHUNK`` rows.

    BLAS may pick a different kernel (and summation order) depending on the
    number of rows, so the same row can come out with different low bits
    in a batch of 1 versus a batch of 300.  Padding every call to the same
    block shape makes each output row depend on its input row alone, which
    the serving path relies on for exact replay equivalence.
    """
    n = x.shape[0]
    out = np.empty((n, w_t.shape[1]), dtype=np.result_type(x, w_t))
    block = np.zeros((ROW_CHUNK, x.shape[1]), dtype=x.dtype)
    for start in range(0, n, ROW_CHUNK):
        stop = min(start + ROW_CHUNK, n)
        block[: stop - start] = x[start:stop]
        block[stop - start :] = 0
        out[start:stop] = (block @ w_t)[: stop - start]
    return out


def multi_hot(index_lists: Sequence[Sequence[int]], width: int, dtype=np.float32) -> sp.csr_matrix:
    """CSR matrix with one row per index list, ones at the listed columns."""
    lengths = np.fromiter((len(ix) for ix in index_lists), dtype=np.int64, count=len(index_lists))
    indptr = np.zeros(len(index_lists) + 1, dtype=np.int64)
    np.cumsum(lengths, out=indptr[1:])
    if indptr[-1]:
        indices = np.concatenate([np.asarray(ix, dtype=np.int64) for ix in index_lists if len(ix)])
    else:
        indices = np.zeros(0, dtype=np.int64)
    if indices.size and (indices.min() < 0 or indices.max() >= width):
        raise ShapeError(f"multi-hot index out of range for width {width}")
    data = np.ones(indices.size, dtype=dtype)
    return sp.csr_matrix((data, indices, indptr), shape=(len(index_lists), width))


def _project(x, w: np.ndarray) -> np.ndarray:
    """x @ w.T for dense or CSR ``x``."""
    if sp.issparse(x):
        return np.asarray(x @ w.T)
    return x @ w.T


def _weight_grad(x, da: np.ndarray) -> np.ndarray:
    """da.T @ x for dense or CSR ``x``; shape (out, in)."""
    if sp.issparse(x):
        return np.asarray((x.T @ da).T)
    return da.T @ x


def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


# --------------------------------------------------------------------------
# GRU
# --------------------------------------------------------------------------

GRU_NAMES = ("W_z", "W_r", "W_h", "U_z", "U_r", "U_h", "b_z", "b_r", "b_h")


@dataclass
class GruParams:
    """Weights of one GRU layer; W_* are (d, d_in), U_* are (d, d)."""

    W_z: np.ndarray
    W_r: np.ndarray
    W_h: np.ndarray
    U_z: np.ndarray
    U_r: np.ndarray
    U_h: np.ndarray
    b_z: np.ndarray
    b_r: np.ndarray
    b_h: np.ndarray

    def __post_init__(self):
        d, d_in = self.W_z.shape
        for name in ("W_r", "W_h"):
            if getattr(self, name).shape != (d, d_in):
                raise ShapeError(f"{name} has shape {getattr(self, name).shape}, expected {(d, d_in)}")
        for name in ("U_z", "U_r", "U_h"):
            if getattr(self, name).shape != (d, d):
                raise ShapeError(f"{name} has shape {getattr(self, name).shape}, expected {(d, d)}")
        for name in ("b_z", "b_r", "b_h"):
            if getattr(self, name).shape != (d,):
                raise ShapeError(f"{name} has shape {getattr(self, name).shape}, expected {(d,)}")

    @property
    def hidden_size(self) -> int:
        return self.W_z.shape[0]

    @property
    def input_size(self) -> int:
        return self.W_z.shape[1]

    @classmethod
    def init(cls, d_in: int, d: int, rng: np.random.Generator, dtype=np.float32) -> "GruParams":
        w = {n: _uniform(rng, (d, d_in), d_in, dtype) for n in ("W_z", "W_r", "W_h")}
        u = {n: _uniform(rng, (d, d), d, dtype) for n in ("U_z", "U_r", "U_h")}
        b = {n: np.zeros(d, dtype=dtype) for n in ("b_z", "b_r", "b_h")}
        return cls(**w, **u, **b)

    @classmethod
    def zeros(cls, d_in: int, d: int, dtype=np.float32) -> "GruParams":
        return cls(
            **{n: np.zeros((d, d_in), dtype) for n in ("W_z", "W_r", "W_h")},
            **{n: np.zeros((d, d), dtype) for n in ("U_z", "U_r", "U_h")},
            **{n: np.zeros(d, dtype) for n in ("b_z", "b_r", "b_h")},
        )

    def tensors(self) -> dict[str, np.ndarray]:
        return {n: getattr(self, n) for n in GRU_NAMES}

    def astype(self, dtype) -> "GruParams":
        return GruParams(**{n: a.astype(dtype) for n, a in self.tensors().items()})


def _gru_cell(p: GruParams, xz, xr, xh, h_prev, matmul):
    z = sigmoid(xz + matmul(h_prev, p.U_z.T) + p.b_z)
    r = sigmoid(xr + matmul(h_prev, p.U_r.T) + p.b_r)
    rh = r * h_prev
    c = np.tanh(xh + matmul(rh, p.U_h.T) + p.b_h)
    h = (1.0 - z) * h_prev + z * c
    return h, z, r, c


def gru_step(p: GruParams, x, h_prev: np.ndarray) -> np.ndarray:
    """One GRU update for a single example.

    ``x`` is either a dense vector of length ``input_size`` or a sequence of
    active multi-hot indices (a sorted set of vocabulary ids).
    """
    h_prev = np.asarray(h_prev)
    if h_prev.shape != (p.hidden_size,):
        raise ShapeError(f"h_prev has shape {h_prev.shape}, expected ({p.hidden_size},)")
    if isinstance(x, np.ndarray) and x.ndim == 1 and x.shape[0] == p.input_size and x.dtype.kind == "f":
        rows = x[None, :].astype(p.W_z.dtype)
    elif isinstance(x, np.ndarray) and x.dtype.kind == "f":
        raise ShapeError(f"dense input has shape {x.shape}, expected ({p.input_size},)")
    else:
        rows = multi_hot([list(x)], p.input_size, dtype=p.W_z.dtype)
    return gru_step_rows(p, rows, h_prev[None, :])[0]


def gru_step_rows(p: GruParams, x, h_prev: np.ndarray) -> np.ndarray:
    """Row-independent batched GRU step used on the inference path.

    Each output row is bitwise determined by its own input row and state.
    """
    if h_prev.shape[1] != p.hidden_size or x.shape[1] != p.input_size:
        raise ShapeError("gru_step_rows: dimension mismatch")
    if sp.issparse(x):
        xz, xr, xh = sparse_projections(x, stacked_input_weights(p))
    else:
        xz, xr, xh = input_projections(p, x)
    h, *_ = _gru_cell(p, xz, xr, xh, h_prev.astype(p.W_z.dtype), rowwise_matmul)
    return h


def stacked_input_weights(p: GruParams) -> np.ndarray:
    """Contiguous ``[W_z; W_r; W_h]^T`` of shape ``(d_in, 3d)``, reusable across steps."""
    return np.ascontiguousarray(np.concatenate([p.W_z, p.W_r, p.W_h]).T)


def sparse_projections(x: sp.csr_matrix, w_stack: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Input projections of multi-hot rows.

    CSR products accumulate each output element over the row's own nonzeros,
    so they are row-local and stacking the three gates changes no bits.
    """
    out = np.asarray(x @ w_stack)
    d = w_stack.shape[1] // 3
    return out[:, :d], out[:, d : 2 * d], out[:, 2 * d :]


def input_projections(p: GruParams, x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Row-independent ``(x W_z^T, x W_r^T, x W_h^T)`` for dense inputs."""
    return tuple(rowwise_matmul(x, w.T) for w in (p.W_z, p.W_r, p.W_h))


def gru_step_projected(p: GruParams, xz, xr, xh, h_prev: np.ndarray) -> np.ndarray:
    """``gru_step_rows`` with the input projections already computed."""
    h, *_ = _gru_cell(p, xz, xr, xh, h_prev.astype(p.W_z.dtype, copy=False), rowwise_matmul)
    return h


@dataclass
class GruCache:
    x: object
    mask: np.ndarray
    h_prev: list = field(default_factory=list)
    z: list = field(default_factory=list)
    r: list = field(default_factory=list)
    c: list = field(default_factory=list)


def gru_forward(p: GruParams, x, mask: np.ndarray, h0: np.ndarray | None = None):
    """Run a masked GRU over a padded batch of sequences.

    ``x`` has ``B*T`` rows ordered batch-major (row ``b*T + t``); ``mask`` is
    ``(B, T)`` with 1 for real steps. Masked steps carry the state through
    unchanged, so the returned state is the state after each sequence's last
    real step. Returns ``(h_T, cache)``.
    """
    B, T = mask.shape
    if x.shape != (B * T, p.input_size):
        raise ShapeError(f"input has shape {x.shape}, expected {(B * T, p.input_size)}")
    d = p.hidden_size
    dtype = p.W_z.dtype
    proj = [_project(x, w).reshape(B, T, d) for w in (p.W_z, p.W_r, p.W_h)]
    h = np.zeros((B, d), dtype=dtype) if h0 is None else h0
    cache = GruCache(x=x, mask=mask.astype(dtype))
    for t in range(T):
        m = cache.mask[:, t, None]
        h_new, z, r, c = _gru_cell(p, proj[0][:, t], proj[1][:, t], proj[2][:, t], h, np.matmul)
        cache.h_prev.append(h)
        cache.z.append(z)
        cache.r.append(r)
        cache.c.append(c)
        h = m * h_new + (1.0 - m) * h
    return h, cache


def gru_backward(p: GruParams, cache: GruCache, dh_T: np.ndarray, need_input_grad: bool = False):
    """Backpropagation through time for ``gru_forward``.

    Returns ``(grads, dx, dh0)`` where ``grads`` is a GruParams of gradients,
    ``dx`` the gradient wrt dense inputs (None for sparse inputs or when not
    requested) and ``dh0`` the gradient wrt the initial state.
    """
    B, T = cache.mask.shape
    if len(cache.z) != T:
        raise ShapeError(f"cache holds {len(cache.z)} steps but mask has {T}")
    d = p.hidden_size
    dtype = p.W_z.dtype
    da = [np.zeros((B, T, d), dtype=dtype) for _ in range(3)]
    dU = [np.zeros((d, d), dtype=dtype) for _ in range(3)]
    dh = dh_T.astype(dtype, copy=True)
    for t in range(T - 1, -1, -1):
        m = cache.mask[:, t, None]
        h_prev, z, r, c = cache.h_prev[t], cache.z[t], cache.r[t], cache.c[t]
        dhn = dh * m
        dh_prev = dh * (1.0 - m) + dhn * (1.0 - z)
        dac = dhn * z * (1.0 - c * c)
        daz = dhn * (c - h_prev) * z * (1.0 - z)
        dU[2] += dac.T @ (r * h_prev)
        drh = dac @ p.U_h
        dar = drh * h_prev * r * (1.0 - r)
        dh_prev += drh * r
        dU[1] += dar.T @ h_prev
        dh_prev += dar @ p.U_r
        dU[0] += daz.T @ h_prev
        dh_prev += daz @ p.U_z
        da[0][:, t] = daz
        da[1][:, t] = dar
        da[2][:, t] = dac
        dh = dh_prev
    flat = [a.reshape(B * T, d) for a in da]
    grads = GruParams(
        W_z=_weight_grad(cache.x, flat[0]),
        W_r=_weight_grad(cache.x, flat[1]),
        W_h=_weight_grad(cache.x, flat[2]),
        U_z=dU[0],
        U_r=dU[1],
        U_h=dU[2],
        b_z=flat[0].sum(axis=0),
        b_r=flat[1].sum(axis=0),
        b_h=flat[2].sum(axis=0),
    )
    dx = None
    if need_input_grad and not sp.issparse(cache.x):
        dx = flat[0] @ p.W_z + flat[1] @ p.W_r + flat[2] @ p.W_h
    return grads, dx, dh


# --------------------------------------------------------------------------
# Feedforward
# --------------------------------------------------------------------------

ACTIVATIONS = ("tanh", "identity")


@dataclass
class FfnParams:
    """Stack of affine layers; ``weights[i]`` is (out_i, in_i)."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: list[str]

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ShapeError("weights, biases and activations must have equal length")
        for i, (w, b, act) in enumerate(zip(self.weights, self.biases, self.activations)):
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
            if b.shape != (w.shape[0],):
                raise ShapeError(f"layer {i} bias shape {b.shape} does not match weight {w.shape}")
            if i and self.weights[i - 1].shape[0] != w.shape[1]:
                raise ShapeError(f"layer {i} input {w.shape[1]} does not chain from {self.weights[i - 1].shape[0]}")

    @property
    def input_size(self) -> int:
        return self.weights[0].shape[1]

    @property
    def output_size(self) -> int:
        return self.weights[-1].shape[0]

    @classmethod
    def init(cls, sizes: Sequence[int], activations: Sequence[str], rng: np.random.Generator, dtype=np.float32):
        weights = [_uniform(rng, (o, i), i, dtype) for i, o in zip(sizes[:-1], sizes[1:])]
        biases = [np.zeros(o, dtype=dtype) for o in sizes[1:]]
        return cls(weights, biases, list(activations))

    def tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"W{i}"] = w
            out[f"b{i}"] = b
        return out

    def astype(self, dtype) -> "FfnParams":
        return FfnParams([w.astype(dtype) for w in self.weights], [b.astype(dtype) for b in self.biases], list(self.activations))


def _activate(a: np.ndarray, act: str) -> np.ndarray:
    return np.tanh(a) if act == "tanh" else a


def ffn_forward(p: FfnParams, x) -> np.ndarray:
    """Inference forward pass; accepts a vector, a 2-D batch, or CSR rows."""
    single = isinstance(x, np.ndarray) and x.ndim == 1
    if single:
        x = x[None, :]
    if x.shape[1] != p.input_size:
        raise ShapeError(f"input dim {x.shape[1]} != {p.input_size}")
    for w, b, act in zip(p.weights, p.biases, p.activations):
        a = np.asarray(x @ w.T) if sp.issparse(x) else rowwise_matmul(x, w.T)
        x = _activate(a + b, act)
    return x[0] if single else x


def ffn_forward_train(p: FfnParams, x):
    """Training forward pass; returns ``(output, cache)``."""
    if x.shape[1] != p.input_size:
        raise ShapeError(f"input dim {x.shape[1]} != {p.input_size}")
    inputs, outputs = [], []
    for w, b, act in zip(p.weights, p.biases, p.activations):
        inputs.append(x)
        x = _activate(_project(x, w) + b, act)
        outputs.append(x)
    return x, (inputs, outputs)


def ffn_backward(p: FfnParams, cache, dout: np.ndarray):
    """Returns ``(grads, dx)``; ``dx`` is None when the input was sparse."""
    inputs, outputs = cache
    gw, gb = [None] * len(p.weights), [None] * len(p.weights)
    g = dout
    for i in range(len(p.weights) - 1, -1, -1):
        if p.activations[i] == "tanh":
            g = g * (1.0 - outputs[i] * outputs[i])
        gw[i] = _weight_grad(inputs[i], g)
        gb[i] = g.sum(axis=0)
        if i == 0 and sp.issparse(inputs[0]):
            g = None
        else:
            g = g @ p.weights[i]
    return FfnParams(gw, gb, list(p.activations)), g


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_update(state: AdamState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
    """In-place Adam step with bias correction over a dict of named tensors."""
    if set(grads) - set(params):
        raise ShapeError(f"gradients for unknown tensors: {sorted(set(grads) - set(params))}")
    state.t += 1
    c1 = 1.0 - state.beta1**state.t
    c2 = 1.0 - state.beta2**state.t
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ShapeError(f"{name}: grad shape {g.shape} != param shape {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)


# --------------------------------------------------------------------------
# Gradient checking
# --------------------------------------------------------------------------


def grad_check(
    closure: Callable[[], tuple[float, dict[str, np.ndarray]]],
    params: dict[str, np.ndarray],
    step: float = 1e-5,
    floor: float = 1e-6,
    max_coords: int | None = None,
    seed: int = 0,
    loss_fn: Callable[[], float] | None = None,
) -> dict[str, float]:
    """Compare analytic gradients against central finite differences.

    ``closure`` reads the (mutable) arrays in ``params`` and returns
    ``(loss, grads)``. Returns the max relative error per tensor, with
    relative error ``|a - n| / max(|a|, |n|, floor)``. ``max_coords`` limits
    the number of perturbed coordinates per tensor (sampled with ``seed``).
    ``loss_fn``, if given, is a cheaper forward-only loss used for the
    perturbed evaluations.
    """
    loss, grads = closure()
    if not np.isfinite(loss):
        raise FloatingPointError("grad_check: non-finite loss")
    if loss_fn is None:
        loss_fn = lambda: closure()[0]  # noqa: E731
    rng = np.random.default_rng(seed)
    report = {}
    for name, arr in params.items():
        analytic = grads[name]
        flat = arr.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        worst = 0.0
        for i in coords:
            orig = flat[i]
            flat[i] = orig + step
            up = loss_fn()
            flat[i] = orig - step
            down = loss_fn()
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise FloatingPointError(f"grad_check: non-finite loss perturbing {name}[{i}]")
            numeric = (up - down) / (2 * step)
            a = float(analytic.reshape(-1)[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
        report[name] = worst
    return report
