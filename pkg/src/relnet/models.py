"""Forward and backward passes for the MLP baseline, the Relation Network and
the linear disentangling layer, plus the |UB| block-structure score.

Parameters live in ordered dicts of float64 arrays. Layer ``k`` of an MLP
named ``g`` owns ``g.W{k}`` (fan_in x fan_out) and ``g.b{k}`` (fan_out,).
"""
from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from .numerics import DimensionError, RngStream, glorot_uniform, relu


class StaleCacheError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# MLP

@dataclass(frozen=True)
class MlpSpec:
    layer_sizes: tuple  # input width first, output width last

    def __post_init__(self):
        if len(self.layer_sizes) < 2 or any(s <= 0 for s in self.layer_sizes):
            raise ValueError(f"bad layer sizes {self.layer_sizes}")

    @property
    def n_layers(self):
        return len(self.layer_sizes) - 1


def init_mlp(spec: MlpSpec, rng: RngStream, prefix: str, params=None):
    params = OrderedDict() if params is None else params
    for k, (a, b) in enumerate(zip(spec.layer_sizes[:-1], spec.layer_sizes[1:])):
        params[f"{prefix}.W{k}"] = glorot_uniform(a, b, rng)
        params[f"{prefix}.b{k}"] = np.zeros(b)
    return params


def mlp_forward(x, params, prefix: str, n_layers: int, final_relu: bool = False):
    """Rectifier hidden layers; the last layer is linear unless ``final_relu``."""
    acts = [x]
    h = x
    for k in range(n_layers):
        W = params[f"{prefix}.W{k}"]
        if h.shape[-1] != W.shape[0]:
            raise DimensionError(f"{prefix} layer {k}: input width {h.shape[-1]} vs W{W.shape}")
        h = h @ W + params[f"{prefix}.b{k}"]
        if k < n_layers - 1 or final_relu:
            h = relu(h)
        acts.append(h)
    return h, (prefix, n_layers, final_relu, acts)


def mlp_backward(cache, grad_out, params, grads=None, need_input_grad=True):
    """Accumulate parameter gradients into ``grads``; return (grads, dL/dx)."""
    prefix, n_layers, final_relu, acts = cache
    grads = OrderedDict() if grads is None else grads
    if grad_out.shape != acts[-1].shape:
        raise StaleCacheError(f"{prefix}: upstream gradient {grad_out.shape} vs cached output {acts[-1].shape}")
    d = grad_out
    for k in reversed(range(n_layers)):
        if k < n_layers - 1 or final_relu:
            d = d * (acts[k + 1] > 0)
        a = acts[k]
        a2 = a.reshape(-1, a.shape[-1])
        d2 = d.reshape(-1, d.shape[-1])
        _acc(grads, f"{prefix}.W{k}", a2.T @ d2)
        _acc(grads, f"{prefix}.b{k}", d2.sum(axis=0))
        if k > 0 or need_input_grad:
            d = d @ params[f"{prefix}.W{k}"].T
    return grads, (d if need_input_grad else None)


def relu_pattern(*caches) -> bytes:
    """Packed ReLU on/off masks of every cached activation, for kink detection."""
    parts = []

    def walk(obj):
        if isinstance(obj, np.ndarray):
            if obj.dtype.kind == "f":
                parts.append(np.packbits(obj > 0).tobytes())
        elif isinstance(obj, (list, tuple)):
            for o in obj:
                walk(o)

    walk(caches)
    return b"".join(parts)


def _acc(grads, name, value):
    if name in grads:
        grads[name] += value
    else:
        grads[name] = value


# ---------------------------------------------------------------------------
# Relation Network

@dataclass(frozen=True)
class RnSpec:
    """Sizes of a Relation Network.

    ``hidden=(64, 64)`` gives g = 2n -> 64 -> g_out (two layers, the last one
    of width ``g_out``) and f = g_out -> 64 -> 64 -> out_dim.
    """

    n_features: int
    hidden: tuple = (64, 64)
    g_out: int = 64
    out_dim: int = 16

    @property
    def g_spec(self):
        return MlpSpec((2 * self.n_features, *self.hidden[:-1], self.g_out))

    @property
    def f_spec(self):
        return MlpSpec((self.g_out, *self.hidden, self.out_dim))


def init_rn(spec: RnSpec, rng: RngStream, params=None, zero_readout=True):
    params = init_mlp(spec.g_spec, rng.split(1), "g", params)
    params = init_mlp(spec.f_spec, rng.split(2), "f", params)
    if zero_readout:
        params[f"f.W{spec.f_spec.n_layers - 1}"][:] = 0.0
    return params


def pair_indices(m: int):
    """Ordered pairs (i, j), i != j, in row-major order."""
    I, J = np.nonzero(~np.eye(m, dtype=bool))
    return I, J


def rn_forward(D, params, spec: RnSpec):
    """logits = f(sum over ordered pairs i != j of g([o_i, o_j])).

    ``D`` is (m, n) or a batch (B, m, n). g runs on the full m x m grid of
    pairs; the first layer is split into the halves acting on o_i and o_j,
    and the self-pair outputs are zeroed before summation.
    """
    single = D.ndim == 2
    X = D[None] if single else D
    B, m, n = X.shape
    if n != spec.n_features:
        raise DimensionError(f"scene has {n} features, network expects {spec.n_features}")
    W0 = params["g.W0"]
    z = (X @ W0[:n])[:, :, None, :] + (X @ W0[n:])[:, None, :, :] + params["g.b0"]
    acts = [np.maximum(z, 0.0, out=z)]
    n_g = spec.g_spec.n_layers
    for k in range(1, n_g):
        a = acts[-1]
        z = a.reshape(-1, a.shape[-1]) @ params[f"g.W{k}"]
        z += params[f"g.b{k}"]
        acts.append(np.maximum(z, 0.0, out=z).reshape(B, m, m, -1))
    g_grid = acts[-1]
    diag = np.arange(m)
    g_grid[:, diag, diag, :] = 0.0
    agg = g_grid.sum(axis=(1, 2))
    logits, f_cache = mlp_forward(agg, params, "f", spec.f_spec.n_layers)
    cache = (single, X, acts, f_cache)
    return (logits[0] if single else logits), cache


def rn_backward(cache, grad_out, params, spec: RnSpec, grads=None, need_input_grad=True):
    """Returns (param grads, dL/dD)."""
    single, X, acts, f_cache = cache
    grads = OrderedDict() if grads is None else grads
    go = grad_out[None] if single else grad_out
    if go.shape[0] != X.shape[0]:
        raise StaleCacheError(f"upstream gradient batch {go.shape[0]} vs cached batch {X.shape[0]}")
    B, m, n = X.shape
    _, d_agg = mlp_backward(f_cache, go, params, grads)
    n_g = spec.g_spec.n_layers
    # relu mask of the last g layer also removes the zeroed self-pairs
    d = (acts[-1] > 0) * d_agg[:, None, None, :]
    for k in reversed(range(1, n_g)):
        a = acts[k - 1].reshape(-1, acts[k - 1].shape[-1])
        d2 = d.reshape(-1, d.shape[-1])
        _acc(grads, f"g.W{k}", a.T @ d2)
        _acc(grads, f"g.b{k}", d2.sum(axis=0))
        d = (d2 @ params[f"g.W{k}"].T).reshape(acts[k - 1].shape)
        d *= acts[k - 1] > 0
    h = d.shape[-1]
    d_left = d.sum(axis=2)
    d_right = d.sum(axis=1)
    Xf = X.reshape(-1, n)
    dW0 = np.concatenate([Xf.T @ d_left.reshape(-1, h), Xf.T @ d_right.reshape(-1, h)], axis=0)
    _acc(grads, "g.W0", dW0)
    _acc(grads, "g.b0", d_left.sum(axis=(0, 1)))
    dX = None
    if need_input_grad:
        W0 = params["g.W0"]
        dX = d_left @ W0[:n].T + d_right @ W0[n:].T
        if single:
            dX = dX[0]
    return grads, dX


# ---------------------------------------------------------------------------
# disentangling linear layer

def init_disentangle(size: int, rng: RngStream, params=None, identity=False):
    params = OrderedDict() if params is None else params
    params["U"] = np.eye(size) if identity else glorot_uniform(size, size, rng)
    return params


def disentangle_forward(v, U, m: int = 16, n: int = 10):
    """U v reshaped row-major to (m, n); ``v`` may be (mn,) or (B, mn)."""
    v = np.asarray(v)
    if v.shape[-1] != U.shape[1] or U.shape[0] != m * n:
        raise DimensionError(f"input length {v.shape[-1]} vs U{U.shape} for a {m}x{n} scene")
    out = v @ U.T
    return out.reshape(v.shape[:-1] + (m, n)), v


def disentangle_backward(v, grad_out, U):
    g = grad_out.reshape(grad_out.shape[:-2] + (-1,))
    if v.ndim == 1:
        return np.outer(g, v), g @ U
    return g.T @ v, g @ U


# ---------------------------------------------------------------------------
# |UB| block structure

def block_mass(U, B, m: int = 16, n: int = 10) -> np.ndarray:
    """(m, m) matrix: entry (i, j) is the total |UB| mass of block (i, j).

    Block rows index perceived objects (outputs of U), block columns index
    ground-truth objects of the unpermuted scene.
    """
    B = B.matrix() if hasattr(B, "matrix") else np.asarray(B)
    M = np.abs(U @ B)
    if M.shape != (m * n, m * n):
        raise DimensionError(f"UB has shape {M.shape}, expected {(m * n, m * n)}")
    return M.reshape(m, n, m, n).sum(axis=(1, 3))


def ub_block_score(U, B, m: int = 16, n: int = 10) -> float:
    """Mean over ground-truth objects of the largest share of its mass that a
    single perceived-object block receives. 1 means perfect one-to-one blocks.
    """
    S = block_mass(U, B, m, n)
    col = S.sum(axis=0)
    shares = np.where(col > 0, S.max(axis=0) / np.where(col > 0, col, 1.0), 1.0 / m)
    return float(shares.mean())


# ---------------------------------------------------------------------------
# bookkeeping

def param_count(params) -> int:
    return int(sum(p.size for p in params.values()))


def mlp_param_count(layer_sizes) -> int:
    return int(sum(a * b + b for a, b in zip(layer_sizes[:-1], layer_sizes[1:])))


def rn_param_count(spec: RnSpec) -> int:
    return mlp_param_count(spec.g_spec.layer_sizes) + mlp_param_count(spec.f_spec.layer_sizes)


def matched_mlp_width(target: int, in_dim: int, out_dim: int, depth: int) -> int:
    """Hidden width w (``depth`` hidden layers) whose count is closest to ``target``."""
    best = min(range(1, 4096), key=lambda w: abs(mlp_param_count((in_dim, *([w] * depth), out_dim)) - target))
    return best


def save_checkpoint(path, params, header: dict) -> None:
    """Line 1: JSON header; then one JSON line per array (name, shape, row-major data)."""
    head = dict(header)
    head["shapes"] = {k: list(v.shape) for k, v in params.items()}
    with open(path, "w") as fh:
        fh.write(json.dumps(head, sort_keys=True) + "\n")
        for k, v in params.items():
            fh.write(json.dumps({"name": k, "shape": list(v.shape), "data": v.ravel().tolist()}) + "\n")


def load_checkpoint(path):
    with open(path) as fh:
        lines = fh.read().splitlines()
    header = json.loads(lines[0])
    params = OrderedDict()
    for line in lines[1:]:
        rec = json.loads(line)
        params[rec["name"]] = np.array(rec["data"], dtype=float).reshape(rec["shape"])
    return params, header
