"""Dense kernels, losses, seeded sampling, Adam and a finite-difference checker.

Everything here works on float64 numpy arrays. A "matrix" is just a 2-D
ndarray; a parameter set is an ordered dict of name -> ndarray.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

class DimensionError(ValueError):
    pass


class ParameterError(ValueError):
    pass


# ---------------------------------------------------------------------------
# random streams

class RngStream:
    """Counter-based random stream keyed by ``(seed, stream_id)``.

    Backed by numpy's Philox bit generator, whose 128-bit key holds the seed
    and the stream id. Equal keys give identical sequences; different stream
    ids give independent sequences, so work can be split without coordination.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream_id = int(stream_id) & 0xFFFFFFFFFFFFFFFF
        key = np.array([self.seed, self.stream_id], dtype=np.uint64)
        self.gen = np.random.Generator(np.random.Philox(key=key))

    def split(self, stream_id: int) -> "RngStream":
        """Child stream derived from this stream's seed.

        The child key mixes the parent stream id with ``stream_id`` so that
        splits of different parents do not collide.
        """
        mixed = _splitmix64(self.stream_id ^ _splitmix64(int(stream_id) + 1))
        return RngStream(self.seed, mixed)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def choice(self, a, size=None, replace=True):
        return self.gen.choice(a, size=size, replace=replace)

    def permutation(self, n):
        return self.gen.permutation(n)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"


def _splitmix64(x: int) -> int:
    mask = 0xFFFFFFFFFFFFFFFF
    x = (x + 0x9E3779B97F4A7C15) & mask
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & mask
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & mask
    return x ^ (x >> 31)


def sample_half_normal(sigma: float, rng: RngStream, size=None):
    """|N(0, sigma^2)| draw(s)."""
    if not sigma >= 0:
        raise ParameterError(f"half-normal scale must be >= 0, got {sigma}")
    if sigma == 0:
        return 0.0 if size is None else np.zeros(size)
    return np.abs(rng.normal(0.0, sigma, size))


def glorot_uniform(fan_in: int, fan_out: int, rng: RngStream) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, (fan_in, fan_out))


# ---------------------------------------------------------------------------
# dense kernels

def affine_forward(x: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    """y = xW + b."""
    if x.ndim != 2 or W.ndim != 2 or x.shape[1] != W.shape[0]:
        raise DimensionError(f"cannot multiply x{x.shape} by W{W.shape}")
    if b.shape not in ((1, W.shape[1]), (W.shape[1],)):
        raise DimensionError(f"bias {b.shape} does not fit output of W{W.shape}")
    return x @ W + b.reshape(1, -1)


def relu(x):
    return np.maximum(x, 0.0)


def sigmoid(z):
    # exp of a non-positive argument only
    out = np.empty_like(z, dtype=float)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


# ---------------------------------------------------------------------------
# losses

def sigmoid_bce(logits: np.ndarray, targets: np.ndarray):
    """Mean binary cross entropy with logits; returns (loss, dloss/dlogits)."""
    logits = np.asarray(logits, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if logits.shape != targets.shape:
        raise DimensionError(f"logits {logits.shape} vs targets {targets.shape}")
    if not np.all((targets == 0) | (targets == 1)):
        raise ParameterError("binary cross entropy targets must be 0 or 1")
    # -[t log s(z) + (1-t) log(1-s(z))] = max(z,0) - t z + log(1 + exp(-|z|))
    per = np.maximum(logits, 0) - targets * logits + np.log1p(np.exp(-np.abs(logits)))
    n = logits.size
    return float(per.sum() / n), (sigmoid(logits) - targets) / n


def softmax_xent(logits: np.ndarray, one_hot_targets: np.ndarray):
    """Mean softmax cross entropy over rows; returns (loss, dloss/dlogits)."""
    logits = np.asarray(logits, dtype=float)
    t = np.asarray(one_hot_targets, dtype=float)
    if logits.shape != t.shape or logits.ndim != 2:
        raise DimensionError(f"logits {logits.shape} vs targets {t.shape}")
    if not (np.all((t == 0) | (t == 1)) and np.all(t.sum(axis=1) == 1)):
        raise ParameterError("every target row must be one-hot")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    batch = logits.shape[0]
    loss = -(t * logp).sum() / batch
    return float(loss), (np.exp(logp) - t) / batch


# ---------------------------------------------------------------------------
# Adam

@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)

    @classmethod
    def init(cls, params, learning_rate=1e-3, **kw) -> "AdamState":
        st = cls(learning_rate=learning_rate, **kw)
        for name, p in params.items():
            st.first_moment[name] = np.zeros_like(p)
            st.second_moment[name] = np.zeros_like(p)
        return st


def adam_step(params, grads, state: AdamState):
    """In-place Adam update with bias correction. Returns (params, state)."""
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise ParameterError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads[name]
        m = state.first_moment[name]
        v = state.second_moment[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    return params, state


# ---------------------------------------------------------------------------
# gradient checking

def finite_diff_gradcheck(
    loss_fn: Callable[[], tuple],
    params,
    probe_count: int,
    eps: float = 1e-5,
    rng: RngStream | None = None,
    pattern_fn: Callable[[], bytes] | None = None,
    floor: float = 1e-8,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn()`` returns ``(loss, grads)`` evaluated at the current contents
    of ``params``; the checker perturbs those arrays in place and restores
    them. Probed coordinates are drawn uniformly over all scalar entries.

    For piecewise-linear models pass ``pattern_fn`` returning the activation
    pattern of the last forward pass (e.g. packed ReLU masks). A coordinate
    whose +eps and -eps evaluations land on different linear pieces straddles
    a kink, so it is replaced by a fresh coordinate.

    ``floor`` bounds the denominator of the relative error. Losses summed over
    many terms carry central-difference roundoff near ``1e-16 * |loss| / eps``,
    so near-zero gradients of such losses need a larger floor.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ParameterError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    rng = rng or RngStream(0, 0x6C)
    _, analytic = loss_fn()
    names = list(params)
    sizes = np.array([params[n].size for n in names])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    total = int(offsets[-1])
    probe_count = min(probe_count, total)
    order = iter(rng.permutation(total))
    worst = 0.0
    done = 0
    for fid in order:
        if done == probe_count:
            break
        k = int(np.searchsorted(offsets, fid, side="right") - 1)
        name = names[k]
        arr = params[name]
        idx = np.unravel_index(int(fid - offsets[k]), arr.shape)
        orig = arr[idx]
        arr[idx] = orig + eps
        fp = loss_fn()[0]
        pat_p = pattern_fn() if pattern_fn else None
        arr[idx] = orig - eps
        fm = loss_fn()[0]
        pat_m = pattern_fn() if pattern_fn else None
        arr[idx] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ParameterError(f"non-finite loss while probing {name}{tuple(int(i) for i in idx)}")
        if pat_p != pat_m:
            continue
        num = (fp - fm) / (2 * eps)
        ana = float(analytic[name][idx])
        worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), floor))
        done += 1
    return worst
