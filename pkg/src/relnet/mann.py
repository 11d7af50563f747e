"""Memory-augmented network for episodic one-shot scene classification.

An LSTM controller reads pre-processed scene features plus the previous
step's label and the previous read vectors. Each head emits a key that is
written to memory (least-recently-used-access) and then used for a cosine
read. A linear layer on [controller output, read vectors] predicts the label.

Everything is batched over episodes: arrays carry a leading episode axis E.
"""
from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import dataclass, field, replace

import numpy as np

from .models import (MlpSpec, RnSpec, _acc, init_mlp, relu_pattern, init_rn, mlp_backward, mlp_forward, rn_backward,
                     rn_forward)
from .numerics import DimensionError, ParameterError, RngStream, glorot_uniform, sigmoid, softmax
from .scenegen import GeneratorParams, generate_scene

NORM_FLOOR = 1e-12


@dataclass(frozen=True)
class MannConfig:
    controller_size: int = 64
    slots: int = 32
    width: int = 20
    heads: int = 2
    gamma: float = 0.95
    n_labels: int = 5
    feature_dim: int = 160
    preprocessor: str = "rn"  # or "mlp"
    pre_hidden: tuple = (64, 64)
    g_out: int = 64
    n_features: int = 10
    n_objects: int = 16

    def __post_init__(self):
        if self.heads < 1:
            raise ParameterError("need at least one head")
        if not 0.0 <= self.gamma < 1.0:
            raise ParameterError(f"usage decay must lie in [0, 1), got {self.gamma}")
        if self.heads > self.slots:
            raise ParameterError("more heads than memory slots")
        if self.preprocessor not in ("rn", "mlp"):
            raise ParameterError(f"unknown pre-processor {self.preprocessor!r}")

    @property
    def rn_spec(self):
        return RnSpec(self.n_features, tuple(self.pre_hidden), self.g_out, self.feature_dim)

    @property
    def mlp_spec(self):
        return MlpSpec((self.n_objects * self.n_features, *self.pre_hidden, self.feature_dim))

    @property
    def controller_input(self):
        return self.feature_dim + self.n_labels + self.heads * self.width


PAPER_SCALE = MannConfig(controller_size=200, slots=128, width=40, heads=4)


# ---------------------------------------------------------------------------
# episodes

@dataclass
class Episode:
    scenes: np.ndarray  # (T, 16, 10)
    targets: np.ndarray  # (T,) label ids
    class_ids: np.ndarray  # (T,) pool class ids
    instance: np.ndarray  # (T,) 1-based occurrence count of the class so far
    n_labels: int = 5

    def __len__(self):
        return len(self.targets)

    @property
    def target_onehot(self):
        return np.eye(self.n_labels)[self.targets]

    @property
    def input_labels(self):
        """Label of step t-1 fed at step t; zeros at step 0."""
        out = np.zeros((len(self), self.n_labels))
        out[1:] = self.target_onehot[:-1]
        return out

    def relabel(self, perm) -> "Episode":
        """Same episode with label l renamed to perm[l]."""
        return replace(self, targets=np.asarray(perm)[self.targets])


def build_episode(pool, rng: RngStream, n_classes: int = 5, length: int = 50, n_labels: int = 5,
                  params: GeneratorParams | None = None) -> Episode:
    """Fresh scenes for ``length`` steps over ``n_classes`` random classes of ``pool``."""
    return _assemble(len(pool), rng, n_classes, length, n_labels,
                     lambda c: generate_scene(pool[c], rng, params), [c.class_id for c in pool])


def episode_from_bank(bank, rng: RngStream, n_classes: int = 5, length: int = 50, n_labels: int = 5,
                      class_ids=None) -> Episode:
    """Like :func:`build_episode` but draws scenes from a pre-generated
    (C, K, 16, 10) bank of K scenes per class."""
    bank = np.asarray(bank)
    ids = list(range(len(bank))) if class_ids is None else list(class_ids)
    return _assemble(len(bank), rng, n_classes, length, n_labels,
                     lambda c: bank[c, rng.integers(bank.shape[1])], ids)


def _assemble(n_pool, rng, n_classes, length, n_labels, scene_of, ids) -> Episode:
    if n_pool < n_classes:
        raise ParameterError(f"pool of {n_pool} classes cannot supply {n_classes} per episode")
    if n_classes > n_labels:
        raise ParameterError("more classes per episode than labels")
    chosen = rng.choice(n_pool, size=n_classes, replace=False)
    labels = rng.permutation(n_labels)[:n_classes]
    draws = rng.integers(n_classes, size=length)
    scenes = np.stack([scene_of(chosen[d]) for d in draws])
    seen = np.zeros(n_classes, dtype=int)
    instance = np.empty(length, dtype=int)
    for t, d in enumerate(draws):
        seen[d] += 1
        instance[t] = seen[d]
    class_ids = np.array([ids[chosen[d]] for d in draws])
    return Episode(scenes, labels[draws], class_ids, instance, n_labels)


def episode_dump(ep: Episode, path) -> None:
    """One JSON line per step."""
    inputs = ep.input_labels
    with open(path, "w") as fh:
        for t in range(len(ep)):
            fh.write(json.dumps({
                "t": t, "class_id": int(ep.class_ids[t]), "instance": int(ep.instance[t]),
                "input_label": inputs[t].tolist(), "target_label": int(ep.targets[t]),
                "D": ep.scenes[t].tolist(),
            }) + "\n")


def stack_episodes(episodes):
    """(E, T, ...) arrays from equal-length episodes."""
    if len({len(e) for e in episodes}) != 1:
        raise DimensionError("episodes in a batch must share a length")
    return (np.stack([e.scenes for e in episodes]), np.stack([e.input_labels for e in episodes]),
            np.stack([e.targets for e in episodes]))


# ---------------------------------------------------------------------------
# LSTM cell

def init_lstm(n_in: int, hidden: int, rng: RngStream, params=None, prefix="lstm"):
    params = OrderedDict() if params is None else params
    params[f"{prefix}.Wx"] = glorot_uniform(n_in, 4 * hidden, rng)
    params[f"{prefix}.Wh"] = glorot_uniform(hidden, 4 * hidden, rng)
    params[f"{prefix}.b"] = np.zeros(4 * hidden)
    return params


def lstm_step(x, state, params, prefix="lstm"):
    """Gate order [input, forget, output, candidate]. Returns (h, (h, c), cache)."""
    h_prev, c_prev = state
    Wx, Wh = params[f"{prefix}.Wx"], params[f"{prefix}.Wh"]
    if x.shape[-1] != Wx.shape[0] or h_prev.shape[-1] != Wh.shape[0]:
        raise DimensionError(f"LSTM input {x.shape}/{h_prev.shape} vs Wx{Wx.shape}/Wh{Wh.shape}")
    H = Wh.shape[0]
    z = x @ Wx + h_prev @ Wh + params[f"{prefix}.b"]
    i = sigmoid(z[..., :H])
    f = sigmoid(z[..., H:2 * H])
    o = sigmoid(z[..., 2 * H:3 * H])
    g = np.tanh(z[..., 3 * H:])
    c = f * c_prev + i * g
    tc = np.tanh(c)
    h = o * tc
    return h, (h, c), (x, h_prev, c_prev, i, f, o, g, tc)


def lstm_step_backward(cache, dh, dc, params, grads, prefix="lstm"):
    """Gradients into ``grads``; returns (dx, dh_prev, dc_prev)."""
    x, h_prev, c_prev, i, f, o, g, tc = cache
    do = dh * tc
    dc = dc + dh * o * (1 - tc * tc)
    di = dc * g
    df = dc * c_prev
    dg = dc * i
    dz = np.concatenate([di * i * (1 - i), df * f * (1 - f), do * o * (1 - o), dg * (1 - g * g)], axis=-1)
    _acc(grads, f"{prefix}.Wx", x.T @ dz)
    _acc(grads, f"{prefix}.Wh", h_prev.T @ dz)
    _acc(grads, f"{prefix}.b", dz.sum(axis=0))
    return dz @ params[f"{prefix}.Wx"].T, dz @ params[f"{prefix}.Wh"].T, dc * f


# ---------------------------------------------------------------------------
# memory addressing

def cosine_similarity(key, memory):
    """cos(key, row_i) with norms floored at NORM_FLOOR. key (..., W), memory (..., N, W)."""
    kn = np.maximum(np.linalg.norm(key, axis=-1), NORM_FLOOR)
    mn = np.maximum(np.linalg.norm(memory, axis=-1), NORM_FLOOR)
    dots = np.einsum("...w,...nw->...n", key, memory)
    return dots / (kn[..., None] * mn), (dots, kn, mn)


def cosine_read(key, key_strength, memory):
    """Softmax over scaled cosine similarities; returns (weights, read vector)."""
    sim, _ = cosine_similarity(key, memory)
    w = softmax(key_strength * sim, axis=-1)
    return w, np.einsum("...n,...nw->...w", w, memory)


def least_used(usage, n: int):
    """Indices of the n smallest usages, smallest first; ties go to the lower index."""
    return np.argsort(usage, axis=-1, kind="stable")[..., :n]


@dataclass
class MemoryState:
    """Per-episode memory snapshot, batched over E episodes."""

    memory: np.ndarray  # (E, N, W)
    usage: np.ndarray  # (E, N)
    read_weights: np.ndarray  # (E, R, N)
    write_weights: np.ndarray  # (E, R, N)
    lu_index: np.ndarray  # (E, R) slot each head would write to next
    reads: np.ndarray  # (E, R, W) previous read vectors
    h: np.ndarray  # (E, H)
    c: np.ndarray  # (E, H)

    @classmethod
    def initial(cls, E: int, cfg: MannConfig) -> "MemoryState":
        N, W, R, H = cfg.slots, cfg.width, cfg.heads, cfg.controller_size
        usage = np.zeros((E, N))
        return cls(
            memory=np.zeros((E, N, W)),
            usage=usage,
            read_weights=np.full((E, R, N), 1.0 / N),
            write_weights=np.zeros((E, R, N)),
            lu_index=least_used(usage, R),
            reads=np.zeros((E, R, W)),
            h=np.zeros((E, H)),
            c=np.zeros((E, H)),
        )

    def copy(self) -> "MemoryState":
        return MemoryState(**{k: v.copy() for k, v in self.__dict__.items()})

    @property
    def lu_mask(self):
        mask = np.zeros_like(self.usage)
        np.put_along_axis(mask, self.lu_index, 1.0, axis=-1)
        return mask


def lrua_write(state: MemoryState, keys, alpha_logits, gamma: float):
    """Least-recently-used-access write followed by a cosine read.

    keys (E, R, W); alpha_logits (E, R). Head r writes with
    w_w = s(a) w_r_prev + (1 - s(a)) onehot(lu_r), where lu_r is the r-th least
    used slot; those slots are cleared first. Reads then use the same keys on
    the updated memory, and usage decays by ``gamma`` before adding this
    step's read and write weights.
    """
    E, R, _ = keys.shape
    N = state.memory.shape[1]
    gate = sigmoid(alpha_logits)
    lu_onehot = np.zeros((E, R, N))
    np.put_along_axis(lu_onehot, state.lu_index[..., None], 1.0, axis=-1)
    w_w = gate[..., None] * state.read_weights + (1 - gate[..., None]) * lu_onehot
    keep = 1.0 - state.lu_mask
    memory = state.memory * keep[..., None] + np.einsum("ern,erw->enw", w_w, keys)
    sim, sim_aux = cosine_similarity(keys, memory[:, None])
    w_r = softmax(sim, axis=-1)
    reads = np.einsum("ern,enw->erw", w_r, memory)
    usage = gamma * state.usage + w_r.sum(axis=1) + w_w.sum(axis=1)
    new = MemoryState(memory, usage, w_r, w_w, least_used(usage, R), reads, state.h, state.c)
    aux = (gate, lu_onehot, keep, sim, sim_aux)
    return new, aux


# ---------------------------------------------------------------------------
# full network

def init_mann(cfg: MannConfig, rng: RngStream):
    params = OrderedDict()
    if cfg.preprocessor == "rn":
        init_rn(cfg.rn_spec, rng.split(1), params, zero_readout=False)
    else:
        init_mlp(cfg.mlp_spec, rng.split(1), "m", params)
    init_lstm(cfg.controller_input, cfg.controller_size, rng.split(2), params)
    H, R, W = cfg.controller_size, cfg.heads, cfg.width
    r = rng.split(3)
    for k in range(R):
        params[f"head{k}.Wk"] = glorot_uniform(H, W, r)
        params[f"head{k}.bk"] = np.zeros(W)
        params[f"head{k}.Wa"] = glorot_uniform(H, 1, r)
        params[f"head{k}.ba"] = np.zeros(1)
    params["out.W"] = glorot_uniform(H + R * W, cfg.n_labels, rng.split(4))
    params["out.b"] = np.zeros(cfg.n_labels)
    return params


def preprocess(scenes, params, cfg: MannConfig):
    """Features for a stack of scenes (S, 16, 10) -> (S, feature_dim)."""
    if cfg.preprocessor == "rn":
        return rn_forward(scenes, params, cfg.rn_spec)
    return mlp_forward(scenes.reshape(len(scenes), -1), params, "m", cfg.mlp_spec.n_layers)


def mann_forward(scenes, input_labels, params, cfg: MannConfig, state: MemoryState | None = None):
    """Run E episodes of T steps.

    scenes (E, T, 16, 10); input_labels (E, T, n_labels). Returns
    (logits (E, T, n_labels), final state, cache). ``state`` resumes a
    previous call.
    """
    E, T = scenes.shape[:2]
    if input_labels.shape != (E, T, cfg.n_labels):
        raise DimensionError(f"input labels {input_labels.shape} vs expected {(E, T, cfg.n_labels)}")
    feats, pre_cache = preprocess(scenes.reshape((E * T,) + scenes.shape[2:]), params, cfg)
    if feats.shape[-1] != cfg.feature_dim:
        raise DimensionError(f"pre-processor emits {feats.shape[-1]} features, config says {cfg.feature_dim}")
    feats = feats.reshape(E, T, -1)
    state = MemoryState.initial(E, cfg) if state is None else state.copy()
    R = cfg.heads
    logits = np.empty((E, T, cfg.n_labels))
    steps = []
    for t in range(T):
        prev = state
        x = np.concatenate([feats[:, t], input_labels[:, t], prev.reads.reshape(E, -1)], axis=-1)
        h, (h, c), lcache = lstm_step(x, (prev.h, prev.c), params)
        keys = np.stack([np.tanh(h @ params[f"head{k}.Wk"] + params[f"head{k}.bk"]) for k in range(R)], axis=1)
        alpha = np.stack([(h @ params[f"head{k}.Wa"] + params[f"head{k}.ba"])[:, 0] for k in range(R)], axis=1)
        state, aux = lrua_write(prev, keys, alpha, cfg.gamma)
        state.h, state.c = h, c
        out_in = np.concatenate([h, state.reads.reshape(E, -1)], axis=-1)
        logits[:, t] = out_in @ params["out.W"] + params["out.b"]
        steps.append((prev, state, lcache, keys, aux, out_in))
    return logits, state, (pre_cache, steps, E, T)


def mann_backward(cache, dlogits, params, cfg: MannConfig):
    """Backprop through time. dlogits (E, T, n_labels). Returns param grads."""
    pre_cache, steps, E, T = cache
    grads = OrderedDict((k, np.zeros_like(v)) for k, v in params.items())
    R, W = cfg.heads, cfg.width
    d_feats = np.zeros((E, T, cfg.feature_dim))
    dh_next = np.zeros((E, cfg.controller_size))
    dc_next = np.zeros((E, cfg.controller_size))
    d_reads_next = np.zeros((E, R, W))  # from the next step's controller input
    dM_next = np.zeros((E, cfg.slots, W))  # into this step's post-write memory
    dwr_next = np.zeros((E, R, cfg.slots))  # into this step's read weights via next write
    H = cfg.controller_size
    for t in reversed(range(T)):
        prev, st, lcache, keys, aux, out_in = steps[t]
        gate, lu_onehot, keep, sim, (dots, kn, mn) = aux
        mn = mn[:, 0]  # (E, N)
        dl = dlogits[:, t]
        grads["out.W"] += out_in.T @ dl
        grads["out.b"] += dl.sum(axis=0)
        d_out_in = dl @ params["out.W"].T
        dh = d_out_in[:, :H] + dh_next
        d_reads = d_out_in[:, H:].reshape(E, R, W) + d_reads_next
        M = st.memory
        w_r = st.read_weights
        # reads = w_r @ M
        dw_r = np.einsum("erw,enw->ern", d_reads, M) + dwr_next
        dM = np.einsum("ern,erw->enw", w_r, d_reads) + dM_next
        # w_r = softmax(sim)
        dsim = w_r * (dw_r - (dw_r * w_r).sum(axis=-1, keepdims=True))
        # sim = dots / (kn * mn); keys (E,R,W), M (E,N,W)
        denom = kn[..., None] * mn[:, None, :]  # (E,R,N)
        k_act = (np.linalg.norm(keys, axis=-1) > NORM_FLOOR)[..., None]  # (E,R,1)
        m_act = (np.linalg.norm(M, axis=-1) > NORM_FLOOR)[:, None, :]  # (E,1,N)
        a = dsim / denom
        dkeys = np.einsum("ern,enw->erw", a, M)
        dkeys -= k_act * keys * ((a * dots).sum(axis=-1) / kn**2)[..., None]
        dM += np.einsum("ern,erw->enw", a, keys)
        dM -= M * (np.where(m_act, a * dots, 0.0).sum(axis=1) / mn**2)[..., None] * m_act[:, 0, :, None]
        # memory = prev.memory * keep + w_w^T keys
        w_w = st.write_weights
        dw_w = np.einsum("enw,erw->ern", dM, keys)
        dkeys += np.einsum("ern,enw->erw", w_w, dM)
        dM_prev = dM * keep[..., None]
        # w_w = gate * prev.w_r + (1 - gate) * lu
        dgate = (dw_w * (prev.read_weights - lu_onehot)).sum(axis=-1)
        dwr_prev = gate[..., None] * dw_w
        dalpha = dgate * gate * (1 - gate)
        # keys = tanh(h Wk + bk); alpha = h Wa + ba
        dkpre = dkeys * (1 - keys * keys)
        for k in range(R):
            grads[f"head{k}.Wk"] += st.h.T @ dkpre[:, k]
            grads[f"head{k}.bk"] += dkpre[:, k].sum(axis=0)
            grads[f"head{k}.Wa"] += st.h.T @ dalpha[:, k:k + 1]
            grads[f"head{k}.ba"] += dalpha[:, k].sum(keepdims=True)
            dh = dh + dkpre[:, k] @ params[f"head{k}.Wk"].T + dalpha[:, k:k + 1] @ params[f"head{k}.Wa"].T
        dx, dh_next, dc_next = lstm_step_backward(lcache, dh, dc_next, params, grads)
        F, L = cfg.feature_dim, cfg.n_labels
        d_feats[:, t] = dx[:, :F]
        d_reads_next = dx[:, F + L:].reshape(E, R, W)
        dM_next = dM_prev
        dwr_next = dwr_prev
    d_feats = d_feats.reshape(E * T, -1)
    if cfg.preprocessor == "rn":
        rn_backward(pre_cache, d_feats, params, cfg.rn_spec, grads, need_input_grad=False)
    else:
        mlp_backward(pre_cache, d_feats, params, grads, need_input_grad=False)
    return grads


def episode_loss(logits, targets):
    """Softmax cross entropy summed over steps, averaged over episodes.

    Returns (loss, dloss/dlogits).
    """
    E, T, L = logits.shape
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    onehot = np.eye(L)[targets]
    loss = -(onehot * logp).sum() / E
    return float(loss), (np.exp(logp) - onehot) / E


def instance_accuracy(predictions, episodes, max_instance: int = 10):
    """Accuracy per within-episode occurrence index k = 1..max_instance.

    ``predictions`` is (E, T) label ids aligned with the episodes. Entries
    with no samples at some k are NaN.
    """
    correct = np.zeros(max_instance)
    total = np.zeros(max_instance)
    for pred, ep in zip(predictions, episodes):
        pred = np.asarray(pred)
        if len(pred) != len(ep):
            raise DimensionError("predictions and episode differ in length")
        for k in range(1, max_instance + 1):
            sel = ep.instance == k
            total[k - 1] += sel.sum()
            correct[k - 1] += (pred[sel] == ep.targets[sel]).sum()
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(total > 0, correct / np.maximum(total, 1), np.nan)


def perfect_memory_predictions(episode: Episode, rng: RngStream):
    """Oracle: guess at random on a class's first sight, then repeat its label."""
    known = {}
    out = np.empty(len(episode), dtype=int)
    for t in range(len(episode)):
        cid = int(episode.class_ids[t])
        out[t] = known[cid] if cid in known else int(rng.integers(episode.n_labels))
        # the true label arrives on the next step's input
        known[cid] = int(episode.targets[t])
    return out


def mann_pattern(cache) -> bytes:
    """Discrete state of a forward pass (pre-processor ReLU masks and
    least-used slot choices), used to skip gradcheck probes that cross it."""
    pre_cache, steps, _, _ = cache
    lu = [prev.lu_index.astype(np.int64).tobytes() for prev, *_ in steps]
    return relu_pattern(pre_cache) + b"".join(lu)
