import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from relnet.mann import (Episode, MannConfig, MemoryState, build_episode, cosine_read, episode_dump,
                         episode_loss, init_lstm, init_mann, instance_accuracy, lrua_write, lstm_step,
                         lstm_step_backward, mann_backward, mann_forward, mann_pattern, perfect_memory_predictions,
                         stack_episodes)
from relnet.numerics import ParameterError, RngStream, finite_diff_gradcheck
from relnet.scenegen import build_class_pool

TINY = MannConfig(controller_size=8, slots=4, width=5, heads=2, feature_dim=12, pre_hidden=(8, 8), g_out=8)


@pytest.fixture(scope="module")
def pool():
    return build_class_pool(20, RngStream(5, 1), "position")


def _episodes(pool, n, seed, **kw):
    r = RngStream(seed, 2)
    return [build_episode(pool, r.split(i), **kw) for i in range(n)]


# ---------------------------------------------------------------------------
# episodes

def test_episode_structure(pool):
    ep = build_episode(pool, RngStream(0), n_classes=5, length=50)
    assert ep.scenes.shape == (50, 16, 10)
    assert len(set(ep.class_ids.tolist())) <= 5
    # one label per class, distinct labels across classes
    mapping = {}
    for c, l in zip(ep.class_ids, ep.targets):
        assert mapping.setdefault(int(c), int(l)) == int(l)
    assert len(set(mapping.values())) == len(mapping)
    # time-offset label input
    assert not ep.input_labels[0].any()
    np.testing.assert_array_equal(ep.input_labels[1:].argmax(1), ep.targets[:-1])
    # instance counter
    for t in range(50):
        assert ep.instance[t] == (ep.class_ids[: t + 1] == ep.class_ids[t]).sum()


def test_labels_reshuffle_between_episodes(pool):
    """A fixed class keeps its label across episode pairs only about 1 time in 5."""
    agree = trials = 0
    for ep_a, ep_b in zip(_episodes(pool, 100, 1), _episodes(pool, 100, 2)):
        la = dict(zip(ep_a.class_ids.tolist(), ep_a.targets.tolist()))
        lb = dict(zip(ep_b.class_ids.tolist(), ep_b.targets.tolist()))
        for c in set(la) & set(lb):
            agree += la[c] == lb[c]
            trials += 1
    assert trials > 50
    assert abs(agree / trials - 0.2) < 0.12


def test_episode_errors(pool):
    with pytest.raises(ParameterError):
        build_episode(pool[:3], RngStream(0), n_classes=5)
    with pytest.raises(ParameterError):
        build_episode(pool, RngStream(0), n_classes=6, n_labels=5)


def test_episode_dump(tmp_path, pool):
    ep = build_episode(pool, RngStream(3), length=7)
    episode_dump(ep, tmp_path / "ep.jsonl")
    lines = (tmp_path / "ep.jsonl").read_text().splitlines()
    assert len(lines) == 7
    assert '"target_label"' in lines[0]


# ---------------------------------------------------------------------------
# LSTM

def test_lstm_zero_state_zero_weights():
    p = init_lstm(3, 4, RngStream(0))
    for k in p:
        p[k][:] = 0.0
    h, (h2, c), _ = lstm_step(np.ones((2, 3)), (np.zeros((2, 4)), np.zeros((2, 4))), p)
    # candidate tanh(0) = 0, so the cell stays empty
    assert not h.any() and not c.any()


def test_lstm_forget_gate_keeps_cell():
    p = init_lstm(3, 4, RngStream(0))
    for k in p:
        p[k][:] = 0.0
    H = 4
    b = p["lstm.b"]
    b[:H] = -50.0  # input gate shut
    b[H:2 * H] = 50.0  # forget gate open
    c0 = np.array([[0.3, -0.2, 0.9, 0.0]])
    _, (_, c), _ = lstm_step(np.zeros((1, 3)), (np.zeros((1, H)), c0), p)
    np.testing.assert_allclose(c, c0, atol=1e-12)


def test_lstm_three_step_gradcheck():
    rng = RngStream(11)
    p = init_lstm(3, 4, rng)
    p["lstm.b"] += rng.normal(0, 0.1, size=p["lstm.b"].shape)
    xs = rng.normal(size=(3, 2, 3))
    proj = rng.normal(size=(4,))

    def fn():
        state = (np.zeros((2, 4)), np.zeros((2, 4)))
        caches = []
        for x in xs:
            h, state, cache = lstm_step(x, state, p)
            caches.append(cache)
        loss = float((h @ proj).sum())
        grads = {}
        dh, dc = np.tile(proj, (2, 1)), np.zeros((2, 4))
        for cache in reversed(caches):
            _, dh, dc = lstm_step_backward(cache, dh, dc, p, grads)
        return loss, grads

    assert finite_diff_gradcheck(fn, p, 60, eps=1e-6) < 1e-6


# ---------------------------------------------------------------------------
# addressing and writing

def test_cosine_read_uniform_on_empty_memory():
    w, r = cosine_read(np.ones(5), 1.0, np.zeros((4, 5)))
    np.testing.assert_allclose(w, 0.25)
    assert not r.any()


def test_cosine_read_sharp_key():
    M = np.eye(4, 5)
    w, r = cosine_read(M[2], 100.0, M)
    assert w[2] > 0.99
    np.testing.assert_allclose(r, M[2], atol=1e-2)


def _state(E=1, cfg=TINY, seed=0):
    s = MemoryState.initial(E, cfg)
    r = RngStream(seed)
    s.memory = r.normal(size=s.memory.shape)
    s.usage = r.uniform(size=s.usage.shape)
    s.read_weights = r.uniform(size=s.read_weights.shape)
    s.read_weights /= s.read_weights.sum(-1, keepdims=True)
    s.lu_index = np.argsort(s.usage, axis=-1)[:, : cfg.heads]
    return s


def test_lrua_gamma_zero_usage_is_this_step_only():
    s = _state()
    keys = RngStream(1).normal(size=(1, TINY.heads, TINY.width))
    new, _ = lrua_write(s, keys, np.zeros((1, TINY.heads)), gamma=0.0)
    np.testing.assert_allclose(new.usage, new.read_weights.sum(1) + new.write_weights.sum(1))


def test_lrua_gate_saturation():
    s = _state()
    keys = RngStream(1).normal(size=(1, TINY.heads, TINY.width))
    shut, _ = lrua_write(s, keys, np.full((1, TINY.heads), -60.0), 0.95)
    for r in range(TINY.heads):
        expected = np.zeros(TINY.slots)
        expected[s.lu_index[0, r]] = 1.0
        np.testing.assert_allclose(shut.write_weights[0, r], expected, atol=1e-12)
    opened, _ = lrua_write(s, keys, np.full((1, TINY.heads), 60.0), 0.95)
    np.testing.assert_allclose(opened.write_weights, s.read_weights, atol=1e-12)


def test_lrua_clears_least_used_then_writes_key():
    s = _state()
    keys = RngStream(1).normal(size=(1, TINY.heads, TINY.width))
    new, _ = lrua_write(s, keys, np.full((1, TINY.heads), -60.0), 0.95)
    for r in range(TINY.heads):
        np.testing.assert_allclose(new.memory[0, s.lu_index[0, r]], keys[0, r], atol=1e-12)


@given(st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_lrua_written_slot_usage_rises(seed):
    s = _state(seed=seed)
    keys = RngStream(seed, 1).normal(size=(1, TINY.heads, TINY.width))
    new, _ = lrua_write(s, keys, np.full((1, TINY.heads), -60.0), 0.95)
    for r in range(TINY.heads):
        slot = s.lu_index[0, r]
        assert new.usage[0, slot] > 0.95 * s.usage[0, slot] + 0.99


# ---------------------------------------------------------------------------
# full network

@pytest.fixture(scope="module")
def tiny_batch(pool):
    eps = _episodes(pool, 2, 7, n_classes=3, length=6)
    return eps, stack_episodes(eps)


def test_tiny_mann_gradcheck(tiny_batch):
    _, (S, L, Y) = tiny_batch
    rng = RngStream(4)
    p = init_mann(TINY, rng)
    for k in p:
        if ".b" in k:
            p[k] += rng.normal(0, 0.1, size=p[k].shape)

    last = {}

    def fn():
        logits, _, last["cache"] = mann_forward(S, L, p, TINY)
        loss, dl = episode_loss(logits, Y)
        return loss, mann_backward(last["cache"], dl, p, TINY)

    # the loss sums 6 steps (about 10 nats), so gradients below 1e-6 are roundoff-dominated
    err = finite_diff_gradcheck(fn, p, 100, eps=1e-5, rng=RngStream(9),
                                pattern_fn=lambda: mann_pattern(last["cache"]), floor=1e-6)
    assert err < 1e-3


def test_mlp_preprocessor_same_shapes(tiny_batch):
    _, (S, L, Y) = tiny_batch
    cfg = MannConfig(**{**TINY.__dict__, "preprocessor": "mlp"})
    p = init_mann(cfg, RngStream(0))
    logits, _, cache = mann_forward(S, L, p, cfg)
    assert logits.shape == (2, 6, 5)
    grads = mann_backward(cache, episode_loss(logits, Y)[1], p, cfg)
    assert set(grads) == set(p)
    assert all(grads[k].shape == p[k].shape for k in p)


def test_resume_from_snapshot_matches_full_run(tiny_batch):
    _, (S, L, _) = tiny_batch
    p = init_mann(TINY, RngStream(2))
    full, _, _ = mann_forward(S, L, p, TINY)
    first, state, _ = mann_forward(S[:, :3], L[:, :3], p, TINY)
    second, _, _ = mann_forward(S[:, 3:], L[:, 3:], p, TINY, state=state)
    np.testing.assert_array_equal(np.concatenate([first, second], axis=1), full)


def test_weights_are_distributions_every_step(pool):
    cfg = MannConfig()
    eps = _episodes(pool, 3, 8, length=30)
    S, L, _ = stack_episodes(eps)
    p = init_mann(cfg, RngStream(3))
    _, _, (_, steps, _, _) = mann_forward(S, L, p, cfg)
    for _, state, *_ in steps:
        for w in (state.read_weights, state.write_weights):
            assert (w >= 0).all()
            np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-9)


def test_label_symmetry(pool):
    """Renaming labels in the episode and in the network's label wiring leaves the loss unchanged."""
    cfg = MannConfig(controller_size=16, slots=8, width=6, heads=2, feature_dim=20, pre_hidden=(16, 16), g_out=16)
    ep = build_episode(pool, RngStream(21), length=20)
    perm = np.array([3, 0, 4, 1, 2])
    p = init_mann(cfg, RngStream(6))
    q = {k: v.copy() for k, v in p.items()}
    F = cfg.feature_dim
    # label input rows live right after the features in the controller input
    q["lstm.Wx"][F + perm] = p["lstm.Wx"][F:F + cfg.n_labels]
    q["out.W"][:, perm] = p["out.W"]
    q["out.b"][perm] = p["out.b"]

    def loss(params, e):
        S, L, Y = stack_episodes([e])
        return episode_loss(mann_forward(S, L, params, cfg)[0], Y)[0]

    assert loss(q, ep.relabel(perm)) == pytest.approx(loss(p, ep), rel=1e-12)


def test_untrained_accuracy_is_chance(pool):
    cfg = MannConfig(controller_size=16, slots=8, width=6, heads=2, feature_dim=20, pre_hidden=(16, 16), g_out=16)
    eps = _episodes(pool, 200, 13, length=30)
    S, L, Y = stack_episodes(eps)
    logits, _, _ = mann_forward(S, L, init_mann(cfg, RngStream(1)), cfg)
    assert abs((logits.argmax(-1) == Y).mean() - 0.2) < 0.05


# ---------------------------------------------------------------------------
# instance accuracy

def test_instance_accuracy_oracle(pool):
    eps = _episodes(pool, 300, 17)
    r = RngStream(0)
    acc = instance_accuracy([perfect_memory_predictions(e, r) for e in eps], eps)
    assert abs(acc[0] - 0.2) < 0.05
    np.testing.assert_array_equal(acc[1:], 1.0)


def test_instance_accuracy_random(pool):
    eps = _episodes(pool, 500, 19)
    r = RngStream(1)
    acc = instance_accuracy([r.integers(5, size=len(e)) for e in eps], eps)
    assert np.all(np.abs(acc - 0.2) < 0.03)


def test_instance_accuracy_handcrafted():
    ep = Episode(np.zeros((4, 16, 10)), np.array([1, 1, 2, 1]), np.array([7, 7, 8, 7]), np.array([1, 2, 1, 3]))
    acc = instance_accuracy([np.array([0, 1, 2, 0])], [ep], max_instance=4)
    np.testing.assert_array_equal(acc[:3], [0.5, 1.0, 0.0])
    assert np.isnan(acc[3])
