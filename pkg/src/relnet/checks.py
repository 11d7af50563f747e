"""Reference gradient checks for every trainable model in the package.

Each setup uses small random inputs, jittered biases (so no ReLU sits exactly
on its kink) and a shrunken readout (so the logits are not saturated).
"""
from __future__ import annotations

import numpy as np

from . import mann as mn
from .models import (MlpSpec, RnSpec, disentangle_backward, disentangle_forward, init_disentangle, init_mlp,
                     init_rn, mlp_backward, mlp_forward, relu_pattern, rn_backward, rn_forward)
from .numerics import RngStream, finite_diff_gradcheck, sigmoid_bce
from .scenegen import build_class_pool, generate_scene, make_permutation

TOLERANCE = {"mlp": 1e-6, "rn": 1e-4, "linear_rn": 1e-4, "mann": 1e-3}
MODELS = tuple(TOLERANCE)


def _jitter(params, rng, scale=0.1):
    for k, v in params.items():
        if ".b" in k:
            v += rng.normal(0.0, scale, size=v.shape)


def _scene_and_target(rng):
    pool = build_class_pool(1, rng.split(0), "position")
    D = generate_scene(pool[0], rng.split(1))
    return D, pool[0].position_graph.ravel().astype(float)


def gradcheck_model(model: str, probes: int = 100, eps: float = 1e-5, seed: int = 0) -> float:
    """Max relative error of the analytic gradient of ``model``'s loss."""
    rng = RngStream(seed, 0x6C)
    last = {}
    if model == "mlp":
        p = init_mlp(MlpSpec((160, 32, 32, 16)), rng.split(1), "m")
        _jitter(p, rng.split(2))
        D, t = _scene_and_target(rng.split(3))
        x = D.reshape(1, -1)

        def fn():
            y, last["c"] = mlp_forward(x, p, "m", 3)
            loss, g = sigmoid_bce(y, t[None])
            return loss, mlp_backward(last["c"], g, p)[0]

        return finite_diff_gradcheck(fn, p, probes, eps, rng.split(4), lambda: relu_pattern(last["c"]))

    if model in ("rn", "linear_rn"):
        spec = RnSpec(10, (32, 32), 32, 16)
        p = init_rn(spec, rng.split(1), zero_readout=False)
        p["f.W2"] *= 0.2
        _jitter(p, rng.split(2))
        D, t = _scene_and_target(rng.split(3))
        if model == "rn":
            def fn():
                y, last["c"] = rn_forward(D, p, spec)
                loss, g = sigmoid_bce(y, t)
                return loss, rn_backward(last["c"], g, p, spec)[0]
        else:
            init_disentangle(160, rng.split(5), p)
            p["U"] *= 0.3
            p["U"] += np.eye(160)
            v = D.ravel()[make_permutation(seed).perm]

            def fn():
                X, _ = disentangle_forward(v, p["U"])
                y, last["c"] = rn_forward(X, p, spec)
                loss, g = sigmoid_bce(y, t)
                grads, dX = rn_backward(last["c"], g, p, spec)
                grads["U"] = disentangle_backward(v, dX, p["U"])[0]
                return loss, grads

        return finite_diff_gradcheck(fn, p, probes, eps, rng.split(4), lambda: relu_pattern(last["c"]))

    if model == "mann":
        cfg = mn.MannConfig(controller_size=8, slots=4, width=5, heads=2, feature_dim=12, pre_hidden=(8, 8), g_out=8)
        pool = build_class_pool(20, rng.split(1), "position")
        eps_ = [mn.build_episode(pool, rng.split(2).split(i), n_classes=3, length=6) for i in range(2)]
        S, L, Y = mn.stack_episodes(eps_)
        p = mn.init_mann(cfg, rng.split(3))
        _jitter(p, rng.split(4))

        def fn():
            logits, _, last["c"] = mn.mann_forward(S, L, p, cfg)
            loss, dl = mn.episode_loss(logits, Y)
            return loss, mn.mann_backward(last["c"], dl, p, cfg)

        # the loss sums 12 step terms, so gradients below 1e-6 sit in finite-difference roundoff
        return finite_diff_gradcheck(fn, p, probes, eps, rng.split(5), lambda: mn.mann_pattern(last["c"]), floor=1e-6)

    raise ValueError(f"unknown model {model!r}; choose from {MODELS}")
