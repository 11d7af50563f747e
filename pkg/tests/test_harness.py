import json
import math

import numpy as np
import pytest

from relnet import harness as hz
from relnet.cli import main
from relnet.models import load_checkpoint
from relnet.numerics import RngStream
from relnet.scenegen import build_class_pool, make_dataset, make_permutation

SMALL = dict(class_count=3, samples_per_class=40, iterations=30, log_every=10)


# ---------------------------------------------------------------------------
# configuration

def test_config_text_round_trip():
    cfg = hz.TrainConfig(task="one_hot", hidden=(32, 16), learning_rate=3e-4, wall_clock=True)
    assert hz.parse_config_text(hz.config_text(cfg)) == cfg


def test_config_parsing_details():
    cfg = hz.parse_config_text("# comment\npreset = full_position\nhidden = {128,128}  # trailing\nseed=7\n")
    assert cfg.hidden == (128, 128)
    assert cfg.samples_per_class == 5000 and cfg.seed == 7


@pytest.mark.parametrize("text, fragment", [
    ("learning_rat = 0.1", "line 1: unknown key"),
    ("seed = 1\nbatch_size = many", "line 2: bad value for batch_size"),
    ("task adjacency", "expected key = value"),
    ("test_fraction = 0.2", "test_fraction"),
    ("preset = huge", "unknown preset"),
    ("task = entangled", "linear_rn"),
    ("iterations = -1", "non-negative"),
])
def test_config_errors(text, fragment):
    with pytest.raises(hz.ConfigError, match=fragment):
        hz.parse_config_text(text)


# ---------------------------------------------------------------------------
# splits

@pytest.fixture(scope="module")
def ds100():
    pool = build_class_pool(4, RngStream(0, 1), "position")
    return make_dataset(pool, 100, RngStream(0, 2))


def test_split_counts_per_class(ds100):
    train, test = hz.split_dataset(ds100, 0.05, RngStream(1))
    assert np.bincount(test.labels).tolist() == [5] * 4
    assert np.bincount(train.labels).tolist() == [95] * 4


def test_split_is_partition(ds100):
    train, test = hz.split_dataset(ds100, 0.05, RngStream(1))
    key = lambda s: s.tobytes()  # noqa: E731
    both = sorted(map(key, np.concatenate([train.scenes, test.scenes])))
    assert both == sorted(map(key, ds100.scenes))


def test_split_deterministic(ds100):
    a = hz.split_dataset(ds100, 0.03, RngStream(5))[1]
    b = hz.split_dataset(ds100, 0.03, RngStream(5))[1]
    np.testing.assert_array_equal(a.scenes, b.scenes)


def test_split_errors(ds100):
    with pytest.raises(hz.ConfigError):
        hz.split_dataset(ds100, 0.5, RngStream(1))
    with pytest.raises(hz.ConfigError, match="needs at least"):
        hz.split_dataset(ds100.subset(np.arange(0, 400, 10)), 0.05, RngStream(1))


# ---------------------------------------------------------------------------
# training

def test_iteration_zero_losses():
    adj = hz.train_scene_classifier(hz.TrainConfig(**{**SMALL, "iterations": 0}))
    assert adj.history[0].test_loss == pytest.approx(math.log(2), abs=1e-12)
    hot = hz.train_scene_classifier(hz.TrainConfig(task="one_hot", **{**SMALL, "iterations": 0}))
    assert hot.history[0].train_loss == pytest.approx(math.log(3), abs=1e-12)
    mlp = hz.train_scene_classifier(hz.TrainConfig(model="mlp", **{**SMALL, "iterations": 0}))
    assert mlp.history[0].test_loss == pytest.approx(math.log(2), abs=1e-12)


def test_metrics_are_byte_identical(tmp_path):
    cfg = hz.TrainConfig(**SMALL)
    hz.train_scene_classifier(cfg, tmp_path / "a")
    hz.train_scene_classifier(cfg, tmp_path / "b")
    text = (tmp_path / "a" / "metrics.csv").read_bytes()
    assert text == (tmp_path / "b" / "metrics.csv").read_bytes()
    assert text.splitlines()[0] == b"iteration,train_loss,test_loss,test_accuracy,wall_ms"
    assert [r.iteration for r in hz.read_metrics(tmp_path / "a" / "metrics.csv")] == [0, 10, 20, 30]


def test_evaluation_has_no_side_effects():
    res = hz.train_scene_classifier(hz.TrainConfig(**SMALL))
    before = {k: v.copy() for k, v in res.model.params.items()}
    assert hz.evaluate(res.model, res.test) == hz.evaluate(res.model, res.test)
    assert all(np.array_equal(before[k], v) for k, v in res.model.params.items())


def test_identity_entangling_matches_plain_rn():
    rn = hz.build_model(hz.TrainConfig(), 16, RngStream(3))
    lin = hz.build_model(hz.TrainConfig(task="entangled", model="linear_rn", entangle=False, u_init="identity"),
                         16, RngStream(3))
    readout = RngStream(4).normal(0, 0.1, size=rn.params["f.W2"].shape)
    rn.params["f.W2"][:] = readout
    lin.params["f.W2"][:] = readout
    scenes = make_dataset(build_class_pool(2, RngStream(0), "position"), 5, RngStream(1)).scenes
    np.testing.assert_array_equal(lin.forward(scenes)[0], rn.forward(scenes)[0])


def test_overfit_two_classes():
    """Capacity sanity: a small RN drives the training loss of 40 scenes near zero."""
    cfg = hz.TrainConfig(class_count=2, samples_per_class=20, hidden=(32, 32), g_out=32, iterations=5000,
                         log_every=5000, batch_size=16)
    assert hz.train_scene_classifier(cfg).final.train_loss < 0.01


def test_divergence_keeps_finite_checkpoint(tmp_path):
    cfg = hz.TrainConfig(learning_rate=1e300, **SMALL)
    with pytest.raises(hz.DivergenceError) as info:
        hz.train_scene_classifier(cfg, tmp_path)
    params, header = load_checkpoint(info.value.checkpoint)
    assert header["iteration"] == 0
    assert all(np.isfinite(v).all() for v in params.values())


def test_metrics_writer_contract(tmp_path):
    w = hz.MetricsWriter(tmp_path / "m.csv")
    w.write(hz.MetricsRecord(0, 1.0, 1.0, None, 0))
    with pytest.raises(ValueError):
        w.write(hz.MetricsRecord(0, 1.0, 1.0, None, 0))
    with pytest.raises(ValueError):
        w.write(hz.MetricsRecord(5, float("nan"), 1.0, None, 0))
    w.close()
    assert (tmp_path / "m.csv").read_text() == "iteration,train_loss,test_loss,test_accuracy,wall_ms\n0,1,1,,0\n"


# ---------------------------------------------------------------------------
# unseen classes and |UB|

def test_eval_unseen_contract():
    res = hz.train_scene_classifier(hz.TrainConfig(task="unseen_gen", unseen_classes=3, **SMALL))
    assert len(res.unseen_classes) == 3
    out = hz.eval_unseen(res.model, res.train.classes, res.unseen_classes, 10, RngStream(8))
    direct = make_dataset(res.unseen_classes, 10, RngStream(8))
    assert out["loss"] == hz.evaluate(res.model, direct)[0]
    with pytest.raises(hz.ConfigError, match="also used for training"):
        hz.eval_unseen(res.model, res.train.classes, res.train.classes[:1], 10, RngStream(8))


def test_ub_analysis():
    B = make_permutation(3)
    score, mass = hz.run_ub_analysis({"U": B.matrix().T}, B)
    assert score == 1.0
    assert sorted((mass > 0).sum(axis=0).tolist()) == [1] * 16
    assert ((mass > 0).sum(axis=1) == 1).all()
    base, sd = hz.random_ub_baseline(B, 100)
    rnd = hz.build_model(hz.TrainConfig(task="entangled", model="linear_rn", b_seed=3), 16, RngStream(11))
    assert abs(hz.run_ub_analysis(rnd, B)[0] - base) < 3 * sd
    with pytest.raises(hz.ConfigError):
        hz.run_ub_analysis({"g.W0": np.zeros(1)}, B)


# ---------------------------------------------------------------------------
# one-shot

def test_one_shot_pipeline(tmp_path):
    cfg = hz.TrainConfig(task="one_shot", iterations=4, log_every=2, pool_size=20, bank_size=4, eval_episodes=10,
                         episodes_per_batch=2, controller_size=16, slots=8, width=6, hidden=(16, 16), g_out=16,
                         feature_dim=20)
    res = hz.train_one_shot(cfg, tmp_path)
    assert [r.iteration for r in res.history] == [0, 2, 4]
    assert (tmp_path / "instance_accuracy.csv").read_text().startswith("iteration,k1,")
    held = {int(c) for e in res.eval_episodes for c in e.class_ids}
    # 20% of 20 is fewer than one episode needs, so the last 5 pool classes are held out
    assert held == set(range(15, 20))
    acc = hz.oracle_instance_accuracy(res.eval_episodes)
    assert np.all(acc[1:][~np.isnan(acc[1:])] == 1.0)


def test_one_shot_mlp_preprocessor_runs():
    cfg = hz.TrainConfig(task="one_shot", preprocessor="mlp", iterations=1, log_every=1, pool_size=20, bank_size=3,
                         eval_episodes=4, episodes_per_batch=2, controller_size=8, slots=4, width=5,
                         hidden=(8, 8), g_out=8, feature_dim=12)
    assert len(hz.train_one_shot(cfg).history) == 2


# ---------------------------------------------------------------------------
# command line

def _cfg(path, **kw):
    path.write_text("".join(f"{k} = {v}\n" for k, v in kw.items()))
    return str(path)


def test_cli_end_to_end(tmp_path, capsys):
    ds = tmp_path / "ds.jsonl"
    assert main(["gen", "--classes", "3", "--samples", "20", "--relation", "position", "--seed", "1",
                 "--out", str(ds)]) == 0
    cfg = _cfg(tmp_path / "c.txt", class_count=3, samples_per_class=40, iterations=10, log_every=5,
               out_dir=tmp_path / "run")
    assert main(["train", "--config", cfg]) == 0
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(tmp_path / "run" / "checkpoint.jsonl"), "--dataset", str(ds)]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["samples"] == 60 and out["unseen_classes"] is True


def test_cli_exit_codes(tmp_path):
    assert main(["train", "--config", _cfg(tmp_path / "bad.txt", learning_rate="fast")]) == 2
    assert main(["train", "--config", str(tmp_path / "missing.txt")]) == 2
    assert main(["gradcheck", "--model", "rn", "--eps", "0.5"]) == 2
    assert main(["frobnicate"]) == 2
    diverge = _cfg(tmp_path / "d.txt", learning_rate="1e300", class_count=3, samples_per_class=40, iterations=20,
                   out_dir=tmp_path / "d")
    assert main(["train", "--config", diverge]) == 3


def test_cli_gradcheck_and_ub(tmp_path, capsys):
    assert main(["gradcheck", "--model", "mlp", "--probes", "30"]) == 0
    cfg = _cfg(tmp_path / "e.txt", task="entangled", model="linear_rn", class_count=3, samples_per_class=40,
               iterations=5, log_every=5, out_dir=tmp_path / "e")
    assert main(["train", "--config", cfg]) == 0
    capsys.readouterr()
    assert main(["ub", "--checkpoint", str(tmp_path / "e" / "checkpoint.jsonl"), "--b-seed", "1",
                 "--baseline-samples", "20", "--out", str(tmp_path / "ub.json")]) == 0
    assert "score" in json.loads(capsys.readouterr().out)
    assert len(json.loads((tmp_path / "ub.json").read_text())["block_mass"]) == 16
