"""Experiment drivers: configs, dataset splits, training loops, evaluation.

A run is fully described by a :class:`TrainConfig`. All randomness flows
from ``RngStream(config.seed)`` through fixed sub-streams, so two runs with
the same config write byte-identical metrics (wall-clock timing is off by
default for that reason).
"""
from __future__ import annotations

import csv
import dataclasses
import json
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import mann as mn
from .models import (MlpSpec, RnSpec, block_mass, disentangle_backward, disentangle_forward, init_disentangle,
                     init_mlp, init_rn, load_checkpoint, matched_mlp_width, mlp_backward, mlp_forward,
                     param_count, rn_backward, rn_forward, rn_param_count, save_checkpoint, ub_block_score)
from .numerics import AdamState, ParameterError, RngStream, adam_step, glorot_uniform, sigmoid_bce, softmax_xent
from .scenegen import (N_FEATURES, N_OBJECTS, Dataset, GeneratorParams, PermutationMatrix, SceneClass,
                       build_class_pool, dataset_read, entangle, generate_scene, identity_permutation,
                       make_dataset, make_permutation)

TASKS = ("adjacency", "one_hot", "entangled", "unseen_gen", "one_shot")
MODELS = ("rn", "mlp", "linear_rn")
METRICS_HEADER = ["iteration", "train_loss", "test_loss", "test_accuracy", "wall_ms"]


class ConfigError(ValueError):
    """Bad configuration; the CLI maps it to exit code 2."""


class DivergenceError(RuntimeError):
    """Non-finite loss or gradient; the CLI maps it to exit code 3."""

    def __init__(self, iteration: int, checkpoint: str | None):
        super().__init__(f"training diverged at iteration {iteration}; last finite parameters in {checkpoint}")
        self.iteration = iteration
        self.checkpoint = checkpoint


# ---------------------------------------------------------------------------
# configuration

@dataclass
class TrainConfig:
    task: str = "adjacency"
    model: str = "rn"
    relation: str = "position"
    hidden: tuple = (64, 64)
    g_out: int = 64
    mlp_depth: int = 2
    mlp_match: str = "params"  # "params" or "width"
    class_count: int = 5
    samples_per_class: int = 200
    unseen_classes: int = 10
    learning_rate: float = 1e-4
    batch_size: int = 32
    iterations: int = 20000
    seed: int = 0
    test_fraction: float = 0.05
    log_every: int = 100
    train_eval_size: int = 256
    b_seed: int = 1
    u_init: str = "glorot"  # or "identity"
    entangle: bool = True
    dataset: str = ""
    out_dir: str = "runs/default"
    wall_clock: bool = False
    d0: float = 0.06
    sigma_d: float = 0.04
    sigma_c: float = 0.05
    # one-shot settings
    controller_size: int = 64
    slots: int = 32
    width: int = 20
    heads: int = 2
    gamma: float = 0.95
    feature_dim: int = 160
    preprocessor: str = "rn"
    episode_classes: int = 5
    episode_length: int = 30
    episodes_per_batch: int = 16
    pool_size: int = 100
    heldout_fraction: float = 0.2
    bank_size: int = 40
    eval_episodes: int = 200
    memorize: bool = False

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        self.validate()

    def validate(self):
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.model not in MODELS:
            raise ConfigError(f"model must be one of {MODELS}, got {self.model!r}")
        if self.relation not in ("position", "color"):
            raise ConfigError(f"relation must be position or color, got {self.relation!r}")
        if self.mlp_match not in ("params", "width"):
            raise ConfigError(f"mlp_match must be params or width, got {self.mlp_match!r}")
        if self.u_init not in ("glorot", "identity"):
            raise ConfigError(f"u_init must be glorot or identity, got {self.u_init!r}")
        if self.preprocessor not in ("rn", "mlp"):
            raise ConfigError(f"preprocessor must be rn or mlp, got {self.preprocessor!r}")
        counts = ("g_out", "class_count", "samples_per_class", "unseen_classes", "batch_size", "log_every",
                  "train_eval_size", "controller_size", "slots", "width", "heads", "feature_dim",
                  "episode_classes", "episode_length", "episodes_per_batch", "pool_size", "bank_size",
                  "eval_episodes", "mlp_depth")
        for name in counts:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.iterations < 0:
            raise ConfigError("iterations must be non-negative")
        if not self.hidden or min(self.hidden) <= 0:
            raise ConfigError(f"hidden sizes must be positive, got {self.hidden}")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if not 0.02 <= self.test_fraction <= 0.05:
            raise ConfigError(f"test_fraction must lie in [0.02, 0.05], got {self.test_fraction}")
        if not 0.0 < self.heldout_fraction < 1.0:
            raise ConfigError("heldout_fraction must lie in (0, 1)")
        if self.task == "entangled" and self.model != "linear_rn":
            raise ConfigError("the entangled task needs model = linear_rn")
        if self.model == "linear_rn" and self.task not in ("entangled",):
            raise ConfigError("model linear_rn is only used by the entangled task")
        if self.episode_classes > 5:
            raise ConfigError("episodes use 5 labels, so at most 5 classes per episode")
        try:
            self.generator
        except ParameterError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def generator(self) -> GeneratorParams:
        return GeneratorParams(d0=self.d0, sigma_d=self.sigma_d, sigma_c=self.sigma_c)

    @property
    def target_mode(self) -> str:
        return "one_hot" if self.task == "one_hot" else "adjacency"

    @property
    def mann_config(self) -> mn.MannConfig:
        try:
            return mn.MannConfig(controller_size=self.controller_size, slots=self.slots, width=self.width,
                                 heads=self.heads, gamma=self.gamma, feature_dim=self.feature_dim,
                                 preprocessor=self.preprocessor, pre_hidden=self.hidden, g_out=self.g_out)
        except ParameterError as exc:
            raise ConfigError(str(exc)) from exc


# Paper-scale settings. The test suite never runs these; they document the
# full-size experiments and can be loaded with ``preset = <name>``.
PRESETS = {
    "desk_position": {},
    "desk_color": {"relation": "color"},
    "desk_one_hot": {"task": "one_hot"},
    "desk_unseen": {"task": "unseen_gen", "class_count": 60, "unseen_classes": 10},
    "desk_entangled": {"task": "entangled", "model": "linear_rn"},
    "desk_one_shot": {"task": "one_shot", "learning_rate": 1e-3},
    "full_position": {"class_count": 10, "samples_per_class": 5000, "hidden": (200, 200), "g_out": 200,
                       "iterations": 200_000, "batch_size": 100, "learning_rate": 1e-4},
    "full_one_hot": {"task": "one_hot", "class_count": 10, "samples_per_class": 5000, "hidden": (200, 200),
                      "g_out": 200, "iterations": 200_000, "batch_size": 100, "learning_rate": 1e-4},
    "full_unseen": {"task": "unseen_gen", "class_count": 490, "unseen_classes": 10, "samples_per_class": 5000,
                     "hidden": (1000, 1000), "g_out": 1000, "iterations": 200_000, "batch_size": 100,
                     "learning_rate": 1e-4},
    "full_entangled": {"task": "entangled", "model": "linear_rn", "class_count": 10, "samples_per_class": 5000,
                        "hidden": (200, 200), "g_out": 200, "iterations": 200_000, "batch_size": 100,
                        "learning_rate": 1e-4},
    "full_one_shot": {"task": "one_shot", "controller_size": 200, "slots": 128, "width": 40, "heads": 4,
                       "episode_length": 50, "episodes_per_batch": 16, "iterations": 500_000,
                       "learning_rate": 1e-5, "hidden": (200, 200), "g_out": 200, "pool_size": 1000},
}


def _coerce(name: str, raw: str, default):
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw.replace("_", ""))
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        return tuple(int(x) for x in raw.replace("{", "").replace("}", "").split(",") if x.strip())
    return raw


def parse_config_text(text: str) -> TrainConfig:
    """Flat ``key = value`` lines; ``#`` starts a comment. ``preset = name``
    (if present) is applied first and later keys override it."""
    defaults = {f.name: f.default for f in dataclasses.fields(TrainConfig)}
    pairs = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key != "preset" and key not in defaults:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        pairs.append((lineno, key, value))
    values = {}
    for lineno, key, value in pairs:
        if key == "preset":
            if value not in PRESETS:
                raise ConfigError(f"line {lineno}: unknown preset {value!r}")
            values.update(PRESETS[value])
    for lineno, key, value in pairs:
        if key == "preset":
            continue
        try:
            values[key] = _coerce(key, value, defaults[key])
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from exc
    return TrainConfig(**values)


def load_config(path) -> TrainConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text)


def config_text(cfg: TrainConfig) -> str:
    """Inverse of :func:`parse_config_text`."""
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        elif isinstance(v, bool):
            v = str(v).lower()
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# data

def split_dataset(ds: Dataset, test_fraction: float, rng: RngStream):
    """Stratified split: round(count * fraction) test samples from every class."""
    if not 0.02 <= test_fraction <= 0.05:
        raise ConfigError(f"test_fraction must lie in [0.02, 0.05], got {test_fraction}")
    train_idx, test_idx = [], []
    for c in range(len(ds.classes)):
        members = np.flatnonzero(ds.labels == c)
        if len(members) * test_fraction < 1:
            raise ConfigError(f"class {c} has {len(members)} samples; needs at least {int(np.ceil(1 / test_fraction))}")
        n_test = int(round(len(members) * test_fraction))
        order = members[rng.split(c).permutation(len(members))]
        test_idx.append(np.sort(order[:n_test]))
        train_idx.append(np.sort(order[n_test:]))
    return ds.subset(np.concatenate(train_idx)), ds.subset(np.concatenate(test_idx))


def _class_pools(cfg: TrainConfig, rng: RngStream):
    total = cfg.class_count + (cfg.unseen_classes if cfg.task == "unseen_gen" else 0)
    pool = build_class_pool(total, rng, cfg.relation)
    return pool[: cfg.class_count], pool[cfg.class_count:]


def build_datasets(cfg: TrainConfig, rng: RngStream):
    """(train, test, unseen classes) for a scene-classification config."""
    if cfg.dataset:
        ds = dataset_read(cfg.dataset)
        if ds.relation != cfg.relation:
            raise ConfigError(f"dataset relation {ds.relation!r} differs from config {cfg.relation!r}")
        ds.target_mode = cfg.target_mode
        unseen = []
    else:
        seen, unseen = _class_pools(cfg, rng.split(1))
        ds = make_dataset(seen, cfg.samples_per_class, rng.split(2), cfg.target_mode, cfg.relation, cfg.generator)
    train, test = split_dataset(ds, cfg.test_fraction, rng.split(3))
    return train, test, unseen


# ---------------------------------------------------------------------------
# models

class SceneModel:
    """A trainable scene classifier: RN, flat MLP, or permutation + U + RN."""

    def __init__(self, kind: str, params, rn_spec: RnSpec | None = None, mlp_spec: MlpSpec | None = None,
                 B: PermutationMatrix | None = None):
        self.kind = kind
        self.params = params
        self.rn_spec = rn_spec
        self.mlp_spec = mlp_spec
        self.B = B

    def forward(self, scenes):
        if self.kind == "rn":
            return rn_forward(scenes, self.params, self.rn_spec)
        if self.kind == "mlp":
            return mlp_forward(scenes.reshape(len(scenes), -1), self.params, "m", self.mlp_spec.n_layers)
        v = entangle(scenes, self.B)
        X, _ = disentangle_forward(v, self.params["U"], N_OBJECTS, N_FEATURES)
        y, cache = rn_forward(X, self.params, self.rn_spec)
        return y, (v, cache)

    def backward(self, cache, grad_out):
        if self.kind == "rn":
            return rn_backward(cache, grad_out, self.params, self.rn_spec, need_input_grad=False)[0]
        if self.kind == "mlp":
            return mlp_backward(cache, grad_out, self.params, need_input_grad=False)[0]
        v, rn_cache = cache
        grads, dX = rn_backward(rn_cache, grad_out, self.params, self.rn_spec)
        grads["U"] = disentangle_backward(v, dX, self.params["U"])[0]
        return grads

    def header(self) -> dict:
        h = {"model": self.kind, "param_count": param_count(self.params)}
        if self.rn_spec is not None:
            h["rn"] = {"n_features": self.rn_spec.n_features, "hidden": list(self.rn_spec.hidden),
                       "g_out": self.rn_spec.g_out, "out_dim": self.rn_spec.out_dim}
        if self.mlp_spec is not None:
            h["mlp"] = list(self.mlp_spec.layer_sizes)
        if self.B is not None:
            h["permutation"] = self.B.perm.tolist()
        return h

    @classmethod
    def from_header(cls, params, header: dict) -> "SceneModel":
        kind = header.get("model")
        if kind not in MODELS:
            raise ConfigError(f"checkpoint holds unknown model kind {kind!r}")
        rn = header.get("rn")
        rn_spec = RnSpec(rn["n_features"], tuple(rn["hidden"]), rn["g_out"], rn["out_dim"]) if rn else None
        mlp_spec = MlpSpec(tuple(header["mlp"])) if header.get("mlp") else None
        B = PermutationMatrix(np.array(header["permutation"])) if header.get("permutation") else None
        return cls(kind, params, rn_spec, mlp_spec, B)


def rn_spec_for(cfg: TrainConfig, out_dim: int) -> RnSpec:
    return RnSpec(N_FEATURES, cfg.hidden, cfg.g_out, out_dim)


def mlp_spec_for(cfg: TrainConfig, out_dim: int) -> MlpSpec:
    """Flat-input MLP baseline, matched to the RN by parameter count (default) or width."""
    in_dim = N_OBJECTS * N_FEATURES
    if cfg.mlp_match == "width":
        width = max(cfg.hidden)
    else:
        width = matched_mlp_width(rn_param_count(rn_spec_for(cfg, out_dim)), in_dim, out_dim, cfg.mlp_depth)
    return MlpSpec((in_dim, *([width] * cfg.mlp_depth), out_dim))


def build_model(cfg: TrainConfig, out_dim: int, rng: RngStream) -> SceneModel:
    if cfg.model == "mlp":
        spec = mlp_spec_for(cfg, out_dim)
        params = init_mlp(spec, rng, "m")
        params[f"m.W{spec.n_layers - 1}"][:] = 0.0  # zero readout: iteration-0 logits are all zero
        return SceneModel("mlp", params, mlp_spec=spec)
    spec = rn_spec_for(cfg, out_dim)
    params = init_rn(spec, rng)
    if cfg.model == "rn":
        return SceneModel("rn", params, rn_spec=spec)
    B = make_permutation(cfg.b_seed) if cfg.entangle else identity_permutation()
    init_disentangle(N_OBJECTS * N_FEATURES, rng.split(9), params, identity=cfg.u_init == "identity")
    return SceneModel("linear_rn", params, rn_spec=spec, B=B)


def load_model(path) -> tuple[SceneModel, dict]:
    try:
        params, header = load_checkpoint(path)
    except (OSError, ValueError, KeyError, IndexError) as exc:
        raise ConfigError(f"cannot load checkpoint {path}: {exc}") from exc
    return SceneModel.from_header(params, header), header


# ---------------------------------------------------------------------------
# evaluation

def _loss_fn(target_mode: str):
    return softmax_xent if target_mode == "one_hot" else sigmoid_bce


def _accuracy(logits, targets, target_mode: str) -> float:
    if target_mode == "one_hot":
        return float((logits.argmax(-1) == targets.argmax(-1)).mean())
    return float(((logits > 0) == (targets > 0.5)).mean())


def evaluate(model: SceneModel, ds: Dataset, chunk: int = 256):
    """(mean loss, accuracy) with parameters untouched. Accuracy is per-edge
    for adjacency targets and per-scene for one-hot targets."""
    T = ds.targets()
    lf = _loss_fn(ds.target_mode)
    total, logits = 0.0, []
    for s in range(0, len(ds), chunk):
        y, _ = model.forward(ds.scenes[s:s + chunk])
        total += lf(y, T[s:s + chunk])[0] * len(y)
        logits.append(y)
    y = np.concatenate(logits)
    return total / len(ds), _accuracy(y, T, ds.target_mode)


@dataclass
class MetricsRecord:
    iteration: int
    train_loss: float
    test_loss: float
    test_accuracy: float | None
    wall_ms: int

    def row(self):
        acc = "" if self.test_accuracy is None else f"{self.test_accuracy:.10g}"
        return [str(self.iteration), f"{self.train_loss:.10g}", f"{self.test_loss:.10g}", acc, str(self.wall_ms)]


class MetricsWriter:
    """Append-only metrics CSV."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "w", newline="")
        self._csv = csv.writer(self._fh, lineterminator="\n")
        self._csv.writerow(METRICS_HEADER)
        self._last = -1

    def write(self, rec: MetricsRecord):
        if rec.iteration <= self._last:
            raise ValueError("metrics iterations must increase")
        if not (np.isfinite(rec.train_loss) and np.isfinite(rec.test_loss)):
            raise ValueError("metrics must be finite")
        self._last = rec.iteration
        self._csv.writerow(rec.row())
        self._fh.flush()

    def close(self):
        self._fh.close()


def read_metrics(path) -> list[MetricsRecord]:
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    return [MetricsRecord(int(r["iteration"]), float(r["train_loss"]), float(r["test_loss"]),
                          float(r["test_accuracy"]) if r["test_accuracy"] else None, int(r["wall_ms"]))
            for r in rows]


# ---------------------------------------------------------------------------
# scene classification

@dataclass
class TrainResult:
    config: TrainConfig
    model: SceneModel
    history: list
    train: Dataset
    test: Dataset
    unseen_classes: list = field(default_factory=list)
    metrics_path: Path | None = None
    checkpoint_path: Path | None = None

    @property
    def final(self) -> MetricsRecord:
        return self.history[-1]


def _checkpoint_header(cfg: TrainConfig, model: SceneModel, ds: Dataset, iteration: int) -> dict:
    h = model.header()
    h.update({"task": cfg.task, "relation": cfg.relation, "target_mode": ds.target_mode, "iteration": iteration,
              "b_seed": cfg.b_seed if model.kind == "linear_rn" else None,
              "classes": [{"class_id": c.class_id, "position": c.position_graph.tolist(),
                           "color": c.color_graph.tolist()} for c in ds.classes]})
    return h


def train_scene_classifier(cfg: TrainConfig, out_dir=None) -> TrainResult:
    """Minibatch Adam on the adjacency, one-hot, entangled or unseen-class task.

    Writes ``metrics.csv`` and ``checkpoint.jsonl`` under ``out_dir`` (when
    given). Raises :class:`DivergenceError` on a non-finite loss or gradient,
    after saving the last finite parameters.
    """
    if cfg.task == "one_shot":
        raise ConfigError("use train_one_shot for the one_shot task")
    rng = RngStream(cfg.seed)
    train, test, unseen = build_datasets(cfg, rng)
    n_out = len(train.classes) if cfg.target_mode == "one_hot" else 16
    model = build_model(cfg, n_out, rng.split(4))
    batches = rng.split(5)
    probe = train.subset(np.sort(rng.split(6).permutation(len(train))[: cfg.train_eval_size]))
    T_train = train.targets()
    lf = _loss_fn(cfg.target_mode)
    state = AdamState.init(model.params, cfg.learning_rate)
    out = Path(out_dir) if out_dir is not None else None
    writer = MetricsWriter(out / "metrics.csv") if out else None
    ckpt = out / "checkpoint.jsonl" if out else None
    history = []
    t0 = time.perf_counter()
    bs = min(cfg.batch_size, len(train))

    def log(it):
        tr, _ = evaluate(model, probe)
        te, acc = evaluate(model, test)
        wall = int((time.perf_counter() - t0) * 1000) if cfg.wall_clock else 0
        rec = MetricsRecord(it, tr, te, acc, wall)
        history.append(rec)
        if writer:
            writer.write(rec)
        good["it"], good["params"] = it, OrderedDict((k, v.copy()) for k, v in model.params.items())

    good = {}
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            for it in range(cfg.iterations + 1):
                if it % cfg.log_every == 0 or it == cfg.iterations:
                    if not all(np.all(np.isfinite(v)) for v in model.params.values()):
                        _diverged(it, good, ckpt, lambda i: _checkpoint_header(cfg, model, train, i))
                    log(it)
                if it == cfg.iterations:
                    break
                idx = batches.choice(len(train), bs, replace=False)
                y, cache = model.forward(train.scenes[idx])
                loss, g = lf(y, T_train[idx])
                grads = model.backward(cache, g) if np.isfinite(loss) else None
                if grads is None or not all(np.all(np.isfinite(v)) for v in grads.values()):
                    _diverged(it, good, ckpt, lambda i: _checkpoint_header(cfg, model, train, i))
                adam_step(model.params, grads, state)
    finally:
        if writer:
            writer.close()
    if ckpt:
        save_checkpoint(ckpt, model.params, _checkpoint_header(cfg, model, train, cfg.iterations))
        (out / "config.txt").write_text(config_text(cfg))
    return TrainResult(cfg, model, history, train, test, unseen, out / "metrics.csv" if out else None, ckpt)


def _diverged(it, good, ckpt, header_fn):
    """Save the parameters of the last logged iteration and abort."""
    if ckpt is not None and good:
        save_checkpoint(ckpt, good["params"], header_fn(good["it"]))
    raise DivergenceError(it, str(ckpt) if ckpt is not None and good else None)


def eval_unseen(model: SceneModel, train_classes, unseen_classes, samples_per_class: int, rng: RngStream,
                relation: str = "position", params: GeneratorParams | None = None):
    """Adjacency loss and per-edge accuracy on fresh scenes of held-out classes."""
    overlap = {c.key() for c in train_classes} & {c.key() for c in unseen_classes}
    if overlap:
        raise ConfigError(f"{len(overlap)} evaluation classes were also used for training")
    if model.rn_spec is not None and model.rn_spec.out_dim != 16 or (
            model.mlp_spec is not None and model.mlp_spec.layer_sizes[-1] != 16):
        raise ConfigError("unseen-class evaluation needs an adjacency-target model")
    ds = make_dataset(unseen_classes, samples_per_class, rng, "adjacency", relation, params)
    loss, acc = evaluate(model, ds)
    y, _ = model.forward(ds.scenes)
    exact = float(((y > 0) == (ds.targets() > 0.5)).all(axis=1).mean())
    # accuracy of always predicting "no edge", the floor any useful model should clear
    absent = float((ds.targets() < 0.5).mean())
    return {"loss": loss, "edge_accuracy": acc, "exact_match": exact, "no_edge_baseline": absent,
            "samples": len(ds)}


def classes_from_header(header: dict) -> list[SceneClass]:
    return [SceneClass(c["class_id"], np.array(c["position"], dtype=np.int8), np.array(c["color"], dtype=np.int8))
            for c in header.get("classes", [])]


# ---------------------------------------------------------------------------
# |UB| analysis

def random_ub_baseline(B: PermutationMatrix, samples: int = 200, seed: int = 0):
    """Mean and std of the block score for freshly initialised U."""
    size = B.size
    r = RngStream(seed, 0x0B)
    scores = [ub_block_score(glorot_uniform(size, size, r.split(i)), B) for i in range(samples)]
    return float(np.mean(scores)), float(np.std(scores))


def run_ub_analysis(model_or_params, B: PermutationMatrix):
    """Block score and the 16x16 block-mass matrix of |U B|."""
    params = model_or_params.params if isinstance(model_or_params, SceneModel) else model_or_params
    if "U" not in params:
        raise ConfigError("checkpoint has no disentangling layer U")
    U = params["U"]
    return ub_block_score(U, B), block_mass(U, B)


# ---------------------------------------------------------------------------
# one-shot learning

@dataclass
class OneShotResult:
    config: TrainConfig
    params: OrderedDict
    history: list
    curves: list  # (iteration, per-instance accuracy array)
    eval_episodes: list
    metrics_path: Path | None = None


def _scene_bank(classes, per_class: int, rng: RngStream, params: GeneratorParams):
    return np.stack([np.stack([generate_scene(c, rng.split(i).split(k), params) for k in range(per_class)])
                     for i, c in enumerate(classes)])


def episode_predictions(params, episodes, mcfg: mn.MannConfig, chunk: int = 50):
    """(loss per episode, predicted labels (E, T)) without touching parameters."""
    total, preds = 0.0, []
    for s in range(0, len(episodes), chunk):
        S, L, Y = mn.stack_episodes(episodes[s:s + chunk])
        logits, _, _ = mn.mann_forward(S, L, params, mcfg)
        total += mn.episode_loss(logits, Y)[0] * len(S)
        preds.append(logits.argmax(-1))
    return total / len(episodes), np.concatenate(preds)


def train_one_shot(cfg: TrainConfig, out_dir=None) -> OneShotResult:
    """Episodic training of the memory-augmented network.

    Training episodes draw from one part of the class pool and evaluation
    episodes from the disjoint rest. With ``memorize`` set, a single frozen
    episode is both the training and the evaluation set.
    """
    mcfg = cfg.mann_config
    rng = RngStream(cfg.seed)
    pool = build_class_pool(cfg.pool_size, rng.split(1), cfg.relation)
    n_held = max(cfg.episode_classes, int(round(cfg.pool_size * cfg.heldout_fraction)))
    if cfg.pool_size - n_held < cfg.episode_classes:
        raise ConfigError("pool too small for disjoint training and evaluation classes")
    train_cls, held_cls = pool[:-n_held], pool[-n_held:]
    gen = cfg.generator
    ep_kw = dict(n_classes=cfg.episode_classes, length=cfg.episode_length, n_labels=mcfg.n_labels)
    if cfg.memorize:
        frozen = mn.build_episode(train_cls, rng.split(2), params=gen, **ep_kw)
        eval_eps = [frozen]
    else:
        bank = _scene_bank(train_cls, cfg.bank_size, rng.split(2), gen)
        held_bank = _scene_bank(held_cls, cfg.bank_size, rng.split(3), gen)
        er = rng.split(4)
        eval_eps = [mn.episode_from_bank(held_bank, er.split(i), class_ids=[c.class_id for c in held_cls], **ep_kw)
                    for i in range(cfg.eval_episodes)]
    params = mn.init_mann(mcfg, rng.split(5))
    state = AdamState.init(params, cfg.learning_rate)
    batches = rng.split(6)
    out = Path(out_dir) if out_dir is not None else None
    writer = MetricsWriter(out / "metrics.csv") if out else None
    history, curves = [], []
    t0 = time.perf_counter()
    last_train = None

    def log(it):
        te, preds = episode_predictions(params, eval_eps, mcfg)
        Y = np.stack([e.targets for e in eval_eps])
        curve = mn.instance_accuracy(preds, eval_eps)
        curves.append((it, curve))
        tr = last_train if last_train is not None else te
        wall = int((time.perf_counter() - t0) * 1000) if cfg.wall_clock else 0
        rec = MetricsRecord(it, tr, te, float((preds == Y).mean()), wall)
        history.append(rec)
        if writer:
            writer.write(rec)
        good["it"], good["params"] = it, OrderedDict((k, v.copy()) for k, v in params.items())

    good = {}
    ckpt = out / "checkpoint.jsonl" if out else None
    train_ids = [c.class_id for c in train_cls]
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            for it in range(cfg.iterations + 1):
                if it % cfg.log_every == 0 or it == cfg.iterations:
                    if not all(np.all(np.isfinite(v)) for v in params.values()):
                        _diverged(it, good, ckpt, lambda i: {"model": "mann", "iteration": i})
                    log(it)
                if it == cfg.iterations:
                    break
                if cfg.memorize:
                    eps = [frozen]
                else:
                    br = batches.split(it)
                    eps = [mn.episode_from_bank(bank, br.split(e), class_ids=train_ids, **ep_kw)
                           for e in range(cfg.episodes_per_batch)]
                S, L, Y = mn.stack_episodes(eps)
                logits, _, cache = mn.mann_forward(S, L, params, mcfg)
                loss, dl = mn.episode_loss(logits, Y)
                grads = mn.mann_backward(cache, dl, params, mcfg) if np.isfinite(loss) else None
                if grads is None or not all(np.all(np.isfinite(v)) for v in grads.values()):
                    _diverged(it, good, ckpt, lambda i: {"model": "mann", "iteration": i})
                adam_step(params, grads, state)
                last_train = loss
    finally:
        if writer:
            writer.close()
    if out:
        save_checkpoint(out / "checkpoint.jsonl", params, {"model": "mann", "iteration": cfg.iterations,
                                                           "mann": dataclasses.asdict(mcfg)})
        with open(out / "instance_accuracy.csv", "w") as fh:
            fh.write("iteration," + ",".join(f"k{k}" for k in range(1, 11)) + "\n")
            for it, curve in curves:
                fh.write(f"{it}," + ",".join("" if np.isnan(a) else f"{a:.6g}" for a in curve) + "\n")
        (out / "config.txt").write_text(config_text(cfg))
    return OneShotResult(cfg, params, history, curves, eval_eps, out / "metrics.csv" if out else None)


def oracle_instance_accuracy(episodes, seed: int = 0):
    """Perfect-memory oracle pushed through the same instance-accuracy code."""
    r = RngStream(seed, 0x0C)
    preds = [mn.perfect_memory_predictions(e, r) for e in episodes]
    return mn.instance_accuracy(preds, episodes)


def dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")
