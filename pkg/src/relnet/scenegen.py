"""Relation graphs over object types, scene sampling and dataset files.

A scene is a 16x10 array, one row per object:
``[x, y, r, g, b, size, onehot(type)]`` with four objects of each of four
types. A class is an ordered pair of DAGs over the types: one drives
positions, the other drives colours.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .numerics import ParameterError, RngStream, sample_half_normal

N_TYPES = 4
PER_TYPE = 4
N_OBJECTS = N_TYPES * PER_TYPE
N_FEATURES = 10
FEATURE_LAYOUT = ["x", "y", "r", "g", "b", "size", "type0", "type1", "type2", "type3"]
FORMAT_VERSION = 1
MAX_ENUM_K = 5


class CapacityError(ValueError):
    pass


class DatasetParseError(ValueError):
    pass


# ---------------------------------------------------------------------------
# graphs

def is_acyclic(adj: np.ndarray) -> bool:
    """Kahn's topological sort; False on any cycle, including self-loops."""
    adj = np.asarray(adj)
    return topological_order(adj) is not None


def topological_order(adj: np.ndarray) -> Optional[list]:
    k = adj.shape[0]
    indeg = adj.sum(axis=0).astype(int).tolist()
    ready = [v for v in range(k) if indeg[v] == 0]
    order = []
    while ready:
        v = ready.pop(0)
        order.append(v)
        for c in range(k):
            if adj[v, c]:
                indeg[c] -= 1
                if indeg[c] == 0:
                    ready.append(c)
    return order if len(order) == k else None


def enumerate_dags(k: int) -> list:
    """All zero-diagonal acyclic k x k adjacency matrices.

    Ordered lexicographically by the row-major off-diagonal bit string
    (entry (0,1) is the most significant bit).
    """
    if k > MAX_ENUM_K:
        raise CapacityError(f"enumerating DAGs on {k} > {MAX_ENUM_K} nodes is not supported")
    if k < 1:
        return []
    slots = [(i, j) for i in range(k) for j in range(k) if i != j]
    out = []
    for bits in itertools.product((0, 1), repeat=len(slots)):
        adj = np.zeros((k, k), dtype=np.int8)
        for (i, j), bit in zip(slots, bits):
            adj[i, j] = bit
        if np.any(adj & adj.T):
            continue
        if is_acyclic(adj):
            out.append(adj)
    return out


_DAG_CACHE: dict = {}


def dags4() -> list:
    if N_TYPES not in _DAG_CACHE:
        _DAG_CACHE[N_TYPES] = enumerate_dags(N_TYPES)
    return _DAG_CACHE[N_TYPES]


@dataclass(frozen=True)
class SceneClass:
    class_id: int
    position_graph: np.ndarray = field(compare=False)
    color_graph: np.ndarray = field(compare=False)

    def key(self) -> tuple:
        return (tuple(self.position_graph.ravel().tolist()), tuple(self.color_graph.ravel().tolist()))

    def __eq__(self, other):
        return isinstance(other, SceneClass) and self.class_id == other.class_id and self.key() == other.key()

    def __hash__(self):
        return hash((self.class_id, self.key()))


def build_class_pool(pool_size: int, rng: RngStream, relation: str = "both") -> list:
    """Distinct classes sampled without replacement.

    ``relation="both"`` draws (position, color) DAG pairs, never both empty.
    ``"position"`` / ``"color"`` draw a distinct non-empty DAG for that
    relation and leave the other graph empty.
    """
    dags = dags4()
    n = len(dags)
    empty = np.zeros((N_TYPES, N_TYPES), dtype=np.int8)
    if relation == "both":
        capacity = n * n - 1
    elif relation in ("position", "color"):
        capacity = n - 1
    else:
        raise ParameterError(f"unknown relation {relation!r}")
    if pool_size > capacity:
        raise CapacityError(f"pool of {pool_size} exceeds the {capacity} distinct {relation} classes")
    # index 0 in lexicographic order is the empty graph
    if relation == "both":
        flat = rng.choice(capacity, size=pool_size, replace=False) + 1
        pairs = [(int(f // n), int(f % n)) for f in flat]
    else:
        picks = rng.choice(capacity, size=pool_size, replace=False) + 1
        pairs = [(int(p), 0) if relation == "position" else (0, int(p)) for p in picks]
    pool = []
    for cid, (pi, ci) in enumerate(pairs):
        pos = dags[pi].copy() if pi else empty.copy()
        col = dags[ci].copy() if ci else empty.copy()
        pool.append(SceneClass(cid, pos, col))
    return pool


def adjacency_target(cls: SceneClass, relation: str = "position") -> np.ndarray:
    if relation == "position":
        return cls.position_graph.ravel().astype(float)
    if relation == "color":
        return cls.color_graph.ravel().astype(float)
    if relation == "both":
        return np.concatenate([cls.position_graph.ravel(), cls.color_graph.ravel()]).astype(float)
    raise ParameterError(f"unknown relation {relation!r}")


# ---------------------------------------------------------------------------
# scene sampling

@dataclass
class GeneratorParams:
    d0: float = 0.06
    sigma_d: float = 0.04
    sigma_c: float = 0.05
    clamp: bool = True


def _type_sizes():
    return 0.2 + 0.1 * np.arange(N_TYPES)


def _pick_parent(graph: np.ndarray, child_type: int, rng: RngStream) -> int:
    """One parent instance row for a child; parent type uniform, instance uniform."""
    parents = np.flatnonzero(graph[:, child_type])
    ptype = int(parents[rng.integers(len(parents))]) if len(parents) > 1 else int(parents[0])
    return ptype * PER_TYPE + int(rng.integers(PER_TYPE))


def place_child(parent_xy, theta, d):
    """Child position at distance ``d`` along angle ``theta`` from the parent."""
    return (parent_xy[0] + d * np.cos(theta), parent_xy[1] + d * np.sin(theta))


def generate_scene(cls: SceneClass, rng: RngStream, params: GeneratorParams | None = None) -> np.ndarray:
    """Sample one 16x10 scene description from the class's generative model."""
    p = params or GeneratorParams()
    D = np.zeros((N_OBJECTS, N_FEATURES))
    types = np.repeat(np.arange(N_TYPES), PER_TYPE)
    D[np.arange(N_OBJECTS), 6 + types] = 1.0
    D[:, 5] = _type_sizes()[types]

    # positions
    graph = cls.position_graph
    order = topological_order(graph)
    if order is None:
        raise ParameterError("position graph has a cycle")
    theta = np.zeros(N_OBJECTS)
    for t in order:
        rows = range(t * PER_TYPE, (t + 1) * PER_TYPE)
        if not graph[:, t].any():
            for r in rows:
                D[r, 0:2] = rng.uniform(0.0, 1.0, 2)
                theta[r] = rng.uniform(0.0, 2 * np.pi)
        else:
            for r in rows:
                pr = _pick_parent(graph, t, rng)
                th = rng.uniform(theta[pr] - np.pi / 3, theta[pr] + np.pi / 3)
                d = p.d0 + sample_half_normal(p.sigma_d, rng)
                x, y = place_child(D[pr, 0:2], th, d)
                if p.clamp:
                    x, y = min(max(x, 0.0), 1.0), min(max(y, 0.0), 1.0)
                D[r, 0:2] = (x, y)
                theta[r] = th

    # colours
    graph = cls.color_graph
    order = topological_order(graph)
    if order is None:
        raise ParameterError("color graph has a cycle")
    for t in order:
        rows = range(t * PER_TYPE, (t + 1) * PER_TYPE)
        if not graph[:, t].any():
            for r in rows:
                D[r, 2:5] = rng.uniform(0.0, 1.0, 3)
        else:
            for r in rows:
                pr = _pick_parent(graph, t, rng)
                rgb = D[pr, 2:5] + (rng.normal(0.0, p.sigma_c, 3) if p.sigma_c > 0 else 0.0)
                D[r, 2:5] = np.clip(rgb, 0.0, 1.0)
    return D


# ---------------------------------------------------------------------------
# entangling permutation

@dataclass(frozen=True)
class PermutationMatrix:
    perm: np.ndarray  # output coordinate k takes input coordinate perm[k]

    @property
    def size(self) -> int:
        return len(self.perm)

    def inverse(self) -> "PermutationMatrix":
        inv = np.empty_like(self.perm)
        inv[self.perm] = np.arange(len(self.perm))
        return PermutationMatrix(inv)

    def matrix(self) -> np.ndarray:
        """Dense B with ``B @ v == v[perm]``."""
        B = np.zeros((self.size, self.size))
        B[np.arange(self.size), self.perm] = 1.0
        return B


def make_permutation(seed: int, mn: int = N_OBJECTS * N_FEATURES) -> PermutationMatrix:
    return PermutationMatrix(RngStream(seed, 0xB).permutation(mn))


def identity_permutation(mn: int = N_OBJECTS * N_FEATURES) -> PermutationMatrix:
    return PermutationMatrix(np.arange(mn))


def entangle(D: np.ndarray, B: PermutationMatrix) -> np.ndarray:
    """Row-major flatten then permute coordinates. Works on a batch too."""
    D = np.asarray(D)
    flat = D.reshape(D.shape[:-2] + (-1,)) if D.ndim >= 2 else D
    if flat.shape[-1] != B.size:
        raise ParameterError(f"scene has {flat.shape[-1]} entries, permutation expects {B.size}")
    return flat[..., B.perm]


# ---------------------------------------------------------------------------
# datasets

@dataclass
class Dataset:
    classes: list
    labels: np.ndarray  # (S,) class index per sample
    scenes: np.ndarray  # (S, 16, 10)
    target_mode: str = "adjacency"
    relation: str = "position"
    generator: GeneratorParams = field(default_factory=GeneratorParams)

    def __len__(self):
        return len(self.labels)

    def targets(self) -> np.ndarray:
        if self.target_mode == "one_hot":
            return np.eye(len(self.classes))[self.labels]
        table = np.stack([adjacency_target(c, self.relation) for c in self.classes])
        return table[self.labels]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.classes, self.labels[idx], self.scenes[idx], self.target_mode,
                       self.relation, self.generator)


def make_dataset(classes, samples_per_class: int, rng: RngStream, target_mode="adjacency",
                 relation="position", params: GeneratorParams | None = None) -> Dataset:
    """Equal samples per class; sample s of class c uses its own split stream."""
    params = params or GeneratorParams()
    labels = np.repeat(np.arange(len(classes)), samples_per_class)
    scenes = np.empty((len(labels), N_OBJECTS, N_FEATURES))
    for s, c in enumerate(labels):
        scenes[s] = generate_scene(classes[c], rng.split(s), params)
    return Dataset(list(classes), labels, scenes, target_mode, relation, params)


def _header(ds: Dataset) -> dict:
    return {
        "version": FORMAT_VERSION,
        "target_mode": ds.target_mode,
        "relation": ds.relation,
        "feature_layout": FEATURE_LAYOUT,
        "generator_params": asdict(ds.generator),
        "classes": [
            {"class_id": c.class_id, "position": c.position_graph.tolist(), "color": c.color_graph.tolist()}
            for c in ds.classes
        ],
    }


def dataset_write(ds: Dataset, path) -> None:
    # json writes floats with repr(), which round-trips doubles exactly
    with open(path, "w") as fh:
        fh.write(json.dumps(_header(ds), sort_keys=True) + "\n")
        for c, D in zip(ds.labels, ds.scenes):
            fh.write(json.dumps({"class_index": int(c), "D": D.tolist()}) + "\n")


def dataset_read(path) -> Dataset:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DatasetParseError("line 1: empty dataset file")
    try:
        head = json.loads(lines[0])
        classes = [
            SceneClass(c["class_id"], np.array(c["position"], dtype=np.int8), np.array(c["color"], dtype=np.int8))
            for c in head["classes"]
        ]
        gen = GeneratorParams(**head["generator_params"])
    except (ValueError, KeyError, TypeError) as exc:
        raise DatasetParseError(f"line 1: malformed header ({exc})") from exc
    if head.get("version") != FORMAT_VERSION:
        raise DatasetParseError(f"line 1: unsupported version {head.get('version')!r}")
    labels, scenes = [], []
    for rec, line in enumerate(lines[1:]):
        lineno = rec + 2
        try:
            obj = json.loads(line)
            D = np.array(obj["D"], dtype=float)
            c = int(obj["class_index"])
        except (ValueError, KeyError, TypeError) as exc:
            raise DatasetParseError(f"line {lineno} (record {rec}): {exc}") from exc
        if D.shape != (N_OBJECTS, N_FEATURES):
            raise DatasetParseError(f"line {lineno} (record {rec}): scene shape {D.shape}, "
                                    f"expected {(N_OBJECTS, N_FEATURES)}")
        if not 0 <= c < len(classes):
            raise DatasetParseError(f"line {lineno} (record {rec}): class index {c} out of range")
        labels.append(c)
        scenes.append(D)
    scenes = np.stack(scenes) if scenes else np.empty((0, N_OBJECTS, N_FEATURES))
    return Dataset(classes, np.array(labels, dtype=int), scenes, head["target_mode"],
                   head.get("relation", "position"), gen)
