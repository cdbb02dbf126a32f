"""Graph data model, bundle ingestion, synthetic generation, splits, perturbation.

A graph bundle is a directory of plain text files:

* ``edges.tsv``    two whitespace-separated 0-based node ids per line
* ``features.csv`` one node per row, comma-separated decimal values
* ``labels.csv``   one integer class id per line
* ``meta.json``    optional {"num_nodes", "num_features", "num_classes"}

Edges are undirected and stored once (u < v); reversed duplicates in the
input are merged, self-loops are rejected.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BundleError, ParameterError, ValidationError


@dataclass(frozen=True, eq=False)
class Graph:
    """Immutable node-classification graph: features X plus adjacency structure."""

    features: np.ndarray          # [num_nodes, num_features] float64
    edges: np.ndarray             # [num_edges, 2] int64, canonical u < v
    labels: np.ndarray            # [num_nodes] int64
    num_classes: int

    def __post_init__(self):
        features = np.ascontiguousarray(np.asarray(self.features, dtype=np.float64))
        labels = np.ascontiguousarray(np.asarray(self.labels, dtype=np.int64))
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        n = features.shape[0]
        if features.ndim != 2:
            raise ValidationError("features must be a 2-d matrix")
        if labels.shape != (n,):
            raise ValidationError(
                f"labels length {labels.shape} does not match {n} nodes"
            )
        if n > 0 and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValidationError("labels out of range [0, num_classes)")
        if edges.size:
            if edges.min() < 0 or edges.max() >= n:
                raise ValidationError("edge endpoint out of range")
            if (edges[:, 0] == edges[:, 1]).any():
                raise ValidationError("self-loops are not allowed")
        # canonical form: each undirected pair once, u < v, lexicographically sorted
        lo = edges.min(axis=1) if edges.size else edges[:, 0]
        hi = edges.max(axis=1) if edges.size else edges[:, 1]
        canonical = np.unique(np.stack([lo, hi], axis=1), axis=0)
        for arr in (features, labels, canonical):
            arr.setflags(write=False)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "edges", canonical)
        object.__setattr__(self, "_ctx_cache", None)

    def __reduce__(self):
        # rebuild through __init__ so caches stay process-local
        return (
            self.__class__,
            (np.array(self.features), np.array(self.edges),
             np.array(self.labels), self.num_classes),
        )

    @property
    def num_nodes(self) -> int:
        return self.features.shape[0]

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    @property
    def num_edges(self) -> int:
        return self.edges.shape[0]

    def edge_set(self) -> set[tuple[int, int]]:
        return {(int(u), int(v)) for u, v in self.edges}

    def same_as(self, other: "Graph") -> bool:
        """Bit-exact equality of features, edges, labels, and class count."""
        return (
            self.num_classes == other.num_classes
            and self.features.shape == other.features.shape
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.edges, other.edges)
            and np.array_equal(self.labels, other.labels)
        )


@dataclass(frozen=True)
class SplitMasks:
    train: np.ndarray
    test: np.ndarray

    def __post_init__(self):
        if self.train.shape != self.test.shape:
            raise ValidationError("train/test masks must have equal length")
        if (self.train & self.test).any():
            raise ValidationError("train and test masks overlap")
        if not (self.train | self.test).all():
            raise ValidationError("train and test masks must cover all nodes")

    @property
    def train_indices(self) -> np.ndarray:
        return np.flatnonzero(self.train)

    @property
    def test_indices(self) -> np.ndarray:
        return np.flatnonzero(self.test)


@dataclass(frozen=True)
class PerturbationSpec:
    """Budget for the stability perturbation (fractions default to the 5% cap)."""

    feature_fraction: float = 0.05
    node_removal_fraction: float = 0.05
    seed: int = 0

    def __post_init__(self):
        for name in ("feature_fraction", "node_removal_fraction"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ParameterError(f"{name} must be in [0, 1], got {value}")


# ---------------------------------------------------------------------------
# bundle I/O


def _read_lines(path: Path, filename: str) -> list[str]:
    file = path / filename
    if not file.is_file():
        raise BundleError(f"bundle at {path} is missing {filename}")
    return file.read_text(encoding="utf-8").splitlines()


def load_graph_bundle(path) -> Graph:
    """Load a graph bundle directory; validates counts across files."""
    path = Path(path)
    feature_rows = []
    width = None
    for lineno, line in enumerate(_read_lines(path, "features.csv"), start=1):
        if not line.strip():
            continue
        row = [float(tok) for tok in line.split(",")]
        if width is None:
            width = len(row)
        elif len(row) != width:
            raise ValidationError(
                f"features.csv line {lineno}: expected {width} values, got {len(row)}"
            )
        feature_rows.append(row)
    if not feature_rows:
        raise ValidationError("features.csv contains no rows")
    features = np.asarray(feature_rows, dtype=np.float64)
    n = features.shape[0]

    labels = []
    for lineno, line in enumerate(_read_lines(path, "labels.csv"), start=1):
        if not line.strip():
            continue
        try:
            labels.append(int(line.strip()))
        except ValueError as exc:
            raise ValidationError(f"labels.csv line {lineno}: not an integer") from exc
    if len(labels) != n:
        raise ValidationError(
            f"labels.csv has {len(labels)} entries for {n} feature rows"
        )
    labels = np.asarray(labels, dtype=np.int64)

    edges = []
    for lineno, line in enumerate(_read_lines(path, "edges.tsv"), start=1):
        if not line.strip():
            continue
        toks = line.split()
        if len(toks) != 2:
            raise ValidationError(f"edges.tsv line {lineno}: expected two node ids")
        u, v = int(toks[0]), int(toks[1])
        if u == v:
            raise ValidationError(f"edges.tsv line {lineno}: self-loop {u}")
        if not (0 <= u < n and 0 <= v < n):
            raise ValidationError(
                f"edges.tsv line {lineno}: node id out of range for {n} nodes"
            )
        edges.append((u, v))
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)

    num_classes = int(labels.max()) + 1 if n else 0
    meta_file = path / "meta.json"
    if meta_file.is_file():
        meta = json.loads(meta_file.read_text(encoding="utf-8"))
        for key, actual in (("num_nodes", n), ("num_features", features.shape[1])):
            if key in meta and int(meta[key]) != actual:
                raise ValidationError(
                    f"meta.json {key}={meta[key]} disagrees with data ({actual})"
                )
        if "num_classes" in meta:
            declared = int(meta["num_classes"])
            if declared < num_classes:
                raise ValidationError(
                    f"meta.json num_classes={declared} is below the observed "
                    f"label range ({num_classes})"
                )
            num_classes = declared

    return Graph(features=features, edges=edges, labels=labels,
                 num_classes=num_classes)


def save_graph_bundle(graph: Graph, path) -> None:
    """Write a bundle that round-trips bit-exactly through load_graph_bundle."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    with (path / "features.csv").open("w", encoding="utf-8", newline="\n") as fh:
        for row in graph.features:
            fh.write(",".join(repr(float(x)) for x in row) + "\n")
    with (path / "labels.csv").open("w", encoding="utf-8", newline="\n") as fh:
        for y in graph.labels:
            fh.write(f"{int(y)}\n")
    with (path / "edges.tsv").open("w", encoding="utf-8", newline="\n") as fh:
        for u, v in graph.edges:
            fh.write(f"{int(u)}\t{int(v)}\n")
    meta = {
        "num_nodes": graph.num_nodes,
        "num_features": graph.num_features,
        "num_classes": graph.num_classes,
    }
    (path / "meta.json").write_text(json.dumps(meta, sort_keys=True) + "\n",
                                    encoding="utf-8")


def convert_content_cites(content_path, cites_path, out_dir,
                          drop_self_loops: bool = True) -> Graph:
    """Convert the classic citation release format (<id> <features...> <label>
    rows plus <src> <dst> citation pairs) into a graph bundle."""
    content_path, cites_path = Path(content_path), Path(cites_path)
    if not content_path.is_file():
        raise BundleError(f"missing content file: {content_path}")
    if not cites_path.is_file():
        raise BundleError(f"missing cites file: {cites_path}")

    ids: list[str] = []
    rows: list[list[float]] = []
    label_names: list[str] = []
    for line in content_path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        parts = line.split()
        ids.append(parts[0])
        rows.append([float(tok) for tok in parts[1:-1]])
        label_names.append(parts[-1])
    index = {pid: i for i, pid in enumerate(ids)}
    classes = sorted(set(label_names))
    class_index = {name: i for i, name in enumerate(classes)}
    labels = np.array([class_index[name] for name in label_names],
                      dtype=np.int64)

    edges = []
    for line in cites_path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        a, b = line.split()
        if a not in index or b not in index:
            continue
        u, v = index[a], index[b]
        if u == v:
            if drop_self_loops:
                continue
            raise ValidationError(f"self-citation for id {a}")
        edges.append((u, v))

    graph = Graph(features=np.asarray(rows, dtype=np.float64),
                  edges=np.asarray(edges, dtype=np.int64).reshape(-1, 2),
                  labels=labels, num_classes=len(classes))
    save_graph_bundle(graph, out_dir)
    return graph


# ---------------------------------------------------------------------------
# synthetic graphs


def generate_synthetic(num_nodes: int, num_classes: int, feature_dim: int,
                       homophily: float, seed: int, *,
                       noise: float = 0.1,
                       noise_value_scale: float | None = None,
                       signature_keep_prob: float = 1.0,
                       avg_degree: float = 6.0,
                       common_features: int = 0,
                       common_prob: float = 0.9,
                       jitter: float = 0.0) -> Graph:
    """Stochastic block model with planted per-class feature signatures.

    Intra-class edge probability is proportional to ``homophily`` and
    inter-class to ``1 - homophily`` (homophily=1 yields no inter-class
    edges). Each class owns a contiguous block of feature columns; signature
    entries are binary (1.0) and kept with ``signature_keep_prob``.
    ``noise`` adds sparse background activations (probability 0.1 * noise,
    values scaled by ``noise_value_scale``, default = noise; a small
    probability with a large scale plants rare node-specific activations the
    model can overfit). ``common_features`` leading columns activate with
    ``common_prob`` for every node regardless of class (shared vocabulary:
    raises feature-support overlap without carrying class signal).
    ``jitter`` adds uniform measurement noise of that half-width to active
    entries only, leaving supports unchanged. noise=0 with keep probability 1
    and zero jitter produces exact binary features.
    """
    if num_nodes <= 0 or num_classes <= 0:
        raise ParameterError("num_nodes and num_classes must be positive")
    if num_nodes < num_classes or feature_dim < num_classes:
        raise ParameterError(
            "need num_nodes >= num_classes and feature_dim >= num_classes"
        )
    if not 0.0 <= homophily <= 1.0:
        raise ParameterError(f"homophily must be in [0, 1], got {homophily}")
    if not 0 <= common_features <= feature_dim - num_classes:
        raise ParameterError("common_features must leave room for signatures")

    rng = np.random.default_rng(seed)
    labels = np.arange(num_nodes, dtype=np.int64) % num_classes
    rng.shuffle(labels)

    same = labels[:, None] == labels[None, :]
    per_class = num_nodes / num_classes
    expected = homophily * max(per_class - 1.0, 1.0) + (1.0 - homophily) * (
        num_nodes - per_class
    )
    base = min(1.0, avg_degree / max(expected, 1.0))
    prob = np.where(same, homophily * base, (1.0 - homophily) * base)
    draw = rng.random((num_nodes, num_nodes))
    upper = np.triu(np.ones((num_nodes, num_nodes), dtype=bool), k=1)
    adj = (draw < prob) & upper
    edges = np.argwhere(adj)

    signature_dim = feature_dim - common_features
    block = signature_dim // num_classes
    features = np.zeros((num_nodes, feature_dim), dtype=np.float64)
    for node in range(num_nodes):
        if common_features:
            keep = rng.random(common_features) < common_prob
            features[node, :common_features] = np.where(keep, 1.0, 0.0)
        lo = common_features + labels[node] * block
        hi = lo + block if labels[node] < num_classes - 1 else feature_dim
        keep = rng.random(hi - lo) < signature_keep_prob
        features[node, lo:hi] = np.where(keep, 1.0, 0.0)
    if noise > 0.0:
        scale = noise if noise_value_scale is None else noise_value_scale
        background = rng.random((num_nodes, feature_dim)) < (noise * 0.1)
        features = np.where(
            background, scale * rng.random((num_nodes, feature_dim)), features
        )
    if jitter > 0.0:
        active = features > 0
        bumped = features + rng.uniform(-jitter, jitter, size=features.shape)
        features = np.where(active, np.maximum(bumped, 0.05), features)

    return Graph(features=features, edges=edges, labels=labels,
                 num_classes=num_classes)


# ---------------------------------------------------------------------------
# split and perturbation


def split(graph: Graph, train_fraction: float, seed: int) -> SplitMasks:
    """Uniform random train/test partition, deterministic given seed."""
    if not 0.0 < train_fraction < 1.0:
        raise ParameterError(f"train_fraction must be in (0, 1), got {train_fraction}")
    n = graph.num_nodes
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(train_fraction * n))
    n_train = min(max(n_train, 1), n - 1)
    train = np.zeros(n, dtype=bool)
    train[order[:n_train]] = True
    return SplitMasks(train=train, test=~train)


def binary_columns(features: np.ndarray) -> np.ndarray:
    """Boolean mask of columns whose values all lie in {0, 1}."""
    return np.logical_or(features == 0.0, features == 1.0).all(axis=0)


def perturb(graph: Graph, spec: PerturbationSpec,
            protected_node: int) -> tuple[Graph, dict[int, int]]:
    """Feature noise plus node removal used by the Stability metric.

    Per node, at most ``feature_fraction`` of feature entries change (binary
    columns flip, continuous columns resample from that column's empirical
    distribution). At most ``node_removal_fraction`` of nodes are dropped
    uniformly at random, never the protected node. Returns the perturbed
    graph and the old->new id mapping for surviving nodes.
    """
    n, d = graph.num_nodes, graph.num_features
    if not 0 <= protected_node < n:
        raise ParameterError(f"protected_node {protected_node} not in graph")

    rng = np.random.default_rng(spec.seed)
    features = np.array(graph.features)

    k_feat = int(np.floor(spec.feature_fraction * d))
    if k_feat > 0:
        is_binary = binary_columns(graph.features)
        for node in range(n):
            cols = rng.choice(d, size=k_feat, replace=False)
            for col in cols:
                if is_binary[col]:
                    features[node, col] = 1.0 - features[node, col]
                else:
                    donor = int(rng.integers(0, n))
                    features[node, col] = graph.features[donor, col]

    k_remove = int(np.floor(spec.node_removal_fraction * n))
    keep = np.ones(n, dtype=bool)
    if k_remove > 0:
        candidates = np.setdiff1d(np.arange(n), [protected_node])
        removed = rng.choice(candidates, size=min(k_remove, candidates.size),
                             replace=False)
        keep[removed] = False

    survivors = np.flatnonzero(keep)
    remap = {int(old): int(new) for new, old in enumerate(survivors)}
    if graph.num_edges:
        mask = keep[graph.edges[:, 0]] & keep[graph.edges[:, 1]]
        kept_edges = graph.edges[mask]
        lookup = np.full(n, -1, dtype=np.int64)
        lookup[survivors] = np.arange(survivors.size)
        new_edges = lookup[kept_edges]
    else:
        new_edges = graph.edges

    perturbed = Graph(
        features=features[survivors],
        edges=new_edges,
        labels=graph.labels[survivors],
        num_classes=graph.num_classes,
    )
    return perturbed, remap
