"""Graph container, file loaders, split protocols and the two-block SBM generator."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from graphsb.errors import ConfigurationError, GraphFormatError, NodeIndexError

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class Graph:
    """Undirected attributed graph with integer labels and split masks.

    ``adjacency`` is a symmetric binary CSR matrix without self-loops;
    self-loops only ever appear inside normalization.
    """

    adjacency: sp.csr_matrix
    features: np.ndarray
    labels: np.ndarray
    train_mask: np.ndarray | None = None
    val_mask: np.ndarray | None = None
    test_mask: np.ndarray | None = None
    num_classes: int | None = None
    node_ids: tuple[str, ...] | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        adj = sp.csr_matrix(self.adjacency, dtype=np.float64)
        adj.sum_duplicates()
        adj.eliminate_zeros()
        n = adj.shape[0]
        if adj.shape != (n, n):
            raise ValueError(f"adjacency must be square, got {adj.shape}")
        if adj.diagonal().any():
            raise ValueError("adjacency must have a zero diagonal")
        if (adj != adj.T).nnz:
            raise ValueError("adjacency must be symmetric")
        if adj.nnz and not np.all(adj.data == 1.0):
            raise ValueError("adjacency must be binary")
        features = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if features.ndim != 2 or features.shape[0] != n:
            raise ValueError(f"features must be {n} x p, got {features.shape}")
        if labels.shape != (n,):
            raise ValueError(f"labels must have length {n}, got {labels.shape}")
        num_classes = self.num_classes
        if num_classes is None:
            num_classes = int(labels.max()) + 1 if n else 0
        if n and (labels.min() < 0 or labels.max() >= num_classes):
            raise ValueError(f"labels must lie in [0, {num_classes})")
        masks = []
        for name in ("train_mask", "val_mask", "test_mask"):
            m = getattr(self, name)
            if m is not None:
                m = np.asarray(m, dtype=bool)
                if m.shape != (n,):
                    raise ValueError(f"{name} must have length {n}")
                masks.append(m)
            object.__setattr__(self, name, m)
        total = np.zeros(n, dtype=np.int64)
        for m in masks:
            total += m
        if np.any(total > 1):
            raise ValueError("train/val/test masks overlap")
        object.__setattr__(self, "adjacency", adj)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "num_classes", num_classes)

    @property
    def n(self) -> int:
        return self.adjacency.shape[0]

    @property
    def degrees(self) -> np.ndarray:
        return np.asarray(self.adjacency.sum(axis=1)).ravel()

    @property
    def num_edges(self) -> int:
        return self.adjacency.nnz // 2

    def with_masks(self, train, val, test) -> "Graph":
        return replace(self, train_mask=train, val_mask=val, test_mask=test)

    def with_adjacency(self, adjacency) -> "Graph":
        return replace(self, adjacency=adjacency)


def _data_lines(path):
    """Yield (lineno, stripped line) skipping blanks and '#' comment lines."""
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            yield lineno, line


def _read_labels(path):
    labels = []
    for lineno, line in _data_lines(path):
        try:
            labels.append(int(line))
        except ValueError:
            raise GraphFormatError(path, lineno, f"expected an integer class id, got {line!r}") from None
    return np.asarray(labels, dtype=np.int64)


def _read_features(path):
    rows = []
    width = None
    for lineno, line in _data_lines(path):
        try:
            row = [float(tok) for tok in line.split(",")]
        except ValueError:
            raise GraphFormatError(path, lineno, "expected comma-separated reals") from None
        if width is None:
            width = len(row)
        elif len(row) != width:
            raise GraphFormatError(path, lineno, f"expected {width} columns, got {len(row)}")
        rows.append(row)
    return np.asarray(rows, dtype=np.float64).reshape(len(rows), width or 0)


def _read_edges(path, n):
    src, dst = [], []
    self_loops = 0
    for lineno, line in _data_lines(path):
        parts = line.split()
        if len(parts) != 2:
            raise GraphFormatError(path, lineno, f"expected 'u v', got {line!r}")
        try:
            u, v = int(parts[0]), int(parts[1])
        except ValueError:
            raise GraphFormatError(path, lineno, f"non-integer node id in {line!r}") from None
        for node in (u, v):
            if node < 0 or node >= n:
                raise NodeIndexError(path, lineno, node, n)
        if u == v:
            self_loops += 1
            continue
        src.append(u)
        dst.append(v)
    return np.asarray(src, dtype=np.int64), np.asarray(dst, dtype=np.int64), self_loops


def adjacency_from_edges(src, dst, n) -> sp.csr_matrix:
    """Symmetric, deduplicated binary adjacency from an edge list; self-loops removed."""
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    keep = src != dst
    src, dst = src[keep], dst[keep]
    rows = np.concatenate([src, dst])
    cols = np.concatenate([dst, src])
    adj = sp.coo_matrix((np.ones(rows.size), (rows, cols)), shape=(n, n)).tocsr()
    adj.sum_duplicates()
    adj.data[:] = 1.0
    return adj


def load_graph(edge_path, feature_path, label_path, num_classes=None) -> Graph:
    """Read the three-file format: ``u v`` edge lines, CSV features, one label per line.

    Edges are treated as undirected, duplicates collapse, and self-loops are
    dropped (their count lands in ``graph.meta["self_loops_dropped"]``).
    A ``node_ids.txt`` next to the edge file, if present, restores external ids.
    """
    labels = _read_labels(label_path)
    features = _read_features(feature_path)
    n = labels.size
    if features.shape[0] != n:
        raise ConfigurationError(
            f"{feature_path} has {features.shape[0]} rows but {label_path} has {n} labels"
        )
    src, dst, self_loops = _read_edges(edge_path, n)
    if self_loops:
        log.warning("dropped %d self-loop(s) from %s", self_loops, edge_path)
    node_ids = None
    id_path = Path(edge_path).with_name("node_ids.txt")
    if id_path.exists():
        node_ids = tuple(line for _, line in _data_lines(id_path))
        if len(node_ids) != n:
            node_ids = None
    return Graph(
        adjacency_from_edges(src, dst, n),
        features,
        labels,
        num_classes=num_classes,
        node_ids=node_ids,
        meta={"self_loops_dropped": self_loops, "source": str(edge_path)},
    )


def load_graph_dir(directory, num_classes=None) -> Graph:
    d = Path(directory)
    return load_graph(d / "edges.txt", d / "features.csv", d / "labels.txt", num_classes=num_classes)


def save_graph(g: Graph, directory) -> Path:
    """Write ``g`` in the format read by :func:`load_graph_dir` (one direction per edge)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    upper = sp.triu(g.adjacency, k=1).tocoo()
    with open(d / "edges.txt", "w") as fh:
        for u, v in zip(upper.row, upper.col):
            fh.write(f"{u} {v}\n")
    np.savetxt(d / "features.csv", g.features, delimiter=",", fmt="%.17g")
    np.savetxt(d / "labels.txt", g.labels, fmt="%d")
    if g.node_ids is not None:
        (d / "node_ids.txt").write_text("".join(f"{i}\n" for i in g.node_ids))
    return d


def load_linqs(content_path, cites_path) -> Graph:
    """Read the LINQS ``.content``/``.cites`` pair (Cora, Citeseer distributions).

    Paper ids are mapped to dense indices in file order; class names are
    sorted and enumerated. Citations to unknown papers are skipped.
    """
    ids, rows, names = [], [], []
    for lineno, line in _data_lines(content_path):
        parts = line.split()
        if len(parts) < 3:
            raise GraphFormatError(content_path, lineno, "expected '<id> <features...> <label>'")
        ids.append(parts[0])
        try:
            rows.append([float(t) for t in parts[1:-1]])
        except ValueError:
            raise GraphFormatError(content_path, lineno, "non-numeric feature") from None
        names.append(parts[-1])
    index = {pid: i for i, pid in enumerate(ids)}
    classes = sorted(set(names))
    labels = np.array([classes.index(c) for c in names], dtype=np.int64)
    src, dst = [], []
    skipped = 0
    for lineno, line in _data_lines(cites_path):
        parts = line.split()
        if len(parts) != 2:
            raise GraphFormatError(cites_path, lineno, f"expected 'cited citing', got {line!r}")
        if parts[0] not in index or parts[1] not in index:
            skipped += 1
            continue
        src.append(index[parts[0]])
        dst.append(index[parts[1]])
    n = len(ids)
    return Graph(
        adjacency_from_edges(src, dst, n),
        np.asarray(rows, dtype=np.float64),
        labels,
        num_classes=len(classes),
        node_ids=tuple(ids),
        meta={"class_names": classes, "citations_skipped": skipped, "source": str(content_path)},
    )


@dataclass(frozen=True)
class SbmSpec:
    """Two-block SBM: ``n1`` minority nodes, ``n2`` majority nodes."""

    n1: int
    n2: int
    p: float
    q: float
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.q <= 1.0 and 0.0 <= self.p <= 1.0):
            raise ConfigurationError("p and q must lie in [0, 1]")
        if self.p < self.q:
            raise ConfigurationError(f"need p >= q, got p={self.p}, q={self.q}")
        if self.n1 < 1:
            raise ConfigurationError("n1 must be at least 1")
        if self.n2 < self.n1:
            raise ConfigurationError("n2 must be at least n1 (beta >= 1)")

    @property
    def beta(self) -> float:
        return self.n2 / self.n1

    @property
    def gamma(self) -> float:
        return (self.q + self.p * self.beta) / (self.p + self.q * self.beta)

    @property
    def expected_minority_degree(self) -> float:
        return self.n1 * (self.p + self.q * self.beta)

    @property
    def expected_majority_degree(self) -> float:
        return self.n1 * (self.q + self.p * self.beta)


def generate_sbm(spec: SbmSpec, feature_dim: int = 16, centroid_gap: float = 2.0) -> Graph:
    """Sample a two-block SBM with Gaussian-blob features.

    Nodes ``0..n1-1`` are minority (label 0), the rest majority (label 1).
    Class centroids sit at ``+gap/2`` and ``-gap/2`` on the first feature
    axis; every coordinate gets unit-variance noise.
    """
    rng = np.random.default_rng(spec.seed)
    n = spec.n1 + spec.n2
    labels = np.r_[np.zeros(spec.n1, dtype=np.int64), np.ones(spec.n2, dtype=np.int64)]
    same = labels[:, None] == labels[None, :]
    prob = np.where(same, spec.p, spec.q)
    draws = rng.random((n, n)) < prob
    upper = np.triu(draws, k=1)
    src, dst = np.nonzero(upper)
    adj = adjacency_from_edges(src, dst, n)

    centroids = np.zeros((2, feature_dim))
    centroids[0, 0] = centroid_gap / 2.0
    centroids[1, 0] = -centroid_gap / 2.0
    features = centroids[labels] + rng.standard_normal((n, feature_dim))
    return Graph(adj, features, labels, num_classes=2, meta={"sbm": spec.__dict__.copy()})


def hop_distances(adjacency, source: int, max_hops: int) -> np.ndarray:
    """BFS hop counts from ``source``; ``inf`` beyond ``max_hops`` or unreachable."""
    adj = adjacency.adjacency if isinstance(adjacency, Graph) else sp.csr_matrix(adjacency)
    n = adj.shape[0]
    if not 0 <= source < n:
        raise IndexError(f"source {source} out of range for n={n}")
    dist = np.full(n, np.inf)
    dist[source] = 0.0
    frontier = np.array([source])
    indptr, indices = adj.indptr, adj.indices
    for hop in range(1, max_hops + 1):
        if frontier.size == 0:
            break
        nbrs = np.concatenate([indices[indptr[u]:indptr[u + 1]] for u in frontier])
        nbrs = np.unique(nbrs)
        nbrs = nbrs[np.isinf(dist[nbrs])]
        dist[nbrs] = hop
        frontier = nbrs
    return dist


def degree_stats(g: Graph, nodes) -> tuple[float, np.ndarray]:
    """Mean degree over ``nodes`` (index array or boolean mask) and the per-node degrees."""
    nodes = np.asarray(nodes)
    if nodes.dtype == bool:
        nodes = np.flatnonzero(nodes)
    if nodes.size == 0:
        raise ConfigurationError("degree_stats needs a non-empty node set")
    deg = g.degrees[nodes]
    return float(deg.mean()), deg


@dataclass(frozen=True)
class SplitSpec:
    """Labeling protocol.

    ``protocol="controlled"``: every majority class gets
    ``labeled_per_majority`` training nodes and every minority class
    ``round(labeled_per_majority * rho)``; the rest is divided 1:2 into
    validation and test. ``protocol="proportional"``: each class is split
    1:1:2 into train/val/test (naturally imbalanced data).

    ``minority_classes`` is either an explicit tuple of class ids or an int
    ``k`` meaning the ``k`` smallest classes (ties go to the smaller id).
    """

    rho: float = 0.5
    labeled_per_majority: int = 20
    minority_classes: tuple[int, ...] | int = 1
    seed: int = 0
    protocol: str = "controlled"

    def __post_init__(self):
        if not 0.0 < self.rho <= 1.0:
            raise ConfigurationError(f"rho must lie in (0, 1], got {self.rho}")
        if self.protocol not in ("controlled", "proportional"):
            raise ConfigurationError(f"unknown split protocol {self.protocol!r}")
        if self.protocol == "controlled" and self.minority_count < 1:
            raise ConfigurationError(
                f"labeled minority count round({self.labeled_per_majority} * {self.rho}) is zero"
            )

    @property
    def minority_count(self) -> int:
        return int(math.floor(self.labeled_per_majority * self.rho + 0.5))


def smallest_classes(counts: Sequence[int], k: int) -> tuple[int, ...]:
    """The ``k`` classes with the fewest members, ties broken by smaller id."""
    counts = np.asarray(counts)
    if not 0 <= k < counts.size:
        raise ConfigurationError(f"k={k} must be smaller than the number of classes {counts.size}")
    order = np.lexsort((np.arange(counts.size), counts))
    return tuple(sorted(int(c) for c in order[:k]))


def resolve_minority(g: Graph, minority) -> tuple[int, ...]:
    if isinstance(minority, (int, np.integer)):
        return smallest_classes(np.bincount(g.labels, minlength=g.num_classes), int(minority))
    return tuple(sorted(int(c) for c in minority))


def make_split(g: Graph, spec: SplitSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Boolean train/val/test masks following ``spec``. Same seed, same masks."""
    rng = np.random.default_rng(spec.seed)
    n = g.n
    train = np.zeros(n, dtype=bool)
    val = np.zeros(n, dtype=bool)
    test = np.zeros(n, dtype=bool)
    minority = set(resolve_minority(g, spec.minority_classes))
    for c in range(g.num_classes):
        members = np.flatnonzero(g.labels == c)
        members = members[rng.permutation(members.size)]
        if spec.protocol == "proportional":
            n_train = members.size // 4
            n_val = members.size // 4
            if n_train == 0:
                raise ConfigurationError(f"class {c} has {members.size} nodes, too few for a 1:1:2 split")
            train[members[:n_train]] = True
            val[members[n_train:n_train + n_val]] = True
            test[members[n_train + n_val:]] = True
            continue
        need = spec.minority_count if c in minority else spec.labeled_per_majority
        if members.size < need:
            raise ConfigurationError(f"class {c} has {members.size} nodes but {need} training labels are required")
        train[members[:need]] = True
        rest = members[need:]
        n_val = rest.size // 3
        val[rest[:n_val]] = True
        test[rest[n_val:]] = True
    return train, val, test
