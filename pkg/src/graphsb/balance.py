"""Structure enhancement and relation diffusion."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from graphsb.errors import ConfigurationError
from graphsb.graph import Graph, hop_distances, smallest_classes


def identify_minority_classes(labels, train_mask, k: int, num_classes: int | None = None) -> tuple[int, ...]:
    """The ``k`` classes with the fewest training labels (ties: smaller id first)."""
    labels = np.asarray(labels)
    train_mask = np.asarray(train_mask, dtype=bool)
    if num_classes is None:
        num_classes = int(labels.max()) + 1
    counts = np.bincount(labels[train_mask], minlength=num_classes)
    return smallest_classes(counts, k)


def cosine_similarity(xi, xj) -> float:
    """Cosine of the angle between two vectors; 0.0 if either is the zero vector."""
    xi = np.asarray(xi, dtype=np.float64)
    xj = np.asarray(xj, dtype=np.float64)
    ni, nj = np.linalg.norm(xi), np.linalg.norm(xj)
    if ni == 0.0 or nj == 0.0:
        return 0.0
    return float(np.clip(xi @ xj / (ni * nj), -1.0, 1.0))


def l2_normalize(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    return X / norms


@dataclass
class EnhancementReport:
    """What :func:`enhance_structure` did, node by node."""

    majority_mean_degree: float
    delta: dict[int, int] = field(default_factory=dict)
    candidates: dict[int, int] = field(default_factory=dict)
    added: dict[int, list[int]] = field(default_factory=dict)
    total_added: int = 0

    @property
    def empty_candidate_nodes(self) -> list[int]:
        return [v for v, c in self.candidates.items() if c == 0]

    def to_dict(self) -> dict:
        return {
            "majority_mean_degree": self.majority_mean_degree,
            "total_added": self.total_added,
            "nodes": [
                {"node": v, "delta": self.delta[v], "candidates": self.candidates[v], "added": self.added[v]}
                for v in sorted(self.delta)
            ],
        }


def enhance_structure(g: Graph, minority, max_hops: int = 4, nodes=None) -> tuple[Graph, EnhancementReport]:
    """Add similarity-ranked local edges to low-degree minority nodes.

    Each treated node ``v`` (training-labeled minority nodes unless ``nodes``
    is given) receives up to ``floor(max(0, dbar_maj - d_v))`` new edges to
    the most cosine-similar non-adjacent nodes within ``max_hops``. The
    majority mean degree is taken over training-labeled majority nodes.
    Degrees, candidate sets and the mean all come from the input graph.
    """
    minority = set(int(c) for c in minority)
    if not minority:
        raise ConfigurationError("enhance_structure needs at least one minority class")
    if g.train_mask is None:
        raise ConfigurationError("enhance_structure needs a training mask")
    deg = g.degrees
    majority_nodes = np.flatnonzero(g.train_mask & ~np.isin(g.labels, list(minority)))
    if majority_nodes.size == 0:
        raise ConfigurationError("no training-labeled majority nodes to estimate the majority mean degree")
    dbar = float(deg[majority_nodes].mean())
    if nodes is None:
        nodes = np.flatnonzero(g.train_mask & np.isin(g.labels, list(minority)))
    Xn = l2_normalize(g.features)
    adj = g.adjacency
    report = EnhancementReport(majority_mean_degree=dbar)
    src, dst = [], []
    for v in np.sort(np.asarray(nodes, dtype=np.int64)):
        v = int(v)
        delta = max(0, int(np.floor(dbar - deg[v])))
        dist = hop_distances(adj, v, max_hops)
        cand = np.flatnonzero(np.isfinite(dist))
        nbrs = adj.indices[adj.indptr[v]:adj.indptr[v + 1]]
        cand = cand[(cand != v) & ~np.isin(cand, nbrs)]
        report.delta[v] = delta
        report.candidates[v] = int(cand.size)
        chosen = []
        if delta > 0 and cand.size:
            sims = Xn[cand] @ Xn[v]
            # stable sort on -sim: equal similarity keeps the smaller id first
            order = np.argsort(-sims, kind="stable")
            chosen = [int(u) for u in cand[order[:delta]]]
        report.added[v] = chosen
        src.extend([v] * len(chosen))
        dst.extend(chosen)
    if src:
        extra = sp.coo_matrix((np.ones(len(src)), (src, dst)), shape=adj.shape).tocsr()
        new_adj = adj + extra + extra.T
        new_adj.data[:] = 1.0
        new_adj = sp.csr_matrix(new_adj)
    else:
        new_adj = adj.copy()
    report.total_added = int((new_adj.nnz - adj.nnz) // 2)
    return g.with_adjacency(new_adj), report


def normalize_adjacency(adjacency) -> sp.csr_matrix:
    """``D^{-1/2} (A + I) D^{-1/2}`` with ``D`` the degree matrix of ``A + I``."""
    if isinstance(adjacency, Graph):
        adjacency = adjacency.adjacency
    a = sp.csr_matrix(adjacency, dtype=np.float64)
    a_tilde = a + sp.identity(a.shape[0], format="csr")
    d = np.asarray(a_tilde.sum(axis=1)).ravel()
    d_inv_sqrt = sp.diags(1.0 / np.sqrt(d))
    return sp.csr_matrix(d_inv_sqrt @ a_tilde @ d_inv_sqrt)


@dataclass(frozen=True)
class DiffusionMatrix:
    S: sp.csr_matrix
    alpha: float
    steps: int

    def dense(self) -> np.ndarray:
        return self.S.toarray()


def relation_diffusion(a_hat, alpha: float, steps: int) -> DiffusionMatrix:
    """Iterate ``S <- alpha * A_hat @ S + (1 - alpha) * S`` from ``S = I``.

    The result equals ``((1 - alpha) I + alpha A_hat)^steps``. When
    ``A_hat`` is symmetric up to rounding, so is ``S`` in exact arithmetic,
    and the output is averaged with its transpose to make that exact.
    """
    if not 0.0 < alpha < 1.0:
        raise ConfigurationError(f"alpha must lie in (0, 1), got {alpha}")
    if steps < 0:
        raise ConfigurationError(f"steps must be non-negative, got {steps}")
    a_hat = sp.csr_matrix(a_hat, dtype=np.float64)
    S = sp.identity(a_hat.shape[0], format="csr")
    for _ in range(steps):
        S = sp.csr_matrix(alpha * (a_hat @ S) + (1.0 - alpha) * S)
    if abs(a_hat - a_hat.T).max() <= 1e-12:
        S = sp.csr_matrix((S + S.T) * 0.5)
    return DiffusionMatrix(S, alpha, steps)


def truncate(S, eps: float = 1e-4) -> sp.csr_matrix:
    """Zero out entries below ``eps`` (keeps the matrix symmetric if it was)."""
    S = sp.csr_matrix(S, copy=True)
    S.data[np.abs(S.data) < eps] = 0.0
    S.eliminate_zeros()
    return S


def ppr_closed_form(a_hat, alpha: float) -> np.ndarray:
    """Dense ``alpha (I - (1 - alpha) A_hat)^{-1}``; a diagnostic, not the training operator."""
    if not 0.0 < alpha < 1.0:
        raise ConfigurationError(f"alpha must lie in (0, 1), got {alpha}")
    a = sp.csr_matrix(a_hat).toarray()
    n = a.shape[0]
    return alpha * np.linalg.solve(np.eye(n) - (1.0 - alpha) * a, np.eye(n))


def diffusion_divergence(a_hat, alpha: float, steps: int) -> dict:
    """Compare the iterated operator with the geometric-series closed form."""
    S = relation_diffusion(a_hat, alpha, steps).dense()
    P = ppr_closed_form(a_hat, alpha)
    diff = S - P
    return {
        "alpha": alpha,
        "steps": steps,
        "max_abs_diff": float(np.abs(diff).max()),
        "frobenius_diff": float(np.linalg.norm(diff)),
        "relative_frobenius_diff": float(np.linalg.norm(diff) / np.linalg.norm(P)),
    }


@dataclass(frozen=True)
class DropoutMask:
    M: np.ndarray
    p_drop: float
    seed: int


def sample_dropout_mask(n: int, p_drop: float, seed) -> DropoutMask:
    """Symmetric binary mask: upper-triangle entries kept with probability ``1 - p_drop``, diagonal always kept."""
    if not 0.0 <= p_drop < 1.0:
        raise ConfigurationError(f"p_drop must lie in [0, 1), got {p_drop}")
    rng = np.random.default_rng(seed)
    r = rng.random((n, n))
    upper = np.triu(r > p_drop, k=1)
    M = upper | upper.T
    np.fill_diagonal(M, True)
    return DropoutMask(M, p_drop, seed)


def apply_dropout_mask(S, mask: DropoutMask):
    """``(S * M) / (1 - p_drop)``; dense in, dense out, sparse in, sparse out."""
    keep = 1.0 - mask.p_drop
    if sp.issparse(S):
        return sp.csr_matrix(S.multiply(mask.M) / keep)
    return np.asarray(S) * mask.M / keep


class EntryDropout:
    """Per-epoch symmetric entry dropout for a fixed symmetric operator.

    Only stored upper-triangular entries get a Bernoulli draw (zeros stay
    zero under any mask), which gives the same distribution over
    ``S_tilde`` as :func:`sample_dropout_mask`. Samples come out dense or
    sparse to match ``dense``.
    """

    def __init__(self, S, dense: bool | None = None):
        S = sp.csr_matrix(S, dtype=np.float64)
        self.shape = S.shape
        self.dense = (S.nnz > 0.05 * S.shape[0] ** 2) if dense is None else dense
        upper = sp.triu(S, k=1).tocoo()
        self.rows, self.cols, self.vals = upper.row, upper.col, upper.data
        self.diag = S.diagonal()
        self.base = S.toarray() if self.dense else S

    def sample(self, p_drop: float, rng):
        if not 0.0 <= p_drop < 1.0:
            raise ConfigurationError(f"p_drop must lie in [0, 1), got {p_drop}")
        if p_drop == 0.0:
            return self.base.copy()
        keep = rng.random(self.vals.size) > p_drop
        q = 1.0 - p_drop
        r, c, v = self.rows[keep], self.cols[keep], self.vals[keep] / q
        n = self.shape[0]
        idx = np.arange(n)
        if self.dense:
            out = np.zeros(self.shape)
            out[r, c] = v
            out[c, r] = v
            out[idx, idx] = self.diag / q
            return out
        out = sp.coo_matrix(
            (np.concatenate([v, v, self.diag / q]), (np.concatenate([r, c, idx]), np.concatenate([c, r, idx]))),
            shape=self.shape,
        ).tocsr()
        out.eliminate_zeros()
        return out


def drop_entries(S, p_drop: float, rng) -> sp.csr_matrix:
    """One sparse dropout sample of ``S``; see :class:`EntryDropout`."""
    return EntryDropout(S, dense=False).sample(p_drop, rng)
