"""Numerical checks of how class imbalance shapes message passing on two-block SBMs.

Covers the degree disparity factor, the two-class centroid propagation
matrix and its spectrum, the expected path weight, the minority/majority
gradient ratio, centroid assimilation under repeated aggregation, and
normalized-adjacency decay on complete b-ary trees.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy import stats

from graphsb.balance import normalize_adjacency
from graphsb.errors import ConfigurationError
from graphsb.graph import SbmSpec, generate_sbm
from graphsb.model import row_normalize


def _check(p, q, beta):
    if not (0.0 <= q <= p <= 1.0):
        raise ConfigurationError(f"need 0 <= q <= p <= 1, got p={p}, q={q}")
    if p == 0.0:
        raise ConfigurationError("p must be positive")
    if beta <= 0.0:
        raise ConfigurationError(f"beta must be positive, got {beta}")


def degree_disparity(p: float, q: float, beta: float) -> float:
    """Expected majority over minority degree, ``(q + p beta) / (p + q beta)``."""
    _check(p, q, beta)
    return (q + p * beta) / (p + q * beta)


@dataclass
class Propagation:
    M: np.ndarray
    lambda1: float
    lambda2: float
    gamma: float

    @property
    def row_stochastic(self) -> np.ndarray:
        """``diag(1, 1/gamma) M diag(1, gamma)``: the same dynamics written for row-mean aggregation."""
        D = np.diag([1.0, self.gamma])
        return np.linalg.inv(D) @ self.M @ D


def propagation_matrix(p: float, q: float, beta: float) -> Propagation:
    """Two-class centroid propagation matrix and its eigenvalues (closed-form 2x2 solve)."""
    _check(p, q, beta)
    a = p + q * beta
    b = q + p * beta
    M = np.array([[p / a, q * beta / b], [q / a, p * beta / b]])
    tr = M[0, 0] + M[1, 1]
    det = M[0, 0] * M[1, 1] - M[0, 1] * M[1, 0]
    disc = math.sqrt(max(tr * tr / 4.0 - det, 0.0))
    return Propagation(M, tr / 2.0 + disc, tr / 2.0 - disc, b / a)


def path_weight_factor(beta: float, gamma: float) -> float:
    """Per-hop attenuation ``(beta + gamma) / (gamma (beta + 1))``."""
    return (beta + gamma) / (gamma * (beta + 1.0))


def path_weight_expectation(p, q, beta, l: int, d1: float, wnorm: float = 1.0) -> float:
    """Expected weight of an ``l``-hop path; ``wnorm ** l`` stands in for the weight product."""
    gamma = degree_disparity(p, q, beta)
    return (wnorm / d1) ** l * path_weight_factor(beta, gamma) ** l


@dataclass
class MonteCarlo:
    mean: float
    stderr: float
    seeds: int
    samples: int


def path_weight_monte_carlo(spec: SbmSpec, l: int, seeds=20, walks: int = 2000) -> MonteCarlo:
    """Average product of inverse degrees over ``l`` hops, each hop landing on a uniformly drawn node.

    One graph per seed. Isolated nodes are skipped when sampling.
    """
    per_seed = []
    for s in range(seeds):
        g = generate_sbm(SbmSpec(spec.n1, spec.n2, spec.p, spec.q, spec.seed + s), feature_dim=1)
        deg = g.degrees
        pool = deg[deg > 0]
        rng = np.random.default_rng([spec.seed, s, l])
        picks = pool[rng.integers(0, pool.size, size=(walks, l))]
        per_seed.append(np.prod(1.0 / picks, axis=1).mean())
    per_seed = np.array(per_seed)
    se = per_seed.std(ddof=1) / math.sqrt(seeds) if seeds > 1 else 0.0
    return MonteCarlo(float(per_seed.mean()), float(se), seeds, walks)


def _fit_slope(x, y):
    """Least-squares slope with a 95% confidence interval."""
    res = stats.linregress(x, y)
    dof = len(x) - 2
    half = stats.t.ppf(0.975, dof) * res.stderr if dof > 0 else float("inf")
    return float(res.slope), (float(res.slope - half), float(res.slope + half)), float(res.intercept)


def per_node_gradient_norms(A_hat, X, Y, W1, W2) -> np.ndarray:
    """Norm of each node's cross-entropy gradient w.r.t. ``(W1, W2)`` in a linear two-layer GCN.

    Logits are ``A_hat @ A_hat @ X @ W1 @ W2``; ``Y`` is one-hot.
    """
    Z = A_hat @ (A_hat @ X)
    logits = Z @ W1 @ W2
    logits -= logits.max(axis=1, keepdims=True)
    P = np.exp(logits)
    P /= P.sum(axis=1, keepdims=True)
    G = P - Y
    # grad_W1 = z^T (g W2^T), grad_W2 = (z W1)^T g; both rank one
    n1 = np.linalg.norm(Z, axis=1) * np.linalg.norm(G @ W2.T, axis=1)
    n2 = np.linalg.norm(Z @ W1, axis=1) * np.linalg.norm(G, axis=1)
    return np.sqrt(n1 ** 2 + n2 ** 2)


def _aggregator(adjacency, aggregation: str):
    if aggregation == "mean":
        return row_normalize(adjacency + sp.eye(adjacency.shape[0]))
    if aggregation == "sym":
        return normalize_adjacency(adjacency)
    raise ConfigurationError(f"aggregation must be 'mean' or 'sym', got {aggregation!r}")


@dataclass
class GradientDominance:
    betas: list
    ratio_mean: list
    ratio_stderr: list
    seeds: int
    slope: float
    slope_ci: tuple
    monotone: bool
    per_seed: dict = field(default_factory=dict)


def gradient_dominance_experiment(
    n1: int = 50,
    p: float = 0.1,
    q: float = 0.02,
    betas=(2, 5, 10),
    seeds: int = 20,
    feature_dim: int = 16,
    hidden: int = 16,
    seed: int = 0,
    aggregation: str = "mean",
    centroid_gap: float = 0.0,
) -> GradientDominance:
    """Class-summed per-node gradient norms at initialization, minority over majority.

    For each ``beta`` and seed, draw an SBM with ``n2 = beta * n1``, take a
    randomly initialized linear two-layer GCN trained with an unweighted loss
    over all nodes, and compare the total gradient mass contributed by each
    class. The slope is fitted on ``log ratio`` against ``log(1/beta)``.

    The defaults keep path weights independent of degree (row-mean
    aggregation with self-loops) and features free of class signal.
    ``aggregation="sym"`` switches to the symmetric normalized adjacency.
    """
    per_seed = {}
    xs, ys = [], []
    for beta in betas:
        vals = []
        for s in range(seeds):
            g = generate_sbm(
                SbmSpec(n1, int(round(beta * n1)), p, q, seed + 1000 * s + int(beta)),
                feature_dim=feature_dim,
                centroid_gap=centroid_gap,
            )
            A_hat = _aggregator(g.adjacency, aggregation)
            rng = np.random.default_rng([seed, s, int(beta)])
            W1 = rng.normal(0.0, 1.0 / math.sqrt(feature_dim), size=(feature_dim, hidden))
            W2 = rng.normal(0.0, 1.0 / math.sqrt(hidden), size=(hidden, 2))
            Y = np.eye(2)[g.labels]
            norms = per_node_gradient_norms(A_hat, g.features, Y, W1, W2)
            r = norms[g.labels == 0].sum() / norms[g.labels == 1].sum()
            vals.append(r)
            xs.append(math.log(1.0 / beta))
            ys.append(math.log(r))
        per_seed[str(beta)] = vals
    means = [float(np.mean(per_seed[str(b)])) for b in betas]
    ses = [float(np.std(per_seed[str(b)], ddof=1) / math.sqrt(seeds)) if seeds > 1 else 0.0 for b in betas]
    if len(set(betas)) > 1:
        slope, ci, _ = _fit_slope(np.array(xs), np.array(ys))
    else:
        slope, ci = float("nan"), (float("nan"), float("nan"))
    monotone = all(means[i] > means[i + 1] for i in range(len(means) - 1))
    return GradientDominance(list(betas), means, ses, seeds, slope, ci, monotone, per_seed)


def expectation_recursion(p, q, beta, layers: int, W=None, z0=None) -> np.ndarray:
    """Centroid-gap norms ``|mu_1 - mu_2 / gamma|`` for ``z <- M z W^T``, layers 0..``layers``.

    Centroids are rows of ``z`` (2 x d). The second centroid is divided by
    ``gamma`` because the recursion carries majority centroids scaled by the
    degree ratio; in that frame the gap contracts by exactly ``lambda_2``
    per layer when ``W`` is orthogonal.
    """
    prop = propagation_matrix(p, q, beta)
    z = np.array([[1.0], [0.0]]) if z0 is None else np.asarray(z0, dtype=np.float64)
    d = z.shape[1]
    W = np.eye(d) if W is None else np.asarray(W, dtype=np.float64)
    scale = np.array([[1.0], [1.0 / prop.gamma]])
    out = [np.linalg.norm((scale * z)[0] - (scale * z)[1])]
    for _ in range(layers):
        z = prop.M @ z @ W.T
        out.append(np.linalg.norm((scale * z)[0] - (scale * z)[1]))
    return np.array(out)


def scaled_orthogonal(d: int, sigma: float, seed=0) -> np.ndarray:
    """Random orthogonal matrix times ``sigma`` (every singular value equals ``sigma``)."""
    rng = np.random.default_rng(seed)
    Q, R = np.linalg.qr(rng.normal(size=(d, d)))
    return sigma * Q * np.sign(np.diag(R))


def centroid_gap_curve(adjacency, features, labels, layers: int, W=None, aggregation: str = "mean") -> np.ndarray:
    """``|mu_0 - mu_1|`` after 0..``layers`` rounds of neighbor aggregation.

    ``aggregation="mean"`` uses ``D^{-1} A``; ``"sym"`` uses ``D^{-1/2} A D^{-1/2}``
    and reports the gap in the frame ``mu_0 - mu_1 / sqrt(gamma_hat)`` with
    ``gamma_hat`` the realized majority/minority mean-degree ratio.
    """
    A = sp.csr_matrix(adjacency, dtype=np.float64)
    deg = np.asarray(A.sum(axis=1)).ravel()
    if aggregation == "mean":
        P = row_normalize(A)
        frame = 1.0
    elif aggregation == "sym":
        inv = np.divide(1.0, np.sqrt(deg), out=np.zeros_like(deg), where=deg > 0)
        P = sp.csr_matrix(sp.diags(inv) @ A @ sp.diags(inv))
        frame = 1.0 / math.sqrt(deg[labels == 1].mean() / deg[labels == 0].mean())
    else:
        raise ConfigurationError(f"aggregation must be 'mean' or 'sym', got {aggregation!r}")
    H = np.asarray(features, dtype=np.float64)
    W = np.eye(H.shape[1]) if W is None else W
    m0, m1 = labels == 0, labels == 1
    out = [np.linalg.norm(H[m0].mean(axis=0) - frame * H[m1].mean(axis=0))]
    for _ in range(layers):
        H = (P @ H) @ W.T
        out.append(np.linalg.norm(H[m0].mean(axis=0) - frame * H[m1].mean(axis=0)))
    return np.array(out)


def fit_decay_rate(curve, start: int = 1) -> tuple[float, tuple]:
    """Per-layer ratio ``exp(slope)`` of a log-linear fit from layer ``start`` on, with a 95% CI."""
    curve = np.asarray(curve, dtype=np.float64)
    ls = np.arange(curve.size)[start:]
    ys = np.log(curve[start:])
    slope, (lo, hi), _ = _fit_slope(ls, ys)
    return math.exp(slope), (math.exp(lo), math.exp(hi))


@dataclass
class Assimilation:
    predicted: float
    recursion_curve: list
    recursion_ratios: list
    graph_curve_mean: list
    graph_rates: list
    fitted_rate: float
    fitted_rate_stderr: float
    seeds: int
    sigma: float


def feature_assimilation_experiment(
    p: float = 0.5,
    q: float = 0.1,
    beta: float = 10,
    layers: int = 6,
    sigma: float = 1.0,
    n1: int = 200,
    seeds: int = 20,
    feature_dim: int = 8,
    seed: int = 0,
) -> Assimilation:
    """Centroid gap under the expected recursion and on sampled SBM graphs.

    Graph level: features are class centroids plus unit noise, aggregated by
    row means with a weight matrix whose singular values all equal ``sigma``.
    The per-layer rate comes from a log-linear fit over layers 1..``layers``.
    """
    prop = propagation_matrix(p, q, beta)
    W = scaled_orthogonal(feature_dim, sigma, seed)
    z0 = np.zeros((2, feature_dim))
    z0[0, 0] = 1.0
    rec = expectation_recursion(p, q, beta, layers, W, z0)
    ratios = list(rec[1:] / rec[:-1])
    n2 = int(round(beta * n1))
    rates, curves = [], []
    for s in range(seeds):
        g = generate_sbm(SbmSpec(n1, n2, p, q, seed + s), feature_dim=feature_dim, centroid_gap=4.0)
        curve = centroid_gap_curve(g.adjacency, g.features, g.labels, layers, W)
        curves.append(curve)
        rates.append(fit_decay_rate(curve)[0])
    rates = np.array(rates)
    return Assimilation(
        predicted=sigma * prop.lambda2,
        recursion_curve=rec.tolist(),
        recursion_ratios=[float(r) for r in ratios],
        graph_curve_mean=np.mean(curves, axis=0).tolist(),
        graph_rates=rates.tolist(),
        fitted_rate=float(rates.mean()),
        fitted_rate_stderr=float(rates.std(ddof=1) / math.sqrt(seeds)) if seeds > 1 else 0.0,
        seeds=seeds,
        sigma=sigma,
    )


def complete_tree(b: int, depth: int) -> tuple[sp.csr_matrix, np.ndarray]:
    """Adjacency of a complete ``b``-ary tree of the given depth, plus each node's depth.

    Nodes are numbered breadth first from the root (id 0).
    """
    if b < 1 or depth < 0:
        raise ConfigurationError("need b >= 1 and depth >= 0")
    depths = [0]
    src, dst = [], []
    frontier = [0]
    for d in range(1, depth + 1):
        nxt = []
        for parent in frontier:
            for _ in range(b):
                child = len(depths)
                depths.append(d)
                src.append(parent)
                dst.append(child)
                nxt.append(child)
        frontier = nxt
    n = len(depths)
    A = sp.coo_matrix((np.ones(len(src)), (src, dst)), shape=(n, n))
    return sp.csr_matrix(A + A.T), np.array(depths)


@dataclass
class TreeDecay:
    b: int
    radii: list
    entries: list
    slope: float
    log_b: float
    log_b_plus_2: float


def tree_oversquash_decay(b: int, r_max: int) -> TreeDecay:
    """``(A_hat^{r+1})[root, s]`` for ``s`` at depth ``r + 1``, r = 0..``r_max``.

    ``A_hat`` is the self-loop normalized adjacency of a tree of depth
    ``r_max + 2``, so every target is an interior node. Only the shortest path contributes to that power, so each
    interior hop multiplies the entry by ``1 / (b + 2)``; the slope fit is
    over r >= 1 so the root's different degree does not bias it.
    """
    A, depths = complete_tree(b, r_max + 2)
    A_hat = normalize_adjacency(A)
    v = np.zeros(A.shape[0])
    v[0] = 1.0
    entries = []
    for r in range(r_max + 1):
        v = A_hat @ v
        target = int(np.flatnonzero(depths == r + 1)[0])
        entries.append(float(v[target]))
    radii = list(range(r_max + 1))
    if r_max >= 2:
        slope = float(np.polyfit(radii[1:], np.log(entries[1:]), 1)[0])
    else:
        slope = float("nan")
    return TreeDecay(b, radii, entries, slope, math.log(b), math.log(b + 2))


@dataclass
class TheoryReport:
    p: float
    q: float
    beta: float
    gamma: float
    M: list
    lambda1: float
    lambda2: float
    path_weight: list
    gradient: dict
    assimilation: dict
    tree: dict

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, path) -> list:
        """Write the report as JSON and its curves as CSV files beside it. Returns the paths written."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=1))
        written = [path]
        stem = path.with_suffix("")
        rows = {
            "assimilation": [
                {"layer": i, "recursion": r, "graph_mean": g}
                for i, (r, g) in enumerate(zip(self.assimilation["recursion_curve"], self.assimilation["graph_curve_mean"]))
            ],
            "path_weight": self.path_weight,
            "gradient": [
                {"beta": b, "ratio_mean": m, "ratio_stderr": s}
                for b, m, s in zip(self.gradient["betas"], self.gradient["ratio_mean"], self.gradient["ratio_stderr"])
            ],
            "tree": [{"r": r, "entry": e} for r, e in zip(self.tree["radii"], self.tree["entries"])],
        }
        for name, table in rows.items():
            out = Path(f"{stem}_{name}.csv")
            with open(out, "w", newline="") as fh:
                w = csv.DictWriter(fh, fieldnames=list(table[0]))
                w.writeheader()
                w.writerows(table)
            written.append(out)
        return written


def theory_report(p=0.5, q=0.1, beta=10.0, layers=6, seeds=20, tree_b=2, tree_r=6, seed=0) -> TheoryReport:
    prop = propagation_matrix(p, q, beta)
    n1 = 100
    spec = SbmSpec(n1, int(round(beta * n1)), p, q, seed)
    d1 = spec.expected_minority_degree
    pw = []
    for l in range(1, 4):
        mc = path_weight_monte_carlo(spec, l, seeds=seeds)
        pw.append({"l": l, "predicted": path_weight_expectation(p, q, beta, l, d1), "measured": mc.mean,
                   "stderr": mc.stderr, "seeds": mc.seeds})
    grad = gradient_dominance_experiment(seeds=seeds, seed=seed)
    assim = feature_assimilation_experiment(p, q, beta, layers=layers, seeds=seeds, seed=seed)
    tree = tree_oversquash_decay(tree_b, tree_r)
    return TheoryReport(
        p=p,
        q=q,
        beta=beta,
        gamma=prop.gamma,
        M=prop.M.tolist(),
        lambda1=prop.lambda1,
        lambda2=prop.lambda2,
        path_weight=pw,
        gradient=asdict(grad),
        assimilation=asdict(assim),
        tree=asdict(tree),
    )
