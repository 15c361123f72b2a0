"""Quantity balancing: mixup synthesis, the multi-task edge predictor and the scale controller."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from sklearn.cluster import KMeans

from graphsb.graph import hop_distances

PATH_CLASSES = 4


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def nearest_same_class(H, labels, v: int, pool=None) -> int:
    """Closest (Euclidean) node of ``v``'s class within ``pool``, excluding ``v``.

    ``pool`` defaults to all nodes. Ties go to the smaller id. Returns ``v``
    itself when it has no same-class partner, so mixup degenerates to duplication.
    """
    labels = np.asarray(labels)
    pool = np.arange(labels.size) if pool is None else np.sort(np.asarray(pool))
    peers = pool[(labels[pool] == labels[v]) & (pool != v)]
    if peers.size == 0:
        return int(v)
    d = np.linalg.norm(H[peers] - H[v], axis=1)
    return int(peers[np.argmin(d)])


def nearest_same_class_many(H, labels, sources, pool) -> np.ndarray:
    """Vectorized :func:`nearest_same_class` for an array of sources sharing one pool."""
    labels = np.asarray(labels)
    pool = np.sort(np.asarray(pool))
    sources = np.asarray(sources, dtype=np.int64)
    out = sources.copy()
    for c in np.unique(labels[sources]):
        peers = pool[labels[pool] == c]
        which = np.flatnonzero(labels[sources] == c)
        src = sources[which]
        if peers.size == 0:
            continue
        d2 = ((H[src][:, None, :] - H[peers][None, :, :]) ** 2).sum(axis=2)
        d2[src[:, None] == peers[None, :]] = np.inf
        best = np.argmin(d2, axis=1)
        alone = ~np.isfinite(d2[np.arange(src.size), best])
        out[which] = np.where(alone, src, peers[best])
    return out


def mixup_generate(H, sources, partners, lam) -> np.ndarray:
    """``lam * h_src + (1 - lam) * h_partner`` row by row."""
    lam = np.asarray(lam, dtype=np.float64)[:, None]
    return lam * H[sources] + (1.0 - lam) * H[partners]


def initial_scale(train_counts, cls: int) -> float:
    """Starting over-sampling scale ``N / (M |C_i|)`` for class ``cls``."""
    counts = np.asarray(train_counts)
    return float(counts.sum() / (counts.size * counts[cls]))


@dataclass
class SynthesisPlan:
    """One epoch's synthetic nodes; fixed once drawn so a step is differentiable."""

    scales: dict[int, float]
    sources: np.ndarray
    partners: np.ndarray
    lam: np.ndarray
    labels: np.ndarray
    neighbors: sp.csr_matrix | None = None

    @property
    def size(self) -> int:
        return int(self.sources.size)

    def counts(self) -> dict[int, int]:
        return {c: int(np.sum(self.labels == c)) for c in self.scales}


def synthetic_count(scale: float, labeled: int) -> int:
    return int(math.floor(scale * labeled + 0.5))


def plan_synthesis(H, labels, train_idx, scales: dict, rng) -> SynthesisPlan:
    """Draw sources, nearest partners and mixing weights for every minority class.

    Class ``c`` gets ``round(scales[c] * |labeled c|)`` synthetic nodes;
    sources cycle through a shuffled list of the class's labeled nodes.
    """
    labels = np.asarray(labels)
    train_idx = np.sort(np.asarray(train_idx))
    sources = []
    for c in sorted(scales):
        members = train_idx[labels[train_idx] == c]
        count = synthetic_count(scales[c], members.size)
        if count == 0 or members.size == 0:
            continue
        reps = -(-count // members.size)
        order = np.concatenate([rng.permutation(members) for _ in range(reps)])[:count]
        sources.append(order)
    sources = np.concatenate(sources) if sources else np.zeros(0, dtype=np.int64)
    partners = nearest_same_class_many(H, labels, sources, train_idx) if sources.size else sources.copy()
    lam = rng.random(sources.size)
    return SynthesisPlan(dict(scales), sources, partners, lam, labels[sources].copy())


def edge_scores(Hv, Hu, W) -> np.ndarray:
    """``sigmoid(h_v^T W h_u)`` for every row pair."""
    return sigmoid(Hv @ W @ Hu.T)


def predict_edges(H_new, H, W, eta: float = 0.5) -> sp.csr_matrix:
    """Binary links from new nodes (rows) to existing nodes (columns), score strictly above ``eta``."""
    return sp.csr_matrix((edge_scores(H_new, H, W) > eta).astype(np.float64))


def sample_pairs(n: int, count: int, rng) -> tuple[np.ndarray, np.ndarray]:
    return rng.integers(0, n, size=count), rng.integers(0, n, size=count)


class PathLengthOracle:
    """Truncated path length ``min(d(v, u), 3)`` from precomputed 1- and 2-hop reach."""

    def __init__(self, adjacency):
        a = sp.csr_matrix(adjacency, dtype=bool).astype(np.int8)
        self.one = sp.csr_matrix(a, dtype=bool)
        self.two = sp.csr_matrix((a @ a) > 0)

    def __call__(self, v, u) -> np.ndarray:
        v = np.asarray(v)
        u = np.asarray(u)
        out = np.full(v.size, 3, dtype=np.int64)
        out[np.asarray(self.two[v, u]).ravel()] = 2
        out[np.asarray(self.one[v, u]).ravel()] = 1
        out[v == u] = 0
        return out


def centroid_distance_targets(H, adjacency, clusters: int, seed: int = 0, cap: int = 8) -> tuple[np.ndarray, np.ndarray]:
    """Regression targets for the global-consistency head.

    k-means (``clusters`` centers, 50 iterations) on ``H``; each center is
    anchored at its nearest node, and every node's target is its hop
    distance to each anchor, capped at ``cap`` and divided by ``cap``.
    Returns ``(targets n x clusters, anchor node ids)``.
    """
    km = KMeans(n_clusters=clusters, n_init=1, max_iter=50, random_state=seed).fit(H)
    d2 = ((H[:, None, :] - km.cluster_centers_[None, :, :]) ** 2).sum(axis=2)
    anchors = np.argmin(d2, axis=0)
    targets = np.empty((H.shape[0], clusters))
    for j, a in enumerate(anchors):
        dist = hop_distances(adjacency, int(a), cap)
        dist[~np.isfinite(dist)] = cap
        targets[:, j] = dist / cap
    return targets, anchors


@dataclass
class EdgeLosses:
    rec: float
    local: float
    glob: float

    @property
    def total(self) -> float:
        return self.rec + self.local + self.glob


def edge_losses(H, A, params: dict, pairs, pair_classes, targets, grad: bool = False):
    """Reconstruction, path-length and centroid-distance losses of the edge predictor.

    ``L_rec`` is the mean squared error over all ``n^2`` entries (the
    Frobenius norm divided by ``n^2``); ``L_local`` a mean cross-entropy over
    ``pairs``; ``L_global`` the mean squared Euclidean error to ``targets``.

    With ``grad=True`` also returns gradients w.r.t. ``H`` and the predictor
    parameters ``W, G1, g1, G2, g2, P, pb``.
    """
    n = H.shape[0]
    A = A.toarray() if sp.issparse(A) else np.asarray(A)
    W = params["W"]
    Ahat = sigmoid(H @ W @ H.T)
    R = Ahat - A
    rec = float((R ** 2).sum() / (n * n))

    v, u = pairs
    e = H[v] * H[u]
    a1 = e @ params["G1"] + params["g1"]
    h1 = np.maximum(a1, 0.0)
    logits = h1 @ params["G2"] + params["g2"]
    prob = softmax(logits)
    m = max(v.size, 1)
    local = float(-np.log(prob[np.arange(v.size), pair_classes]).sum() / m) if v.size else 0.0

    r = H @ params["P"] + params["pb"]
    diff = r - targets
    glob = float((diff ** 2).sum() / n)
    losses = EdgeLosses(rec, local, glob)
    if not grad:
        return losses

    g = {}
    dZ = (2.0 / (n * n)) * R * Ahat * (1.0 - Ahat)
    g["W"] = H.T @ dZ @ H
    dH = dZ @ H @ W.T + dZ.T @ H @ W

    dlog = prob.copy()
    dlog[np.arange(v.size), pair_classes] -= 1.0
    dlog /= m
    g["G2"] = h1.T @ dlog
    g["g2"] = dlog.sum(axis=0)
    da1 = (dlog @ params["G2"].T) * (a1 > 0)
    g["G1"] = e.T @ da1
    g["g1"] = da1.sum(axis=0)
    de = da1 @ params["G1"].T
    m_idx = np.arange(v.size)
    scatter_v = sp.csr_matrix((np.ones(v.size), (v, m_idx)), shape=(n, v.size))
    scatter_u = sp.csr_matrix((np.ones(v.size), (u, m_idx)), shape=(n, v.size))
    dH += scatter_v @ (de * H[u]) + scatter_u @ (de * H[v])

    dr = (2.0 / n) * diff
    g["P"] = H.T @ dr
    g["pb"] = dr.sum(axis=0)
    dH += dr @ params["P"].T
    return losses, dH, g


ACTIONS = ("increase", "decrease", "hold")


@dataclass
class QController:
    """Tabular Q-learning over a discretized over-sampling scale.

    States are multiples of ``delta`` in ``[0, alpha_max]``; actions move the
    scale by ``+delta``, ``-delta`` or nothing (in that order, which is also
    the tie-break order of the greedy choice). The reward for the previous
    action is the change in validation accuracy since the last call.
    """

    scale: float
    alpha_max: float = 3.0
    delta: float = 0.05
    epsilon: float = 0.9
    epsilon_decay: float = 0.99
    gamma: float = 1.0
    learning_rate: float = 0.1
    seed: int = 0
    Q: np.ndarray = field(init=False)
    trace: list = field(init=False, default_factory=list)

    def __post_init__(self):
        self.n_states = int(round(self.alpha_max / self.delta)) + 1
        self.Q = np.zeros((self.n_states, len(ACTIONS)))
        self.scale = float(np.clip(self.scale, 0.0, self.alpha_max))
        self.initial = self.scale
        self._rng = np.random.default_rng(self.seed)
        self._prev = None  # (state, action, accuracy)

    @property
    def state(self) -> int:
        return int(np.clip(round(self.scale / self.delta), 0, self.n_states - 1))

    def greedy(self, state=None) -> int:
        return int(np.argmax(self.Q[self.state if state is None else state]))

    def step(self, accuracy: float) -> float:
        s_next = self.state
        reward = None
        if self._prev is not None:
            s, a, prev_acc = self._prev
            reward = accuracy - prev_acc
            target = reward + self.gamma * self.Q[s_next].max()
            self.Q[s, a] += self.learning_rate * (target - self.Q[s, a])
        if self._rng.random() < self.epsilon:
            action = int(self._rng.integers(len(ACTIONS)))
        else:
            action = self.greedy(s_next)
        if ACTIONS[action] == "increase":
            self.scale = min(self.scale + self.delta, self.alpha_max)
        elif ACTIONS[action] == "decrease":
            self.scale = max(self.scale - self.delta, 0.0)
        self._prev = (s_next, action, accuracy)
        self.trace.append({"scale": self.scale, "reward": reward, "action": ACTIONS[action], "epsilon": self.epsilon})
        self.epsilon *= self.epsilon_decay
        return self.scale


def q_controller_step(ctrl: QController, accuracy: float) -> float:
    return ctrl.step(accuracy)
