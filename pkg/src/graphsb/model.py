"""Two-layer diffusion encoder, concatenation classifier, analytic gradients and Adam.

Parameters live in one flat dict of float64 arrays:

``enc.W1 (p0, F)``, ``enc.b1 (F)``, ``enc.W2 (F, F)``, ``enc.b2 (F)``
    encoder layers ``dropout(relu(S @ H @ W + b))``
``cls.C1 (F, 2F)``, ``cls.C2 (C, F)``
    classifier ``softmax(C2 @ relu(C1 @ [h_v || agg_v]))``
``edge.W (F, F)``, ``edge.G1 (F, F)``, ``edge.g1``, ``edge.G2 (F, 4)``, ``edge.g2``, ``edge.P (F, T)``, ``edge.pb``
    bilinear link scorer, path-length MLP and centroid-distance regressor
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from graphsb.synthesis import PATH_CLASSES, EdgeLosses, SynthesisPlan, edge_losses, softmax

ENCODER = ("enc.W1", "enc.b1", "enc.W2", "enc.b2")
CLASSIFIER = ("cls.C1", "cls.C2")
EDGE = ("edge.W", "edge.G1", "edge.g1", "edge.G2", "edge.g2", "edge.P", "edge.pb")


def glorot(rng, fan_in, fan_out, shape=None):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


def init_params(in_dim: int, hidden: int, num_classes: int, clusters: int, seed) -> dict:
    rng = np.random.default_rng(seed)
    F = hidden
    return {
        "enc.W1": glorot(rng, in_dim, F),
        "enc.b1": np.zeros(F),
        "enc.W2": glorot(rng, F, F),
        "enc.b2": np.zeros(F),
        "cls.C1": glorot(rng, 2 * F, F, shape=(F, 2 * F)),
        "cls.C2": glorot(rng, F, num_classes, shape=(num_classes, F)),
        "edge.W": glorot(rng, F, F),
        "edge.G1": glorot(rng, F, F),
        "edge.g1": np.zeros(F),
        "edge.G2": glorot(rng, F, PATH_CLASSES),
        "edge.g2": np.zeros(PATH_CLASSES),
        "edge.P": glorot(rng, F, clusters),
        "edge.pb": np.zeros(clusters),
    }


def edge_view(params: dict) -> dict:
    return {k[5:]: v for k, v in params.items() if k.startswith("edge.")}


def row_normalize(adjacency) -> sp.csr_matrix:
    """``D^{-1} A`` with empty rows left at zero."""
    a = sp.csr_matrix(adjacency, dtype=np.float64)
    deg = np.asarray(a.sum(axis=1)).ravel()
    inv = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
    return sp.csr_matrix(sp.diags(inv) @ a)


def dropout_masks(rng, shape, p: float, layers: int = 2):
    """Inverted-dropout multipliers (0 or ``1/(1-p)``), one per layer."""
    if p <= 0.0:
        return [np.ones(shape) for _ in range(layers)]
    return [(rng.random(shape) >= p) / (1.0 - p) for _ in range(layers)]


@dataclass
class EncoderCache:
    XW1: np.ndarray
    Z1: np.ndarray
    H1: np.ndarray
    Z2: np.ndarray
    H: np.ndarray
    masks: list | None


def encode(S, X, params, train_mode: bool = False, masks=None) -> EncoderCache:
    """Both encoder layers. Dropout multipliers ``masks`` apply only when ``train_mode``."""
    if X.shape[1] != params["enc.W1"].shape[0]:
        raise ValueError(f"feature width {X.shape[1]} does not match W1 {params['enc.W1'].shape}")
    if S.shape != (X.shape[0], X.shape[0]):
        raise ValueError(f"operator shape {S.shape} does not match {X.shape[0]} nodes")
    XW1 = X @ params["enc.W1"]
    Z1 = S @ XW1 + params["enc.b1"]
    H1 = np.maximum(Z1, 0.0)
    if train_mode and masks is not None:
        H1 = H1 * masks[0]
    Z2 = S @ (H1 @ params["enc.W2"]) + params["enc.b2"]
    H = np.maximum(Z2, 0.0)
    if train_mode and masks is not None:
        H = H * masks[1]
    return EncoderCache(XW1, Z1, H1, Z2, H, masks if train_mode else None)


def classify(own, agg, params) -> np.ndarray:
    """Class probabilities for rows ``[own || agg]``."""
    U = np.hstack([own, agg])
    Q = np.maximum(U @ params["cls.C1"].T, 0.0)
    return softmax(Q @ params["cls.C2"].T)


def classify_node(H_O, A_O, v: int, params) -> np.ndarray:
    """Probability vector for one node of the augmented set.

    ``H_O`` holds one embedding per row; ``A_O[:, v]`` is ``v``'s (binary)
    neighbor column, averaged over its nonzeros.
    """
    col = np.asarray(A_O[:, v].todense() if sp.issparse(A_O) else A_O[:, v], dtype=np.float64).ravel()
    deg = col.sum()
    agg = (col @ H_O) / deg if deg > 0 else np.zeros(H_O.shape[1])
    return classify(H_O[v][None, :], agg[None, :], params)[0]


def node_loss(prob, labels) -> float:
    """Mean cross-entropy of probability rows against integer labels."""
    prob = np.asarray(prob)
    labels = np.asarray(labels)
    if labels.size == 0:
        return 0.0
    p = np.clip(prob[np.arange(labels.size), labels], 1e-300, None)
    return float(-np.log(p).mean())


@dataclass
class Batch:
    """Everything fixed for one optimization step.

    ``agg`` is the row-normalized adjacency used for the classifier's
    neighbor term; ``plan.neighbors`` the row-normalized predicted links of
    synthetic nodes. ``node_weight`` is 0 in the edge-only pretraining phase.
    """

    S: sp.csr_matrix
    X: np.ndarray
    masks: list | None
    agg: sp.csr_matrix
    labeled: np.ndarray
    labels: np.ndarray
    recon_target: np.ndarray
    pairs: tuple
    pair_classes: np.ndarray
    global_targets: np.ndarray
    plan: SynthesisPlan | None = None
    node_weight: float = 1.0
    edge_weight: float = 1.0


@dataclass
class LossParts:
    node: float
    edge: EdgeLosses
    total: float
    n_synthetic: int = 0
    train_acc: float = float("nan")


def loss_and_grad(params: dict, batch: Batch, cache: EncoderCache | None = None, grad: bool = True):
    """Composite loss ``node_weight * L_node + edge_weight * L_edge`` and its exact gradient."""
    if cache is None:
        cache = encode(batch.S, batch.X, params, train_mode=batch.masks is not None, masks=batch.masks)
    H = cache.H
    n, F = H.shape
    dH = np.zeros_like(H)
    grads = {k: np.zeros_like(v) for k, v in params.items()}

    node = 0.0
    train_acc = float("nan")
    n_syn = 0
    if batch.node_weight > 0.0 and (batch.labeled.size or (batch.plan is not None and batch.plan.size)):
        lab = batch.labeled
        agg_rows = batch.agg[lab]
        own = H[lab]
        agg = agg_rows @ H
        y = batch.labels[lab]
        plan = batch.plan
        if plan is not None and plan.size:
            n_syn = plan.size
            lam = plan.lam[:, None]
            Hs = lam * H[plan.sources] + (1.0 - lam) * H[plan.partners]
            own = np.vstack([own, Hs])
            agg = np.vstack([agg, plan.neighbors @ H])
            y = np.concatenate([y, plan.labels])
        U = np.hstack([own, agg])
        Zc = U @ params["cls.C1"].T
        Qc = np.maximum(Zc, 0.0)
        prob = softmax(Qc @ params["cls.C2"].T)
        node = node_loss(prob, y)
        train_acc = float(np.mean(prob[: lab.size].argmax(axis=1) == y[: lab.size])) if lab.size else float("nan")
        if grad:
            N = y.size
            dlog = prob.copy()
            dlog[np.arange(N), y] -= 1.0
            dlog *= batch.node_weight / N
            grads["cls.C2"] += dlog.T @ Qc
            dZc = (dlog @ params["cls.C2"]) * (Zc > 0)
            grads["cls.C1"] += dZc.T @ U
            dU = dZc @ params["cls.C1"]
            nl = lab.size
            np.add.at(dH, lab, dU[:nl, :F])
            dH += agg_rows.T @ dU[:nl, F:]
            if n_syn:
                dHs = dU[nl:, :F]
                np.add.at(dH, plan.sources, lam * dHs)
                np.add.at(dH, plan.partners, (1.0 - lam) * dHs)
                dH += plan.neighbors.T @ dU[nl:, F:]

    ev = edge_view(params)
    if batch.edge_weight > 0.0:
        if grad:
            edge, dH_e, g_e = edge_losses(
                H, batch.recon_target, ev, batch.pairs, batch.pair_classes, batch.global_targets, grad=True
            )
            dH += batch.edge_weight * dH_e
            for k, v in g_e.items():
                grads["edge." + k] += batch.edge_weight * v
        else:
            edge = edge_losses(H, batch.recon_target, ev, batch.pairs, batch.pair_classes, batch.global_targets)
    else:
        edge = EdgeLosses(0.0, 0.0, 0.0)

    total = batch.node_weight * node + batch.edge_weight * edge.total
    parts = LossParts(node, edge, total, n_syn, train_acc)
    if not grad:
        return parts, None

    S_T = batch.S.T
    if cache.masks is not None:
        dH = dH * cache.masks[1]
    dZ2 = dH * (cache.Z2 > 0)
    grads["enc.b2"] += dZ2.sum(axis=0)
    G2 = S_T @ dZ2
    grads["enc.W2"] += cache.H1.T @ G2
    dH1 = G2 @ params["enc.W2"].T
    if cache.masks is not None:
        dH1 = dH1 * cache.masks[0]
    dZ1 = dH1 * (cache.Z1 > 0)
    grads["enc.b1"] += dZ1.sum(axis=0)
    grads["enc.W1"] += batch.X.T @ (S_T @ dZ1)
    return parts, grads


@dataclass
class Adam:
    """Adam with L2 weight decay added to the gradient (the classic GCN setup)."""

    lr: float = 0.001
    weight_decay: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: dict = field(default_factory=dict)
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict, grads: dict, keys=None) -> None:
        """Update ``params`` in place; ``keys`` restricts the update to a subset.

        Step counts (and so bias corrections) are kept per parameter, since
        the classifier only starts moving after the pretraining phase.
        """
        for k in keys if keys is not None else params:
            g = grads[k]
            if self.weight_decay:
                g = g + self.weight_decay * params[k]
            m = self.m.get(k)
            if m is None:
                m = self.m[k] = np.zeros_like(params[k])
                self.v[k] = np.zeros_like(params[k])
                self.t[k] = 0
            self.t[k] += 1
            b1c = 1.0 - self.beta1 ** self.t[k]
            b2c = 1.0 - self.beta2 ** self.t[k]
            v = self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[k] -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)

    def state_dict(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v, "lr": self.lr, "weight_decay": self.weight_decay}


def adam_step(params: dict, grads: dict, opt: Adam) -> dict:
    opt.step(params, grads)
    return params
