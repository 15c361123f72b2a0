"""Two-phase training: edge-predictor pretraining, then joint node + edge optimization."""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp

from graphsb.balance import EntryDropout
from graphsb.errors import ConfigurationError, TrainingDiverged
from graphsb.graph import Graph
from graphsb.metrics import accuracy, macro_f1
from graphsb.model import (
    CLASSIFIER,
    EDGE,
    ENCODER,
    Adam,
    Batch,
    classify,
    dropout_masks,
    encode,
    init_params,
    loss_and_grad,
    row_normalize,
)
from graphsb.synthesis import (
    PathLengthOracle,
    QController,
    centroid_distance_targets,
    initial_scale,
    plan_synthesis,
    predict_edges,
    sample_pairs,
)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    hidden: int = 32
    lr: float = 0.001
    weight_decay: float = 5e-4
    max_epochs: int = 4000
    pretrain_epochs: int = 50
    patience: int = 200
    feature_dropout: float = 0.5
    edge_loss_weight: float = 1.0
    eta: float = 0.5
    p_drop: float = 0.1
    oversample: str = "rl"  # "rl", "fixed:<x>" or "none"
    rl_interval: int = 10
    rl_epsilon: float = 0.9
    rl_epsilon_decay: float = 0.99
    rl_gamma: float = 1.0
    rl_delta: float = 0.05
    rl_learning_rate: float = 0.1
    alpha_max: float = 3.0
    pair_factor: int = 10
    distance_cap: int = 8
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.feature_dropout < 1.0:
            raise ConfigurationError("feature_dropout must lie in [0, 1)")
        if not 0.0 <= self.p_drop < 1.0:
            raise ConfigurationError("p_drop must lie in [0, 1)")
        if self.max_epochs < 0 or self.pretrain_epochs < 0:
            raise ConfigurationError("epoch counts must be non-negative")
        self.oversample_mode()

    def oversample_mode(self) -> tuple[str, float | None]:
        mode = self.oversample
        if mode in ("rl", "none"):
            return mode, None
        if mode.startswith("fixed:"):
            try:
                return "fixed", float(mode.split(":", 1)[1])
            except ValueError:
                pass
        raise ConfigurationError(f"oversample must be 'rl', 'none' or 'fixed:<x>', got {mode!r}")


@dataclass
class TrainState:
    params: dict
    optimizer: Adam
    epoch: int = 0
    phase: str = "pretrain"
    seed: int = 0
    best_epoch: int = -1
    best_val_f1: float = -1.0
    scales: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "version": 1,
            "epoch": self.epoch,
            "phase": self.phase,
            "seed": self.seed,
            "best_epoch": self.best_epoch,
            "best_val_f1": self.best_val_f1,
            "scales": {str(k): v for k, v in self.scales.items()},
            "params": {k: v.tolist() for k, v in self.params.items()},
            "adam": {
                "t": self.optimizer.t,
                "m": {k: v.tolist() for k, v in self.optimizer.m.items()},
                "v": {k: v.tolist() for k, v in self.optimizer.v.items()},
                "lr": self.optimizer.lr,
                "weight_decay": self.optimizer.weight_decay,
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainState":
        adam = d["adam"]
        opt = Adam(lr=adam["lr"], weight_decay=adam["weight_decay"])
        opt.t = dict(adam["t"])
        opt.m = {k: np.asarray(v) for k, v in adam["m"].items()}
        opt.v = {k: np.asarray(v) for k, v in adam["v"].items()}
        return cls(
            params={k: np.asarray(v, dtype=np.float64) for k, v in d["params"].items()},
            optimizer=opt,
            epoch=d["epoch"],
            phase=d["phase"],
            seed=d["seed"],
            best_epoch=d["best_epoch"],
            best_val_f1=d["best_val_f1"],
            scales={int(k): v for k, v in d["scales"].items()},
        )


@dataclass
class TrainResult:
    state: TrainState
    history: list
    rl_trace: list
    embeddings: np.ndarray
    probabilities: np.ndarray
    global_anchors: np.ndarray


def evaluate(params, S, X, agg) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode embeddings and class probabilities for every original node."""
    H = encode(S, X, params).H
    return H, classify(H, agg @ H, params)


def train(g: Graph, S, config: TrainConfig, minority, dropout_operator: bool = True) -> TrainResult:
    """Train on ``g`` (its adjacency is the possibly enhanced graph) with operator ``S``.

    ``dropout_operator`` toggles per-epoch symmetric entry dropout on ``S``
    (off when relation diffusion is ablated and ``S`` is the plain normalized
    adjacency). Each epoch reseeds from ``(seed, epoch)``, so runs are
    reproducible bit for bit on a fixed thread count.
    """
    if g.train_mask is None or g.val_mask is None:
        raise ConfigurationError("train() needs train and validation masks")
    dropper = EntryDropout(S)
    S = dropper.base
    X = g.features
    n = g.n
    C = g.num_classes
    labeled = np.flatnonzero(g.train_mask)
    val = np.flatnonzero(g.val_mask)
    minority = tuple(sorted(int(c) for c in minority))
    agg = row_normalize(g.adjacency)
    recon = g.adjacency.toarray()
    path_oracle = PathLengthOracle(g.adjacency)

    params = init_params(X.shape[1], config.hidden, C, C, [config.seed, 0])
    opt = Adam(lr=config.lr, weight_decay=config.weight_decay)
    state = TrainState(params, opt, seed=config.seed)

    H0, _ = evaluate(params, S, X, agg)
    targets, anchors = centroid_distance_targets(H0, g.adjacency, C, seed=config.seed, cap=config.distance_cap)

    mode, fixed = config.oversample_mode()
    train_counts = np.bincount(g.labels[labeled], minlength=C)
    controllers = {}
    if mode == "rl":
        for c in minority:
            controllers[c] = QController(
                initial_scale(train_counts, c),
                alpha_max=config.alpha_max,
                delta=config.rl_delta,
                epsilon=config.rl_epsilon,
                epsilon_decay=config.rl_epsilon_decay,
                gamma=config.rl_gamma,
                learning_rate=config.rl_learning_rate,
                seed=config.seed * 1000 + c,
            )
        state.scales = {c: ctl.scale for c, ctl in controllers.items()}
    elif mode == "fixed":
        state.scales = {c: fixed for c in minority}

    history, rl_trace = [], []
    best_params = copy.deepcopy(params)
    best_key = (-np.inf, -np.inf)
    since_best = 0
    total_epochs = config.pretrain_epochs + config.max_epochs

    for epoch in range(total_epochs):
        pretrain = epoch < config.pretrain_epochs
        state.phase = "pretrain" if pretrain else "joint"
        rng = np.random.default_rng([config.seed, epoch + 1])
        S_ep = dropper.sample(config.p_drop, rng) if dropout_operator else S
        masks = dropout_masks(rng, (n, config.hidden), config.feature_dropout)
        cache = encode(S_ep, X, params, train_mode=True, masks=masks)
        plan = None
        if not pretrain and state.scales:
            plan = plan_synthesis(cache.H, g.labels, labeled, state.scales, rng)
            if plan.size:
                Hs = plan.lam[:, None] * cache.H[plan.sources] + (1 - plan.lam[:, None]) * cache.H[plan.partners]
                plan.neighbors = row_normalize(predict_edges(Hs, cache.H, params["edge.W"], config.eta))
        pv, pu = sample_pairs(n, config.pair_factor * n, rng)
        batch = Batch(
            S=S_ep,
            X=X,
            masks=masks,
            agg=agg,
            labeled=labeled,
            labels=g.labels,
            recon_target=recon,
            pairs=(pv, pu),
            pair_classes=path_oracle(pv, pu),
            global_targets=targets,
            plan=plan,
            node_weight=0.0 if pretrain else 1.0,
            edge_weight=1.0 if pretrain else config.edge_loss_weight,
        )
        parts, grads = loss_and_grad(params, batch, cache=cache)
        if not np.isfinite(parts.total):
            raise TrainingDiverged(
                f"non-finite loss at epoch {epoch}",
                dump={
                    "epoch": epoch,
                    "phase": state.phase,
                    "node_loss": parts.node,
                    "edge_losses": asdict(parts.edge),
                    "param_norms": {k: float(np.linalg.norm(v)) for k, v in params.items()},
                },
            )
        keys = ENCODER + EDGE if pretrain else ENCODER + CLASSIFIER + EDGE
        opt.step(params, grads, keys=keys)
        state.epoch = epoch + 1

        row = {
            "epoch": epoch,
            "phase": state.phase,
            "loss": parts.total,
            "node_loss": parts.node,
            "rec_loss": parts.edge.rec,
            "local_loss": parts.edge.local,
            "global_loss": parts.edge.glob,
            "edge_loss": parts.edge.total,
            "n_synthetic": parts.n_synthetic,
        }
        if not pretrain:
            _, prob = evaluate(params, S, X, agg)
            pred = prob.argmax(axis=1)
            val_f1 = macro_f1(g.labels[val], pred[val])
            val_acc = accuracy(g.labels[val], pred[val])
            row.update(train_acc=accuracy(g.labels[labeled], pred[labeled]), val_acc=val_acc, val_f1=val_f1)
            val_loss = -float(np.mean(np.log(np.clip(prob[val, g.labels[val]], 1e-300, None))))
            key = (val_f1, -val_loss)
            if key > best_key:
                best_key = key
                best_params = copy.deepcopy(params)
                state.best_epoch = epoch
                state.best_val_f1 = val_f1
                since_best = 0
            else:
                since_best += 1
            if controllers and (epoch - config.pretrain_epochs) % config.rl_interval == 0:
                for c, ctl in controllers.items():
                    state.scales[c] = ctl.step(val_acc)
                    rl_trace.append({"epoch": epoch, "class": c, **ctl.trace[-1]})
            if since_best >= config.patience:
                history.append(row)
                log.info("early stop at epoch %d (best %d)", epoch, state.best_epoch)
                break
        history.append(row)

    if state.best_epoch < 0:
        best_params = copy.deepcopy(params)
    H, prob = evaluate(best_params, S, X, agg)
    state.params = best_params
    return TrainResult(state, history, rl_trace, H, prob, anchors)
