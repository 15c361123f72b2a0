import json

import numpy as np
import pytest

from graphsb import ConfigurationError
from graphsb.balance import normalize_adjacency
from graphsb.errors import TrainingDiverged
from graphsb.graph import SbmSpec, SplitSpec, generate_sbm, make_split
from graphsb.train import TrainConfig, TrainState, train


def toy(seed=0, gap=3.0):
    g = generate_sbm(SbmSpec(20, 40, 0.3, 0.03, seed=seed), feature_dim=6, centroid_gap=gap)
    tr, va, te = make_split(g, SplitSpec(rho=0.5, labeled_per_majority=10, minority_classes=(0,), seed=seed))
    return g.with_masks(tr, va, te)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_fits_training_labels(seed):
    g = toy(seed)
    cfg = TrainConfig(max_epochs=300, pretrain_epochs=20, patience=1000, lr=0.01, seed=seed)
    res = train(g, normalize_adjacency(g.adjacency), cfg, (0,))
    assert max(row.get("train_acc", 0) for row in res.history) == 1.0
    assert res.probabilities.shape == (g.n, 2)
    np.testing.assert_allclose(res.probabilities.sum(axis=1), 1.0)


def test_deterministic():
    g = toy(3)
    cfg = TrainConfig(max_epochs=40, pretrain_epochs=5, seed=3)
    a = train(g, normalize_adjacency(g.adjacency), cfg, (0,))
    b = train(g, normalize_adjacency(g.adjacency), cfg, (0,))
    np.testing.assert_array_equal(a.probabilities, b.probabilities)
    assert a.rl_trace == b.rl_trace


def test_phases_and_controller_trace():
    g = toy(4)
    cfg = TrainConfig(max_epochs=60, pretrain_epochs=10, patience=1000, rl_interval=10, seed=4)
    res = train(g, normalize_adjacency(g.adjacency), cfg, (0,))
    phases = [row["phase"] for row in res.history]
    assert phases[:10] == ["pretrain"] * 10 and set(phases[10:]) == {"joint"}
    assert all(row["node_loss"] == 0.0 for row in res.history[:10])
    assert len(res.rl_trace) == 6
    assert all(0.0 <= t["scale"] <= cfg.alpha_max for t in res.rl_trace)
    assert res.history[-1]["n_synthetic"] > 0


def test_no_oversampling():
    g = toy(5)
    cfg = TrainConfig(max_epochs=20, pretrain_epochs=2, oversample="none", seed=5)
    res = train(g, normalize_adjacency(g.adjacency), cfg, (0,))
    assert res.rl_trace == []
    assert all(row["n_synthetic"] == 0 for row in res.history)


def test_checkpoint_roundtrip():
    g = toy(6)
    cfg = TrainConfig(max_epochs=15, pretrain_epochs=3, seed=6)
    res = train(g, normalize_adjacency(g.adjacency), cfg, (0,))
    blob = json.loads(json.dumps(res.state.to_dict()))
    back = TrainState.from_dict(blob)
    for k, v in res.state.params.items():
        np.testing.assert_array_equal(back.params[k], v)
    assert back.optimizer.t == res.state.optimizer.t
    assert back.best_epoch == res.state.best_epoch


def test_non_finite_loss_aborts_with_dump(monkeypatch):
    import graphsb.train as tr

    real = tr.loss_and_grad
    calls = []

    def poisoned(params, batch, **kw):
        parts, grads = real(params, batch, **kw)
        calls.append(1)
        if len(calls) == 4:
            parts.node = float("nan")
            parts.total = float("nan")
        return parts, grads

    monkeypatch.setattr(tr, "loss_and_grad", poisoned)
    g = toy(7)
    with pytest.raises(TrainingDiverged) as exc:
        train(g, normalize_adjacency(g.adjacency), TrainConfig(max_epochs=10, pretrain_epochs=2), (0,))
    assert exc.value.dump["epoch"] == 3 and exc.value.dump["phase"] == "joint"
    assert set(exc.value.dump["param_norms"]) >= {"enc.W1", "cls.C2", "edge.W"}


def test_config_validation():
    with pytest.raises(ConfigurationError):
        TrainConfig(oversample="fixed:abc")
    with pytest.raises(ConfigurationError):
        TrainConfig(p_drop=1.0)
    assert TrainConfig(oversample="fixed:0.5").oversample_mode() == ("fixed", 0.5)


def test_requires_masks():
    g = generate_sbm(SbmSpec(10, 20, 0.3, 0.05))
    with pytest.raises(ConfigurationError):
        train(g, normalize_adjacency(g.adjacency), TrainConfig(max_epochs=1), (0,))


def moving_average(x, w):
    return np.convolve(x, np.ones(w) / w, mode="valid")


def test_loss_trajectory_bitwise_reproducible():
    g = toy(8)
    cfg = TrainConfig(max_epochs=30, pretrain_epochs=5, seed=8)
    a = [row["loss"] for row in train(g, normalize_adjacency(g.adjacency), cfg, (0,)).history]
    b = [row["loss"] for row in train(g, normalize_adjacency(g.adjacency), cfg, (0,)).history]
    assert a == b


def test_joint_loss_moving_average_decreases():
    g = toy(9)
    cfg = TrainConfig(max_epochs=300, pretrain_epochs=0, patience=1000, seed=9)
    loss = np.array([row["loss"] for row in train(g, normalize_adjacency(g.adjacency), cfg, (0,)).history])
    ma = moving_average(loss, 100)
    assert ma[-1] < ma[0]


def test_pretraining_edge_loss_decreases():
    g = toy(10)
    cfg = TrainConfig(max_epochs=0, pretrain_epochs=200, seed=10)
    edge = np.array([row["edge_loss"] for row in train(g, normalize_adjacency(g.adjacency), cfg, (0,)).history])
    assert len(edge) == 200
    ma = moving_average(edge, 50)
    assert ma[-1] < ma[0]
