import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from graphsb.graph import adjacency_from_edges, hop_distances
from graphsb.synthesis import (
    ACTIONS,
    PathLengthOracle,
    QController,
    centroid_distance_targets,
    edge_losses,
    edge_scores,
    initial_scale,
    mixup_generate,
    nearest_same_class,
    nearest_same_class_many,
    plan_synthesis,
    predict_edges,
    sigmoid,
    synthetic_count,
)


class TestNearest:
    def test_pair(self):
        H = np.array([[0.0], [3.0]])
        labels = np.array([1, 1])
        assert nearest_same_class(H, labels, 0) == 1
        assert nearest_same_class(H, labels, 1) == 0

    def test_line(self):
        H = np.array([[0.0], [1.0], [5.0]])
        assert nearest_same_class(H, np.zeros(3, int), 0) == 1

    def test_singleton_duplicates(self):
        H = np.array([[0.0], [1.0]])
        assert nearest_same_class(H, np.array([0, 1]), 0) == 0

    def test_tie_smaller_id(self):
        H = np.array([[0.0], [1.0], [-1.0]])
        assert nearest_same_class(H, np.zeros(3, int), 0) == 1

    def test_pool_restricts(self):
        H = np.array([[0.0], [1.0], [2.0]])
        assert nearest_same_class(H, np.zeros(3, int), 0, pool=[0, 2]) == 2

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_random_against_exhaustive(self, seed):
        rng = np.random.default_rng(seed)
        H = rng.normal(size=(20, 3))
        labels = rng.integers(0, 3, 20)
        pool = np.flatnonzero(rng.random(20) < 0.7)
        for v in range(20):
            best, bd = v, np.inf
            for u in sorted(pool):
                if u != v and labels[u] == labels[v]:
                    d = math.dist(H[u], H[v])
                    if d < bd:
                        best, bd = u, d
            assert nearest_same_class(H, labels, v, pool) == best
        many = nearest_same_class_many(H, labels, np.arange(20), pool)
        assert many.tolist() == [nearest_same_class(H, labels, v, pool) for v in range(20)]


class TestMixup:
    def test_lambda_one(self):
        H = np.array([[1.0, 2.0], [5.0, 6.0]])
        np.testing.assert_array_equal(mixup_generate(H, [0], [1], [1.0]), [[1.0, 2.0]])

    def test_midpoint(self):
        H = np.array([[0.0, 0.0], [2.0, 4.0]])
        np.testing.assert_array_equal(mixup_generate(H, [0], [1], [0.5]), [[1.0, 2.0]])

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000))
    def test_convex(self, seed):
        rng = np.random.default_rng(seed)
        H = rng.normal(size=(10, 4))
        src, dst, lam = rng.integers(0, 10, 15), rng.integers(0, 10, 15), rng.random(15)
        out = mixup_generate(H, src, dst, lam)
        lo = np.minimum(H[src], H[dst]) - 1e-12
        hi = np.maximum(H[src], H[dst]) + 1e-12
        assert ((out >= lo) & (out <= hi)).all()


class TestPlan:
    def test_counts_and_bookkeeping(self):
        rng = np.random.default_rng(0)
        labels = np.array([0] * 10 + [1] * 20 + [2] * 5)
        train = np.arange(35)
        H = rng.normal(size=(35, 3))
        plan = plan_synthesis(H, labels, train, {0: 1.5, 2: 0.3}, rng)
        assert plan.counts() == {0: 15, 2: 2}
        for c, extra in plan.counts().items():
            orig = int((labels == c).sum())
            assert orig + extra == math.floor((1 + plan.scales[c]) * orig + 0.5)
        assert ((plan.lam >= 0) & (plan.lam <= 1)).all()
        assert (labels[plan.sources] == plan.labels).all()
        assert (labels[plan.partners] == plan.labels).all()

    def test_zero_scale(self):
        plan = plan_synthesis(np.zeros((4, 2)), np.array([0, 0, 1, 1]), np.arange(4), {0: 0.0}, np.random.default_rng(0))
        assert plan.size == 0

    def test_initial_scale(self):
        assert initial_scale([20, 20, 10], 2) == pytest.approx(50 / 30)
        assert synthetic_count(0.25, 10) == 3


class TestEdges:
    def test_zero_weight_no_edges(self):
        H = np.random.default_rng(0).normal(size=(5, 3))
        np.testing.assert_array_equal(edge_scores(H, H, np.zeros((3, 3))), 0.5)
        assert predict_edges(H[:2], H, np.zeros((3, 3)), 0.5).nnz == 0

    def test_symmetric_scores(self):
        rng = np.random.default_rng(1)
        H = rng.normal(size=(6, 3))
        W = rng.normal(size=(3, 3))
        W = W + W.T
        s = edge_scores(H, H, W)
        np.testing.assert_allclose(s, s.T, atol=1e-15)

    def test_hand_two_by_two(self):
        H = np.array([[1.0, 0.0], [0.0, 2.0]])
        W = np.array([[0.5, -1.0], [1.0, 0.25]])
        expected = 1 / (1 + np.exp(-np.array([[0.5, -2.0], [2.0, 1.0]])))
        np.testing.assert_allclose(edge_scores(H, H, W), expected, atol=1e-12)
        np.testing.assert_array_equal(predict_edges(H, H, W, 0.5).toarray(), [[1, 0], [1, 1]])

    def test_sigmoid_extremes(self):
        assert sigmoid(np.array([-800.0]))[0] == 0.0
        assert sigmoid(np.array([800.0]))[0] == 1.0


def reference_edge_losses(H, A, P, pairs, classes, targets):
    n = H.shape[0]
    rec = 0.0
    for i in range(n):
        for j in range(n):
            s = 1.0 / (1.0 + math.exp(-(H[i] @ P["W"] @ H[j])))
            rec += (s - A[i, j]) ** 2
    rec /= n * n
    local = 0.0
    for v, u, c in zip(*pairs, classes):
        h = np.maximum((H[v] * H[u]) @ P["G1"] + P["g1"], 0)
        z = h @ P["G2"] + P["g2"]
        local += -(z[c] - math.log(np.exp(z).sum()))
    local /= len(classes)
    glob = sum(float(((H[i] @ P["P"] + P["pb"] - targets[i]) ** 2).sum()) for i in range(n)) / n
    return rec, local, glob


class TestEdgeLosses:
    def setup_method(self):
        rng = np.random.default_rng(7)
        self.n, F, T = 9, 4, 3
        self.A = adjacency_from_edges(rng.integers(0, 9, 12), rng.integers(0, 9, 12), 9)
        self.H = rng.normal(size=(9, F))
        self.P = {
            "W": rng.normal(size=(F, F)),
            "G1": rng.normal(size=(F, F)),
            "g1": rng.normal(size=F),
            "G2": rng.normal(size=(F, 4)),
            "g2": rng.normal(size=4),
            "P": rng.normal(size=(F, T)),
            "pb": rng.normal(size=T),
        }
        self.pairs = (rng.integers(0, 9, 25), rng.integers(0, 9, 25))
        self.classes = PathLengthOracle(self.A)(*self.pairs)
        self.targets = rng.random((9, T))

    def test_reference(self):
        got = edge_losses(self.H, self.A, self.P, self.pairs, self.classes, self.targets)
        ref = reference_edge_losses(self.H, self.A.toarray(), self.P, self.pairs, self.classes, self.targets)
        np.testing.assert_allclose([got.rec, got.local, got.glob], ref, rtol=1e-10)
        assert got.total == pytest.approx(sum(ref))
        assert min(got.rec, got.local, got.glob) >= 0

    def test_perfect_reconstruction(self):
        A = sigmoid(self.H @ self.P["W"] @ self.H.T)
        got = edge_losses(self.H, A, self.P, self.pairs, self.classes, self.targets)
        assert got.rec == 0.0

    def test_confident_local_term(self):
        P = dict(self.P)
        P["G1"] = np.zeros_like(P["G1"])
        P["g1"] = np.zeros_like(P["g1"])
        pairs = (np.array([0, 1]), np.array([2, 3]))
        g2 = np.full(4, -50.0)
        g2[2] = 50.0
        P["g2"] = g2
        got = edge_losses(self.H, self.A, P, pairs, np.array([2, 2]), self.targets)
        assert got.local < 1e-30

    def test_grad_matches_fd_for_W(self):
        _, dH, g = edge_losses(self.H, self.A, self.P, self.pairs, self.classes, self.targets, grad=True)
        eps = 1e-6
        for key in ("W", "G2", "P"):
            for idx in [(0, 0), (1, 2), (3, 1)]:
                P = {k: v.copy() for k, v in self.P.items()}
                P[key][idx] += eps
                up = edge_losses(self.H, self.A, P, self.pairs, self.classes, self.targets).total
                P[key][idx] -= 2 * eps
                down = edge_losses(self.H, self.A, P, self.pairs, self.classes, self.targets).total
                assert g[key][idx] == pytest.approx((up - down) / (2 * eps), rel=1e-5, abs=1e-9)


class TestPathOracle:
    def test_against_bfs(self):
        rng = np.random.default_rng(3)
        A = adjacency_from_edges(rng.integers(0, 30, 40), rng.integers(0, 30, 40), 30)
        v, u = rng.integers(0, 30, 300), rng.integers(0, 30, 300)
        got = PathLengthOracle(A)(v, u)
        for a, b, c in zip(v, u, got):
            d = hop_distances(A, int(a), 3)[b]
            assert c == (3 if not np.isfinite(d) else min(int(d), 3))


class TestCentroidTargets:
    def test_shape_and_range(self):
        rng = np.random.default_rng(0)
        A = adjacency_from_edges(np.arange(19), np.arange(1, 20), 20)
        H = rng.normal(size=(20, 3))
        targets, anchors = centroid_distance_targets(H, A, 3, seed=0, cap=8)
        assert targets.shape == (20, 3)
        assert ((targets >= 0) & (targets <= 1)).all()
        for j, a in enumerate(anchors):
            assert targets[a, j] == 0.0
            assert targets[:, j] == pytest.approx(np.minimum(np.abs(np.arange(20) - a), 8) / 8)

    def test_deterministic(self):
        rng = np.random.default_rng(1)
        A = sp.csr_matrix((10, 10))
        H = rng.normal(size=(10, 2))
        a = centroid_distance_targets(H, A, 2, seed=5)
        b = centroid_distance_targets(H, A, 2, seed=5)
        np.testing.assert_array_equal(a[0], b[0])


class TestQController:
    def test_first_greedy_action(self):
        c = QController(1.0, epsilon=0.0)
        c.step(0.5)
        assert c.trace[0]["action"] == ACTIONS[0] == "increase"
        assert c.scale == pytest.approx(1.05)

    def test_zero_reward_fixed_point(self):
        c = QController(1.0, seed=3)
        for _ in range(200):
            c.step(0.7)
        assert not c.Q.any()

    def test_scripted_schedule(self):
        c = QController(1.0, seed=0)
        acc = 0.5
        for _ in range(50):
            c.step(acc)
            acc += 0.01 if c.trace[-1]["action"] == "increase" else -0.01
        assert ACTIONS[c.greedy()] == "increase"

    def test_bounds_and_finiteness(self):
        c = QController(2.9, alpha_max=3.0, seed=1)
        rng = np.random.default_rng(1)
        for _ in range(500):
            c.step(float(rng.random()))
            assert 0.0 <= c.scale <= 3.0
        assert np.isfinite(c.Q).all()
        assert c.epsilon == pytest.approx(0.9 * 0.99 ** 500)

    def test_clip_initial(self):
        assert QController(7.0, alpha_max=3.0).scale == 3.0
