import numpy as np
import pytest

from smoefed.errors import BudgetError, DimensionError, DomainError
from smoefed.moe import (ActivationCounter, LoraPair, RoutingDecision,
                         SmoeLayer, ToyModel, loss_and_grads,
                         record_activations, route, smoe_forward)
from smoefed.numerics import softmax


def make_layer(m=4, n=4, M=4, rank=2, k_full=None, seed=0, alpha=16.0):
    rng = np.random.default_rng(seed)
    experts = [rng.normal(size=(m, n)) for _ in range(M)]
    router = rng.normal(size=(n, M))
    loras = []
    for _ in range(M):
        loras.append(LoraPair(rng.normal(size=(m, rank)),
                              rng.normal(0, 0.2, size=(rank, n)),
                              rank, alpha))
    return SmoeLayer(experts=experts, router=router, loras=loras,
                     rescaler=1.0, k_full=k_full or M)


def make_model(m=4, n=4, M=3, rank=2, classes=3, d_in=5, seed=0,
               task_kind="classification"):
    rng = np.random.default_rng(seed)
    layer = make_layer(m=m, n=n, M=M, rank=rank, seed=seed + 1)
    embed = rng.normal(size=(n, d_in))
    out_dim = classes if task_kind == "classification" else 2
    head = rng.normal(size=(out_dim, m))
    return ToyModel(embed=embed, smoe=layer, head=head, task_kind=task_kind)


class TestRoute:
    def test_hand_computed_gates(self):
        # identity router so the input is the logit vector directly
        layer = make_layer(m=3, n=3, M=3)
        layer.router = np.eye(3)
        dec = route(layer, np.array([1.0, 3.0, 2.0]), 2)
        assert dec.selected == [1, 2]
        expected = np.array([np.e ** 3, np.e ** 2])
        expected /= expected.sum()
        assert np.allclose(dec.gate_weights, expected, atol=1e-4)
        assert np.allclose(dec.gate_weights, [0.7311, 0.2689], atol=1e-4)

    def test_full_activation_is_plain_softmax(self):
        layer = make_layer(M=4)
        x = np.random.default_rng(1).normal(size=4)
        dec = route(layer, x, 4)
        assert dec.selected == [0, 1, 2, 3]
        assert np.allclose(dec.gate_weights, softmax(layer.router.T @ x))

    def test_tie_break_on_equal_logits(self):
        layer = make_layer(m=3, n=3, M=3)
        layer.router = np.zeros((3, 3))
        dec = route(layer, np.ones(3), 2)
        assert dec.selected == [0, 1]
        assert np.allclose(dec.gate_weights, [0.5, 0.5])

    def test_budget_out_of_range(self):
        layer = make_layer(M=4, k_full=2)
        with pytest.raises(BudgetError):
            route(layer, np.zeros(4), 3)
        with pytest.raises(BudgetError):
            route(layer, np.zeros(4), 0)

    def test_deterministic(self):
        layer = make_layer()
        x = np.random.default_rng(2).normal(size=4)
        d1 = route(layer, x, 2)
        d2 = route(layer, x, 2)
        assert d1.selected == d2.selected
        assert np.array_equal(d1.gate_weights, d2.gate_weights)
        assert len(d1.selected) == 2


class TestSmoeForward:
    def test_identity_expert_zero_delta(self):
        pair = LoraPair(np.random.default_rng(0).normal(size=(3, 2)),
                        np.zeros((2, 3)), 2, 16.0)
        layer = SmoeLayer(experts=[np.eye(3)], router=np.zeros((3, 1)),
                          loras=[pair], rescaler=1.0, k_full=1)
        x = np.array([0.3, -1.0, 2.0])
        h, dec = smoe_forward(layer, x, 1)
        assert np.allclose(h, x, atol=1e-12)
        assert dec.selected == [0]

    def test_linear_in_rescaler(self):
        layer = make_layer()
        x = np.random.default_rng(3).normal(size=4)
        h1, _ = smoe_forward(layer, x, 2)
        layer.rescaler = 2.0
        h2, _ = smoe_forward(layer, x, 2)
        assert np.allclose(h2, 2.0 * h1, atol=0)

    def test_merged_weight_oracle(self):
        layer = make_layer(m=4, n=4, M=4, rank=2, seed=11)
        rng = np.random.default_rng(12)
        for _ in range(20):
            x = rng.normal(size=4)
            h, dec = smoe_forward(layer, x, 2)
            expected = np.zeros(4)
            for g, j in zip(dec.gate_weights, dec.selected):
                merged = layer.experts[j] + layer.loras[j].delta()
                expected += g * (merged @ x)
            assert np.linalg.norm(h - expected) < 1e-9

    def test_dense_mixture_identity(self):
        layer = make_layer(M=5, seed=13)
        rng = np.random.default_rng(14)
        for _ in range(10):
            x = rng.normal(size=4)
            h, _ = smoe_forward(layer, x, 5)
            probs = softmax(layer.router.T @ x)
            dense = np.zeros(4)
            for j in range(5):
                merged = layer.experts[j] + layer.loras[j].delta()
                dense += probs[j] * (merged @ x)
            assert np.linalg.norm(h - dense) < 1e-10

    def test_wrong_input_dim(self):
        layer = make_layer()
        with pytest.raises(DimensionError):
            smoe_forward(layer, np.zeros(5), 2)


def finite_difference_check(model, X, Y, k_i, eps=1e-5, tol=1e-5):
    _, grads, _ = loss_and_grads(model, X, Y, k_i)

    def loss_at():
        val, _, _ = loss_and_grads(model, X, Y, k_i)
        return val

    def check(fd, an):
        return abs(fd - an) / max(1.0, abs(fd), abs(an)) < tol

    for j, pair in enumerate(model.smoe.loras):
        for arr, g in ((pair.a, grads.a[j]), (pair.b, grads.b[j])):
            it = np.nditer(arr, flags=["multi_index"])
            for _ in it:
                idx = it.multi_index
                old = arr[idx]
                arr[idx] = old + eps
                f_plus = loss_at()
                arr[idx] = old - eps
                f_minus = loss_at()
                arr[idx] = old
                assert check((f_plus - f_minus) / (2 * eps), g[idx])
    s = model.smoe.rescaler
    model.smoe.rescaler = s + eps
    f_plus = loss_at()
    model.smoe.rescaler = s - eps
    f_minus = loss_at()
    model.smoe.rescaler = s
    assert check((f_plus - f_minus) / (2 * eps), grads.rescaler)


class TestLossAndGrads:
    def test_perfect_regression_zero_everything(self):
        model = make_model(task_kind="regression", seed=20)
        x = np.random.default_rng(21).normal(size=5)
        y, _ = model.forward(x, 2)
        loss, grads, _ = loss_and_grads(model, [x], [y], 2)
        assert loss == 0.0
        assert grads.rescaler == 0.0
        for ga, gb in zip(grads.a, grads.b):
            assert np.allclose(ga, 0.0) and np.allclose(gb, 0.0)

    def test_uniform_classification_loss_is_log_c(self):
        model = make_model(classes=4, seed=22)
        model.head = np.zeros_like(model.head)   # forces uniform logits
        x = np.random.default_rng(23).normal(size=5)
        loss, _, _ = loss_and_grads(model, [x], [1], 2)
        assert abs(loss - np.log(4)) < 1e-12

    def test_finite_difference_oracle(self):
        model = make_model(m=4, n=4, M=3, rank=2, seed=24)
        model.smoe.rescaler = 1.4
        rng = np.random.default_rng(25)
        X = rng.normal(size=(3, 5))
        Y = [0, 2, 1]
        finite_difference_check(model, X, Y, 2)

    def test_finite_difference_regression(self):
        model = make_model(m=4, n=4, M=3, rank=2, seed=26,
                           task_kind="regression")
        rng = np.random.default_rng(27)
        X = rng.normal(size=(2, 5))
        Y = rng.normal(size=(2, 2))
        finite_difference_check(model, X, Y, 2)

    def test_empty_batch(self):
        model = make_model()
        with pytest.raises(DomainError):
            loss_and_grads(model, np.empty((0, 5)), [], 2)

    def test_target_mismatch(self):
        model = make_model()
        with pytest.raises(DimensionError):
            loss_and_grads(model, np.zeros((2, 5)), [0], 2)


class TestActivationCounter:
    def test_basic_increment(self):
        c = ActivationCounter.zeros(3)
        decisions = [RoutingDecision([0], np.array([1.0])),
                     RoutingDecision([2], np.array([1.0]))]
        c2 = record_activations(c, decisions)
        assert c2.steps == 1
        assert c2.counts.tolist() == [1.0, 0.0, 1.0]
        assert c.steps == 0    # input untouched

    def test_binary_per_step(self):
        c = ActivationCounter.zeros(2)
        decisions = [RoutingDecision([0], np.array([1.0]))] * 50
        c2 = record_activations(c, decisions)
        assert c2.counts[0] == 1.0

    def test_full_activation_frequency_one(self):
        c = ActivationCounter.zeros(3)
        for _ in range(5):
            c = record_activations(
                c, [RoutingDecision([0, 1, 2], np.ones(3) / 3)])
        assert np.all(c.frequencies() == 1.0)
        assert c.steps == 5

    def test_per_example_mode_bounded(self):
        c = ActivationCounter.zeros(2)
        decisions = [RoutingDecision([0], np.array([1.0])),
                     RoutingDecision([1], np.array([1.0]))]
        c2 = record_activations(c, decisions, mode="per_example")
        assert np.allclose(c2.counts, [0.5, 0.5])
        assert np.all(c2.frequencies() <= 1.0)
