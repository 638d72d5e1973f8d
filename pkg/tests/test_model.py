import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flce.model import (
    ModelConfig,
    ModelParams,
    TrainConfig,
    finite_difference_errors,
    forward,
    forward_batch,
    gradient_check,
    local_train,
    loss_and_grad,
    loss_ce,
    loss_supcon,
    sgd_step,
)
from flce.numerics import DegenerateVectorError, SeededRng


def small_net(seed=0, input_dim=5, num_classes=3, hidden=(12,), repr_dim=6):
    cfg = ModelConfig(input_dim, num_classes, hidden, repr_dim)
    return ModelParams.init(cfg, SeededRng(seed))


def supcon_reference(Z, labels, tau):
    """Loop-by-loop evaluation of the contrastive loss with self excluded."""
    N = len(Z)
    U = [np.asarray(z, float) / np.linalg.norm(z) for z in Z]
    total = 0.0
    for i in range(N):
        pos = [j for j in range(N) if j != i and labels[j] == labels[i]]
        if not pos:
            continue
        denom = sum(math.exp(U[i] @ U[k] / tau) for k in range(N) if k != i)
        total += -sum(math.log(math.exp(U[i] @ U[j] / tau) / denom) for j in pos) / len(pos)
    return total / N


def ce_sgd_reference(params, X, y, lr):
    """Per-sample backprop through a one-hidden-layer net, CE loss only."""
    W1, W2, W3 = params.weights
    b1, b2, b3 = params.biases
    grads = [np.zeros_like(a) for a in (W1, b1, W2, b2, W3, b3)]
    for x, label in zip(X, y):
        h_pre = x @ W1 + b1
        h = np.maximum(h_pre, 0)
        z = h @ W2 + b2
        logits = z @ W3 + b3
        p = np.exp(logits - logits.max())
        p /= p.sum()
        d = p.copy()
        d[label] -= 1
        grads[4] += np.outer(z, d)
        grads[5] += d
        dz = W3 @ d
        grads[2] += np.outer(h, dz)
        grads[3] += dz
        dh = (W2 @ dz) * (h_pre > 0)
        grads[0] += np.outer(x, dh)
        grads[1] += dh
    new = params.copy()
    for a, g in zip(new.arrays(), grads):
        a -= lr * g / len(X)
    return new


class TestForward:
    def test_zero_weights(self):
        cfg = ModelConfig(3, 2, (4,), 5)
        p = ModelParams.zeros(cfg)
        p.biases[1][:] = [1, 2, 3, 4, 5]
        p.biases[2][:] = [0.5, -0.5]
        z, logits = forward(p, np.array([7.0, -1.0, 2.0]))
        np.testing.assert_array_equal(z, [1, 2, 3, 4, 5])
        np.testing.assert_array_equal(logits, [0.5, -0.5])

    def test_hand_computed_tiny_net(self):
        cfg = ModelConfig(1, 1, (1,), 1)
        p = ModelParams(cfg, [np.array([[1.5]]), np.array([[2.0]]), np.array([[-1.0]])],
                        [np.array([0.5]), np.array([0.25]), np.array([3.0])])
        z, logits = forward(p, np.array([2.0]))
        # relu(1.5*2 + 0.5) = 3.5; z = 2*3.5 + 0.25 = 7.25; logit = -7.25 + 3
        assert z[0] == 7.25
        assert logits[0] == -4.25

    def test_deterministic(self):
        p = small_net()
        x = np.linspace(-1, 1, 5)
        a = forward(p, x)
        b = forward(p, x)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            forward(small_net(), np.zeros(4))


class TestLosses:
    def test_ce_uniform(self):
        assert loss_ce(np.zeros((4, 10)), [0, 3, 5, 9]) == pytest.approx(math.log(10), abs=1e-12)

    def test_ce_perfect(self):
        assert loss_ce(np.array([[1000.0, 0.0], [0.0, 1000.0]]), [0, 1]) == pytest.approx(0.0, abs=1e-12)

    def test_ce_direct(self):
        logits = np.log([[0.7, 0.2, 0.1]])
        assert loss_ce(logits, [0]) == pytest.approx(-math.log(0.7), abs=1e-12)
        assert loss_ce(logits, [0]) == pytest.approx(0.356675, abs=5e-7)

    def test_supcon_pair(self):
        rng = np.random.default_rng(0)
        assert loss_supcon(rng.normal(size=(2, 4)), [1, 1], 0.5) == pytest.approx(0.0, abs=1e-12)

    def test_supcon_worked_example(self):
        Z = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        labels = [0, 0, 1]
        expected = supcon_reference(Z, labels, 1.0)
        assert expected == pytest.approx(2 * (math.log(math.e + 1) - 1) / 3, abs=1e-15)
        assert loss_supcon(Z, labels, 1.0) == pytest.approx(expected, abs=1e-12)
        assert loss_supcon(Z, labels, 1.0) == pytest.approx(0.2088411, abs=5e-8)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000))
    def test_supcon_matches_reference(self, seed):
        rng = np.random.default_rng(seed)
        Z = rng.normal(size=(7, 3))
        labels = rng.integers(0, 3, size=7)
        assert loss_supcon(Z, labels, 0.7) == pytest.approx(supcon_reference(Z, labels, 0.7), abs=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000))
    def test_supcon_permutation_and_rotation_invariant(self, seed):
        rng = np.random.default_rng(seed)
        Z = rng.normal(size=(8, 4))
        labels = rng.integers(0, 3, size=8)
        base = loss_supcon(Z, labels, 0.5)
        perm = rng.permutation(8)
        assert loss_supcon(Z[perm], labels[perm], 0.5) == pytest.approx(base, abs=1e-12)
        R, _ = np.linalg.qr(rng.normal(size=(4, 4)))
        assert loss_supcon(Z @ R, labels, 0.5) == pytest.approx(base, abs=1e-12)

    def test_supcon_zero_representation(self):
        with pytest.raises(DegenerateVectorError):
            loss_supcon(np.array([[0.0, 0.0], [1.0, 0.0]]), [0, 0], 0.5)


class TestTraining:
    def setup_method(self):
        rng = np.random.default_rng(3)
        self.X = rng.normal(size=(16, 5))
        self.y = rng.integers(0, 3, size=16)

    def test_single_ce_step_matches_reference(self):
        p = small_net(1)
        cfg = TrainConfig(lam=0.0, lr=0.1, batch_size=len(self.X))
        out = local_train(p, self.X, self.y, cfg, SeededRng(0))
        ref = ce_sgd_reference(p, self.X, self.y, 0.1)
        for a, b in zip(out.arrays(), ref.arrays()):
            np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)

    def test_zero_learning_rate(self):
        p = small_net(2)
        out = local_train(p, self.X, self.y, TrainConfig(lr=0.0, batch_size=4, local_epochs=2),
                          SeededRng(0))
        np.testing.assert_array_equal(out.flat(), p.flat())

    def test_input_untouched_and_deterministic(self):
        p = small_net(2)
        before = p.flat().copy()
        cfg = TrainConfig(lr=0.05, batch_size=4, local_epochs=2)
        a = local_train(p, self.X, self.y, cfg, SeededRng(9))
        b = local_train(p, self.X, self.y, cfg, SeededRng(9))
        np.testing.assert_array_equal(p.flat(), before)
        assert a.flat().tobytes() == b.flat().tobytes()

    def test_ce_descent(self):
        p = small_net(4)
        cfg = TrainConfig(lam=0.0, lr=1e-4, batch_size=len(self.X))
        _, logits = forward_batch(p, self.X)
        before = loss_ce(logits, self.y)
        _, logits = forward_batch(sgd_step(p, self.X, self.y, cfg), self.X)
        assert loss_ce(logits, self.y) < before

    def test_empty_dataset(self):
        with pytest.raises(ValueError):
            local_train(small_net(), np.zeros((0, 5)), np.zeros(0, int), TrainConfig(), SeededRng(0))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(tau=0.0)
        with pytest.raises(ValueError):
            TrainConfig(batch_size=1)


class TestGradientCheck:
    @pytest.mark.parametrize("lam", [0.0, 1.0])
    @pytest.mark.parametrize("seed", range(4))
    def test_random_instances(self, lam, seed):
        rng = SeededRng(seed)
        p = small_net(seed + 10, hidden=(16,))
        X = rng.normal(size=(10, 5))
        y = np.arange(10) % 3
        err = gradient_check(p, X, y, TrainConfig(lam=lam, tau=0.5), rng.split(1))
        assert err < 1e-4

    def test_two_hidden_layers(self):
        rng = SeededRng(5)
        p = small_net(5, hidden=(10, 8))
        X = rng.normal(size=(9, 5))
        y = np.arange(9) % 3
        assert gradient_check(p, X, y, TrainConfig(lam=1.0), rng.split(1), n_coords=200) < 1e-4

    def test_zero_gradient_point(self):
        cfg = ModelConfig(1, 2, (2,), 2)
        p = ModelParams(cfg,
                        [np.array([[1.0, -1.0]]), np.eye(2), 50 * np.array([[1.0, -1.0], [-1.0, 1.0]])],
                        [np.zeros(2), np.zeros(2), np.zeros(2)])
        X = np.array([[1.0], [2.0], [-1.0], [-3.0]])
        y = np.array([0, 0, 1, 1])
        analytic, numeric = finite_difference_errors(p, X, y, TrainConfig(lam=0.0), SeededRng(0),
                                                     n_coords=p.num_params)
        assert np.max(np.abs(analytic - numeric)) < 1e-6
        assert np.max(np.abs(analytic)) < 1e-6

    def test_gradient_order_matches_arrays(self):
        p = small_net()
        _, grads = loss_and_grad(p, np.ones((3, 5)), [0, 1, 1], 1.0, 0.5)
        assert [g.shape for g in grads] == [a.shape for a in p.arrays()]


class TestSerialization:
    def test_round_trip_bit_exact(self):
        p = small_net(7, hidden=(4, 3))
        q = ModelParams.from_bytes(p.to_bytes())
        assert q.config == p.config
        assert q.flat().tobytes() == p.flat().tobytes()

    def test_flat_round_trip(self):
        p = small_net(8)
        q = ModelParams.from_flat(p.config, p.flat())
        for a, b in zip(p.arrays(), q.arrays()):
            np.testing.assert_array_equal(a, b)

    def test_wrong_length(self):
        p = small_net()
        with pytest.raises(ValueError):
            ModelParams.from_flat(p.config, np.zeros(p.num_params + 1))
