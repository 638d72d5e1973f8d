import numpy as np
import pytest

from flce.completion import (
    CompletionConfig,
    CompletionDivergedError,
    ContributionTensor,
    TensorChecksumError,
    complete_matrix,
    complete_tensor,
    completion_error,
)
from flce.numerics import SeededRng


def random_tensor(seed=0, T=6, n=5, C=3, keep=0.6):
    rng = np.random.default_rng(seed)
    vals = rng.dirichlet(np.ones(n), size=(T, C)).transpose(0, 2, 1)
    obs = rng.random((T, n, C)) < keep
    obs[0] = True
    return ContributionTensor(np.where(obs, vals, np.nan), obs)


class TestMatrix:
    def test_rank_one_recovery(self):
        X = np.outer([1.0, 2.0], [1.0, 2.0, 3.0])
        mask = np.ones_like(X, dtype=bool)
        mask[1, 2] = False
        filled, _ = complete_matrix(X, mask, CompletionConfig(), SeededRng(0))
        assert abs(filled[1, 2] - 6.0) / 6.0 < 0.05
        np.testing.assert_array_equal(filled[mask], X[mask])

    def test_objective_non_increasing(self):
        rng = np.random.default_rng(1)
        X = rng.uniform(size=(40, 2)) @ rng.uniform(size=(2, 20))
        mask = rng.random(X.shape) > 0.3
        _, hist = complete_matrix(X, mask, CompletionConfig(), SeededRng(1))
        h = np.array(hist[10:])
        assert np.all(np.diff(h) <= 1e-12 * np.abs(h[:-1]))

    def test_divergence_names_slice(self):
        X = np.full((5, 5), 100.0)
        mask = np.ones_like(X, dtype=bool)
        mask[0, 0] = False
        with pytest.raises(CompletionDivergedError, match="class 2.*iteration"):
            complete_matrix(X, mask, CompletionConfig(lr=1.0), SeededRng(0), label="class 2")

    def test_filled_nonnegative(self):
        X = np.array([[1.0, -1.0], [1.0, 0.0]])
        mask = np.array([[True, True], [True, False]])
        filled, _ = complete_matrix(X, mask, CompletionConfig(), SeededRng(0))
        assert filled[1, 1] >= 0.0


class TestTensor:
    def test_rows_are_distributions_and_observed_kept(self):
        X = random_tensor(3)
        out = complete_tensor(X, CompletionConfig(iterations=300))
        assert not np.isnan(out.values).any()
        assert np.all(out.values >= 0)
        np.testing.assert_allclose(out.values.sum(axis=1), 1.0, atol=1e-9)
        # observed rows were already distributions, so renormalization keeps them
        full_rows = X.observed.all(axis=1)
        t, c = np.nonzero(full_rows)
        np.testing.assert_allclose(out.values[t, :, c], X.values[t, :, c], atol=1e-15)

    def test_fully_observed_identity(self):
        X = random_tensor(0, keep=2.0)
        out = complete_tensor(X, CompletionConfig())
        np.testing.assert_allclose(out.values, X.values, atol=1e-15)

    def test_bitwise_deterministic(self):
        X = random_tensor(5)
        a = complete_tensor(X, CompletionConfig(iterations=200, seed=3))
        b = complete_tensor(X, CompletionConfig(iterations=200, seed=3))
        assert a.values.tobytes() == b.values.tobytes()

    def test_never_observed_class_uniform(self):
        X = random_tensor(2)
        X.observed[:, :, 1] = False
        X.values[:, :, 1] = np.nan
        out = complete_tensor(X, CompletionConfig(iterations=50))
        np.testing.assert_allclose(out.values[:, :, 1], 1 / 5)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            CompletionConfig(rank=0)
        with pytest.raises(ValueError):
            CompletionConfig(lr=0.0)


class TestErrors:
    def test_identity(self):
        X = np.arange(6.0).reshape(2, 3)
        mask = np.array([[True, False, True], [True, True, False]])
        assert completion_error(X, X, mask) == (0.0, 0.0)

    def test_all_observed(self):
        X = np.ones((2, 2))
        missing, observed = completion_error(X, X + 1, np.ones((2, 2), bool))
        assert missing is None
        assert observed == pytest.approx(1.0)


class TestSerialization:
    def test_bytes_round_trip(self):
        X = random_tensor(4)
        back = ContributionTensor.from_bytes(X.to_bytes())
        assert back.values.tobytes() == X.values.tobytes()
        np.testing.assert_array_equal(back.observed, X.observed)

    def test_corruption_detected(self):
        blob = bytearray(random_tensor(4).to_bytes())
        blob[-20] ^= 0xFF
        with pytest.raises(TensorChecksumError):
            ContributionTensor.from_bytes(bytes(blob))

    def test_csv(self):
        X = ContributionTensor.empty(1, 2, 1)
        X.values[0, 1, 0] = 0.5
        X.observed[0, 1, 0] = True
        lines = X.to_csv().splitlines()
        assert lines[0] == "round,client,class,value,observed"
        assert lines[1].split(",")[3] == ""
        assert lines[2].split(",")[3:] == ["0.5", "1"]
