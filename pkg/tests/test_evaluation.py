import csv
import io
import math

import numpy as np
import pytest

from flce.completion import ContributionTensor
from flce.evaluation import (
    ContributionResult,
    DistributionVectors,
    accuracy_and_macro_f1,
    class_client_weights,
    communication_ratio,
    config_hash,
    euclidean_distance,
    final_contributions,
    kl_divergence,
)


def tensor(values):
    values = np.asarray(values, dtype=np.float64)
    return ContributionTensor(values, np.ones(values.shape, dtype=bool))


class TestFinalContributions:
    def test_worked_example(self):
        X = tensor([[[0.3], [0.7]], [[0.5], [0.5]]])
        ab = DistributionVectors.build(2, 1, rounds=[0.5, 0.5])
        ce = final_contributions(X, ab).contributions
        np.testing.assert_allclose(ce, [0.4, 0.6], atol=1e-15)

    def test_uniform_tensor(self):
        X = tensor(np.full((4, 5, 3), 0.2))
        ce = final_contributions(X, DistributionVectors.uniform(4, 3)).contributions
        np.testing.assert_allclose(ce, 0.2, atol=1e-15)

    def test_round_vertex(self):
        rng = np.random.default_rng(0)
        vals = rng.dirichlet(np.ones(4), size=(3, 2)).transpose(0, 2, 1)
        b = np.array([0.3, 0.7])
        ab = DistributionVectors.build(3, 2, rounds=[0, 1, 0], classes=b)
        ce = final_contributions(tensor(vals), ab).contributions
        np.testing.assert_allclose(ce, vals[1] @ b, atol=1e-15)

    def test_scale_invariant(self):
        vals = np.random.default_rng(1).uniform(size=(3, 4, 2))
        ab = DistributionVectors.uniform(3, 2)
        a = final_contributions(tensor(vals), ab).contributions
        b = final_contributions(tensor(7.5 * vals), ab).contributions
        np.testing.assert_allclose(a, b, atol=1e-15)

    def test_permutation_invariance(self):
        vals = np.random.default_rng(2).uniform(size=(3, 4, 5))
        ab = DistributionVectors.uniform(3, 5)
        base = final_contributions(tensor(vals), ab).contributions
        np.testing.assert_allclose(final_contributions(tensor(vals[:, :, ::-1]), ab).contributions,
                                   base, atol=1e-15)
        np.testing.assert_allclose(final_contributions(tensor(vals[::-1]), ab).contributions,
                                   base, atol=1e-15)

    def test_unfilled_rejected(self):
        X = ContributionTensor.empty(2, 2, 1)
        with pytest.raises(ValueError, match="complete"):
            class_client_weights(X, DistributionVectors.uniform(2, 1))

    def test_wrong_lengths(self):
        with pytest.raises(ValueError):
            DistributionVectors.build(2, 3, rounds=[1, 1, 1])


class TestDivergences:
    def test_kl_identity(self):
        assert kl_divergence([0.2, 0.8], [0.2, 0.8]) == pytest.approx(0.0, abs=1e-12)

    def test_kl_worked(self):
        expected = 0.5 * math.log(0.5 / 0.25) + 0.5 * math.log(0.5 / 0.75)
        assert kl_divergence([0.5, 0.5], [0.25, 0.75]) == pytest.approx(expected, abs=1e-8)
        assert kl_divergence([0.5, 0.5], [0.25, 0.75]) == pytest.approx(0.143841, abs=5e-7)

    def test_kl_zero_support_finite(self):
        assert math.isfinite(kl_divergence([1.0, 0.0], [0.0, 1.0]))

    def test_kl_nonnegative_random(self):
        rng = np.random.default_rng(0)
        P = rng.dirichlet(np.ones(6), size=10_000)
        Q = rng.dirichlet(np.ones(6), size=10_000)
        assert min(kl_divergence(p, q) for p, q in zip(P, Q)) >= 0.0

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            kl_divergence([0.5, 0.5], [1.0])
        with pytest.raises(ValueError):
            euclidean_distance([0.5, 0.5], [1.0])

    def test_euclidean(self):
        assert euclidean_distance([0.3, 0.7], [0.3, 0.7]) == 0.0
        assert euclidean_distance([1, 0], [0, 1]) == pytest.approx(1.414214, abs=5e-7)


class TestAccuracy:
    def test_all_correct(self):
        assert accuracy_and_macro_f1(np.eye(3), [0, 1, 2]) == (1.0, 1.0)

    def test_binary_confusion(self):
        logits = np.array([[0, 1], [0, 1], [1, 0], [1, 0]])
        # TP=1 FP=1 FN=1 TN=1 with class 1 as positive
        acc, f1 = accuracy_and_macro_f1(logits, [1, 0, 1, 0])
        assert (acc, f1) == (0.5, 0.5)

    def test_empty_class_skipped(self):
        logits = np.array([[1, 0, 0], [0, 1, 0]])
        assert accuracy_and_macro_f1(logits, [0, 1]) == (1.0, 1.0)

    def test_chance_level(self):
        rng = np.random.default_rng(0)
        labels = np.repeat(np.arange(5), 4000)
        acc, _ = accuracy_and_macro_f1(rng.normal(size=(len(labels), 5)), labels)
        assert abs(acc - 0.2) < 0.015


class TestCommunication:
    def test_table_rows(self):
        assert communication_ratio(640, 272474) == pytest.approx(0.001174, abs=5e-5)
        assert communication_ratio(6400, 278324) == pytest.approx(0.01136, abs=5e-5)
        assert communication_ratio(6400, 278324) == pytest.approx(6400 / 563048, abs=1e-15)

    def test_zero(self):
        assert communication_ratio(0, 100) == 0.0


class TestResults:
    def test_csv(self):
        r = ContributionResult(np.array([0.25, 0.75]), "flce")
        rows = list(csv.reader(io.StringIO(r.to_csv())))
        assert rows == [["client", "contribution"], ["0", "0.25"], ["1", "0.75"]]

    def test_json_round_trip(self):
        r = ContributionResult(np.array([0.1, 0.9]), "volume", {"seed": 3})
        back = ContributionResult.from_json(r.to_json())
        assert back.method == "volume" and back.provenance == {"seed": 3}
        assert back.contributions.tobytes() == r.contributions.tobytes()

    def test_config_hash_order_independent(self):
        assert config_hash({"a": 1, "b": [1, 2]}) == config_hash({"b": [1, 2], "a": 1})
        assert config_hash({"a": 1}) != config_hash({"a": 2})
