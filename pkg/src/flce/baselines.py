"""Reference contribution evaluators: data volume, model similarity and Shapley values."""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from .core import COSINE_FLOOR, average_params
from .data import Dataset, Partition
from .evaluation import ContributionResult
from .model import ModelParams, forward_batch
from .numerics import (
    DegenerateNormalizationError,
    DegenerateVectorError,
    SeededRng,
    cosine_similarity,
    normalize_to_simplex,
    uniform_simplex,
)

MAX_EXACT_PLAYERS = 10


class MissingSnapshotsError(ValueError):
    pass


def contribution_by_volume(part: Partition | Iterable[int]) -> ContributionResult:
    sizes = part.sizes() if isinstance(part, Partition) else np.asarray(list(part))
    return ContributionResult(normalize_to_simplex(np.asarray(sizes, dtype=np.float64)), "volume")


def similarity_shares(local_flats, global_flat) -> np.ndarray:
    """Per-round similarity shares: clamped cosines to the global model, normalized."""
    cos = []
    for f in local_flats:
        try:
            cos.append(max(cosine_similarity(f, global_flat), COSINE_FLOOR))
        except DegenerateVectorError:
            cos.append(COSINE_FLOOR)
    return normalize_to_simplex(np.array(cos))


def contribution_by_similarity(run) -> ContributionResult:
    """Model-similarity contributions from a run's per-round similarity shares.

    Each client's shares are averaged over the rounds it was selected in;
    clients never selected get zero before the final normalization.
    """
    n = run.config.n_clients
    totals = np.zeros(n)
    picks = np.zeros(n)
    for rl in run.rounds:
        if rl.similarity is None:
            raise MissingSnapshotsError(f"round {rl.round} has no model-similarity snapshot")
        for k, share in zip(rl.selected, rl.similarity):
            totals[k] += share
            picks[k] += 1
    means = np.divide(totals, picks, out=np.zeros(n), where=picks > 0)
    try:
        ce = normalize_to_simplex(means)
    except DegenerateNormalizationError:
        ce = uniform_simplex(n)
    return ContributionResult(ce, "similarity")


class UtilityFunction:
    """Memoized coalition utility keyed by the coalition bitmask."""

    def __init__(self, fn: Callable[[frozenset], float], n: int):
        self._fn = fn
        self.n = n
        self._cache: dict[int, float] = {}
        self._lock = threading.Lock()
        self.calls = 0

    @staticmethod
    def _mask(coalition) -> int:
        if isinstance(coalition, (int, np.integer)):
            return int(coalition)
        m = 0
        for k in coalition:
            m |= 1 << int(k)
        return m

    def __call__(self, coalition) -> float:
        m = self._mask(coalition)
        with self._lock:
            if m in self._cache:
                return self._cache[m]
        members = frozenset(k for k in range(self.n) if m >> k & 1)
        value = float(self._fn(members))
        with self._lock:
            self.calls += 1
            # keep the first stored value so concurrent callers agree
            return self._cache.setdefault(m, value)

    @classmethod
    def from_table(cls, table: dict, n: int) -> "UtilityFunction":
        lookup = {cls._mask(k): v for k, v in table.items()}
        return cls(lambda S: lookup[cls._mask(S)], n)


@dataclass
class ShapleyEstimate:
    values: np.ndarray
    permutations: int
    seed: int | None

    def to_result(self, method: str = "shapley") -> ContributionResult:
        clamped = np.maximum(self.values, 0.0)
        try:
            ce = normalize_to_simplex(clamped)
        except DegenerateNormalizationError:
            ce = uniform_simplex(len(clamped))
        return ContributionResult(ce, method, {"negative_values_clamped": bool(np.any(self.values < 0)),
                                               "permutations": self.permutations,
                                               "seed": self.seed})

    def to_csv(self) -> str:
        lines = ["client,value,permutations,seed"]
        seed = "" if self.seed is None else str(self.seed)
        for k, v in enumerate(self.values):
            lines.append(f"{k},{float(v)!r},{self.permutations},{seed}")
        return "\r\n".join(lines) + "\r\n"


def shapley_exact(v: UtilityFunction | Callable, n: int) -> ShapleyEstimate:
    """Exact Shapley values by the subset-weighted sum over all 2^n coalitions."""
    if n > MAX_EXACT_PLAYERS:
        raise ValueError(f"exact Shapley limited to {MAX_EXACT_PLAYERS} players, got {n}")
    util = v if isinstance(v, UtilityFunction) else UtilityFunction(v, n)
    weights = [math.factorial(s) * math.factorial(n - s - 1) / math.factorial(n)
               for s in range(n)]
    phi = np.zeros(n)
    for mask in range(1 << n):
        size = bin(mask).count("1")
        base = util(mask)
        for k in range(n):
            if not mask >> k & 1:
                phi[k] += weights[size] * (util(mask | 1 << k) - base)
    return ShapleyEstimate(phi, math.factorial(n), None)


def shapley_monte_carlo(v: UtilityFunction | Callable, n: int, permutations: int,
                        rng: SeededRng) -> ShapleyEstimate:
    """Average marginal contributions along uniformly sampled permutations."""
    if permutations < 1:
        raise ValueError("need at least one permutation")
    util = v if isinstance(v, UtilityFunction) else UtilityFunction(v, n)
    phi = np.zeros(n)
    empty = util(0)
    for _ in range(permutations):
        mask = 0
        prev = empty
        for k in rng.permutation(n):
            mask |= 1 << int(k)
            cur = util(mask)
            phi[k] += cur - prev
            prev = cur
    return ShapleyEstimate(phi / permutations, permutations, rng.seed)


def model_accuracy(params: ModelParams, test: Dataset) -> float:
    _, logits = forward_batch(params, test.X)
    return float(np.mean(logits.argmax(axis=1) == test.y))


def coalition_utility(models: list[ModelParams], test: Dataset,
                      empty_model: ModelParams | None = None) -> UtilityFunction:
    """Test accuracy of the plain average of each coalition's models.

    The empty coalition scores the model the round started from.
    """
    if test is None or len(test) == 0:
        raise ValueError("coalition utility needs a nonempty test set")
    if empty_model is None:
        empty_model = average_params(models, uniform_simplex(len(models)))

    def fn(members: frozenset) -> float:
        if not members:
            return model_accuracy(empty_model, test)
        chosen = [models[k] for k in sorted(members)]
        return model_accuracy(average_params(chosen, uniform_simplex(len(chosen))), test)

    return UtilityFunction(fn, len(models))
