"""Dense vector helpers and the seeded random-number contract.

Every quantity the contribution pipeline normalizes (mass, velocity,
momentum, distribution vectors, final scores) goes through
:func:`normalize_to_simplex`, so the tolerance used here is the one the
rest of the package relies on.
"""

from __future__ import annotations

import numpy as np

SIMPLEX_ATOL = 1e-9


class DegenerateVectorError(ValueError):
    """Raised when a direction is requested from a zero-norm vector."""


class DegenerateNormalizationError(ValueError):
    """Raised when normalizing a vector whose entries sum to zero."""


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DegenerateVectorError("cosine similarity of a zero-norm vector")
    c = float(np.dot(a, b) / (na * nb))
    return min(1.0, max(-1.0, c))


def normalize_to_simplex(v) -> np.ndarray:
    """Scale a nonnegative vector so its entries sum to one.

    Inputs that already sum to one (within 1e-12) are returned unchanged,
    which makes the operation exactly idempotent.
    """
    v = np.array(v, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ValueError("expected a nonempty 1-d vector")
    if not np.all(np.isfinite(v)):
        raise ValueError("non-finite entry")
    if np.any(v < 0):
        raise ValueError(f"negative entry in simplex normalization: {v.min()!r}")
    s = v.sum()
    if s <= 0.0:
        raise DegenerateNormalizationError("cannot normalize an all-zero vector")
    if abs(s - 1.0) <= 1e-12:
        return v
    return v / s


def is_simplex(v, atol: float = SIMPLEX_ATOL) -> bool:
    v = np.asarray(v, dtype=np.float64)
    return bool(v.size > 0 and np.all(v >= 0) and abs(v.sum() - 1.0) <= atol)


def softmax(logits, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("non-finite logits")
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def uniform_simplex(n: int) -> np.ndarray:
    return np.full(n, 1.0 / n)


class SeededRng:
    """Counter-based (Philox) generator addressed by a seed and a key path.

    ``split`` derives an independent child stream from a tuple of
    nonnegative integers, e.g. ``rng.split(STREAM_TRAIN, round, client)``,
    so the draws a client sees never depend on how many other clients ran
    before it or on which thread it ran.
    """

    algorithm = "philox4x64-10"

    def __init__(self, seed: int, key: tuple[int, ...] = ()):
        if seed < 0:
            raise ValueError("seed must be nonnegative")
        self.seed = int(seed)
        self.key = tuple(int(k) for k in key)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.key)
        self.generator = np.random.Generator(np.random.Philox(ss))

    def split(self, *key: int) -> "SeededRng":
        return SeededRng(self.seed, self.key + tuple(key))

    def __getattr__(self, name):
        # delegate draws (permutation, normal, dirichlet, ...) to numpy
        return getattr(self.generator, name)

    def __repr__(self) -> str:
        return f"SeededRng(seed={self.seed}, key={self.key})"


# stream tags used with SeededRng.split
STREAM_DATA = 1
STREAM_PARTITION = 2
STREAM_NOISE = 3
STREAM_INIT = 4
STREAM_SELECT = 5
STREAM_TRAIN = 6
STREAM_SHAPLEY = 7
STREAM_COMPLETION = 8
STREAM_SPLIT = 9
