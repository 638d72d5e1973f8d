"""Low-rank completion of the rounds x clients x classes contribution tensor.

Each class slice is a rounds x clients matrix with holes wherever a client
was not selected (or did not hold the class). A rank-r factorization is fit
by gradient descent on the observed cells only and used to fill the holes.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .numerics import (
    STREAM_COMPLETION,
    DegenerateNormalizationError,
    SeededRng,
    normalize_to_simplex,
)

logger = logging.getLogger(__name__)

_MAGIC = b"FLCT"
_VERSION = 1


class CompletionDivergedError(RuntimeError):
    pass


class TensorChecksumError(ValueError):
    pass


@dataclass(frozen=True)
class CompletionConfig:
    rank: int = 4
    lr: float = 0.05
    iterations: int = 2000
    reg: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("rank must be at least 1")
        if self.lr <= 0 or self.iterations < 1 or self.reg < 0:
            raise ValueError("learning rate and iterations must be positive, reg nonnegative")


@dataclass
class ContributionTensor:
    values: np.ndarray      # (T, n, C); NaN where missing until completed
    observed: np.ndarray    # (T, n, C) bool

    @classmethod
    def empty(cls, T: int, n: int, C: int) -> "ContributionTensor":
        return cls(np.full((T, n, C), np.nan), np.zeros((T, n, C), dtype=bool))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    def to_csv(self) -> str:
        """One row per cell: ``round,client,class,value,observed``.

        Unobserved cells in an uncompleted tensor leave ``value`` blank.
        """
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["round", "client", "class", "value", "observed"])
        T, n, C = self.shape
        for t in range(T):
            for k in range(n):
                for c in range(C):
                    obs = bool(self.observed[t, k, c])
                    v = self.values[t, k, c]
                    w.writerow([t, k, c, "" if math.isnan(v) else repr(float(v)), int(obs)])
        return buf.getvalue()

    def to_bytes(self) -> bytes:
        T, n, C = self.shape
        payload = (self.values.astype("<f8").tobytes()
                   + np.packbits(self.observed.ravel()).tobytes())
        header = _MAGIC + struct.pack("<IIIII", _VERSION, T, n, C, zlib.crc32(payload))
        return header + payload

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ContributionTensor":
        if blob[:4] != _MAGIC:
            raise TensorChecksumError("not a contribution tensor file")
        version, T, n, C, crc = struct.unpack_from("<IIIII", blob, 4)
        if version != _VERSION:
            raise ValueError(f"unsupported tensor version {version}")
        payload = blob[24:]
        if zlib.crc32(payload) != crc:
            raise TensorChecksumError("contribution tensor checksum mismatch")
        size = T * n * C
        values = np.frombuffer(payload[:8 * size], dtype="<f8").astype(np.float64)
        bits = np.frombuffer(payload[8 * size:], dtype=np.uint8)
        observed = np.unpackbits(bits)[:size].astype(bool)
        return cls(values.reshape(T, n, C), observed.reshape(T, n, C))


def complete_matrix(X, observed, cfg: CompletionConfig, rng: SeededRng,
                    label: str = "matrix") -> tuple[np.ndarray, list[float]]:
    """Fill unobserved cells of ``X`` from a rank-``cfg.rank`` factorization.

    Minimizes ``0.5 * sum_obs (UV - X)^2 + 0.5 * reg * (|U|^2 + |V|^2)`` with
    plain gradient descent. Observed cells are returned verbatim and filled
    cells are clamped at zero. Returns the filled matrix and the objective at
    every iteration.
    """
    X = np.asarray(X, dtype=np.float64)
    mask = np.asarray(observed, dtype=bool)
    T, n = X.shape
    rank = min(cfg.rank, max(1, min(T, n) - 1))
    Xo = np.where(mask, X, 0.0)
    U = rng.uniform(-0.1, 0.1, size=(T, rank))
    V = rng.uniform(-0.1, 0.1, size=(rank, n))
    history = []
    # overflow is reported through the finiteness check below
    with np.errstate(over="ignore", invalid="ignore"):
        for it in range(cfg.iterations):
            R = np.where(mask, U @ V - Xo, 0.0)
            obj = 0.5 * np.sum(R * R) + 0.5 * cfg.reg * (np.sum(U * U) + np.sum(V * V))
            if not math.isfinite(obj):
                raise CompletionDivergedError(f"{label}: objective not finite at iteration {it}")
            history.append(float(obj))
            gU = R @ V.T + cfg.reg * U
            gV = U.T @ R + cfg.reg * V
            U -= cfg.lr * gU
            V -= cfg.lr * gV
    filled = np.where(mask, X, np.maximum(U @ V, 0.0))
    return filled, history


def complete_tensor(X: ContributionTensor, cfg: CompletionConfig) -> ContributionTensor:
    """Complete every class slice, then renormalize each (round, class) row over all clients."""
    T, n, C = X.shape
    out = np.where(X.observed, X.values, 0.0)
    base = SeededRng(cfg.seed).split(STREAM_COMPLETION)
    for c in range(C):
        mask = X.observed[:, :, c]
        if mask.all() or not mask.any():
            if not mask.any():
                logger.warning("class %d never observed; leaving slice empty", c)
            continue
        out[:, :, c], _ = complete_matrix(X.values[:, :, c], mask, cfg, base.split(c),
                                          label=f"class {c}")
    for t in range(T):
        for c in range(C):
            try:
                out[t, :, c] = normalize_to_simplex(out[t, :, c])
            except DegenerateNormalizationError:
                logger.warning("round %d class %d has no contribution; using uniform row", t, c)
                out[t, :, c] = 1.0 / n
    return ContributionTensor(out, X.observed.copy())


def completion_error(X_true, X_hat, observed) -> tuple[float | None, float]:
    """RMSE over missing cells (None when nothing was missing) and over observed cells."""
    X_true = np.asarray(X_true, dtype=np.float64)
    X_hat = np.asarray(X_hat, dtype=np.float64)
    observed = np.asarray(observed, dtype=bool)
    if X_true.shape != X_hat.shape or X_true.shape != observed.shape:
        raise ValueError("shape mismatch")
    diff = X_hat - X_true
    missing = ~observed
    rmse_missing = float(np.sqrt(np.mean(diff[missing] ** 2))) if missing.any() else None
    rmse_observed = float(np.sqrt(np.mean(diff[observed] ** 2))) if observed.any() else 0.0
    return rmse_missing, rmse_observed
