"""Final contribution scores, distribution distances, model metrics and
communication accounting."""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .completion import ContributionTensor
from .numerics import DegenerateNormalizationError, normalize_to_simplex, uniform_simplex

KL_SMOOTHING = 1e-9


@dataclass(frozen=True)
class DistributionVectors:
    """Weights over rounds (A) and over classes (B) used to collapse the tensor."""

    rounds: np.ndarray
    classes: np.ndarray

    @classmethod
    def uniform(cls, T: int, C: int) -> "DistributionVectors":
        return cls(uniform_simplex(T), uniform_simplex(C))

    @classmethod
    def build(cls, T: int, C: int, rounds=None, classes=None) -> "DistributionVectors":
        a = uniform_simplex(T) if rounds is None or len(rounds) == 0 else normalize_to_simplex(rounds)
        b = uniform_simplex(C) if classes is None or len(classes) == 0 else normalize_to_simplex(classes)
        if len(a) != T or len(b) != C:
            raise ValueError(f"distribution vectors must have lengths {T} and {C}")
        return cls(a, b)


@dataclass
class ContributionResult:
    contributions: np.ndarray
    method: str
    provenance: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["client", "contribution"])
        for k, v in enumerate(self.contributions):
            w.writerow([k, repr(float(v))])
        return buf.getvalue()

    def to_json(self) -> dict:
        return {
            "method": self.method,
            "contributions": [float(v) for v in self.contributions],
            "provenance": self.provenance,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ContributionResult":
        return cls(np.array(obj["contributions"], dtype=np.float64), obj["method"],
                   obj.get("provenance", {}))


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def class_client_weights(X_hat: ContributionTensor, ab: DistributionVectors) -> np.ndarray:
    """``(n, C)`` matrix of ``b_c * sum_t a_t Q[t, k, c]`` (unnormalized)."""
    T, n, C = X_hat.shape
    if len(ab.rounds) != T or len(ab.classes) != C:
        raise ValueError("distribution vectors do not match the tensor shape")
    if np.isnan(X_hat.values).any():
        raise ValueError("tensor has unfilled entries; complete it first")
    per_client_class = np.einsum("t,tkc->kc", ab.rounds, X_hat.values)
    return per_client_class * ab.classes[None, :]


def final_contributions(X_hat: ContributionTensor, ab: DistributionVectors,
                        provenance: dict | None = None) -> ContributionResult:
    totals = class_client_weights(X_hat, ab).sum(axis=1)
    try:
        ce = normalize_to_simplex(totals)
    except DegenerateNormalizationError:
        raise ValueError("all contributions are zero") from None
    return ContributionResult(ce, "flce", dict(provenance or {}))


def kl_divergence(p, q, eps: float = KL_SMOOTHING) -> float:
    """KL(p || q) after additive smoothing and renormalization of both arguments."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {q.shape}")
    p = (p + eps) / (p + eps).sum()
    q = (q + eps) / (q + eps).sum()
    return float(max(np.sum(p * np.log(p / q)), 0.0))


def euclidean_distance(p, q) -> float:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {q.shape}")
    return float(np.linalg.norm(p - q))


def accuracy_and_macro_f1(logits, labels) -> tuple[float, float]:
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise ValueError("empty evaluation set")
    pred = logits.argmax(axis=1)
    acc = float(np.mean(pred == labels))
    f1s = []
    for c in range(logits.shape[1]):
        tp = np.sum((pred == c) & (labels == c))
        fp = np.sum((pred == c) & (labels != c))
        fn = np.sum((pred != c) & (labels == c))
        if tp + fp + fn == 0:
            continue
        f1s.append(2 * tp / (2 * tp + fp + fn))
    return acc, float(np.mean(f1s))


def communication_ratio(prototype_floats: float, model_params: float) -> float:
    """Share of per-round traffic spent on prototypes.

    A participant downloads and uploads the model and uploads prototypes, so
    the round moves ``2 * model + prototype`` floats.
    """
    if prototype_floats < 0 or model_params <= 0:
        raise ValueError("sizes must be positive")
    return prototype_floats / (2.0 * model_params + prototype_floats)
