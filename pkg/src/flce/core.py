"""Class prototypes and the per-round contribution indicators.

For one class, the server sees the prototypes of the selected clients that
hold that class and turns them into three distributions over those clients:

* mass: how well each prototype aligns with a consensus prototype,
* velocity: how far each prototype moved from last round's global prototype,
* momentum: the normalized product of the two.

Momentum then weights the new global prototype and, summed over classes, the
model average.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .model import ModelParams, forward_batch
from .numerics import (
    DegenerateNormalizationError,
    DegenerateVectorError,
    cosine_similarity,
    normalize_to_simplex,
    uniform_simplex,
)

logger = logging.getLogger(__name__)

COSINE_FLOOR = 1e-6


@dataclass
class PrototypeSet:
    client: int
    round: int
    protos: dict[int, np.ndarray]
    counts: dict[int, int]

    def classes(self) -> list[int]:
        return sorted(self.protos)

    def to_json(self) -> dict:
        return {
            "client": self.client,
            "round": self.round,
            "protos": {
                str(c): {"prototype": self.protos[c].tolist(), "count": self.counts[c]}
                for c in self.classes()
            },
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PrototypeSet":
        protos, counts = {}, {}
        for key, entry in obj["protos"].items():
            protos[int(key)] = np.array(entry["prototype"], dtype=np.float64)
            counts[int(key)] = int(entry["count"])
        return cls(int(obj["client"]), int(obj["round"]), protos, counts)


@dataclass
class ClassMomentum:
    clients: list[int]
    mass: np.ndarray
    velocity: np.ndarray
    momentum: np.ndarray


@dataclass
class RoundMomentum:
    round: int
    selected: list[int]
    classes: dict[int, ClassMomentum] = field(default_factory=dict)


def _column_mean(rows: np.ndarray) -> np.ndarray:
    # exactly rounded, so the result does not depend on sample order
    return np.array([math.fsum(col) for col in rows.T]) / len(rows)


def compute_prototypes(params: ModelParams, X, y, num_classes: int, client: int = 0,
                       round: int = 0, correct_only: bool = False) -> PrototypeSet:
    """Mean representation per class held by the client.

    With ``correct_only`` only samples the model classifies correctly are
    averaged; a class with no such sample is treated as absent.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if len(X) == 0:
        raise ValueError("cannot compute prototypes of an empty dataset")
    Z, logits = forward_batch(params, X)
    keep = np.ones(len(y), dtype=bool)
    if correct_only:
        keep = logits.argmax(axis=1) == y
    protos, counts = {}, {}
    for c in range(num_classes):
        rows = Z[(y == c) & keep]
        if len(rows):
            protos[c] = _column_mean(rows)
            counts[c] = len(rows)
    return PrototypeSet(client, round, protos, counts)


def _clamped_cosines(protos: np.ndarray, ref: np.ndarray) -> np.ndarray:
    return np.array([max(cosine_similarity(p, ref), COSINE_FLOOR) for p in protos])


def class_contribution_mass(protos) -> np.ndarray:
    """Cosine-alignment shares of each client's prototype for one class.

    Cosines are taken first against the plain mean prototype to get weights,
    then against the weighted mean built from those weights. Cosines are
    floored at 1e-6 so the result is a distribution.
    """
    P = np.asarray(protos, dtype=np.float64)
    K = len(P)
    if K == 1:
        return np.ones(1)
    if np.any(np.linalg.norm(P, axis=1) == 0.0):
        raise DegenerateVectorError("zero prototype")
    try:
        weights = normalize_to_simplex(_clamped_cosines(P, P.mean(axis=0)))
        return normalize_to_simplex(_clamped_cosines(P, weights @ P))
    except DegenerateVectorError:
        logger.warning("degenerate consensus prototype; using uniform mass")
        return uniform_simplex(K)


def class_contribution_velocity(protos, g_prev) -> np.ndarray:
    """Shares of squared displacement from the previous global prototype."""
    P = np.asarray(protos, dtype=np.float64)
    if len(P) == 1:
        return np.ones(1)
    d2 = np.sum((P - np.asarray(g_prev, dtype=np.float64)) ** 2, axis=1)
    try:
        V = normalize_to_simplex(d2)
    except DegenerateNormalizationError:
        logger.warning("no prototype moved from the global prototype; using uniform velocity")
        return uniform_simplex(len(P))
    # the second normalization of the velocity definition is the identity
    assert np.array_equal(normalize_to_simplex(V), V)
    return V


def class_contribution_momentum(mass, velocity) -> np.ndarray:
    M = np.asarray(mass, dtype=np.float64)
    V = np.asarray(velocity, dtype=np.float64)
    if M.shape != V.shape:
        raise ValueError("mass and velocity supports differ")
    # a constant factor cancels under normalization
    if np.all(V == V[0]):
        return M.copy()
    if np.all(M == M[0]):
        return V.copy()
    try:
        return normalize_to_simplex(M * V)
    except DegenerateNormalizationError:
        logger.warning("mass and velocity have disjoint support; using uniform momentum")
        return uniform_simplex(len(M))


def aggregate_global_prototype(momentum, protos) -> np.ndarray:
    return np.asarray(momentum, dtype=np.float64) @ np.asarray(protos, dtype=np.float64)


def round_momentum(round: int, proto_sets: list[PrototypeSet],
                   global_protos: dict[int, np.ndarray]) -> RoundMomentum:
    """Mass, velocity and momentum for every class held by a selected client.

    A class seen for the first time uses the plain mean of this round's
    prototypes as the previous global prototype.
    """
    rm = RoundMomentum(round, [ps.client for ps in proto_sets])
    classes = sorted({c for ps in proto_sets for c in ps.protos})
    for c in classes:
        holders = [ps for ps in proto_sets if c in ps.protos]
        P = np.stack([ps.protos[c] for ps in holders])
        g_prev = global_protos.get(c)
        if g_prev is None:
            g_prev = P.mean(axis=0)
        M = class_contribution_mass(P)
        V = class_contribution_velocity(P, g_prev)
        Q = class_contribution_momentum(M, V)
        rm.classes[c] = ClassMomentum([ps.client for ps in holders], M, V, Q)
    return rm


def update_global_prototypes(rm: RoundMomentum, proto_sets: list[PrototypeSet],
                             global_protos: dict[int, np.ndarray]) -> dict[int, np.ndarray]:
    """New global prototypes; classes nobody held this round keep their old value."""
    by_client = {ps.client: ps for ps in proto_sets}
    out = dict(global_protos)
    for c, cm in rm.classes.items():
        P = np.stack([by_client[k].protos[c] for k in cm.clients])
        out[c] = aggregate_global_prototype(cm.momentum, P)
    return out


def client_weights(rm: RoundMomentum) -> np.ndarray:
    """Aggregation weight per selected client: its momentum summed over classes."""
    pos = {k: i for i, k in enumerate(rm.selected)}
    totals = np.zeros(len(rm.selected))
    for cm in rm.classes.values():
        for k, q in zip(cm.clients, cm.momentum):
            totals[pos[k]] += q
    try:
        return normalize_to_simplex(totals)
    except DegenerateNormalizationError:
        logger.warning("round %d: no momentum recorded; averaging uniformly", rm.round)
        return uniform_simplex(len(totals))


def average_params(models, weights):
    """Convex combination of models (ModelParams or plain arrays)."""
    weights = np.asarray(weights, dtype=np.float64)
    if len(models) != len(weights) or len(models) == 0:
        raise ValueError("need one weight per model")
    if isinstance(models[0], ModelParams):
        flats = [m.flat() for m in models]
        if len({f.size for f in flats}) != 1:
            raise ValueError("client models differ in shape")
        out = np.zeros_like(flats[0])
        for w, f in zip(weights, flats):
            out += w * f
        return ModelParams.from_flat(models[0].config, out)
    arrays = [np.asarray(m, dtype=np.float64) for m in models]
    if len({a.shape for a in arrays}) != 1:
        raise ValueError("client models differ in shape")
    out = np.zeros_like(arrays[0])
    for w, a in zip(weights, arrays):
        out += w * a
    return out


def aggregate_models(rm: RoundMomentum, models: dict):
    """Momentum-weighted average of the selected clients' models."""
    missing = [k for k in rm.selected if k not in models]
    if missing:
        raise ValueError(f"no model uploaded by clients {missing}")
    return average_params([models[k] for k in rm.selected], client_weights(rm))
