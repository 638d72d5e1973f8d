"""MLP encoder with a linear classifier head, trained on cross entropy plus a
supervised contrastive term.

Weights are stored as ``(fan_in, fan_out)`` matrices so a batch forward is
``X @ W + b``. The encoder applies a rectifier after every hidden layer; the
representation layer is linear so prototypes can point in any direction.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .numerics import DegenerateVectorError, SeededRng, softmax


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    num_classes: int
    hidden_dims: tuple[int, ...] = (64,)
    repr_dim: int = 64

    def layer_shapes(self) -> list[tuple[int, int]]:
        dims = [self.input_dim, *self.hidden_dims, self.repr_dim, self.num_classes]
        return list(zip(dims[:-1], dims[1:]))


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 1.0
    tau: float = 0.5
    lr: float = 0.01
    batch_size: int = 64
    local_epochs: int = 1

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.lr < 0:
            raise ValueError("learning rate must be nonnegative")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if self.local_epochs < 1:
            raise ValueError("local_epochs must be at least 1")


@dataclass
class ModelParams:
    config: ModelConfig
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @classmethod
    def init(cls, config: ModelConfig, rng: SeededRng) -> "ModelParams":
        weights, biases = [], []
        for fan_in, fan_out in config.layer_shapes():
            bound = 1.0 / np.sqrt(fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(config, weights, biases)

    @classmethod
    def zeros(cls, config: ModelConfig) -> "ModelParams":
        shapes = config.layer_shapes()
        return cls(config, [np.zeros(s) for s in shapes], [np.zeros(s[1]) for s in shapes])

    @property
    def num_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    @classmethod
    def from_flat(cls, config: ModelConfig, vec) -> "ModelParams":
        vec = np.asarray(vec, dtype=np.float64)
        weights, biases = [], []
        i = 0
        for fan_in, fan_out in config.layer_shapes():
            weights.append(vec[i:i + fan_in * fan_out].reshape(fan_in, fan_out).copy())
            i += fan_in * fan_out
            biases.append(vec[i:i + fan_out].copy())
            i += fan_out
        if i != vec.size:
            raise ValueError(f"flat vector has {vec.size} entries, model needs {i}")
        return cls(config, weights, biases)

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, [w.copy() for w in self.weights],
                           [b.copy() for b in self.biases])

    def to_bytes(self) -> bytes:
        header = json.dumps({
            "format": "flce-model",
            "input_dim": self.config.input_dim,
            "num_classes": self.config.num_classes,
            "hidden_dims": list(self.config.hidden_dims),
            "repr_dim": self.config.repr_dim,
            "shapes": [list(a.shape) for a in self.arrays()],
        }, sort_keys=True).encode()
        return struct.pack("<I", len(header)) + header + self.flat().astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ModelParams":
        (hlen,) = struct.unpack_from("<I", blob, 0)
        header = json.loads(blob[4:4 + hlen])
        if header.get("format") != "flce-model":
            raise ValueError("not a serialized model")
        config = ModelConfig(header["input_dim"], header["num_classes"],
                             tuple(header["hidden_dims"]), header["repr_dim"])
        vec = np.frombuffer(blob[4 + hlen:], dtype="<f8").astype(np.float64)
        return cls.from_flat(config, vec)


@dataclass
class _Cache:
    inputs: list[np.ndarray] = field(default_factory=list)
    pre: list[np.ndarray] = field(default_factory=list)


def _encode(params: ModelParams, X: np.ndarray, cache: _Cache | None = None) -> np.ndarray:
    a = X
    n_hidden = len(params.config.hidden_dims)
    for i in range(n_hidden):
        pre = a @ params.weights[i] + params.biases[i]
        if cache is not None:
            cache.inputs.append(a)
            cache.pre.append(pre)
        a = np.maximum(pre, 0.0)
    if cache is not None:
        cache.inputs.append(a)
    return a @ params.weights[n_hidden] + params.biases[n_hidden]


def forward_batch(params: ModelParams, X) -> tuple[np.ndarray, np.ndarray]:
    """Representations ``(N, repr_dim)`` and logits ``(N, num_classes)``."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != params.config.input_dim:
        raise ValueError(f"expected inputs of shape (N, {params.config.input_dim}), got {X.shape}")
    Z = _encode(params, X)
    return Z, Z @ params.weights[-1] + params.biases[-1]


def forward(params: ModelParams, x) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (params.config.input_dim,):
        raise ValueError(f"expected a feature vector of length {params.config.input_dim}")
    Z, logits = forward_batch(params, x[None, :])
    return Z[0], logits[0]


def loss_ce(logits, labels) -> float:
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or len(logits) == 0 or len(labels) != len(logits):
        raise ValueError("logits must be a nonempty (N, C) batch matching labels")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ValueError("label out of range")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    nll = log_norm - shifted[np.arange(len(labels)), labels]
    return float(nll.mean())


def _supcon(Z: np.ndarray, labels: np.ndarray, tau: float, need_grad: bool):
    N = len(Z)
    norms = np.linalg.norm(Z, axis=1)
    if np.any(norms == 0.0):
        raise DegenerateVectorError("zero-norm representation in contrastive loss")
    positives = labels[:, None] == labels[None, :]
    np.fill_diagonal(positives, False)
    n_pos = positives.sum(axis=1)
    has_pos = n_pos > 0
    if not has_pos.any():
        return 0.0, (np.zeros_like(Z) if need_grad else None)

    U = Z / norms[:, None]
    S = (U @ U.T) / tau
    off = ~np.eye(N, dtype=bool)
    S_off = np.where(off, S, -np.inf)
    row_max = S_off.max(axis=1, keepdims=True)
    expS = np.exp(S_off - row_max)
    denom = expS.sum(axis=1, keepdims=True)
    log_denom = np.log(denom[:, 0]) + row_max[:, 0]

    safe_pos = np.maximum(n_pos, 1)
    mean_pos_sim = np.where(positives, S, 0.0).sum(axis=1) / safe_pos
    per_sample = np.where(has_pos, log_denom - mean_pos_sim, 0.0)
    loss = float(per_sample.sum() / N)
    if not need_grad:
        return loss, None

    # dL/dS_ij over ordered pairs; rows without positives carry no gradient
    G = expS / denom - positives / safe_pos[:, None]
    G = np.where(has_pos[:, None] & off, G, 0.0) / N
    dU = (G + G.T) @ U / tau
    dZ = (dU - U * np.sum(dU * U, axis=1, keepdims=True)) / norms[:, None]
    return loss, dZ


def loss_supcon(representations, labels, tau: float) -> float:
    Z = np.asarray(representations, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(Z) < 2:
        raise ValueError("contrastive loss needs a batch of at least 2")
    if tau <= 0:
        raise ValueError("tau must be positive")
    return _supcon(Z, labels, tau, need_grad=False)[0]


def loss_and_grad(params: ModelParams, X, labels, lam: float, tau: float,
                  ) -> tuple[float, list[np.ndarray]]:
    """Combined loss CE + lam * SupCon on one batch and its gradient.

    Gradients come back in the order of :meth:`ModelParams.arrays`.
    """
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    N = len(X)
    cache = _Cache()
    Z = _encode(params, X, cache)
    logits = Z @ params.weights[-1] + params.biases[-1]

    P = softmax(logits, axis=1)
    loss = loss_ce(logits, labels)
    dlogits = P
    dlogits[np.arange(N), labels] -= 1.0
    dlogits /= N

    grads_w = [None] * len(params.weights)
    grads_b = [None] * len(params.biases)
    grads_w[-1] = Z.T @ dlogits
    grads_b[-1] = dlogits.sum(axis=0)
    dZ = dlogits @ params.weights[-1].T

    if lam != 0.0 and N >= 2:
        cl, dZ_cl = _supcon(Z, labels, tau, need_grad=True)
        loss += lam * cl
        dZ = dZ + lam * dZ_cl

    n_hidden = len(params.config.hidden_dims)
    da = dZ
    for i in range(n_hidden, -1, -1):
        grads_w[i] = cache.inputs[i].T @ da
        grads_b[i] = da.sum(axis=0)
        if i > 0:
            da = (da @ params.weights[i].T) * (cache.pre[i - 1] > 0)

    grads = []
    for gw, gb in zip(grads_w, grads_b):
        grads.extend((gw, gb))
    return float(loss), grads


def total_loss(params: ModelParams, X, labels, lam: float, tau: float) -> float:
    Z, logits = forward_batch(params, X)
    loss = loss_ce(logits, labels)
    if lam != 0.0 and len(Z) >= 2:
        loss += lam * _supcon(Z, np.asarray(labels), tau, need_grad=False)[0]
    return loss


def sgd_step(params: ModelParams, X, labels, cfg: TrainConfig) -> ModelParams:
    _, grads = loss_and_grad(params, X, labels, cfg.lam, cfg.tau)
    out = params.copy()
    for a, g in zip(out.arrays(), grads):
        a -= cfg.lr * g
    return out


def local_train(params: ModelParams, X, y, cfg: TrainConfig, rng: SeededRng) -> ModelParams:
    """Mini-batch SGD on the combined loss; the input params are left untouched."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if len(X) == 0:
        raise ValueError("cannot train on an empty dataset")
    out = params.copy()
    arrays = out.arrays()
    for _ in range(cfg.local_epochs):
        order = rng.permutation(len(X))
        for start in range(0, len(X), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            _, grads = loss_and_grad(out, X[idx], y[idx], cfg.lam, cfg.tau)
            for a, g in zip(arrays, grads):
                a -= cfg.lr * g
    return out


def finite_difference_errors(params: ModelParams, X, y, cfg: TrainConfig,
                             rng: SeededRng, n_coords: int = 60, step: float = 1e-5,
                             grad_fn=None) -> tuple[np.ndarray, np.ndarray]:
    """Analytic vs central-difference gradient on a random coordinate subset.

    Returns ``(analytic, numeric)`` arrays over the sampled coordinates.
    ``grad_fn`` replaces :func:`loss_and_grad` as the analytic side.
    """
    _, grads = (grad_fn or loss_and_grad)(params, X, y, cfg.lam, cfg.tau)
    g_flat = np.concatenate([g.ravel() for g in grads])
    base = params.flat()
    coords = rng.choice(base.size, size=min(n_coords, base.size), replace=False)
    numeric = np.empty(len(coords))
    for j, c in enumerate(coords):
        plus = base.copy()
        plus[c] += step
        minus = base.copy()
        minus[c] -= step
        lp = total_loss(ModelParams.from_flat(params.config, plus), X, y, cfg.lam, cfg.tau)
        lm = total_loss(ModelParams.from_flat(params.config, minus), X, y, cfg.lam, cfg.tau)
        numeric[j] = (lp - lm) / (2 * step)
    return g_flat[coords], numeric


def gradient_check(params: ModelParams, X, y, cfg: TrainConfig, rng: SeededRng,
                   n_coords: int = 60, step: float = 1e-5, grad_fn=None) -> float:
    """Max relative error between analytic and finite-difference gradients."""
    analytic, numeric = finite_difference_errors(params, X, y, cfg, rng, n_coords, step, grad_fn)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    return float(np.max(np.abs(analytic - numeric) / scale))
