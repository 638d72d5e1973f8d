"""Round loop of the simulated federation and run persistence.

All randomness is drawn from streams split off the master seed by
(purpose, round, client), so running clients on more threads never changes
a result.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import numerics as nm
from .baselines import (
    ShapleyEstimate,
    coalition_utility,
    contribution_by_similarity,
    contribution_by_volume,
    shapley_monte_carlo,
    similarity_shares,
)
from .completion import CompletionConfig, ContributionTensor, complete_tensor
from .core import (
    ClassMomentum,
    RoundMomentum,
    average_params,
    client_weights,
    compute_prototypes,
    round_momentum,
    update_global_prototypes,
)
from .data import (
    Dataset,
    Partition,
    generate_synthetic,
    inject_feature_noise,
    inject_label_noise,
    load_csv_dataset,
    partition_by_weights,
    partition_dirichlet,
    partition_iid,
    quality_from_counts,
    train_test_split,
)
from .evaluation import (
    ContributionResult,
    DistributionVectors,
    accuracy_and_macro_f1,
    config_hash,
    final_contributions,
)
from .model import ModelConfig, ModelParams, TrainConfig, forward_batch, local_train

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
METHODS = ("flce", "fedavg", "similarity", "shapley-mc")
PARTITIONS = ("dirichlet", "iid", "linear")


class RunError(RuntimeError):
    pass


class SchemaVersionError(ValueError):
    pass


class ChecksumError(ValueError):
    pass


@dataclass(frozen=True)
class DataSpec:
    source: str = "synthetic"
    path: str = ""
    num_classes: int = 10
    input_dim: int = 16
    per_class: int = 200
    spread: float = 0.5
    partition: str = "dirichlet"
    eval_fraction: float = 0.2


@dataclass(frozen=True)
class NoiseSpec:
    label_clients: tuple[int, ...] = ()
    label_rate: float = 0.0
    feature_clients: tuple[int, ...] = ()
    feature_sigma: float = 0.0


@dataclass(frozen=True)
class RunConfig:
    n_clients: int = 50
    clients_per_round: int = 10
    rounds: int = 100
    dirichlet: float = 0.5
    method: str = "flce"
    seed: int = 0
    workers: int = 1
    quality: str = "volume"
    shapley_permutations: int = 50
    prototypes_correct_only: bool = False
    hidden_dims: tuple[int, ...] = (64,)
    repr_dim: int = 64
    round_weights: tuple[float, ...] = ()
    class_weights: tuple[float, ...] = ()
    data: DataSpec = DataSpec()
    noise: NoiseSpec = NoiseSpec()
    train: TrainConfig = TrainConfig()
    completion: CompletionConfig = CompletionConfig()

    def validate(self) -> None:
        if not 1 <= self.clients_per_round <= self.n_clients:
            raise ValueError("need 1 <= clients_per_round <= n_clients")
        if self.rounds < 1:
            raise ValueError("rounds must be at least 1")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.data.partition not in PARTITIONS:
            raise ValueError(f"unknown partition {self.data.partition!r}")
        if self.dirichlet <= 0:
            raise ValueError("dirichlet must be positive")
        if self.workers < 1:
            raise ValueError("workers must be at least 1")
        if self.quality not in ("volume", "class-diversity"):
            raise ValueError(f"unknown quality mode {self.quality!r}")

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        nested = {"data": DataSpec, "noise": NoiseSpec, "train": TrainConfig,
                  "completion": CompletionConfig}
        for key, typ in nested.items():
            if key in d:
                sub = {k: tuple(v) if isinstance(v, list) else v for k, v in d[key].items()}
                d[key] = typ(**sub)
        for key in ("hidden_dims", "round_weights", "class_weights"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def hash(self) -> str:
        # workers never changes results, so it is not part of the identity
        d = self.to_dict()
        d.pop("workers")
        return config_hash(d)


@dataclass
class RoundLog:
    round: int
    selected: list[int]
    alpha: np.ndarray
    accuracy: float
    macro_f1: float
    global_prototypes: dict[int, np.ndarray]
    momentum: RoundMomentum
    similarity: np.ndarray | None = None


@dataclass
class RunRecord:
    config: RunConfig
    rounds: list[RoundLog]
    tensor: ContributionTensor
    completed: ContributionTensor
    results: dict[str, ContributionResult]
    class_counts: np.ndarray
    model_params: int
    final_model: ModelParams | None = None

    @property
    def config_hash(self) -> str:
        return self.config.hash()

    @property
    def primary(self) -> ContributionResult:
        key = {"flce": "flce", "fedavg": "volume", "similarity": "similarity",
               "shapley-mc": "shapley-mc"}[self.config.method]
        return self.results[key]

    def quality(self, mode: str | None = None) -> np.ndarray:
        return quality_from_counts(self.class_counts, mode or self.config.quality)

    def final_accuracy(self) -> tuple[float, float]:
        """Mean accuracy and macro-F1 over the last min(100, T/10) rounds."""
        T = len(self.rounds)
        window = max(1, min(100, T // 10))
        tail = self.rounds[-window:]
        return (float(np.mean([r.accuracy for r in tail])),
                float(np.mean([r.macro_f1 for r in tail])))


def select_clients(n: int, k: int, round: int, rng: nm.SeededRng) -> list[int]:
    if k > n:
        raise ValueError(f"cannot select {k} of {n} clients")
    stream = rng.split(nm.STREAM_SELECT, round)
    return sorted(int(i) for i in stream.choice(n, size=k, replace=False))


def build_data(cfg: RunConfig, master: nm.SeededRng) -> tuple[Partition, Dataset]:
    spec = cfg.data
    if spec.source == "synthetic":
        ds = generate_synthetic(spec.num_classes, spec.input_dim, spec.per_class, spec.spread,
                                master.split(nm.STREAM_DATA))
    elif spec.source == "csv":
        ds = load_csv_dataset(spec.path)
    else:
        raise ValueError(f"unknown data source {spec.source!r}")
    train, test = train_test_split(ds, spec.eval_fraction, master.split(nm.STREAM_SPLIT))
    prng = master.split(nm.STREAM_PARTITION)
    if spec.partition == "dirichlet":
        part = partition_dirichlet(train, cfg.n_clients, cfg.dirichlet, prng)
    elif spec.partition == "iid":
        part = partition_iid(train, cfg.n_clients, prng)
    else:
        part = partition_by_weights(train, np.arange(1, cfg.n_clients + 1), prng)
    noise = cfg.noise
    if noise.label_clients and noise.label_rate > 0:
        part = inject_label_noise(part, noise.label_clients, noise.label_rate,
                                  master.split(nm.STREAM_NOISE, 0))
    if noise.feature_clients and noise.feature_sigma > 0:
        part = inject_feature_noise(part, noise.feature_clients, noise.feature_sigma,
                                    master.split(nm.STREAM_NOISE, 1))
    return part, test


AuditHook = Callable[[RoundLog], None]


def run_federation(cfg: RunConfig, hook: AuditHook | None = None,
                   data: tuple[Partition, Dataset] | None = None) -> RunRecord:
    """Simulate ``cfg.rounds`` rounds and score every participant.

    ``hook`` is called with each finished :class:`RoundLog`; ``data`` lets a
    caller supply its own partition and held-out set.
    """
    cfg.validate()
    master = nm.SeededRng(cfg.seed)
    part, test = data if data is not None else build_data(cfg, master)
    n, K, T, C = cfg.n_clients, cfg.clients_per_round, cfg.rounds, part.num_classes
    if part.n != n:
        raise ValueError(f"partition has {part.n} clients, config says {n}")

    mcfg = ModelConfig(part.clients[0].input_dim, C, tuple(cfg.hidden_dims), cfg.repr_dim)
    global_model = ModelParams.init(mcfg, master.split(nm.STREAM_INIT))
    global_protos: dict[int, np.ndarray] = {}
    tensor = ContributionTensor.empty(T, n, C)
    sizes = part.sizes().astype(np.float64)
    shapley_totals = np.zeros(n)
    logs: list[RoundLog] = []

    def client_step(t: int, k: int):
        ds = part.clients[k]
        w = local_train(global_model, ds.X, ds.y, cfg.train, master.split(nm.STREAM_TRAIN, t, k))
        ps = compute_prototypes(w, ds.X, ds.y, C, client=k, round=t,
                                correct_only=cfg.prototypes_correct_only)
        return w, ps

    pool = ThreadPoolExecutor(max_workers=cfg.workers) if cfg.workers > 1 else None
    try:
        for t in range(T):
            try:
                selected = select_clients(n, K, t, master)
                if pool is None:
                    outputs = [client_step(t, k) for k in selected]
                else:
                    outputs = list(pool.map(lambda k: client_step(t, k), selected))
                models = [o[0] for o in outputs]
                proto_sets = [o[1] for o in outputs]

                rm = round_momentum(t, proto_sets, global_protos)
                for c, cm in rm.classes.items():
                    for k, q in zip(cm.clients, cm.momentum):
                        tensor.values[t, k, c] = q
                        tensor.observed[t, k, c] = True
                stale = set(global_protos) - set(rm.classes)
                if stale:
                    logger.info("round %d: global prototypes of classes %s carried forward",
                                t, sorted(stale))
                global_protos = update_global_prototypes(rm, proto_sets, global_protos)

                if cfg.method == "flce":
                    alpha = client_weights(rm)
                elif cfg.method == "similarity":
                    mean_flat = average_params([m.flat() for m in models],
                                               nm.uniform_simplex(K))
                    alpha = similarity_shares([m.flat() for m in models], mean_flat)
                else:
                    alpha = nm.normalize_to_simplex(sizes[selected])
                if cfg.method == "shapley-mc":
                    util = coalition_utility(models, test, empty_model=global_model)
                    est = shapley_monte_carlo(util, K, cfg.shapley_permutations,
                                              master.split(nm.STREAM_SHAPLEY, t))
                    shapley_totals[selected] += est.values

                new_global = average_params(models, alpha)
                sim = similarity_shares([m.flat() for m in models], new_global.flat())
                _, logits = forward_batch(new_global, test.X)
                acc, f1 = accuracy_and_macro_f1(logits, test.y)
            except Exception as exc:
                raise RunError(f"round {t}: {exc}") from exc

            global_model = new_global
            log = RoundLog(t, selected, alpha, acc, f1,
                           {c: g.copy() for c, g in global_protos.items()}, rm, sim)
            logs.append(log)
            if hook is not None:
                hook(log)
    finally:
        if pool is not None:
            pool.shutdown()

    try:
        completed = complete_tensor(tensor, cfg.completion)
    except Exception as exc:
        raise RunError(f"completion after round {T - 1}: {exc}") from exc
    ab = DistributionVectors.build(T, C, cfg.round_weights, cfg.class_weights)
    flce = final_contributions(completed, ab, {"config_hash": cfg.hash(), "tensor": "tensor.bin"})

    record = RunRecord(cfg, logs, tensor, completed, {}, part.class_counts(),
                       global_model.num_params, global_model)
    results = {"flce": flce, "volume": contribution_by_volume(part)}
    results["similarity"] = contribution_by_similarity(record)
    if cfg.method == "shapley-mc":
        est = ShapleyEstimate(shapley_totals, cfg.shapley_permutations, cfg.seed)
        results["shapley-mc"] = est.to_result("shapley-mc")
    for r in results.values():
        r.provenance.setdefault("config_hash", cfg.hash())
    record.results = results
    return record


# ---------------------------------------------------------------------------
# persistence


def _atomic_write(path: Path, data: bytes | str) -> None:
    if isinstance(data, str):
        data = data.encode()
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv_text(header: list[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _floats(a) -> list[float]:
    return [float(x) for x in np.asarray(a).ravel()]


def _round_to_json(rl: RoundLog) -> dict:
    return {
        "round": rl.round,
        "selected": rl.selected,
        "alpha": _floats(rl.alpha),
        "accuracy": rl.accuracy,
        "macro_f1": rl.macro_f1,
        "similarity": None if rl.similarity is None else _floats(rl.similarity),
        "global_prototypes": {str(c): _floats(g) for c, g in sorted(rl.global_prototypes.items())},
        "momentum": {
            str(c): {"clients": cm.clients, "mass": _floats(cm.mass),
                     "velocity": _floats(cm.velocity), "momentum": _floats(cm.momentum)}
            for c, cm in sorted(rl.momentum.classes.items())
        },
    }


def _round_from_json(d: dict) -> RoundLog:
    rm = RoundMomentum(d["round"], list(d["selected"]))
    for c, cm in d["momentum"].items():
        rm.classes[int(c)] = ClassMomentum(list(cm["clients"]), np.array(cm["mass"]),
                                           np.array(cm["velocity"]), np.array(cm["momentum"]))
    return RoundLog(
        round=d["round"], selected=list(d["selected"]), alpha=np.array(d["alpha"]),
        accuracy=d["accuracy"], macro_f1=d["macro_f1"],
        global_prototypes={int(c): np.array(g) for c, g in d["global_prototypes"].items()},
        momentum=rm,
        similarity=None if d["similarity"] is None else np.array(d["similarity"]),
    )


def persist_run(record: RunRecord, out_dir) -> Path:
    """Write the run directory; every file is replaced atomically."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = record.config
    n = cfg.n_clients

    tensor_bin = record.tensor.to_bytes()
    completed_bin = record.completed.to_bytes()
    model_bin = record.final_model.to_bytes() if record.final_model is not None else b""
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "config_hash": record.config_hash,
        # thread count never changes results, so it stays out of the record
        "config": {k: v for k, v in cfg.to_dict().items() if k != "workers"},
        "class_counts": record.class_counts.tolist(),
        "model_params": record.model_params,
        "checksums": {
            "tensor.bin": hashlib.sha256(tensor_bin).hexdigest(),
            "completed.bin": hashlib.sha256(completed_bin).hexdigest(),
            "model.bin": hashlib.sha256(model_bin).hexdigest(),
        },
    }
    _atomic_write(out / "config.json", json.dumps(manifest, indent=1, sort_keys=True) + "\n")

    rows = []
    for rl in record.rounds:
        alpha = dict(zip(rl.selected, rl.alpha))
        for k in range(n):
            rows.append([rl.round, k, repr(float(alpha.get(k, 0.0))), int(k in alpha)])
    _atomic_write(out / "rounds.csv", _csv_text(["round", "client", "alpha", "selected"], rows))
    _atomic_write(out / "rounds.json",
                  json.dumps([_round_to_json(rl) for rl in record.rounds]) + "\n")
    _atomic_write(out / "tensor.bin", tensor_bin)
    _atomic_write(out / "tensor.csv", record.tensor.to_csv())
    _atomic_write(out / "completed.bin", completed_bin)
    _atomic_write(out / "completed.csv", record.completed.to_csv())
    _atomic_write(out / "model.bin", model_bin)
    _atomic_write(out / "contributions.csv", record.primary.to_csv())
    _atomic_write(out / "results.json", json.dumps(
        {k: v.to_json() for k, v in sorted(record.results.items())}, indent=1) + "\n")
    _atomic_write(out / "metrics.csv", _csv_text(
        ["round", "accuracy", "macro_f1"],
        [[rl.round, repr(rl.accuracy), repr(rl.macro_f1)] for rl in record.rounds]))
    return out


def _read_checked(path: Path, expected: str) -> bytes:
    blob = path.read_bytes()
    if hashlib.sha256(blob).hexdigest() != expected:
        raise ChecksumError(f"{path.name}: checksum mismatch")
    return blob


def load_run(path) -> RunRecord:
    d = Path(path)
    if not (d / "config.json").exists():
        raise FileNotFoundError(f"no run record at {d}")
    manifest = json.loads((d / "config.json").read_text())
    version = manifest.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SchemaVersionError(f"run record schema v{version}; this reader understands "
                                 f"v{SCHEMA_VERSION}")
    sums = manifest["checksums"]
    tensor = ContributionTensor.from_bytes(_read_checked(d / "tensor.bin", sums["tensor.bin"]))
    completed = ContributionTensor.from_bytes(
        _read_checked(d / "completed.bin", sums["completed.bin"]))
    model_blob = _read_checked(d / "model.bin", sums["model.bin"])
    results = {k: ContributionResult.from_json(v)
               for k, v in json.loads((d / "results.json").read_text()).items()}
    rounds = [_round_from_json(r) for r in json.loads((d / "rounds.json").read_text())]
    return RunRecord(
        config=RunConfig.from_dict(manifest["config"]),
        rounds=rounds,
        tensor=tensor,
        completed=completed,
        results=results,
        class_counts=np.array(manifest["class_counts"], dtype=np.int64),
        model_params=manifest["model_params"],
        final_model=ModelParams.from_bytes(model_blob) if model_blob else None,
    )
