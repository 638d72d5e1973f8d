"""Command-line entry point: ``flce simulate|compare|gradcheck|report|print-config``.

Exit codes: 0 success, 1 configuration or input error, 2 runtime error during
a run, 3 gradient check failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import io
import logging
import sys
from pathlib import Path

import numpy as np

from . import numerics as nm
from .completion import CompletionConfig
from .data import DatasetError, quality_from_counts
from .engine import (
    METHODS,
    ChecksumError,
    DataSpec,
    NoiseSpec,
    RunConfig,
    RunError,
    SchemaVersionError,
    _atomic_write,
    build_data,
    load_run,
    persist_run,
    run_federation,
)
from .evaluation import (
    DistributionVectors,
    class_client_weights,
    communication_ratio,
    euclidean_distance,
    kl_divergence,
)
from .model import ModelConfig, ModelParams, TrainConfig, gradient_check, loss_and_grad

logger = logging.getLogger("flce")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_GRADCHECK = 0, 1, 2, 3
GRADCHECK_TOLERANCE = 1e-4
GRADCHECK_INSTANCES = 10


class ConfigError(ValueError):
    pass


# section -> key -> kind; the kind decides both parsing and echoing
SCHEMA: dict[str, dict[str, str]] = {
    "run": {"n_clients": "int", "clients_per_round": "int", "rounds": "int",
            "dirichlet": "float", "method": "str", "seed": "int", "workers": "int",
            "quality": "str", "shapley_permutations": "int",
            "prototypes_correct_only": "bool"},
    "model": {"hidden_dims": "ints", "repr_dim": "int"},
    "data": {f.name: "" for f in dataclasses.fields(DataSpec)},
    "noise": {"label_clients": "ints", "label_rate": "float",
              "feature_clients": "ints", "feature_sigma": "float"},
    "train": {f.name: "" for f in dataclasses.fields(TrainConfig)},
    "completion": {f.name: "" for f in dataclasses.fields(CompletionConfig)},
    "distribution": {"round_weights": "floats", "class_weights": "floats"},
}
_NESTED = {"data": DataSpec, "noise": NoiseSpec, "train": TrainConfig,
           "completion": CompletionConfig}


def _kind_of(value) -> str:
    if isinstance(value, bool):
        return "bool"
    if isinstance(value, int):
        return "int"
    if isinstance(value, float):
        return "float"
    return "str"


for _section, _cls in _NESTED.items():
    for _f in dataclasses.fields(_cls):
        if not SCHEMA[_section][_f.name]:
            SCHEMA[_section][_f.name] = _kind_of(_f.default)


def _parse_value(kind: str, text: str, where: str):
    text = text.strip()
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "bool":
            lowered = text.lower()
            if lowered not in ("true", "false"):
                raise ValueError
            return lowered == "true"
        if kind in ("ints", "floats"):
            cast = int if kind == "ints" else float
            return tuple(cast(p) for p in text.split(",") if p.strip())
        return text
    except ValueError:
        raise ConfigError(f"{where}: expected {kind}, got {text!r}") from None


def _format_value(kind: str, value) -> str:
    if kind == "bool":
        return "true" if value else "false"
    if kind == "float":
        return repr(float(value))
    if kind == "floats":
        return ", ".join(repr(float(v)) for v in value)
    if kind == "ints":
        return ", ".join(str(int(v)) for v in value)
    return str(value)


def parse_config(text: str) -> RunConfig:
    """Parse and validate a sectioned config; unknown sections or keys are errors."""
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    values: dict[str, dict] = {s: {} for s in SCHEMA}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            values[section][key] = _parse_value(SCHEMA[section][key], raw, f"[{section}] {key}")
    kwargs = dict(values["run"])
    kwargs.update(values["model"])
    kwargs.update(values["distribution"])
    for section, cls in _NESTED.items():
        try:
            kwargs[section] = cls(**values[section])
        except ValueError as exc:
            raise ConfigError(f"[{section}] {exc}") from None
    cfg = RunConfig(**kwargs)
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(f"[run] {exc}") from None
    return cfg


def format_config(cfg: RunConfig) -> str:
    """Canonical text form; ``parse_config(format_config(c)) == c``."""
    flat = {
        "run": {k: getattr(cfg, k) for k in SCHEMA["run"]},
        "model": {k: getattr(cfg, k) for k in SCHEMA["model"]},
        "distribution": {k: getattr(cfg, k) for k in SCHEMA["distribution"]},
    }
    for section in _NESTED:
        flat[section] = dataclasses.asdict(getattr(cfg, section))
    lines = []
    for section, keys in SCHEMA.items():
        lines.append(f"[{section}]")
        for key, kind in keys.items():
            lines.append(f"{key} = {_format_value(kind, flat[section][key])}")
        lines.append("")
    return "\n".join(lines)


def load_config(path: str | None) -> RunConfig:
    if path is None:
        return parse_config("")
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text)


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _fail(code: int, message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(args) -> int:
    try:
        cfg = load_config(args.config)
        overrides = {}
        if args.method is not None:
            overrides["method"] = args.method
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.workers is not None:
            overrides["workers"] = args.workers
        if overrides:
            cfg = dataclasses.replace(cfg, **overrides)
            cfg.validate()
    except ValueError as exc:
        return _fail(EXIT_CONFIG, str(exc))
    try:
        data = build_data(cfg, nm.SeededRng(cfg.seed))
    except (DatasetError, OSError, ValueError) as exc:
        return _fail(EXIT_CONFIG, f"[data] {exc}")
    try:
        record = run_federation(cfg, data=data)
    except RunError as exc:
        return _fail(EXIT_RUNTIME, str(exc))
    out = persist_run(record, args.out)

    primary = record.primary
    quality = record.quality(cfg.quality)
    print(f"{primary.method} contributions ({cfg.n_clients} clients, {cfg.rounds} rounds)")
    print("client  contribution  quality")
    for k, (c, q) in enumerate(zip(primary.contributions, quality)):
        print(f"{k:>6}  {c:12.6f}  {q:7.4f}")
    print(f"KL(contribution || {cfg.quality} quality) = {kl_divergence(primary.contributions, quality):.6f}")
    acc, f1 = record.final_accuracy()
    print(f"final accuracy {acc:.4f}  macro-F1 {f1:.4f}")
    print(f"run written to {out}")
    return EXIT_OK


def _load_reference(spec: str, counts: np.ndarray) -> tuple[str, np.ndarray]:
    if spec == "volume":
        return "volume", quality_from_counts(counts, "volume")
    if spec in ("diversity", "class-diversity"):
        return "diversity", quality_from_counts(counts, "class-diversity")
    if spec.startswith("shapley:"):
        path = Path(spec[len("shapley:"):])
        if path.is_dir():
            path = path / "contributions.csv"
        if not path.is_file():
            raise FileNotFoundError(f"reference file {path} does not exist")
        with path.open(newline="") as fh:
            rows = list(csv.DictReader(fh))
        column = "contribution" if rows and "contribution" in rows[0] else "value"
        try:
            values = np.array([float(r[column]) for r in rows])
            return f"shapley:{path}", nm.normalize_to_simplex(np.maximum(values, 0.0))
        except (KeyError, ValueError) as exc:
            raise ValueError(f"{path}: not a contribution file ({exc})") from None
    raise ValueError(f"unknown reference {spec!r}; use volume, diversity or shapley:PATH")


def cmd_compare(args) -> int:
    try:
        records = [(d, load_run(d)) for d in args.runs]
    except (OSError, SchemaVersionError, ChecksumError) as exc:
        return _fail(EXIT_CONFIG, str(exc))
    sizes = {r.config.n_clients for _, r in records}
    if len(sizes) != 1:
        return _fail(EXIT_CONFIG, f"runs disagree on the number of clients: {sorted(sizes)}")
    try:
        name, ref = _load_reference(args.reference, records[0][1].class_counts)
    except (OSError, ValueError) as exc:
        return _fail(EXIT_CONFIG, str(exc))
    if len(ref) != sizes.pop():
        return _fail(EXIT_CONFIG, f"reference has {len(ref)} entries, runs have {len(records[0][1].class_counts)} clients")
    rows = []
    for d, rec in records:
        ce = rec.primary.contributions
        rows.append([str(d), rec.primary.method, repr(kl_divergence(ce, ref)),
                     repr(euclidean_distance(ce, ref))])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _atomic_write(out / "comparison.csv", _csv(["run", "method", "kl", "euclidean"], rows))
    print(f"reference: {name}")
    for r in rows:
        print(f"{r[0]}  {r[1]:<12} kl={float(r[2]):.6f}  l2={float(r[3]):.6f}")
    return EXIT_OK


def gradcheck_instances(seed: int):
    """The seeded networks and batches checked by ``gradcheck``."""
    base = nm.SeededRng(seed)
    for i in range(GRADCHECK_INSTANCES):
        rng = base.split(i)
        hidden = (16,) if i % 2 == 0 else (12, 10)
        params = ModelParams.init(ModelConfig(5, 3, hidden, 6), rng.split(0))
        X = rng.split(1).normal(size=(10, 5))
        y = np.arange(10) % 3
        lam = 1.0 if i < GRADCHECK_INSTANCES - 2 else 0.0
        yield i, params, X, y, TrainConfig(lam=lam, tau=0.5), rng.split(2)


def _corrupted_grad(params, X, y, lam, tau):
    loss, grads = loss_and_grad(params, X, y, lam, tau)
    grads = [g.copy() for g in grads]
    grads[0] *= 1.5
    grads[-1] += 0.1
    return loss, grads


def cmd_gradcheck(args) -> int:
    grad_fn = _corrupted_grad if args.corrupt_gradient else None
    worst, failed = 0.0, None
    for i, params, X, y, cfg, rng in gradcheck_instances(args.seed):
        err = gradient_check(params, X, y, cfg, rng, n_coords=params.num_params, grad_fn=grad_fn)
        print(f"instance {i} (seed {args.seed}, key {i}): max relative error {err:.3e}")
        worst = max(worst, err)
        if err >= GRADCHECK_TOLERANCE and failed is None:
            failed = i
    print(f"max relative error {worst:.3e} (tolerance {GRADCHECK_TOLERANCE:g})")
    if failed is not None:
        return _fail(EXIT_GRADCHECK, f"gradient check failed on instance {failed} "
                                     f"(seed {args.seed}, key {failed})")
    return EXIT_OK


def cmd_report(args) -> int:
    try:
        rec = load_run(args.run)
    except (OSError, SchemaVersionError, ChecksumError) as exc:
        return _fail(EXIT_CONFIG, str(exc))
    cfg = rec.config
    out = Path(args.run) / "report"
    out.mkdir(exist_ok=True)
    quality = rec.quality(cfg.quality)
    _atomic_write(out / "kl_per_method.csv", _csv(
        ["method", "reference", "kl", "euclidean"],
        [[m, cfg.quality, repr(kl_divergence(r.contributions, quality)),
          repr(euclidean_distance(r.contributions, quality))]
         for m, r in sorted(rec.results.items())]))
    _atomic_write(out / "accuracy.csv", _csv(
        ["round", "accuracy", "macro_f1"],
        [[rl.round, repr(rl.accuracy), repr(rl.macro_f1)] for rl in rec.rounds]))
    T, n, C = rec.completed.shape
    ab = DistributionVectors.build(T, C, cfg.round_weights, cfg.class_weights)
    weights = class_client_weights(rec.completed, ab)
    _atomic_write(out / "class_weights.csv", _csv(
        ["client", "class", "weight"],
        [[k, c, repr(float(weights[k, c]))] for k in range(n) for c in range(C)]))
    proto_floats = cfg.repr_dim * C
    _atomic_write(out / "communication.csv", _csv(
        ["prototype_floats", "model_params", "ratio"],
        [[proto_floats, rec.model_params, repr(communication_ratio(proto_floats, rec.model_params))]]))
    print(f"report written to {out}")
    return EXIT_OK


def cmd_print_config(args) -> int:
    try:
        cfg = load_config(args.config)
    except ValueError as exc:
        return _fail(EXIT_CONFIG, str(exc))
    sys.stdout.write(format_config(cfg))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flce", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run a federation and score the clients")
    s.add_argument("--config", help="config file (defaults apply when omitted)")
    s.add_argument("--out", required=True, help="run directory to write")
    s.add_argument("--method", choices=METHODS)
    s.add_argument("--seed", type=int)
    s.add_argument("--workers", type=int, help="client threads per round")
    s.set_defaults(func=cmd_simulate)

    c = sub.add_parser("compare", help="distance of run contributions to a reference")
    c.add_argument("--runs", nargs="+", required=True)
    c.add_argument("--reference", default="volume", help="volume, diversity or shapley:PATH")
    c.add_argument("--out", default=".", help="directory for comparison.csv")
    c.set_defaults(func=cmd_compare)

    g = sub.add_parser("gradcheck", help="finite-difference check of the local loss gradient")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--corrupt-gradient", action="store_true", help=argparse.SUPPRESS)
    g.set_defaults(func=cmd_gradcheck)

    r = sub.add_parser("report", help="write plot-ready CSVs for a run")
    r.add_argument("--run", required=True)
    r.set_defaults(func=cmd_report)

    pc = sub.add_parser("print-config", help="echo the effective configuration")
    pc.add_argument("--config")
    pc.set_defaults(func=cmd_print_config)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
