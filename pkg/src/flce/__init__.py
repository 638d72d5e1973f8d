"""Contribution evaluation for simulated federated learning through class prototypes."""

from .engine import RunConfig, RunRecord, load_run, persist_run, run_federation

__all__ = ["RunConfig", "RunRecord", "load_run", "persist_run", "run_federation"]
__version__ = "0.1.0"
