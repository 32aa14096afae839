"""Deterministic simulator of the execute-order-validate transaction pipeline."""

from __future__ import annotations

from .config import CommitLag, NetworkModel, OrgDelay, SimConfig
from .core import Block, CutReason, Op, Transaction, TxStatus, WorldState
from .pipeline import SimulationResult, run
from .workload import make_stream

__all__ = [
    "Block",
    "CommitLag",
    "CutReason",
    "NetworkModel",
    "Op",
    "OrgDelay",
    "SimConfig",
    "SimulationResult",
    "Transaction",
    "TxStatus",
    "WorldState",
    "make_stream",
    "run",
]

__version__ = "0.1.0"
