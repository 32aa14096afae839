"""Single runs, resumable parameter sweeps and block-size trend reports."""

from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
import logging
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Optional

from scipy.stats import spearmanr

from .classifier import FailureRecord, write_trace
from .config import SimConfig
from .core import TxStatus
from .errors import ConfigInvalid, InsufficientData, SimError
from .pipeline import SimulationResult, run
from .workload import make_stream

log = logging.getLogger(__name__)

CSV_COLUMNS = (
    "mode",
    "block_size",
    "rate_tps",
    "policy",
    "skew",
    "workload",
    "rep",
    "total_tx",
    "success",
    "endorse_fail",
    "mvcc_intra",
    "mvcc_inter",
    "phantom",
    "early_abort",
    "avg_latency_ms",
    "committed_tps",
)
METRIC_COLUMNS = CSV_COLUMNS[7:]
FAILURE_COLUMNS = (
    "tx_id",
    "status",
    "conflicting_key",
    "range_start",
    "range_end",
    "writer_height",
    "writer_index",
    "endorser_a",
    "endorser_b",
    "detected_at_ms",
)

DEFAULT_WORKLOAD = {
    "chaincode": "EHR",
    "preset": "uniform",
    "rate_tps": 100.0,
    "duration_s": 180.0,
    "zipf_skew": 1.0,
    "seed": 0,
    "poisson": False,
}
WORKLOAD_FIELDS = set(DEFAULT_WORKLOAD) | {"mix", "n_keys"}


def load_json(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigInvalid(f"{path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigInvalid(f"{path}: expected a JSON object")
    return data


def workload_from_dict(data: dict[str, Any]):
    unknown = set(data) - WORKLOAD_FIELDS
    if unknown:
        raise ConfigInvalid(f"unknown workload fields: {sorted(unknown)}")
    w = {**DEFAULT_WORKLOAD, **data}
    try:
        return make_stream(
            chaincode=w["chaincode"],
            preset=w.get("preset"),
            mix=w.get("mix"),
            rate_tps=float(w["rate_tps"]),
            duration_s=float(w["duration_s"]),
            zipf_skew=float(w["zipf_skew"]),
            seed=int(w["seed"]),
            poisson=bool(w["poisson"]),
            n_keys=w.get("n_keys"),
        )
    except (KeyError, ValueError) as exc:
        if isinstance(exc, SimError):
            raise
        raise ConfigInvalid(f"bad workload: {exc}") from None


# --- single run ---------------------------------------------------------------


def failure_row(rec: FailureRecord) -> dict[str, Any]:
    def peer(p):
        return "" if p is None else f"{p[0]}.{p[1]}"

    return {
        "tx_id": rec.tx_id,
        "status": rec.status.value,
        "conflicting_key": rec.conflicting_key,
        "range_start": rec.range[0] if rec.range else "",
        "range_end": rec.range[1] if rec.range else "",
        "writer_height": "" if rec.writer_location is None else rec.writer_location[0],
        "writer_index": "" if rec.writer_location is None else rec.writer_location[1],
        "endorser_a": peer(rec.endorsers[0]) if rec.endorsers else "",
        "endorser_b": peer(rec.endorsers[1]) if rec.endorsers else "",
        "detected_at_ms": repr(rec.detected_at),
    }


def write_outputs(result: SimulationResult, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "ledger.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        write_trace(fh, result.ledger, result.total_submitted, result.stats.early_aborts)
    with open(out_dir / "metrics.json", "w", encoding="utf-8") as fh:
        json.dump(result.metrics, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(out_dir / "failures.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=FAILURE_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for rec in result.failure_records():
            writer.writerow(failure_row(rec))


def run_single(
    config: SimConfig | dict | str | os.PathLike | None,
    workload: dict | str | os.PathLike | None,
    out_dir,
) -> SimulationResult:
    """Run one simulation and write ledger.jsonl, metrics.json and failures.csv."""
    if config is None:
        config = SimConfig()
    elif isinstance(config, dict):
        config = SimConfig.from_dict(config)
    elif not isinstance(config, SimConfig):
        config = SimConfig.load(config)
    if workload is None:
        workload = {}
    elif not isinstance(workload, dict):
        workload = load_json(workload)
    stream = workload_from_dict(workload)
    result = run(config, stream)
    write_outputs(result, Path(out_dir))
    return result


# --- sweeps ---------------------------------------------------------------------

AXES = ("modes", "block_sizes", "rates_tps", "policies", "skews", "workloads")


@dataclass
class SweepSpec:
    base_config: dict[str, Any] = field(default_factory=dict)
    base_workload: dict[str, Any] = field(default_factory=dict)
    modes: list[str] = field(default_factory=list)
    block_sizes: list[int] = field(default_factory=list)
    rates_tps: list[float] = field(default_factory=list)
    policies: list[str] = field(default_factory=list)
    skews: list[float] = field(default_factory=list)
    # "CHAINCODE:preset" entries, e.g. "EHR:uniform" or "genChain:update-heavy"
    workloads: list[str] = field(default_factory=list)
    repetitions: int = 1
    seed_base: int = 0
    max_cells: int = 10_000

    def __post_init__(self):
        if self.repetitions < 1:
            raise ConfigInvalid("repetitions must be >= 1")
        n = self.cell_count()
        if n > self.max_cells:
            raise ConfigInvalid(f"sweep has {n} runs, above the limit of {self.max_cells}")

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "SweepSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigInvalid(f"unknown sweep fields: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "SweepSpec":
        return cls.from_dict(load_json(path))

    def cell_count(self) -> int:
        n = self.repetitions
        for axis in AXES:
            n *= max(1, len(getattr(self, axis)))
        return n

    def points(self) -> list[dict[str, Any]]:
        base = SimConfig.from_dict(self.base_config)
        wl = {**DEFAULT_WORKLOAD, **self.base_workload}
        default_workload = f"{wl['chaincode']}:{wl.get('preset') or 'custom'}"
        axes = [
            self.modes or [base.mode],
            self.block_sizes or [base.block_size],
            self.rates_tps or [wl["rate_tps"]],
            self.policies or [base.policy],
            self.skews or [wl["zipf_skew"]],
            self.workloads or [default_workload],
        ]
        out = []
        for mode, bs, rate, policy, skew, workload in itertools.product(*axes):
            out.append(
                {
                    "mode": mode,
                    "block_size": int(bs),
                    "rate_tps": float(rate),
                    "policy": policy,
                    "skew": float(skew),
                    "workload": workload,
                }
            )
        return out


def cell_seed(seed_base: int, coords: dict[str, Any], rep: int) -> int:
    """seed_base XOR a stable hash of the cell coordinates and repetition."""
    blob = json.dumps({"coords": coords, "rep": rep}, sort_keys=True).encode()
    h = int.from_bytes(hashlib.blake2b(blob, digest_size=8).digest(), "big")
    return (seed_base ^ h) & ((1 << 63) - 1)


def cell_id(coords: dict[str, Any], rep: int) -> str:
    blob = json.dumps({"coords": coords, "rep": rep}, sort_keys=True).encode()
    return hashlib.blake2b(blob, digest_size=10).hexdigest()


def result_row(coords: dict[str, Any], rep, result: SimulationResult) -> dict[str, Any]:
    c = result.stats.counts
    return {
        **coords,
        "rep": rep,
        "total_tx": result.total_submitted,
        "success": c[TxStatus.SUCCESS.value],
        "endorse_fail": c[TxStatus.ENDORSEMENT_POLICY_FAILURE.value],
        "mvcc_intra": c[TxStatus.MVCC_INTRA_BLOCK.value],
        "mvcc_inter": c[TxStatus.MVCC_INTER_BLOCK.value],
        "phantom": c[TxStatus.PHANTOM_READ.value],
        "early_abort": c[TxStatus.EARLY_ABORT_REORDER.value] + result.stats.early_aborts,
        "avg_latency_ms": result.stats.avg_total_latency_ms,
        "committed_tps": result.stats.committed_tps,
    }


def run_cell(spec: SweepSpec, coords: dict[str, Any], rep: int) -> dict[str, Any]:
    """Run one sweep cell; the result depends only on (spec bases, coords, rep)."""
    seed = cell_seed(spec.seed_base, coords, rep)
    chaincode, _, preset = coords["workload"].partition(":")
    config = SimConfig.from_dict(
        {
            **spec.base_config,
            "mode": coords["mode"],
            "block_size": coords["block_size"],
            "policy": coords["policy"],
            "seed": seed,
        }
    )
    wl = {**spec.base_workload, "chaincode": chaincode, "rate_tps": coords["rate_tps"], "zipf_skew": coords["skew"]}
    wl["seed"] = seed
    if preset and preset != "custom":
        wl["preset"] = preset
        wl.pop("mix", None)
    result = run(config, workload_from_dict(wl))
    return result_row(coords, rep, result)


def _cell_job(args):
    spec, coords, rep = args
    try:
        return coords, rep, run_cell(spec, coords, rep), None
    except SimError as exc:
        return coords, rep, None, f"{type(exc).__name__}: {exc}"


def run_sweep(spec: SweepSpec, out_dir, parallelism: int = 1) -> Path:
    """Run every cell not already on disk, then write sweep.csv.

    Each finished cell is stored as cells/<id>.json, so an interrupted
    sweep picks up where it stopped. Failing cells are listed in
    failed.jsonl and the sweep carries on.
    """
    out = Path(out_dir)
    cells_dir = out / "cells"
    cells_dir.mkdir(parents=True, exist_ok=True)
    todo = []
    for coords in spec.points():
        for rep in range(spec.repetitions):
            if not (cells_dir / f"{cell_id(coords, rep)}.json").exists():
                todo.append((spec, coords, rep))
    log.info("sweep: %d cells, %d to run", spec.cell_count(), len(todo))
    failed = []
    if parallelism > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=parallelism) as pool:
            for res in pool.map(_cell_job, todo):
                _store(cells_dir, res, failed)
    else:
        for job in todo:
            _store(cells_dir, _cell_job(job), failed)
    with open(out / "failed.jsonl", "w", encoding="utf-8") as fh:
        for item in failed:
            fh.write(json.dumps(item, sort_keys=True) + "\n")
    rows = []
    for coords in spec.points():
        for rep in range(spec.repetitions):
            path = cells_dir / f"{cell_id(coords, rep)}.json"
            if path.exists():
                rows.append(json.loads(path.read_text(encoding="utf-8")))
    csv_path = out / "sweep.csv"
    write_sweep_csv(csv_path, rows + average_rows(rows))
    return csv_path


def _store(cells_dir: Path, res, failed: list) -> None:
    coords, rep, row, error = res
    if row is None:
        log.warning("cell %s rep %d failed: %s", coords, rep, error)
        failed.append({"coords": coords, "rep": rep, "error": error})
        return
    path = cells_dir / f"{cell_id(coords, rep)}.json"
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(row, sort_keys=True), encoding="utf-8")
    tmp.replace(path)


def average_rows(rows: Iterable[dict[str, Any]]) -> list[dict[str, Any]]:
    groups: dict[tuple, list[dict]] = {}
    for row in rows:
        if row["rep"] == "mean":
            continue
        key = tuple(row[c] for c in CSV_COLUMNS[:6])
        groups.setdefault(key, []).append(row)
    out = []
    for key, members in groups.items():
        mean = dict(zip(CSV_COLUMNS[:6], key))
        mean["rep"] = "mean"
        for col in METRIC_COLUMNS:
            mean[col] = math.fsum(float(m[col]) for m in members) / len(members)
        out.append(mean)
    return out


def write_sweep_csv(path, rows: list[dict[str, Any]]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({c: _fmt(row[c]) for c in CSV_COLUMNS})


def _fmt(value):
    return repr(value) if isinstance(value, float) else value


def read_sweep_csv(path) -> list[dict[str, Any]]:
    with open(path, encoding="utf-8", newline="") as fh:
        text = fh.read()
    rows = []
    for raw in csv.DictReader(io.StringIO(text)):
        row: dict[str, Any] = dict(raw)
        row["block_size"] = int(row["block_size"])
        for col in ("rate_tps", "skew", *METRIC_COLUMNS):
            row[col] = float(row[col])
        rows.append(row)
    return rows


# --- trend report ------------------------------------------------------------------


@dataclass
class TrendCell:
    group: dict[str, Any]
    block_sizes: list[int]
    failure_pct: list[float]
    best_block_size: int
    worst_block_size: int
    min_failure_pct: float
    max_failure_pct: float
    intra_rho: float
    inter_rho: float
    intra_verdict: str
    inter_verdict: str

    @property
    def relative_gap(self) -> float:
        """How much worse the worst block size is than the best, relative to the best."""
        if self.min_failure_pct == 0:
            return math.inf if self.max_failure_pct > 0 else 0.0
        return (self.max_failure_pct - self.min_failure_pct) / self.min_failure_pct


@dataclass
class TrendReport:
    cells: list[TrendCell]

    def to_text(self) -> str:
        lines = []
        for c in self.cells:
            g = ", ".join(f"{k}={v}" for k, v in c.group.items())
            lines.append(
                f"[{g}] best={c.best_block_size} ({c.min_failure_pct:.2f}%) "
                f"worst={c.worst_block_size} ({c.max_failure_pct:.2f}%) "
                f"intra={c.intra_verdict} (rho={c.intra_rho:+.2f}) "
                f"inter={c.inter_verdict} (rho={c.inter_rho:+.2f})"
            )
        return "\n".join(lines)


def spearman_verdict(xs: list[float], ys: list[float]) -> tuple[float, str]:
    if len(set(ys)) <= 1:
        return 0.0, "FLAT"
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rho = float(spearmanr(xs, ys).statistic)
    if math.isnan(rho) or rho == 0:
        return 0.0, "FLAT"
    return rho, "INCREASING" if rho > 0 else "DECREASING"


def failure_pct(row: dict[str, Any]) -> float:
    total = float(row["total_tx"])
    return 100.0 * (total - float(row["success"])) / total if total else 0.0


def trend_report(source) -> TrendReport:
    """Best/worst block size and intra/inter trends per non-block-size cell.

    Uses the averaged rows when present, otherwise averages the raw rows.
    """
    rows = source if isinstance(source, list) else read_sweep_csv(source)
    means = [r for r in rows if r["rep"] == "mean"] or average_rows(rows)
    group_cols = ("mode", "rate_tps", "policy", "skew", "workload")
    groups: dict[tuple, list[dict]] = {}
    for r in means:
        groups.setdefault(tuple(r[c] for c in group_cols), []).append(r)
    cells = []
    for key, members in sorted(groups.items(), key=lambda kv: tuple(map(str, kv[0]))):
        members.sort(key=lambda r: int(r["block_size"]))
        sizes = [int(r["block_size"]) for r in members]
        if len(set(sizes)) < 3:
            raise InsufficientData(f"need at least 3 block sizes, got {sorted(set(sizes))} for {key}")
        fails = [failure_pct(r) for r in members]
        best = min(range(len(sizes)), key=lambda i: (fails[i], sizes[i]))
        worst = max(range(len(sizes)), key=lambda i: (fails[i], -sizes[i]))
        intra_rho, intra_v = spearman_verdict(sizes, [float(r["mvcc_intra"]) for r in members])
        inter_rho, inter_v = spearman_verdict(sizes, [float(r["mvcc_inter"]) for r in members])
        cells.append(
            TrendCell(
                group=dict(zip(group_cols, key)),
                block_sizes=sizes,
                failure_pct=fails,
                best_block_size=sizes[best],
                worst_block_size=sizes[worst],
                min_failure_pct=fails[best],
                max_failure_pct=fails[worst],
                intra_rho=intra_rho,
                inter_rho=inter_rho,
                intra_verdict=intra_v,
                inter_verdict=inter_v,
            )
        )
    if not cells:
        raise InsufficientData("no rows to report on")
    return TrendReport(cells)
