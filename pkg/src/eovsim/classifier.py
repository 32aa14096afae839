"""Failure taxonomy: inline labelling during validation and offline ledger parsing.

Precedence is endorsement policy, then point-read MVCC, then phantom.
An MVCC conflict is intra-block when the last writer of the first
mismatching key sits earlier in the same block, inter-block otherwise.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional, Sequence, TextIO

from .core import Block, Endorsement, Transaction, TxStatus, WorldState, Writer
from .errors import MalformedTrace
from .policy import PolicyNode, satisfying_subset

TRACE_FORMAT = "eov-ledger"
TRACE_VERSION = 1


@dataclass(frozen=True)
class FailureRecord:
    tx_id: int
    status: TxStatus
    conflicting_key: str = ""
    range: Optional[tuple[str, str]] = None
    writer_location: Optional[Writer] = None
    endorsers: Optional[tuple[tuple[int, int], tuple[int, int]]] = None
    detected_at: float = 0.0


def classify_endorsement(
    tx: Transaction, policy: PolicyNode, now: float = 0.0
) -> Optional[FailureRecord]:
    if satisfying_subset(policy, tx.endorsements) is not None:
        return None
    ends = tx.endorsements
    for a in range(len(ends)):
        for b in range(a + 1, len(ends)):
            key = _first_version_mismatch(ends[a], ends[b])
            if key is not None:
                return FailureRecord(
                    tx.id,
                    TxStatus.ENDORSEMENT_POLICY_FAILURE,
                    conflicting_key=key,
                    endorsers=(ends[a].endorser, ends[b].endorser),
                    detected_at=now,
                )
    return FailureRecord(tx.id, TxStatus.ENDORSEMENT_POLICY_FAILURE, detected_at=now)


def _first_version_mismatch(a: Endorsement, b: Endorsement) -> Optional[str]:
    other = dict(b.read_set)
    for key, version in a.read_set:
        if key in other and other[key] != version:
            return key
    for ra, rb in zip(a.range_reads, b.range_reads):
        if ra.observed != rb.observed:
            return _first_range_difference(ra.observed, rb.observed)
    return None


def _first_range_difference(x, y) -> str:
    dx, dy = dict(x), dict(y)
    for key in sorted(set(dx) | set(dy)):
        if dx.get(key) != dy.get(key):
            return key
    return ""


def classify_mvcc(
    tx_id: int, read_set, replica: WorldState, height: int, now: float = 0.0
) -> Optional[FailureRecord]:
    for key, version in read_set:
        if replica.version(key) != version:
            writer = replica.last_writer(key)
            if writer is not None and writer[0] == height:
                status = TxStatus.MVCC_INTRA_BLOCK
            else:
                status = TxStatus.MVCC_INTER_BLOCK
            return FailureRecord(tx_id, status, key, writer_location=writer, detected_at=now)
    return None


def classify_phantom(
    tx_id: int, range_reads, replica: WorldState, now: float = 0.0
) -> Optional[FailureRecord]:
    for rr in range_reads:
        if not rr.phantom_detected:
            continue
        current = replica.range_snapshot(rr.start_key, rr.end_key)
        if current != rr.observed:
            key = _first_range_difference(rr.observed, current)
            return FailureRecord(
                tx_id,
                TxStatus.PHANTOM_READ,
                key,
                range=(rr.start_key, rr.end_key),
                writer_location=replica.last_writer(key) if key else None,
                detected_at=now,
            )
    return None


def validate_block(
    block: Block, replica: WorldState, policy: PolicyNode, now: float = 0.0, apply: bool = True
) -> list[tuple[TxStatus, Optional[FailureRecord]]]:
    """Validate ``block`` in order against ``replica``.

    Successful write sets are applied as soon as each transaction passes,
    so later transactions in the same block see them. Transactions already
    carrying EARLY_ABORT_REORDER are passed through untouched.
    """
    out = []
    for index, tx in enumerate(block.txs):
        if tx.final_status is TxStatus.EARLY_ABORT_REORDER:
            out.append((TxStatus.EARLY_ABORT_REORDER, tx.failure))
            continue
        sub = satisfying_subset(policy, tx.endorsements)
        if sub is None:
            rec = classify_endorsement(tx, policy, now)
            out.append((TxStatus.ENDORSEMENT_POLICY_FAILURE, rec))
            continue
        e = sub[0]
        rec = classify_mvcc(tx.id, e.read_set, replica, block.height, now)
        if rec is None:
            rec = classify_phantom(tx.id, e.range_reads, replica, now)
        if rec is not None:
            out.append((rec.status, rec))
            continue
        if apply:
            replica.apply(e.write_set, (block.height, index))
        out.append((TxStatus.SUCCESS, None))
    return out


# --- ledger trace ------------------------------------------------------------


def block_record(block: Block) -> dict:
    txs = []
    for tx in block.txs:
        row = {"id": tx.id, "fn": tx.chaincode_function, "status": tx.final_status.value}
        rec = tx.failure
        if isinstance(rec, FailureRecord):
            if rec.conflicting_key:
                row["conflict_key"] = rec.conflicting_key
            if rec.writer_location is not None:
                row["writer"] = {"h": rec.writer_location[0], "i": rec.writer_location[1]}
        row["submit_ms"] = tx.submit_time
        row["commit_ms"] = tx.commit_time
        txs.append(row)
    return {
        "height": block.height,
        "cut_reason": block.cut_reason.value,
        "cut_time_ms": block.cut_time,
        "txs": txs,
    }


def write_trace(
    fh: TextIO, blocks: Iterable[Block], total_submitted: int, early_aborts: int
) -> None:
    header = {
        "trace": TRACE_FORMAT,
        "version": TRACE_VERSION,
        "total_submitted": total_submitted,
        "early_aborts": early_aborts,
    }
    fh.write(json.dumps(header) + "\n")
    for block in blocks:
        fh.write(json.dumps(block_record(block)) + "\n")


@dataclass
class LedgerStats:
    counts: dict[str, int]
    early_aborts: int
    total_submitted: int
    avg_total_latency_ms: float
    committed_tps: float
    per_block: list[dict[str, int]] = field(default_factory=list)

    @property
    def ledger_txs(self) -> int:
        return sum(self.counts.values())

    @property
    def percentages(self) -> dict[str, float]:
        total = self.total_submitted or 1
        pct = {k: 100.0 * v / total for k, v in self.counts.items()}
        pct["EARLY_ABORT_OFFLEDGER"] = 100.0 * self.early_aborts / total
        return pct

    @property
    def failed(self) -> int:
        return self.total_submitted - self.counts.get(TxStatus.SUCCESS.value, 0)

    @property
    def failure_pct(self) -> float:
        return 100.0 * self.failed / self.total_submitted if self.total_submitted else 0.0

    def conserved(self) -> bool:
        return self.ledger_txs + self.early_aborts == self.total_submitted


def summarize(
    rows: Iterable[tuple[str, float, Optional[float]]],
    total_submitted: int,
    early_aborts: int,
    per_block: Optional[list[dict[str, int]]] = None,
) -> LedgerStats:
    """Reduce (status, submit_ms, commit_ms) rows of ledger txs to stats."""
    counts = {s.value: 0 for s in TxStatus if s is not TxStatus.UNSET}
    latency_sum = 0.0
    n_latency = 0
    last_commit = 0.0
    for status, submit_ms, commit_ms in rows:
        counts[status] += 1
        if commit_ms is not None:
            latency_sum += commit_ms - submit_ms
            n_latency += 1
            last_commit = max(last_commit, commit_ms)
    ledger = sum(counts.values())
    return LedgerStats(
        counts=counts,
        early_aborts=early_aborts,
        total_submitted=total_submitted,
        avg_total_latency_ms=latency_sum / n_latency if n_latency else 0.0,
        committed_tps=1000.0 * ledger / last_commit if last_commit > 0 else 0.0,
        per_block=per_block or [],
    )


def _require(obj: dict, name: str, kind, lineno: int):
    if name not in obj:
        raise MalformedTrace(f"missing field {name!r}", lineno)
    value = obj[name]
    if kind is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    else:
        ok = isinstance(value, kind) and not (kind is int and isinstance(value, bool))
    if not ok:
        raise MalformedTrace(f"field {name!r} has wrong type", lineno)
    return value


def iter_trace(lines: Iterable[str]) -> Iterator[tuple[int, dict]]:
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        if not line.endswith("\n"):
            raise MalformedTrace("truncated record (no trailing newline)", lineno)
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise MalformedTrace(f"invalid JSON: {exc.msg}", lineno) from None
        if not isinstance(obj, dict):
            raise MalformedTrace("record is not an object", lineno)
        yield lineno, obj


def parse_ledger(source) -> LedgerStats:
    """Recompute run statistics from a ledger trace (path or open file)."""
    if hasattr(source, "read"):
        return _parse_lines(source)
    with open(source, encoding="utf-8") as fh:
        return _parse_lines(fh)


def _parse_lines(fh) -> LedgerStats:
    rows = []
    per_block = []
    header = None
    expected_height = None
    valid_status = {s.value for s in TxStatus if s is not TxStatus.UNSET}
    for lineno, obj in iter_trace(fh):
        if "trace" in obj:
            if header is not None or rows or per_block:
                raise MalformedTrace("header must be the first record", lineno)
            if obj.get("trace") != TRACE_FORMAT:
                raise MalformedTrace(f"unknown trace format {obj.get('trace')!r}", lineno)
            header = obj
            _require(obj, "total_submitted", int, lineno)
            _require(obj, "early_aborts", int, lineno)
            continue
        height = _require(obj, "height", int, lineno)
        _require(obj, "cut_reason", str, lineno)
        _require(obj, "cut_time_ms", float, lineno)
        txs = _require(obj, "txs", list, lineno)
        if expected_height is not None and height != expected_height:
            raise MalformedTrace(f"expected block height {expected_height}, got {height}", lineno)
        expected_height = height + 1
        block_counts: Counter = Counter()
        for tx in txs:
            if not isinstance(tx, dict):
                raise MalformedTrace("tx entry is not an object", lineno)
            _require(tx, "id", int, lineno)
            status = _require(tx, "status", str, lineno)
            if status not in valid_status:
                raise MalformedTrace(f"unknown status {status!r}", lineno)
            submit = _require(tx, "submit_ms", float, lineno)
            commit = tx.get("commit_ms")
            if commit is not None and not isinstance(commit, (int, float)):
                raise MalformedTrace("field 'commit_ms' has wrong type", lineno)
            rows.append((status, submit, commit))
            block_counts[status] += 1
        per_block.append({"height": height, **block_counts})
    total = header["total_submitted"] if header else len(rows)
    early = header["early_aborts"] if header else 0
    stats = summarize(rows, total, early, per_block)
    if not stats.conserved():
        raise MalformedTrace(
            f"conservation violated: {stats.ledger_txs} ledger txs + {early} early aborts != {total}"
        )
    return stats
