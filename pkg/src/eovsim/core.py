"""Versioned world state and the transaction/block data model.

Keys are plain strings ordered lexicographically. A version counter starts
at 1 on the first committed write and grows by one on every later write,
including deletes; a deleted key keeps a tombstone so re-inserting it
continues the sequence instead of reusing old versions.
"""

from __future__ import annotations

import bisect
import enum
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Optional

from .errors import MalformedRange

# writer location of a committed write: (block height, index inside the block)
Writer = tuple[int, int]

ABSENT_VERSION = 0


class TxStatus(str, enum.Enum):
    SUCCESS = "SUCCESS"
    ENDORSEMENT_POLICY_FAILURE = "ENDORSEMENT_POLICY_FAILURE"
    MVCC_INTRA_BLOCK = "MVCC_INTRA_BLOCK"
    MVCC_INTER_BLOCK = "MVCC_INTER_BLOCK"
    PHANTOM_READ = "PHANTOM_READ"
    EARLY_ABORT_REORDER = "EARLY_ABORT_REORDER"
    UNSET = "UNSET"


TERMINAL_STATUSES = tuple(s for s in TxStatus if s is not TxStatus.UNSET)


class CutReason(str, enum.Enum):
    COUNT = "COUNT"
    TIMEOUT = "TIMEOUT"
    BYTES = "BYTES"
    STREAM = "STREAM"


@dataclass(frozen=True, slots=True)
class VersionedEntry:
    version: int
    value: bytes
    last_writer: Optional[Writer] = None


class Op(NamedTuple):
    """One abstract chaincode operation.

    ``kind`` is READ, WRITE, DELETE or RANGE. For RANGE ``key``/``end`` are
    the inclusive bounds and ``phantom`` says whether validation re-checks
    the range. A READ with ``guard`` set drops all of the transaction's
    writes when the value read equals the guard (double-vote blocking).
    """

    kind: str
    key: str
    end: Optional[str] = None
    value: Optional[bytes] = None
    phantom: bool = True
    guard: Optional[bytes] = None


@dataclass(frozen=True, slots=True)
class RangeRead:
    start_key: str
    end_key: str
    observed: tuple[tuple[str, int], ...]
    phantom_detected: bool = True


@dataclass(frozen=True, slots=True)
class Endorsement:
    endorser: tuple[int, int]  # (org_id, peer_id)
    read_set: tuple[tuple[str, int], ...]
    write_set: tuple[tuple[str, Optional[bytes]], ...]  # None value == DELETE
    range_reads: tuple[RangeRead, ...] = ()
    endorse_time: float = 0.0

    @property
    def fingerprint(self) -> tuple:
        """Everything two endorsements must agree on to be counted together."""
        return (self.read_set, self.range_reads, self.write_set)

    def read_keys(self) -> set[str]:
        return {k for k, _ in self.read_set}

    def write_keys(self) -> set[str]:
        return {k for k, _ in self.write_set}


@dataclass(slots=True, eq=False)
class Transaction:
    id: int
    submit_time: float
    chaincode_function: str
    intent: tuple[Op, ...]
    endorsements: list[Endorsement] = field(default_factory=list)
    final_status: TxStatus = TxStatus.UNSET
    commit_time: Optional[float] = None
    failure: Optional[object] = None  # classifier.FailureRecord
    orderer_time: Optional[float] = None
    delivered_time: Optional[float] = None

    def has_ranges(self) -> bool:
        return any(op.kind == "RANGE" for op in self.intent)


@dataclass(slots=True, eq=False)
class Block:
    height: int
    txs: list[Transaction]
    cut_reason: CutReason
    cut_time: float
    reorder_cost_ms: float = 0.0


@dataclass(frozen=True)
class SizeModel:
    header_bytes: int = 256
    per_read_bytes: int = 64
    per_write_bytes: int = 128
    per_range_bytes: int = 8


def tx_byte_size(tx: Transaction, sizes: SizeModel = SizeModel()) -> int:
    if not tx.endorsements:
        raise ValueError(f"transaction {tx.id} has no endorsements yet")
    e = tx.endorsements[0]
    observed = sum(len(r.observed) for r in e.range_reads)
    return (
        sizes.header_bytes
        + sizes.per_read_bytes * len(e.read_set)
        + sizes.per_write_bytes * len(e.write_set)
        + sizes.per_range_bytes * observed
    )


class WorldState:
    """One peer's versioned key-value replica."""

    __slots__ = ("_entries", "_tombstones", "_sorted", "_pairs", "_ranges")

    def __init__(self) -> None:
        self._entries: dict[str, VersionedEntry] = {}
        # deleted keys: key -> (last version, writer of the delete)
        self._tombstones: dict[str, tuple[int, Optional[Writer]]] = {}
        self._sorted: list[str] = []
        # shared (key, version) pairs and range results, valid until the next apply
        self._pairs: dict[str, tuple[str, int]] = {}
        self._ranges: dict[tuple[str, str], tuple[tuple[str, int], ...]] = {}

    @classmethod
    def genesis(cls, items: Iterable[tuple[str, bytes]]) -> "WorldState":
        ws = cls()
        for key, value in items:
            if not key:
                raise ValueError("keys must be non-empty")
            ws._entries[key] = VersionedEntry(1, value, None)
        ws._sorted = sorted(ws._entries)
        ws._pairs = {k: (k, 1) for k in ws._sorted}
        return ws

    def copy(self) -> "WorldState":
        ws = WorldState()
        ws._entries = dict(self._entries)
        ws._tombstones = dict(self._tombstones)
        ws._sorted = list(self._sorted)
        ws._pairs = dict(self._pairs)
        return ws

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, key: str) -> bool:
        return key in self._entries

    def read(self, key: str) -> Optional[VersionedEntry]:
        return self._entries.get(key)

    def version(self, key: str) -> int:
        entry = self._entries.get(key)
        return entry.version if entry is not None else ABSENT_VERSION

    def last_writer(self, key: str) -> Optional[Writer]:
        """Writer of the latest committed write, including deletes."""
        entry = self._entries.get(key)
        if entry is not None:
            return entry.last_writer
        tomb = self._tombstones.get(key)
        return tomb[1] if tomb is not None else None

    def ever_written(self, key: str) -> bool:
        return key in self._entries or key in self._tombstones

    def range(self, start: str, end: str) -> list[tuple[str, int]]:
        if start > end:
            raise MalformedRange(f"range start {start!r} > end {end!r}")
        lo = bisect.bisect_left(self._sorted, start)
        hi = bisect.bisect_right(self._sorted, end)
        entries = self._entries
        return [(k, entries[k].version) for k in self._sorted[lo:hi]]

    def range_snapshot(self, start: str, end: str) -> tuple[tuple[str, int], ...]:
        """Same as :meth:`range` but immutable and cached until the next write."""
        cached = self._ranges.get((start, end))
        if cached is None:
            if start > end:
                raise MalformedRange(f"range start {start!r} > end {end!r}")
            lo = bisect.bisect_left(self._sorted, start)
            hi = bisect.bisect_right(self._sorted, end)
            pairs = self._pairs
            cached = self._ranges[(start, end)] = tuple(pairs[k] for k in self._sorted[lo:hi])
        return cached

    def apply(self, write_set: Iterable[tuple[str, Optional[bytes]]], writer: Writer) -> None:
        entries = self._entries
        if self._ranges:
            self._ranges = {}
        for key, value in write_set:
            cur = entries.get(key)
            if cur is not None:
                prev = cur.version
            else:
                tomb = self._tombstones.get(key)
                prev = tomb[0] if tomb is not None else 0
            if value is None:
                if cur is not None:
                    del entries[key]
                    i = bisect.bisect_left(self._sorted, key)
                    del self._sorted[i]
                    del self._pairs[key]
                    self._tombstones[key] = (prev + 1, writer)
                # deleting an absent key is a no-op, like DelState on a missing key
                continue
            if cur is None:
                self._tombstones.pop(key, None)
                bisect.insort(self._sorted, key)
            entries[key] = VersionedEntry(prev + 1, value, writer)
            self._pairs[key] = (key, prev + 1)

    def snapshot(self) -> dict[str, tuple[int, bytes, Optional[Writer]]]:
        return {k: (e.version, e.value, e.last_writer) for k, e in self._entries.items()}


def ws_read(replica: WorldState, key: str) -> Optional[VersionedEntry]:
    return replica.read(key)


def ws_range(replica: WorldState, start: str, end: str) -> list[tuple[str, int]]:
    return replica.range(start, end)


def ws_apply(replica: WorldState, write_set, writer: Writer) -> None:
    replica.apply(write_set, writer)


def execute_intent(
    intent: Iterable[Op],
    replica: WorldState,
    endorser: tuple[int, int],
    now: float,
) -> Endorsement:
    """Simulate a transaction's intent against ``replica``.

    Reads capture the pre-state even when the same transaction also writes
    the key; the first read of a key wins and the last write of a key wins.
    """
    reads: dict[str, int] = {}
    writes: dict[str, Optional[bytes]] = {}
    ranges: list[RangeRead] = []
    blocked = False
    for op in intent:
        kind = op.kind
        if kind == "READ":
            entry = replica.read(op.key)
            if op.key not in reads:
                reads[op.key] = entry.version if entry is not None else ABSENT_VERSION
            if op.guard is not None and entry is not None and entry.value == op.guard:
                blocked = True
        elif kind == "WRITE":
            writes[op.key] = op.value if op.value is not None else b""
        elif kind == "DELETE":
            writes[op.key] = None
        elif kind == "RANGE":
            observed = replica.range_snapshot(op.key, op.end)
            ranges.append(RangeRead(op.key, op.end, observed, op.phantom))
        else:
            raise ValueError(f"unknown op kind {kind!r}")
    if blocked:
        writes = {}
    return Endorsement(
        endorser=endorser,
        read_set=tuple(reads.items()),
        write_set=tuple(writes.items()),
        range_reads=tuple(ranges),
        endorse_time=now,
    )
