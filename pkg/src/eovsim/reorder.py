"""Conflict graphs and the two reordering strategies.

Edge direction: ``u -> v`` means v reads a key that u writes. To keep v's
read valid, v has to be validated before u, so a serial order places the
head of every edge after its tail's target (readers first).
"""

from __future__ import annotations

import bisect
import heapq
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

from .core import Endorsement, Transaction, WorldState, Writer
from .errors import RangeUnsupported
from .policy import PolicyNode, satisfying_subset


@dataclass
class ConflictGraph:
    nodes: list[int]
    succ: dict[int, set[int]]
    pred: dict[int, set[int]]

    @classmethod
    def from_edges(cls, nodes: Iterable[int], edges: Iterable[tuple[int, int]]) -> "ConflictGraph":
        nodes = list(nodes)
        succ = {n: set() for n in nodes}
        pred = {n: set() for n in nodes}
        for u, v in edges:
            if u == v:
                raise ValueError("self-edges are not allowed")
            succ[u].add(v)
            pred[v].add(u)
        return cls(nodes, succ, pred)

    @property
    def edges(self) -> list[tuple[int, int]]:
        return [(u, v) for u in self.nodes for v in sorted(self.succ[u])]

    def edge_count(self) -> int:
        return sum(len(s) for s in self.succ.values())

    def subgraph(self, keep: Iterable[int]) -> "ConflictGraph":
        keep = set(keep)
        nodes = [n for n in self.nodes if n in keep]
        succ = {n: self.succ[n] & keep for n in nodes}
        pred = {n: self.pred[n] & keep for n in nodes}
        return ConflictGraph(nodes, succ, pred)


def _first_endorsement(tx: Transaction) -> Optional[Endorsement]:
    return tx.endorsements[0] if tx.endorsements else None


def build_conflict_graph(
    txs: Sequence[Transaction],
    sets: Callable[[Transaction], Optional[Endorsement]] = _first_endorsement,
) -> ConflictGraph:
    """Edge Tj -> Ti whenever Ti reads (point or range) a key Tj writes.

    Transactions for which ``sets`` returns None contribute no edges.
    """
    reps = {tx.id: sets(tx) for tx in txs}
    writers: dict[str, list[int]] = {}
    for tx in txs:
        e = reps[tx.id]
        if e is None:
            continue
        for key, _ in e.write_set:
            writers.setdefault(key, []).append(tx.id)
    written = sorted(writers)
    edges = set()
    for tx in txs:
        e = reps[tx.id]
        if e is None:
            continue
        for key, _ in e.read_set:
            for w in writers.get(key, ()):
                if w != tx.id:
                    edges.add((w, tx.id))
        for rr in e.range_reads:
            lo = bisect.bisect_left(written, rr.start_key)
            hi = bisect.bisect_right(written, rr.end_key)
            for key in written[lo:hi]:
                for w in writers[key]:
                    if w != tx.id:
                        edges.add((w, tx.id))
    return ConflictGraph.from_edges((tx.id for tx in txs), edges)


def strongly_connected_components(g: ConflictGraph) -> list[list[int]]:
    """Tarjan's algorithm, iterative so deep graphs don't hit the recursion limit."""
    index: dict[int, int] = {}
    low: dict[int, int] = {}
    on_stack: set[int] = set()
    stack: list[int] = []
    comps: list[list[int]] = []
    counter = 0
    for root in g.nodes:
        if root in index:
            continue
        work = [(root, iter(sorted(g.succ[root])))]
        index[root] = low[root] = counter
        counter += 1
        stack.append(root)
        on_stack.add(root)
        while work:
            node, it = work[-1]
            advanced = False
            for nxt in it:
                if nxt not in index:
                    index[nxt] = low[nxt] = counter
                    counter += 1
                    stack.append(nxt)
                    on_stack.add(nxt)
                    work.append((nxt, iter(sorted(g.succ[nxt]))))
                    advanced = True
                    break
                if nxt in on_stack:
                    low[node] = min(low[node], index[nxt])
            if advanced:
                continue
            work.pop()
            if work:
                parent = work[-1][0]
                low[parent] = min(low[parent], low[node])
            if low[node] == index[node]:
                comp = []
                while True:
                    w = stack.pop()
                    on_stack.discard(w)
                    comp.append(w)
                    if w == node:
                        break
                comps.append(sorted(comp))
    return comps


def find_cycles(g: ConflictGraph) -> list[list[int]]:
    return [c for c in strongly_connected_components(g) if len(c) > 1 or c[0] in g.succ[c[0]]]


def greedy_mfvs(g: ConflictGraph) -> set[int]:
    """Approximate minimum feedback vertex set.

    Repeatedly drops the vertex with the largest in-degree * out-degree
    inside a cyclic SCC (lowest id on ties) until no cycle is left.
    """
    aborted: set[int] = set()
    work = find_cycles(g)
    while work:
        comp = work.pop()
        members = set(comp)
        best, best_score = None, -1
        for v in comp:
            score = len(g.pred[v] & members) * len(g.succ[v] & members)
            if score > best_score or (score == best_score and v < best):
                best, best_score = v, score
        aborted.add(best)
        members.discard(best)
        work.extend(find_cycles(g.subgraph(members)))
    return aborted


def serial_order(g: ConflictGraph, survivors: Iterable[int], position: dict[int, int]) -> list[int]:
    """Readers-first topological order; independent txs keep arrival order."""
    alive = set(survivors)
    blocking = {u: len(g.succ[u] & alive) for u in alive}
    ready = [(position[u], u) for u in alive if blocking[u] == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        _, v = heapq.heappop(ready)
        order.append(v)
        for u in g.pred[v]:
            if u in alive:
                blocking[u] -= 1
                if blocking[u] == 0:
                    heapq.heappush(ready, (position[u], u))
    if len(order) != len(alive):
        raise ValueError("survivor graph still has a cycle")
    return order


def is_valid_serial_order(g: ConflictGraph, order: Sequence[int]) -> bool:
    pos = {v: i for i, v in enumerate(order)}
    return all(pos[v] < pos[u] for u, v in g.edges if u in pos and v in pos)


@dataclass
class ReorderOutcome:
    aborted: set[int]
    order: list[int]
    cost_ms: float
    edges: int = 0


def reorder_cost_ms(n: int, mean_keys: float, edges: int, c_graph_ms: float, c_sort_ms: float) -> float:
    return c_graph_ms * n * n * mean_keys + c_sort_ms * (n + edges)


def reorder_block(
    txs: Sequence[Transaction], config, policy: Optional[PolicyNode] = None
) -> ReorderOutcome:
    """Fabric++-style reordering of one cut block.

    Transactions that cannot satisfy the endorsement policy are left out
    of the graph; they will fail validation without writing anything.
    """
    reps: dict[int, Optional[Endorsement]] = {}
    for tx in txs:
        if policy is None:
            reps[tx.id] = _first_endorsement(tx)
        else:
            sub = satisfying_subset(policy, tx.endorsements)
            reps[tx.id] = sub[0] if sub else None
    g = build_conflict_graph(txs, lambda tx: reps[tx.id])
    aborted = greedy_mfvs(g)
    position = {tx.id: i for i, tx in enumerate(txs)}
    survivors = [tx.id for tx in txs if tx.id not in aborted]
    order = serial_order(g, survivors, position)
    keys = []
    for tx in txs:
        e = reps[tx.id] or _first_endorsement(tx)
        if e is None:
            keys.append(0)
            continue
        keys.append(len(e.read_set) + len(e.write_set) + sum(len(r.observed) for r in e.range_reads))
    mean_keys = sum(keys) / len(keys) if keys else 0.0
    edges = g.edge_count()
    cost = reorder_cost_ms(len(txs), mean_keys, edges, config.c_graph_ms, config.c_sort_ms)
    return ReorderOutcome(aborted, order, cost, edges)


@dataclass
class AdmitResult:
    admitted: bool
    key: str = ""
    writer: Optional[Writer] = None


class FabricSharpTracker:
    """Cross-block serializability check run before transactions are ordered.

    ``boundary`` is the state after every block already cut, as validation
    will see it. A transaction whose read versions differ from it depends
    on an already-ordered writer it must precede, which is impossible, so
    it is aborted. Against the not-yet-cut batch, the transaction is placed
    readers-first and aborted only if that creates a cycle.
    """

    def __init__(self, genesis: WorldState, policy: PolicyNode, window_blocks: int = 16):
        self.boundary = genesis.copy()
        self.policy = policy
        self.window = window_blocks
        self.height = 0
        self._reset_batch()

    def _reset_batch(self) -> None:
        self.pending: list[Transaction] = []
        self.reps: dict[int, Optional[Endorsement]] = {}
        self.after: dict[int, set[int]] = {}  # tx -> txs that must come after it
        self.readers: dict[str, set[int]] = {}
        self.writers: dict[str, set[int]] = {}

    def _windowed(self, writer: Optional[Writer]) -> Optional[Writer]:
        if writer is None or writer[0] <= self.height - self.window:
            return None
        return writer

    def admit(self, tx: Transaction) -> AdmitResult:
        if tx.has_ranges() or any(e.range_reads for e in tx.endorsements):
            raise RangeUnsupported(f"transaction {tx.id} uses range reads")
        sub = satisfying_subset(self.policy, tx.endorsements)
        rep = sub[0] if sub else None
        if rep is None:
            self._append(tx, None, set(), set())
            return AdmitResult(True)
        for key, version in rep.read_set:
            if self.boundary.version(key) != version:
                return AdmitResult(False, key, self._windowed(self.boundary.last_writer(key)))
        reads = rep.read_keys()
        writes = rep.write_keys()
        before = set()  # pending txs this one must precede (they overwrite its reads)
        for key in reads:
            before |= self.writers.get(key, set())
        after = set()  # pending txs that must precede this one (it overwrites their reads)
        for key in writes:
            after |= self.readers.get(key, set())
        before.discard(tx.id)
        after.discard(tx.id)
        clash = self._reaches(before, after)
        if clash is not None:
            key = next(
                (k for k, _ in rep.read_set if clash[0] in self.writers.get(k, ())),
                next((k for k, _ in rep.read_set if self.writers.get(k)), ""),
            )
            return AdmitResult(False, key, None)
        self._append(tx, rep, reads, writes)
        self.after[tx.id] |= before
        for v in after:
            self.after[v].add(tx.id)
        return AdmitResult(True)

    def _reaches(self, sources: set[int], targets: set[int]) -> Optional[tuple[int, int]]:
        """Return (source, target) if some target is reachable from a source."""
        if not sources or not targets:
            return None
        for s in sorted(sources):
            seen = {s}
            stack = [s]
            while stack:
                u = stack.pop()
                if u in targets:
                    return (s, u)
                for w in self.after[u]:
                    if w not in seen:
                        seen.add(w)
                        stack.append(w)
        return None

    def _append(self, tx, rep, reads, writes) -> None:
        self.pending.append(tx)
        self.reps[tx.id] = rep
        self.after[tx.id] = set()
        for key in reads:
            self.readers.setdefault(key, set()).add(tx.id)
        for key in writes:
            self.writers.setdefault(key, set()).add(tx.id)

    def take_batch(self, height: int) -> list[Transaction]:
        """Serialize the pending batch as block ``height`` and advance the boundary."""
        position = {tx.id: i for i, tx in enumerate(self.pending)}
        nodes = [tx.id for tx in self.pending]
        edges = [(v, u) for u in nodes for v in self.after[u]]
        # after[u] holds txs that follow u; as a conflict graph the follower is the tail
        g = ConflictGraph.from_edges(nodes, edges)
        order = serial_order(g, nodes, position)
        by_id = {tx.id: tx for tx in self.pending}
        ordered = [by_id[i] for i in order]
        for idx, tx in enumerate(ordered):
            rep = self.reps[tx.id]
            if rep is not None:
                self.boundary.apply(rep.write_set, (height, idx))
        self.height = height
        self._reset_batch()
        return ordered

    def __len__(self) -> int:
        return len(self.pending)
