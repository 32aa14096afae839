"""Independent brute-force references used by the tests.

Nothing here imports the classifier, policy matcher or graph code under
test; each oracle re-derives its answer from first principles.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field


# --- policies ----------------------------------------------------------------


def policy_holds(node, orgs: set[int]) -> bool:
    """Plain boolean evaluation: a leaf holds if its org signed."""
    if hasattr(node, "org"):
        return node.org in orgs
    return sum(policy_holds(c, orgs) for c in node.children) >= node.n


def _same_sets(a, b) -> bool:
    return a.read_set == b.read_set and a.write_set == b.write_set and a.range_reads == b.range_reads


def brute_force_subset_exists(policy, endorsements) -> bool:
    """Try every subset: pairwise-identical members whose orgs satisfy the policy."""
    n = len(endorsements)
    for size in range(1, n + 1):
        for combo in itertools.combinations(endorsements, size):
            if not all(_same_sets(combo[0], e) for e in combo[1:]):
                continue
            if policy_holds(policy, {e.endorser[0] for e in combo}):
                return True
    return False


def brute_force_choice(policy, endorsements):
    """The endorsement whose sets validation uses: earliest one in any satisfying group."""
    for i, e in enumerate(endorsements):
        group = [x for x in endorsements if _same_sets(x, e)]
        if endorsements.index(group[0]) != i:
            continue
        if policy_holds(policy, {x.endorser[0] for x in group}):
            return e
    return None


# --- world state replay -----------------------------------------------------------


@dataclass
class ReplayState:
    """Minimal versioned store: every key remembers its version count forever."""

    versions: dict = field(default_factory=dict)
    live: set = field(default_factory=set)

    @classmethod
    def from_items(cls, items):
        st = cls()
        for k, _ in items:
            st.versions[k] = 1
            st.live.add(k)
        return st

    def copy(self):
        return ReplayState(dict(self.versions), set(self.live))

    def version(self, key):
        return self.versions.get(key, 0) if key in self.live else 0

    def scan(self, lo, hi):
        return tuple((k, self.versions[k]) for k in sorted(self.live) if lo <= k <= hi)

    def write(self, key, value) -> bool:
        """Apply one write; deleting an absent key changes nothing."""
        if value is None:
            if key not in self.live:
                return False
            self.live.discard(key)
        else:
            self.live.add(key)
        self.versions[key] = self.versions.get(key, 0) + 1
        return True


def oracle_labels(ledger, genesis_items, policy) -> dict[int, str]:
    """Label every ledger tx by checking the failure equations directly.

    Endorsement failure: no group of identical endorsements satisfies the
    policy (some pair of endorsers disagrees). MVCC: the first read key whose
    version differs from the replayed state; intra-block if an earlier
    successful tx of the same block wrote that key, inter-block otherwise.
    Phantom: a re-checked range whose membership or versions changed.
    Transactions already early-aborted by reordering keep that label.
    """
    state = ReplayState.from_items(genesis_items)
    labels: dict[int, str] = {}
    for block in ledger:
        written_here: set[str] = set()
        for tx in block.txs:
            if tx.final_status.value == "EARLY_ABORT_REORDER":
                labels[tx.id] = "EARLY_ABORT_REORDER"
                continue
            if not brute_force_subset_exists(policy, tx.endorsements):
                labels[tx.id] = "ENDORSEMENT_POLICY_FAILURE"
                continue
            e = brute_force_choice(policy, tx.endorsements)
            label = None
            for key, version in e.read_set:
                if state.version(key) != version:
                    label = "MVCC_INTRA_BLOCK" if key in written_here else "MVCC_INTER_BLOCK"
                    break
            if label is None:
                for rr in e.range_reads:
                    if rr.phantom_detected and state.scan(rr.start_key, rr.end_key) != tuple(rr.observed):
                        label = "PHANTOM_READ"
                        break
            if label is None:
                label = "SUCCESS"
                for key, value in e.write_set:
                    if state.write(key, value):
                        written_here.add(key)
            labels[tx.id] = label
    return labels


def endorsement_snapshots_consistent(ledger, genesis_items, policy) -> bool:
    """Every endorsement must read the state after some prefix of committed blocks."""
    state = ReplayState.from_items(genesis_items)
    prefixes = [state.copy()]
    for block in ledger:
        for tx in block.txs:
            if tx.final_status.value != "SUCCESS":
                continue
            e = brute_force_choice(policy, tx.endorsements)
            for key, value in e.write_set:
                state.write(key, value)
        prefixes.append(state.copy())
    for block in ledger:
        for tx in block.txs:
            for e in tx.endorsements:
                if not any(_matches_prefix(e, st) for st in prefixes):
                    return False
    return True


def _matches_prefix(e, st: ReplayState) -> bool:
    if any(st.version(k) != v for k, v in e.read_set):
        return False
    return all(st.scan(r.start_key, r.end_key) == tuple(r.observed) for r in e.range_reads)


# --- graphs -----------------------------------------------------------------


def reader_writer_edges(endorsements: dict) -> set[tuple]:
    """(writer, reader) pairs: reader reads a point key or range that writer writes."""
    edges = set()
    for w, ew in endorsements.items():
        wkeys = {k for k, _ in ew.write_set}
        for r, er in endorsements.items():
            if r == w:
                continue
            hit = any(k in wkeys for k, _ in er.read_set) or any(
                rr.start_key <= k <= rr.end_key for rr in er.range_reads for k in wkeys
            )
            if hit:
                edges.add((w, r))
    return edges


def is_acyclic(nodes, edges) -> bool:
    nodes = set(nodes)
    indeg = {n: 0 for n in nodes}
    out = {n: [] for n in nodes}
    for u, v in edges:
        if u in nodes and v in nodes:
            out[u].append(v)
            indeg[v] += 1
    ready = [n for n in nodes if indeg[n] == 0]
    seen = 0
    while ready:
        n = ready.pop()
        seen += 1
        for m in out[n]:
            indeg[m] -= 1
            if indeg[m] == 0:
                ready.append(m)
    return seen == len(nodes)


def exhaustive_min_fvs(nodes, edges) -> int:
    nodes = list(nodes)
    for k in range(len(nodes) + 1):
        for removed in itertools.combinations(nodes, k):
            keep = set(nodes) - set(removed)
            if is_acyclic(keep, edges):
                return k
    raise AssertionError("unreachable")


def valid_orders(nodes, edges) -> set[tuple]:
    """All permutations in which every reader precedes the writer it depends on."""
    nodes = list(nodes)
    out = set()
    for perm in itertools.permutations(nodes):
        pos = {v: i for i, v in enumerate(perm)}
        if all(pos[v] < pos[u] for u, v in edges if u in pos and v in pos):
            out.add(perm)
    return out
