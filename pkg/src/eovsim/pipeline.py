"""Discrete-event Execute-Order-Validate engine.

One run is a single event loop over a heap keyed by (time, priority, seq).
Commits sort before everything else at equal timestamps so an endorsement
scheduled at the same instant already sees the committed writes.

Validation outcomes are deterministic given block contents and the state
after the previous block, so the engine validates every block once on a
canonical replica when it is cut and stamps the statuses on the
transactions. Peers then receive, validate (costed) and commit the block
on their own schedule; their replicas lag the canonical one and that lag
is what endorsements observe.
"""

from __future__ import annotations

import heapq
import logging
import random
from dataclasses import dataclass, field
from typing import Optional

from .classifier import FailureRecord, LedgerStats, summarize, validate_block
from .config import CommitLag, SimConfig, net_delay
from .core import (
    Block,
    CutReason,
    Endorsement,
    Op,
    Transaction,
    TxStatus,
    WorldState,
    execute_intent,
    tx_byte_size,
)
from .errors import ConfigInvalid
from .policy import (
    PolicyNode,
    minimal_layout,
    policy_orgs,
    resolve_policy,
    satisfying_subset,
    vscc_cost_ms,
)
from .reorder import FabricSharpTracker, reorder_block
from .workload import Intent, TxIntentStream, WorkloadSpec, load_chaincode

log = logging.getLogger(__name__)

# event priorities at equal timestamps
_COMMIT, _ENDORSE, _RESPONSE, _ARRIVE, _TIMEOUT, _SUBMIT = range(6)

REFERENCE_PEER = (0, 0)


def endorsement_db_ms(ops, db, storage_factor: float = 1.0) -> float:
    """Database time spent simulating ``ops`` on one endorser (GetRange is flat)."""
    return storage_factor * sum(db.op_ms(op.kind) for op in ops)


def block_validation_ms(block: Block, config: SimConfig, vscc_ms: float) -> float:
    """Time a peer spends validating ``block`` before the commit lag starts.

    Per-transaction work (signature checks and range re-execution) is
    spread over the validation workers; the ledger database is also hit
    once for the bulk read of point-read versions and once for the batched
    write of successful transactions.
    """
    stream = config.mode == "STREAMCHAIN"
    t = (0.0 if stream else config.block_overhead_ms) + len(block.txs) * vscc_ms / config.validation_workers
    db = config.db
    reads = ranges = 0
    writes = False
    for tx in block.txs:
        if not tx.endorsements:
            continue
        e = tx.endorsements[0]
        reads += len(e.read_set)
        ranges += sum(1 for r in e.range_reads if r.phantom_detected)
        if tx.final_status is TxStatus.SUCCESS and e.write_set:
            writes = True
    io = (db.get_ms if reads else 0.0) + (db.put_ms if writes else 0.0)
    io += ranges * db.get_range_ms / config.validation_workers
    return t + config.storage_factor * io


def sample_commit_lag(rng: random.Random, lag: CommitLag, scale: float, validation_ms: float) -> float:
    """One peer's commit lag for one block; ``scale`` folds in db kind and ramdisk."""
    if lag.is_zero:
        return 0.0
    return rng.uniform(lag.low_ms, lag.high_ms) * scale + rng.uniform(0.0, lag.speed_jitter) * validation_ms


class BlockCutter:
    """Orderer-side batching: cut on count, bytes or timeout, whichever comes first.

    In STREAMCHAIN mode every transaction is cut on its own.
    """

    def __init__(self, config: SimConfig):
        self.config = config
        self.stream = config.mode == "STREAMCHAIN"
        self.pending: list[Transaction] = []
        self.bytes = 0
        self.oldest = 0.0
        self.generation = 0

    @property
    def deadline(self) -> float:
        return self.oldest + self.config.block_timeout_ms

    def offer(self, tx: Transaction, now: float) -> Optional[tuple[list[Transaction], CutReason]]:
        if self.stream:
            return [tx], CutReason.STREAM
        if not self.pending:
            self.oldest = now
        self.pending.append(tx)
        self.bytes += tx_byte_size(tx, self.config.sizes)
        if len(self.pending) >= self.config.block_size:
            return self._take(CutReason.COUNT)
        if self.bytes >= self.config.block_max_bytes:
            return self._take(CutReason.BYTES)
        return None

    def expire(self, now: float) -> Optional[tuple[list[Transaction], CutReason]]:
        # compare against the stored deadline: now - oldest can round below the timeout
        if self.pending and now >= self.deadline:
            return self._take(CutReason.TIMEOUT)
        return None

    def _take(self, reason: CutReason) -> tuple[list[Transaction], CutReason]:
        txs = self.pending
        self.pending = []
        self.bytes = 0
        self.generation += 1
        return txs, reason


def cut_block(
    arrivals: list[tuple[float, Transaction]], config: SimConfig, now: float
) -> Optional[tuple[list[Transaction], CutReason, float]]:
    """Replay ``(arrival_ms, tx)`` pairs through a cutter up to ``now``.

    Returns the first block that would be cut, with its reason and cut
    time, or None if nothing is due yet.
    """
    cutter = BlockCutter(config)
    for t, tx in sorted(arrivals, key=lambda a: a[0]):
        if t > now:
            break
        if cutter.pending and t >= cutter.deadline:
            return (*cutter.expire(cutter.deadline), cutter.deadline)
        cut = cutter.offer(tx, t)
        if cut is not None:
            return (*cut, t)
    if cutter.pending and now >= cutter.deadline:
        return (*cutter.expire(cutter.deadline), cutter.deadline)
    return None


class Peer:
    __slots__ = ("org", "idx", "replica", "free_at", "last_arrival", "last_commit", "lru")

    def __init__(self, org: int, idx: int, replica: WorldState):
        self.org = org
        self.idx = idx
        self.replica = replica
        self.free_at = 0.0
        self.last_arrival = 0.0
        self.last_commit = 0.0
        self.lru = -1

    @property
    def ident(self) -> tuple[int, int]:
        return (self.org, self.idx)


@dataclass
class SimulationResult:
    ledger: list[Block]
    stats: LedgerStats
    early_aborted: list[Transaction]
    event_count: int
    wall_seed: int
    queue_at_end: int = 0
    horizon_ms: float = 0.0
    transactions: list[Transaction] = field(default_factory=list)

    @property
    def total_submitted(self) -> int:
        return self.stats.total_submitted

    @property
    def ledger_tx_count(self) -> int:
        return self.stats.ledger_txs

    def count(self, status: TxStatus) -> int:
        if status is TxStatus.EARLY_ABORT_REORDER:
            return self.stats.counts[status.value] + self.stats.early_aborts
        return self.stats.counts[status.value]

    @property
    def metrics(self) -> dict:
        s = self.stats
        return {
            "total_submitted": s.total_submitted,
            "ledger_txs": s.ledger_txs,
            "counts": dict(s.counts),
            "early_aborts": s.early_aborts,
            "failure_pct": s.failure_pct,
            "percentages": s.percentages,
            "avg_total_latency_ms": s.avg_total_latency_ms,
            "committed_tps": s.committed_tps,
            "blocks": len(self.ledger),
            "queue_at_end": self.queue_at_end,
            "event_count": self.event_count,
            "seed": self.wall_seed,
        }

    def failure_records(self) -> list[FailureRecord]:
        out = [tx.failure for b in self.ledger for tx in b.txs if tx.failure is not None]
        out.extend(tx.failure for tx in self.early_aborted if tx.failure is not None)
        return sorted(out, key=lambda r: r.tx_id)


class Simulation:
    def __init__(self, config: SimConfig, stream: TxIntentStream):
        if config.mode == "FABRICSHARP" and stream.uses_ranges():
            raise ConfigInvalid("FABRICSHARP does not support workloads with range reads")
        self.config = config
        self.stream = stream
        self.policy: PolicyNode = resolve_policy(config.policy, config.num_orgs)
        for org in policy_orgs(self.policy):
            if not 0 <= org < config.num_orgs:
                raise ConfigInvalid(f"policy names org {org} but only {config.num_orgs} are configured")
        self.vscc_ms = vscc_cost_ms(self.policy, config.vscc)
        seed = config.seed
        self.rng_net = random.Random(f"net:{seed}")
        self.rng_lag = random.Random(f"lag:{seed}")
        self.rng_layout = random.Random(f"layout:{seed}")

        genesis = WorldState.genesis(stream.profile.genesis_items())
        self.canonical = genesis.copy()
        self.peers = [
            [Peer(o, p, genesis.copy()) for p in range(config.peers_per_org)]
            for o in range(config.num_orgs)
        ]
        self.all_peers = [p for org in self.peers for p in org]
        self.sharp = (
            FabricSharpTracker(genesis, self.policy, config.sharp_window_blocks)
            if config.mode == "FABRICSHARP"
            else None
        )
        self.db_scale = config.db.put_ms / 0.8  # CouchDB put cost is the unit lag scale

        self._heap: list = []
        self._seq = 0
        self.events = 0
        self.now = 0.0
        self.ledger: list[Block] = []
        self.early: list[Transaction] = []
        self.txs: list[Transaction] = []
        self.cutter = BlockCutter(config)
        self.orderer_free = 0.0
        self._lru_clock = 0
        self._waiting: dict[int, list] = {}

    # --- event plumbing ----------------------------------------------------

    def _push(self, time: float, prio: int, fn, *args) -> None:
        self._seq += 1
        heapq.heappush(self._heap, (time, prio, self._seq, fn, args))

    def run(self) -> SimulationResult:
        intents = iter(self.stream)
        first = next(intents, None)
        if first is None:
            raise ConfigInvalid("workload stream is empty")
        self._push(first.submit_time, _SUBMIT, self._submit, first, intents)
        heap = self._heap
        while heap:
            time, _, _, fn, args = heapq.heappop(heap)
            self.now = time
            self.events += 1
            fn(*args)
        if self.cutter.pending or (self.sharp is not None and len(self.sharp)):
            raise AssertionError("event loop drained with transactions still pending")
        return self._result()

    # --- execution phase ---------------------------------------------------

    def _submit(self, intent, intents) -> None:
        nxt = next(intents, None)
        if nxt is not None:
            self._push(nxt.submit_time, _SUBMIT, self._submit, nxt, intents)
        tx = Transaction(intent.tx_id, intent.submit_time, intent.function, intent.ops)
        self.txs.append(tx)
        if self.config.endorsement_fanout == "minimal":
            orgs = minimal_layout(self.policy, self.rng_layout)
        else:
            orgs = sorted(policy_orgs(self.policy))
        self._waiting[tx.id] = [len(orgs), 0.0]
        net = self.config.net
        for org in orgs:
            peer = min(self.peers[org], key=lambda p: (p.lru, p.idx))
            self._lru_clock += 1
            peer.lru = self._lru_clock
            delay = net_delay(net, net.client_peer_ms, org, self.rng_net)
            self._push(self.now + delay, _ENDORSE, self._endorse, tx, peer)

    def _endorse(self, tx: Transaction, peer: Peer) -> None:
        config = self.config
        e = execute_intent(tx.intent, peer.replica, peer.ident, self.now)
        tx.endorsements.append(e)
        busy = endorsement_db_ms(tx.intent, config.db, config.storage_factor) + config.endorse_overhead_ms
        back = net_delay(config.net, config.net.client_peer_ms, peer.org, self.rng_net)
        done = self.now + busy + back
        state = self._waiting[tx.id]
        state[0] -= 1
        state[1] = max(state[1], done)
        if state[0] == 0:
            del self._waiting[tx.id]
            # endorsements are kept in endorser order so the trace does not
            # depend on which response happened to arrive first
            tx.endorsements.sort(key=lambda x: x.endorser)
            self._push(state[1] + config.net.client_orderer_ms, _ARRIVE, self._arrive, tx)

    # --- ordering phase ----------------------------------------------------

    def _arrive(self, tx: Transaction) -> None:
        tx.orderer_time = self.now
        if self.sharp is not None:
            res = self.sharp.admit(tx)
            if not res.admitted:
                tx.final_status = TxStatus.EARLY_ABORT_REORDER
                tx.failure = FailureRecord(
                    tx.id, TxStatus.EARLY_ABORT_REORDER, res.key, writer_location=res.writer, detected_at=self.now
                )
                self.early.append(tx)
                return
        first = not self.cutter.pending
        cut = self.cutter.offer(tx, self.now)
        if cut is not None:
            self._cut(*cut)
        elif first:
            self._push(self.cutter.deadline, _TIMEOUT, self._timeout, self.cutter.generation)

    def _timeout(self, generation: int) -> None:
        if generation == self.cutter.generation:
            cut = self.cutter.expire(self.now)
            if cut is not None:
                self._cut(*cut)

    def _cut(self, txs: list[Transaction], reason: CutReason) -> None:
        config = self.config
        height = len(self.ledger) + 1
        cost = 0.0
        if config.mode == "FABRICPP":
            outcome = reorder_block(txs, config, self.policy)
            by_id = {tx.id: tx for tx in txs}
            ordered = [by_id[i] for i in outcome.order]
            for tx in txs:
                if tx.id in outcome.aborted:
                    tx.final_status = TxStatus.EARLY_ABORT_REORDER
                    tx.failure = FailureRecord(tx.id, TxStatus.EARLY_ABORT_REORDER, detected_at=self.now)
                    ordered.append(tx)
            txs = ordered
            cost = outcome.cost_ms
        elif self.sharp is not None:
            txs = self.sharp.take_batch(height)
        block = Block(height, txs, reason, self.now, cost)
        for tx, (status, rec) in zip(txs, validate_block(block, self.canonical, self.policy, self.now)):
            tx.final_status = status
            tx.failure = rec
        self.ledger.append(block)

        per_tx = config.stream_overhead_ms if config.mode == "STREAMCHAIN" else config.orderer_block_ms
        start = max(self.now, self.orderer_free)
        sent = start + cost + per_tx
        self.orderer_free = sent
        for tx in txs:
            tx.delivered_time = sent
        self._deliver(block, sent)

    # --- validation phase --------------------------------------------------

    def _deliver(self, block: Block, sent: float) -> None:
        config = self.config
        validation = block_validation_ms(block, config, self.vscc_ms)
        lag_cfg = config.commit_lag
        lag_scale = self.db_scale * config.storage_factor
        stale = config.snapshot_staleness_ms if config.mode == "FABRICSHARP" else 0.0
        for peer in self.all_peers:
            arrival = sent + net_delay(config.net, config.net.orderer_peer_ms, peer.org, self.rng_net)
            arrival = max(arrival, peer.last_arrival)
            peer.last_arrival = arrival
            begin = max(arrival, peer.free_at)
            end = begin + validation
            peer.free_at = end
            lag = sample_commit_lag(self.rng_lag, lag_cfg, lag_scale, validation)
            commit = max(end + lag, peer.last_commit)
            peer.last_commit = commit
            if peer.ident == REFERENCE_PEER:
                for tx in block.txs:
                    tx.commit_time = commit
            self._push(commit + stale, _COMMIT, self._commit, peer, block)

    def _commit(self, peer: Peer, block: Block) -> None:
        if self.config.validate_all_peers:
            statuses = validate_block(block, peer.replica, self.policy, self.now)
            got = [s for s, _ in statuses]
            want = [tx.final_status for tx in block.txs]
            if got != want:
                raise AssertionError(f"peer {peer.ident} disagrees on block {block.height}")
            return
        replica = peer.replica
        for index, tx in enumerate(block.txs):
            if tx.final_status is TxStatus.SUCCESS:
                replica.apply(_effective(tx, self.policy).write_set, (block.height, index))

    # --- results -----------------------------------------------------------

    def _result(self) -> SimulationResult:
        rows = ((tx.final_status.value, tx.submit_time, tx.commit_time) for b in self.ledger for tx in b.txs)
        stats = summarize(rows, len(self.txs), len(self.early), _per_block(self.ledger))
        horizon = self.stream.spec.duration_s * 1000.0
        queue = sum(
            1
            for tx in self.txs
            if tx.orderer_time is not None
            and tx.delivered_time is not None
            and tx.orderer_time <= horizon < tx.delivered_time
        )
        if not stats.conserved():
            raise AssertionError("transaction conservation violated")
        return SimulationResult(
            ledger=self.ledger,
            stats=stats,
            early_aborted=self.early,
            event_count=self.events,
            wall_seed=self.config.seed,
            queue_at_end=queue,
            horizon_ms=horizon,
            transactions=self.txs,
        )


def _effective(tx: Transaction, policy: PolicyNode) -> Endorsement:
    # a SUCCESS tx always has a satisfying class; its first member is what validation used
    return satisfying_subset(policy, tx.endorsements)[0]


def _per_block(ledger: list[Block]) -> list[dict[str, int]]:
    out = []
    for b in ledger:
        counts: dict[str, int] = {}
        for tx in b.txs:
            counts[tx.final_status.value] = counts.get(tx.final_status.value, 0) + 1
        out.append({"height": b.height, **counts})
    return out


def run(config: SimConfig, stream: TxIntentStream) -> SimulationResult:
    """Simulate ``stream`` through the pipeline described by ``config``."""
    return Simulation(config, stream).run()


def single_tx_stream(ops: list[Op] | tuple[Op, ...], chaincode: str = "EHR") -> TxIntentStream:
    """Helper for examples and tests: a stream with exactly one transaction."""
    return scripted_stream([(0.0, "custom", tuple(ops))], chaincode)


class _ScriptedStream(TxIntentStream):
    def __init__(self, profile, spec, items):
        self.profile = profile
        self.spec = spec
        self.items = items
        self.functions = sorted({name for _, name, _ in items})

    def uses_ranges(self) -> bool:
        return any(op.kind == "RANGE" for _, _, ops in self.items for op in ops)

    def expected_count(self) -> int:
        return len(self.items)

    def __iter__(self):
        for i, (t, name, ops) in enumerate(self.items):
            yield Intent(i, t, name, tuple(ops))


def scripted_stream(items, chaincode="EHR", genesis=None, duration_s: Optional[float] = None) -> TxIntentStream:
    """A stream of hand-written ``(submit_ms, function, ops)`` transactions.

    ``genesis`` overrides the initial world state with ``(key, value)`` pairs.
    """
    items = sorted(items, key=lambda it: it[0])
    if genesis is not None:
        profile = _StaticProfile(list(genesis))
    else:
        profile = load_chaincode(chaincode)
    horizon = duration_s if duration_s is not None else max(1.0, (items[-1][0] if items else 0.0) / 1000.0)
    spec = WorkloadSpec({"_": 1.0}, 1.0, horizon, 0.0, 0)
    return _ScriptedStream(profile, spec, items)


class _StaticProfile:
    def __init__(self, items):
        self.name = "static"
        self._items = items

    def genesis_items(self):
        return iter(self._items)

    def has_ranges(self, names=None) -> bool:
        return False
