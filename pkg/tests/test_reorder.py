from __future__ import annotations

import random

import networkx as nx
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eovsim.config import SimConfig
from eovsim.core import Endorsement, RangeRead, Transaction, WorldState
from eovsim.errors import RangeUnsupported
from eovsim.pipeline import run
from eovsim.policy import expand_builtin
from eovsim.reorder import (
    ConflictGraph,
    FabricSharpTracker,
    build_conflict_graph,
    find_cycles,
    greedy_mfvs,
    is_valid_serial_order,
    reorder_block,
    serial_order,
    strongly_connected_components,
)
from eovsim.workload import make_stream

from oracles import exhaustive_min_fvs, is_acyclic, reader_writer_edges, valid_orders

P0 = expand_builtin("P0", 2)


def make_tx(tx_id, reads=(), writes=(), ranges=(), orgs=(0, 1)):
    tx = Transaction(tx_id, 0.0, "f", ())
    for org in orgs:
        tx.endorsements.append(
            Endorsement(
                (org, 0),
                tuple((k, 1) for k in reads),
                tuple((k, b"v") for k in writes),
                tuple(ranges),
            )
        )
    return tx


def test_read_only_txs_have_no_edges():
    g = build_conflict_graph([make_tx(1, reads="a"), make_tx(2, reads="a")])
    assert g.edge_count() == 0


def test_writer_points_at_reader():
    g = build_conflict_graph([make_tx(1, reads="a"), make_tx(2, writes="a")])
    assert g.edges == [(2, 1)]


def test_read_modify_write_pair_is_a_two_cycle():
    g = build_conflict_graph([make_tx(1, reads="a", writes="a"), make_tx(2, reads="a", writes="a")])
    assert sorted(g.edges) == [(1, 2), (2, 1)]


def test_range_reads_depend_on_writes_inside_the_interval():
    rr = RangeRead("b", "d", ())
    g = build_conflict_graph([make_tx(1, ranges=[rr]), make_tx(2, writes="c"), make_tx(3, writes="e")])
    assert g.edges == [(2, 1)]


def test_self_edges_rejected():
    with pytest.raises(ValueError):
        ConflictGraph.from_edges([1], [(1, 1)])


def test_find_cycles_examples():
    chain = ConflictGraph.from_edges([1, 2, 3], [(1, 2), (2, 3)])
    assert find_cycles(chain) == []
    pair = ConflictGraph.from_edges([1, 2], [(1, 2), (2, 1)])
    assert find_cycles(pair) == [[1, 2]]
    two = ConflictGraph.from_edges([1, 2, 3, 4], [(1, 2), (2, 1), (3, 4), (4, 3)])
    assert sorted(find_cycles(two)) == [[1, 2], [3, 4]]


def test_greedy_mfvs_examples():
    assert greedy_mfvs(ConflictGraph.from_edges([1, 2, 3], [(1, 2), (2, 3)])) == set()
    assert len(greedy_mfvs(ConflictGraph.from_edges([1, 2], [(1, 2), (2, 1)]))) == 1


def test_greedy_mfvs_tie_breaks_on_lowest_id():
    assert greedy_mfvs(ConflictGraph.from_edges([5, 7], [(5, 7), (7, 5)])) == {5}


def _random_graph(seed: int, max_n: int = 8):
    rng = random.Random(seed)
    n = rng.randint(1, max_n)
    p = rng.uniform(0.05, 0.6)
    edges = [(u, v) for u in range(n) for v in range(n) if u != v and rng.random() < p]
    return list(range(n)), edges


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 10**9))
def test_scc_matches_networkx(seed):
    nodes, edges = _random_graph(seed, 12)
    ours = sorted(sorted(c) for c in strongly_connected_components(ConflictGraph.from_edges(nodes, edges)))
    g = nx.DiGraph()
    g.add_nodes_from(nodes)
    g.add_edges_from(edges)
    theirs = sorted(sorted(c) for c in nx.strongly_connected_components(g))
    assert ours == theirs


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 10**9))
def test_greedy_mfvs_is_feasible_and_bounded_by_optimum(seed):
    nodes, edges = _random_graph(seed)
    removed = greedy_mfvs(ConflictGraph.from_edges(nodes, edges))
    assert is_acyclic(set(nodes) - removed, edges)
    assert len(removed) >= exhaustive_min_fvs(nodes, edges)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10**9))
def test_survivor_order_is_a_valid_permutation(seed):
    nodes, edges = _random_graph(seed, 7)
    g = ConflictGraph.from_edges(nodes, edges)
    survivors = [v for v in nodes if v not in greedy_mfvs(g)]
    order = serial_order(g, survivors, {v: v for v in nodes})
    assert tuple(order) in valid_orders(survivors, edges)
    assert is_valid_serial_order(g, order)


def test_serial_order_rejects_cycles():
    g = ConflictGraph.from_edges([1, 2], [(1, 2), (2, 1)])
    with pytest.raises(ValueError):
        serial_order(g, [1, 2], {1: 0, 2: 1})


def test_reorder_puts_reader_before_writer():
    txs = [make_tx(1, writes="a"), make_tx(2, reads="a", writes="b")]
    out = reorder_block(txs, SimConfig(mode="FABRICPP"), P0)
    assert out.aborted == set()
    assert out.order == [2, 1]


def test_reorder_keeps_arrival_order_for_independent_txs():
    txs = [make_tx(i, reads=[f"r{i}"], writes=[f"w{i}"]) for i in (3, 1, 2)]
    out = reorder_block(txs, SimConfig(mode="FABRICPP"), P0)
    assert out.aborted == set() and out.order == [3, 1, 2]


def test_reorder_aborts_one_of_a_true_cycle():
    txs = [make_tx(1, reads="a", writes="a"), make_tx(2, reads="a", writes="a")]
    out = reorder_block(txs, SimConfig(mode="FABRICPP"), P0)
    assert len(out.aborted) == 1 and len(out.order) == 1


def test_reorder_ignores_sets_that_fail_the_policy():
    bad = make_tx(2, writes="a", orgs=(0,))
    txs = [make_tx(1, reads="a"), bad]
    out = reorder_block(txs, SimConfig(mode="FABRICPP"), P0)
    assert out.edges == 0


def test_range_blocks_cost_far_more_to_reorder():
    config = SimConfig(mode="FABRICPP")
    observed = tuple((f"voter_{i:04d}", 1) for i in range(1000))
    rr = RangeRead("voter_0000", "voter_0999", observed)
    dv = [make_tx(i, reads=[f"voter_{i:04d}"], writes=[f"voter_{i:04d}"], ranges=[rr]) for i in range(100)]
    plain = [make_tx(i, reads=[f"k{i}"], writes=[f"k{i}"]) for i in range(100)]
    cost_dv = reorder_block(dv, config, P0).cost_ms
    cost_plain = reorder_block(plain, config, P0).cost_ms
    assert cost_dv >= 10 * cost_plain


def test_full_ehr_block_costs_about_a_millisecond():
    result = run(SimConfig(mode="FABRICPP"), make_stream("EHR", duration_s=30))
    costs = [b.reorder_cost_ms for b in result.ledger if len(b.txs) == 100]
    assert costs
    assert sum(costs) / len(costs) == pytest.approx(1.0, rel=0.3)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10**9))
def test_reorder_outcome_partitions_block(seed):
    rng = random.Random(seed)
    keys = "abcde"
    txs = [
        make_tx(i, reads=rng.sample(keys, rng.randint(0, 2)), writes=rng.sample(keys, rng.randint(0, 2)))
        for i in range(rng.randint(1, 8))
    ]
    out = reorder_block(txs, SimConfig(mode="FABRICPP"), P0)
    assert out.aborted.isdisjoint(out.order)
    assert out.aborted | set(out.order) == {tx.id for tx in txs}
    edges = reader_writer_edges({tx.id: tx.endorsements[0] for tx in txs})
    pos = {v: i for i, v in enumerate(out.order)}
    assert all(pos[r] < pos[w] for w, r in edges if w in pos and r in pos)


def _sharp(keys="ab"):
    return FabricSharpTracker(WorldState.genesis([(k, b"") for k in keys]), P0)


def test_sharp_admits_fresh_reads():
    assert _sharp().admit(make_tx(1, reads="a", writes="b")).admitted


def test_sharp_cross_block_two_cycle_aborts_exactly_one():
    tracker = _sharp()
    t1 = make_tx(1, reads="a", writes="b")
    t2 = make_tx(2, reads="b", writes="a")
    assert tracker.admit(t1).admitted
    tracker.take_batch(1)
    res = tracker.admit(t2)
    assert not res.admitted and res.key == "b" and res.writer == (1, 0)


def test_sharp_in_batch_cycle_aborts_exactly_one():
    tracker = _sharp()
    results = [tracker.admit(make_tx(1, reads="a", writes="b")), tracker.admit(make_tx(2, reads="b", writes="a"))]
    assert [r.admitted for r in results] == [True, False]


def test_sharp_batch_is_readers_first():
    tracker = _sharp()
    tracker.admit(make_tx(1, writes="a"))
    tracker.admit(make_tx(2, reads="a"))
    assert [tx.id for tx in tracker.take_batch(1)] == [2, 1]


def test_sharp_rejects_ranges():
    with pytest.raises(RangeUnsupported):
        _sharp().admit(make_tx(1, ranges=[RangeRead("a", "b", ())]))
