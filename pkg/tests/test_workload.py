from __future__ import annotations

import math
import random
from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eovsim.errors import EmptySpec, UnknownFunction
from eovsim.workload import (
    FunctionSpec,
    WorkloadSpec,
    builtin_chaincode,
    gen_chaincode,
    gen_workload,
    genchain,
    harmonic,
    make_stream,
    preset_mix,
    zipf_sample,
)


def test_ehr_add_ehr_counts():
    assert builtin_chaincode("EHR").function("addEhr").counts == (2, 2, 0)


def test_dv_vote_and_see_results():
    dv = builtin_chaincode("DV")
    assert dv.function("vote").counts == (1, 2, 2)
    assert dv.function("seeResults").counts == (1, 0, 1)
    ops = next(iter(make_stream("DV", mix={"vote": 1.0}, duration_s=1))).ops
    ranges = [op for op in ops if op.kind == "RANGE"]
    assert {(r.key, r.end) for r in ranges} == {("party_0000", "party_0011"), ("voter_0000", "voter_0999")}


def test_scm_query_asn_covers_one_lsp_with_phantom_check():
    scm = builtin_chaincode("SCM")
    assert scm.function("queryASN").counts == (0, 0, 1)
    for intent in make_stream("SCM", mix={"queryASN": 1.0}, duration_s=1, rate_tps=20):
        (op,) = intent.ops
        lsp = op.key.split("_")[0]
        assert op.end.startswith(lsp) and op.phantom


def test_unchecked_ranges_are_flagged():
    assert builtin_chaincode("SCM").function("queryStock").ops[0].phantom is False
    assert builtin_chaincode("DRM").function("calcRevenue").ops[0].phantom is False


def test_population_sizes():
    sizes = {cc: sum(1 for _ in builtin_chaincode(cc).genesis_items()) for cc in ("EHR", "DV", "SCM", "DRM")}
    assert sizes == {"EHR": 200, "DV": 1013, "SCM": 2400, "DRM": 400}


def test_unknown_chaincode():
    with pytest.raises(ValueError):
        builtin_chaincode("NOPE")


def test_genchain_has_one_function_per_action():
    profile = genchain(1000)
    assert {f.name for f in profile.functions} == {"read", "insert", "update", "delete", "range"}
    assert all(f.invocable for f in profile.functions)


def test_gen_chaincode_empty_spec():
    with pytest.raises(EmptySpec):
        gen_chaincode({"f": FunctionSpec()})
    with pytest.raises(EmptySpec):
        gen_chaincode({})


def test_gen_chaincode_single_mixed_function():
    profile = gen_chaincode({"f": FunctionSpec(reads=1, updates=1)}, n_keys=10)
    assert [f.name for f in profile.functions] == ["f"]
    assert profile.function("f").counts == (2, 1, 0)


def test_zipf_single_key():
    rng = random.Random(1)
    assert {zipf_sample(1, 3.0, rng) for _ in range(100)} == {0}


def test_zipf_uniform_when_skew_zero():
    n, draws = 10, 100_000
    rng = random.Random(2)
    counts = Counter(zipf_sample(n, 0.0, rng) for _ in range(draws))
    p = 1 / n
    sigma = math.sqrt(draws * p * (1 - p))
    assert all(abs(counts[i] - draws * p) <= 3 * sigma for i in range(n))


def test_zipf_top_key_mass():
    n, draws = 1000, 100_000
    rng = random.Random(3)
    p = 1 / harmonic(1000)
    assert p == pytest.approx(0.1336, abs=1e-4)
    hits = sum(zipf_sample(n, 1.0, rng) == n - 1 for _ in range(draws))
    assert abs(hits - draws * p) <= 3 * math.sqrt(draws * p * (1 - p))


def test_zipf_orientation_favours_high_index():
    rng = random.Random(4)
    counts = Counter(zipf_sample(100, 2.0, rng) for _ in range(10_000))
    assert counts[99] > counts[0]


def test_zipf_rejects_bad_input():
    with pytest.raises(ValueError):
        zipf_sample(0, 1.0, random.Random())
    with pytest.raises(ValueError):
        zipf_sample(5, -1.0, random.Random())


def test_update_heavy_mix():
    mix = preset_mix(genchain(100), "update-heavy")
    assert mix["update"] == pytest.approx(0.8)
    assert all(mix[k] == pytest.approx(0.05) for k in ("read", "insert", "delete", "range"))


def test_rate_and_duration_give_intent_count():
    intents = list(make_stream("EHR", rate_tps=100, duration_s=180))
    assert len(intents) == 18000
    assert intents[-1].submit_time < 180_000
    assert all(a.submit_time <= b.submit_time for a, b in zip(intents, intents[1:]))


def test_streams_are_deterministic():
    a = [(i.submit_time, i.function, i.ops) for i in make_stream("genChain", duration_s=5, seed=9)]
    b = [(i.submit_time, i.function, i.ops) for i in make_stream("genChain", duration_s=5, seed=9)]
    assert a == b


def test_poisson_arrivals_stay_inside_horizon():
    intents = list(make_stream("EHR", duration_s=10, poisson=True, seed=5))
    assert intents and intents[-1].submit_time < 10_000
    assert abs(len(intents) - 1000) < 5 * math.sqrt(1000)


def test_unknown_function_in_mix():
    with pytest.raises(UnknownFunction):
        gen_workload(builtin_chaincode("EHR"), WorkloadSpec({"fly": 1.0}))
    with pytest.raises(UnknownFunction):
        gen_workload(builtin_chaincode("EHR"), WorkloadSpec({"initLedger": 1.0}))


def test_mix_must_sum_to_one():
    with pytest.raises(ValueError):
        WorkloadSpec({"read": 0.5})


def test_mix_convergence_within_three_sigma():
    mix = preset_mix(genchain(1000), "read-heavy")
    intents = list(make_stream("genChain", mix=mix, duration_s=200, n_keys=1000))
    n = len(intents)
    counts = Counter(i.function for i in intents)
    for name, p in mix.items():
        assert abs(counts[name] - n * p) <= 3 * math.sqrt(n * p * (1 - p))


def test_range_widths_drawn_from_two_four_eight():
    widths = Counter()
    for intent in make_stream("genChain", mix={"range": 1.0}, duration_s=30, n_keys=1000):
        (op,) = intent.ops
        widths[int(op.end[2:]) - int(op.key[2:]) + 1] += 1
    assert set(widths) == {2, 4, 8}


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32), st.floats(0, 2))
def test_inserts_fresh_and_deletes_unique(seed, skew):
    stream = make_stream("genChain", mix={"insert": 0.5, "delete": 0.5}, duration_s=20, zipf_skew=skew, seed=seed, n_keys=50)
    genesis = {k for k, _ in stream.profile.genesis_items()}
    inserted, deleted = set(), set()
    for intent in stream:
        for op in intent.ops:
            if op.kind == "WRITE":
                assert op.key not in genesis and op.key not in inserted
                inserted.add(op.key)
            elif op.kind == "DELETE":
                assert op.key in genesis and op.key not in deleted
                deleted.add(op.key)
    # 50 keys: once all are gone, delete intents carry no op
    assert len(deleted) <= 50
