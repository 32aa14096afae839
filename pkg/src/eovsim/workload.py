"""Chaincode profiles and workload generation.

A chaincode is described by key spaces and, per function, a list of op
templates. Templates sharing a ``slot`` within one transaction touch the
same sampled key, which is how read-modify-write functions are expressed.
"""

from __future__ import annotations

import bisect
import itertools
import math
import random
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterator, Optional, Sequence, Union

from .core import Op
from .errors import EmptySpec, UnknownFunction

Span = Union[None, str, int, tuple[int, ...]]


@dataclass(frozen=True)
class KeySpace:
    name: str
    size: int

    @property
    def width(self) -> int:
        return max(4, len(str(self.size - 1)))

    def key(self, index: int) -> str:
        return f"{self.name}_{index:0{self.width}d}"


@dataclass(frozen=True)
class OpTemplate:
    """``kind`` is READ, WRITE, DELETE, INSERT (write to a fresh key) or RANGE.

    RANGE spans: "ALL" for the whole space, an int for a fixed window, or a
    tuple of widths picked uniformly per transaction.
    """

    kind: str
    space: str
    slot: int = 0
    span: Span = None
    phantom: bool = True
    value: Optional[bytes] = None
    guard: Optional[bytes] = None


@dataclass(frozen=True)
class FunctionProfile:
    name: str
    ops: tuple[OpTemplate, ...]
    invocable: bool = True

    @property
    def reads(self) -> int:
        return sum(t.kind == "READ" for t in self.ops)

    @property
    def writes(self) -> int:
        return sum(t.kind in ("WRITE", "DELETE", "INSERT") for t in self.ops)

    @property
    def range_reads(self) -> int:
        return sum(t.kind == "RANGE" for t in self.ops)

    @property
    def counts(self) -> tuple[int, int, int]:
        return (self.reads, self.writes, self.range_reads)


@dataclass(frozen=True)
class ChaincodeProfile:
    name: str
    spaces: tuple[KeySpace, ...]
    functions: tuple[FunctionProfile, ...]
    initial_population: tuple[tuple[str, int], ...]

    def __post_init__(self):
        names = [f.name for f in self.functions]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate function names in {self.name}")
        if any(count <= 0 for _, count in self.initial_population):
            raise ValueError("initial population counts must be positive")

    def function(self, name: str) -> FunctionProfile:
        for f in self.functions:
            if f.name == name:
                return f
        raise UnknownFunction(name)

    def space(self, name: str) -> KeySpace:
        for s in self.spaces:
            if s.name == name:
                return s
        raise KeyError(name)

    @property
    def invocable(self) -> list[str]:
        return [f.name for f in self.functions if f.invocable]

    def has_ranges(self, names: Optional[Sequence[str]] = None) -> bool:
        fns = self.functions if names is None else [self.function(n) for n in names]
        return any(f.range_reads for f in fns)

    def genesis_items(self) -> Iterator[tuple[str, bytes]]:
        for space_name, count in self.initial_population:
            space = self.space(space_name)
            for i in range(count):
                yield space.key(i), b"init"


def _fn(name: str, *ops: OpTemplate, invocable: bool = True) -> FunctionProfile:
    return FunctionProfile(name, tuple(ops), invocable)


R = lambda space, slot=0, **kw: OpTemplate("READ", space, slot, **kw)  # noqa: E731
W = lambda space, slot=0, **kw: OpTemplate("WRITE", space, slot, **kw)  # noqa: E731
RR = lambda space, span="ALL", phantom=True: OpTemplate("RANGE", space, span=span, phantom=phantom)  # noqa: E731


def _ehr() -> ChaincodeProfile:
    spaces = (KeySpace("profile", 100), KeySpace("ehr", 100))
    both = (R("profile"), R("ehr"), W("profile"), W("ehr"))
    functions = (
        _fn("initLedger", W("profile"), W("ehr"), invocable=False),
        _fn("grantProfileAccess", R("profile"), W("profile")),
        _fn("revokeProfileAccess", R("profile"), W("profile")),
        _fn("revokeEhrAccess", *both),
        _fn("grantEhrAccess", *both),
        _fn("addEhr", *both),
        _fn("readProfile", R("profile")),
        _fn("viewPartialProfile", R("profile")),
        _fn("viewEHR", R("ehr")),
        _fn("queryEHR", R("ehr")),
    )
    return ChaincodeProfile("EHR", spaces, functions, (("profile", 100), ("ehr", 100)))


def _dv() -> ChaincodeProfile:
    spaces = (KeySpace("voter", 1000), KeySpace("party", 12), KeySpace("election", 1))
    functions = (
        _fn("initLedger", W("election"), W("voter"), W("party"), invocable=False),
        _fn(
            "vote",
            R("voter", guard=b"voted"),
            RR("voter"),
            RR("party"),
            W("voter", value=b"voted"),
            W("party", slot=1),
        ),
        _fn("closeElection", R("election"), W("election")),
        _fn("queryParties", R("election"), RR("party")),
        _fn("seeResults", R("election"), RR("party")),
    )
    population = (("election", 1), ("voter", 1000), ("party", 12))
    return ChaincodeProfile("DV", spaces, functions, population)


SCM_LSP_UNITS = (400, 400, 400, 400, 800)


def _scm() -> ChaincodeProfile:
    units = tuple(KeySpace(f"lsp{i}", n) for i, n in enumerate(SCM_LSP_UNITS))
    spaces = units + (KeySpace("unit", sum(SCM_LSP_UNITS)), KeySpace("asn", 1))
    # a tx's unit slots sample over all units; "unit" is an alias space that
    # maps a global unit index onto the owning LSP's key space
    functions = (
        _fn("initLedger", W("unit"), W("asn"), invocable=False),
        _fn("pushASN", OpTemplate("INSERT", "asn")),
        _fn("Ship", R("unit"), R("unit", 1), W("unit"), W("unit", 1)),
        _fn("Unload", R("unit"), R("unit", 1), W("unit"), W("unit", 1)),
        _fn("queryASN", OpTemplate("RANGE", "lsp*", span="ALL", phantom=True)),
        _fn("queryStock", OpTemplate("RANGE", "lsp*", span="ALL", phantom=False)),
    )
    population = tuple((s.name, s.size) for s in units)
    return ChaincodeProfile("SCM", spaces, functions, population)


def _drm() -> ChaincodeProfile:
    spaces = (KeySpace("meta", 200), KeySpace("holder", 200))
    functions = (
        _fn("initLedger", W("meta"), W("holder"), invocable=False),
        _fn("create", R("meta"), W("meta"), W("holder")),
        _fn("play", R("meta"), R("holder"), W("meta")),
        _fn("queryRights", R("meta"), R("holder")),
        _fn("viewMetaData", R("meta")),
        _fn("calcRevenue", RR("holder", phantom=False)),
    )
    return ChaincodeProfile("DRM", spaces, functions, (("meta", 200), ("holder", 200)))


_BUILTINS = {"EHR": _ehr, "DV": _dv, "SCM": _scm, "DRM": _drm}


def builtin_chaincode(name: str) -> ChaincodeProfile:
    try:
        return _BUILTINS[name]()
    except KeyError:
        raise ValueError(f"unknown chaincode {name!r}; expected one of {sorted(_BUILTINS)}") from None


@dataclass(frozen=True)
class FunctionSpec:
    reads: int = 0
    inserts: int = 0
    updates: int = 0
    deletes: int = 0
    range_reads: int = 0

    def total(self) -> int:
        return self.reads + self.inserts + self.updates + self.deletes + self.range_reads


GENCHAIN_RANGE_WIDTHS = (2, 4, 8)


def gen_chaincode(
    functions: dict[str, FunctionSpec],
    db_kind: str = "COUCHDB",
    n_keys: int = 100_000,
    range_widths: Sequence[int] = GENCHAIN_RANGE_WIDTHS,
    name: str = "generated",
) -> ChaincodeProfile:
    """Build a profile from per-function action counts.

    ``db_kind`` is accepted for parity with the generator's inputs; rich
    queries are not modelled, so it does not change the profile.
    """
    if db_kind not in ("COUCHDB", "LEVELDB"):
        raise ValueError(f"unknown db kind {db_kind!r}")
    if not functions or all(spec.total() == 0 for spec in functions.values()):
        raise EmptySpec("chaincode spec has no operations")
    space = KeySpace("k", n_keys)
    profiles = []
    for fname, spec in functions.items():
        if spec.total() == 0:
            raise EmptySpec(f"function {fname!r} has no operations")
        ops: list[OpTemplate] = []
        slot = 0
        for _ in range(spec.reads):
            ops.append(R("k", slot))
            slot += 1
        for _ in range(spec.updates):
            ops += [R("k", slot), W("k", slot)]
            slot += 1
        for _ in range(spec.inserts):
            ops.append(OpTemplate("INSERT", "k"))
        for _ in range(spec.deletes):
            ops.append(OpTemplate("DELETE", "k", slot))
            slot += 1
        for _ in range(spec.range_reads):
            ops.append(RR("k", span=tuple(range_widths)))
        profiles.append(FunctionProfile(fname, tuple(ops)))
    return ChaincodeProfile(name, (space,), tuple(profiles), (("k", n_keys),))


GENCHAIN_FUNCTIONS = {
    "read": FunctionSpec(reads=1),
    "insert": FunctionSpec(inserts=1),
    "update": FunctionSpec(updates=1),
    "delete": FunctionSpec(deletes=1),
    "range": FunctionSpec(range_reads=1),
}


def genchain(n_keys: int = 100_000, db_kind: str = "COUCHDB") -> ChaincodeProfile:
    return gen_chaincode(GENCHAIN_FUNCTIONS, db_kind, n_keys, name="genChain")


def load_chaincode(name: str, n_keys: Optional[int] = None) -> ChaincodeProfile:
    if name == "genChain":
        return genchain(n_keys or 100_000)
    return builtin_chaincode(name)


# --- key sampling -------------------------------------------------------------


@lru_cache(maxsize=64)
def _zipf_cdf(n_keys: int, skew: float) -> tuple[float, ...]:
    weights = (1.0 / r**skew for r in range(1, n_keys + 1))
    cdf = tuple(itertools.accumulate(weights))
    return tuple(c / cdf[-1] for c in cdf)


def zipf_sample(n_keys: int, skew: float, rng: random.Random) -> int:
    """Draw a key index with P(rank r) proportional to 1/r**skew.

    Rank 1 is the highest index, so skewed draws favour the top of the
    key space. ``skew == 0`` is uniform.
    """
    if n_keys < 1:
        raise ValueError("n_keys must be >= 1")
    if skew < 0:
        raise ValueError("skew must be non-negative")
    cdf = _zipf_cdf(n_keys, float(skew))
    rank0 = bisect.bisect_left(cdf, rng.random())
    return n_keys - 1 - min(rank0, n_keys - 1)


def harmonic(n: int, s: float = 1.0) -> float:
    return math.fsum(1.0 / r**s for r in range(1, n + 1))


# --- workload specs and streams -------------------------------------------------

HEAVY_SHARE = 0.80


def preset_mix(profile: ChaincodeProfile, preset: str) -> dict[str, float]:
    names = profile.invocable
    if preset == "uniform":
        return {n: 1.0 / len(names) for n in names}
    if preset == "read-update":
        return {"read": 0.5, "update": 0.5}
    if preset.endswith("-heavy"):
        heavy = preset[: -len("-heavy")]
        if heavy not in names:
            raise UnknownFunction(heavy)
        rest = (1.0 - HEAVY_SHARE) / (len(names) - 1)
        return {n: (HEAVY_SHARE if n == heavy else rest) for n in names}
    raise ValueError(f"unknown workload preset {preset!r}")


@dataclass(frozen=True)
class WorkloadSpec:
    mix: dict[str, float]
    arrival_rate_tps: float = 100.0
    duration_s: float = 180.0
    zipf_skew: float = 1.0
    seed: int = 0
    poisson: bool = False

    def __post_init__(self):
        total = math.fsum(self.mix.values())
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"mix probabilities sum to {total}, expected 1")
        if any(p < 0 for p in self.mix.values()):
            raise ValueError("mix probabilities must be non-negative")
        if self.arrival_rate_tps <= 0 or self.duration_s <= 0:
            raise ValueError("arrival rate and duration must be positive")
        if self.zipf_skew < 0:
            raise ValueError("zipf skew must be non-negative")


@dataclass(frozen=True, slots=True)
class Intent:
    tx_id: int
    submit_time: float
    function: str
    ops: tuple[Op, ...]


class _KeyPicker:
    def __init__(self, profile: ChaincodeProfile, skew: float, rng: random.Random, seed: int):
        self.profile = profile
        self.skew = skew
        self.rng = rng
        self.deleted: set[str] = set()
        self.skips: dict[str, dict[int, int]] = {}
        self.fresh = itertools.count()
        self.fresh_prefix = f"ins_{seed & 0xFFFFFFFF:08x}_"
        self.lsp_spaces = [s for s in profile.spaces if s.name.startswith("lsp")]

    def index(self, space: KeySpace) -> int:
        return zipf_sample(space.size, self.skew, self.rng)

    def unit_key(self) -> str:
        # global index over all LSP units, mapped onto the owning LSP's space
        total = sum(s.size for s in self.lsp_spaces)
        i = zipf_sample(total, self.skew, self.rng)
        for s in self.lsp_spaces:
            if i < s.size:
                return s.key(i)
            i -= s.size
        raise AssertionError("unreachable")

    def point_key(self, space_name: str) -> str:
        if space_name == "unit":
            return self.unit_key()
        space = self.profile.space(space_name)
        return space.key(self.index(space))

    def delete_key(self, space_name: str) -> Optional[str]:
        """A live, not-yet-deleted key: the sampled one or the nearest below it."""
        space = self.profile.space(space_name)
        skip = self.skips.setdefault(space.name, {})
        if len(skip) >= space.size:
            return None
        i = self.index(space)
        # skip maps a deleted index to a candidate further down (cyclic);
        # path compression keeps the walk short as the deleted set grows
        path = []
        while i in skip:
            path.append(i)
            i = skip[i]
        for j in path:
            skip[j] = i
        skip[i] = (i - 1) % space.size
        key = space.key(i)
        self.deleted.add(key)
        return key

    def insert_key(self) -> str:
        return f"{self.fresh_prefix}{next(self.fresh):09d}"

    def range_bounds(self, t: OpTemplate) -> tuple[str, str]:
        if t.space == "lsp*":
            space = self.rng.choice(self.lsp_spaces)
        else:
            space = self.profile.space(t.space)
        if t.span == "ALL" or t.span is None:
            return space.key(0), space.key(space.size - 1)
        width = self.rng.choice(t.span) if isinstance(t.span, tuple) else int(t.span)
        width = max(1, min(width, space.size))
        start = min(self.index(space), space.size - width)
        return space.key(start), space.key(start + width - 1)


class TxIntentStream:
    """Deterministic stream of intents; iterating twice yields the same intents."""

    def __init__(self, profile: ChaincodeProfile, spec: WorkloadSpec):
        for name in spec.mix:
            fn = profile.function(name)
            if not fn.invocable:
                raise UnknownFunction(f"{name} is not invocable")
        self.profile = profile
        self.spec = spec
        self.functions = [n for n, p in spec.mix.items() if p > 0]
        self._cum = list(itertools.accumulate(spec.mix[n] for n in self.functions))

    def uses_ranges(self) -> bool:
        return self.profile.has_ranges(self.functions)

    def expected_count(self) -> int:
        return int(math.floor(self.spec.arrival_rate_tps * self.spec.duration_s + 1e-9))

    def _times(self, rng: random.Random) -> Iterator[float]:
        spec = self.spec
        horizon = spec.duration_s * 1000.0
        if not spec.poisson:
            gap = 1000.0 / spec.arrival_rate_tps
            for i in range(self.expected_count()):
                yield i * gap
            return
        t = 0.0
        while True:
            t += rng.expovariate(spec.arrival_rate_tps / 1000.0)
            if t >= horizon:
                return
            yield t

    def _choose(self, rng: random.Random) -> str:
        r = rng.random() * self._cum[-1]
        i = bisect.bisect_right(self._cum, r)
        return self.functions[min(i, len(self.functions) - 1)]

    def __iter__(self) -> Iterator[Intent]:
        seed = self.spec.seed
        time_rng = random.Random(f"arrivals:{seed}")
        mix_rng = random.Random(f"mix:{seed}")
        picker = _KeyPicker(self.profile, self.spec.zipf_skew, random.Random(f"keys:{seed}"), seed)
        for tx_id, t in enumerate(self._times(time_rng)):
            name = self._choose(mix_rng)
            yield Intent(tx_id, t, name, self._instantiate(self.profile.function(name), tx_id, picker))

    def _instantiate(self, fn: FunctionProfile, tx_id: int, picker: _KeyPicker) -> tuple[Op, ...]:
        slots: dict[tuple[str, int], str] = {}
        value = f"tx{tx_id}".encode()
        ops: list[Op] = []
        for t in fn.ops:
            if t.kind in ("READ", "WRITE"):
                key = slots.get((t.space, t.slot))
                if key is None:
                    key = slots[(t.space, t.slot)] = picker.point_key(t.space)
                if t.kind == "READ":
                    ops.append(Op("READ", key, guard=t.guard))
                else:
                    ops.append(Op("WRITE", key, value=t.value or value))
            elif t.kind == "INSERT":
                ops.append(Op("WRITE", picker.insert_key(), value=value))
            elif t.kind == "DELETE":
                key = picker.delete_key(t.space)
                if key is not None:
                    ops.append(Op("DELETE", key))
            elif t.kind == "RANGE":
                start, end = picker.range_bounds(t)
                ops.append(Op("RANGE", start, end=end, phantom=t.phantom))
            else:
                raise ValueError(f"unknown template kind {t.kind!r}")
        return tuple(ops)


def gen_workload(profile: ChaincodeProfile, spec: WorkloadSpec) -> TxIntentStream:
    return TxIntentStream(profile, spec)


def make_stream(
    chaincode: str = "EHR",
    preset: Optional[str] = "uniform",
    mix: Optional[dict[str, float]] = None,
    rate_tps: float = 100.0,
    duration_s: float = 180.0,
    zipf_skew: float = 1.0,
    seed: int = 0,
    poisson: bool = False,
    n_keys: Optional[int] = None,
) -> TxIntentStream:
    profile = load_chaincode(chaincode, n_keys)
    if mix is None:
        mix = preset_mix(profile, preset or "uniform")
    spec = WorkloadSpec(dict(mix), rate_tps, duration_s, zipf_skew, seed, poisson)
    return TxIntentStream(profile, spec)
