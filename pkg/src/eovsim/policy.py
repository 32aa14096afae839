"""Endorsement policies: "n-of" trees over organizations.

Built-in policies for N organizations:

    P0  "N-of" over every org
    P1  "2-of": [org0, "1-of": [org1 .. orgN-1]]
    P2  "2-of": ["1-of": [org0 .. org(N//2)], "1-of": [the rest]]
    P3  "(N//2+1)-of" over every org
"""

from __future__ import annotations

import random
import re
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Optional, Sequence, Union

from .core import Endorsement
from .errors import PolicySyntaxError, UnsupportedN


@dataclass(frozen=True)
class SignedBy:
    org: int

    def to_text(self) -> str:
        return f'"signed-by": {self.org}'


@dataclass(frozen=True)
class NOf:
    n: int
    children: tuple["PolicyNode", ...]

    def __post_init__(self):
        if self.n < 1 or self.n > len(self.children):
            raise ValueError(f"{self.n}-of needs 1 <= n <= {len(self.children)} children")

    def to_text(self) -> str:
        inner = ", ".join(c.to_text() for c in self.children)
        return f'"{self.n}-of": [{inner}]'


PolicyNode = Union[SignedBy, NOf]

BUILTIN_POLICIES = ("P0", "P1", "P2", "P3")


def expand_builtin(policy_id: str, num_orgs: int) -> PolicyNode:
    if num_orgs < 2:
        raise UnsupportedN(f"built-in policies need at least 2 organizations, got {num_orgs}")
    orgs = tuple(SignedBy(i) for i in range(num_orgs))
    if policy_id == "P0":
        return NOf(num_orgs, orgs)
    if policy_id == "P1":
        return NOf(2, (orgs[0], NOf(1, orgs[1:])))
    if policy_id == "P2":
        # first half is org0..org(N//2) inclusive; with N=2 that would leave
        # the second half empty, so split one-and-one instead
        split = num_orgs // 2 + 1 if num_orgs > 2 else 1
        return NOf(2, (NOf(1, orgs[:split]), NOf(1, orgs[split:])))
    if policy_id == "P3":
        return NOf(num_orgs // 2 + 1, orgs)
    raise ValueError(f"unknown built-in policy {policy_id!r}")


def resolve_policy(policy: Union[str, PolicyNode], num_orgs: int) -> PolicyNode:
    """Accept a built-in id, policy text, or an already-built tree."""
    if isinstance(policy, (SignedBy, NOf)):
        return policy
    if policy in BUILTIN_POLICIES:
        return expand_builtin(policy, num_orgs)
    return parse_policy(policy)


# --- text syntax -----------------------------------------------------------

_TOKEN = re.compile(r'\s*(?:(")([^"]*)"|(\d+)|([\[\]{}:,]))')


def _tokenize(text: str) -> list[tuple[str, str]]:
    tokens = []
    pos = 0
    text = text.strip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m or m.end() == pos:
            raise PolicySyntaxError(f"unexpected character at offset {pos}: {text[pos:pos + 10]!r}")
        if m.group(1):
            tokens.append(("str", m.group(2)))
        elif m.group(3):
            tokens.append(("num", m.group(3)))
        else:
            tokens.append(("sym", m.group(4)))
        pos = m.end()
        while pos < len(text) and text[pos].isspace():
            pos += 1
    return tokens


class _Parser:
    def __init__(self, tokens):
        self.tokens = tokens
        self.i = 0

    def peek(self):
        return self.tokens[self.i] if self.i < len(self.tokens) else (None, None)

    def take(self, kind, value=None):
        tok = self.peek()
        if tok[0] != kind or (value is not None and tok[1] != value):
            raise PolicySyntaxError(f"expected {value or kind} at token {self.i}, got {tok[1]!r}")
        self.i += 1
        return tok[1]

    def node(self) -> PolicyNode:
        braced = self.peek() == ("sym", "{")
        if braced:
            self.take("sym", "{")
        name = self.take("str")
        self.take("sym", ":")
        if name == "signed-by":
            result: PolicyNode = SignedBy(int(self.take("num")))
        else:
            m = re.fullmatch(r"(\d+)-of", name)
            if not m:
                raise PolicySyntaxError(f"unknown clause {name!r}")
            children = self.list()
            try:
                result = NOf(int(m.group(1)), tuple(children))
            except ValueError as exc:
                raise PolicySyntaxError(str(exc)) from None
        if braced:
            self.take("sym", "}")
        return result

    def list(self) -> list[PolicyNode]:
        self.take("sym", "[")
        items = [self.node()]
        while self.peek() == ("sym", ","):
            self.take("sym", ",")
            items.append(self.node())
        self.take("sym", "]")
        return items


def parse_policy(text: str) -> PolicyNode:
    """Parse ``"n-of": [...]`` / ``"signed-by": k`` policy text, with or without braces."""
    parser = _Parser(_tokenize(text))
    node = parser.node()
    if parser.i != len(parser.tokens):
        raise PolicySyntaxError(f"trailing tokens after policy at token {parser.i}")
    return node


# --- satisfaction -----------------------------------------------------------


def policy_orgs(policy: PolicyNode) -> list[int]:
    if isinstance(policy, SignedBy):
        return [policy.org]
    seen: list[int] = []
    for child in policy.children:
        for org in policy_orgs(child):
            if org not in seen:
                seen.append(org)
    return seen


@lru_cache(maxsize=4096)
def _outcomes(node: PolicyNode, remaining: tuple[tuple[int, int], ...]) -> frozenset:
    """All signature pools left over after satisfying ``node`` from ``remaining``.

    ``remaining`` maps org -> number of unused signatures (sorted tuple).
    Each signature may satisfy at most one leaf.
    """
    if isinstance(node, SignedBy):
        pool = dict(remaining)
        if pool.get(node.org, 0) < 1:
            return frozenset()
        pool[node.org] -= 1
        return frozenset([tuple(sorted((o, c) for o, c in pool.items() if c > 0))])
    # states: pool -> max satisfied children count reached with that pool
    states: dict[tuple, int] = {remaining: 0}
    for child in node.children:
        nxt = dict(states)
        for pool, count in states.items():
            if count >= node.n:
                continue
            for after in _outcomes(child, pool):
                if nxt.get(after, -1) < count + 1:
                    nxt[after] = count + 1
        states = nxt
    return frozenset(pool for pool, count in states.items() if count >= node.n)


def satisfied_by(policy: PolicyNode, orgs: Iterable[int]) -> bool:
    """True if one signature from each listed org (duplicates count) satisfies ``policy``."""
    pool: dict[int, int] = {}
    for org in orgs:
        pool[org] = pool.get(org, 0) + 1
    return bool(_outcomes(policy, tuple(sorted(pool.items()))))


def satisfying_subset(
    policy: PolicyNode, endorsements: Sequence[Endorsement]
) -> Optional[list[Endorsement]]:
    """Largest group of mutually identical endorsements that satisfies ``policy``.

    Identical means same read versions, range observations and write set.
    Policy satisfaction is monotone, so checking each whole identity class
    is exact. Classes are tried in order of first appearance.
    """
    classes: dict[tuple, list[Endorsement]] = {}
    for e in endorsements:
        classes.setdefault(e.fingerprint, []).append(e)
    for members in classes.values():
        if satisfied_by(policy, (e.endorser[0] for e in members)):
            return members
    return None


def sub_policy_count(policy: PolicyNode) -> int:
    def walk(node: PolicyNode, depth: int) -> int:
        if isinstance(node, SignedBy):
            return 0
        own = 1 if depth > 0 else 0
        return own + sum(walk(c, depth + 1) for c in node.children)

    return walk(policy, 0)


def min_signatures(policy: PolicyNode) -> int:
    if isinstance(policy, SignedBy):
        return 1
    costs = sorted(min_signatures(c) for c in policy.children)
    return sum(costs[: policy.n])


@dataclass(frozen=True)
class VsccCost:
    base_vscc_ms: float = 1.0
    per_subpolicy_ms: float = 0.5
    per_signature_ms: float = 0.1


def vscc_cost_ms(policy: PolicyNode, cost: VsccCost = VsccCost()) -> float:
    return (
        cost.base_vscc_ms
        + cost.per_subpolicy_ms * sub_policy_count(policy)
        + cost.per_signature_ms * min_signatures(policy)
    )


def minimal_layout(policy: PolicyNode, rng: random.Random) -> list[int]:
    """Pick a random minimal set of orgs whose signatures satisfy ``policy``."""
    if isinstance(policy, SignedBy):
        return [policy.org]
    chosen = rng.sample(policy.children, policy.n)
    orgs: list[int] = []
    for child in chosen:
        for org in minimal_layout(child, rng):
            if org not in orgs:
                orgs.append(org)
    return sorted(orgs)
