"""Simulation configuration and its cost models.

Defaults follow the reference deployment: block size 100, policy P0,
CouchDB, 2 organizations with 2 peers each. Database call latencies are
the measured per-call costs for CouchDB and LevelDB.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Any, Optional

from .core import SizeModel
from .errors import ConfigInvalid
from .policy import VsccCost

MODES = ("BASELINE", "FABRICPP", "STREAMCHAIN", "FABRICSHARP")
DB_KINDS = ("LEVELDB", "COUCHDB")


@dataclass(frozen=True)
class DbCostModel:
    get_ms: float
    put_ms: float
    get_range_ms: float
    delete_ms: float

    def op_ms(self, kind: str) -> float:
        if kind == "READ":
            return self.get_ms
        if kind == "WRITE":
            return self.put_ms
        if kind == "DELETE":
            return self.delete_ms
        if kind == "RANGE":
            return self.get_range_ms
        raise ValueError(kind)


DB_COSTS = {
    "COUCHDB": DbCostModel(get_ms=8.3, put_ms=0.8, get_range_ms=88.0, delete_ms=1.2),
    "LEVELDB": DbCostModel(get_ms=0.6, put_ms=0.5, get_range_ms=1.4, delete_ms=0.6),
}


@dataclass(frozen=True)
class OrgDelay:
    mean_ms: float = 0.0
    jitter_ms: float = 0.0


@dataclass(frozen=True)
class NetworkModel:
    client_peer_ms: float = 2.0
    client_orderer_ms: float = 2.0
    orderer_peer_ms: float = 2.0
    org_extra: dict[int, OrgDelay] = field(default_factory=dict)

    def __post_init__(self):
        base = (self.client_peer_ms, self.client_orderer_ms, self.orderer_peer_ms)
        if any(d < 0 for d in base):
            raise ConfigInvalid("network delays must be >= 0")
        for org, d in self.org_extra.items():
            if d.mean_ms - d.jitter_ms < 0 or d.jitter_ms < 0:
                raise ConfigInvalid(f"org {org} extra delay may go negative")


@dataclass(frozen=True)
class CommitLag:
    """Delay between a peer finishing validation and its replica showing the writes.

    lag = U[low_ms, high_ms] * db scale + U[0, speed_jitter] * validation time.
    The second term models per-peer speed differences, so slower validation
    also widens the window in which replicas disagree.
    """

    low_ms: float = 2.0
    high_ms: float = 20.0
    speed_jitter: float = 0.3

    def __post_init__(self):
        if self.low_ms < 0 or self.high_ms < self.low_ms or self.speed_jitter < 0:
            raise ConfigInvalid("commit lag needs 0 <= low <= high and speed_jitter >= 0")

    @classmethod
    def zero(cls) -> "CommitLag":
        return cls(0.0, 0.0, 0.0)

    @property
    def is_zero(self) -> bool:
        return self.high_ms == 0 and self.speed_jitter == 0


@dataclass(frozen=True)
class SimConfig:
    mode: str = "BASELINE"
    block_size: int = 100
    block_timeout_ms: float = 2000.0
    block_max_bytes: int = 512 * 1024
    num_orgs: int = 2
    peers_per_org: int = 2
    policy: str = "P0"
    db_kind: str = "COUCHDB"
    net: NetworkModel = field(default_factory=NetworkModel)
    commit_lag: CommitLag = field(default_factory=CommitLag)
    ramdisk: bool = False
    ramdisk_factor: float = 0.5
    seed: int = 0
    # endorsement: "minimal" asks a random minimal satisfying set of orgs,
    # "policy_orgs" asks every org named in the policy
    endorsement_fanout: str = "minimal"
    endorse_overhead_ms: float = 1.0
    # peer-side validation
    block_overhead_ms: float = 90.0
    validation_workers: int = 4
    vscc: VsccCost = field(default_factory=VsccCost)
    # orderer
    orderer_block_ms: float = 2.0
    stream_overhead_ms: float = 5.0
    # Fabric++ reordering cost: c_graph * n^2 * mean_keys + c_sort * (n + e)
    c_graph_ms: float = 2.5e-5
    c_sort_ms: float = 1e-3
    # FabricSharp
    sharp_window_blocks: int = 16
    snapshot_staleness_ms: float = 0.0
    sizes: SizeModel = field(default_factory=SizeModel)
    # run validation on every peer replica and assert identical statuses
    validate_all_peers: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigInvalid(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.db_kind not in DB_KINDS:
            raise ConfigInvalid(f"db_kind must be one of {DB_KINDS}, got {self.db_kind!r}")
        if self.block_size < 1:
            raise ConfigInvalid("block_size must be >= 1")
        if self.block_timeout_ms <= 0 or self.block_max_bytes <= 0:
            raise ConfigInvalid("block timeout and max bytes must be positive")
        if self.num_orgs < 1 or self.peers_per_org < 1:
            raise ConfigInvalid("need at least one org and one peer per org")
        if self.endorsement_fanout not in ("minimal", "policy_orgs"):
            raise ConfigInvalid(f"unknown endorsement_fanout {self.endorsement_fanout!r}")
        if self.validation_workers < 1:
            raise ConfigInvalid("validation_workers must be >= 1")
        if not 0 < self.ramdisk_factor <= 1:
            raise ConfigInvalid("ramdisk_factor must be in (0, 1]")
        if self.stream_overhead_ms <= 0:
            raise ConfigInvalid("stream_overhead_ms must be positive")

    @property
    def effective_block_size(self) -> int:
        return 1 if self.mode == "STREAMCHAIN" else self.block_size

    @property
    def db(self) -> DbCostModel:
        return DB_COSTS[self.db_kind]

    @property
    def storage_factor(self) -> float:
        return self.ramdisk_factor if self.ramdisk else 1.0

    def stream_capacity_tps(self) -> float:
        return 1000.0 / self.stream_overhead_ms

    def replace(self, **changes: Any) -> "SimConfig":
        return dataclasses.replace(self, **changes)

    # --- (de)serialisation -------------------------------------------------

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["net"]["org_extra"] = {str(k): v for k, v in d["net"]["org_extra"].items()}
        return d

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "SimConfig":
        data = dict(data)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigInvalid(f"unknown config fields: {sorted(unknown)}")
        try:
            if "net" in data and isinstance(data["net"], dict):
                net = dict(data["net"])
                extra = {int(k): OrgDelay(**v) for k, v in net.pop("org_extra", {}).items()}
                data["net"] = NetworkModel(org_extra=extra, **net)
            if "commit_lag" in data and isinstance(data["commit_lag"], dict):
                data["commit_lag"] = CommitLag(**data["commit_lag"])
            if "vscc" in data and isinstance(data["vscc"], dict):
                data["vscc"] = VsccCost(**data["vscc"])
            if "sizes" in data and isinstance(data["sizes"], dict):
                data["sizes"] = SizeModel(**data["sizes"])
            return cls(**data)
        except TypeError as exc:
            raise ConfigInvalid(str(exc)) from None

    @classmethod
    def load(cls, path) -> "SimConfig":
        with open(path, encoding="utf-8") as fh:
            try:
                return cls.from_dict(json.load(fh))
            except json.JSONDecodeError as exc:
                raise ConfigInvalid(f"{path}: {exc}") from None


def set_field(config_dict: dict[str, Any], dotted: str, raw: str) -> None:
    """Apply a ``key=value`` override (dotted keys reach nested objects)."""
    try:
        value: Any = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = dotted.split(".")
    target = config_dict
    for part in parts[:-1]:
        target = target.setdefault(part, {})
    target[parts[-1]] = value


def net_delay(net: NetworkModel, base_ms: float, org: Optional[int], rng) -> float:
    if org is None:
        return base_ms
    extra = net.org_extra.get(org)
    if extra is None:
        return base_ms
    jitter = rng.uniform(-extra.jitter_ms, extra.jitter_ms) if extra.jitter_ms else 0.0
    return base_ms + extra.mean_ms + jitter
