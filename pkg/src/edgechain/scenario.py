"""Scenario files: strict parsing, defaults, and the built-in experiments.

A scenario is a JSON object with the sections consensus, contract (including
quota), gas_schedule, nodes, allowlist, latency, run, migrations,
permission_updates, and partitions.  Parsing is strict: unknown keys are
errors, so a typo cannot silently change the economics of a run.

Node addresses are derived from each node's key seed (default: the node
name), so allowlist entries and report targets refer to node names; raw
40-hex-digit addresses are also accepted for externally created accounts.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Optional

from .consensus import MODE_POS, MODE_POW, ConsensusConfig
from .contract import GasSchedule, QuotaConfig

KIND_ADMIN = "admin"
KIND_EDGE_SERVER = "edge_server"
KIND_CUSTOMER = "customer"
KIND_UPDATE_REPOSITORY = "update_repository"

NODE_KINDS = (KIND_ADMIN, KIND_EDGE_SERVER, KIND_CUSTOMER, KIND_UPDATE_REPOSITORY)


class InvalidScenarioError(ValueError):
    """Scenario file failed structural validation; message names the rule."""


@dataclass(frozen=True)
class NodeSpec:
    name: str
    kind: str
    key_seed: str
    balance: int = 0
    stake: int = 0
    submit_period: int = 10
    payload_bytes: int = 4
    max_submits: int = 0  # 0 = unlimited
    firmware: int = 1
    mining: bool = True
    report_target: Optional[str] = None
    report_every: int = 0

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "kind": self.kind,
            "key_seed": self.key_seed,
            "balance": self.balance,
            "stake": self.stake,
            "submit_period": self.submit_period,
            "payload_bytes": self.payload_bytes,
            "max_submits": self.max_submits,
            "firmware": self.firmware,
            "mining": self.mining,
            "report_target": self.report_target,
            "report_every": self.report_every,
        }


@dataclass(frozen=True)
class ContractParams:
    version: int = 1
    update_url: str = "http://updates.local/fw"
    block_interval: int = 10
    epoch_length: int = 20
    epoch_mint: int = 0
    quota: QuotaConfig = field(default_factory=QuotaConfig)

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "update_url": self.update_url,
            "block_interval": self.block_interval,
            "epoch_length": self.epoch_length,
            "epoch_mint": self.epoch_mint,
            "quota": self.quota.to_dict(),
        }


@dataclass(frozen=True)
class RunConfig:
    max_blocks: int = 50
    seed: int = 0
    max_block_txs: int = 100
    tx_gas_limit: int = 100
    tx_gas_price: int = 1

    def to_dict(self) -> dict:
        return {
            "max_blocks": self.max_blocks,
            "seed": self.seed,
            "max_block_txs": self.max_block_txs,
            "tx_gas_limit": self.tx_gas_limit,
            "tx_gas_price": self.tx_gas_price,
        }


@dataclass(frozen=True)
class MigrationStep:
    tick: int
    version: int
    update_url: Optional[str] = None     # None: keep the contract section's URL
    block_interval: Optional[int] = None

    def to_dict(self) -> dict:
        return {
            "tick": self.tick,
            "version": self.version,
            "update_url": self.update_url,
            "block_interval": self.block_interval,
        }


@dataclass(frozen=True)
class PermissionStep:
    tick: int
    target: str
    allow: bool

    def to_dict(self) -> dict:
        return {"tick": self.tick, "target": self.target, "allow": self.allow}


@dataclass(frozen=True)
class PartitionWindow:
    start: int
    end: int
    groups: tuple[tuple[str, ...], ...]

    def to_dict(self) -> dict:
        return {"start": self.start, "end": self.end, "groups": [list(g) for g in self.groups]}


@dataclass(frozen=True)
class Scenario:
    consensus: ConsensusConfig = field(default_factory=ConsensusConfig)
    contract: ContractParams = field(default_factory=ContractParams)
    gas_schedule: GasSchedule = field(default_factory=GasSchedule)
    nodes: tuple[NodeSpec, ...] = ()
    allowlist: Any = "all"  # "all" or tuple of node names / hex addresses
    latency_default: int = 1
    latency_overrides: tuple[tuple[str, str, int], ...] = ()
    run: RunConfig = field(default_factory=RunConfig)
    migrations: tuple[MigrationStep, ...] = ()
    permission_updates: tuple[PermissionStep, ...] = ()
    partitions: tuple[PartitionWindow, ...] = ()

    def to_dict(self) -> dict:
        return {
            "consensus": {
                "mode": self.consensus.mode,
                "difficulty": self.consensus.difficulty,
                "block_reward": self.consensus.block_reward,
                "target_block_interval": self.consensus.target_block_interval,
            },
            "contract": self.contract.to_dict(),
            "gas_schedule": self.gas_schedule.to_dict(),
            "nodes": [n.to_dict() for n in self.nodes],
            "allowlist": "all" if self.allowlist == "all" else list(self.allowlist),
            "latency": {
                "default": self.latency_default,
                "overrides": {f"{a}->{b}": t for a, b, t in self.latency_overrides},
            },
            "run": self.run.to_dict(),
            "migrations": [m.to_dict() for m in self.migrations],
            "permission_updates": [p.to_dict() for p in self.permission_updates],
            "partitions": [p.to_dict() for p in self.partitions],
        }


# ---------------------------------------------------------------------------
# strict parsing helpers

def _require_keys(section: dict, allowed: set[str], where: str) -> None:
    unknown = set(section) - allowed
    if unknown:
        raise InvalidScenarioError(f"unknown key(s) in {where}: {', '.join(sorted(unknown))}")


def _get_int(section: dict, key: str, default: int, where: str, minimum: int = 0) -> int:
    value = section.get(key, default)
    if not isinstance(value, int) or isinstance(value, bool):
        raise InvalidScenarioError(f"{where}.{key} must be an integer")
    if value < minimum:
        raise InvalidScenarioError(f"{where}.{key} must be >= {minimum}")
    return value


def _parse_consensus(section: dict) -> ConsensusConfig:
    _require_keys(section, {"mode", "difficulty", "block_reward", "target_block_interval"}, "consensus")
    mode = section.get("mode", MODE_POW)
    if mode not in (MODE_POW, MODE_POS):
        raise InvalidScenarioError(f"consensus.mode must be '{MODE_POW}' or '{MODE_POS}'")
    return ConsensusConfig(
        mode=mode,
        difficulty=_get_int(section, "difficulty", 16, "consensus", minimum=1),
        block_reward=_get_int(section, "block_reward", 10, "consensus"),
        target_block_interval=_get_int(section, "target_block_interval", 10, "consensus", minimum=1),
    )


def _parse_quota(section: dict) -> QuotaConfig:
    _require_keys(
        section,
        {"window_blocks", "max_share_percent", "min_active_senders", "penalty_rate", "reporter_share_percent"},
        "contract.quota",
    )
    quota = QuotaConfig(
        window_blocks=_get_int(section, "window_blocks", 10, "contract.quota", minimum=1),
        max_share_percent=_get_int(section, "max_share_percent", 40, "contract.quota", minimum=1),
        min_active_senders=_get_int(section, "min_active_senders", 2, "contract.quota"),
        penalty_rate=_get_int(section, "penalty_rate", 42, "contract.quota"),
        reporter_share_percent=_get_int(section, "reporter_share_percent", 50, "contract.quota"),
    )
    if quota.max_share_percent > 100:
        raise InvalidScenarioError("contract.quota.max_share_percent must be <= 100")
    if quota.reporter_share_percent > 100:
        raise InvalidScenarioError("contract.quota.reporter_share_percent must be <= 100")
    return quota


def _parse_contract(section: dict) -> ContractParams:
    _require_keys(
        section,
        {"version", "update_url", "block_interval", "epoch_length", "epoch_mint", "quota"},
        "contract",
    )
    url = section.get("update_url", ContractParams.update_url)
    if not isinstance(url, str):
        raise InvalidScenarioError("contract.update_url must be a string")
    return ContractParams(
        version=_get_int(section, "version", 1, "contract"),
        update_url=url,
        block_interval=_get_int(section, "block_interval", 10, "contract", minimum=1),
        epoch_length=_get_int(section, "epoch_length", 20, "contract", minimum=1),
        epoch_mint=_get_int(section, "epoch_mint", 0, "contract"),
        quota=_parse_quota(section.get("quota", {})),
    )


def _parse_gas_schedule(section: dict) -> GasSchedule:
    defaults = GasSchedule().to_dict()
    _require_keys(section, set(defaults), "gas_schedule")
    merged = {k: _get_int(section, k, defaults[k], "gas_schedule") for k in defaults}
    if merged["base_tx"] < 1:
        raise InvalidScenarioError("gas_schedule.base_tx must be >= 1")
    return GasSchedule(**merged)


def _parse_node(section: dict, index: int) -> NodeSpec:
    where = f"nodes[{index}]"
    _require_keys(
        section,
        {
            "name", "kind", "key_seed", "balance", "stake", "submit_period",
            "payload_bytes", "max_submits", "firmware", "mining",
            "report_target", "report_every",
        },
        where,
    )
    name = section.get("name")
    if not isinstance(name, str) or not name:
        raise InvalidScenarioError(f"{where}.name must be a non-empty string")
    kind = section.get("kind")
    if kind not in NODE_KINDS:
        raise InvalidScenarioError(f"{where}.kind must be one of {', '.join(NODE_KINDS)}")
    seed = section.get("key_seed", name)
    if not isinstance(seed, str) or not seed:
        raise InvalidScenarioError(f"{where}.key_seed must be a non-empty string")
    target = section.get("report_target")
    if target is not None and not isinstance(target, str):
        raise InvalidScenarioError(f"{where}.report_target must be a node name")
    mining = section.get("mining", True)
    if not isinstance(mining, bool):
        raise InvalidScenarioError(f"{where}.mining must be a boolean")
    return NodeSpec(
        name=name,
        kind=kind,
        key_seed=seed,
        balance=_get_int(section, "balance", 0, where),
        stake=_get_int(section, "stake", 0, where),
        submit_period=_get_int(section, "submit_period", 10, where, minimum=1),
        payload_bytes=_get_int(section, "payload_bytes", 4, where),
        max_submits=_get_int(section, "max_submits", 0, where),
        firmware=_get_int(section, "firmware", 1, where),
        mining=mining,
        report_target=target,
        report_every=_get_int(section, "report_every", 0, where),
    )


def _parse_run(section: dict) -> RunConfig:
    _require_keys(section, {"max_blocks", "seed", "max_block_txs", "tx_gas_limit", "tx_gas_price"}, "run")
    return RunConfig(
        max_blocks=_get_int(section, "max_blocks", 50, "run", minimum=0),
        seed=_get_int(section, "seed", 0, "run"),
        max_block_txs=_get_int(section, "max_block_txs", 100, "run", minimum=1),
        tx_gas_limit=_get_int(section, "tx_gas_limit", 100, "run", minimum=1),
        tx_gas_price=_get_int(section, "tx_gas_price", 1, "run", minimum=1),
    )


def _parse_latency(section: dict) -> tuple[int, tuple[tuple[str, str, int], ...]]:
    _require_keys(section, {"default", "overrides"}, "latency")
    default = _get_int(section, "default", 1, "latency")
    overrides = []
    for key, value in section.get("overrides", {}).items():
        if "->" not in key:
            raise InvalidScenarioError(f"latency override key must look like 'A->B': {key}")
        a, b = key.split("->", 1)
        if not isinstance(value, int) or isinstance(value, bool) or value < 0:
            raise InvalidScenarioError(f"latency override {key} must be a non-negative integer")
        overrides.append((a, b, value))
    return default, tuple(sorted(overrides))


def _parse_migration(section: dict, index: int) -> MigrationStep:
    where = f"migrations[{index}]"
    _require_keys(section, {"tick", "version", "update_url", "block_interval"}, where)
    url = section.get("update_url")
    if url is not None and not isinstance(url, str):
        raise InvalidScenarioError(f"{where}.update_url must be a string")
    interval = section.get("block_interval")
    if interval is not None and (not isinstance(interval, int) or interval < 1):
        raise InvalidScenarioError(f"{where}.block_interval must be a positive integer")
    return MigrationStep(
        tick=_get_int(section, "tick", 0, where),
        version=_get_int(section, "version", 0, where),
        update_url=url,
        block_interval=interval,
    )


def _parse_permission(section: dict, index: int) -> PermissionStep:
    where = f"permission_updates[{index}]"
    _require_keys(section, {"tick", "target", "allow"}, where)
    target = section.get("target")
    if not isinstance(target, str):
        raise InvalidScenarioError(f"{where}.target must be a node name or hex address")
    allow = section.get("allow")
    if not isinstance(allow, bool):
        raise InvalidScenarioError(f"{where}.allow must be a boolean")
    return PermissionStep(tick=_get_int(section, "tick", 0, where), target=target, allow=allow)


def _parse_partition(section: dict, index: int, names: set[str]) -> PartitionWindow:
    where = f"partitions[{index}]"
    _require_keys(section, {"start", "end", "groups"}, where)
    start = _get_int(section, "start", 0, where)
    end = _get_int(section, "end", 0, where)
    if end < start:
        raise InvalidScenarioError(f"{where}: end must be >= start")
    groups = section.get("groups")
    if not isinstance(groups, list) or len(groups) < 2:
        raise InvalidScenarioError(f"{where}.groups must list at least two groups")
    seen: set[str] = set()
    parsed = []
    for group in groups:
        if not isinstance(group, list) or not group:
            raise InvalidScenarioError(f"{where}.groups entries must be non-empty lists")
        for name in group:
            if name not in names:
                raise InvalidScenarioError(f"{where}: unknown node '{name}'")
            if name in seen:
                raise InvalidScenarioError(f"{where}: node '{name}' in more than one group")
            seen.add(name)
        parsed.append(tuple(group))
    return PartitionWindow(start=start, end=end, groups=tuple(parsed))


def parse_scenario(data: Any) -> Scenario:
    if not isinstance(data, dict):
        raise InvalidScenarioError("scenario must be a JSON object")
    _require_keys(
        data,
        {
            "consensus", "contract", "gas_schedule", "nodes", "allowlist",
            "latency", "run", "migrations", "permission_updates", "partitions",
        },
        "scenario",
    )
    nodes = tuple(_parse_node(n, i) for i, n in enumerate(data.get("nodes", [])))
    if not nodes:
        raise InvalidScenarioError("scenario must define at least one node")
    names = [n.name for n in nodes]
    if len(set(names)) != len(names):
        raise InvalidScenarioError("node names must be unique")
    seeds = [n.key_seed for n in nodes]
    if len(set(seeds)) != len(seeds):
        raise InvalidScenarioError("node key seeds must be unique (duplicate address)")
    admins = [n for n in nodes if n.kind == KIND_ADMIN]
    if len(admins) != 1:
        raise InvalidScenarioError("scenario must define exactly one admin node")

    allowlist = data.get("allowlist", "all")
    if allowlist != "all":
        if not isinstance(allowlist, list) or not all(isinstance(a, str) for a in allowlist):
            raise InvalidScenarioError("allowlist must be 'all' or a list of names/addresses")
        known = set(names)
        for entry in allowlist:
            if entry not in known and not _is_hex_address(entry):
                raise InvalidScenarioError(f"allowlist entry '{entry}' is neither a node nor a hex address")
        allowlist = tuple(allowlist)

    latency_default, latency_overrides = _parse_latency(data.get("latency", {}))
    for a, b, _ in latency_overrides:
        if a not in set(names) or b not in set(names):
            raise InvalidScenarioError(f"latency override references unknown node: {a}->{b}")

    scenario = Scenario(
        consensus=_parse_consensus(data.get("consensus", {})),
        contract=_parse_contract(data.get("contract", {})),
        gas_schedule=_parse_gas_schedule(data.get("gas_schedule", {})),
        nodes=nodes,
        allowlist=allowlist,
        latency_default=latency_default,
        latency_overrides=latency_overrides,
        run=_parse_run(data.get("run", {})),
        migrations=tuple(_parse_migration(m, i) for i, m in enumerate(data.get("migrations", []))),
        permission_updates=tuple(
            _parse_permission(p, i) for i, p in enumerate(data.get("permission_updates", []))
        ),
        partitions=tuple(
            _parse_partition(p, i, set(names)) for i, p in enumerate(data.get("partitions", []))
        ),
    )

    mining_servers = [n for n in nodes if n.kind == KIND_EDGE_SERVER and n.mining]
    if any(n.kind == KIND_CUSTOMER for n in nodes) and not mining_servers:
        raise InvalidScenarioError("customers need at least one mining edge server")
    for step in scenario.permission_updates:
        if step.target not in set(names) and not _is_hex_address(step.target):
            raise InvalidScenarioError(f"permission update target '{step.target}' unknown")
    for node in nodes:
        if node.report_target is not None and node.report_target not in set(names):
            raise InvalidScenarioError(f"report target '{node.report_target}' unknown")
    return scenario


def _is_hex_address(text: str) -> bool:
    if len(text) != 40:
        return False
    try:
        bytes.fromhex(text)
        return True
    except ValueError:
        return False


def load_scenario(text: str) -> Scenario:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InvalidScenarioError(f"scenario is not valid JSON: {exc}") from exc
    return parse_scenario(data)


# ---------------------------------------------------------------------------
# built-in scenarios

def _fig3_dict() -> dict:
    """Single customer funding its submits, recovering at each distribution."""
    return {
        "consensus": {"mode": "pow", "difficulty": 16, "block_reward": 10, "target_block_interval": 10},
        "contract": {"version": 1, "epoch_length": 20, "epoch_mint": 300, "block_interval": 10},
        "nodes": [
            {"name": "admin", "kind": "admin", "balance": 10_000},
            {"name": "edge1", "kind": "edge_server", "balance": 1_000},
            {"name": "sensor", "kind": "customer", "balance": 5_000,
             "submit_period": 10, "payload_bytes": 4, "max_submits": 50},
        ],
        "run": {"max_blocks": 60, "seed": 42},
    }


def _fig4_dict() -> dict:
    """Over-quota consumer penalized on reports; reporter reimbursed at epochs."""
    return {
        "consensus": {"mode": "pow", "difficulty": 16, "block_reward": 10, "target_block_interval": 10},
        "contract": {"version": 1, "epoch_length": 20, "epoch_mint": 100, "block_interval": 10},
        "nodes": [
            {"name": "admin", "kind": "admin", "balance": 10_000},
            {"name": "edge1", "kind": "edge_server", "balance": 2_000},
            {"name": "greedy", "kind": "customer", "balance": 100_000,
             "submit_period": 5, "payload_bytes": 4},
            {"name": "watcher", "kind": "customer", "balance": 20_000,
             "submit_period": 20, "payload_bytes": 4,
             "report_target": "greedy", "report_every": 100},
        ],
        "run": {"max_blocks": 60, "seed": 7},
    }


BUILTIN_SCENARIOS = {
    "fig3": _fig3_dict,
    "fig4": _fig4_dict,
}


def builtin_scenario(name: str) -> Scenario:
    return parse_scenario(BUILTIN_SCENARIOS[name]())
