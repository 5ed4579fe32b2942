"""Declarative scenario input: roster, latency, script and chain settings."""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from ..crypto import KeyPair, keygen_from_label
from ..ledger import (
    ChainConfig,
    ConfigError,
    ConsensusMode,
    Issuance,
    PermissionMode,
)


class ScenarioError(ValueError):
    pass


class Role(str, enum.Enum):
    MINER = "miner"
    CLEARING = "clearing"
    MATCHER = "matcher"
    TRADER = "trader"
    AUDITOR = "auditor"
    ADVERSARY = "adversary"


class Kind(str, enum.Enum):
    NETWORK = "network"
    DOUBLE_SPEND = "double_spend"
    AUDIT = "audit"


class Strategy(str, enum.Enum):
    NO_REWORK = "NoRework"
    REWORK_NO_POW = "ReworkNoPoW"
    FULL_REMINE = "FullRemine"
    RR_WITHOUT_KEYS = "RRWithoutKeys"


# fields the roster fills in; a scenario may not set them directly
_DERIVED_FIELDS = {"write_set", "stakes", "genesis_issuances", "chain_id"}


@dataclass(frozen=True)
class NodeSpec:
    id: str
    role: Role
    stake: int = 0
    hash_power: float = 0.0


@dataclass(frozen=True)
class Latency:
    min_ms: float = 0.0
    max_ms: float = 0.0


@dataclass(frozen=True)
class AttackSpec:
    q: tuple[float, ...]
    z: tuple[int, ...]
    runs: int
    sampler: str = "lhs"
    engine: str = "kernel"
    horizon: int | None = None


@dataclass(frozen=True)
class AuditSpec:
    chain_blocks: int
    tamper_height: int
    strategies: tuple[Strategy, ...]
    trials: int = 1


@dataclass(frozen=True)
class Scenario:
    name: str
    kind: Kind
    rng_seed: int
    nodes: tuple[NodeSpec, ...]
    config: Mapping[str, Any] = field(default_factory=dict)
    latency: Latency = Latency()
    blocks: int = 0
    days: int = 0
    day_slots: int = 10
    issuances: tuple[tuple[str, str, int], ...] = ()
    events: tuple[Mapping[str, Any], ...] = ()
    attack: AttackSpec | None = None
    audit: AuditSpec | None = None
    expect: Mapping[str, Any] = field(default_factory=dict)

    # -- roster --------------------------------------------------------------

    def node(self, node_id: str) -> NodeSpec:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise ScenarioError(f"unknown node {node_id!r}")

    def with_role(self, *roles: Role) -> list[NodeSpec]:
        return [n for n in self.nodes if n.role in roles]

    def key(self, node_id: str) -> KeyPair:
        return keygen_from_label("node", self.name, self.rng_seed, node_id)

    @property
    def adversary(self) -> NodeSpec | None:
        found = self.with_role(Role.ADVERSARY)
        return found[0] if found else None

    def writers(self, consensus: ConsensusMode | None = None) -> list[NodeSpec]:
        consensus = consensus or ConsensusMode(self.config.get("consensus_mode", "pow"))
        role = Role.CLEARING if consensus == ConsensusMode.ROUND_ROBIN else Role.MINER
        return self.with_role(role)

    def chain_config(self, **overrides: Any) -> ChainConfig:
        """Genesis ruleset with the roster's keys, stakes and issuances filled in."""
        base = {**self.config, **overrides}
        consensus = ConsensusMode(base.get("consensus_mode", "pow"))
        permission = PermissionMode(base.get("permission_mode", "public"))
        d = dict(base)
        d["chain_id"] = self.name
        if consensus == ConsensusMode.ROUND_ROBIN or permission != PermissionMode.PUBLIC:
            d["write_set"] = [self.key(n.id).public_key.hex() for n in self.writers(consensus)]
        d["stakes"] = {
            self.key(n.id).address.hex(): n.stake for n in self.nodes if n.stake > 0
        }
        d["genesis_issuances"] = [
            {"to": self.key(who).address.hex(), "asset": asset, "amount": amount}
            for who, asset, amount in self.issuances
        ]
        try:
            return ChainConfig.from_dict(d)
        except ConfigError as exc:
            raise ScenarioError(f"chain config: {exc}") from None


def _req(d: Mapping[str, Any], key: str, where: str) -> Any:
    if key not in d:
        raise ScenarioError(f"{where}: missing field {key!r}")
    return d[key]


def _int(value: Any, what: str, lo: int | None = None, hi: int | None = None) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ScenarioError(f"{what} must be an integer")
    if (lo is not None and value < lo) or (hi is not None and value > hi):
        raise ScenarioError(f"{what} out of range: {value}")
    return value


def _num(value: Any, what: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise ScenarioError(f"{what} must be a finite number")
    return float(value)


def _as_tuple(value: Any) -> tuple:
    return tuple(value) if isinstance(value, (list, tuple)) else (value,)


def parse_scenario(d: Mapping[str, Any]) -> Scenario:
    if not isinstance(d, Mapping):
        raise ScenarioError("scenario must be a JSON object")
    name = _req(d, "name", "scenario")
    if not isinstance(name, str) or not name:
        raise ScenarioError("name must be a non-empty string")
    try:
        kind = Kind(_req(d, "kind", "scenario"))
    except ValueError:
        raise ScenarioError(f"unknown scenario kind {d.get('kind')!r}") from None
    seed = _int(_req(d, "rng_seed", "scenario"), "rng_seed", 0, (1 << 64) - 1)

    nodes = []
    raw_nodes = _req(d, "nodes", "scenario")
    if not isinstance(raw_nodes, list) or not raw_nodes:
        raise ScenarioError("nodes must be a non-empty list")
    for i, n in enumerate(raw_nodes):
        where = f"nodes[{i}]"
        if not isinstance(n, Mapping):
            raise ScenarioError(f"{where} must be an object")
        try:
            role = Role(_req(n, "role", where))
        except ValueError:
            raise ScenarioError(f"{where}: unknown role {n.get('role')!r}") from None
        hp = _num(n.get("hash_power", 0.0), f"{where}.hash_power")
        if hp < 0:
            raise ScenarioError(f"{where}.hash_power must be non-negative")
        nodes.append(
            NodeSpec(str(_req(n, "id", where)), role, _int(n.get("stake", 0), f"{where}.stake", 0), hp)
        )
    ids = [n.id for n in nodes]
    if len(set(ids)) != len(ids):
        raise ScenarioError("node ids must be unique")

    config = d.get("config", {})
    if not isinstance(config, Mapping):
        raise ScenarioError("config must be an object")
    bad = _DERIVED_FIELDS & set(config)
    if bad:
        raise ScenarioError(f"config fields {sorted(bad)} are derived from the roster")

    lat = d.get("latency", {})
    latency = Latency(_num(lat.get("min_ms", 0), "latency.min_ms"), _num(lat.get("max_ms", 0), "latency.max_ms"))
    if not 0 <= latency.min_ms <= latency.max_ms:
        raise ScenarioError("latency needs 0 <= min_ms <= max_ms")

    duration = d.get("duration", {})
    blocks = _int(duration.get("blocks", 0), "duration.blocks", 0)
    days = _int(duration.get("days", 0), "duration.days", 0)

    issuances = []
    for i, iss in enumerate(d.get("issuances", [])):
        who = str(_req(iss, "to", f"issuances[{i}]"))
        if who not in ids:
            raise ScenarioError(f"issuances[{i}] credits unknown node {who!r}")
        issuances.append(
            (who, str(_req(iss, "asset", f"issuances[{i}]")), _int(_req(iss, "amount", f"issuances[{i}]"), "amount", 1))
        )

    events = d.get("events", [])
    if not isinstance(events, list) or not all(isinstance(e, Mapping) for e in events):
        raise ScenarioError("events must be a list of objects")

    attack = _parse_attack(d["attack"], nodes) if "attack" in d else None
    audit = _parse_audit(d["audit"]) if "audit" in d else None

    s = Scenario(
        name=name,
        kind=kind,
        rng_seed=seed,
        nodes=tuple(nodes),
        config=dict(config),
        latency=latency,
        blocks=blocks,
        days=days,
        day_slots=_int(d.get("day_slots", 10), "day_slots", 1),
        issuances=tuple(issuances),
        events=tuple(dict(e) for e in events),
        attack=attack,
        audit=audit,
        expect=dict(d.get("expect", {})),
    )
    _check_consistency(s)
    return s


def _parse_attack(a: Mapping[str, Any], nodes: list[NodeSpec]) -> AttackSpec:
    if not isinstance(a, Mapping):
        raise ScenarioError("attack must be an object")
    if "q" in a:
        qs = tuple(_num(q, "attack.q") for q in _as_tuple(a["q"]))
    else:
        adv = [n for n in nodes if n.role == Role.ADVERSARY]
        qs = (adv[0].hash_power,) if adv else ()
    for q in qs:
        if not 0 <= q < 1:
            raise ScenarioError(f"attacker share q must satisfy 0 <= q < 1, got {q}")
    zs = tuple(_int(z, "attack.z", 0) for z in _as_tuple(_req(a, "z", "attack")))
    runs = _int(_req(a, "runs", "attack"), "attack.runs", 1)
    sampler = a.get("sampler", "lhs")
    if sampler not in ("lhs", "independent"):
        raise ScenarioError(f"attack.sampler must be 'lhs' or 'independent', got {sampler!r}")
    engine = a.get("engine", "kernel")
    if engine not in ("kernel", "event"):
        raise ScenarioError(f"attack.engine must be 'kernel' or 'event', got {engine!r}")
    horizon = a.get("horizon")
    if horizon is not None:
        horizon = _int(horizon, "attack.horizon", 1)
    return AttackSpec(qs, zs, runs, sampler, engine, horizon)


def _parse_audit(a: Mapping[str, Any]) -> AuditSpec:
    if not isinstance(a, Mapping):
        raise ScenarioError("audit must be an object")
    blocks = _int(_req(a, "chain_blocks", "audit"), "audit.chain_blocks", 1)
    h = _int(_req(a, "tamper_height", "audit"), "audit.tamper_height", 1, blocks)
    try:
        strategies = tuple(Strategy(x) for x in _as_tuple(a.get("strategies", [s.value for s in Strategy])))
    except ValueError as exc:
        raise ScenarioError(f"audit.strategies: {exc}") from None
    return AuditSpec(blocks, h, strategies, _int(a.get("trials", 1), "audit.trials", 1))


def _check_consistency(s: Scenario) -> None:
    consensus = ConsensusMode(s.config.get("consensus_mode", "pow"))
    adversaries = s.with_role(Role.ADVERSARY)
    if s.kind in (Kind.DOUBLE_SPEND, Kind.AUDIT) and len(adversaries) != 1:
        raise ScenarioError("attack scenarios need exactly one adversary")
    if s.kind == Kind.DOUBLE_SPEND and s.attack is None:
        raise ScenarioError("double_spend scenario needs an attack section")
    if s.kind == Kind.DOUBLE_SPEND and not s.attack.q:
        raise ScenarioError("attacker share q missing")
    if s.kind == Kind.AUDIT and s.audit is None:
        raise ScenarioError("audit scenario needs an audit section")
    if s.kind == Kind.NETWORK:
        if consensus == ConsensusMode.POW:
            power = [n.hash_power for n in s.nodes if n.role in (Role.MINER, Role.ADVERSARY)]
            if not power or not math.isclose(sum(power), 1.0, abs_tol=1e-9):
                raise ScenarioError("miner hash-power fractions must sum to 1")
            if s.blocks < 1:
                raise ScenarioError("PoW network scenario needs duration.blocks >= 1")
            if any(e.get("type") in ("order", "random_orders") for e in s.events):
                raise ScenarioError("order flow requires a round_robin clearing chain")
        else:
            if not s.with_role(Role.CLEARING):
                raise ScenarioError("round_robin scenario needs clearing nodes")
            if s.blocks < 1 and s.days < 1:
                raise ScenarioError("duration needs blocks or days")
            slot_ms = 1000.0 * float(s.config.get("target_interval", 600.0))
            if s.latency.max_ms >= slot_ms:
                raise ScenarioError("latency must stay below the round-robin slot length")
            if any(e.get("type") in ("order", "random_orders") for e in s.events):
                if not any(n.stake > 0 for n in s.with_role(Role.MATCHER)):
                    raise ScenarioError("order flow needs a staked matcher")
    # build the ruleset once so config errors surface at load time
    s.chain_config()


def load_scenario(path: str | Path) -> Scenario:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise ScenarioError(f"cannot read scenario: {exc}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"scenario is not valid JSON: {exc}") from None
    return parse_scenario(data)
