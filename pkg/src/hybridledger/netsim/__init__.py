"""Deterministic discrete-event network simulation and adversary scenarios.

:func:`run_simulation` is the entry point; a report depends only on the
scenario (including its seed), so two runs give byte-identical JSON.
"""

from __future__ import annotations

import random

from .attacks import (
    AuditBench,
    AuditFinding,
    DoubleSpendResult,
    RaceWorld,
    default_horizon,
    event_race,
    race_uniforms,
    run_audit_forgery,
    run_double_spend_attack,
)
from .events import EventKind, EventQueue, SimEvent
from .network import NetworkSim, SimNode
from .report import SimReport
from .scenario import (
    AttackSpec,
    AuditSpec,
    Kind,
    Latency,
    NodeSpec,
    Role,
    Scenario,
    ScenarioError,
    Strategy,
    load_scenario,
    parse_scenario,
)


def _base(s: Scenario) -> dict:
    return {"scenario": s.name, "kind": s.kind.value, "rng_seed": s.rng_seed}


def _check_expectations(s: Scenario, data: dict) -> None:
    exp = s.expect
    v = data["violations"]
    if "attack_outcome" in exp and data["attack"]["outcome"] != exp["attack_outcome"]:
        v.append(f"attack outcome {data['attack']['outcome']}, expected {exp['attack_outcome']}")
    if exp.get("all_detected") and not all(f["detected"] for f in data.get("audit", {}).get("findings", [])):
        v.append("a forgery went undetected")


def _audit_report(s: Scenario) -> SimReport:
    bench = AuditBench(s)
    spec = s.audit
    rng = random.Random((s.rng_seed << 8) | 2)
    findings = []
    chains = {}
    for strategy in spec.strategies:
        for trial in range(spec.trials):
            h = spec.tamper_height if trial == 0 else rng.randint(1, spec.chain_blocks)
            finding = run_audit_forgery(s, h, strategy, bench=bench, seed=trial)
            findings.append(finding.to_dict())
            if trial == 0:
                _, honest, forged = bench.forge(strategy, h, random.Random((s.rng_seed << 16) ^ trial))
                chains[f"forged-{strategy.value}"] = forged
    violations = []
    for f in findings:
        if not f["detected"]:
            violations.append(f"{f['strategy']} at {f['tamper_height']} escaped both checks")
        if f["strategy"] == Strategy.FULL_REMINE.value and f["first_invalid"] is not None:
            violations.append(f"FullRemine at {f['tamper_height']} failed internal validation")
    for mode, (_, chain) in sorted(bench._chains.items()):
        chains[f"honest-{mode.value}"] = chain
    data = _base(s) | {
        "attack": {"outcome": "NotRun"},
        "audit": {"findings": findings, "all_detected": all(f["detected"] for f in findings)},
        "violations": violations,
    }
    return SimReport(data, chains)


def run_simulation(s: Scenario) -> SimReport:
    """Drive the scenario to completion and collect its report."""
    if s.kind == Kind.DOUBLE_SPEND:
        result = run_double_spend_attack(s)
        violations = [
            f"attacker with q=0 succeeded at z={c.z}" for c in result.cells if c.q == 0 and c.successes
        ]
        data = _base(s) | {"attack": result.to_dict(), "violations": violations}
        report = SimReport(data, attack_rows=result.csv_rows())
    elif s.kind == Kind.AUDIT:
        report = _audit_report(s)
    else:
        sim = NetworkSim(s)
        body = sim.run()
        data = _base(s) | body | {"attack": {"outcome": "NotRun"}, "violations": sim.violations}
        data["consensus"] = sim.cfg.consensus_mode.value
        report = SimReport(data, sim.chains())
    _check_expectations(s, report.data)
    return report


__all__ = [
    "AttackSpec",
    "AuditBench",
    "AuditFinding",
    "AuditSpec",
    "DoubleSpendResult",
    "EventKind",
    "EventQueue",
    "Kind",
    "Latency",
    "NetworkSim",
    "NodeSpec",
    "RaceWorld",
    "Role",
    "Scenario",
    "ScenarioError",
    "SimEvent",
    "SimNode",
    "SimReport",
    "Strategy",
    "default_horizon",
    "event_race",
    "load_scenario",
    "parse_scenario",
    "race_uniforms",
    "run_audit_forgery",
    "run_double_spend_attack",
    "run_simulation",
]
