"""Simulation output: a canonical JSON report plus optional chains and CSV rows."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

from ..ledger import Chain, write_chain


@dataclass
class SimReport:
    data: dict
    chains: dict[str, Chain] = field(default_factory=dict)
    attack_rows: list[dict] = field(default_factory=list)

    @property
    def violations(self) -> list[str]:
        return self.data.get("violations", [])

    @property
    def ok(self) -> bool:
        return not self.violations

    def to_json(self) -> str:
        return json.dumps(self.data, sort_keys=True, indent=2) + "\n"

    def to_bytes(self) -> bytes:
        return self.to_json().encode("utf-8")

    def attack_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=["q", "z", "run", "success", "orphaned"], lineterminator="\n")
        writer.writeheader()
        writer.writerows(self.attack_rows)
        return buf.getvalue()

    def summary(self) -> str:
        d = self.data
        lines = [f"scenario {d['scenario']} ({d['kind']}), seed {d['rng_seed']}"]
        if "nodes" in d:
            tips = {v["tip_hash"] for v in d["nodes"].values()}
            lines.append(
                f"height {d['final_height']}, {len(d['nodes'])} nodes, "
                f"tips agree: {'yes' if d['tips_agree'] else 'no'} ({len(tips)} distinct), "
                f"orphaned blocks: {d['orphaned_blocks']}"
            )
        st = d.get("settlement")
        if st:
            lines.append(
                f"orders {st['orders_submitted']} (rejected {sum(st['orders_rejected'].values())}), "
                f"trades {st['trades']}, transfers {st['transfers']}, "
                f"settlement failures {st['settlement_failures']}"
            )
        attack = d.get("attack", {})
        lines.append(f"attack outcome: {attack.get('outcome', 'NotRun')}")
        for cell in attack.get("grid", []):
            lines.append(f"  q={cell['q']:<5} z={cell['z']:<3} success {cell['frequency']:.4f} ({cell['successes']}/{cell['runs']})")
        for f in d.get("audit", {}).get("findings", []):
            where = f"first invalid {f['first_invalid']} ({f['reason']})" if f["first_invalid"] is not None else "internally valid"
            lines.append(
                f"  {f['strategy']} at {f['tamper_height']}: {where}, cross-check {f['cross_check']}, "
                f"caught by {', '.join(f['caught_by']) or 'nothing'}"
            )
        if self.violations:
            lines.append("violations:")
            lines.extend(f"  {v}" for v in self.violations)
        else:
            lines.append("no invariant violations")
        return "\n".join(lines) + "\n"

    def write(self, out_dir: str | Path) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"report": out / "report.json", "summary": out / "summary.txt"}
        paths["report"].write_text(self.to_json(), encoding="utf-8")
        paths["summary"].write_text(self.summary(), encoding="utf-8")
        if self.attack_rows:
            paths["csv"] = out / "attack_runs.csv"
            paths["csv"].write_text(self.attack_csv(), encoding="utf-8")
        if self.chains:
            chain_dir = out / "chains"
            chain_dir.mkdir(exist_ok=True)
            for name, chain in sorted(self.chains.items()):
                p = chain_dir / f"{name}.hldg"
                write_chain(chain, p)
                paths[f"chain:{name}"] = p
        return paths
