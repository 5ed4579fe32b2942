"""Adversary scenarios: private-chain double spending and forged audit copies."""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field, replace

import numpy as np

from .. import _kernels
from ..consensus import fork_choice, pow_mine, scheduled_node, sign_block
from ..crypto import KeyPair, hexd
from ..ledger import (
    Block,
    BlockSignature,
    Chain,
    ChainConfig,
    ConsensusMode,
    Transaction,
    new_chain,
    transfer_tx,
)
from ..producer import extend_chain, produce_block
from ..validation import ChainState, CrossCheck, cross_check, locate_tamper, validate_chain
from .events import EventKind, EventQueue
from .scenario import Role, Scenario, ScenarioError, Strategy

MIN_HORIZON = 200


def default_horizon(z_values) -> int:
    """Honest blocks the attacker may race before giving up; shared by a whole grid."""
    return max(10 * max(z_values, default=0), MIN_HORIZON)


def race_uniforms(seed: int, runs: int, horizon: int, sampler: str = "lhs") -> np.ndarray:
    """Uniform draws driving every race, shape (runs, horizon + 1).

    ``lhs`` stratifies each column across runs (Latin hypercube); ``independent``
    gives each run its own stream derived from ``(seed, run)``. Either way the
    same matrix is reused for every (q, z) cell, which pairs the cells by seed.
    """
    cols = horizon + 1
    if sampler == "lhs":
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x4C4853]))
        strata = rng.permuted(np.tile(np.arange(runs), (cols, 1)), axis=1).T
        u = (strata + rng.random((runs, cols))) / runs
    elif sampler == "independent":
        u = np.stack(
            [np.random.default_rng(np.random.SeedSequence([seed, r])).random(cols) for r in range(runs)]
        )
    else:
        raise ScenarioError(f"unknown sampler {sampler!r}")
    return np.minimum(u, np.nextafter(1.0, 0.0))


def attacker_blocks(u: float, q: float, cap: int) -> int:
    """Attacker blocks found before the next honest block: P(G >= k) = q**k."""
    if q <= 0.0:
        return 0
    x = math.log(1.0 - u) / math.log(q)
    return cap if x >= cap else int(x)


@dataclass(frozen=True)
class Cell:
    q: float
    z: int
    runs: int
    successes: int

    @property
    def frequency(self) -> float:
        return self.successes / self.runs

    def to_dict(self) -> dict:
        return {"q": self.q, "z": self.z, "runs": self.runs, "successes": self.successes, "frequency": self.frequency}


@dataclass
class DoubleSpendResult:
    cells: list[Cell]
    horizon: int
    sampler: str
    engine: str
    outcomes: dict[tuple[float, int], np.ndarray] = field(default_factory=dict, repr=False)

    def frequency(self, q: float, z: int) -> float:
        for c in self.cells:
            if c.q == q and c.z == z:
                return c.frequency
        raise KeyError((q, z))

    @property
    def outcome(self) -> str:
        return "Succeeded" if any(c.successes for c in self.cells) else "Failed"

    def csv_rows(self) -> list[dict]:
        rows = []
        for (q, z), out in sorted(self.outcomes.items()):
            for run, j in enumerate(out.tolist()):
                rows.append({"q": q, "z": z, "run": run, "success": int(j >= 0), "orphaned": max(j, 0)})
        return rows

    def to_dict(self) -> dict:
        return {
            "outcome": self.outcome,
            "engine": self.engine,
            "sampler": self.sampler,
            "horizon": self.horizon,
            "grid": [c.to_dict() for c in self.cells],
        }


class RaceWorld:
    """Real honest and private chains for the event engine, built once per scenario.

    Honest block 1 pays the retailer; private block 1 spends the same sequence
    number back to the attacker. Blocks are mined at the scenario's difficulty.
    """

    def __init__(self, s: Scenario) -> None:
        adv = s.adversary
        if adv is None:
            raise ScenarioError("double spend needs an adversary")
        retailers = [n for n in s.nodes if n.role != Role.ADVERSARY]
        if not retailers:
            raise ScenarioError("double spend needs an honest retailer node")
        self.attacker = s.key(adv.id)
        self.retailer = s.key(retailers[0].id)
        self.honest_miner = s.key(retailers[0].id)
        self.cfg = s.chain_config(consensus_mode="pow", permission_mode="public")
        genesis_chain = new_chain(self.cfg)
        cash = sum(i.amount for i in self.cfg.genesis_issuances if i.to == self.attacker.address and i.asset == "CASH")
        amount = max(1, cash)
        self.payment = transfer_tx(self.attacker, 0, self.retailer.address, "CASH", amount)
        self.double = transfer_tx(self.attacker, 0, self.attacker.address, "CASH", amount)
        self._honest = self._Builder(genesis_chain, self.honest_miner, self.payment)
        self._private = self._Builder(genesis_chain, self.attacker, self.double)

    class _Builder:
        def __init__(self, base: Chain, key: KeyPair, first_tx: Transaction) -> None:
            self.blocks = list(base.blocks)
            self.state = ChainState.from_chain(base)
            self.key = key
            self.first_tx = first_tx

        def prefix(self, height: int) -> Chain:
            while len(self.blocks) <= height:
                txs = (self.first_tx,) if self.state.height == 0 else ()
                ts = self.state.tip_timestamp + int(round(self.state.cfg.target_interval))
                block = produce_block(self.state, self.key, txs, timestamp=ts)
                self.state.apply(block)
                self.blocks.append(block)
            return Chain(tuple(self.blocks[: height + 1]))

    def honest(self, height: int) -> Chain:
        return self._honest.prefix(height)

    def private(self, height: int) -> Chain:
        return self._private.prefix(height)


def event_race(world: RaceWorld, u: np.ndarray, q: float, z: int, horizon: int) -> int:
    """One race on real chains; returns honest blocks orphaned, or -1 on failure.

    Consumes the same uniform row as the kernel. The attacker publishes once
    the retailer has released at ``z`` confirmations and the private chain is
    strictly ahead; the retailer then re-runs fork choice.
    """
    queue = EventQueue()
    honest = private = 0
    cap = horizon + 2
    column = 0

    def feed(j: int) -> None:
        for _ in range(attacker_blocks(float(u[j]), q, cap)):
            queue.push(queue.now, EventKind.ATTACK_STEP, j)
        if j < horizon:
            queue.push(queue.now + 1.0, EventKind.BLOCK_FOUND, j + 1)

    feed(column)
    while queue:
        ev = queue.pop()
        if ev.kind == EventKind.ATTACK_STEP:
            private += 1
        else:
            honest = ev.payload
            column = honest
            feed(column)
        if honest >= z and private > honest:
            public_chain = world.honest(honest)
            secret = world.private(private)
            adopted = fork_choice([public_chain, secret])
            if adopted is not secret:
                raise AssertionError("a longer valid private chain must win fork choice")
            if world.payment.txid in {t.txid for b in adopted.blocks for t in b.txs}:
                raise AssertionError("payment survived the reorganization")
            return honest
    return -1


def run_double_spend_attack(s: Scenario, *, engine: str | None = None, runs: int | None = None) -> DoubleSpendResult:
    spec = s.attack
    if spec is None:
        raise ScenarioError("scenario has no attack section")
    for q in spec.q:
        if not 0 <= q < 1:
            raise ScenarioError(f"attacker share q must satisfy 0 <= q < 1, got {q}")
    engine = engine or spec.engine
    runs = runs or spec.runs
    horizon = spec.horizon or default_horizon(spec.z)
    u = race_uniforms(s.rng_seed, runs, horizon, spec.sampler)
    world = RaceWorld(s) if engine == "event" else None
    cells, outcomes = [], {}
    for q in spec.q:
        for z in spec.z:
            if engine == "kernel":
                out = _kernels.race_outcomes(u, float(q), int(z), horizon)
            else:
                out = np.array([event_race(world, u[r], q, z, horizon) for r in range(runs)], dtype=np.int32)
            outcomes[(q, z)] = out
            cells.append(Cell(q, z, runs, int((out >= 0).sum())))
    return DoubleSpendResult(cells, horizon, spec.sampler, engine, outcomes)


# --------------------------------------------------------------------------
# audit forgery


@dataclass(frozen=True)
class AuditFinding:
    strategy: Strategy
    tamper_height: int
    first_invalid: int | None
    invalidated: int
    reason: str | None
    cross_check: CrossCheck
    forged_tip: bytes

    @property
    def caught_by(self) -> list[str]:
        out = []
        if self.first_invalid is not None:
            out.append("locate_tamper")
        if self.cross_check == CrossCheck.MISMATCH:
            out.append("cross_check")
        return out

    @property
    def detected(self) -> bool:
        return bool(self.caught_by)

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy.value,
            "tamper_height": self.tamper_height,
            "first_invalid": self.first_invalid,
            "invalidated": self.invalidated,
            "reason": self.reason,
            "cross_check": self.cross_check.value,
            "caught_by": self.caught_by,
            "detected": self.detected,
            "forged_tip": hexd(self.forged_tip),
        }


class AuditBench:
    """Honest chains for forgery trials: a PoW chain and a round-robin chain.

    Each block after genesis carries a coinbase and, when traders are funded,
    a one-unit transfer so there is a real transaction to tamper with.
    """

    def __init__(self, s: Scenario) -> None:
        if s.audit is None:
            raise ScenarioError("scenario has no audit section")
        self.s = s
        self.blocks = s.audit.chain_blocks
        adv = s.adversary
        self.adversary = s.key(adv.id) if adv else s.key("__forger__")
        self._chains: dict[ConsensusMode, tuple[ChainConfig, Chain]] = {}

    def _payer(self, cfg: ChainConfig) -> tuple[KeyPair, bytes] | None:
        # the adversary keeps the books it later falsifies: its own outgoing transfers
        traders = self.s.with_role(Role.TRADER)
        if not traders:
            return None
        payer = self.adversary
        if not any(i.to == payer.address and i.asset == "CASH" for i in cfg.genesis_issuances):
            return None
        return payer, self.s.key(traders[0].id).address

    def honest(self, mode: ConsensusMode) -> tuple[ChainConfig, Chain]:
        if mode not in self._chains:
            if mode == ConsensusMode.ROUND_ROBIN:
                cfg = self.s.chain_config(consensus_mode="round_robin", permission_mode="hybrid")
            else:
                cfg = self.s.chain_config(consensus_mode="pow")
            writers = self.s.writers(mode)
            if not writers:
                raise ScenarioError(f"no {mode.value} writers in the roster")
            keys = [self.s.key(n.id) for n in writers]
            payer = self._payer(cfg)

            def txs_for(height: int, state: ChainState) -> list[Transaction]:
                if payer is None:
                    return []
                return [transfer_tx(payer[0], height - 1, payer[1], "CASH", 1)]

            chain = extend_chain(new_chain(cfg), self.blocks, keys, txs_for=txs_for, cfg=cfg)
            self._chains[mode] = (cfg, chain)
        return self._chains[mode]

    def forge(self, strategy: Strategy, h: int, rng: random.Random | None = None) -> tuple[ChainConfig, Chain, Chain]:
        """Returns (cfg, honest chain, forged chain) for one tampering attempt at height ``h``."""
        rng = rng or random.Random(h)
        mode = ConsensusMode.ROUND_ROBIN if strategy == Strategy.RR_WITHOUT_KEYS else ConsensusMode.POW
        cfg, chain = self.honest(mode)
        if not 1 <= h <= chain.height:
            raise ScenarioError(f"tamper height {h} outside 1..{chain.height}")
        if strategy == Strategy.NO_REWORK:
            return cfg, chain, chain.replace_block(h, _tamper_block(chain.blocks[h]))
        tampered = _tamper_block(chain.blocks[h], self.adversary)
        blocks = list(chain.blocks[:h])
        for i in range(h, len(chain.blocks)):
            src = tampered if i == h else chain.blocks[i]
            header = replace(src.header, prev_hash=blocks[-1].hash, merkle_root=src.computed_merkle_root())
            block = Block(header, src.txs, src.signer)
            if strategy == Strategy.FULL_REMINE:
                mined = pow_mine(replace(header, nonce=0), 1 << 32)
                if not mined.found:
                    raise AssertionError("re-mining failed within the nonce space")
                block = Block(mined.header, src.txs, None)
                if cfg.requires_block_signer:
                    block = sign_block(block, self.adversary)
            elif strategy == Strategy.RR_WITHOUT_KEYS:
                partial = Chain(tuple(blocks))
                claimed = scheduled_node(partial, i, cfg)
                unsigned = Block(header, src.txs, None)
                sig = self.adversary.sign(unsigned.hash)
                # impersonate the scheduled node, or sign openly under the forger's own id
                node_id = claimed if rng.random() < 0.5 else self.adversary.address
                block = Block(header, src.txs, BlockSignature(node_id, sig))
            blocks.append(block)
        return cfg, chain, Chain(tuple(blocks))


def _tamper_block(block: Block, resign: KeyPair | None = None) -> Block:
    """Flip the last payload byte of the block's last transaction; header untouched.

    With ``resign`` the altered transaction is re-signed when that key is its
    sender, which is what a forger rewriting its own records would do.
    """
    tx = block.txs[-1]
    payload = bytearray(tx.payload)
    payload[-1] ^= 0x01
    altered = replace(tx, payload=bytes(payload))
    if resign is not None and tx.sender == resign.public_key:
        altered = altered.signed(resign)
    return Block(block.header, block.txs[:-1] + (altered,), block.signer)


def audit(cfg: ChainConfig, honest: Chain, forged: Chain, strategy: Strategy, h: int) -> AuditFinding:
    """Auditor receives ``forged``; checks it internally, then against an honest peer's tip."""
    tamper = locate_tamper(forged, cfg)
    at = min(forged.height, honest.height)
    verdict = cross_check(forged, (at, honest.blocks[at].hash))
    return AuditFinding(
        strategy, h, tamper.height, tamper.invalidated,
        tamper.reason.value if tamper.reason else None, verdict, forged.tip_hash,
    )


def run_audit_forgery(
    s: Scenario, tamper_height: int, strategy: Strategy | str, *, bench: AuditBench | None = None, seed: int = 0
) -> AuditFinding:
    bench = bench or AuditBench(s)
    strategy = Strategy(strategy)
    cfg, honest, forged = bench.forge(strategy, tamper_height, random.Random((s.rng_seed << 16) ^ seed))
    return audit(cfg, honest, forged, strategy, tamper_height)


def validate_forgery_internally(cfg: ChainConfig, forged: Chain) -> bool:
    return validate_chain(forged, cfg).valid
