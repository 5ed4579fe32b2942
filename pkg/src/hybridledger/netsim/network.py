"""Honest peer-to-peer propagation with per-node chain copies."""

from __future__ import annotations

import random
from collections import Counter, defaultdict

from ..consensus import block_work, fork_choice, pos_elect_matcher
from ..crypto import KeyPair, hexd
from ..exchange import (
    Exchange,
    Order,
    PendingBlockBuilder,
    Rejected,
    Trade,
    Transfer,
    accounts_from_issuances,
    asset_totals,
    balances_from_chain,
    negative_balances,
    post_trades_to_ledger,
)
from ..ledger import Block, Chain, ChainConfig, ConsensusMode, make_genesis
from ..producer import produce_block
from ..validation import ChainState, CrossCheck, cross_check, locate_tamper, validate_block, validate_chain
from .events import EventKind, EventQueue
from .scenario import Role, Scenario, ScenarioError


class SimNode:
    """A participant's own copy of the block tree and its preferred tip."""

    def __init__(self, node_id: str, key: KeyPair, genesis: Block, cfg: ChainConfig) -> None:
        self.id = node_id
        self.key = key
        self.cfg = cfg
        self.blocks: dict[bytes, Block] = {genesis.hash: genesis}
        self.states: dict[bytes, ChainState] = {genesis.hash: ChainState.at_genesis(genesis, cfg)}
        self.work: dict[bytes, int] = {genesis.hash: block_work(genesis.header.bits)}
        self.tip = genesis.hash
        self.orphans: dict[bytes, list[Block]] = defaultdict(list)
        self.rejected = 0
        self.reorgs = 0

    @property
    def state(self) -> ChainState:
        return self.states[self.tip]

    @property
    def height(self) -> int:
        return self.state.height

    def chain(self, tip: bytes | None = None) -> Chain:
        out = []
        h = self.tip if tip is None else tip
        while True:
            block = self.blocks[h]
            out.append(block)
            if self.states[h].height == 0:
                break
            h = block.header.prev_hash
        return Chain(tuple(reversed(out)))

    def receive(self, block: Block) -> list[bytes]:
        """Validate and store ``block`` (and any orphans it unblocks); returns accepted hashes."""
        if block.hash in self.blocks:
            return []
        if block.header.prev_hash not in self.blocks:
            self.orphans[block.header.prev_hash].append(block)
            return []
        accepted = []
        stack = [block]
        while stack:
            b = stack.pop()
            if b.hash in self.blocks:
                continue
            parent = self.blocks[b.header.prev_hash]
            report = validate_block(b, parent, self.cfg, self.states[parent.hash])
            if not report.valid:
                self.rejected += 1
                continue
            state = self.states[parent.hash].copy()
            state.apply(b)
            self.blocks[b.hash] = b
            self.states[b.hash] = state
            self.work[b.hash] = self.work[parent.hash] + block_work(b.header.bits)
            accepted.append(b.hash)
            self._consider(b.hash)
            stack.extend(reversed(self.orphans.pop(b.hash, [])))
        return accepted

    def _consider(self, candidate: bytes) -> None:
        # lower cumulative work can never win, so skip materializing it
        if self.work[candidate] < self.work[self.tip]:
            return
        current = self.chain()
        chosen = fork_choice([current, self.chain(candidate)])
        if chosen is current:
            return
        if self.blocks[candidate].header.prev_hash != self.tip:
            self.reorgs += 1
        self.tip = candidate


class NetworkSim:
    def __init__(self, s: Scenario) -> None:
        self.s = s
        self.cfg = s.chain_config()
        self.genesis = make_genesis(self.cfg)
        self.queue = EventQueue()
        self.net_rng = random.Random(s.rng_seed)
        self.nodes = {n.id: SimNode(n.id, s.key(n.id), self.genesis, self.cfg) for n in s.nodes}
        self.order = [n.id for n in s.nodes]
        self.produced: dict[bytes, Block] = {}
        self.violations: list[str] = []
        self.audits: list[dict] = []
        self.rr = self.cfg.consensus_mode == ConsensusMode.ROUND_ROBIN
        self.interval_ms = 1000.0 * self.cfg.target_interval
        self._init_exchange()

    # -- network -------------------------------------------------------------

    def broadcast(self, origin: str, block: Block) -> None:
        lo, hi = self.s.latency.min_ms, self.s.latency.max_ms
        for dst in self.order:
            if dst != origin:
                delay = self.net_rng.uniform(lo, hi) if hi > lo else lo
                self.queue.push(self.queue.now + delay, EventKind.BROADCAST, (dst, block))

    def timestamp(self) -> int:
        return self.cfg.genesis_timestamp + int(self.queue.now // 1000)

    def publish(self, node: SimNode, block: Block) -> None:
        self.produced[block.hash] = block
        node.receive(block)
        self.broadcast(node.id, block)

    # -- PoW race ------------------------------------------------------------

    def _schedule_mining(self) -> None:
        for n in self.s.nodes:
            if n.role == Role.MINER and n.hash_power > 0:
                rate = n.hash_power / self.interval_ms
                self.queue.push(self.queue.now + self.net_rng.expovariate(rate), EventKind.BLOCK_FOUND, n.id)

    def _mine(self, miner: str) -> None:
        node = self.nodes[miner]
        block = produce_block(node.state, node.key, timestamp=self.timestamp(), coinbase_extra=miner.encode())
        self.publish(node, block)
        if node.height >= self.s.blocks or self._one_more:
            self.mining = False
            self._one_more = False
        else:
            spec = self.s.node(miner)
            rate = spec.hash_power / self.interval_ms
            self.queue.push(self.queue.now + self.net_rng.expovariate(rate), EventKind.BLOCK_FOUND, miner)

    # -- round-robin clearing --------------------------------------------------

    def _slot(self, index: int) -> None:
        for n in self.s.with_role(Role.CLEARING):
            node = self.nodes[n.id]
            if node.state.scheduled_node() != node.key.address:
                continue
            txs = self._clearing_txs(node) if self.exchange else []
            block = produce_block(
                node.state, node.key, txs, timestamp=self.timestamp(), coinbase_extra=n.id.encode()
            )
            self.publish(node, block)
            return

    def _clearing_txs(self, node: SimNode) -> list:
        if self.unposted_trades or self.unposted_transfers:
            elected = pos_elect_matcher(self.stakes, node.tip)
            post_trades_to_ledger(
                self.unposted_trades,
                self.builder,
                self.matcher_keys[elected],
                elected,
                self.unposted_transfers,
                self.exchange.day,
            )
            self.elections[self.matcher_names[elected]] += 1
            self.unposted_trades, self.unposted_transfers = [], []
        return self.builder.drain()

    # -- exchange --------------------------------------------------------------

    def _init_exchange(self) -> None:
        flows = [e for e in self.s.events if e.get("type") in ("order", "random_orders")]
        self.exchange: Exchange | None = None
        if not flows:
            return
        self.exchange = Exchange.from_config(self.cfg, accounts_from_issuances(self.cfg))
        self.initial_totals = asset_totals(self.exchange.accounts)
        self.builder = PendingBlockBuilder()
        self.unposted_trades: list[Trade] = []
        self.unposted_transfers: list[Transfer] = []
        self.stakes = {self.s.key(n.id).address: n.stake for n in self.s.with_role(Role.MATCHER)}
        self.matcher_keys = {self.s.key(n.id).address: self.s.key(n.id) for n in self.s.with_role(Role.MATCHER)}
        self.matcher_names = {self.s.key(n.id).address: n.id for n in self.s.with_role(Role.MATCHER)}
        self.elections: Counter[str] = Counter()
        self.rejections: Counter[str] = Counter()
        self.submitted = 0
        self.settled_index = 0
        self.settlement_checks = 0
        self.failures = 0

    def _schedule_orders(self, horizon_ms: float) -> None:
        order_rng = random.Random((self.s.rng_seed << 4) | 1)
        for e in self.s.events:
            kind = e.get("type")
            if kind == "order":
                self.queue.push(float(e.get("time_ms", 0)), EventKind.ORDER_SUBMIT, dict(e))
            elif kind == "random_orders":
                traders = list(e.get("traders") or [n.id for n in self.s.with_role(Role.TRADER)])
                securities = list(e["securities"])
                lo_p, hi_p = e.get("price", [1, 100])
                lo_q, hi_q = e.get("qty", [1, 100])
                start = float(e.get("start_ms", 0))
                end = float(e.get("end_ms", horizon_ms))
                for _ in range(int(e["count"])):
                    spec = {
                        "trader": order_rng.choice(traders),
                        "side": order_rng.choice(("buy", "sell")),
                        "security": order_rng.choice(securities),
                        "qty": order_rng.randint(lo_q, hi_q),
                        "price": order_rng.randint(lo_p, hi_p),
                    }
                    self.queue.push(order_rng.uniform(start, end), EventKind.ORDER_SUBMIT, spec)
            elif kind == "audit_request":
                self.queue.push(float(e.get("time_ms", 0)), EventKind.AUDIT_REQUEST, dict(e))
            else:
                raise ScenarioError(f"unknown event type {kind!r}")

    def _submit(self, spec: dict) -> None:
        trader = str(spec["trader"])
        if trader not in self.nodes:
            raise ScenarioError(f"order from unknown node {trader!r}")
        key = self.s.key(trader)
        seq = spec.get("seq", self.exchange.account(key.address).next_seq)
        self.submitted += 1
        order = Order.create(
            key, f"{trader}-{self.submitted}", spec["side"], spec["security"],
            int(spec["qty"]), int(spec["price"]), int(seq),
        )
        try:
            trades = self.exchange.submit_order(order)
        except Rejected as exc:
            self.rejections[exc.reason] += 1
            return
        self.unposted_trades.extend(trades)
        self._collect_settlements()

    def _collect_settlements(self) -> None:
        new = self.exchange.settlements[self.settled_index :]
        self.settled_index = len(self.exchange.settlements)
        for ev in new:
            self.unposted_transfers.extend(ev.transfers)
            self.failures += len(ev.failures)
            self._check_conservation(f"day {ev.day}")

    def _check_conservation(self, where: str) -> None:
        self.settlement_checks += 1
        totals = asset_totals(self.exchange.accounts)
        if totals != self.initial_totals:
            self.violations.append(f"conservation broken at {where}: {totals} != {self.initial_totals}")
        neg = negative_balances(self.exchange.accounts)
        if neg:
            self.violations.append(f"negative balance at {where}: {hexd(neg[0][0])[:16]} {neg[0][1]}")

    def _cycle_boundary(self) -> None:
        self.exchange.close_day()
        self._collect_settlements()

    def _audit_request(self, spec: dict) -> None:
        auditor = self.nodes[str(spec["auditor"])]
        peer = self.nodes[str(spec["peer"])]
        local = auditor.chain()
        tamper = locate_tamper(local, self.cfg)
        claim = (min(local.height, peer.height), peer.chain().blocks[min(local.height, peer.height)].hash)
        verdict = cross_check(local, claim)
        self.audits.append(
            {
                "time_ms": round(self.queue.now, 3),
                "auditor": auditor.id,
                "peer": peer.id,
                "first_invalid": tamper.height,
                "cross_check": verdict.value,
            }
        )
        if tamper.tampered or verdict == CrossCheck.MISMATCH:
            self.violations.append(f"audit by {auditor.id} flagged its chain")

    # -- main loop -------------------------------------------------------------

    def _dispatch(self, ev) -> None:
        if ev.kind == EventKind.BROADCAST:
            dst, block = ev.payload
            self.nodes[dst].receive(block)
        elif ev.kind == EventKind.BLOCK_FOUND:
            if self.mining:
                self._mine(ev.payload)
        elif ev.kind == EventKind.SLOT:
            self._slot(ev.payload)
        elif ev.kind == EventKind.ORDER_SUBMIT:
            self._submit(ev.payload)
        elif ev.kind == EventKind.CYCLE_BOUNDARY:
            self._cycle_boundary()
        elif ev.kind == EventKind.AUDIT_REQUEST:
            self._audit_request(ev.payload)

    def _drain(self) -> None:
        while self.queue:
            self._dispatch(self.queue.pop())

    def _tips_agree(self) -> bool:
        return len({n.tip for n in self.nodes.values()}) == 1

    def run(self) -> dict:
        if self.rr:
            slots = self.s.blocks or self.s.days * self.s.day_slots
            horizon = slots * self.interval_ms
            self._schedule_orders(horizon)
            if self.exchange:
                day_ms = self.s.day_slots * self.interval_ms
                for d in range(self.s.days):
                    self.queue.push((d + 1) * day_ms - self.interval_ms / 2, EventKind.CYCLE_BOUNDARY)
            for k in range(1, slots + 1):
                self.queue.push(k * self.interval_ms, EventKind.SLOT, k)
            self._drain()
            extra = slots
            # flush settlements queued by the final boundary into clearing blocks
            while self.exchange and (self.unposted_trades or self.unposted_transfers or self.builder.queue):
                extra += 1
                if extra > slots + 10:
                    self.violations.append("clearing queue did not drain")
                    break
                self.queue.push(extra * self.interval_ms, EventKind.SLOT, extra)
                self._drain()
        else:
            self._schedule_orders(0.0)
            self.mining = True
            self._one_more = False
            self._schedule_mining()
            self._drain()
            for _ in range(100):
                if self._tips_agree():
                    break
                # a tie survived propagation; one more block breaks it
                self.mining = True
                self._one_more = True
                self._schedule_mining()
                self._drain()
        return self._report()

    def _report(self) -> dict:
        reference = self.nodes[self.order[0]]
        final = reference.chain()
        agree = self._tips_agree()
        if not agree:
            self.violations.append("honest nodes disagree on the tip")
        checked: set[bytes] = set()
        for n in self.nodes.values():
            if n.tip in checked:
                continue
            checked.add(n.tip)
            report = validate_chain(n.chain(), self.cfg)
            if not report.valid:
                self.violations.append(f"node {n.id} holds an invalid chain at {report.first_invalid_height}")
        on_chain = {b.hash for b in final.blocks}
        report = {
            "nodes": {
                n.id: {
                    "height": n.height,
                    "tip_hash": hexd(n.tip),
                    "blocks_known": len(n.blocks),
                    "rejected": n.rejected,
                    "reorgs": n.reorgs,
                }
                for n in self.nodes.values()
            },
            "tips_agree": agree,
            "final_height": final.height,
            "blocks_produced": len(self.produced),
            "orphaned_blocks": sum(1 for h in self.produced if h not in on_chain),
            "genesis_hash": hexd(self.genesis.hash),
            "events_processed": self.queue.processed,
            "audit_requests": self.audits,
        }
        if self.exchange:
            ledger_balances = {
                a: (acct.cash, dict(sorted(acct.holdings.items())))
                for a, acct in balances_from_chain(final).items()
                if acct.cash or acct.holdings
            }
            exchange_balances = {
                a: (acct.cash, dict(sorted(acct.holdings.items())))
                for a, acct in self.exchange.accounts.items()
                if acct.cash or acct.holdings
            }
            matches = ledger_balances == exchange_balances
            if not matches:
                self.violations.append("ledger replay disagrees with exchange balances")
            report["settlement"] = {
                "mode": self.exchange.mode.value,
                "cycle_days": self.exchange.cycle_days,
                "netting": self.exchange.netting.value,
                "orders_submitted": self.submitted,
                "orders_rejected": dict(sorted(self.rejections.items())),
                "trades": len(self.exchange.trades),
                "settlement_events": len(self.exchange.settlements),
                "transfers": sum(len(e.transfers) for e in self.exchange.settlements),
                "settlement_failures": self.failures,
                "pending_obligations": len(self.exchange.obligations),
                "days_closed": self.exchange.day,
                "conservation_checks": self.settlement_checks,
                "totals": asset_totals(self.exchange.accounts),
                "ledger_matches_exchange": matches,
                "matcher_elections": dict(sorted(self.elections.items())),
            }
        return report

    def chains(self) -> dict[str, Chain]:
        return {n.id: n.chain() for n in self.nodes.values()}
