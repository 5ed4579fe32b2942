"""Central exchange function: matching, accounts and settlement.

Orders match by price-time priority and execute at the resting order's price.
In instant mode cash and securities must be on hand before an order is
accepted and every trade settles delivery-versus-payment on the spot. In cycle
mode trades create obligations due ``cycle_days`` later, which are netted and
settled once per simulated day.
"""

from __future__ import annotations

import enum
import heapq
import itertools
from collections import defaultdict
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence, Union

from .codec import Writer
from .crypto import KeyPair, address_of, sha256, verify
from .ledger import (
    CASH,
    SEQUENCED_KINDS,
    Chain,
    ChainConfig,
    FailPolicy,
    Netting,
    SettlementMode,
    Transaction,
    movement_of,
    settlement_tx,
    trade_tx,
)


class Rejected(Exception):
    """An order or posting refused by the exchange; ``reason`` is machine-readable."""

    def __init__(self, reason: str, detail: str = "") -> None:
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason
        self.detail = detail


class SettlementFailed(Exception):
    pass


class Side(str, enum.Enum):
    BUY = "buy"
    SELL = "sell"


@dataclass(frozen=True)
class Order:
    id: str
    public_key: bytes
    side: Side
    security: str
    qty: int
    price: int
    seq: int
    signature: bytes = b""

    def __post_init__(self) -> None:
        object.__setattr__(self, "side", Side(self.side))

    @property
    def trader(self) -> bytes:
        return address_of(self.public_key)

    def signing_bytes(self) -> bytes:
        return (
            Writer()
            .text(self.id)
            .blob(self.public_key)
            .u8(0 if self.side == Side.BUY else 1)
            .text(self.security)
            .u64(self.qty)
            .u64(self.price)
            .u64(self.seq)
            .getvalue()
        )

    @property
    def payload_hash(self) -> bytes:
        return sha256(self.signing_bytes())

    def verify_signature(self) -> bool:
        return verify(self.public_key, self.signing_bytes(), self.signature)

    @classmethod
    def create(
        cls, kp: KeyPair, id: str, side: Side | str, security: str, qty: int, price: int, seq: int
    ) -> "Order":
        unsigned = cls(id, kp.public_key, Side(side), security, qty, price, seq)
        return replace(unsigned, signature=kp.sign(unsigned.signing_bytes()))

    # line-delimited event log form, fields in canonical order
    def to_record(self) -> dict:
        return {
            "type": "order",
            "id": self.id,
            "public_key": self.public_key.hex(),
            "side": self.side.value,
            "security": self.security,
            "qty": self.qty,
            "price": self.price,
            "seq": self.seq,
            "signature": self.signature.hex(),
        }

    @classmethod
    def from_record(cls, rec: Mapping) -> "Order":
        return cls(
            str(rec["id"]),
            bytes.fromhex(rec["public_key"]),
            Side(rec["side"]),
            str(rec["security"]),
            int(rec["qty"]),
            int(rec["price"]),
            int(rec["seq"]),
            bytes.fromhex(rec["signature"]),
        )


@dataclass(frozen=True)
class Trade:
    buy_order: str
    sell_order: str
    buyer: bytes
    seller: bytes
    security: str
    qty: int
    price: int
    trade_day: int

    def encode(self) -> bytes:
        return (
            Writer()
            .text(self.buy_order)
            .text(self.sell_order)
            .digest(self.buyer)
            .digest(self.seller)
            .text(self.security)
            .u64(self.qty)
            .u64(self.price)
            .u32(self.trade_day)
            .getvalue()
        )

    def to_record(self) -> dict:
        return {
            "type": "trade",
            "buy_order": self.buy_order,
            "sell_order": self.sell_order,
            "buyer": self.buyer.hex(),
            "seller": self.seller.hex(),
            "security": self.security,
            "qty": self.qty,
            "price": self.price,
            "trade_day": self.trade_day,
        }


@dataclass
class Account:
    address: bytes
    cash: int = 0
    holdings: dict[str, int] = field(default_factory=dict)
    next_seq: int = 0

    def balance(self, asset: str) -> int:
        return self.cash if asset == CASH else self.holdings.get(asset, 0)

    def copy(self) -> "Account":
        return Account(self.address, self.cash, dict(self.holdings), self.next_seq)

    def credit(self, asset: str, amount: int) -> None:
        if asset == CASH:
            self.cash += amount
        else:
            self.holdings[asset] = self.holdings.get(asset, 0) + amount
            if self.holdings[asset] == 0:
                del self.holdings[asset]


Accounts = dict[bytes, Account]


@dataclass(frozen=True)
class Transfer:
    src: bytes
    dst: bytes
    asset: str
    amount: int


@dataclass(frozen=True)
class Obligation:
    src: bytes
    dst: bytes
    asset: str
    amount: int
    due_day: int


def encode_accounts(accounts: Mapping[bytes, Account]) -> bytes:
    """Canonical bytes of an account set, for byte-identity comparisons."""
    w = Writer().u32(len(accounts))
    for addr in sorted(accounts):
        acct = accounts[addr]
        w.digest(addr).i64(acct.cash).u64(acct.next_seq).u32(len(acct.holdings))
        for symbol in sorted(acct.holdings):
            w.text(symbol).i64(acct.holdings[symbol])
    return w.getvalue()


def asset_totals(accounts: Mapping[bytes, Account]) -> dict[str, int]:
    totals: dict[str, int] = defaultdict(int)
    for acct in accounts.values():
        totals[CASH] += acct.cash
        for symbol, qty in acct.holdings.items():
            totals[symbol] += qty
    return {k: v for k, v in sorted(totals.items()) if v or k == CASH}


def negative_balances(accounts: Mapping[bytes, Account]) -> list[tuple[bytes, str, int]]:
    out = []
    for addr in sorted(accounts):
        acct = accounts[addr]
        if acct.cash < 0:
            out.append((addr, CASH, acct.cash))
        out.extend((addr, s, q) for s, q in sorted(acct.holdings.items()) if q < 0)
    return out


def _touch(accounts: Accounts, new: Accounts, addr: bytes) -> Account:
    if addr not in new:
        new[addr] = accounts[addr].copy() if addr in accounts else Account(addr)
    return new[addr]


# --------------------------------------------------------------------------
# settlement


def settle_instant(trade: Trade, accounts: Mapping[bytes, Account]) -> tuple[Accounts, list[Transfer]]:
    """Delivery versus payment: both legs move or neither does.

    Returns a new account mapping; ``accounts`` itself is never modified.
    """
    assert trade.qty > 0 and trade.price > 0, "order invariants forbid empty trades"
    amount = trade.qty * trade.price
    buyer = accounts.get(trade.buyer)
    seller = accounts.get(trade.seller)
    if buyer is None or buyer.cash < amount:
        raise SettlementFailed(f"buyer cannot pay {amount}")
    if seller is None or seller.holdings.get(trade.security, 0) < trade.qty:
        raise SettlementFailed(f"seller cannot deliver {trade.qty} {trade.security}")
    updated = dict(accounts)
    touched: Accounts = {}
    b = _touch(accounts, touched, trade.buyer)
    s = _touch(accounts, touched, trade.seller)
    b.credit(CASH, -amount)
    s.credit(CASH, amount)
    s.credit(trade.security, -trade.qty)
    b.credit(trade.security, trade.qty)
    updated.update(touched)
    transfers = [
        Transfer(trade.buyer, trade.seller, CASH, amount),
        Transfer(trade.seller, trade.buyer, trade.security, trade.qty),
    ]
    return updated, transfers


@dataclass(frozen=True)
class CycleResult:
    accounts: Accounts
    transfers: list[Transfer]
    failures: list[bytes]
    carried: list[Obligation]
    cancelled: list[Obligation]
    pending: list[Obligation]


def _net_positions(obligations: Iterable[Obligation]) -> dict[tuple[bytes, str], int]:
    net: dict[tuple[bytes, str], int] = defaultdict(int)
    for o in obligations:
        net[(o.src, o.asset)] -= o.amount
        net[(o.dst, o.asset)] += o.amount
    return net


def _multilateral_transfers(net: Mapping[tuple[bytes, str], int]) -> list[Transfer]:
    by_asset: dict[str, list[tuple[bytes, int]]] = defaultdict(list)
    for (addr, asset), v in net.items():
        if v:
            by_asset[asset].append((addr, v))
    out = []
    for asset in sorted(by_asset):
        payers = sorted((a, -v) for a, v in by_asset[asset] if v < 0)
        payees = sorted((a, v) for a, v in by_asset[asset] if v > 0)
        i = j = 0
        owe = payers[0][1] if payers else 0
        due = payees[0][1] if payees else 0
        while i < len(payers) and j < len(payees):
            amount = min(owe, due)
            out.append(Transfer(payers[i][0], payees[j][0], asset, amount))
            owe -= amount
            due -= amount
            if owe == 0:
                i += 1
                owe = payers[i][1] if i < len(payers) else 0
            if due == 0:
                j += 1
                due = payees[j][1] if j < len(payees) else 0
    return out


def _bilateral_transfers(obligations: Iterable[Obligation]) -> list[Transfer]:
    pair_net: dict[tuple[bytes, bytes, str], int] = defaultdict(int)
    for o in obligations:
        lo, hi = sorted((o.src, o.dst))
        sign = 1 if o.src == lo else -1
        pair_net[(lo, hi, o.asset)] += sign * o.amount
    out = []
    for (lo, hi, asset), v in sorted(pair_net.items()):
        if v > 0:
            out.append(Transfer(lo, hi, asset, v))
        elif v < 0:
            out.append(Transfer(hi, lo, asset, -v))
    return out


def settle_cycle(
    obligations: Sequence[Obligation],
    day: int,
    accounts: Mapping[bytes, Account],
    *,
    netting: Netting = Netting.MULTILATERAL,
    fail_policy: FailPolicy = FailPolicy.CARRY,
) -> CycleResult:
    """Net and settle every obligation due on or before ``day``.

    A participant whose net debit in any asset exceeds its balance fails: all
    of its due obligations are pulled out (carried to ``day + 1`` or cancelled)
    and netting is recomputed for the rest, so surviving transfers are always
    covered. Nothing else is partially applied.
    """
    due = [o for o in obligations if o.due_day <= day]
    pending = [o for o in obligations if o.due_day > day]
    failed: set[bytes] = set()
    active = [o for o in due if o.src != o.dst]
    while True:
        net = _net_positions(active)
        short = {
            addr
            for (addr, asset), v in net.items()
            if v < 0 and (accounts[addr].balance(asset) if addr in accounts else 0) + v < 0
        }
        if not short:
            break
        failed |= short
        active = [o for o in active if o.src not in failed and o.dst not in failed]
    pulled = [o for o in due if o.src in failed or o.dst in failed]
    if netting == Netting.BILATERAL:
        transfers = _bilateral_transfers(active)
    else:
        transfers = _multilateral_transfers(net)
    updated = dict(accounts)
    touched: Accounts = {}
    for (addr, asset), v in sorted(net.items()):
        if v:
            _touch(accounts, touched, addr).credit(asset, v)
    updated.update(touched)
    if fail_policy == FailPolicy.CARRY:
        carried = [replace(o, due_day=day + 1) for o in pulled]
        cancelled: list[Obligation] = []
    else:
        carried, cancelled = [], pulled
    return CycleResult(updated, transfers, sorted(failed), carried, cancelled, pending)


def apply_obligations_gross(
    obligations: Iterable[Obligation], accounts: Mapping[bytes, Account]
) -> Accounts:
    """Apply each obligation individually; reference for netting equivalence."""
    updated = {a: acct.copy() for a, acct in accounts.items()}
    for o in obligations:
        updated.setdefault(o.src, Account(o.src)).credit(o.asset, -o.amount)
        updated.setdefault(o.dst, Account(o.dst)).credit(o.asset, o.amount)
    return updated


# --------------------------------------------------------------------------
# order book


@dataclass
class RestingOrder:
    order: Order
    remaining: int
    arrival: int

    def sort_key(self) -> tuple[int, int]:
        if self.order.side == Side.BUY:
            return (-self.order.price, self.arrival)
        return (self.order.price, self.arrival)

    def __lt__(self, other: "RestingOrder") -> bool:
        return self.sort_key() < other.sort_key()


class OrderBook:
    """Bids by (price desc, arrival asc) and asks by (price asc, arrival asc), per security."""

    def __init__(self) -> None:
        self._bids: dict[str, list[RestingOrder]] = defaultdict(list)
        self._asks: dict[str, list[RestingOrder]] = defaultdict(list)

    def _side(self, side: Side) -> dict[str, list[RestingOrder]]:
        return self._bids if side == Side.BUY else self._asks

    def rest(self, entry: RestingOrder) -> None:
        heapq.heappush(self._side(entry.order.side)[entry.order.security], entry)

    def best(self, side: Side, security: str) -> RestingOrder | None:
        heap = self._side(side).get(security)
        return heap[0] if heap else None

    def pop_best(self, side: Side, security: str) -> RestingOrder:
        return heapq.heappop(self._side(side)[security])

    def levels(self, side: Side, security: str) -> list[RestingOrder]:
        return sorted(self._side(side).get(security, ()))

    def securities(self) -> list[str]:
        return sorted(set(self._bids) | set(self._asks))

    def crossed(self, security: str) -> bool:
        bid = self.best(Side.BUY, security)
        ask = self.best(Side.SELL, security)
        return bid is not None and ask is not None and bid.order.price >= ask.order.price


# --------------------------------------------------------------------------
# the exchange


@dataclass
class SettlementEvent:
    day: int
    transfers: list[Transfer]
    failures: list[bytes] = field(default_factory=list)


class Exchange:
    """Single-writer exchange state: one book, one account set, one event stream."""

    def __init__(
        self,
        settlement_mode: SettlementMode = SettlementMode.INSTANT,
        cycle_days: int = 0,
        accounts: Mapping[bytes, Account] | None = None,
        *,
        netting: Netting = Netting.MULTILATERAL,
        fail_policy: FailPolicy = FailPolicy.CARRY,
    ) -> None:
        self.mode = SettlementMode(settlement_mode)
        self.cycle_days = cycle_days
        self.netting = Netting(netting)
        self.fail_policy = FailPolicy(fail_policy)
        self.accounts: Accounts = {a: acct.copy() for a, acct in (accounts or {}).items()}
        self.book = OrderBook()
        self.obligations: list[Obligation] = []
        self.trades: list[Trade] = []
        self.settlements: list[SettlementEvent] = []
        self.day = 0
        self._arrival = itertools.count()
        self._reserved_cash: dict[bytes, int] = defaultdict(int)
        self._reserved: dict[tuple[bytes, str], int] = defaultdict(int)

    @classmethod
    def from_config(cls, cfg: ChainConfig, accounts: Mapping[bytes, Account] | None = None) -> "Exchange":
        return cls(
            cfg.settlement_mode,
            cfg.cycle_days,
            accounts,
            netting=cfg.netting,
            fail_policy=cfg.fail_policy,
        )

    def account(self, addr: bytes) -> Account:
        if addr not in self.accounts:
            self.accounts[addr] = Account(addr)
        return self.accounts[addr]

    def free_cash(self, addr: bytes) -> int:
        return self.account(addr).cash - self._reserved_cash[addr]

    def free_holdings(self, addr: bytes, security: str) -> int:
        return self.account(addr).holdings.get(security, 0) - self._reserved[(addr, security)]

    def submit_order(self, order: Order) -> list[Trade]:
        if order.qty <= 0 or order.price <= 0 or not order.security or order.security == CASH:
            raise Rejected("malformed", "qty and price must be positive")
        if not order.verify_signature():
            raise Rejected("bad-signature", order.id)
        trader = self.account(order.trader)
        if order.seq != trader.next_seq:
            raise Rejected("conflict", f"seq {order.seq}, expected {trader.next_seq}")
        instant = self.mode == SettlementMode.INSTANT
        if instant:
            if order.side == Side.BUY and self.free_cash(order.trader) < order.qty * order.price:
                raise Rejected("insufficient-funds", f"{order.id} lacks proven cash")
            if order.side == Side.SELL and self.free_holdings(order.trader, order.security) < order.qty:
                raise Rejected("insufficient-funds", f"{order.id} lacks securities")
            self._reserve(order, order.qty)
        trader.next_seq += 1

        trades: list[Trade] = []
        remaining = order.qty
        opposite = Side.SELL if order.side == Side.BUY else Side.BUY
        while remaining:
            head = self.book.best(opposite, order.security)
            if head is None or not _crosses(order, head.order):
                break
            fill = min(remaining, head.remaining)
            buy, sell = (order, head.order) if order.side == Side.BUY else (head.order, order)
            trade = Trade(
                buy.id, sell.id, buy.trader, sell.trader, order.security,
                fill, head.order.price, self.day,
            )
            if instant:
                self._release(order, fill)
                self._release(head.order, fill)
                self._settle_now(trade)
            else:
                self._add_obligations(trade)
            trades.append(trade)
            remaining -= fill
            head.remaining -= fill
            if head.remaining == 0:
                self.book.pop_best(opposite, order.security)
        if remaining:
            self.book.rest(RestingOrder(order, remaining, next(self._arrival)))
        self.trades.extend(trades)
        return trades

    def _reserve(self, order: Order, qty: int) -> None:
        if order.side == Side.BUY:
            self._reserved_cash[order.trader] += qty * order.price
        else:
            self._reserved[(order.trader, order.security)] += qty

    def _release(self, order: Order, qty: int) -> None:
        if order.side == Side.BUY:
            self._reserved_cash[order.trader] -= qty * order.price
        else:
            self._reserved[(order.trader, order.security)] -= qty

    def _settle_now(self, trade: Trade) -> None:
        self.accounts, transfers = settle_instant(trade, self.accounts)
        self.settlements.append(SettlementEvent(self.day, transfers))

    def _add_obligations(self, trade: Trade) -> None:
        due = trade.trade_day + self.cycle_days
        self.obligations.append(Obligation(trade.buyer, trade.seller, CASH, trade.qty * trade.price, due))
        self.obligations.append(Obligation(trade.seller, trade.buyer, trade.security, trade.qty, due))

    def close_day(self) -> SettlementEvent | None:
        """Settle what falls due today (cycle mode), then advance the calendar."""
        event = None
        if self.mode == SettlementMode.CYCLE:
            result = settle_cycle(
                self.obligations, self.day, self.accounts,
                netting=self.netting, fail_policy=self.fail_policy,
            )
            self.accounts = result.accounts
            self.obligations = result.pending + result.carried
            event = SettlementEvent(self.day, result.transfers, result.failures)
            self.settlements.append(event)
        self.day += 1
        return event


def _crosses(incoming: Order, resting: Order) -> bool:
    if incoming.side == Side.BUY:
        return incoming.price >= resting.price
    return incoming.price <= resting.price


# --------------------------------------------------------------------------
# conflicts and ledger posting

Signed = Union[Transaction, Order]


def _identity(item: Signed) -> tuple[tuple[bytes, int], bytes]:
    if isinstance(item, Order):
        return (item.trader, item.seq), item.payload_hash
    return (item.sender_address, item.seq), sha256(item.signing_bytes())


def detect_conflict(pool: Iterable[Signed]) -> list[list[Signed]]:
    """Group items sharing (sender, seq) but differing in payload; exact duplicates merge."""
    groups: dict[tuple[bytes, int], dict[bytes, Signed]] = {}
    for item in pool:
        if isinstance(item, Transaction) and item.kind not in SEQUENCED_KINDS:
            continue
        key, digest = _identity(item)
        groups.setdefault(key, {}).setdefault(digest, item)
    return [list(v.values()) for k, v in sorted(groups.items()) if len(v) > 1]


def dedupe(pool: Iterable[Signed]) -> list[Signed]:
    seen: set[bytes] = set()
    out = []
    for item in pool:
        digest = _identity(item)[1]
        if digest not in seen:
            seen.add(digest)
            out.append(item)
    return out


class PendingBlockBuilder:
    """Queue of ledger transactions awaiting the next clearing block."""

    def __init__(self) -> None:
        self.queue: list[Transaction] = []
        self._next_seq: dict[bytes, int] = defaultdict(int)

    def next_seq(self, addr: bytes) -> int:
        seq = self._next_seq[addr]
        self._next_seq[addr] += 1
        return seq

    def reserve_from(self, addr: bytes, seq: int) -> None:
        self._next_seq[addr] = max(self._next_seq[addr], seq)

    def push(self, tx: Transaction) -> None:
        self.queue.append(tx)

    def drain(self, limit: int | None = None) -> list[Transaction]:
        n = len(self.queue) if limit is None else min(limit, len(self.queue))
        out, self.queue = self.queue[:n], self.queue[n:]
        return out


def post_trades_to_ledger(
    trades: Sequence[Trade],
    builder: PendingBlockBuilder,
    producer: KeyPair,
    elected: bytes,
    transfers: Sequence[Transfer] = (),
    day: int = 0,
) -> list[Transaction]:
    """Encode trades and settlement transfers as producer-signed ledger transactions."""
    if producer.address != elected:
        raise Rejected("not-matcher", f"{producer.address.hex()[:16]} was not elected")
    txs = []
    for trade in trades:
        txs.append(trade_tx(producer, builder.next_seq(producer.address), trade.encode()))
    for t in transfers:
        txs.append(
            settlement_tx(producer, builder.next_seq(producer.address), t.src, t.dst, t.asset, t.amount, day)
        )
    for tx in txs:
        builder.push(tx)
    return txs


def balances_from_chain(chain: Chain) -> Accounts:
    """Replay issuance, transfer and settlement movements recorded on a chain."""
    accounts: Accounts = {}
    for block in chain.blocks:
        for tx in block.txs:
            mv = movement_of(tx)
            if mv is None:
                continue
            if mv.src is not None:
                accounts.setdefault(mv.src, Account(mv.src)).credit(mv.asset, -mv.amount)
            accounts.setdefault(mv.dst, Account(mv.dst)).credit(mv.asset, mv.amount)
    return accounts


def accounts_from_issuances(cfg: ChainConfig) -> Accounts:
    accounts: Accounts = {}
    for iss in cfg.genesis_issuances:
        accounts.setdefault(iss.to, Account(iss.to)).credit(iss.asset, iss.amount)
    return accounts
