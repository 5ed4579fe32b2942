from functools import lru_cache

import pytest
from hypothesis import given, settings, strategies as st

from hybridledger.crypto import keygen_from_label
from hybridledger.exchange import (
    Account,
    Exchange,
    Obligation,
    Order,
    PendingBlockBuilder,
    Rejected,
    SettlementFailed,
    Trade,
    apply_obligations_gross,
    asset_totals,
    dedupe,
    detect_conflict,
    encode_accounts,
    negative_balances,
    post_trades_to_ledger,
    settle_cycle,
    settle_instant,
)
from hybridledger.ledger import CASH, FailPolicy, Netting, SettlementMode, TxKind, transfer_tx
from oracles import gross_apply, reference_match


@lru_cache(maxsize=None)
def trader(i):
    return keygen_from_label("trader", i)


def funded(n=4, cash=1_000_000, shares=10_000, symbols=("ACME",)):
    return {
        trader(i).address: Account(trader(i).address, cash, {s: shares for s in symbols})
        for i in range(n)
    }


class Desk:
    """Signs orders with per-trader sequence numbers."""

    def __init__(self, ex):
        self.ex = ex
        self.seq = {}
        self.n = 0

    def order(self, who, side, qty, price, security="ACME"):
        kp = trader(who)
        seq = self.seq.get(who, 0)
        self.n += 1
        return Order.create(kp, f"o{self.n}", side, security, qty, price, seq)

    def submit(self, who, side, qty, price, security="ACME"):
        o = self.order(who, side, qty, price, security)
        trades = self.ex.submit_order(o)
        self.seq[who] = self.seq.get(who, 0) + 1
        return trades


# -- matching ------------------------------------------------------------------


def test_exact_cross():
    d = Desk(Exchange(accounts=funded()))
    d.submit(0, "sell", 100, 10)
    [t] = d.submit(1, "buy", 100, 10)
    assert (t.qty, t.price, t.buyer, t.seller) == (100, 10, trader(1).address, trader(0).address)


def test_walks_the_book_at_resting_prices():
    d = Desk(Exchange(accounts=funded()))
    d.submit(0, "sell", 60, 10)
    d.submit(2, "sell", 60, 11)
    trades = d.submit(1, "buy", 100, 11)
    assert [(t.qty, t.price) for t in trades] == [(60, 10), (40, 11)]
    assert d.ex.book.best("sell", "ACME").remaining == 20
    expected = reference_match([("o1", "sell", 60, 10), ("o2", "sell", 60, 11), ("o3", "buy", 100, 11)])
    assert [(t.buy_order, t.sell_order, t.qty, t.price) for t in trades] == expected


def test_no_cross_rests():
    d = Desk(Exchange(accounts=funded()))
    d.submit(0, "sell", 100, 10)
    assert d.submit(1, "buy", 100, 9) == []
    assert d.ex.book.best("buy", "ACME").order.price == 9
    assert not d.ex.book.crossed("ACME")


def test_time_priority_at_equal_price():
    d = Desk(Exchange(accounts=funded()))
    d.submit(0, "sell", 10, 10)
    d.submit(2, "sell", 10, 10)
    [t] = d.submit(1, "buy", 10, 10)
    assert t.seller == trader(0).address


def test_rejections():
    ex = Exchange(accounts=funded())
    kp = trader(0)
    good = Order.create(kp, "a", "buy", "ACME", 1, 10, 0)
    forged = Order(good.id, good.public_key, good.side, good.security, 2, good.price, good.seq, good.signature)
    with pytest.raises(Rejected) as e:
        ex.submit_order(forged)
    assert e.value.reason == "bad-signature"
    ex.submit_order(good)
    with pytest.raises(Rejected) as e:
        ex.submit_order(Order.create(kp, "b", "buy", "ACME", 1, 10, 0))
    assert e.value.reason == "conflict"
    with pytest.raises(Rejected) as e:
        ex.submit_order(Order.create(kp, "c", "buy", "ACME", 0, 10, 1))
    assert e.value.reason == "malformed"


def test_instant_requires_proven_cash():
    accounts = {trader(0).address: Account(trader(0).address, 999)}
    ex = Exchange(accounts=accounts)
    with pytest.raises(Rejected) as e:
        ex.submit_order(Order.create(trader(0), "a", "buy", "ACME", 100, 10, 0))
    assert e.value.reason == "insufficient-funds"
    # reservations stop a second order spending the same cash
    ex.submit_order(Order.create(trader(0), "b", "buy", "ACME", 99, 10, 0))
    with pytest.raises(Rejected):
        ex.submit_order(Order.create(trader(0), "c", "buy", "ACME", 1, 10, 1))
    with pytest.raises(Rejected):
        ex.submit_order(Order.create(trader(0), "d", "sell", "ACME", 1, 10, 1))


def test_cycle_mode_does_not_gate():
    ex = Exchange(SettlementMode.CYCLE, 2, accounts={})
    ex.submit_order(Order.create(trader(0), "a", "buy", "ACME", 100, 10, 0))
    assert ex.book.best("buy", "ACME") is not None


events = st.lists(
    st.tuples(st.integers(0, 3), st.sampled_from(["buy", "sell"]), st.integers(1, 50), st.integers(95, 105)),
    max_size=40,
)


@settings(max_examples=60, deadline=None)
@given(events)
def test_matching_agrees_with_reference_matcher(evts):
    d = Desk(Exchange(SettlementMode.CYCLE, 2, accounts={}))
    got = []
    for who, side, qty, price in evts:
        got.extend(d.submit(who, side, qty, price))
        assert not d.ex.book.crossed("ACME")
    expected = reference_match([(f"o{i + 1}", s, q, p) for i, (_, s, q, p) in enumerate(evts)])
    assert [(t.buy_order, t.sell_order, t.qty, t.price) for t in got] == expected


@settings(max_examples=30, deadline=None)
@given(events)
def test_matching_is_deterministic(evts):
    def run():
        d = Desk(Exchange(accounts=funded()))
        out = []
        for e in evts:
            out.extend(d.submit(*e))
        return out, encode_accounts(d.ex.accounts)

    assert run() == run()


@settings(max_examples=60, deadline=None)
@given(events)
def test_instant_mode_conserves_and_never_goes_negative(evts):
    d = Desk(Exchange(accounts=funded(cash=3000, shares=40)))
    before = asset_totals(d.ex.accounts)
    for who, side, qty, price in evts:
        try:
            d.submit(who, side, qty, price)
        except Rejected as exc:
            assert exc.reason == "insufficient-funds"
        assert negative_balances(d.ex.accounts) == []
        assert asset_totals(d.ex.accounts) == before


# -- instant settlement -----------------------------------------------------------


def _trade(qty=100, price=10):
    return Trade("b", "s", trader(0).address, trader(1).address, "ACME", qty, price, 0)


def test_settle_instant_arithmetic():
    accounts = {
        trader(0).address: Account(trader(0).address, 1000),
        trader(1).address: Account(trader(1).address, 0, {"ACME": 100}),
    }
    updated, transfers = settle_instant(_trade(), accounts)
    assert updated[trader(0).address].cash == 0 and updated[trader(0).address].holdings == {"ACME": 100}
    assert updated[trader(1).address].cash == 1000 and updated[trader(1).address].holdings == {}
    assert len(transfers) == 2
    assert accounts[trader(0).address].cash == 1000


@pytest.mark.parametrize("cash,shares", [(999, 100), (1000, 99), (0, 0)])
def test_settle_instant_failure_leaves_state_identical(cash, shares):
    accounts = {
        trader(0).address: Account(trader(0).address, cash),
        trader(1).address: Account(trader(1).address, 0, {"ACME": shares}),
    }
    before = encode_accounts(accounts)
    with pytest.raises(SettlementFailed):
        settle_instant(_trade(), accounts)
    assert encode_accounts(accounts) == before


def test_settle_instant_rejects_empty_trade():
    with pytest.raises(AssertionError):
        settle_instant(_trade(qty=0), funded())


# -- cycle settlement -------------------------------------------------------------

A, B, C = (trader(i).address for i in range(3))


def test_offsetting_obligations_net_to_nothing():
    obs = [Obligation(A, B, "ACME", 100, 0), Obligation(B, A, "ACME", 100, 0)]
    r = settle_cycle(obs, 0, funded(3))
    assert r.transfers == [] and r.failures == []


def test_chain_of_transfers_nets_to_one_delivery():
    obs = [Obligation(A, B, "ACME", 100, 2), Obligation(B, C, "ACME", 100, 2)]
    accounts = {A: Account(A, 0, {"ACME": 100}), B: Account(B), C: Account(C)}
    r = settle_cycle(obs, 2, accounts)
    assert [(t.src, t.dst, t.amount) for t in r.transfers] == [(A, C, 100)]
    assert r.accounts[C].holdings == {"ACME": 100} and r.accounts[B].holdings == {}


def test_bilateral_keeps_pairwise_legs():
    obs = [Obligation(A, B, "ACME", 100, 0), Obligation(B, C, "ACME", 100, 0)]
    accounts = {A: Account(A, 0, {"ACME": 100}), B: Account(B), C: Account(C)}
    r = settle_cycle(obs, 0, accounts, netting=Netting.BILATERAL)
    assert sorted((t.src, t.dst) for t in r.transfers) == sorted([(A, B), (B, C)])
    assert r.accounts[C].holdings == {"ACME": 100}


def test_t_plus_two_timing():
    d = Desk(Exchange(SettlementMode.CYCLE, 2, accounts=funded()))
    d.submit(0, "sell", 10, 50)
    d.submit(1, "buy", 10, 50)
    assert [o.due_day for o in d.ex.obligations] == [2, 2]
    for day in (0, 1):
        event = d.ex.close_day()
        assert event.day == day and event.transfers == []
    event = d.ex.close_day()
    assert event.day == 2 and len(event.transfers) == 2
    assert d.ex.accounts[trader(1).address].holdings["ACME"] == 10_010
    assert d.ex.obligations == []


def test_short_participant_fails_and_carries():
    obs = [Obligation(A, B, CASH, 500, 0), Obligation(B, A, "ACME", 5, 0), Obligation(C, B, CASH, 10, 0)]
    accounts = {A: Account(A, 100), B: Account(B, 0, {"ACME": 5}), C: Account(C, 10)}
    r = settle_cycle(obs, 0, accounts)
    # A cannot cover 500; once A's legs are pulled C's payment still clears
    assert r.failures == [A]
    assert len(r.carried) == 2 and r.accounts[B].cash == 10
    assert negative_balances(r.accounts) == []
    assert all(o.due_day == 1 for o in r.carried)
    strict = settle_cycle(obs, 0, accounts, fail_policy=FailPolicy.CANCEL)
    assert strict.carried == [] and strict.cancelled
    assert asset_totals(r.accounts) == asset_totals(accounts)


addrs = st.sampled_from([trader(i).address for i in range(5)])
obligations = st.lists(
    st.builds(Obligation, addrs, addrs, st.sampled_from([CASH, "ACME", "GLOBEX"]), st.integers(1, 1000), st.just(0)),
    max_size=30,
)


def _flat(accounts):
    out = {}
    for addr, acct in accounts.items():
        if acct.cash:
            out[(addr, CASH)] = acct.cash
        for s, q in acct.holdings.items():
            if q:
                out[(addr, s)] = q
    return out


@settings(max_examples=150, deadline=None)
@given(obligations, st.sampled_from(list(Netting)))
def test_netting_matches_gross_application_when_solvent(obs, netting):
    accounts = funded(5, cash=50_000, shares=50_000, symbols=("ACME", "GLOBEX"))
    r = settle_cycle(obs, 0, accounts, netting=netting)
    assert r.failures == []
    assert _flat(r.accounts) == gross_apply([(o.src, o.dst, o.asset, o.amount) for o in obs], _flat(accounts))
    assert encode_accounts(r.accounts) == encode_accounts(apply_obligations_gross(obs, accounts))


@settings(max_examples=150, deadline=None)
@given(obligations, st.integers(0, 600))
def test_cycle_conserves_and_leaves_no_negatives(obs, balance):
    accounts = funded(5, cash=balance, shares=balance, symbols=("ACME", "GLOBEX"))
    r = settle_cycle(obs, 0, accounts)
    assert asset_totals(r.accounts) == asset_totals(accounts)
    assert negative_balances(r.accounts) == []
    assert len(r.carried) + len(r.pending) <= len(obs)


# -- conflicts -----------------------------------------------------------------------


def test_detect_conflict_examples():
    kp = trader(0)
    a = transfer_tx(kp, 7, B, CASH, 5)
    b = transfer_tx(kp, 7, C, CASH, 5)
    [group] = detect_conflict([a, b])
    assert len(group) == 2
    assert detect_conflict([a, a]) == [] and dedupe([a, a]) == [a]
    assert detect_conflict([a, transfer_tx(kp, 8, C, CASH, 5)]) == []


def test_detect_conflict_on_orders():
    o1 = Order.create(trader(0), "x", "buy", "ACME", 1, 10, 3)
    o2 = Order.create(trader(0), "y", "buy", "ACME", 2, 10, 3)
    assert len(detect_conflict([o1, o2, o1])) == 1


# -- posting ---------------------------------------------------------------------------


def test_post_trades():
    matcher = keygen_from_label("matcher")
    builder = PendingBlockBuilder()
    trades = [_trade(qty=i + 1) for i in range(3)]
    txs = post_trades_to_ledger(trades, builder, matcher, matcher.address)
    assert len(txs) == 3 and all(t.kind == TxKind.TRADE and t.verify_signature() for t in txs)
    assert [t.seq for t in txs] == [0, 1, 2]
    assert len(builder.drain()) == 3 and builder.drain() == []
    assert post_trades_to_ledger([], builder, matcher, matcher.address) == []
    assert builder.queue == []
    with pytest.raises(Rejected) as e:
        post_trades_to_ledger(trades, builder, keygen_from_label("other"), matcher.address)
    assert e.value.reason == "not-matcher"
