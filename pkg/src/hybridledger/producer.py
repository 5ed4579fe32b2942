"""Assemble, mine and sign blocks on top of a chain state."""

from __future__ import annotations

from typing import Callable, Mapping, Sequence

from .consensus import pow_mine, sign_block
from .crypto import KeyPair
from .ledger import (
    Block,
    BlockHeader,
    Chain,
    ChainConfig,
    ConsensusMode,
    Transaction,
    coinbase_tx,
    merkle_root,
)
from .validation import ChainState

DEFAULT_BUDGET = 1 << 28


class ProductionError(RuntimeError):
    pass


def produce_block(
    state: ChainState,
    producer: KeyPair,
    txs: Sequence[Transaction] = (),
    *,
    timestamp: int | None = None,
    budget: int = DEFAULT_BUDGET,
    coinbase_extra: bytes = b"",
) -> Block:
    """Build the next block on ``state``: coinbase first, then ``txs``.

    PoW chains are mined (and signed when the chain is permissioned); on a
    round-robin chain ``producer`` must be the scheduled node.
    """
    cfg = state.cfg
    height = state.height + 1
    body = (coinbase_tx(producer, height, coinbase_extra), *txs)
    ts = state.tip_timestamp if timestamp is None else max(timestamp, state.tip_timestamp)
    header = BlockHeader(
        version=1,
        prev_hash=state.tip_hash,
        merkle_root=merkle_root([t.txid for t in body]),
        timestamp=ts,
        bits=state.expected_bits() if cfg.consensus_mode == ConsensusMode.POW else cfg.initial_bits,
        nonce=0,
    )
    if cfg.consensus_mode == ConsensusMode.POW:
        result = pow_mine(header, budget)
        if not result.found:
            raise ProductionError(f"no proof of work within {budget} attempts at height {height}")
        header = result.header
        block = Block(header, body)
        if cfg.requires_block_signer:
            block = sign_block(block, producer)
        return block
    if state.scheduled_node(height) != producer.address:
        raise ProductionError(f"{producer!r} is not scheduled for height {height}")
    return sign_block(Block(header, body), producer)


def extend_chain(
    chain: Chain,
    count: int,
    producers: Sequence[KeyPair] | Mapping[bytes, KeyPair],
    *,
    interval: int | None = None,
    txs_for: Callable[[int, ChainState], Sequence[Transaction]] | None = None,
    cfg: ChainConfig | None = None,
    budget: int = DEFAULT_BUDGET,
) -> Chain:
    """Append ``count`` honest blocks with deterministic timestamps.

    PoW blocks rotate through ``producers``; round-robin blocks are signed by
    whichever producer the schedule names, so every scheduled key must be present.
    """
    cfg = cfg or chain.config
    state = ChainState.from_chain(chain, cfg)
    step = int(round(cfg.target_interval)) if interval is None else interval
    by_id = (
        dict(producers)
        if isinstance(producers, Mapping)
        else {kp.address: kp for kp in producers}
    )
    ordered = list(by_id.values())
    blocks = list(chain.blocks)
    for _ in range(count):
        height = state.height + 1
        if cfg.consensus_mode == ConsensusMode.POW:
            kp = ordered[(height - 1) % len(ordered)]
        else:
            node = state.scheduled_node(height)
            if node not in by_id:
                raise ProductionError(f"missing key for scheduled node {node.hex()[:16]}")
            kp = by_id[node]
        txs = txs_for(height, state) if txs_for else ()
        block = produce_block(
            state, kp, txs, timestamp=state.tip_timestamp + step, budget=budget
        )
        state.apply(block)
        blocks.append(block)
    return Chain(tuple(blocks))
