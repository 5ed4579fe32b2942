"""Block and chain validation, tamper localization and cross-participant checks."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

from . import consensus
from .consensus import check_pow
from .ledger import (
    GENESIS_KINDS,
    SEQUENCED_KINDS,
    Block,
    Chain,
    ChainConfig,
    ConsensusMode,
    TxKind,
    coinbase_height,
    make_genesis,
)


class Reason(str, enum.Enum):
    BAD_PREV_HASH = "bad-prev-hash"
    BAD_MERKLE = "bad-merkle"
    BAD_POW = "bad-pow"
    BAD_SIGNER = "bad-signer"
    BAD_SIGNATURE = "bad-signature"
    CONFLICT = "conflict"
    MALFORMED = "malformed"


@dataclass(frozen=True)
class ValidationReport:
    valid: bool
    first_invalid_height: int | None = None
    reason: Reason | None = None
    detail: str = ""

    def __post_init__(self) -> None:
        if self.valid != (self.first_invalid_height is None):
            raise ValueError("valid iff first_invalid_height is absent")

    @classmethod
    def ok(cls) -> "ValidationReport":
        return cls(True)

    @classmethod
    def fail(cls, height: int, reason: Reason, detail: str = "") -> "ValidationReport":
        return cls(False, height, Reason(reason), detail)


@dataclass
class ChainState:
    """What validating the next block needs to know about the chain below it.

    Grows one block at a time via :meth:`apply`; :meth:`copy` forks it for a
    competing branch.
    """

    cfg: ChainConfig
    height: int
    tip_hash: bytes
    tip_timestamp: int
    bits: int
    timestamps: list[int] = field(default_factory=list)
    used_seqs: dict[tuple[bytes, int], bytes] = field(default_factory=dict)
    epoch_seeds: dict[int, bytes] = field(default_factory=dict)
    _schedules: dict[int, consensus.Schedule] = field(default_factory=dict, repr=False)

    @classmethod
    def at_genesis(cls, genesis: Block, cfg: ChainConfig) -> "ChainState":
        return cls(
            cfg=cfg,
            height=0,
            tip_hash=genesis.hash,
            tip_timestamp=genesis.header.timestamp,
            bits=genesis.header.bits,
            timestamps=[genesis.header.timestamp],
            epoch_seeds={0: genesis.hash},
        )

    @classmethod
    def from_chain(cls, chain: Chain, cfg: ChainConfig | None = None) -> "ChainState":
        cfg = cfg or chain.config
        state = cls.at_genesis(chain.genesis, cfg)
        for block in chain.blocks[1:]:
            state.apply(block)
        return state

    def copy(self) -> "ChainState":
        return ChainState(
            cfg=self.cfg,
            height=self.height,
            tip_hash=self.tip_hash,
            tip_timestamp=self.tip_timestamp,
            bits=self.bits,
            timestamps=list(self.timestamps),
            used_seqs=dict(self.used_seqs),
            epoch_seeds=dict(self.epoch_seeds),
            _schedules=dict(self._schedules),
        )

    # -- expectations for the next block ----------------------------------

    def expected_bits(self) -> int:
        return consensus.next_bits(self.cfg, self.height + 1, self.bits, self.timestamps)

    def schedule_for(self, height: int) -> consensus.Schedule:
        epoch, _ = consensus.epoch_and_slot(height, self.cfg.epoch_length)
        if epoch not in self._schedules:
            seed = self.epoch_seeds[epoch]
            self._schedules[epoch] = consensus.rr_schedule(seed, self.cfg.writer_ids, epoch)
        return self._schedules[epoch]

    def scheduled_node(self, height: int | None = None) -> bytes:
        height = self.height + 1 if height is None else height
        _, slot = consensus.epoch_and_slot(height, self.cfg.epoch_length)
        return self.schedule_for(height).node_for_slot(slot)

    def seq_used(self, sender: bytes, seq: int) -> bool:
        return (sender, seq) in self.used_seqs

    # -- growth ------------------------------------------------------------

    def apply(self, block: Block) -> None:
        self.height += 1
        self.tip_hash = block.hash
        self.tip_timestamp = block.header.timestamp
        self.bits = block.header.bits
        self.timestamps.append(block.header.timestamp)
        for tx in block.txs:
            if tx.kind in SEQUENCED_KINDS:
                self.used_seqs[(tx.sender_address, tx.seq)] = tx.txid
        if self.height % self.cfg.epoch_length == 0:
            self.epoch_seeds[self.height // self.cfg.epoch_length] = block.hash


def validate_block(
    b: Block, prev: Block, cfg: ChainConfig, ctx: ChainState
) -> ValidationReport:
    """Check ``b`` as the successor of ``prev``; ``ctx`` is the chain state at ``prev``.

    Checks run in order: linkage, Merkle commitment, timestamp, consensus proof,
    then per-transaction signatures and sequence conflicts. The first failure
    is reported.
    """
    height = ctx.height + 1
    if ctx.tip_hash != prev.hash:
        raise ValueError("context does not describe the given predecessor")

    if b.header.prev_hash != prev.hash:
        return ValidationReport.fail(height, Reason.BAD_PREV_HASH)

    if not b.txs:
        return ValidationReport.fail(height, Reason.MALFORMED, "empty transaction list")
    if b.header.merkle_root != b.computed_merkle_root():
        return ValidationReport.fail(height, Reason.BAD_MERKLE)

    if b.header.timestamp < prev.header.timestamp:
        return ValidationReport.fail(height, Reason.MALFORMED, "timestamp decreases")

    failure = _check_proof(b, cfg, ctx, height)
    if failure is not None:
        return ValidationReport.fail(height, failure)

    seen: set[tuple[bytes, int]] = set()
    coinbases = 0
    for tx in b.txs:
        if tx.kind in GENESIS_KINDS:
            return ValidationReport.fail(height, Reason.MALFORMED, f"{tx.kind.name} outside genesis")
        if not tx.verify_signature():
            return ValidationReport.fail(height, Reason.BAD_SIGNATURE, f"tx {tx.txid.hex()}")
        if tx.kind == TxKind.COINBASE:
            coinbases += 1
            if coinbases > 1 or tx.seq != height or coinbase_height(tx) != height:
                return ValidationReport.fail(height, Reason.MALFORMED, "bad coinbase")
        if tx.kind in SEQUENCED_KINDS:
            key = (tx.sender_address, tx.seq)
            if key in seen or ctx.seq_used(*key):
                return ValidationReport.fail(
                    height, Reason.CONFLICT, f"sequence {tx.seq} reused by {key[0].hex()}"
                )
            seen.add(key)
    return ValidationReport.ok()


def _check_proof(b: Block, cfg: ChainConfig, ctx: ChainState, height: int) -> Reason | None:
    if cfg.consensus_mode == ConsensusMode.POW:
        if b.header.bits != ctx.expected_bits():
            return Reason.BAD_POW
        if not check_pow(b.header):
            return Reason.BAD_POW
        if cfg.requires_block_signer:
            failure = consensus.verify_block_signature(b, cfg, None)
            return Reason(failure) if failure else None
        return None
    failure = consensus.verify_block_signature(b, cfg, ctx.scheduled_node(height))
    return Reason(failure) if failure else None


def validate_genesis(genesis: Block, cfg: ChainConfig) -> ValidationReport:
    expected = make_genesis(cfg)
    if genesis.header.prev_hash != expected.header.prev_hash:
        return ValidationReport.fail(0, Reason.BAD_PREV_HASH)
    if not genesis.txs or genesis.header.merkle_root != genesis.computed_merkle_root():
        return ValidationReport.fail(0, Reason.BAD_MERKLE)
    if genesis != expected:
        return ValidationReport.fail(0, Reason.MALFORMED, "genesis does not match the ruleset")
    return ValidationReport.ok()


def validate_chain(c: Chain, cfg: ChainConfig | None = None) -> ValidationReport:
    """Validate from genesis upward; reports the smallest failing height."""
    if cfg is None:
        try:
            cfg = c.config
        except ValueError as exc:
            return ValidationReport.fail(0, Reason.MALFORMED, str(exc))
    report = validate_genesis(c.genesis, cfg)
    if not report.valid:
        return report
    state = ChainState.at_genesis(c.genesis, cfg)
    for i in range(1, len(c.blocks)):
        report = validate_block(c.blocks[i], c.blocks[i - 1], cfg, state)
        if not report.valid:
            return report
        state.apply(c.blocks[i])
    return ValidationReport.ok()


@dataclass(frozen=True)
class TamperReport:
    height: int | None
    invalidated: int
    reason: Reason | None = None

    @property
    def tampered(self) -> bool:
        return self.height is not None


def locate_tamper(c: Chain, cfg: ChainConfig | None = None) -> TamperReport:
    """First invalid height plus the number of blocks from there to the tip."""
    report = validate_chain(c, cfg)
    if report.valid:
        return TamperReport(None, 0)
    h = report.first_invalid_height
    return TamperReport(h, c.height - h + 1, report.reason)


class CrossCheck(str, enum.Enum):
    MATCH = "Match"
    MISMATCH = "Mismatch"


class HeightUnknown(LookupError):
    pass


def cross_check(local: Chain, claimed_tip: tuple[int, bytes]) -> CrossCheck:
    """Compare a claimed (height, block hash) against our own copy. No tx data is read."""
    height, digest = claimed_tip
    if height < 0 or height > local.height:
        raise HeightUnknown(f"height {height} beyond local tip {local.height}")
    return CrossCheck.MATCH if local.blocks[height].hash == digest else CrossCheck.MISMATCH
