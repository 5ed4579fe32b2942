"""Block production rights and fork choice.

Proof-of-work with compact difficulty targets and windowed retargeting,
cumulative-work fork choice, seeded round-robin schedules for the permitted
clearing set, and stake-weighted election of the matching leader.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Mapping, Sequence

from . import _kernels
from .crypto import KeyPair, address_of, sha256, verify
from .ledger import (
    Block,
    BlockHeader,
    BlockSignature,
    Chain,
    ChainConfig,
    ConfigError,
    ConsensusMode,
    serialize_header,
)

NONCE_SPACE = 1 << 32
# A target of 2**256 accepts every digest.
POW_LIMIT = 1 << 256
# Work is kept as an integer scaled by 2**32 so trivial targets still count.
_WORK_SCALE_BITS = 32


class RetargetError(ValueError):
    pass


class NoCandidates(ValueError):
    pass


class NotScheduled(PermissionError):
    pass


# --------------------------------------------------------------------------
# compact difficulty encoding


def expand_bits(bits: int) -> int:
    """target = mantissa * 256**(exponent - 3); the mantissa is an unsigned 24-bit value."""
    exponent = (bits >> 24) & 0xFF
    mantissa = bits & 0xFFFFFF
    if exponent >= 3:
        return mantissa << (8 * (exponent - 3))
    return mantissa >> (8 * (3 - exponent))


def compress_target(target: int) -> int:
    """Smallest-exponent compact form whose expansion is >= ``target``.

    Rounds the mantissa up, so ``expand_bits(compress_target(t)) >= t`` and the
    excess is below one unit of the mantissa's last place.
    """
    if target < 0:
        raise ValueError("target must be non-negative")
    if target == 0:
        return 0
    exponent = max(3, (target.bit_length() + 7) // 8)
    while True:
        shift = 8 * (exponent - 3)
        mantissa = -(-target >> shift) if shift else target
        if mantissa < (1 << 24):
            break
        exponent += 1
    if exponent > 0xFF:
        raise ValueError("target too large for compact encoding")
    return (exponent << 24) | mantissa


@dataclass(frozen=True)
class DifficultyTarget:
    bits: int
    expanded: int

    @classmethod
    def from_bits(cls, bits: int) -> "DifficultyTarget":
        return cls(bits, expand_bits(bits))

    @classmethod
    def from_target(cls, target: int) -> "DifficultyTarget":
        bits = compress_target(target)
        return cls(bits, expand_bits(bits))

    @property
    def minable(self) -> bool:
        return self.expanded > 0


def leading_zero_bits_target(zero_bits: int) -> DifficultyTarget:
    """Target that requires ``zero_bits`` leading zero bits in the block hash."""
    return DifficultyTarget.from_target(1 << (256 - zero_bits))


def block_work(bits: int) -> int:
    return (1 << (256 + _WORK_SCALE_BITS)) // (expand_bits(bits) + 1)


def chain_work(chain: Chain) -> int:
    return sum(block_work(b.header.bits) for b in chain.blocks)


# --------------------------------------------------------------------------
# proof of work


def check_pow(h: BlockHeader) -> bool:
    return int.from_bytes(h.hash, "big") < expand_bits(h.bits)


@dataclass(frozen=True)
class MineResult:
    found: bool
    iterations: int
    header: BlockHeader | None = None

    @property
    def nonce(self) -> int | None:
        return self.header.nonce if self.header else None

    @property
    def digest(self) -> bytes | None:
        return self.header.hash if self.header else None


def pow_mine(
    template: BlockHeader,
    budget: int,
    *,
    start_nonce: int = 0,
    workers: int = 1,
    chunk: int = 1 << 16,
) -> MineResult:
    """Scan nonces upward from ``start_nonce`` until the header meets its target.

    When the 32-bit nonce space runs out the timestamp is bumped by one second
    and the scan restarts at nonce 0. ``budget`` bounds the hash attempts.
    With ``workers > 1`` each round splits a block of nonces across threads and
    keeps the lowest hit, so the result equals the sequential scan.
    """
    if budget < 1:
        raise ValueError("budget must be at least 1")
    target = expand_bits(template.bits)
    if target == 0:
        return MineResult(False, budget)
    if target >= POW_LIMIT:
        return MineResult(True, 1, replace(template, nonce=start_nonce))
    target_be = target.to_bytes(32, "big")
    header = template
    nonce = start_nonce
    done = 0
    while done < budget:
        prefix = serialize_header(header)[:76]
        span = min(budget - done, NONCE_SPACE - nonce)
        if workers > 1:
            hit, tried = _scan_parallel(prefix, nonce, span, target_be, workers, chunk)
        else:
            hit, tried = _kernels.scan_nonces(prefix, nonce, span, target_be)
        done += tried
        if hit >= 0:
            return MineResult(True, done, replace(header, nonce=hit))
        nonce += tried
        if nonce >= NONCE_SPACE:
            if header.timestamp >= 0xFFFFFFFF:
                break
            header = replace(header, timestamp=header.timestamp + 1, nonce=0)
            nonce = 0
    return MineResult(False, done)


def _scan_parallel(
    prefix: bytes, start: int, span: int, target_be: bytes, workers: int, chunk: int
) -> tuple[int, int]:
    with ThreadPoolExecutor(max_workers=workers) as pool:
        offset = 0
        while offset < span:
            round_span = min(span - offset, workers * chunk)
            starts = list(range(start + offset, start + offset + round_span, chunk))
            futures = [
                pool.submit(
                    _kernels.scan_nonces,
                    prefix,
                    s,
                    min(chunk, start + offset + round_span - s),
                    target_be,
                )
                for s in starts
            ]
            hits = [f.result()[0] for f in futures]
            found = [h for h in hits if h >= 0]
            if found:
                best = min(found)
                return best, best - start + 1
            offset += round_span
    return -1, span


def retarget(
    current: DifficultyTarget, window_timestamps: Sequence[float], cfg: ChainConfig
) -> DifficultyTarget:
    """Scale the target by actual/expected window duration, clamped by the retarget factor."""
    if len(window_timestamps) != cfg.retarget_window + 1:
        raise RetargetError(
            f"need {cfg.retarget_window + 1} timestamps, got {len(window_timestamps)}"
        )
    for a, b in zip(window_timestamps, window_timestamps[1:]):
        if b < a:
            raise RetargetError("window timestamps are not monotonic")
    actual = Fraction(window_timestamps[-1]) - Fraction(window_timestamps[0])
    expected = Fraction(cfg.retarget_window) * Fraction(cfg.target_interval)
    factor = Fraction(cfg.max_retarget_factor)
    old = current.expanded
    new = Fraction(old) * actual / expected
    new = min(max(new, Fraction(old) / factor), Fraction(old) * factor)
    value = min(max(math.floor(new), 1), POW_LIMIT)
    return DifficultyTarget.from_target(value)


def next_bits(cfg: ChainConfig, height: int, prev_bits: int, timestamps: Sequence[int]) -> int:
    """Required ``bits`` for the block at ``height``.

    ``timestamps`` holds header timestamps for heights ``0 .. height-1``. A new
    target takes effect on the block after every full retarget window.
    """
    window = cfg.retarget_window
    last = height - 1
    if cfg.consensus_mode != ConsensusMode.POW or last < window or last % window:
        return prev_bits
    stamps = timestamps[last - window : last + 1]
    return retarget(DifficultyTarget.from_bits(prev_bits), stamps, cfg).bits


# --------------------------------------------------------------------------
# fork choice


def fork_choice(candidates: Sequence[Chain]) -> Chain:
    """Greatest cumulative work wins; ties keep the earliest candidate (first seen)."""
    if not candidates:
        raise NoCandidates("fork_choice needs at least one chain")
    genesis = candidates[0].genesis.hash
    best, best_work = None, -1
    for chain in candidates:
        if chain.genesis.hash != genesis:
            raise ValueError("fork-choice candidates must share a genesis block")
        work = chain_work(chain)
        if work > best_work:
            best, best_work = chain, work
    return best


# --------------------------------------------------------------------------
# round-robin production


class HashDRBG:
    """Counter-mode SHA-256 generator; identical output on every platform."""

    def __init__(self, seed: bytes, domain: bytes = b"rr") -> None:
        self._key = domain + b"\x00" + seed
        self._counter = 0
        self._pool = b""

    def _u64(self) -> int:
        if len(self._pool) < 8:
            self._pool += sha256(self._key + self._counter.to_bytes(8, "little"))
            self._counter += 1
        out, self._pool = self._pool[:8], self._pool[8:]
        return int.from_bytes(out, "little")

    def randbelow(self, n: int) -> int:
        if n <= 0:
            raise ValueError("n must be positive")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            x = self._u64()
            if x < limit:
                return x % n


@dataclass(frozen=True)
class Schedule:
    epoch: int
    order: tuple[bytes, ...]

    def node_for_slot(self, slot: int) -> bytes:
        return self.order[slot % len(self.order)]


def rr_schedule(epoch_seed: bytes, permitted: Sequence[bytes], epoch: int = 0) -> Schedule:
    """Fisher-Yates permutation of ``permitted`` driven by a generator keyed on the seed."""
    if not permitted:
        raise ConfigError("round-robin schedule needs at least one permitted node")
    order = list(permitted)
    rng = HashDRBG(epoch_seed)
    for i in range(len(order) - 1, 0, -1):
        j = rng.randbelow(i + 1)
        order[i], order[j] = order[j], order[i]
    return Schedule(epoch, tuple(order))


def epoch_and_slot(height: int, epoch_length: int) -> tuple[int, int]:
    if height < 1:
        raise ValueError("genesis has no production slot")
    return (height - 1) // epoch_length, (height - 1) % epoch_length


def epoch_seed_height(epoch: int, epoch_length: int) -> int:
    """Height of the block whose hash seeds ``epoch``: genesis for epoch 0."""
    return epoch * epoch_length


def scheduled_node(chain: Chain, height: int, cfg: ChainConfig) -> bytes:
    """Node allowed to produce ``height`` on ``chain`` (which must reach the seed block)."""
    epoch, slot = epoch_and_slot(height, cfg.epoch_length)
    seed = chain.blocks[epoch_seed_height(epoch, cfg.epoch_length)].hash
    return rr_schedule(seed, cfg.writer_ids, epoch).node_for_slot(slot)


def sign_block(block: Block, signer: KeyPair) -> Block:
    return Block(block.header, block.txs, BlockSignature(signer.address, signer.sign(block.hash)))


def rr_produce(block: Block, signer: KeyPair, slot: int, schedule: Schedule) -> Block:
    if schedule.node_for_slot(slot) != address_of(signer.public_key):
        raise NotScheduled(f"signer is not scheduled for slot {slot} of epoch {schedule.epoch}")
    return sign_block(block, signer)


def verify_block_signature(block: Block, cfg: ChainConfig, expected_node: bytes | None) -> str | None:
    """Signer checks shared by every signed mode; returns a failure reason or None."""
    signer = block.signer
    if signer is None:
        return "bad-signer"
    if expected_node is not None and signer.node_id != expected_node:
        return "bad-signer"
    key = cfg.writer_key(signer.node_id)
    if key is None:
        return "bad-signer"
    if not verify(key, block.hash, signer.signature):
        return "bad-signature"
    return None


# --------------------------------------------------------------------------
# stake-weighted matcher election


def pos_elect_matcher(stakes: Mapping[bytes, int], seed: bytes) -> bytes:
    """Pick a node with probability stake/total from a deterministic draw on ``seed``."""
    total = sum(stakes.values())
    if any(s < 0 for s in stakes.values()):
        raise ConfigError("stakes must be non-negative")
    if total <= 0:
        raise ConfigError("total stake must be positive to elect a matcher")
    draw = int.from_bytes(sha256(seed + b"pos")[:16], "big") % total
    acc = 0
    for node in sorted(stakes):
        acc += stakes[node]
        if draw < acc:
            return node
    raise AssertionError("unreachable: draw below total stake")
