"""Hash-linked block and chain structures.

A block header serializes to exactly 80 bytes and its double-SHA-256 is the
block's identity. Transactions are committed through a Merkle tree of their
ids (single SHA-256 interior nodes, odd levels duplicate the last node).
"""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass, replace
from functools import cached_property
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping, Sequence

from .codec import DecodeError, Reader, Writer
from .crypto import (
    SCHEME_NAMES,
    ZERO_DIGEST,
    KeyPair,
    address_of,
    double_sha256,
    sha256,
    verify,
)

HEADER_SIZE = 80
CASH = "CASH"

CHAIN_MAGIC = b"HLDG"
CHAIN_FORMAT_VERSION = 1


class ConfigError(ValueError):
    """Raised for an invalid genesis ruleset."""


class EmptyLeaves(ValueError):
    """Raised when a Merkle root is requested over no leaves."""


# --------------------------------------------------------------------------
# header


@dataclass(frozen=True)
class BlockHeader:
    version: int = 0
    prev_hash: bytes = ZERO_DIGEST
    merkle_root: bytes = ZERO_DIGEST
    timestamp: int = 0
    bits: int = 0
    nonce: int = 0

    def __post_init__(self) -> None:
        for name in ("version", "timestamp", "bits", "nonce"):
            value = getattr(self, name)
            if not 0 <= value <= 0xFFFFFFFF:
                raise ValueError(f"{name} out of u32 range: {value}")
        for name in ("prev_hash", "merkle_root"):
            if len(getattr(self, name)) != 32:
                raise ValueError(f"{name} must be 32 bytes")

    def serialize(self) -> bytes:
        return serialize_header(self)

    @cached_property
    def hash(self) -> bytes:
        return block_hash(self)


_HEADER = struct.Struct("<I32s32sIII")


def serialize_header(h: BlockHeader) -> bytes:
    return _HEADER.pack(h.version, h.prev_hash, h.merkle_root, h.timestamp, h.bits, h.nonce)


def deserialize_header(data: bytes) -> BlockHeader:
    if len(data) != HEADER_SIZE:
        raise DecodeError(f"header must be {HEADER_SIZE} bytes, got {len(data)}")
    version, prev, root, ts, bits, nonce = _HEADER.unpack(data)
    return BlockHeader(version, prev, root, ts, bits, nonce)


def block_hash(h: BlockHeader) -> bytes:
    return double_sha256(serialize_header(h))


# --------------------------------------------------------------------------
# transactions


class TxKind(enum.IntEnum):
    RULESET = 0
    ISSUANCE = 1
    TRANSFER = 2
    COINBASE = 3
    TRADE = 4
    SETTLEMENT = 5


# Kinds that consume a (sender, seq) slot and therefore can conflict.
SEQUENCED_KINDS = frozenset({TxKind.TRANSFER, TxKind.TRADE, TxKind.SETTLEMENT})
# Kinds only legal inside the genesis block; they carry no signature.
GENESIS_KINDS = frozenset({TxKind.RULESET, TxKind.ISSUANCE})


@dataclass(frozen=True)
class Transaction:
    kind: TxKind
    payload: bytes
    sender: bytes = b""
    seq: int = 0
    signature: bytes = b""

    def signing_bytes(self) -> bytes:
        w = Writer().u8(int(self.kind)).blob(self.sender).u64(self.seq).blob(self.payload)
        return w.getvalue()

    def serialize(self) -> bytes:
        return self.signing_bytes() + Writer().blob(self.signature).getvalue()

    @classmethod
    def deserialize(cls, data: bytes) -> "Transaction":
        r = Reader(data)
        tx = cls._read(r)
        r.expect_end()
        return tx

    @classmethod
    def _read(cls, r: Reader) -> "Transaction":
        raw_kind = r.u8()
        try:
            kind = TxKind(raw_kind)
        except ValueError:
            raise DecodeError(f"unknown transaction kind {raw_kind}") from None
        sender = r.blob()
        seq = r.u64()
        payload = r.blob()
        signature = r.blob()
        return cls(kind, payload, sender, seq, signature)

    @cached_property
    def txid(self) -> bytes:
        return sha256(self.serialize())

    @property
    def sender_address(self) -> bytes:
        return address_of(self.sender) if self.sender else ZERO_DIGEST

    def signed(self, kp: KeyPair) -> "Transaction":
        unsigned = replace(self, sender=kp.public_key, signature=b"")
        return replace(unsigned, signature=kp.sign(unsigned.signing_bytes()))

    def verify_signature(self) -> bool:
        return bool(self.sender) and verify(self.sender, self.signing_bytes(), self.signature)


@dataclass(frozen=True)
class Movement:
    """A balance change carried by a transaction: ``amount`` of ``asset`` from ``src`` to ``dst``.

    ``src`` is ``None`` for issuance.
    """

    src: bytes | None
    dst: bytes
    asset: str
    amount: int


def _movement_payload(dst: bytes, asset: str, amount: int) -> bytes:
    if amount <= 0:
        raise ValueError("amount must be positive")
    return Writer().digest(dst).text(asset).u64(amount).getvalue()


def issuance_tx(dst: bytes, asset: str, amount: int) -> Transaction:
    return Transaction(TxKind.ISSUANCE, _movement_payload(dst, asset, amount))


def transfer_tx(kp: KeyPair, seq: int, dst: bytes, asset: str, amount: int) -> Transaction:
    return Transaction(TxKind.TRANSFER, _movement_payload(dst, asset, amount), seq=seq).signed(kp)


def coinbase_tx(kp: KeyPair, height: int, extra: bytes = b"") -> Transaction:
    payload = Writer().u64(height).blob(extra).getvalue()
    return Transaction(TxKind.COINBASE, payload, seq=height).signed(kp)


def settlement_tx(
    kp: KeyPair, seq: int, src: bytes, dst: bytes, asset: str, amount: int, day: int
) -> Transaction:
    payload = Writer().digest(src).raw(_movement_payload(dst, asset, amount)).u32(day).getvalue()
    return Transaction(TxKind.SETTLEMENT, payload, seq=seq).signed(kp)


def trade_tx(kp: KeyPair, seq: int, record: bytes) -> Transaction:
    return Transaction(TxKind.TRADE, Writer().blob(record).getvalue(), seq=seq).signed(kp)


def coinbase_height(tx: Transaction) -> int:
    return Reader(tx.payload).u64()


def movement_of(tx: Transaction) -> Movement | None:
    """Decode the balance change a transaction applies, if any."""
    r = Reader(tx.payload)
    if tx.kind == TxKind.ISSUANCE:
        return Movement(None, r.digest(), r.text(), r.u64())
    if tx.kind == TxKind.TRANSFER:
        return Movement(tx.sender_address, r.digest(), r.text(), r.u64())
    if tx.kind == TxKind.SETTLEMENT:
        src = r.digest()
        return Movement(src, r.digest(), r.text(), r.u64())
    return None


# --------------------------------------------------------------------------
# Merkle commitment


def merkle_root(leaf_ids: Sequence[bytes]) -> bytes:
    if not leaf_ids:
        raise EmptyLeaves("merkle_root of an empty leaf list")
    level = [bytes(x) for x in leaf_ids]
    while len(level) > 1:
        if len(level) % 2:
            level.append(level[-1])
        level = [sha256(level[i] + level[i + 1]) for i in range(0, len(level), 2)]
    return level[0]


def merkle_proof(leaf_ids: Sequence[bytes], index: int) -> list[tuple[bytes, bool]]:
    """Sibling path for ``leaf_ids[index]``; each entry is ``(sibling, sibling_is_right)``."""
    if not leaf_ids:
        raise EmptyLeaves("merkle_proof of an empty leaf list")
    if not 0 <= index < len(leaf_ids):
        raise IndexError(index)
    path = []
    level = [bytes(x) for x in leaf_ids]
    while len(level) > 1:
        if len(level) % 2:
            level.append(level[-1])
        sibling = index ^ 1
        path.append((level[sibling], sibling > index))
        level = [sha256(level[i] + level[i + 1]) for i in range(0, len(level), 2)]
        index //= 2
    return path


def verify_merkle_proof(leaf: bytes, path: Iterable[tuple[bytes, bool]], root: bytes) -> bool:
    node = leaf
    for sibling, is_right in path:
        node = sha256(node + sibling) if is_right else sha256(sibling + node)
    return node == root


# --------------------------------------------------------------------------
# blocks and chains


@dataclass(frozen=True)
class BlockSignature:
    node_id: bytes
    signature: bytes


@dataclass(frozen=True)
class Block:
    header: BlockHeader
    txs: tuple[Transaction, ...] = ()
    signer: BlockSignature | None = None

    @cached_property
    def hash(self) -> bytes:
        return block_hash(self.header)

    def tx_ids(self) -> list[bytes]:
        return [tx.txid for tx in self.txs]

    def computed_merkle_root(self) -> bytes:
        return merkle_root(self.tx_ids()) if self.txs else ZERO_DIGEST

    def serialize(self) -> bytes:
        w = Writer().raw(serialize_header(self.header)).u32(len(self.txs))
        for tx in self.txs:
            w.blob(tx.serialize())
        if self.signer is None:
            w.u8(0)
        else:
            w.u8(1).digest(self.signer.node_id).blob(self.signer.signature)
        return w.getvalue()

    @classmethod
    def deserialize(cls, data: bytes) -> "Block":
        r = Reader(data)
        block = cls.read(r)
        r.expect_end()
        return block

    @classmethod
    def read(cls, r: Reader) -> "Block":
        header = deserialize_header(r.raw(HEADER_SIZE))
        txs = tuple(Transaction.deserialize(r.blob()) for _ in range(r.u32()))
        flag = r.u8()
        if flag == 0:
            signer = None
        elif flag == 1:
            signer = BlockSignature(r.digest(), r.blob())
        else:
            raise DecodeError(f"bad signer flag {flag}")
        return cls(header, txs, signer)

    def with_txs(self, txs: Sequence[Transaction]) -> "Block":
        """Replace the transaction list and recompute the Merkle root."""
        txs = tuple(txs)
        root = merkle_root([t.txid for t in txs]) if txs else ZERO_DIGEST
        return Block(replace(self.header, merkle_root=root), txs, self.signer)


@dataclass(frozen=True)
class Chain:
    """Blocks from genesis (height 0) to the tip; ``height`` is the tip index."""

    blocks: tuple[Block, ...]

    def __post_init__(self) -> None:
        if not self.blocks:
            raise ValueError("a chain needs at least the genesis block")
        object.__setattr__(self, "blocks", tuple(self.blocks))

    @property
    def height(self) -> int:
        return len(self.blocks) - 1

    @property
    def genesis(self) -> Block:
        return self.blocks[0]

    @property
    def tip(self) -> Block:
        return self.blocks[-1]

    @property
    def tip_hash(self) -> bytes:
        return self.blocks[-1].hash

    def __len__(self) -> int:
        return len(self.blocks)

    def __getitem__(self, i: int) -> Block:
        return self.blocks[i]

    def __iter__(self) -> Iterator[Block]:
        return iter(self.blocks)

    def append(self, block: Block) -> "Chain":
        return Chain(self.blocks + (block,))

    def prefix(self, height: int) -> "Chain":
        return Chain(self.blocks[: height + 1])

    def replace_block(self, height: int, block: Block) -> "Chain":
        blocks = list(self.blocks)
        blocks[height] = block
        return Chain(tuple(blocks))

    @cached_property
    def config(self) -> "ChainConfig":
        """The ruleset committed by the genesis block."""
        return config_from_genesis(self.genesis)

    def serialize(self) -> bytes:
        w = Writer().raw(CHAIN_MAGIC).u32(CHAIN_FORMAT_VERSION).u32(len(self.blocks))
        for b in self.blocks:
            w.raw(b.serialize())
        return w.getvalue()

    @classmethod
    def deserialize(cls, data: bytes) -> "Chain":
        r = Reader(data)
        if r.raw(4) != CHAIN_MAGIC:
            raise DecodeError("not a chain file (bad magic)")
        version = r.u32()
        if version != CHAIN_FORMAT_VERSION:
            raise DecodeError(f"unsupported chain format version {version}")
        count = r.u32()
        if count == 0:
            raise DecodeError("chain file holds no blocks")
        blocks = tuple(Block.read(r) for _ in range(count))
        r.expect_end()
        return cls(blocks)


def write_chain(chain: Chain, path: str | Path) -> None:
    Path(path).write_bytes(chain.serialize())


def read_chain(path: str | Path) -> Chain:
    return Chain.deserialize(Path(path).read_bytes())


# --------------------------------------------------------------------------
# configuration / genesis


class ConsensusMode(str, enum.Enum):
    POW = "pow"
    ROUND_ROBIN = "round_robin"


class PermissionMode(str, enum.Enum):
    PUBLIC = "public"
    PRIVATE = "private"
    HYBRID = "hybrid"


class SettlementMode(str, enum.Enum):
    INSTANT = "instant"
    CYCLE = "cycle"


class FailPolicy(str, enum.Enum):
    CARRY = "carry"
    CANCEL = "cancel"


class Netting(str, enum.Enum):
    MULTILATERAL = "multilateral"
    BILATERAL = "bilateral"


@dataclass(frozen=True)
class Issuance:
    to: bytes
    asset: str
    amount: int


@dataclass(frozen=True)
class ChainConfig:
    consensus_mode: ConsensusMode = ConsensusMode.POW
    permission_mode: PermissionMode = PermissionMode.PUBLIC
    write_set: tuple[bytes, ...] = ()
    read_open: bool = True
    settlement_mode: SettlementMode = SettlementMode.INSTANT
    cycle_days: int = 0
    target_interval: float = 600.0
    retarget_window: int = 2016
    max_retarget_factor: float = 4.0
    initial_bits: int = 0x2100FFFF
    epoch_length: int = 10
    genesis_issuances: tuple[Issuance, ...] = ()
    genesis_timestamp: int = 0
    stakes: tuple[tuple[bytes, int], ...] = ()
    fail_policy: FailPolicy = FailPolicy.CARRY
    netting: Netting = Netting.MULTILATERAL
    signature_scheme: str = "ed25519"
    chain_id: str = "hybridledger"

    def __post_init__(self) -> None:
        object.__setattr__(self, "consensus_mode", ConsensusMode(self.consensus_mode))
        object.__setattr__(self, "permission_mode", PermissionMode(self.permission_mode))
        object.__setattr__(self, "settlement_mode", SettlementMode(self.settlement_mode))
        object.__setattr__(self, "fail_policy", FailPolicy(self.fail_policy))
        object.__setattr__(self, "netting", Netting(self.netting))
        object.__setattr__(self, "write_set", tuple(bytes(k) for k in self.write_set))
        object.__setattr__(self, "genesis_issuances", tuple(self.genesis_issuances))
        object.__setattr__(
            self, "stakes", tuple(sorted((bytes(n), int(s)) for n, s in self.stakes))
        )

    @property
    def writer_ids(self) -> tuple[bytes, ...]:
        """Node ids (addresses) of the permitted writers, in configured order."""
        return tuple(address_of(k) for k in self.write_set)

    def writer_key(self, node_id: bytes) -> bytes | None:
        for key in self.write_set:
            if address_of(key) == node_id:
                return key
        return None

    @property
    def requires_block_signer(self) -> bool:
        return (
            self.consensus_mode == ConsensusMode.ROUND_ROBIN
            or self.permission_mode != PermissionMode.PUBLIC
        )

    def validate(self) -> "ChainConfig":
        from .consensus import expand_bits

        if self.permission_mode != PermissionMode.PUBLIC and not self.write_set:
            raise ConfigError("write_set must be non-empty for a permissioned chain")
        if self.consensus_mode == ConsensusMode.ROUND_ROBIN and not self.write_set:
            raise ConfigError("round-robin production needs a non-empty write_set")
        if any(len(k) != 32 for k in self.write_set):
            raise ConfigError("write_set entries must be 32-byte public keys")
        if len(set(self.write_set)) != len(self.write_set):
            raise ConfigError("duplicate key in write_set")
        if self.cycle_days not in (0, 1, 2, 3):
            raise ConfigError(f"cycle_days must be in 0..3, got {self.cycle_days}")
        if not self.max_retarget_factor > 1:
            raise ConfigError("max_retarget_factor must exceed 1")
        if not self.target_interval > 0:
            raise ConfigError("target_interval must be positive")
        if self.retarget_window < 1:
            raise ConfigError("retarget_window must be at least 1")
        if self.epoch_length < 1:
            raise ConfigError("epoch_length must be at least 1")
        if not 0 <= self.initial_bits <= 0xFFFFFFFF:
            raise ConfigError("initial_bits must fit in 32 bits")
        if self.consensus_mode == ConsensusMode.POW and expand_bits(self.initial_bits) == 0:
            raise ConfigError("initial_bits expands to a zero target; nothing could be mined")
        if not 0 <= self.genesis_timestamp <= 0xFFFFFFFF:
            raise ConfigError("genesis_timestamp out of range")
        if self.signature_scheme not in SCHEME_NAMES.values():
            raise ConfigError(f"unsupported signature scheme {self.signature_scheme!r}")
        for iss in self.genesis_issuances:
            if len(iss.to) != 32 or iss.amount <= 0 or not iss.asset:
                raise ConfigError(f"bad genesis issuance {iss}")
        for node, stake in self.stakes:
            if len(node) != 32 or stake < 0:
                raise ConfigError("stakes map node ids (32 bytes) to non-negative integers")
        return self

    # -- JSON form ---------------------------------------------------------

    def to_dict(self) -> dict[str, Any]:
        return {
            "chain_id": self.chain_id,
            "consensus_mode": self.consensus_mode.value,
            "permission_mode": self.permission_mode.value,
            "write_set": [k.hex() for k in self.write_set],
            "read_open": self.read_open,
            "settlement_mode": self.settlement_mode.value,
            "cycle_days": self.cycle_days,
            "target_interval": self.target_interval,
            "retarget_window": self.retarget_window,
            "max_retarget_factor": self.max_retarget_factor,
            "initial_bits": self.initial_bits,
            "epoch_length": self.epoch_length,
            "genesis_issuances": [
                {"to": i.to.hex(), "asset": i.asset, "amount": i.amount}
                for i in self.genesis_issuances
            ],
            "genesis_timestamp": self.genesis_timestamp,
            "stakes": {n.hex(): s for n, s in self.stakes},
            "fail_policy": self.fail_policy.value,
            "netting": self.netting.value,
            "signature_scheme": self.signature_scheme,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ChainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        kw = dict(d)
        try:
            if "write_set" in kw:
                kw["write_set"] = tuple(bytes.fromhex(k) for k in kw["write_set"])
            if "genesis_issuances" in kw:
                kw["genesis_issuances"] = tuple(
                    Issuance(bytes.fromhex(i["to"]), str(i["asset"]), int(i["amount"]))
                    for i in kw["genesis_issuances"]
                )
            if "stakes" in kw:
                kw["stakes"] = tuple((bytes.fromhex(n), int(s)) for n, s in kw["stakes"].items())
            if isinstance(kw.get("initial_bits"), str):
                kw["initial_bits"] = int(kw["initial_bits"], 0)
            cfg = cls(**kw)
        except (TypeError, ValueError, KeyError, AttributeError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"malformed config: {exc}") from None
        return cfg.validate()

    def canonical_bytes(self) -> bytes:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode("utf-8")

    @property
    def commitment(self) -> bytes:
        return sha256(self.canonical_bytes())


def ruleset_tx(cfg: ChainConfig) -> Transaction:
    body = cfg.canonical_bytes()
    return Transaction(TxKind.RULESET, Writer().digest(sha256(body)).blob(body).getvalue())


def make_genesis(cfg: ChainConfig) -> Block:
    cfg.validate()
    txs = [ruleset_tx(cfg)]
    txs += [issuance_tx(i.to, i.asset, i.amount) for i in cfg.genesis_issuances]
    header = BlockHeader(
        version=1,
        prev_hash=ZERO_DIGEST,
        merkle_root=merkle_root([t.txid for t in txs]),
        timestamp=cfg.genesis_timestamp,
        bits=cfg.initial_bits,
        nonce=0,
    )
    return Block(header, tuple(txs))


def config_from_genesis(genesis: Block) -> ChainConfig:
    if not genesis.txs or genesis.txs[0].kind != TxKind.RULESET:
        raise ConfigError("genesis block does not start with a ruleset commitment")
    r = Reader(genesis.txs[0].payload)
    digest = r.digest()
    body = r.blob()
    if sha256(body) != digest:
        raise ConfigError("ruleset commitment does not match its body")
    try:
        return ChainConfig.from_dict(json.loads(body))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"ruleset body is not JSON: {exc}") from None


def new_chain(cfg: ChainConfig) -> Chain:
    return Chain((make_genesis(cfg),))
