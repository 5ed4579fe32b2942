import hashlib
from dataclasses import replace

import pytest
from hypothesis import given, settings, strategies as st

from hybridledger.crypto import ZERO_DIGEST, keygen_from_label
from hybridledger.ledger import (
    HEADER_SIZE,
    Block,
    BlockHeader,
    Chain,
    ChainConfig,
    ConfigError,
    EmptyLeaves,
    Issuance,
    PermissionMode,
    Transaction,
    TxKind,
    block_hash,
    config_from_genesis,
    deserialize_header,
    make_genesis,
    merkle_proof,
    merkle_root,
    movement_of,
    read_chain,
    serialize_header,
    transfer_tx,
    verify_merkle_proof,
    write_chain,
)
from oracles import merkle as merkle_oracle

digests = st.binary(min_size=32, max_size=32)
u32 = st.integers(0, 2**32 - 1)
headers = st.builds(BlockHeader, u32, digests, digests, u32, u32, u32)


def test_zero_header_serializes_to_zero_bytes():
    assert serialize_header(BlockHeader()) == bytes(80)


def test_version_is_little_endian():
    assert serialize_header(BlockHeader(version=1)) == b"\x01\x00\x00\x00" + bytes(76)


def test_field_placement():
    h = BlockHeader(2, b"\x11" * 32, b"\x22" * 32, 0x01020304, 0x1D00FFFF, 0xAABBCCDD)
    raw = serialize_header(h)
    assert raw[4:36] == b"\x11" * 32 and raw[36:68] == b"\x22" * 32
    assert raw[68:72] == bytes([4, 3, 2, 1])
    assert raw[72:76] == bytes.fromhex("ffff001d")
    assert raw[76:80] == bytes.fromhex("ddccbbaa")


@given(headers)
def test_header_round_trip(h):
    raw = serialize_header(h)
    assert len(raw) == HEADER_SIZE
    assert deserialize_header(raw) == h


def test_header_rejects_out_of_range_fields():
    with pytest.raises(ValueError):
        BlockHeader(nonce=2**32)
    with pytest.raises(ValueError):
        BlockHeader(prev_hash=b"\x00" * 31)


def test_block_hash_of_zero_header():
    expected = hashlib.sha256(hashlib.sha256(bytes(80)).digest()).digest()
    assert block_hash(BlockHeader()) == expected


def test_block_hash_nonce_sensitivity():
    h = BlockHeader(version=1)
    assert block_hash(h) == block_hash(BlockHeader(version=1))
    assert block_hash(h) != block_hash(replace(h, nonce=1))


# -- Merkle -------------------------------------------------------------------


def test_merkle_examples():
    a, b, c, d = (hashlib.sha256(bytes([i])).digest() for i in range(4))
    assert merkle_root([a]) == a
    assert merkle_root([a, b]) == hashlib.sha256(a + b).digest()
    assert merkle_root([a, b, c, d]) != merkle_root([b, a, c, d])
    # odd level duplicates its last node
    ab = hashlib.sha256(a + b).digest()
    cc = hashlib.sha256(c + c).digest()
    assert merkle_root([a, b, c]) == hashlib.sha256(ab + cc).digest()


def test_merkle_empty():
    with pytest.raises(EmptyLeaves):
        merkle_root([])


@given(st.lists(digests, min_size=1, max_size=33))
def test_merkle_matches_recursive_oracle(leaves):
    assert merkle_root(leaves) == merkle_oracle(leaves)


@given(st.lists(digests, min_size=2, max_size=16, unique=True), st.data())
def test_merkle_order_sensitivity(leaves, data):
    perm = data.draw(st.permutations(leaves))
    if perm != leaves:
        assert merkle_root(perm) != merkle_root(leaves)


@given(st.lists(digests, min_size=1, max_size=20), st.data())
def test_merkle_inclusion_proof(leaves, data):
    i = data.draw(st.integers(0, len(leaves) - 1))
    root = merkle_root(leaves)
    proof = merkle_proof(leaves, i)
    assert verify_merkle_proof(leaves[i], proof, root)
    assert not verify_merkle_proof(hashlib.sha256(leaves[i]).digest(), proof, root)


# -- transactions ---------------------------------------------------------------


def test_transaction_round_trip_and_signature():
    kp = keygen_from_label("tx")
    tx = transfer_tx(kp, 3, b"\x05" * 32, "CASH", 250)
    assert Transaction.deserialize(tx.serialize()) == tx
    assert tx.verify_signature()
    mv = movement_of(tx)
    assert (mv.src, mv.dst, mv.asset, mv.amount) == (kp.address, b"\x05" * 32, "CASH", 250)
    forged = replace(tx, seq=4)
    assert not forged.verify_signature()
    assert forged.txid != tx.txid


# -- genesis and config -----------------------------------------------------------


def test_genesis_minimal():
    g = make_genesis(ChainConfig())
    assert g.header.prev_hash == ZERO_DIGEST
    assert len(g.txs) == 1 and g.txs[0].kind == TxKind.RULESET
    assert g.header.merkle_root == merkle_root(g.tx_ids())


def test_genesis_with_issuances():
    a, b = b"\x01" * 32, b"\x02" * 32
    cfg = ChainConfig(genesis_issuances=(Issuance(a, "CASH", 5), Issuance(b, "ACME", 7)))
    g = make_genesis(cfg)
    assert len(g.txs) == 3
    from hybridledger.exchange import balances_from_chain

    bal = balances_from_chain(Chain((g,)))
    assert bal[a].cash == 5 and bal[b].holdings == {"ACME": 7}


def test_distinct_configs_distinct_genesis():
    assert make_genesis(ChainConfig()).hash != make_genesis(ChainConfig(target_interval=60)).hash


@pytest.mark.parametrize(
    "kwargs",
    [
        {"permission_mode": PermissionMode.PRIVATE},
        {"cycle_days": 4},
        {"max_retarget_factor": 1.0},
        {"initial_bits": 0},
        {"epoch_length": 0},
    ],
)
def test_invalid_config(kwargs):
    with pytest.raises(ConfigError):
        make_genesis(ChainConfig(**kwargs))


def test_config_dict_round_trip(rr_cfg):
    assert ChainConfig.from_dict(rr_cfg.to_dict()) == rr_cfg
    assert config_from_genesis(make_genesis(rr_cfg)) == rr_cfg


def test_config_rejects_unknown_field():
    with pytest.raises(ConfigError):
        ChainConfig.from_dict({"difficulty": 3})


# -- chains ------------------------------------------------------------------------


def test_chain_linkage(pow_chain):
    assert pow_chain.height == 100
    for i in range(1, len(pow_chain.blocks)):
        assert pow_chain.blocks[i].header.prev_hash == pow_chain.blocks[i - 1].hash


def test_block_and_chain_round_trip(pow_chain, rr_chain, tmp_path):
    b = rr_chain.blocks[5]
    assert Block.deserialize(b.serialize()) == b
    for chain in (pow_chain, rr_chain):
        assert Chain.deserialize(chain.serialize()) == chain
    write_chain(rr_chain, tmp_path / "c.hldg")
    raw = (tmp_path / "c.hldg").read_bytes()
    assert raw[:4] == b"HLDG" and raw[4:8] == b"\x01\x00\x00\x00"
    assert int.from_bytes(raw[8:12], "little") == 101
    assert read_chain(tmp_path / "c.hldg").tip_hash == rr_chain.tip_hash


def test_chain_file_bad_magic():
    with pytest.raises(ValueError):
        Chain.deserialize(b"XXXX" + bytes(8))


@settings(max_examples=30)
@given(st.binary(max_size=200))
def test_deserialize_garbage_raises_value_error(data):
    try:
        Chain.deserialize(b"HLDG\x01\x00\x00\x00" + data)
    except ValueError:
        pass
