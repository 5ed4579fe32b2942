import hashlib

import pytest
from hypothesis import given, strategies as st

from hybridledger.codec import DecodeError, Reader, Writer
from hybridledger.crypto import (
    SCHEME_ED25519,
    address_of,
    decode_key,
    encode_key,
    keygen,
    parse_digest,
    read_keypair,
    read_public_key,
    sha256,
    sign,
    verify,
    write_keypair,
)
from oracles import SHA256_VECTORS


@pytest.mark.parametrize("msg,digest", SHA256_VECTORS.items())
def test_sha256_reference_vectors(msg, digest):
    assert sha256(msg).hex() == digest


def test_single_character_changes_digest():
    assert sha256(b"abc") != sha256(b"abd")


@given(st.binary(max_size=4096))
def test_sha256_fixed_width(data):
    assert len(sha256(data)) == 32
    assert sha256(data) == hashlib.sha256(data).digest()


def test_keygen_deterministic_and_distinct():
    a, b = keygen(b"\x01" * 32), keygen(b"\x01" * 32)
    assert a == b
    assert keygen(b"\x02" * 32).public_key != a.public_key
    assert a.address == sha256(a.public_key) == address_of(a.public_key)


def test_keygen_rejects_short_seed():
    with pytest.raises(ValueError):
        keygen(b"short")


def test_sign_verify_contract():
    kp, other = keygen(b"\x07" * 32), keygen(b"\x08" * 32)
    sig = sign(kp.private_key, b"settle 100")
    assert verify(kp.public_key, b"settle 100", sig)
    assert not verify(kp.public_key, b"settle 101", sig)
    assert not verify(other.public_key, b"settle 100", sig)


@pytest.mark.parametrize("bad", [b"", b"\x00" * 10, b"\xff" * 64, b"\x00" * 65])
def test_malformed_signature_is_false_not_error(bad):
    kp = keygen(b"\x07" * 32)
    assert verify(kp.public_key, b"m", bad) is False


def test_malformed_public_key_is_false():
    assert verify(b"\x01\x02", b"m", b"\x00" * 64) is False


def test_key_file_round_trip(tmp_path):
    kp = keygen(b"\x09" * 32)
    priv, pub = write_keypair(kp, tmp_path / "node")
    assert priv.read_text().strip().startswith(f"{SCHEME_ED25519:02x}")
    assert read_keypair(priv) == kp
    assert read_public_key(pub) == kp.public_key


def test_key_encoding_rejects_unknown_scheme():
    with pytest.raises(ValueError):
        decode_key("ff" + "00" * 32)
    assert decode_key(encode_key(SCHEME_ED25519, b"\x05" * 32)) == (SCHEME_ED25519, b"\x05" * 32)


def test_parse_digest():
    assert parse_digest("ab" * 32) == b"\xab" * 32
    for bad in ("ab", "zz" * 32, "AB" * 31):
        with pytest.raises(ValueError):
            parse_digest(bad)


@given(st.integers(0, 2**32 - 1), st.integers(0, 2**64 - 1), st.binary(max_size=64), st.text(max_size=20))
def test_codec_round_trip(a, b, blob, text):
    data = Writer().u32(a).u64(b).blob(blob).text(text).getvalue()
    r = Reader(data)
    assert (r.u32(), r.u64(), r.blob(), r.text()) == (a, b, blob, text)
    r.expect_end()


def test_codec_truncation():
    with pytest.raises(DecodeError):
        Reader(b"\x05\x00\x00\x00ab").blob()
