"""Hashing, addresses and Ed25519 signatures."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

DIGEST_SIZE = 32
ZERO_DIGEST = bytes(DIGEST_SIZE)

SCHEME_ED25519 = 0x01
SCHEME_NAMES = {SCHEME_ED25519: "ed25519"}
SIGNATURE_SIZE = 64


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def double_sha256(data: bytes) -> bytes:
    return hashlib.sha256(hashlib.sha256(data).digest()).digest()


def hexd(digest: bytes) -> str:
    """Lowercase hex rendering used in every textual report."""
    return digest.hex()


def parse_digest(text: str) -> bytes:
    value = bytes.fromhex(text.strip())
    if len(value) != DIGEST_SIZE:
        raise ValueError(f"expected 64 hex characters, got {len(text.strip())}")
    return value


def address_of(public_key: bytes) -> bytes:
    """Address (and node id) of a public key: sha256 of its raw bytes."""
    return sha256(public_key)


@dataclass(frozen=True)
class KeyPair:
    private_key: bytes
    public_key: bytes
    scheme: int = SCHEME_ED25519

    @property
    def address(self) -> bytes:
        return address_of(self.public_key)

    def sign(self, message: bytes) -> bytes:
        return sign(self.private_key, message)

    def __repr__(self) -> str:
        return f"KeyPair(address={self.address.hex()[:16]}...)"


def keygen(seed: bytes) -> KeyPair:
    """Deterministic Ed25519 key pair; the 32-byte seed is the private key."""
    if len(seed) != 32:
        raise ValueError("key seed must be exactly 32 bytes")
    sk = Ed25519PrivateKey.from_private_bytes(seed)
    pk = sk.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)
    return KeyPair(private_key=bytes(seed), public_key=pk)


def keygen_from_label(*parts: object) -> KeyPair:
    """Key pair derived from arbitrary labels, for fixtures and simulation rosters."""
    material = "\x1f".join(str(p) for p in parts).encode("utf-8")
    return keygen(sha256(b"hybridledger/key\x00" + material))


def sign(private_key: bytes, message: bytes) -> bytes:
    return Ed25519PrivateKey.from_private_bytes(private_key).sign(message)


def verify(public_key: bytes, message: bytes, signature: bytes) -> bool:
    """Verify a signature. Malformed keys or signatures simply fail."""
    if len(public_key) != 32 or len(signature) != SIGNATURE_SIZE:
        return False
    try:
        Ed25519PublicKey.from_public_bytes(public_key).verify(signature, message)
    except (InvalidSignature, ValueError):
        return False
    return True


# Key files hold hex(scheme id byte || key bytes) on a single line.

def encode_key(scheme: int, key: bytes) -> str:
    return (bytes([scheme]) + key).hex()


def decode_key(text: str) -> tuple[int, bytes]:
    raw = bytes.fromhex(text.strip())
    if not raw or raw[0] not in SCHEME_NAMES:
        raise ValueError("unknown signature scheme in key file")
    key = raw[1:]
    if len(key) != 32:
        raise ValueError("key file must carry a 32-byte key")
    return raw[0], key


def write_keypair(kp: KeyPair, path: Path) -> tuple[Path, Path]:
    path = Path(path)
    pub = path.with_name(path.name + ".pub")
    path.write_text(encode_key(kp.scheme, kp.private_key) + "\n")
    pub.write_text(encode_key(kp.scheme, kp.public_key) + "\n")
    return path, pub


def read_keypair(path: Path) -> KeyPair:
    _, sk = decode_key(Path(path).read_text())
    return keygen(sk)


def read_public_key(path: Path) -> bytes:
    return decode_key(Path(path).read_text())[1]
