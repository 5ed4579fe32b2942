"""Pure-Python kernels, the reference for the compiled twins in ``_native.pyx``."""

from __future__ import annotations

import hashlib
import math
import numpy as np

NONCE_LIMIT = 1 << 32


def scan_nonces(prefix: bytes, start: int, count: int, target: bytes) -> tuple[int, int]:
    """Try nonces ``start .. start+count-1`` appended to a 76-byte header prefix.

    ``target`` is the 32-byte big-endian threshold. Returns ``(nonce, tried)``;
    ``nonce`` is -1 when no candidate hashed strictly below the target.
    """
    if len(prefix) != 76 or len(target) != 32:
        raise ValueError("prefix must be 76 bytes and target 32 bytes")
    if start < 0 or count < 0 or start + count > NONCE_LIMIT:
        raise ValueError("nonce range exceeds 32 bits")
    mid = hashlib.sha256(prefix[:64])
    tail = prefix[64:]
    sha = hashlib.sha256
    for nonce in range(start, start + count):
        h = mid.copy()
        h.update(tail + nonce.to_bytes(4, "little"))
        if sha(h.digest()).digest() < target:
            return nonce, nonce - start + 1
    return -1, count


def race_outcomes(uniforms: np.ndarray, q: float, z: int, horizon: int) -> np.ndarray:
    """Resolve private-chain races from a (runs, horizon+1) matrix of uniforms.

    Column ``j`` yields the number of attacker blocks mined between honest
    blocks ``j`` and ``j+1``, a geometric count with ``P(G >= k) = q**k``.
    The attacker wins once, after ``z`` honest confirmations, its chain is
    strictly longer than the honest one. Returns per run the number of
    honest blocks orphaned at publication, or -1 when the horizon expires.
    """
    runs, cols = uniforms.shape
    if cols < horizon + 1:
        raise ValueError("need horizon + 1 uniforms per run")
    out = np.full(runs, -1, dtype=np.int32)
    if q <= 0.0:
        return out
    log_q = math.log(q)
    cap = horizon + 2
    for r in range(runs):
        row = uniforms[r]
        mined = 0
        for j in range(horizon + 1):
            g = _geometric(float(row[j]), log_q, cap)
            mined += g
            if j >= z and mined - j >= 1:
                out[r] = j
                break
    return out


def _geometric(u: float, log_q: float, cap: int) -> int:
    # u in [0, 1); 1 - u in (0, 1]
    x = math.log(1.0 - u) / log_q
    if x >= cap:
        return cap
    return int(x)
