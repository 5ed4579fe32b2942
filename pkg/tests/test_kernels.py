import hashlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hybridledger import _kernels
from hybridledger.consensus import expand_bits, leading_zero_bits_target
from hybridledger.netsim import race_uniforms
from oracles import all_nonce_hits

BACKENDS = _kernels.backends()


def test_selected_backend_is_importable():
    assert _kernels.BACKEND in BACKENDS


@pytest.mark.parametrize("name", sorted(BACKENDS))
def test_scan_matches_exhaustive_oracle(name):
    impl = BACKENDS[name]
    prefix = hashlib.sha256(b"prefix").digest() * 2 + bytes(12)
    target = expand_bits(leading_zero_bits_target(7).bits)
    hits = all_nonce_hits(prefix, target, 2000)
    hit, tried = impl.scan_nonces(prefix, 0, 2000, target.to_bytes(32, "big"))
    assert hit == hits[0] and tried == hit + 1
    hit, tried = impl.scan_nonces(prefix, hits[0] + 1, 2000, target.to_bytes(32, "big"))
    assert hit == hits[1]


@pytest.mark.parametrize("name", sorted(BACKENDS))
def test_scan_miss_reports_count(name):
    hit, tried = BACKENDS[name].scan_nonces(bytes(76), 5, 300, bytes(32))
    assert (hit, tried) == (-1, 300)


@settings(max_examples=30, deadline=None)
@given(st.binary(min_size=76, max_size=76), st.integers(0, 2**32 - 2000), st.integers(4, 10))
def test_backends_agree_on_scan(prefix, start, zero_bits):
    target = expand_bits(leading_zero_bits_target(zero_bits).bits).to_bytes(32, "big")
    results = {name: impl.scan_nonces(prefix, start, 1500, target) for name, impl in BACKENDS.items()}
    assert len(set(results.values())) == 1


@pytest.mark.parametrize("q,z", [(0.0, 0), (0.1, 2), (0.3, 0), (0.3, 6), (0.45, 4)])
def test_backends_agree_on_races(q, z):
    u = race_uniforms(11, 400, 200)
    outs = [impl.race_outcomes(u, q, z, 200) for impl in BACKENDS.values()]
    for out in outs[1:]:
        assert np.array_equal(out, outs[0])
    if q == 0:
        assert (outs[0] == -1).all()
