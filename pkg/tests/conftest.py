from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from hybridledger.consensus import leading_zero_bits_target
from hybridledger.crypto import keygen_from_label
from hybridledger.ledger import (
    ChainConfig,
    ConsensusMode,
    Issuance,
    PermissionMode,
    new_chain,
    transfer_tx,
)
from hybridledger.producer import extend_chain

FIXTURES = Path(__file__).resolve().parent.parent / "src" / "hybridledger" / "fixtures"
POW_BITS = leading_zero_bits_target(12).bits


def keys(label: str, n: int):
    return [keygen_from_label(label, i) for i in range(n)]


@pytest.fixture(scope="session")
def miners():
    return keys("miner", 3)


@pytest.fixture(scope="session")
def clearers():
    return keys("clearing", 4)


@pytest.fixture(scope="session")
def payer():
    return keygen_from_label("payer")


@pytest.fixture(scope="session")
def pow_cfg(payer):
    return ChainConfig(
        initial_bits=POW_BITS,
        genesis_timestamp=1_700_000_000,
        genesis_issuances=(Issuance(payer.address, "CASH", 10_000),),
    ).validate()


def _payments(payer):
    payee = keygen_from_label("payee").address

    def txs_for(height, state):
        return [transfer_tx(payer, height - 1, payee, "CASH", 1)]

    return txs_for


@pytest.fixture(scope="session")
def pow_chain(pow_cfg, miners, payer):
    """100 blocks above genesis, each carrying a signed transfer."""
    return extend_chain(new_chain(pow_cfg), 100, miners, txs_for=_payments(payer))


@pytest.fixture(scope="session")
def rr_cfg(clearers, payer):
    return ChainConfig(
        consensus_mode=ConsensusMode.ROUND_ROBIN,
        permission_mode=PermissionMode.HYBRID,
        write_set=tuple(k.public_key for k in clearers),
        epoch_length=7,
        genesis_timestamp=1_700_000_000,
        genesis_issuances=(Issuance(payer.address, "CASH", 10_000),),
    ).validate()


@pytest.fixture(scope="session")
def rr_chain(rr_cfg, clearers, payer):
    return extend_chain(new_chain(rr_cfg), 100, clearers, txs_for=_payments(payer))


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    results = getattr(acceptance, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, title = results[n]
        terminalreporter.write_line(f"criterion {n} {'PASS' if ok else 'FAIL'}: {title}")
