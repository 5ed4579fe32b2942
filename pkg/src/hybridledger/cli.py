"""Command-line interface.

Exit codes: 0 success, 1 a check found tampering, a mismatch or an invariant
violation, 2 usage or input errors.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Sequence

from .codec import DecodeError
from .crypto import hexd, keygen, keygen_from_label, parse_digest, read_keypair, write_keypair
from .ledger import (
    CHAIN_MAGIC,
    Block,
    Chain,
    ChainConfig,
    ConfigError,
    new_chain,
    read_chain,
    write_chain,
)
from .producer import ProductionError, extend_chain
from .validation import CrossCheck, HeightUnknown, cross_check, locate_tamper

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_USAGE = 2

OUT_ENV = "HYBRIDLEDGER_OUT"
EXPORT_FORMAT = "hybridledger-chain"


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# chain files in either encoding


def export_chain_json(chain: Chain) -> str:
    blocks = []
    for height, b in enumerate(chain.blocks):
        h = b.header
        blocks.append(
            {
                "height": height,
                "hash": hexd(b.hash),
                "header": {
                    "version": h.version,
                    "prev_hash": hexd(h.prev_hash),
                    "merkle_root": hexd(h.merkle_root),
                    "timestamp": h.timestamp,
                    "bits": f"0x{h.bits:08x}",
                    "nonce": h.nonce,
                },
                "txs": len(b.txs),
                "signer": hexd(b.signer.node_id) if b.signer else None,
                "raw": b.serialize().hex(),
            }
        )
    doc = {"format": EXPORT_FORMAT, "version": 1, "tip_hash": hexd(chain.tip_hash), "blocks": blocks}
    return json.dumps(doc, indent=2) + "\n"


def import_chain_json(text: str) -> Chain:
    doc = json.loads(text)
    if doc.get("format") != EXPORT_FORMAT:
        raise DecodeError("not an exported chain document")
    blocks = tuple(Block.deserialize(bytes.fromhex(b["raw"])) for b in doc["blocks"])
    return Chain(blocks)


def load_chain(path: str | Path) -> Chain:
    """Read a chain from its binary file or a JSON export, sniffing the magic bytes."""
    p = Path(path)
    try:
        data = p.read_bytes()
    except OSError as exc:
        raise UsageError(f"cannot read {p}: {exc.strerror or exc}") from None
    try:
        if data[:4] == CHAIN_MAGIC:
            return read_chain(p)
        return import_chain_json(data.decode("utf-8"))
    except (DecodeError, ValueError, KeyError, TypeError, UnicodeDecodeError) as exc:
        raise UsageError(f"{p} is not a readable chain file: {exc}") from None


# --------------------------------------------------------------------------
# verbs


def _out(msg: str = "") -> None:
    print(msg)


def cmd_keygen(args: argparse.Namespace) -> int:
    if args.seed is not None:
        kp = keygen_from_label("cli", args.seed)
    else:
        kp = keygen(os.urandom(32))
    priv, pub = write_keypair(kp, Path(args.out))
    _out(f"address {hexd(kp.address)}")
    _out(f"private key {priv}")
    _out(f"public key {pub}")
    return EXIT_OK


def _read_config(path: str) -> ChainConfig:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise UsageError(f"cannot read config: {exc.strerror or exc}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise UsageError("config must be a JSON object")
    try:
        return ChainConfig.from_dict(data)
    except ConfigError as exc:
        raise UsageError(f"invalid config: {exc}") from None


def cmd_init(args: argparse.Namespace) -> int:
    cfg = _read_config(args.config)
    chain = new_chain(cfg)
    write_chain(chain, args.out)
    _out(f"genesis {hexd(chain.genesis.hash)}")
    return EXIT_OK


def cmd_mine(args: argparse.Namespace) -> int:
    chain = load_chain(args.chain)
    keys = []
    for k in args.key:
        try:
            keys.append(read_keypair(Path(k)))
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read key {k}: {exc}") from None
    try:
        cfg = chain.config
    except ConfigError as exc:
        raise UsageError(f"chain genesis has no usable ruleset: {exc}") from None
    try:
        extended = extend_chain(chain, args.blocks, keys, interval=args.interval, cfg=cfg, budget=args.budget)
    except ProductionError as exc:
        _out(f"mining failed: {exc}")
        return EXIT_FAIL
    write_chain(extended, args.out or args.chain)
    _out(f"height {extended.height}")
    _out(f"tip {hexd(extended.tip_hash)}")
    return EXIT_OK


def cmd_run(args: argparse.Namespace) -> int:
    from dataclasses import replace

    from .netsim import ScenarioError, load_scenario, run_simulation

    try:
        scenario = load_scenario(args.scenario)
        if args.seed is not None:
            scenario = replace(scenario, rng_seed=args.seed)
        report = run_simulation(scenario)
    except ScenarioError as exc:
        raise UsageError(f"scenario error: {exc}") from None
    out_dir = Path(args.out or os.environ.get(OUT_ENV) or "hybridledger-out")
    paths = report.write(out_dir)
    sys.stdout.write(report.summary())
    _out(f"report {paths['report']}")
    return EXIT_OK if report.ok else EXIT_FAIL


def cmd_audit(args: argparse.Namespace) -> int:
    chain = load_chain(args.chain)
    finding = locate_tamper(chain)
    if args.json:
        _out(
            json.dumps(
                {
                    "valid": not finding.tampered,
                    "first_invalid": finding.height,
                    "invalidated": finding.invalidated,
                    "reason": finding.reason.value if finding.reason else None,
                    "height": chain.height,
                    "tip_hash": hexd(chain.tip_hash),
                },
                sort_keys=True,
            )
        )
    elif finding.tampered:
        _out(f"first invalid: {finding.height} ({finding.reason.value}), {finding.invalidated} blocks invalidated")
    else:
        _out("valid")
    return EXIT_FAIL if finding.tampered else EXIT_OK


def cmd_crosscheck(args: argparse.Namespace) -> int:
    chain = load_chain(args.chain)
    try:
        digest = parse_digest(args.digest)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    try:
        verdict = cross_check(chain, (args.height, digest))
    except HeightUnknown as exc:
        raise UsageError(str(exc)) from None
    _out(verdict.value)
    return EXIT_OK if verdict == CrossCheck.MATCH else EXIT_FAIL


def cmd_export(args: argparse.Namespace) -> int:
    chain = load_chain(args.chain)
    if args.format == "json":
        Path(args.out).write_text(export_chain_json(chain), encoding="utf-8")
    else:
        write_chain(chain, args.out)
    _out(f"tip {hexd(chain.tip_hash)}")
    return EXIT_OK


# --------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # noqa: D102 - argparse hook
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hybridledger", description="Hybrid permissioned ledger toolkit.")
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    k = sub.add_parser("keygen", help="create a key pair")
    k.add_argument("--out", required=True, help="private key path; the public key goes to PATH.pub")
    k.add_argument("--seed", help="derive the key deterministically from this label")
    k.set_defaults(func=cmd_keygen)

    i = sub.add_parser("init", help="write a chain file holding the genesis block")
    i.add_argument("config", help="chain config (JSON)")
    i.add_argument("--out", required=True, help="chain file to create")
    i.set_defaults(func=cmd_init)

    m = sub.add_parser("mine", help="append honest blocks")
    m.add_argument("chain")
    m.add_argument("--key", action="append", required=True, help="producer key file (repeatable)")
    m.add_argument("--blocks", type=int, default=1)
    m.add_argument("--interval", type=int, default=None, help="seconds between block timestamps")
    m.add_argument("--budget", type=int, default=1 << 28, help="hash attempts per block")
    m.add_argument("--out", help="write here instead of updating CHAIN in place")
    m.set_defaults(func=cmd_mine)

    r = sub.add_parser("run", help="run a simulation scenario")
    r.add_argument("scenario")
    r.add_argument("--out", help=f"report directory (default ${OUT_ENV} or ./hybridledger-out)")
    r.add_argument("--seed", type=int, help="override the scenario's rng_seed")
    r.set_defaults(func=cmd_run)

    a = sub.add_parser("audit", help="validate a chain and locate the first tampered block")
    a.add_argument("chain")
    a.add_argument("--json", action="store_true", help="print a JSON finding instead of text")
    a.set_defaults(func=cmd_audit)

    c = sub.add_parser("crosscheck", help="compare a claimed block hash with a local chain")
    c.add_argument("chain")
    c.add_argument("height", type=int)
    c.add_argument("digest", help="64 hex characters")
    c.set_defaults(func=cmd_crosscheck)

    e = sub.add_parser("export", help="re-encode a chain file")
    e.add_argument("chain")
    e.add_argument("--out", required=True)
    e.add_argument("--format", choices=("json", "hldg"), default="json")
    e.set_defaults(func=cmd_export)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"hybridledger {args.verb}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
