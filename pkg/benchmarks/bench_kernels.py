"""Time the compiled and pure-Python kernels on the same inputs.

    python3 benchmarks/bench_kernels.py [--nonces N] [--runs R] [--repeat K]

Both backends must return identical results; the script exits non-zero if
they disagree.
"""

from __future__ import annotations

import argparse
import sys
import time

from hybridledger._kernels import backends
from hybridledger.netsim import race_uniforms


def best_of(repeat, fn):
    times = []
    result = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        result = fn()
        times.append(time.perf_counter() - t0)
    return min(times), result


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--nonces", type=int, default=200_000, help="nonces scanned per repetition")
    ap.add_argument("--runs", type=int, default=1000, help="double-spend races per cell")
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)

    impls = backends()
    prefix = bytes(range(76))
    unreachable = bytes(32)  # target 0: every nonce is tried
    u = race_uniforms(2024, args.runs, 200)
    cells = [(q, z) for q in (0.1, 0.3, 0.45) for z in (0, 1, 2, 4, 6)]

    rows, outputs = [], {}
    for name, impl in sorted(impls.items()):
        t_scan, scan = best_of(args.repeat, lambda: impl.scan_nonces(prefix, 0, args.nonces, unreachable))
        t_race, races = best_of(
            args.repeat, lambda: [impl.race_outcomes(u, q, z, 200).tolist() for q, z in cells]
        )
        outputs[name] = (scan, races)
        rows.append((name, args.nonces / t_scan, len(cells) * args.runs / t_race, t_scan, t_race))

    print(f"{'backend':<8} {'hash/s':>12} {'races/s':>12} {'scan s':>8} {'race s':>8}")
    for name, hps, rps, ts, tr in rows:
        print(f"{name:<8} {hps:>12,.0f} {rps:>12,.0f} {ts:>8.3f} {tr:>8.3f}")
    if len(rows) > 1:
        base = dict((r[0], r) for r in rows)
        if "native" in base and "python" in base:
            print(
                f"speedup  scan x{base['native'][1] / base['python'][1]:.1f}, "
                f"race x{base['native'][2] / base['python'][2]:.1f}"
            )
    else:
        print("compiled backend not built; only the fallback was timed")

    if len({repr(v) for v in outputs.values()}) != 1:
        print("backends disagree", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
