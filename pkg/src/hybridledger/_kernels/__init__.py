"""Hot kernels with a compiled backend and a pure-Python fallback.

The compiled module is used when it was built and imports cleanly. Set
``HYBRIDLEDGER_PURE_PYTHON=1`` to force the fallback.
"""

from __future__ import annotations

import os

from . import _pure

if os.environ.get("HYBRIDLEDGER_PURE_PYTHON", "") not in ("", "0"):
    _impl = _pure
    BACKEND = "python"
else:
    try:
        from . import _native as _impl  # type: ignore[no-redef]

        BACKEND = "native"
    except ImportError:
        _impl = _pure
        BACKEND = "python"

scan_nonces = _impl.scan_nonces
race_outcomes = _impl.race_outcomes


def backends() -> dict[str, object]:
    """Every importable backend by name, for equivalence tests and benchmarks."""
    found: dict[str, object] = {"python": _pure}
    try:
        from . import _native

        found["native"] = _native
    except ImportError:
        pass
    return found


__all__ = ["BACKEND", "backends", "race_outcomes", "scan_nonces"]
