"""Selective-scan kernels: compiled core with a pure numpy fallback.

The compiled extension (``temba.kernels._scan``) is selected at import when
available; otherwise the numpy reference implementation serves. Both expose
identical ``scan_forward`` / ``scan_backward`` signatures and the same
recurrences and series thresholds; results agree to a few ulps per step
(libm and summation-order differences, compounding mildly with T) but are
not bitwise identical.

Layout contract: the scan walks memory linearly, so callers hand over
time-last arrays. ``delta`` and ``u`` are (B, D, T), the per-step input
projections ``bt``/``ct`` are (B, T, n), the state matrix ``a`` is (D, n).
``scan_forward`` returns the outputs (B, D, T) plus state checkpoints taken
every ``seg`` steps; ``scan_backward`` recomputes states segment-wise from
those checkpoints, so memory stays O(B*D*n*T/seg) instead of O(B*D*n*T).

Set TEMBA_KERNELS=python to force the fallback (used by the benchmark and
by tests that compare the two lanes).
"""

from __future__ import annotations

import os

import numpy as np

from ..errors import ContractViolation
from . import reference

DEFAULT_SEG = 64

# stack-buffer limits baked into the compiled kernels
_COMPILED_MAX_STATE = 64
_COMPILED_MAX_SEG_STATE = 4096

try:
    from . import _scan as _compiled
except ImportError:
    _compiled = None

_forced = os.environ.get("TEMBA_KERNELS", "").strip().lower()
if _forced == "python":
    _active = None
elif _forced == "compiled" and _compiled is None:
    raise ImportError("TEMBA_KERNELS=compiled but temba.kernels._scan is not built")
else:
    _active = _compiled

BACKEND = "compiled" if _active is not None else "python"


def backend_name() -> str:
    return BACKEND


def get_backend(name: str):
    """Return the named backend module ('compiled' or 'python')."""
    if name == "python":
        return reference
    if name == "compiled":
        if _compiled is None:
            raise ContractViolation("compiled scan kernel is not built")
        return _compiled
    raise ContractViolation(f"unknown kernel backend {name!r}")


def _validate(delta, a, bt, ct, u, seg):
    B, D, T = delta.shape
    n = a.shape[1]
    if a.shape[0] != D:
        raise ContractViolation(f"scan: a has {a.shape[0]} channels, expected {D}")
    if u.shape != (B, D, T):
        raise ContractViolation(f"scan: u shape {u.shape} != {(B, D, T)}")
    if bt.shape != (B, T, n) or ct.shape != (B, T, n):
        raise ContractViolation(
            f"scan: bt/ct shapes {bt.shape}/{ct.shape} != {(B, T, n)}")
    if seg < 1:
        raise ContractViolation(f"scan: seg must be >= 1, got {seg}")
    dtypes = {x.dtype for x in (delta, a, bt, ct, u)}
    if len(dtypes) != 1 or dtypes.pop() not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ContractViolation("scan: all inputs must share one float dtype")


def _pick(n: int, seg: int):
    if _active is not None and n <= _COMPILED_MAX_STATE and seg * n <= _COMPILED_MAX_SEG_STATE:
        return _active
    return reference


def scan_forward(delta, a, bt, ct, u, seg: int = DEFAULT_SEG):
    _validate(delta, a, bt, ct, u, seg)
    return _pick(a.shape[1], seg).scan_forward(delta, a, bt, ct, u, seg)


def scan_backward(delta, a, bt, ct, u, ckpt, dy, seg: int = DEFAULT_SEG):
    _validate(delta, a, bt, ct, u, seg)
    return _pick(a.shape[1], seg).scan_backward(delta, a, bt, ct, u, ckpt, dy, seg)
