"""Pure numpy scan kernels, numerically identical to the compiled core.

Vectorized over (B, D) lanes with a Python loop over time. Serves as the
import-time fallback and as the comparison lane for the kernel benchmark.
"""

from __future__ import annotations

import numpy as np

PHI_SERIES_CUTOFF = 1e-6    # below this |x|, (e^x - 1)/x uses its series
DPHI_SERIES_CUTOFF = 1e-3   # the derivative cancels catastrophically near 0


def phi(x: np.ndarray, ex: np.ndarray | None = None) -> np.ndarray:
    """(e^x - 1) / x with the series limit 1 + x/2 + x^2/6 for small |x|."""
    x = np.asarray(x)
    if ex is None:
        ex = np.exp(x)
    small = np.abs(x) < PHI_SERIES_CUTOFF
    safe = np.where(small, 1.0, x)
    return np.where(small, 1.0 + 0.5 * x + x * x * (1.0 / 6.0), (ex - 1.0) / safe)


def dphi(x: np.ndarray, ex: np.ndarray | None = None) -> np.ndarray:
    """d/dx of phi: (e^x (x - 1) + 1) / x^2, series 1/2 + x/3 + x^2/8 + x^3/30."""
    x = np.asarray(x)
    if ex is None:
        ex = np.exp(x)
    small = np.abs(x) < DPHI_SERIES_CUTOFF
    safe = np.where(small, 1.0, x)
    series = 0.5 + x * (1.0 / 3.0) + x * x * 0.125 + x * x * x * (1.0 / 30.0)
    return np.where(small, series, (ex * (x - 1.0) + 1.0) / (safe * safe))


def scan_forward(delta, a, bt, ct, u, seg):
    B, D, T = delta.shape
    n = a.shape[1]
    nseg = (T + seg - 1) // seg
    y = np.empty_like(delta)
    ckpt = np.zeros((B, D, nseg, n), dtype=delta.dtype)
    h = np.zeros((B, D, n), dtype=delta.dtype)
    for t in range(T):
        if t % seg == 0:
            ckpt[:, :, t // seg, :] = h
        dd = delta[:, :, t]                       # (B, D)
        x = dd[:, :, None] * a[None, :, :]        # (B, D, n)
        ex = np.exp(x)
        ph = phi(x, ex)
        h = ex * h + (ph * dd[:, :, None]) * bt[:, t][:, None, :] * u[:, :, t][:, :, None]
        y[:, :, t] = np.einsum("bdn,bn->bd", h, ct[:, t])
    return y, ckpt


def scan_backward(delta, a, bt, ct, u, ckpt, dy, seg):
    B, D, T = delta.shape
    n = a.shape[1]
    nseg = (T + seg - 1) // seg
    ddelta = np.empty_like(delta)
    du = np.empty_like(u)
    da = np.zeros_like(a)
    dbt = np.zeros_like(bt)
    dct = np.zeros_like(ct)
    s = np.zeros((B, D, n), dtype=delta.dtype)
    hbuf = np.empty((seg, B, D, n), dtype=delta.dtype)
    for k in range(nseg - 1, -1, -1):
        t0 = k * seg
        t1 = min(T, t0 + seg)
        h = ckpt[:, :, k, :].copy()
        for j in range(t1 - t0):
            t = t0 + j
            dd = delta[:, :, t]
            x = dd[:, :, None] * a[None, :, :]
            ex = np.exp(x)
            ph = phi(x, ex)
            h = ex * h + (ph * dd[:, :, None]) * bt[:, t][:, None, :] * u[:, :, t][:, :, None]
            hbuf[j] = h
        for j in range(t1 - t0 - 1, -1, -1):
            t = t0 + j
            dd = delta[:, :, t]
            ud = u[:, :, t]
            gy = dy[:, :, t]                      # (B, D)
            hv = hbuf[j]
            hp = hbuf[j - 1] if j > 0 else ckpt[:, :, k, :]
            s = s + gy[:, :, None] * ct[:, t][:, None, :]
            dct[:, t] += np.einsum("bdn,bd->bn", hv, gy)
            x = dd[:, :, None] * a[None, :, :]
            ex = np.exp(x)
            ph = phi(x, ex)
            dp = dphi(x, ex)
            btv = bt[:, t][:, None, :]            # (B, 1, n)
            du[:, :, t] = np.einsum("bdn,bn->bd", s * ph * dd[:, :, None], bt[:, t])
            dbt[:, t] += np.einsum("bdn,bd->bn", s * ph, dd * ud)
            ddelta[:, :, t] = np.sum(
                s * (ex * a[None] * hp
                     + (dp * a[None] * dd[:, :, None] + ph) * btv * ud[:, :, None]),
                axis=2)
            da += np.sum(
                s * (ex * dd[:, :, None] * hp
                     + dp * (dd * dd)[:, :, None] * btv * ud[:, :, None]),
                axis=0)
            s = s * ex
    return ddelta, da, dbt, dct, du
