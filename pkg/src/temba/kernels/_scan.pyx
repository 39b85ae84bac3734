# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled selective-scan kernels.

Mirrors kernels/reference.py element for element: same recurrence, same
series cutoffs. Time is the innermost memory axis so each (batch, channel)
lane walks its inputs linearly; the inner state loop (i over n) is written
to auto-vectorize, including the exp calls, under -O3 -ffast-math.

State buffers live on the stack, which caps the state dimension at 64 and
seg*n at 4096; the dispatch layer falls back to the numpy kernels beyond
that.
"""

import numpy as np

from libc.math cimport exp, expf

ctypedef fused real_t:
    float
    double


cdef inline real_t _exp(real_t x) noexcept nogil:
    if real_t is float:
        return expf(x)
    else:
        return exp(x)


cdef inline real_t _phi(real_t x, real_t ex) noexcept nogil:
    cdef real_t ax = x if x >= 0 else -x
    if ax < <real_t>1e-6:
        return <real_t>1.0 + <real_t>0.5 * x + x * x * (<real_t>1.0 / <real_t>6.0)
    return (ex - <real_t>1.0) / x


cdef inline real_t _dphi(real_t x, real_t ex) noexcept nogil:
    cdef real_t ax = x if x >= 0 else -x
    if ax < <real_t>1e-3:
        return (<real_t>0.5 + x * (<real_t>1.0 / <real_t>3.0)
                + x * x * <real_t>0.125 + x * x * x * (<real_t>1.0 / <real_t>30.0))
    return (ex * (x - <real_t>1.0) + <real_t>1.0) / (x * x)


cdef void _fwd(real_t[:, :, ::1] delta, real_t[:, ::1] a,
               real_t[:, :, ::1] bt, real_t[:, :, ::1] ct,
               real_t[:, :, ::1] u, real_t[:, :, ::1] y,
               real_t[:, :, :, ::1] ckpt, Py_ssize_t seg) noexcept nogil:
    cdef Py_ssize_t B = delta.shape[0], D = delta.shape[1], T = delta.shape[2]
    cdef Py_ssize_t n = a.shape[1]
    cdef Py_ssize_t b, d, t, i, k
    cdef real_t h[64]
    cdef real_t dd, ud, acc, x, ex, hv
    for b in range(B):
        for d in range(D):
            for i in range(n):
                h[i] = 0
            for t in range(T):
                if t % seg == 0:
                    k = t // seg
                    for i in range(n):
                        ckpt[b, d, k, i] = h[i]
                dd = delta[b, d, t]
                ud = u[b, d, t]
                acc = 0
                for i in range(n):
                    x = dd * a[d, i]
                    ex = _exp(x)
                    hv = ex * h[i] + _phi(x, ex) * dd * bt[b, t, i] * ud
                    h[i] = hv
                    acc = acc + ct[b, t, i] * hv
                y[b, d, t] = acc


cdef void _bwd(real_t[:, :, ::1] delta, real_t[:, ::1] a,
               real_t[:, :, ::1] bt, real_t[:, :, ::1] ct,
               real_t[:, :, ::1] u, real_t[:, :, :, ::1] ckpt,
               real_t[:, :, ::1] dy,
               real_t[:, :, ::1] ddelta, real_t[:, ::1] da,
               real_t[:, :, ::1] dbt, real_t[:, :, ::1] dct,
               real_t[:, :, ::1] du, Py_ssize_t seg) noexcept nogil:
    cdef Py_ssize_t B = delta.shape[0], D = delta.shape[1], T = delta.shape[2]
    cdef Py_ssize_t n = a.shape[1]
    cdef Py_ssize_t nseg = (T + seg - 1) // seg
    cdef Py_ssize_t b, d, t, i, j, k, t0, t1, m
    cdef real_t h[64]
    cdef real_t s[64]
    cdef real_t arow[64]
    cdef real_t exb[64]
    cdef real_t phb[64]
    cdef real_t dpb[64]
    cdef real_t btb[64]
    cdef real_t ctb[64]
    cdef real_t hpb[64]
    cdef real_t dctb[64]
    cdef real_t dbtb[64]
    cdef real_t dab[64]
    cdef real_t hbuf[4096]
    cdef real_t dd, ud, gy, acc_d, acc_u, x, ex, hv, si
    for b in range(B):
        for d in range(D):
            # staging the transcendental math through stack-only buffers keeps
            # the exp/div loops free of memoryview writes, so they vectorize
            for i in range(n):
                s[i] = 0
                arow[i] = a[d, i]
            for k in range(nseg - 1, -1, -1):
                t0 = k * seg
                t1 = T if t0 + seg > T else t0 + seg
                m = t1 - t0
                for i in range(n):
                    h[i] = ckpt[b, d, k, i]
                for j in range(m):
                    t = t0 + j
                    dd = delta[b, d, t]
                    ud = u[b, d, t]
                    for i in range(n):
                        x = dd * arow[i]
                        ex = _exp(x)
                        h[i] = ex * h[i] + _phi(x, ex) * dd * bt[b, t, i] * ud
                        hbuf[j * n + i] = h[i]
                for j in range(m - 1, -1, -1):
                    t = t0 + j
                    dd = delta[b, d, t]
                    ud = u[b, d, t]
                    gy = dy[b, d, t]
                    acc_d = 0
                    acc_u = 0
                    for i in range(n):
                        btb[i] = bt[b, t, i]
                        ctb[i] = ct[b, t, i]
                    if j > 0:
                        for i in range(n):
                            hpb[i] = hbuf[(j - 1) * n + i]
                    else:
                        for i in range(n):
                            hpb[i] = ckpt[b, d, k, i]
                    for i in range(n):
                        x = dd * arow[i]
                        ex = _exp(x)
                        exb[i] = ex
                        phb[i] = _phi(x, ex)
                        dpb[i] = _dphi(x, ex)
                    for i in range(n):
                        hv = hbuf[j * n + i]
                        si = s[i] + gy * ctb[i]
                        dctb[i] = gy * hv
                        acc_u = acc_u + si * phb[i] * dd * btb[i]
                        dbtb[i] = si * phb[i] * dd * ud
                        acc_d = acc_d + si * (exb[i] * arow[i] * hpb[i]
                                              + (dpb[i] * arow[i] * dd + phb[i]) * btb[i] * ud)
                        dab[i] = si * (exb[i] * dd * hpb[i] + dpb[i] * dd * dd * btb[i] * ud)
                        s[i] = si * exb[i]
                    for i in range(n):
                        dct[b, t, i] += dctb[i]
                        dbt[b, t, i] += dbtb[i]
                        da[d, i] += dab[i]
                    ddelta[b, d, t] = acc_d
                    du[b, d, t] = acc_u


def scan_forward(delta, a, bt, ct, u, seg):
    B, D, T = delta.shape
    n = a.shape[1]
    nseg = (T + seg - 1) // seg
    y = np.empty_like(delta)
    ckpt = np.zeros((B, D, nseg, n), dtype=delta.dtype)
    cdef Py_ssize_t cseg = seg
    if delta.dtype == np.float32:
        _fwd[float](delta, a, bt, ct, u, y, ckpt, cseg)
    else:
        _fwd[double](delta, a, bt, ct, u, y, ckpt, cseg)
    return y, ckpt


def scan_backward(delta, a, bt, ct, u, ckpt, dy, seg):
    ddelta = np.empty_like(delta)
    da = np.zeros_like(a)
    dbt = np.zeros_like(bt)
    dct = np.zeros_like(ct)
    du = np.empty_like(u)
    cdef Py_ssize_t cseg = seg
    if delta.dtype == np.float32:
        _bwd[float](delta, a, bt, ct, u, ckpt, dy, ddelta, da, dbt, dct, du, cseg)
    else:
        _bwd[double](delta, a, bt, ct, u, ckpt, dy, ddelta, da, dbt, dct, du, cseg)
    return ddelta, da, dbt, dct, du
