"""Bijective stride partitioning of batched sequences into phase streams.

``dilate`` splits a (B, T, D) tensor with stride eta into eta interleaved
phase streams, stacked batch-major then phase into (eta*B, ceil(T/eta), D).
Phase i (0-based) holds original positions i, i + eta, i + 2*eta, ...
Streams whose phase runs past T are zero-padded at the tail; the pad mask
marks real tokens. ``undilate`` is the exact inverse on real tokens, and
both directions are pure copies, so a round trip is bitwise lossless and
their Jacobian is a 0/1 permutation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation
from .tensor import Tensor, accum_grad, record_op


@dataclass(frozen=True)
class DilationSpec:
    """Bookkeeping to invert a dilate call.

    stride: number of interleaved phases (eta).
    batch: original batch size B.
    original_len: T before padding.
    padded_len: per-stream length ceil(T / stride).
    pad_mask: (stride * batch, padded_len) bool, True where the slot holds
        a real token.
    """
    stride: int
    batch: int
    original_len: int
    padded_len: int
    pad_mask: np.ndarray

    def time_index(self) -> tuple[np.ndarray, np.ndarray]:
        """(stride, padded_len) original-position grid and its validity."""
        i = np.arange(self.stride)[:, None]
        j = np.arange(self.padded_len)[None, :]
        tidx = i + j * self.stride
        return tidx, tidx < self.original_len


def dilate(x: Tensor, stride: int) -> tuple[Tensor, DilationSpec]:
    if x.ndim != 3:
        raise ContractViolation(f"dilate: expected (B, T, D), got {x.shape}")
    B, T, D = x.shape
    if not 1 <= stride <= T:
        raise ContractViolation(f"dilate: stride {stride} outside [1, {T}]")
    L = -(-T // stride)
    tidx = np.arange(stride)[:, None] + np.arange(L)[None, :] * stride
    valid = tidx < T
    spec = DilationSpec(stride=stride, batch=B, original_len=T, padded_len=L,
                        pad_mask=np.tile(valid, (B, 1)))
    out = np.zeros((B, stride, L, D), dtype=x.dtype)
    out[:, valid, :] = x.data[:, tidx[valid], :]
    out = out.reshape(B * stride, L, D)

    def fn(g):
        gr = g.reshape(B, stride, L, D)
        gx = np.zeros_like(x.data)
        gx[:, tidx[valid], :] = gr[:, valid, :]
        accum_grad(x, gx)
    return record_op("dilate", (x,), out, fn), spec


def undilate(streams: Tensor, spec: DilationSpec) -> Tensor:
    B, T, L = spec.batch, spec.original_len, spec.padded_len
    if streams.shape[0] != B * spec.stride or streams.shape[1] != L:
        raise ContractViolation(
            f"undilate: streams shape {streams.shape} does not match spec "
            f"({B * spec.stride}, {L}, ...)")
    D = streams.shape[2]
    tidx, valid = spec.time_index()
    sr = streams.data.reshape(B, spec.stride, L, D)
    out = np.empty((B, T, D), dtype=streams.dtype)
    out[:, tidx[valid], :] = sr[:, valid, :]

    def fn(g):
        gs = np.zeros((B, spec.stride, L, D), dtype=g.dtype)
        gs[:, valid, :] = g[:, tidx[valid], :]
        accum_grad(streams, gs.reshape(B * spec.stride, L, D))
    return record_op("undilate", (streams,), out, fn)
