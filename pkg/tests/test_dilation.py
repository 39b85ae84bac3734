"""Stride partitioning round-trip and layout tests."""

import numpy as np
import pytest

import temba.tensor as tt
from temba.dilation import dilate, undilate
from temba.errors import ContractViolation


def test_pinned_stride2():
    x = tt.tensor(np.arange(5.0).reshape(1, 5, 1))
    streams, spec = dilate(x, 2)
    assert streams.shape == (2, 3, 1)
    np.testing.assert_array_equal(streams.numpy()[0, :, 0], [0.0, 2.0, 4.0])
    np.testing.assert_array_equal(streams.numpy()[1, :, 0], [1.0, 3.0, 0.0])
    np.testing.assert_array_equal(spec.pad_mask,
                                  [[True, True, True], [True, True, False]])
    back = undilate(streams, spec)
    np.testing.assert_array_equal(back.numpy(), x.numpy())


def test_pinned_stride3_phases():
    x = tt.tensor(np.arange(7.0).reshape(1, 7, 1))
    streams, spec = dilate(x, 3)
    assert spec.padded_len == 3
    np.testing.assert_array_equal(streams.numpy()[0, :, 0], [0.0, 3.0, 6.0])
    np.testing.assert_array_equal(streams.numpy()[1, :, 0], [1.0, 4.0, 0.0])
    np.testing.assert_array_equal(streams.numpy()[2, :, 0], [2.0, 5.0, 0.0])
    tidx, valid = spec.time_index()
    np.testing.assert_array_equal(tidx, [[0, 3, 6], [1, 4, 7], [2, 5, 8]])
    np.testing.assert_array_equal(valid, [[1, 1, 1], [1, 1, 0], [1, 1, 0]])


def test_streams_are_batch_major():
    x = np.zeros((2, 4, 1))
    x[0, :, 0] = [1, 2, 3, 4]
    x[1, :, 0] = [5, 6, 7, 8]
    streams, _ = dilate(tt.tensor(x), 2)
    np.testing.assert_array_equal(streams.numpy()[:, :, 0],
                                  [[1, 3], [2, 4], [5, 7], [6, 8]])


def test_round_trip_bitwise_random():
    rng = np.random.default_rng(31)
    for _ in range(60):
        B = int(rng.integers(1, 4))
        T = int(rng.integers(1, 41))
        D = int(rng.integers(1, 6))
        stride = int(rng.integers(1, min(T, 8) + 1))
        dtype = np.float32 if rng.integers(2) else np.float64
        x = rng.standard_normal((B, T, D)).astype(dtype)
        streams, spec = dilate(tt.tensor(x), stride)
        assert streams.dtype == dtype
        back = undilate(streams, spec)
        np.testing.assert_array_equal(back.numpy(), x)
        # padded slots are exactly zero
        pads = streams.numpy()[~spec.pad_mask]
        assert pads.size == 0 or not pads.any()
        assert spec.pad_mask.sum() == B * T


def test_round_trip_gradient_is_identity():
    rng = np.random.default_rng(32)
    x = tt.Tensor(rng.standard_normal((2, 9, 3)), requires_grad=True)
    w = rng.standard_normal((2, 9, 3))
    with tt.Tape() as tape:
        streams, spec = dilate(x, 4)
        back = undilate(streams, spec)
        loss = tt.mul(back, tt.Tensor(w)).sum()
        tape.backward(loss)
    np.testing.assert_array_equal(x.grad, w)


def test_dilate_gradient_scatters():
    rng = np.random.default_rng(33)
    x = tt.Tensor(rng.standard_normal((1, 5, 2)), requires_grad=True)
    w = rng.standard_normal((2, 3, 2))
    with tt.Tape() as tape:
        streams, spec = dilate(x, 2)
        loss = tt.mul(streams, tt.Tensor(w)).sum()
        tape.backward(loss)
    tidx, valid = spec.time_index()
    expect = np.zeros_like(x.numpy())
    wr = w.reshape(1, 2, 3, 2)
    expect[:, tidx[valid], :] = wr[:, valid, :]
    np.testing.assert_array_equal(x.grad, expect)


def test_contract_violations():
    x = tt.tensor(np.zeros((1, 4, 1)))
    with pytest.raises(ContractViolation):
        dilate(x, 0)
    with pytest.raises(ContractViolation):
        dilate(x, 5)  # stride > T
    with pytest.raises(ContractViolation):
        dilate(tt.tensor(np.zeros((4, 1))), 2)
    streams, spec = dilate(x, 2)
    bad = tt.tensor(np.zeros((2, 3, 1)))  # padded_len should be 2
    with pytest.raises(ContractViolation):
        undilate(bad, spec)


def test_stride_one_is_identity():
    rng = np.random.default_rng(34)
    x = rng.standard_normal((2, 6, 3))
    streams, spec = dilate(tt.tensor(x), 1)
    np.testing.assert_array_equal(streams.numpy(), x)
    assert spec.pad_mask.all()
