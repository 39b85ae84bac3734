"""Wall-clock throughput of the scan blocks and the two kernel lanes.

Two sections. The block sweep times a standard (stride 1) and a dilated
(stride 3) block over doubling sequence lengths, forward-only and
forward+backward separately, and reports per-length wall time, frames/sec,
and the time(2T)/time(T) ratio, which stays near 2 when the scan is truly
linear in T. The kernel section times the raw scan primitive under the
compiled and pure-python backends on identical inputs.
"""

from __future__ import annotations

import time

import numpy as np

from . import kernels
from .errors import ContractViolation
from .model import TembaBlock
from .tensor import Tape, Tensor

T_VALUES = (512, 1024, 2048, 4096)


def _time_call(fn, runs: int) -> float:
    fn()
    times = []
    for _ in range(runs):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.mean(times))


def _make_block(dim: int, stride: int, state_dim: int, conv_width: int,
                seed: int) -> TembaBlock:
    rng = np.random.default_rng(seed)
    return TembaBlock(1, dim, dim, stride, state_dim, conv_width, 1, rng,
                      np.float32)


def _doubling_ratios(table: dict[int, dict], key: str) -> dict[str, float]:
    out = {}
    ts = sorted(table)
    for small, big in zip(ts, ts[1:]):
        if big == 2 * small:
            out[f"{big}/{small}"] = table[big][key] / table[small][key]
    return out


def bench_blocks(t_values=T_VALUES, dim: int = 256, state_dim: int = 16,
                 stride: int = 3, conv_width: int = 4, runs: int = 5,
                 seed: int = 0) -> dict:
    results: dict = {}
    for name, s in (("standard", 1), ("dilated", stride)):
        block = _make_block(dim, s, state_dim, conv_width, seed)
        params = block.named_params("b")
        per_t: dict[int, dict] = {}
        for t_len in t_values:
            rng = np.random.default_rng(seed + t_len)
            x = Tensor(rng.standard_normal((1, t_len, dim)).astype(np.float32),
                       requires_grad=False)

            def forward_only():
                block.forward(x)

            def forward_backward():
                for p in params.values():
                    p.grad = None
                with Tape() as tape:
                    y, _aux = block.forward(x)
                    total = y.sum()
                tape.backward(total)

            fwd = _time_call(forward_only, runs)
            fb = _time_call(forward_backward, runs)
            per_t[t_len] = {
                "forward_s": fwd,
                "forward_frames_per_s": t_len / fwd,
                "forward_backward_s": fb,
                "forward_backward_frames_per_s": t_len / fb,
            }
        results[name] = per_t
        results[f"{name}_forward_ratios"] = _doubling_ratios(per_t, "forward_s")
        results[f"{name}_forward_backward_ratios"] = _doubling_ratios(
            per_t, "forward_backward_s")
    return results


def bench_kernels(t_len: int = 4096, dim: int = 256, state_dim: int = 16,
                  runs: int = 5, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    f32 = np.float32
    delta = (np.abs(rng.standard_normal((1, dim, t_len))) * 0.05 + 1e-3).astype(f32)
    a = (-np.abs(rng.standard_normal((dim, state_dim))) - 0.1).astype(f32)
    bt = rng.standard_normal((1, t_len, state_dim)).astype(f32)
    ct = rng.standard_normal((1, t_len, state_dim)).astype(f32)
    u = rng.standard_normal((1, dim, t_len)).astype(f32)
    dy = rng.standard_normal((1, dim, t_len)).astype(f32)
    seg = kernels.DEFAULT_SEG
    elements = dim * t_len * state_dim

    lanes: dict = {}
    for lane in ("python", "compiled"):
        try:
            backend = kernels.get_backend(lane)
        except ContractViolation:
            continue
        _y, ckpt = backend.scan_forward(delta, a, bt, ct, u, seg)
        fwd = _time_call(
            lambda b=backend: b.scan_forward(delta, a, bt, ct, u, seg), runs)
        bwd = _time_call(
            lambda b=backend: b.scan_backward(delta, a, bt, ct, u, ckpt, dy, seg),
            runs)
        lanes[lane] = {
            "forward_s": fwd,
            "backward_s": bwd,
            "forward_ns_per_element": fwd / elements * 1e9,
            "backward_ns_per_element": bwd / elements * 1e9,
        }
    out = {"T": t_len, "dim": dim, "state_dim": state_dim, "lanes": lanes}
    if "python" in lanes and "compiled" in lanes:
        out["forward_speedup"] = (lanes["python"]["forward_s"]
                                  / lanes["compiled"]["forward_s"])
        out["backward_speedup"] = (lanes["python"]["backward_s"]
                                   / lanes["compiled"]["backward_s"])
    return out


def run_bench(t_values=T_VALUES, dim: int = 256, state_dim: int = 16,
              stride: int = 3, runs: int = 5, seed: int = 0) -> dict:
    blocks = bench_blocks(t_values, dim, state_dim, stride, runs=runs, seed=seed)
    lanes = bench_kernels(max(t_values), dim, state_dim, runs=runs, seed=seed)
    return {
        "dim": dim,
        "state_dim": state_dim,
        "stride": stride,
        "runs": runs,
        "dtype": "float32",
        "active_backend": kernels.backend_name(),
        "blocks": blocks,
        "kernel_lanes": lanes,
    }


def format_bench(result: dict) -> str:
    lines = []
    lines.append(f"scan blocks: dim={result['dim']} state={result['state_dim']} "
                 f"runs={result['runs']} backend={result['active_backend']}")
    for name in ("standard", "dilated"):
        table = result["blocks"][name]
        label = name if name == "standard" else f"dilated (stride {result['stride']})"
        lines.append(f"  {label}:")
        lines.append("    T       fwd_s     fwd_fps    fwd+bwd_s  fwd+bwd_fps")
        for t_len in sorted(table):
            row = table[t_len]
            lines.append(f"    {t_len:<7d} {row['forward_s']:<9.4f} "
                         f"{row['forward_frames_per_s']:<10.0f} "
                         f"{row['forward_backward_s']:<10.4f} "
                         f"{row['forward_backward_frames_per_s']:<.0f}")
        ratios = result["blocks"][f"{name}_forward_ratios"]
        pretty = ", ".join(f"{k}: {v:.2f}" for k, v in ratios.items())
        lines.append(f"    forward time ratios per doubling: {pretty}")
    kl = result["kernel_lanes"]
    lines.append(f"kernel lanes at T={kl['T']}:")
    for lane, row in kl["lanes"].items():
        lines.append(f"  {lane:<9s} forward {row['forward_ns_per_element']:.2f} "
                     f"ns/el, backward {row['backward_ns_per_element']:.2f} ns/el")
    if "forward_speedup" in kl:
        lines.append(f"  compiled speedup: forward {kl['forward_speedup']:.1f}x, "
                     f"backward {kl['backward_speedup']:.1f}x")
    return "\n".join(lines)
