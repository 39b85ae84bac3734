"""Central-finite-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import ContractViolation
from .tensor import Tape, Tensor


@dataclass
class FiniteDiffReport:
    max_rel_error: float
    tol: float
    passed: bool
    worst_param: str
    worst_index: tuple[int, ...]
    per_param: dict[str, float] = field(default_factory=dict)
    retried: int = 0

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"gradcheck {status}: max rel error {self.max_rel_error:.3e} "
                f"(tol {self.tol:.1e}) at {self.worst_param}{list(self.worst_index)}")


def finite_diff_check(f: Callable[[], Tensor],
                      params: Mapping[str, Tensor] | Sequence[Tensor],
                      h: float = 1e-6,
                      tol: float = 1e-4) -> FiniteDiffReport:
    """Compare tape gradients of ``f`` against central differences.

    ``f`` must be a deterministic scalar function of the current values of
    ``params`` (any Tensors with requires_grad=False are left untouched and
    unchecked). The step is scaled per coordinate, h_i = h * max(1, |p_i|).
    The relative error for a coordinate is |g - fd| / max(1e-3, |g|, |fd|),
    i.e. tiny gradients are compared absolutely against a 1e-3 scale.

    No single step suits every coordinate of a stiff objective: third
    derivatives through stacked recurrences push truncation error
    (f'''/6 * h^2) above tolerance at the base step along some directions,
    while near-zero gradients compared against the floor are roundoff
    bound (eps*|f|/h) at smaller steps. A coordinate that misses tol at
    the base step is therefore re-measured at h/10 and 10h and judged by
    its best agreement. A wrong tape gradient stays wrong at every step:
    the difference quotient converges on the true derivative as h moves,
    so step variation can only rescue step artifacts, never a bad
    backward rule.
    """
    if isinstance(params, Mapping):
        named = list(params.items())
    else:
        named = [(f"param{i}", p) for i, p in enumerate(params)]
    named = [(n, p) for n, p in named if p.requires_grad]
    if not named:
        raise ContractViolation("finite_diff_check: no trainable params given")

    for _, p in named:
        p.grad = None
    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    grads = {}
    for n, p in named:
        grads[n] = np.zeros_like(p.data) if p.grad is None else p.grad.copy()

    worst = (0.0, named[0][0], (0,) * max(named[0][1].ndim, 1))
    per_param: dict[str, float] = {}
    retried = 0
    for name, p in named:
        g = grads[name]
        pmax = 0.0
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            gi = float(gflat[i])

            def rel_at(hh: float) -> float:
                step = hh * max(1.0, abs(float(orig)))
                flat[i] = orig + step
                fp = float(f().data)
                flat[i] = orig - step
                fm = float(f().data)
                flat[i] = orig
                fd = (fp - fm) / (2.0 * step)
                return abs(gi - fd) / max(1e-3, abs(gi), abs(fd))

            rel = rel_at(h)
            if rel > 0.5 * tol:
                retried += 1
                rel = min(rel, rel_at(h * 0.1), rel_at(h * 10.0))
            if rel > pmax:
                pmax = rel
            if rel > worst[0]:
                idx = np.unravel_index(i, p.shape) if p.ndim else ()
                worst = (rel, name, tuple(int(v) for v in idx))
        per_param[name] = pmax
    max_rel, wname, widx = worst
    return FiniteDiffReport(max_rel_error=max_rel, tol=tol, passed=max_rel <= tol,
                            worst_param=wname, worst_index=widx,
                            per_param=per_param, retried=retried)


def toy_check(seed: int = 0, h: float = 1e-6, tol: float = 1e-4,
              mode: str = "detection") -> FiniteDiffReport:
    """Finite-difference check of the full composite loss on a toy model.

    Three blocks, base width 8, state size 4, sixteen frames, three classes:
    small enough to sweep every coordinate on one core in under a minute,
    deep enough to cross every backward path (dilation, fuser, both loss
    switches). The mask zeroes the last two frames so padding gradients are
    exercised too.
    """
    from .losses import compute_losses
    from .model import ModelConfig, TembaModel

    cfg = ModelConfig(input_dim=5, num_classes=3, blocks=3, base_dim=8,
                      state_dim=4, pad_len=16, mode=mode, dtype="float64")
    model = TembaModel(cfg, seed=seed)
    rng = np.random.default_rng(seed + 1)
    feats = Tensor(rng.standard_normal((1, 16, 5)), requires_grad=False)
    mask = np.ones((1, 16), dtype=np.float64)
    mask[0, 14:] = 0.0
    if mode == "summarization":
        labels = rng.uniform(size=(1, 16))
    else:
        labels = (rng.uniform(size=(1, 16, 3)) < 0.3).astype(np.float64)

    def objective() -> Tensor:
        out = model.forward(feats, mask=mask)
        total, _ = compute_losses(model, out, labels, mask)
        return total

    return finite_diff_check(objective, model.named_parameters(), h=h, tol=tol)
