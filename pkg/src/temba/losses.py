"""Training objectives: masked BCE, projection consistency, aux terms.

The composite is  total = bce + alpha * cons + (beta / K) * sum_k aux_k
with K the block count. In summarization mode the BCE slots carry masked
mean-squared error instead (the report keeps the same field names so the
training log schema does not fork).

Report arithmetic is done in float64 regardless of model dtype so a
logged report recomposes to its own total exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .errors import ContractViolation
from .tensor import Tensor, accum_grad, record_op


@dataclass
class LossConfig:
    alpha: float = 100.0
    beta: float = 1.0
    eps: float = 1e-7

    def validate(self) -> "LossConfig":
        if self.alpha < 0 or self.beta < 0:
            raise ContractViolation("loss weights alpha, beta must be >= 0")
        return self


@dataclass
class LossReport:
    bce: float
    cons: float
    aux_mean: float
    total: float
    per_block_aux: list[float]

    def log_record(self) -> dict:
        return {"bce": self.bce, "cons": self.cons,
                "aux_mean": self.aux_mean, "total": self.total}


def _masked_cells(mask: np.ndarray, channels: int) -> tuple[np.ndarray, float]:
    m = np.asarray(mask)
    n = float(m.sum()) * channels
    if n == 0:
        raise ContractViolation("loss: mask selects no frames")
    return m.astype(np.float64), n


def bce_loss(probs: Tensor, labels: np.ndarray, mask: np.ndarray,
             eps: float = 1e-7) -> Tensor:
    """Mean over valid frame-class cells of -[y log p + (1-y) log(1-p)].

    probs (B, T, C) in (0,1); labels (B, T, C) in {0,1}; mask (B, T)
    marks real frames. p is clamped to [eps, 1-eps] inside the logs, and
    the clamp is honest: cells it flattens get zero gradient.
    """
    y = np.asarray(labels)
    m, n = _masked_cells(mask, probs.shape[-1])
    p = np.clip(probs.data, eps, 1.0 - eps)
    inside = (probs.data > eps) & (probs.data < 1.0 - eps)
    cell = -(y * np.log(p) + (1.0 - y) * np.log1p(-p))
    out = np.asarray((cell * m[:, :, None]).sum() / n, dtype=probs.dtype)

    def fn(g):
        d = (-y / p + (1.0 - y) / (1.0 - p)) * inside
        accum_grad(probs, (g / n) * d * m[:, :, None])
    return record_op("bce", (probs,), out, fn)


def mse_loss(scores: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean over valid cells of (s - y)^2; same masking contract as bce."""
    y = np.asarray(targets)
    if y.ndim == scores.ndim - 1:
        y = y[..., None]
    m, n = _masked_cells(mask, scores.shape[-1])
    diff = (scores.data - y) * m[:, :, None]
    out = np.asarray((diff * diff).sum() / n, dtype=scores.dtype)

    def fn(g):
        accum_grad(scores, (g * 2.0 / n) * diff)
    return record_op("mse", (scores,), out, fn)


def _pair_cos_loss(a: Tensor, b: Tensor) -> Tensor:
    """1 - cos(flatten(a), flatten(b)) with each side l2-normalized;
    cosine clamped to [-1, 1] so float fuzz cannot push the loss below 0."""
    av, bv = a.data.ravel(), b.data.ravel()
    na, nb = float(np.linalg.norm(av)), float(np.linalg.norm(bv))
    if na == 0.0 or nb == 0.0:
        raise ContractViolation("consistency_loss: zero-norm projection weight")
    raw = float(av @ bv) / (na * nb)
    cos = min(1.0, max(-1.0, raw))
    out = np.asarray(1.0 - cos, dtype=a.dtype)

    def fn(g):
        if cos != raw:
            return  # clamp active: flat
        ah, bh = av / na, bv / nb
        accum_grad(a, (-(bh - cos * ah) / na * g).reshape(a.shape))
        accum_grad(b, (-(ah - cos * bh) / nb * g).reshape(b.shape))
    return record_op("cons_pair", (a, b), out, fn)


def consistency_loss(weight_groups: list[list[Tensor]],
                     pairs: str = "all") -> Tensor:
    """Mean over blocks (with >= 2 branches) of the mean pairwise
    misalignment of that block's branch weights; 0 if no block qualifies.

    pairs: "all" compares every unordered pair, "adjacent" only (i, i+1).
    """
    block_vals = []
    for group in weight_groups:
        k = len(group)
        if k < 2:
            continue
        if pairs == "adjacent":
            idx = [(i, i + 1) for i in range(k - 1)]
        else:
            idx = [(i, j) for i in range(k) for j in range(i + 1, k)]
        acc = None
        for i, j in idx:
            term = _pair_cos_loss(group[i], group[j])
            acc = term if acc is None else tt.add(acc, term)
        block_vals.append(acc * (1.0 / len(idx)))
    if not block_vals:
        return Tensor(np.zeros((), dtype=np.float64))
    acc = block_vals[0]
    for v in block_vals[1:]:
        acc = tt.add(acc, v)
    return acc * (1.0 / len(block_vals))


def aux_loss(aux_logits: Tensor, labels: np.ndarray, mask: np.ndarray,
             eps: float = 1e-7) -> Tensor:
    """Per-block supervision: bce on sigmoid(logits), same contract."""
    return bce_loss(tt.sigmoid(aux_logits), labels, mask, eps=eps)


def total_loss(bce: Tensor, cons: Tensor, aux: list[Tensor],
               cfg: LossConfig, num_blocks: int) -> tuple[Tensor, LossReport]:
    """Weighted composite and its float64 report."""
    if num_blocks < 1:
        raise ContractViolation("total_loss: num_blocks must be >= 1")
    total = bce
    if cfg.alpha != 0.0:
        total = tt.add(total, cons * cfg.alpha)
    if cfg.beta != 0.0 and aux:
        aux_sum = aux[0]
        for a in aux[1:]:
            aux_sum = tt.add(aux_sum, a)
        total = tt.add(total, aux_sum * (cfg.beta / num_blocks))
    per_block = [float(a.item()) for a in aux]
    report = LossReport(
        bce=float(bce.item()),
        cons=float(cons.item()),
        aux_mean=float(np.mean(per_block)) if per_block else 0.0,
        total=float(bce.item()) + cfg.alpha * float(cons.item())
              + (cfg.beta / num_blocks) * float(sum(per_block)),
        per_block_aux=per_block)
    return total, report


def compute_losses(model, output, labels: np.ndarray, mask: np.ndarray,
                   eps: float = 1e-7) -> tuple[Tensor, LossReport]:
    """Glue from a model forward to the composite for its configured mode.

    Disabled terms (ablation switches) are constant zeros: they cost no
    backward work and log as 0.
    """
    cfg = model.config
    lcfg = LossConfig(alpha=cfg.alpha if cfg.use_cons_loss else 0.0,
                      beta=cfg.beta if cfg.use_aux_loss else 0.0,
                      eps=eps)
    zero = Tensor(np.zeros((), dtype=np.float64))
    if cfg.mode == "summarization":
        main = mse_loss(output.logits, labels, mask)
        aux = ([mse_loss(a, labels, mask) for a in output.aux_logits]
               if cfg.use_aux_loss else [zero] * len(output.aux_logits))
    else:
        main = bce_loss(tt.sigmoid(output.logits), labels, mask, eps=eps)
        aux = ([aux_loss(a, labels, mask, eps=eps) for a in output.aux_logits]
               if cfg.use_aux_loss else [zero] * len(output.aux_logits))
    cons = (consistency_loss(model.cons_weight_groups(), pairs=cfg.cons_pairs)
            if cfg.use_cons_loss else zero)
    return total_loss(main, cons, aux, lcfg, cfg.blocks)
