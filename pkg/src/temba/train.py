"""Optimizer, schedule, and the training/evaluation loops.

The optimizer is Adam with decoupled weight decay (decay multiplies the
parameter before the moment update touches it). The schedule warms the
rate up linearly for the first few epochs, then follows a half cosine
down to zero. Each step appends one JSON line to the training log; the
best-validation checkpoint and the end of every epoch are kept on disk,
so a run aborted by divergence still leaves its last good state behind.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, fields as dc_fields
from pathlib import Path

import numpy as np

from . import tensor as tt
from .checkpoint import save_checkpoint
from .data import VideoItem, pad_batch
from .errors import NumericFault, ValidationError
from .losses import compute_losses
from .metrics import MetricReport, duration_bucket_map, frame_map, summarization_report
from .model import TembaModel
from .tensor import Tape, Tensor, _all_finite


@dataclass
class TrainConfig:
    lr: float = 4.5e-4
    weight_decay: float = 0.02
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_epochs: int = 5
    total_epochs: int = 140
    batch_size: int = 1
    seed: int = 0
    eval_every: int = 5

    def validate(self) -> "TrainConfig":
        if not (0 <= self.warmup_epochs < self.total_epochs):
            raise ValidationError(
                f"need 0 <= warmup_epochs < total_epochs, got "
                f"{self.warmup_epochs} / {self.total_epochs}")
        if self.lr <= 0 or self.eps <= 0:
            raise ValidationError("lr and eps must be > 0")
        if self.weight_decay < 0:
            raise ValidationError("weight_decay must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValidationError("betas must lie in [0, 1)")
        if self.batch_size < 1 or self.eval_every < 1:
            raise ValidationError("batch_size and eval_every must be >= 1")
        return self

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in dc_fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dc_fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValidationError(f"unknown train config keys: {sorted(extra)}")
        return cls(**d).validate()


def cosine_warmup_lr(epoch: int, cfg: TrainConfig) -> float:
    """Linear ramp lr/warmup -> lr, then half cosine to 0 at total_epochs."""
    if epoch < 0 or epoch >= cfg.total_epochs:
        raise ValidationError(f"epoch {epoch} outside [0, {cfg.total_epochs})")
    w = cfg.warmup_epochs
    if epoch < w:
        return cfg.lr * (epoch + 1) / w
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * (epoch - w) / (cfg.total_epochs - w)))


class AdamW:
    """Decoupled-weight-decay Adam over a named parameter dict."""

    def __init__(self, params: dict[str, Tensor], cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self._m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self._v = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.t = 0

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float) -> None:
        """One update; parameters whose grad is None are left untouched."""
        cfg = self.cfg
        self.t += 1
        bc1 = 1.0 - cfg.beta1 ** self.t
        bc2 = 1.0 - cfg.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if not _all_finite(g):
                raise NumericFault(f"adamw: non-finite gradient for {name}")
            if cfg.weight_decay:
                p.data *= 1.0 - lr * cfg.weight_decay
            m, v = self._m[name], self._v[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * (g * g)
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)


def _batches(n: int, size: int):
    for lo in range(0, n, size):
        yield range(lo, min(lo + size, n))


def evaluate(model: TembaModel, items: list[VideoItem],
             batch_size: int = 8, truncate: bool = False) -> MetricReport:
    """Validation metrics for the model's configured mode (no gradients)."""
    cfg = model.config
    dt = cfg.np_dtype
    if not items:
        raise ValidationError("evaluate: no videos")
    if cfg.mode == "summarization":
        preds, truths = [], []
        for idx in _batches(len(items), batch_size):
            chunk = [items[i] for i in idx]
            feats, targets, masks = pad_batch(chunk, cfg.pad_len,
                                              mode=cfg.mode, truncate=truncate)
            out = model(Tensor(feats.astype(dt)), masks)
            scores = out.logits.data[:, :, 0]
            for j, it in enumerate(chunk):
                real = masks[j] > 0
                preds.append(scores[j][real])
                truths.append(targets[j][real])
        return summarization_report(preds, truths)
    all_p, all_y, all_m, docs = [], [], [], []
    for idx in _batches(len(items), batch_size):
        chunk = [items[i] for i in idx]
        feats, targets, masks = pad_batch(chunk, cfg.pad_len,
                                          mode=cfg.mode, truncate=truncate)
        out = model(Tensor(feats.astype(dt)), masks)
        all_p.append(tt._sigmoid(out.logits.data))
        all_y.append(targets)
        all_m.append(masks)
        docs.extend(it.doc for it in chunk)
    probs = np.concatenate(all_p)
    labels = np.concatenate(all_y)
    masks = np.concatenate(all_m)
    report = frame_map(probs, labels, masks, class_names=docs[0].classes)
    report.buckets = duration_bucket_map(probs, masks, docs)
    return report


@dataclass
class TrainResult:
    best_metric: float
    best_epoch: int
    epochs_run: int
    steps: int
    diverged: str | None
    best_path: str | None
    last_path: str
    log_path: str
    final_report: MetricReport | None


def train(model: TembaModel, train_items: list[VideoItem],
          val_items: list[VideoItem], tcfg: TrainConfig, out_dir,
          truncate: bool = False, log=None) -> TrainResult:
    """Full loop: shuffle, batch, descend, log, evaluate, checkpoint.

    Deterministic for fixed seed and single-threaded BLAS. Divergence
    (any non-finite value in the step) stops the run; best.tmbw and
    last.tmbw from completed epochs stay on disk.
    """
    tcfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.jsonl"
    best_path = out / "best.tmbw"
    last_path = out / "last.tmbw"
    dt = model.config.np_dtype
    params = model.named_parameters()
    opt = AdamW(params, tcfg)
    rng = np.random.default_rng(tcfg.seed)
    step = 0
    best = (-math.inf, -1)
    diverged = None
    final_report = None
    say = log if log is not None else (lambda msg: None)
    with open(log_path, "w") as logf:
        for epoch in range(tcfg.total_epochs):
            lr = cosine_warmup_lr(epoch, tcfg)
            order = rng.permutation(len(train_items))
            epoch_total = 0.0
            nb = 0
            try:
                for idx in _batches(len(order), tcfg.batch_size):
                    chunk = [train_items[order[i]] for i in idx]
                    feats, targets, masks = pad_batch(
                        chunk, model.config.pad_len, mode=model.config.mode,
                        truncate=truncate)
                    opt.zero_grads()
                    with Tape() as tape:
                        out_ = model(Tensor(feats.astype(dt)), masks)
                        loss, report = compute_losses(model, out_, targets, masks)
                        tape.backward(loss)
                    opt.step(lr)
                    step += 1
                    rec = {"step": step, "lr": lr, **report.log_record()}
                    logf.write(json.dumps(rec) + "\n")
                    epoch_total += report.total
                    nb += 1
            except NumericFault as e:
                diverged = str(e)
                say(f"epoch {epoch}: diverged ({e}); stopping with last good checkpoint")
                break
            logf.flush()
            save_checkpoint(last_path, model)
            say(f"epoch {epoch}: lr {lr:.3e}, mean loss {epoch_total / max(nb, 1):.4f}")
            if (epoch + 1) % tcfg.eval_every == 0 or epoch == tcfg.total_epochs - 1:
                report = evaluate(model, val_items, truncate=truncate)
                final_report = report
                with open(out / f"metrics_{epoch:04d}.json", "w") as f:
                    json.dump(report.to_json(), f, indent=1)
                score = report.headline
                say(f"epoch {epoch}: val {report.mode} metric {score:.4f}")
                if score > best[0]:
                    best = (score, epoch)
                    save_checkpoint(best_path, model)
    return TrainResult(
        best_metric=best[0], best_epoch=best[1],
        epochs_run=epoch + 1 if not diverged else epoch,
        steps=step, diverged=diverged,
        best_path=str(best_path) if best[1] >= 0 else None,
        last_path=str(last_path), log_path=str(log_path),
        final_report=final_report)
