"""Evaluation: frame AP, duration-bucketed AP, and rank correlations.

AP here is the uninterpolated precision-at-each-positive average over a
single global ranking of all valid frames (concatenated across videos).
Ties in the scores keep original frame order (stable sort), so results
are exactly reproducible and argsort-invariant under strictly monotone
transforms of the scores.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .errors import ContractViolation
from .data import AnnotationDoc

BUCKET_NAMES = ("short", "mid", "long")
SHORT_MAX_S = 10.0   # short: duration < 10 s
LONG_MIN_S = 20.0    # long: duration > 20 s; mid covers [10, 20]


def average_precision(scores: np.ndarray, labels: np.ndarray) -> float:
    """AP of one ranking; labels in {0,1}, at least one positive.

    Frames are ranked by score descending, ties broken by original
    order; AP = mean over positives of precision at that positive.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ContractViolation(
            f"average_precision: shape mismatch {scores.shape} vs {labels.shape}")
    npos = int(labels.sum())
    if npos == 0:
        raise ContractViolation("average_precision: no positive frames")
    order = np.argsort(-scores, kind="stable")
    ranked = labels[order]
    cum = np.cumsum(ranked)
    pos = np.flatnonzero(ranked)
    return float(np.mean(cum[pos] / (pos + 1)))


@dataclass
class MetricReport:
    """Per-evaluation results; empty buckets are None, never zero."""

    mode: str
    mean_ap: float | None = None
    per_class: dict[str, float | None] = field(default_factory=dict)
    excluded_classes: list[str] = field(default_factory=list)
    buckets: dict[str, float | None] = field(default_factory=dict)
    kendall_tau: float | None = None
    spearman_rho: float | None = None
    num_constant_videos: int = 0

    def to_json(self) -> dict:
        if self.mode == "summarization":
            return {"mode": self.mode, "kendall_tau": self.kendall_tau,
                    "spearman_rho": self.spearman_rho,
                    "num_constant_videos": self.num_constant_videos}
        return {"mode": self.mode, "mean_ap": self.mean_ap,
                "per_class": self.per_class,
                "excluded_classes": self.excluded_classes,
                "buckets": self.buckets}

    @property
    def headline(self) -> float:
        """The scalar used for best-checkpoint selection."""
        if self.mode == "summarization":
            return self.kendall_tau if self.kendall_tau is not None else -1.0
        return self.mean_ap if self.mean_ap is not None else 0.0


def frame_map(probs: np.ndarray, labels: np.ndarray, mask: np.ndarray,
              class_names: list[str] | None = None) -> MetricReport:
    """Frame-level mAP over one global ranking per class.

    probs, labels: (B, T, C); mask: (B, T). Classes with no positive
    valid frame are excluded from the mean and reported by name.
    """
    probs = np.asarray(probs)
    labels = np.asarray(labels)
    m = np.asarray(mask).astype(bool)
    if not m.any():
        raise ContractViolation("frame_map: mask selects no frames")
    c = probs.shape[-1]
    names = class_names if class_names is not None else [str(i) for i in range(c)]
    flat_p = probs[m]     # (N, C) valid frames in original order
    flat_y = labels[m]
    report = MetricReport(mode="detection")
    aps = []
    for ci in range(c):
        y = flat_y[:, ci]
        if y.sum() == 0:
            report.per_class[names[ci]] = None
            report.excluded_classes.append(names[ci])
            continue
        ap = average_precision(flat_p[:, ci], y)
        report.per_class[names[ci]] = ap
        aps.append(ap)
    report.mean_ap = float(np.mean(aps)) if aps else None
    return report


def _bucket_of(duration_s: float) -> str:
    if duration_s < SHORT_MAX_S:
        return "short"
    if duration_s > LONG_MIN_S:
        return "long"
    return "mid"


def duration_bucket_map(probs: np.ndarray, mask: np.ndarray,
                        docs: list[AnnotationDoc]) -> dict[str, float | None]:
    """Per-bucket mAP keyed "short"/"mid"/"long" (None when empty).

    A frame is a positive of bucket b for class c when some class-c
    segment of duration in b covers it. Frames whose only class-c
    coverage comes from other buckets are left out of that ranking, so
    each bucket's AP never penalizes, or credits, instances of a
    different temporal scale.
    """
    probs = np.asarray(probs)
    m = np.asarray(mask).astype(bool)
    b, t, c = probs.shape
    if len(docs) != b:
        raise ContractViolation(
            f"duration_bucket_map: {b} videos but {len(docs)} annotation docs")
    # per bucket, class: coverage masks over (B, T)
    covered = np.zeros((b, t, c), dtype=bool)
    in_bucket = {name: np.zeros((b, t, c), dtype=bool) for name in BUCKET_NAMES}
    class_names = docs[0].classes
    cls_index = {n: i for i, n in enumerate(class_names)}
    for v, doc in enumerate(docs):
        for s in doc.segments:
            ci = cls_index[s.class_name]
            dur_s = (s.end - s.start + 1) / doc.fps_segments
            sl = slice(s.start, min(s.end + 1, t))
            covered[v, sl, ci] = True
            in_bucket[_bucket_of(dur_s)][v, sl, ci] = True
    out: dict[str, float | None] = {}
    for name in BUCKET_NAMES:
        aps = []
        for ci in range(c):
            pos = in_bucket[name][:, :, ci] & m
            if not pos.any():
                continue
            keep = (pos | ~covered[:, :, ci]) & m
            aps.append(average_precision(probs[:, :, ci][keep], pos[keep]))
        out[name] = float(np.mean(aps)) if aps else None
    return out


def rank_correlations(pred: np.ndarray, truth: np.ndarray) -> tuple[float | None, float | None]:
    """(Kendall tau-b, Spearman rho) of two score sequences.

    Both handle ties (tau-b pair correction, average ranks). A constant
    truth makes both undefined: (None, None) is returned rather than a
    number, and callers report such videos separately.
    """
    pred = np.asarray(pred, dtype=np.float64).ravel()
    truth = np.asarray(truth, dtype=np.float64).ravel()
    if pred.shape != truth.shape:
        raise ContractViolation(
            f"rank_correlations: shape mismatch {pred.shape} vs {truth.shape}")
    if pred.size < 2:
        raise ContractViolation("rank_correlations: need at least 2 frames")
    if np.all(truth == truth[0]) or np.all(pred == pred[0]):
        return None, None
    tau = stats.kendalltau(pred, truth).statistic
    rho = stats.spearmanr(pred, truth).statistic
    return (float(tau) if np.isfinite(tau) else None,
            float(rho) if np.isfinite(rho) else None)


def summarization_report(preds: list[np.ndarray],
                         truths: list[np.ndarray]) -> MetricReport:
    """Mean per-video correlations; constant videos counted, not scored."""
    taus, rhos, constant = [], [], 0
    for p, y in zip(preds, truths):
        tau, rho = rank_correlations(p, y)
        if tau is None or rho is None:
            constant += 1
            continue
        taus.append(tau)
        rhos.append(rho)
    return MetricReport(
        mode="summarization",
        kendall_tau=float(np.mean(taus)) if taus else None,
        spearman_rho=float(np.mean(rhos)) if rhos else None,
        num_constant_videos=constant)
