"""On-disk formats, the synthetic dense-label generator, batch assembly.

Feature files ("TMBF"): magic, version u32, T u32, D u32, then T*D
little-endian float32 values time-major, so a temporal scan streams the
payload contiguously. Annotations are plain JSON documents; a dataset
directory holds features/, annotations/, and a manifest.json naming the
train/val split by video id.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from dataclasses import fields as dc_fields
from pathlib import Path

import numpy as np
from scipy.ndimage import uniform_filter1d

from .errors import FormatError, ValidationError

FEATURE_MAGIC = b"TMBF"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sIII")


# ---------------------------------------------------------------------------
# feature files

def write_features(path, features: np.ndarray) -> None:
    """features (T, D) -> TMBF file; stored as little-endian float32."""
    arr = np.asarray(features)
    if arr.ndim != 2 or arr.shape[0] < 1:
        raise ValidationError(f"features must be (T, D) with T >= 1, got {arr.shape}")
    t, d = arr.shape
    payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    with open(path, "wb") as f:
        f.write(_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, t, d))
        f.write(payload)


def read_features(path) -> np.ndarray:
    """TMBF file -> (T, D) float32 array; bit-exact round trip."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size:
        raise FormatError(
            f"{path}: truncated header, expected {_HEADER.size} bytes at offset 0, "
            f"found {len(raw)}")
    magic, version, t, d = _HEADER.unpack_from(raw, 0)
    if magic != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at offset 0")
    if version != FEATURE_VERSION:
        raise FormatError(f"{path}: unsupported version {version} at offset 4")
    if t < 1:
        raise FormatError(f"{path}: T must be >= 1, got {t} at offset 8")
    expected = 4 * t * d
    actual = len(raw) - _HEADER.size
    if actual != expected:
        raise FormatError(
            f"{path}: payload expected {expected} bytes at offset {_HEADER.size}, "
            f"found {actual}")
    return np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(t, d).copy()


# ---------------------------------------------------------------------------
# annotations

@dataclass
class Segment:
    class_name: str
    start: int
    end: int  # inclusive, 0-based


@dataclass
class AnnotationDoc:
    video_id: str
    num_segments: int
    fps_segments: float
    classes: list[str] = field(default_factory=list)
    segments: list[Segment] = field(default_factory=list)
    importance: list[float] | None = None

    def validate(self) -> "AnnotationDoc":
        if self.num_segments < 1:
            raise ValidationError(f"{self.video_id}: num_segments must be >= 1")
        if not (self.fps_segments > 0):
            raise ValidationError(f"{self.video_id}: fps_segments must be > 0")
        known = set(self.classes)
        for s in self.segments:
            if s.class_name not in known:
                raise ValidationError(
                    f"{self.video_id}: segment class {s.class_name!r} not in classes")
            if not (0 <= s.start <= s.end < self.num_segments):
                raise ValidationError(
                    f"{self.video_id}: segment [{s.start}, {s.end}] out of range "
                    f"for {self.num_segments} segments")
        if self.importance is not None and len(self.importance) != self.num_segments:
            raise ValidationError(
                f"{self.video_id}: importance length {len(self.importance)} != "
                f"num_segments {self.num_segments}")
        return self

    def to_json(self) -> dict:
        doc = {"video_id": self.video_id, "num_segments": self.num_segments,
               "fps_segments": self.fps_segments}
        if self.importance is not None:
            doc["importance"] = list(self.importance)
        else:
            doc["classes"] = list(self.classes)
            doc["segments"] = [{"class": s.class_name, "start": s.start,
                                "end": s.end} for s in self.segments]
        return doc

    @classmethod
    def from_json(cls, doc: dict, source: str = "annotation") -> "AnnotationDoc":
        try:
            out = cls(
                video_id=doc["video_id"],
                num_segments=int(doc["num_segments"]),
                fps_segments=float(doc["fps_segments"]),
                classes=list(doc.get("classes", [])),
                segments=[Segment(s["class"], int(s["start"]), int(s["end"]))
                          for s in doc.get("segments", [])],
                importance=(list(map(float, doc["importance"]))
                            if "importance" in doc else None))
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"{source}: malformed annotation ({e})") from None
        return out.validate()


def write_annotation(path, doc: AnnotationDoc) -> None:
    with open(path, "w") as f:
        json.dump(doc.validate().to_json(), f, sort_keys=True, indent=1)
        f.write("\n")


def read_annotation(path) -> AnnotationDoc:
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise FormatError(f"{path}: invalid JSON ({e})") from None
    return AnnotationDoc.from_json(doc, source=str(path))


def labels_from_annotations(doc: AnnotationDoc, pad_len: int,
                            truncate: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Multi-hot frame labels (pad_len, C) float32 plus a validity mask.

    Frame t carries 1 for every segment covering t; frames at or beyond
    the video's real length are masked out.
    """
    doc.validate()
    t_real = doc.num_segments
    if t_real > pad_len:
        if not truncate:
            raise ValidationError(
                f"{doc.video_id}: {t_real} segments exceed pad length {pad_len}; "
                f"pass --truncate to keep the first {pad_len}")
        t_real = pad_len
    labels = np.zeros((pad_len, len(doc.classes)), dtype=np.float32)
    cls_index = {c: i for i, c in enumerate(doc.classes)}
    for s in doc.segments:
        lo, hi = s.start, min(s.end, t_real - 1)
        if lo <= hi:
            labels[lo:hi + 1, cls_index[s.class_name]] = 1.0
    mask = np.zeros(pad_len, dtype=np.float32)
    mask[:t_real] = 1.0
    return labels, mask


def importance_from_annotations(doc: AnnotationDoc, pad_len: int,
                                truncate: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Frame importance (pad_len,), min-max normalized to [0, 1] at load
    (flat signals normalize to zero), plus the validity mask."""
    doc.validate()
    if doc.importance is None:
        raise ValidationError(f"{doc.video_id}: annotation has no importance track")
    t_real = doc.num_segments
    if t_real > pad_len:
        if not truncate:
            raise ValidationError(
                f"{doc.video_id}: {t_real} segments exceed pad length {pad_len}; "
                f"pass --truncate to keep the first {pad_len}")
        t_real = pad_len
    raw = np.asarray(doc.importance[:t_real], dtype=np.float64)
    lo, hi = raw.min(), raw.max()
    norm = (raw - lo) / (hi - lo) if hi > lo else np.zeros_like(raw)
    out = np.zeros(pad_len, dtype=np.float32)
    out[:t_real] = norm.astype(np.float32)
    mask = np.zeros(pad_len, dtype=np.float32)
    mask[:t_real] = 1.0
    return out, mask


# ---------------------------------------------------------------------------
# dataset directory layout

@dataclass
class VideoItem:
    video_id: str
    features: np.ndarray  # (T, D) float32
    doc: AnnotationDoc


def load_manifest(path) -> dict[str, list[str]]:
    with open(path) as f:
        try:
            m = json.load(f)
        except json.JSONDecodeError as e:
            raise FormatError(f"{path}: invalid JSON ({e})") from None
    if not isinstance(m, dict) or not {"train", "val"} <= set(m):
        raise FormatError(f"{path}: manifest must map 'train' and 'val' to id lists")
    return m


def load_split(features_dir, annotations_dir, manifest_path, split: str) -> list[VideoItem]:
    manifest = load_manifest(manifest_path)
    if split not in manifest:
        raise ValidationError(f"manifest has no split {split!r}")
    items = []
    for vid in manifest[split]:
        feats = read_features(Path(features_dir) / f"{vid}.tmbf")
        doc = read_annotation(Path(annotations_dir) / f"{vid}.json")
        if doc.num_segments != feats.shape[0]:
            raise ValidationError(
                f"{vid}: annotation covers {doc.num_segments} segments but "
                f"features have {feats.shape[0]}")
        items.append(VideoItem(vid, feats, doc))
    return items


def pad_batch(items: list[VideoItem], pad_len: int, mode: str = "detection",
              truncate: bool = False, dtype=np.float32):
    """Batch to fixed length: (B, pad_len, D) features, targets, (B, pad_len) mask.

    Targets are (B, pad_len, C) multi-hot for detection, (B, pad_len)
    importance for summarization. Sequences longer than pad_len raise
    unless truncate is set, which keeps the first pad_len frames.
    """
    if not items:
        raise ValidationError("pad_batch: empty batch")
    d = items[0].features.shape[1]
    feats = np.zeros((len(items), pad_len, d), dtype=dtype)
    masks = np.zeros((len(items), pad_len), dtype=dtype)
    targets = None
    for i, it in enumerate(items):
        t = it.features.shape[0]
        if t > pad_len:
            if not truncate:
                raise ValidationError(
                    f"{it.video_id}: length {t} exceeds pad length {pad_len}; "
                    f"pass --truncate to keep the first {pad_len} frames")
            t = pad_len
        feats[i, :t] = it.features[:t]
        if mode == "summarization":
            tgt, m = importance_from_annotations(it.doc, pad_len, truncate=truncate)
        else:
            tgt, m = labels_from_annotations(it.doc, pad_len, truncate=truncate)
        if targets is None:
            targets = np.zeros((len(items),) + tgt.shape, dtype=dtype)
        targets[i] = tgt
        masks[i] = m
    return feats, targets, masks


# ---------------------------------------------------------------------------
# synthetic generator

@dataclass
class SynthSpec:
    """Recipe for a densely multi-labeled synthetic dataset.

    Half the classes (rounded up) draw segment durations from the short
    law, the rest from the long law (uniform in seconds). Segments are
    placed independently until total duration reaches overlap * T, which
    makes `overlap` the mean number of concurrently active classes;
    overlap 0 instead tiles non-overlapping segments. Frame features are
    the sum of active-segment emissions plus white noise, box-smoothed.

    With phase_coding (the default) class c emits prototype c over the
    first half of each segment and prototype (c+1) mod C over the rest,
    so every prototype is shared between two classes and a single frame
    is ambiguous between them. Only temporal context (which phase came
    first) identifies the class, which is what keeps a frame-wise linear
    model from solving the task. phase_coding=False emits one prototype
    per class for the whole segment.
    """

    seed: int = 7
    num_videos: int = 250
    t_min: int = 300
    t_max: int = 512
    num_classes: int = 10
    feature_dim: int = 64
    fps_segments: float = 2.5
    short_range: tuple[float, float] = (2.0, 10.0)
    long_range: tuple[float, float] = (20.0, 120.0)
    short_class_fraction: float = 0.5
    overlap: float = 2.0
    noise_sigma: float = 1.0
    prototype_scale: float = 1.0
    phase_coding: bool = True
    smooth_window: int = 5
    val_fraction: float = 0.2
    mode: str = "detection"

    def validate(self) -> "SynthSpec":
        if self.num_videos < 1 or self.num_classes < 1 or self.feature_dim < 1:
            raise ValidationError("synth: num_videos, num_classes, feature_dim >= 1")
        if not (1 <= self.t_min <= self.t_max):
            raise ValidationError("synth: need 1 <= t_min <= t_max")
        if self.overlap < 0:
            raise ValidationError("synth: overlap must be >= 0")
        if not (0 <= self.val_fraction < 1):
            raise ValidationError("synth: val_fraction in [0, 1)")
        if self.mode not in ("detection", "summarization"):
            raise ValidationError(f"synth: bad mode {self.mode!r}")
        for lo, hi in (self.short_range, self.long_range):
            if not (0 < lo <= hi):
                raise ValidationError("synth: duration ranges need 0 < lo <= hi")
        return self

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dc_fields(self)}
        d["short_range"] = list(self.short_range)
        d["long_range"] = list(self.long_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        known = {f.name for f in dc_fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValidationError(f"unknown synth config keys: {sorted(extra)}")
        d = dict(d)
        for key in ("short_range", "long_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d).validate()

    @property
    def class_names(self) -> list[str]:
        return [f"act_{i:02d}" for i in range(self.num_classes)]

    def num_short_classes(self) -> int:
        return math.ceil(self.num_classes * self.short_class_fraction)

    def duration_range(self, class_index: int) -> tuple[float, float]:
        return (self.short_range if class_index < self.num_short_classes()
                else self.long_range)


def _sample_segments(spec: SynthSpec, t: int, rng: np.random.Generator) -> list[Segment]:
    names = spec.class_names
    segs: list[Segment] = []

    def draw_len(ci: int) -> int:
        lo, hi = spec.duration_range(ci)
        sec = rng.uniform(lo, hi)
        return max(1, min(t, int(round(sec * spec.fps_segments))))

    if spec.overlap == 0:
        pos = int(rng.integers(0, max(1, t // 10)))
        while pos < t:
            ci = int(rng.integers(spec.num_classes))
            length = min(draw_len(ci), t - pos)
            segs.append(Segment(names[ci], pos, pos + length - 1))
            pos += length + int(rng.integers(1, max(2, t // 10)))
        return segs
    budget = spec.overlap * t
    total = 0
    while total < budget:
        ci = int(rng.integers(spec.num_classes))
        length = draw_len(ci)
        start = int(rng.integers(0, t - length + 1))
        segs.append(Segment(names[ci], start, start + length - 1))
        total += length
    return segs


def _render_video(spec: SynthSpec, prototypes: np.ndarray, t: int,
                  rng: np.random.Generator):
    segs = _sample_segments(spec, t, rng)
    active = np.zeros((t, spec.num_classes), dtype=np.float64)
    emit = np.zeros((t, spec.feature_dim), dtype=np.float64)
    idx = {c: i for i, c in enumerate(spec.class_names)}
    for s in segs:
        ci = idx[s.class_name]
        active[s.start:s.end + 1, ci] = 1.0
        if spec.phase_coding and spec.num_classes > 1:
            mid = s.start + (s.end - s.start + 2) // 2  # first phase rounds up
            emit[s.start:mid] += prototypes[ci]
            emit[mid:s.end + 1] += prototypes[(ci + 1) % spec.num_classes]
        else:
            emit[s.start:s.end + 1] += prototypes[ci]
    feats = spec.prototype_scale * emit
    feats += rng.normal(0.0, spec.noise_sigma, feats.shape)
    if spec.smooth_window > 1:
        feats = uniform_filter1d(feats, spec.smooth_window, axis=0, mode="nearest")
    return feats.astype(np.float32), segs, active


def synth_generate(spec: SynthSpec, out_dir) -> dict[str, list[str]]:
    """Write features/, annotations/, manifest.json under out_dir.

    A pure function of the spec: the same spec produces bitwise-identical
    directory contents.
    """
    spec.validate()
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    (out / "annotations").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    prototypes = rng.normal(0.0, 1.0, (spec.num_classes, spec.feature_dim))
    ids = []
    for v in range(spec.num_videos):
        vid = f"video_{v:04d}"
        t = int(rng.integers(spec.t_min, spec.t_max + 1))
        feats, segs, active = _render_video(spec, prototypes, t, rng)
        doc = AnnotationDoc(video_id=vid, num_segments=t,
                            fps_segments=spec.fps_segments,
                            classes=spec.class_names, segments=segs)
        if spec.mode == "summarization":
            raw = uniform_filter1d(active.sum(axis=1), max(1, spec.smooth_window),
                                   mode="nearest")
            doc = AnnotationDoc(video_id=vid, num_segments=t,
                                fps_segments=spec.fps_segments,
                                importance=[float(x) for x in raw])
        write_features(out / "features" / f"{vid}.tmbf", feats)
        write_annotation(out / "annotations" / f"{vid}.json", doc)
        ids.append(vid)
    n_train = spec.num_videos - int(round(spec.num_videos * spec.val_fraction))
    manifest = {"train": ids[:n_train], "val": ids[n_train:]}
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, sort_keys=True, indent=1)
        f.write("\n")
    return manifest
