"""Data layer tests: file formats, annotations, batching, the generator."""

import json
import struct

import numpy as np
import pytest

from temba.data import (AnnotationDoc, Segment, SynthSpec, VideoItem,
                        importance_from_annotations, labels_from_annotations,
                        load_manifest, load_split, pad_batch, read_annotation,
                        read_features, synth_generate, write_annotation,
                        write_features)
from temba.errors import FormatError, ValidationError


# ---------------------------------------------------------------------------
# feature files


def test_feature_file_oracle_bytes(tmp_path):
    p = tmp_path / "v.tmbf"
    write_features(p, np.array([[1.5]], dtype=np.float32))
    raw = p.read_bytes()
    assert raw == struct.pack("<4sIII", b"TMBF", 1, 1, 1) + struct.pack("<f", 1.5)
    assert len(raw) == 20


def test_feature_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(90)
    feats = rng.standard_normal((17, 5)).astype(np.float32)
    p = tmp_path / "v.tmbf"
    write_features(p, feats)
    back = read_features(p)
    np.testing.assert_array_equal(back, feats)
    assert back.dtype == np.float32


def test_feature_write_casts_to_f32(tmp_path):
    p = tmp_path / "v.tmbf"
    write_features(p, np.array([[0.1, 0.2]], dtype=np.float64))
    back = read_features(p)
    np.testing.assert_array_equal(back, np.array([[0.1, 0.2]], dtype=np.float32))


def test_feature_write_validation(tmp_path):
    with pytest.raises(ValidationError):
        write_features(tmp_path / "v.tmbf", np.zeros(4))
    with pytest.raises(ValidationError):
        write_features(tmp_path / "v.tmbf", np.zeros((0, 4)))


def test_feature_read_errors_name_offsets(tmp_path):
    p = tmp_path / "v.tmbf"
    write_features(p, np.ones((3, 2), dtype=np.float32))
    good = p.read_bytes()

    p.write_bytes(good[:10])
    with pytest.raises(FormatError, match="offset 0"):
        read_features(p)

    p.write_bytes(b"XXXX" + good[4:])
    with pytest.raises(FormatError, match="bad magic"):
        read_features(p)

    p.write_bytes(good[:4] + struct.pack("<I", 9) + good[8:])
    with pytest.raises(FormatError, match="version 9 at offset 4"):
        read_features(p)

    p.write_bytes(good[:8] + struct.pack("<I", 0) + good[12:])
    with pytest.raises(FormatError, match="offset 8"):
        read_features(p)

    p.write_bytes(good[:-3])
    with pytest.raises(FormatError, match="expected 24 bytes at offset 16"):
        read_features(p)


# ---------------------------------------------------------------------------
# annotations


def seg_doc():
    return AnnotationDoc(
        video_id="v0", num_segments=6, fps_segments=2.5,
        classes=["walk", "run"],
        segments=[Segment("walk", 1, 3), Segment("run", 3, 5),
                  Segment("walk", 5, 5)])


def test_annotation_round_trip(tmp_path):
    p = tmp_path / "v0.json"
    write_annotation(p, seg_doc())
    back = read_annotation(p)
    assert back == seg_doc()
    assert p.read_text().endswith("\n")


def test_importance_annotation_round_trip(tmp_path):
    doc = AnnotationDoc(video_id="v1", num_segments=3, fps_segments=1.0,
                        importance=[0.5, 1.5, 1.0])
    p = tmp_path / "v1.json"
    write_annotation(p, doc)
    back = read_annotation(p)
    assert back == doc
    assert "classes" not in json.loads(p.read_text())


def test_annotation_validation():
    with pytest.raises(ValidationError, match="not in classes"):
        AnnotationDoc("v", 5, 1.0, ["a"], [Segment("b", 0, 1)]).validate()
    with pytest.raises(ValidationError, match="out of range"):
        AnnotationDoc("v", 5, 1.0, ["a"], [Segment("a", 2, 5)]).validate()
    with pytest.raises(ValidationError, match="out of range"):
        AnnotationDoc("v", 5, 1.0, ["a"], [Segment("a", 3, 2)]).validate()
    with pytest.raises(ValidationError):
        AnnotationDoc("v", 0, 1.0).validate()
    with pytest.raises(ValidationError):
        AnnotationDoc("v", 5, 0.0).validate()
    with pytest.raises(ValidationError, match="importance length"):
        AnnotationDoc("v", 5, 1.0, importance=[1.0, 2.0]).validate()


def test_annotation_from_json_errors(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(FormatError, match="invalid JSON"):
        read_annotation(p)
    p.write_text(json.dumps({"video_id": "v", "num_segments": 4}))
    with pytest.raises(FormatError, match="malformed annotation"):
        read_annotation(p)


def test_labels_rasterization():
    labels, mask = labels_from_annotations(seg_doc(), pad_len=8)
    assert labels.shape == (8, 2)
    np.testing.assert_array_equal(labels[:, 0], [0, 1, 1, 1, 0, 1, 0, 0])
    np.testing.assert_array_equal(labels[:, 1], [0, 0, 0, 1, 1, 1, 0, 0])
    np.testing.assert_array_equal(mask, [1, 1, 1, 1, 1, 1, 0, 0])


def test_labels_truncation():
    doc = AnnotationDoc("v", 10, 1.0, ["a"], [Segment("a", 6, 9)])
    with pytest.raises(ValidationError, match="truncate"):
        labels_from_annotations(doc, pad_len=8)
    labels, mask = labels_from_annotations(doc, pad_len=8, truncate=True)
    np.testing.assert_array_equal(labels[:, 0], [0, 0, 0, 0, 0, 0, 1, 1])
    assert mask.sum() == 8


def test_importance_minmax_normalization():
    doc = AnnotationDoc("v", 3, 1.0, importance=[2.0, 4.0, 6.0])
    imp, mask = importance_from_annotations(doc, pad_len=5)
    np.testing.assert_array_equal(imp, [0.0, 0.5, 1.0, 0.0, 0.0])
    np.testing.assert_array_equal(mask, [1, 1, 1, 0, 0])
    flat = AnnotationDoc("v", 2, 1.0, importance=[3.0, 3.0])
    imp, _ = importance_from_annotations(flat, pad_len=2)
    np.testing.assert_array_equal(imp, [0.0, 0.0])
    with pytest.raises(ValidationError, match="no importance"):
        importance_from_annotations(seg_doc(), pad_len=8)


# ---------------------------------------------------------------------------
# directory layout and batching


def write_video(root, vid, t, d=3, classes=("a", "b")):
    rng = np.random.default_rng(hash(vid) % 2 ** 31)
    feats = rng.standard_normal((t, d)).astype(np.float32)
    write_features(root / "features" / f"{vid}.tmbf", feats)
    doc = AnnotationDoc(vid, t, 2.0, list(classes),
                        [Segment(classes[0], 0, t // 2)])
    write_annotation(root / "annotations" / f"{vid}.json", doc)
    return feats


def make_dataset(root, lens=(6, 9)):
    (root / "features").mkdir()
    (root / "annotations").mkdir()
    ids = [f"v{i}" for i in range(len(lens))]
    for vid, t in zip(ids, lens):
        write_video(root, vid, t)
    (root / "manifest.json").write_text(
        json.dumps({"train": ids[:1], "val": ids[1:]}))
    return ids


def test_load_split(tmp_path):
    make_dataset(tmp_path)
    train = load_split(tmp_path / "features", tmp_path / "annotations",
                       tmp_path / "manifest.json", "train")
    assert [it.video_id for it in train] == ["v0"]
    assert train[0].features.shape == (6, 3)
    assert train[0].doc.num_segments == 6
    with pytest.raises(ValidationError, match="no split"):
        load_split(tmp_path / "features", tmp_path / "annotations",
                   tmp_path / "manifest.json", "test")


def test_load_split_length_mismatch(tmp_path):
    make_dataset(tmp_path)
    write_features(tmp_path / "features" / "v0.tmbf",
                   np.zeros((4, 3), dtype=np.float32))
    with pytest.raises(ValidationError, match="covers 6 segments"):
        load_split(tmp_path / "features", tmp_path / "annotations",
                   tmp_path / "manifest.json", "train")


def test_load_manifest_requires_both_splits(tmp_path):
    p = tmp_path / "manifest.json"
    p.write_text(json.dumps({"train": []}))
    with pytest.raises(FormatError, match="train"):
        load_manifest(p)


def test_pad_batch_detection(tmp_path):
    make_dataset(tmp_path, lens=(6, 9))
    items = [load_split(tmp_path / "features", tmp_path / "annotations",
                        tmp_path / "manifest.json", s)[0] for s in ("train", "val")]
    feats, targets, mask = pad_batch(items, pad_len=12)
    assert feats.shape == (2, 12, 3) and feats.dtype == np.float32
    assert targets.shape == (2, 12, 2)
    np.testing.assert_array_equal(mask.sum(axis=1), [6, 9])
    np.testing.assert_array_equal(feats[0, 6:], 0.0)
    np.testing.assert_array_equal(feats[1, :9], items[1].features)
    with pytest.raises(ValidationError, match="exceeds pad length"):
        pad_batch(items, pad_len=8)
    feats, targets, mask = pad_batch(items, pad_len=8, truncate=True)
    assert mask.sum(axis=1).tolist() == [6, 8]
    with pytest.raises(ValidationError, match="empty"):
        pad_batch([], pad_len=8)


def test_pad_batch_summarization():
    doc = AnnotationDoc("v", 4, 1.0, importance=[1.0, 2.0, 3.0, 4.0])
    item = VideoItem("v", np.ones((4, 2), dtype=np.float32), doc)
    feats, targets, mask = pad_batch([item], pad_len=6, mode="summarization")
    assert targets.shape == (1, 6)
    np.testing.assert_allclose(targets[0], [0, 1 / 3, 2 / 3, 1, 0, 0], atol=1e-7)


# ---------------------------------------------------------------------------
# synthetic generator


def small_spec(**kw):
    base = dict(seed=5, num_videos=6, t_min=24, t_max=40, num_classes=4,
                feature_dim=8, fps_segments=2.5, short_range=(2.0, 4.0),
                long_range=(6.0, 8.0), overlap=1.0, noise_sigma=0.5,
                smooth_window=3, val_fraction=0.25)
    base.update(kw)
    return SynthSpec(**base)


def read_tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}


def test_synth_is_deterministic(tmp_path):
    synth_generate(small_spec(), tmp_path / "a")
    synth_generate(small_spec(), tmp_path / "b")
    ta, tb = read_tree(tmp_path / "a"), read_tree(tmp_path / "b")
    assert list(ta) == list(tb)
    for k in ta:
        assert ta[k] == tb[k], k


def test_synth_output_loads_and_validates(tmp_path):
    manifest = synth_generate(small_spec(), tmp_path)
    # round(6 * 0.25) = 2 validation videos
    assert len(manifest["train"]) == 4 and len(manifest["val"]) == 2
    items = load_split(tmp_path / "features", tmp_path / "annotations",
                       tmp_path / "manifest.json", "train")
    for it in items:
        assert 24 <= it.features.shape[0] <= 40
        assert it.features.shape[1] == 8
        assert it.doc.classes == [f"act_{i:02d}" for i in range(4)]


def test_synth_duration_laws(tmp_path):
    spec = small_spec(num_videos=10, overlap=2.0)
    synth_generate(spec, tmp_path)
    short, long_ = [], []
    for p in sorted((tmp_path / "annotations").glob("*.json")):
        doc = read_annotation(p)
        for s in doc.segments:
            ci = doc.classes.index(s.class_name)
            frames = s.end - s.start + 1
            (short if ci < 2 else long_).append(frames)
    # 2-4 s at 2.5 fps: 5-10 frames; 6-8 s: 15-20 frames
    assert short and long_
    assert min(short) >= 5 and max(short) <= 10
    assert min(long_) >= 15 and max(long_) <= 20


def test_synth_overlap_zero_tiles(tmp_path):
    synth_generate(small_spec(overlap=0.0), tmp_path)
    for p in sorted((tmp_path / "annotations").glob("*.json")):
        doc = read_annotation(p)
        spans = sorted((s.start, s.end) for s in doc.segments)
        for (s0, e0), (s1, e1) in zip(spans, spans[1:]):
            assert s1 > e0  # strictly separated


def test_synth_phase_coding_layout(tmp_path):
    # no noise, no smoothing: features are exactly the phase prototypes
    spec = small_spec(noise_sigma=0.0, smooth_window=1, overlap=0.0,
                      num_videos=3)
    synth_generate(spec, tmp_path)
    protos = np.random.default_rng(spec.seed).normal(
        0.0, 1.0, (spec.num_classes, spec.feature_dim))
    checked = 0
    for p in sorted((tmp_path / "annotations").glob("*.json")):
        doc = read_annotation(p)
        feats = read_features(tmp_path / "features" / f"{doc.video_id}.tmbf")
        for s in doc.segments:
            ci = doc.classes.index(s.class_name)
            mid = s.start + (s.end - s.start + 2) // 2
            first = protos[ci].astype(np.float32)
            second = protos[(ci + 1) % spec.num_classes].astype(np.float32)
            np.testing.assert_array_equal(feats[s.start:mid],
                                          np.tile(first, (mid - s.start, 1)))
            if mid <= s.end:
                np.testing.assert_array_equal(
                    feats[mid:s.end + 1], np.tile(second, (s.end + 1 - mid, 1)))
            checked += 1
    assert checked > 0


def test_synth_single_prototype_mode(tmp_path):
    spec = small_spec(noise_sigma=0.0, smooth_window=1, overlap=0.0,
                      num_videos=2, phase_coding=False)
    synth_generate(spec, tmp_path)
    protos = np.random.default_rng(spec.seed).normal(
        0.0, 1.0, (spec.num_classes, spec.feature_dim))
    for p in sorted((tmp_path / "annotations").glob("*.json")):
        doc = read_annotation(p)
        feats = read_features(tmp_path / "features" / f"{doc.video_id}.tmbf")
        for s in doc.segments:
            ci = doc.classes.index(s.class_name)
            np.testing.assert_array_equal(
                feats[s.start:s.end + 1],
                np.tile(protos[ci].astype(np.float32), (s.end - s.start + 1, 1)))


def test_synth_summarization_mode(tmp_path):
    synth_generate(small_spec(mode="summarization", num_videos=2), tmp_path)
    for p in sorted((tmp_path / "annotations").glob("*.json")):
        doc = read_annotation(p)
        assert doc.importance is not None
        assert len(doc.importance) == doc.num_segments
        assert doc.classes == []


def test_synth_spec_validation_and_dict_round_trip():
    with pytest.raises(ValidationError):
        SynthSpec(t_min=10, t_max=5).validate()
    with pytest.raises(ValidationError):
        SynthSpec(short_range=(0.0, 5.0)).validate()
    with pytest.raises(ValidationError):
        SynthSpec(overlap=-1.0).validate()
    with pytest.raises(ValidationError):
        SynthSpec(mode="ranking").validate()
    with pytest.raises(ValidationError):
        SynthSpec(val_fraction=1.0).validate()
    spec = small_spec()
    back = SynthSpec.from_dict(spec.to_dict())
    assert back == spec
    with pytest.raises(ValidationError, match="unknown synth"):
        SynthSpec.from_dict({"num_videos": 3, "jitter": 1})
