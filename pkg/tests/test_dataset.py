from __future__ import annotations

import csv
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from fertransfer.dataset import (
    DatasetManifest,
    Sample,
    SamplingSpec,
    SourceDataset,
    balanced_sample,
    compute_balanced_n,
    jaffe_label,
    load_affectnet,
    load_ckplus,
    load_fer2013,
    load_jaffe,
    stratified_split,
    synthetic_manifest,
)
from fertransfer.errors import (
    DegenerateSplit,
    EmptyClass,
    FormatError,
    InsufficientSamples,
    UnknownLabel,
)
from fertransfer.labels import LABEL_NAMES, EmotionLabel


def manifest_from_counts(counts: dict[str, int]) -> DatasetManifest:
    samples = []
    for name, c in counts.items():
        lbl = EmotionLabel.from_name(name)
        samples += [Sample(f"img/{name}/{i:05d}.jpg", lbl, SourceDataset.AFFECTNET) for i in range(c)]
    return DatasetManifest(samples)


# AffectNet-like imbalance with the smallest class at 3803
AFFECTNET_SHAPED = {
    "neutral": 74874, "happy": 134415, "sad": 25459, "surprise": 14090,
    "fear": 6378, "disgust": 3803, "anger": 24882,
}


def test_label_order_is_canonical():
    assert LABEL_NAMES == ("neutral", "happy", "sad", "surprise", "fear", "disgust", "anger")
    assert "contempt" not in LABEL_NAMES
    for lbl in EmotionLabel:
        assert EmotionLabel.from_name(lbl.label_name) is lbl


@pytest.mark.parametrize(
    "counts, expected",
    [
        ({n: 10 for n in LABEL_NAMES}, 10),
        ({"neutral": 9, "happy": 4, "sad": 7, "surprise": 8, "fear": 5, "disgust": 4, "anger": 6}, 4),
        (AFFECTNET_SHAPED, 3803),
    ],
)
def test_compute_balanced_n(counts, expected):
    assert compute_balanced_n(manifest_from_counts(counts)) == expected


def test_compute_balanced_n_empty_class():
    counts = {n: 3 for n in LABEL_NAMES}
    counts["fear"] = 0
    with pytest.raises(EmptyClass, match="fear"):
        compute_balanced_n(manifest_from_counts(counts))


def test_balanced_sample_affectnet_shaped():
    m = manifest_from_counts(AFFECTNET_SHAPED)
    out = balanced_sample(m, SamplingSpec(compute_balanced_n(m), seed=42))
    assert len(out) == 26621
    assert set(out.counts.values()) == {3803}
    assert len({s.image_ref for s in out}) == len(out)


def test_balanced_sample_of_balanced_input_is_permutation():
    m = manifest_from_counts({n: 6 for n in LABEL_NAMES})
    out = balanced_sample(m, SamplingSpec(6, seed=1))
    assert sorted(out.samples, key=lambda s: s.image_ref) == sorted(m.samples, key=lambda s: s.image_ref)


def test_balanced_sample_deterministic():
    m = manifest_from_counts({n: 100 for n in LABEL_NAMES})
    a = balanced_sample(m, SamplingSpec(10, seed=42))
    b = balanced_sample(m, SamplingSpec(10, seed=42))
    c = balanced_sample(m, SamplingSpec(10, seed=43))
    assert a.dumps() == b.dumps()
    assert a.dumps() != c.dumps()


def test_balanced_sample_insufficient():
    m = manifest_from_counts({n: 5 for n in LABEL_NAMES})
    with pytest.raises(InsufficientSamples):
        balanced_sample(m, SamplingSpec(6))


def test_sampling_spec_is_without_replacement():
    assert SamplingSpec(3).replacement is False
    with pytest.raises(ValueError):
        SamplingSpec(0)


def test_balanced_sample_is_uniform_within_class():
    # each of 5 items should be drawn with probability 2/5
    m = manifest_from_counts({n: 5 for n in LABEL_NAMES})
    hits: dict[str, int] = {}
    trials = 2000
    for seed in range(trials):
        for s in balanced_sample(m, SamplingSpec(2, seed=seed)).by_label()[EmotionLabel.HAPPY]:
            hits[s.image_ref] = hits.get(s.image_ref, 0) + 1
    freqs = np.array(list(hits.values())) / trials
    assert len(hits) == 5
    # binomial sd at p=0.4, n=2000 is ~0.011
    assert np.all(np.abs(freqs - 0.4) < 0.05)


@st.composite
def manifests_and_n(draw):
    counts = {n: draw(st.integers(1, 30)) for n in LABEL_NAMES}
    n = draw(st.integers(1, min(counts.values())))
    return manifest_from_counts(counts), n, draw(st.integers(0, 2**31))


@settings(max_examples=60, deadline=None)
@given(manifests_and_n())
def test_sampling_properties(args):
    m, n, seed = args
    out = balanced_sample(m, SamplingSpec(n, seed))
    assert all(c == n for c in out.counts.values())
    assert compute_balanced_n(out) == n
    source = {s.image_ref: s for s in m}
    assert len({s.image_ref for s in out}) == len(out)
    assert all(source[s.image_ref] == s for s in out)
    assert out.dumps() == balanced_sample(m, SamplingSpec(n, seed)).dumps()


@pytest.mark.parametrize(
    "n, ratio, n_train, n_val",
    [
        # floor(0.8 * 3803) = floor(3042.4) = 3042
        (3803, Fraction(8, 10), 3042, 761),
        (10, Fraction(8, 10), 8, 2),
        (2, Fraction(1, 2), 1, 1),
        (10, "8:10", 8, 2),
        (10, 0.8, 8, 2),
    ],
)
def test_stratified_split_counts(n, ratio, n_train, n_val):
    m = manifest_from_counts({name: n for name in LABEL_NAMES})
    train, val = stratified_split(m, ratio, seed=42)
    assert set(train.counts.values()) == {n_train}
    assert set(val.counts.values()) == {n_val}


def test_stratified_split_degenerate():
    m = manifest_from_counts({name: 1 for name in LABEL_NAMES})
    with pytest.raises(DegenerateSplit):
        stratified_split(m, Fraction(8, 10))
    with pytest.raises(ValueError):
        stratified_split(manifest_from_counts({name: 4 for name in LABEL_NAMES}), 1)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 40), st.integers(1, 9), st.integers(0, 10**6))
def test_split_is_partition(n, tenths, seed):
    m = manifest_from_counts({name: n for name in LABEL_NAMES})
    ratio = Fraction(tenths, 10)
    n_train = (ratio * n).__floor__()
    if n_train in (0, n):
        with pytest.raises(DegenerateSplit):
            stratified_split(m, ratio, seed)
        return
    train, val = stratified_split(m, ratio, seed)
    tr = {s.image_ref for s in train}
    va = {s.image_ref for s in val}
    assert not tr & va
    assert tr | va == {s.image_ref for s in m}
    for lbl in EmotionLabel:
        assert train.counts[lbl] + val.counts[lbl] == m.counts[lbl]
    again = stratified_split(m, ratio, seed)
    assert again[0].dumps() == train.dumps() and again[1].dumps() == val.dumps()


def test_manifest_roundtrip(tmp_path):
    m = synthetic_manifest(3, seed=5)
    m.samples.append(Sample("x.csv#4", EmotionLabel.SAD, SourceDataset.FER2013, grayscale=True))
    path = tmp_path / "m.jsonl"
    m.save(path)
    loaded = DatasetManifest.load(path)
    assert loaded.samples == m.samples
    assert loaded.counts == m.counts
    assert path.read_text() == m.dumps()


def test_manifest_rejects_contempt_id(tmp_path):
    path = tmp_path / "m.jsonl"
    path.write_text('{"image_ref": "a.jpg", "label": 7, "source": "affectnet"}\n')
    with pytest.raises(UnknownLabel):
        DatasetManifest.load(path)


# ---------------------------------------------------------------------------
# adapters


def _write_affectnet(root, rows_train, rows_val):
    lists = root / "Manually_Annotated_file_lists"
    lists.mkdir(parents=True)
    header = ["subDirectory_filePath", "face_x", "face_y", "face_width", "face_height",
              "facial_landmarks", "expression", "valence", "arousal"]
    for name, rows in (("training.csv", rows_train), ("validation.csv", rows_val)):
        with open(lists / name, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(header)
            for path, expr in rows:
                w.writerow([path, 0, 0, 10, 10, "", expr, 0.0, 0.0])


def test_load_affectnet_drops_contempt(tmp_path):
    train = [(f"1/{i}.jpg", i % 8) for i in range(32)]
    val = [(f"2/{c}_{i}.jpg", c) for c in range(8) for i in range(500)]
    _write_affectnet(tmp_path, train, val)
    m = load_affectnet(tmp_path)
    assert len(m) == 28  # 4 contempt rows removed
    assert all(s.source is SourceDataset.AFFECTNET for s in m)
    assert not any(s.image_ref.endswith(("/7.jpg", "/15.jpg", "/23.jpg", "/31.jpg")) for s in m)
    test = load_affectnet(tmp_path, split="test")
    assert len(test) == 3500
    assert set(test.counts.values()) == {500}


def test_load_affectnet_test_split_must_be_500_per_class(tmp_path):
    _write_affectnet(tmp_path, [("a.jpg", 0)], [(f"{c}.jpg", c) for c in range(7)])
    with pytest.raises(FormatError, match="500"):
        load_affectnet(tmp_path, split="test")


def test_load_affectnet_unknown_label(tmp_path):
    _write_affectnet(tmp_path, [("a.jpg", 0), ("b.jpg", 9)], [])
    with pytest.raises(UnknownLabel):
        load_affectnet(tmp_path)
    assert len(load_affectnet(tmp_path, strict=False)) == 1


def test_load_affectnet_empty_root(tmp_path):
    with pytest.raises(FormatError):
        load_affectnet(tmp_path)


def test_load_affectnet_automatic_partition(tmp_path):
    d = tmp_path / "Automatically_annotated_file_list"
    d.mkdir()
    (d / "automatically_annotated.csv").write_text(
        "subDirectory_filePath,expression\n1/a.jpg,1\n1/b.jpg,7\n"
    )
    m = load_affectnet(tmp_path, partition="automatic")
    assert [s.label for s in m] == [EmotionLabel.HAPPY]
    assert "Automatically_Annotated_Images" in m.samples[0].image_ref


@pytest.mark.parametrize(
    "filename, label",
    [
        # file names as published in the JAFFE release
        ("KA.AN1.39.tiff", EmotionLabel.ANGER),
        ("KA.HA1.29.tiff", EmotionLabel.HAPPY),
        ("KM.SU1.14.tiff", EmotionLabel.SURPRISE),
        ("KA.NE1.26.tiff", EmotionLabel.NEUTRAL),
        ("NA.DI2.215.tiff", EmotionLabel.DISGUST),
        ("YM.FE3.67.tiff", EmotionLabel.FEAR),
        ("TM.SA1.81.tiff", EmotionLabel.SAD),
    ],
)
def test_jaffe_label(filename, label):
    assert jaffe_label(filename) is label


def test_jaffe_bad_names():
    with pytest.raises(FormatError):
        jaffe_label("readme.tiff")
    with pytest.raises(UnknownLabel):
        jaffe_label("KA.XX1.39.tiff")


def test_load_jaffe(tmp_path):
    for name in ("KA.AN1.39.tiff", "KM.SU1.14.tiff", "KA.HA1.29.tiff"):
        Image.fromarray(np.zeros((8, 8), np.uint8)).save(tmp_path / name)
    (tmp_path / "README").write_text("x")
    m = load_jaffe(tmp_path)
    assert [s.label for s in m] == [EmotionLabel.ANGER, EmotionLabel.HAPPY, EmotionLabel.SURPRISE]
    with pytest.raises(FormatError):
        load_jaffe(tmp_path / "missing")


def _write_ckplus_sequence(root, subject, seq, n_frames, code):
    frames = root / "cohn-kanade-images" / subject / seq
    frames.mkdir(parents=True)
    for i in range(1, n_frames + 1):
        Image.fromarray(np.full((4, 4), i, np.uint8)).save(frames / f"{subject}_{seq}_{i:08d}.png")
    if code is not None:
        lbl = root / "Emotion" / subject / seq
        lbl.mkdir(parents=True)
        (lbl / f"{subject}_{seq}_{n_frames:08d}_emotion.txt").write_text(f"   {code:.7e}\n")


def test_load_ckplus_last_frame(tmp_path):
    _write_ckplus_sequence(tmp_path, "S005", "001", 20, 5)  # happy
    _write_ckplus_sequence(tmp_path, "S010", "002", 7, 2)  # contempt -> dropped
    _write_ckplus_sequence(tmp_path, "S011", "001", 5, None)  # unlabelled
    _write_ckplus_sequence(tmp_path, "S014", "003", 9, 1)  # anger
    (tmp_path / "Emotion" / "S005").mkdir(exist_ok=True)
    m = load_ckplus(tmp_path)
    assert [(s.label, s.image_ref.rsplit("/", 1)[1]) for s in m] == [
        (EmotionLabel.HAPPY, "S005_001_00000020.png"),
        (EmotionLabel.ANGER, "S014_003_00000009.png"),
    ]
    with_neutral = load_ckplus(tmp_path, first_frame_neutral=True)
    assert len(with_neutral) == 4
    assert with_neutral.counts[EmotionLabel.NEUTRAL] == 2


def test_load_ckplus_errors(tmp_path):
    with pytest.raises(FormatError):
        load_ckplus(tmp_path)
    _write_ckplus_sequence(tmp_path, "S001", "001", 3, 9)
    with pytest.raises(UnknownLabel):
        load_ckplus(tmp_path)


def _fer_csv(path, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["emotion", "pixels", "Usage"])
        for r in rows:
            w.writerow(r)


def test_load_fer2013(tmp_path):
    px = " ".join(["7"] * 2304)
    path = tmp_path / "fer2013.csv"
    _fer_csv(path, [(0, px, "Training"), (3, px, "PrivateTest"), (6, px, "PublicTest")])
    m = load_fer2013(path)
    assert [s.label for s in m] == [EmotionLabel.ANGER, EmotionLabel.HAPPY, EmotionLabel.NEUTRAL]
    assert all(s.grayscale for s in m)
    assert m.samples[1].image_ref == f"{path}#1"
    assert [s.label for s in load_fer2013(path, usage="PrivateTest")] == [EmotionLabel.HAPPY]


def test_load_fer2013_errors(tmp_path):
    path = tmp_path / "bad.csv"
    _fer_csv(path, [(0, "1 2 3", "Training")])
    with pytest.raises(FormatError):
        load_fer2013(path)
    _fer_csv(path, [(8, " ".join(["0"] * 2304), "Training")])
    with pytest.raises(UnknownLabel):
        load_fer2013(path)
    path.write_text("a,b\n1,2\n")
    with pytest.raises(FormatError):
        load_fer2013(path)
    with pytest.raises(FormatError):
        load_fer2013(tmp_path / "missing.csv")
