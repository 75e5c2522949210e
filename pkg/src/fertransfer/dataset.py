"""Manifests, class-balanced sampling, stratified splitting and dataset adapters.

A manifest is an ordered list of ``Sample`` records.  On disk it is stored as
newline-delimited JSON, one object per sample::

    {"image_ref": "...", "label": 3, "source": "affectnet", "grayscale": false}

``image_ref`` is either a filesystem path, ``<csv path>#<row index>`` for
FER-2013 rows, or ``synthetic:<seed>:<index>`` for generated images.
"""

from __future__ import annotations

import csv
import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DegenerateSplit, EmptyClass, FormatError, InsufficientSamples, UnknownLabel
from .labels import EmotionLabel

IMAGE_EXTENSIONS = {".jpg", ".jpeg", ".png", ".bmp", ".tif", ".tiff", ".webp"}


class SourceDataset(str, Enum):
    AFFECTNET = "affectnet"
    JAFFE = "jaffe"
    CKPLUS = "ckplus"
    FER2013 = "fer2013"
    SYNTHETIC = "synthetic"


@dataclass(frozen=True)
class Sample:
    image_ref: str
    label: EmotionLabel
    source: SourceDataset
    grayscale: bool = False

    def to_record(self) -> dict:
        return {
            "image_ref": self.image_ref,
            "label": int(self.label),
            "source": self.source.value,
            "grayscale": self.grayscale,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Sample":
        try:
            label = EmotionLabel(int(rec["label"]))
        except ValueError as e:
            raise UnknownLabel(f"label id {rec.get('label')!r} is not canonical") from e
        return cls(
            image_ref=str(rec["image_ref"]),
            label=label,
            source=SourceDataset(rec["source"]),
            grayscale=bool(rec.get("grayscale", False)),
        )


@dataclass
class DatasetManifest:
    samples: list[Sample] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    @property
    def counts(self) -> dict[EmotionLabel, int]:
        """Per-label sample counts, zero-filled over all seven labels."""
        c = Counter(s.label for s in self.samples)
        return {lbl: c.get(lbl, 0) for lbl in EmotionLabel}

    def by_label(self) -> dict[EmotionLabel, list[Sample]]:
        groups: dict[EmotionLabel, list[Sample]] = {lbl: [] for lbl in EmotionLabel}
        for s in self.samples:
            groups[s.label].append(s)
        return groups

    def labels(self) -> np.ndarray:
        return np.array([int(s.label) for s in self.samples], dtype=np.int64)

    def dumps(self) -> str:
        return "".join(json.dumps(s.to_record(), sort_keys=True) + "\n" for s in self.samples)

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        if not path.is_file():
            raise FormatError(f"manifest not found: {path}")
        samples = []
        for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            try:
                samples.append(Sample.from_record(json.loads(line)))
            except (json.JSONDecodeError, KeyError) as e:
                raise FormatError(f"{path}:{lineno}: bad manifest record ({e})") from e
        return cls(samples)


@dataclass(frozen=True)
class SamplingSpec:
    n: int
    seed: int = 42

    # sampling is always without replacement
    replacement: bool = field(default=False, init=False)

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"n must be positive, got {self.n}")


def compute_balanced_n(manifest: DatasetManifest) -> int:
    """Size of the smallest class; the per-class draw for a balanced subset."""
    counts = manifest.counts
    empty = [lbl.label_name for lbl, c in counts.items() if c == 0]
    if empty:
        raise EmptyClass(f"no samples for: {', '.join(empty)}")
    return min(counts.values())


def balanced_sample(manifest: DatasetManifest, spec: SamplingSpec) -> DatasetManifest:
    """Draw ``spec.n`` samples per label uniformly without replacement.

    Output is grouped by label in canonical order; within a label the order is
    the draw order.
    """
    groups = manifest.by_label()
    short = {lbl.label_name: len(g) for lbl, g in groups.items() if len(g) < spec.n}
    if short:
        raise InsufficientSamples(f"n={spec.n} exceeds class counts {short}")
    rng = np.random.default_rng(spec.seed)
    out: list[Sample] = []
    for lbl in EmotionLabel:
        group = groups[lbl]
        idx = rng.permutation(len(group))[: spec.n]
        out.extend(group[i] for i in idx)
    return DatasetManifest(out)


def _as_fraction(ratio) -> Fraction:
    if isinstance(ratio, str) and ":" in ratio:
        a, b = ratio.split(":")
        return Fraction(int(a), int(b))
    if isinstance(ratio, float):
        return Fraction(ratio).limit_denominator(10**6)
    return Fraction(ratio)


def stratified_split(
    manifest: DatasetManifest, train_ratio=Fraction(8, 10), seed: int = 42
) -> tuple[DatasetManifest, DatasetManifest]:
    """Randomly partition each label into floor(ratio * n) train and the rest val."""
    ratio = _as_fraction(train_ratio)
    if not 0 < ratio < 1:
        raise ValueError(f"train_ratio must be in (0, 1), got {ratio}")
    rng = np.random.default_rng(seed)
    train: list[Sample] = []
    val: list[Sample] = []
    for lbl, group in manifest.by_label().items():
        n_train = math.floor(ratio * len(group))
        if n_train == 0 or n_train == len(group):
            raise DegenerateSplit(
                f"{lbl.label_name}: {len(group)} samples at ratio {ratio} gives "
                f"{n_train} train / {len(group) - n_train} val"
            )
        perm = rng.permutation(len(group))
        train.extend(group[i] for i in perm[:n_train])
        val.extend(group[i] for i in perm[n_train:])
    return DatasetManifest(train), DatasetManifest(val)


# ---------------------------------------------------------------------------
# adapters

# AffectNet expression codes 0..7; 8..10 are None / Uncertain / Non-face.
AFFECTNET_CONTEMPT = 7
AFFECTNET_NON_EMOTION = {8, 9, 10}
AFFECTNET_TEST_PER_CLASS = 500

_AFFECTNET_LAYOUTS = {
    "manual": {
        "train": ("Manually_Annotated_file_lists/training.csv", "Manually_Annotated_Images"),
        "test": ("Manually_Annotated_file_lists/validation.csv", "Manually_Annotated_Images"),
    },
    "automatic": {
        "train": (
            "Automatically_annotated_file_list/automatically_annotated.csv",
            "Automatically_Annotated_Images",
        ),
    },
}


def load_affectnet(
    root: str | Path,
    split: str = "train",
    partition: str = "manual",
    strict: bool = True,
    expected_per_class: int | None = AFFECTNET_TEST_PER_CLASS,
) -> DatasetManifest:
    """Read an AffectNet annotation list into a canonical manifest.

    ``split="test"`` reads the presampled validation list, which is used as
    the held-out test set and must hold ``expected_per_class`` samples per
    label (pass None to skip the check). Contempt is always dropped. Codes
    8-10 raise UnknownLabel when ``strict``; otherwise they are dropped.
    """
    root = Path(root)
    try:
        rel_csv, img_dir = _AFFECTNET_LAYOUTS[partition][split]
    except KeyError:
        raise FormatError(f"no {split!r} split in the {partition!r} AffectNet layout") from None
    csv_path = root / rel_csv
    if not csv_path.is_file():
        raise FormatError(f"AffectNet annotation file missing: {csv_path}")

    samples = []
    with csv_path.open(newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or not {"subDirectory_filePath", "expression"} <= set(
            reader.fieldnames
        ):
            raise FormatError(f"{csv_path}: expected columns subDirectory_filePath, expression")
        for row in reader:
            try:
                code = int(float(row["expression"]))
            except (TypeError, ValueError):
                raise FormatError(f"{csv_path}: bad expression {row['expression']!r}") from None
            if code == AFFECTNET_CONTEMPT:
                continue
            if code in AFFECTNET_NON_EMOTION and not strict:
                continue
            if not 0 <= code < AFFECTNET_CONTEMPT:
                raise UnknownLabel(f"{csv_path}: AffectNet expression code {code}")
            ref = str(root / img_dir / row["subDirectory_filePath"])
            samples.append(Sample(ref, EmotionLabel(code), SourceDataset.AFFECTNET))
    samples.sort(key=lambda s: s.image_ref)
    manifest = DatasetManifest(samples)
    if split == "test" and expected_per_class is not None:
        bad = {l.label_name: c for l, c in manifest.counts.items() if c != expected_per_class}
        if bad:
            raise FormatError(
                f"AffectNet test split should hold {expected_per_class} per class, got {bad}"
            )
    return manifest


JAFFE_CODES = {
    "NE": EmotionLabel.NEUTRAL,
    "HA": EmotionLabel.HAPPY,
    "SA": EmotionLabel.SAD,
    "SU": EmotionLabel.SURPRISE,
    "FE": EmotionLabel.FEAR,
    "DI": EmotionLabel.DISGUST,
    "AN": EmotionLabel.ANGER,
}
# e.g. KA.AN1.39.tiff -> subject KA, expression AN, take 1, image id 39
_JAFFE_NAME = re.compile(r"^[A-Z]{2}\.([A-Z]{2})\d*\.\d+$")


def jaffe_label(filename: str) -> EmotionLabel:
    m = _JAFFE_NAME.match(Path(filename).stem)
    if m is None:
        raise FormatError(f"not a JAFFE file name: {filename}")
    try:
        return JAFFE_CODES[m.group(1)]
    except KeyError:
        raise UnknownLabel(f"JAFFE expression code {m.group(1)!r} in {filename}") from None


def load_jaffe(root: str | Path) -> DatasetManifest:
    root = Path(root)
    if not root.is_dir():
        raise FormatError(f"JAFFE directory missing: {root}")
    files = sorted(p for p in root.rglob("*") if p.suffix.lower() in IMAGE_EXTENSIONS)
    if not files:
        raise FormatError(f"no JAFFE images under {root}")
    return DatasetManifest(
        [Sample(str(p), jaffe_label(p.name), SourceDataset.JAFFE, grayscale=True) for p in files]
    )


# CK+ emotion codes; 2 (contempt) has no canonical counterpart.
CKPLUS_CODES = {
    0: EmotionLabel.NEUTRAL,
    1: EmotionLabel.ANGER,
    3: EmotionLabel.DISGUST,
    4: EmotionLabel.FEAR,
    5: EmotionLabel.HAPPY,
    6: EmotionLabel.SAD,
    7: EmotionLabel.SURPRISE,
}
CKPLUS_CONTEMPT = 2


def load_ckplus(
    root: str | Path,
    images_dir: str = "cohn-kanade-images",
    labels_dir: str = "Emotion",
    first_frame_neutral: bool = False,
) -> DatasetManifest:
    """One sample per labelled sequence: the sequence's last frame.

    With ``first_frame_neutral`` the first frame of every labelled sequence is
    also emitted as a neutral sample.
    """
    root = Path(root)
    img_root, lbl_root = root / images_dir, root / labels_dir
    if not img_root.is_dir() or not lbl_root.is_dir():
        raise FormatError(f"CK+ layout needs {img_root} and {lbl_root}")
    samples = []
    for label_file in sorted(lbl_root.glob("*/*/*_emotion.txt")):
        try:
            code = int(float(label_file.read_text().split()[0]))
        except (IndexError, ValueError):
            raise FormatError(f"unreadable CK+ label file {label_file}") from None
        if code == CKPLUS_CONTEMPT:
            continue
        if code not in CKPLUS_CODES:
            raise UnknownLabel(f"CK+ emotion code {code} in {label_file}")
        subject, seq = label_file.parent.parent.name, label_file.parent.name
        frames = sorted(
            p for p in (img_root / subject / seq).glob("*") if p.suffix.lower() in IMAGE_EXTENSIONS
        )
        if not frames:
            raise FormatError(f"CK+ sequence {subject}/{seq} has no frames")
        samples.append(Sample(str(frames[-1]), CKPLUS_CODES[code], SourceDataset.CKPLUS))
        if first_frame_neutral:
            samples.append(Sample(str(frames[0]), EmotionLabel.NEUTRAL, SourceDataset.CKPLUS))
    if not samples:
        raise FormatError(f"no labelled CK+ sequences under {root}")
    samples.sort(key=lambda s: (s.image_ref, int(s.label)))
    return DatasetManifest(samples)


# FER-2013 codes: 0 Angry, 1 Disgust, 2 Fear, 3 Happy, 4 Sad, 5 Surprise, 6 Neutral
FER2013_CODES = {
    0: EmotionLabel.ANGER,
    1: EmotionLabel.DISGUST,
    2: EmotionLabel.FEAR,
    3: EmotionLabel.HAPPY,
    4: EmotionLabel.SAD,
    5: EmotionLabel.SURPRISE,
    6: EmotionLabel.NEUTRAL,
}
FER2013_SIDE = 48


def _fer_columns(fieldnames: Sequence[str] | None) -> dict[str, str]:
    cols = {name.strip().lower(): name for name in fieldnames or ()}
    if not {"emotion", "pixels"} <= cols.keys():
        raise FormatError("FER-2013 CSV needs columns emotion,pixels[,usage]")
    return cols


def read_fer2013_rows(csv_path: str | Path) -> list[dict]:
    csv_path = Path(csv_path)
    if not csv_path.is_file():
        raise FormatError(f"FER-2013 CSV missing: {csv_path}")
    with csv_path.open(newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        cols = _fer_columns(reader.fieldnames)
        rows = []
        for row in reader:
            rows.append(
                {
                    "emotion": row[cols["emotion"]],
                    "pixels": row[cols["pixels"]],
                    "usage": row[cols["usage"]] if "usage" in cols else None,
                }
            )
    return rows


def fer2013_pixels(pixels: str) -> np.ndarray:
    """Decode a space-separated pixel string into a 48x48 uint8 array."""
    values = pixels.split()
    if len(values) != FER2013_SIDE * FER2013_SIDE:
        raise FormatError(f"FER-2013 row has {len(values)} pixels, expected 2304")
    return np.asarray(values, dtype=np.uint8).reshape(FER2013_SIDE, FER2013_SIDE)


def load_fer2013(csv_path: str | Path, usage: str | Iterable[str] | None = None) -> DatasetManifest:
    """Manifest over FER-2013 rows; ``usage`` filters on the Usage column."""
    if isinstance(usage, str):
        usage = {usage}
    usage = set(usage) if usage is not None else None
    samples = []
    for i, row in enumerate(read_fer2013_rows(csv_path)):
        if usage is not None and row["usage"] not in usage:
            continue
        try:
            code = int(row["emotion"])
        except ValueError:
            raise FormatError(f"{csv_path}: row {i} has emotion {row['emotion']!r}") from None
        if code not in FER2013_CODES:
            raise UnknownLabel(f"{csv_path}: row {i} emotion code {code}")
        if len(row["pixels"].split()) != FER2013_SIDE * FER2013_SIDE:
            raise FormatError(f"{csv_path}: row {i} is not a 48x48 image")
        samples.append(
            Sample(f"{csv_path}#{i}", FER2013_CODES[code], SourceDataset.FER2013, grayscale=True)
        )
    return DatasetManifest(samples)


def synthetic_manifest(per_class: int | dict, seed: int = 0) -> DatasetManifest:
    """Generated samples whose images encode their label (see preprocess.render_synthetic)."""
    if isinstance(per_class, int):
        per_class = {lbl: per_class for lbl in EmotionLabel}
    samples = []
    idx = 0
    for lbl in EmotionLabel:
        for _ in range(per_class.get(lbl, 0)):
            samples.append(Sample(f"synthetic:{seed}:{idx}", lbl, SourceDataset.SYNTHETIC))
            idx += 1
    return DatasetManifest(samples)
