"""Image decoding and the fixed resize / pad / normalize pipeline.

Images move through three value ranges, in order: raw 0-255, unit 0-1,
normalized. The default geometry resizes to 768x768 and pads white rows
above and below to 1024x768 (height x width).
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .dataset import Sample, fer2013_pixels, read_fer2013_rows
from .errors import ChannelsMismatch, DimensionMismatch, FormatError, RangeError

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class ValueRange(str, Enum):
    RAW_0_255 = "raw_0_255"
    UNIT_0_1 = "unit_0_1"
    NORMALIZED = "normalized"


_WHITE = {ValueRange.RAW_0_255: 255.0, ValueRange.UNIT_0_1: 1.0}


@dataclass
class ImageTensor:
    data: torch.Tensor  # (C, H, W) float32
    value_range: ValueRange = ValueRange.RAW_0_255

    def __post_init__(self):
        if self.data.ndim != 3:
            raise DimensionMismatch(f"expected (C, H, W), got shape {tuple(self.data.shape)}")
        self.data = self.data.to(torch.float32)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "ImageTensor":
        """Wrap an 8-bit (H, W) or (H, W, C) array as a raw-range tensor."""
        arr = np.asarray(arr)
        if arr.ndim == 2:
            arr = arr[None]
        elif arr.ndim == 3:
            arr = arr.transpose(2, 0, 1)
        else:
            raise DimensionMismatch(f"cannot wrap array of shape {arr.shape}")
        return cls(torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32)))


@dataclass(frozen=True)
class NormalizationSpec:
    mean: tuple[float, float, float] = IMAGENET_MEAN
    std: tuple[float, float, float] = IMAGENET_STD

    def __post_init__(self):
        if len(self.mean) != 3 or len(self.std) != 3:
            raise ValueError("mean and std need three components")
        if any(s <= 0 for s in self.std):
            raise ValueError(f"std must be positive, got {self.std}")


@dataclass(frozen=True)
class PreprocessConfig:
    resize: int = 768
    height: int = 1024
    norm: NormalizationSpec = field(default_factory=NormalizationSpec)
    pad_value: float | None = None  # None: white for the current range

    @property
    def output_shape(self) -> tuple[int, int, int]:
        return (3, self.height, self.resize)


def gray_to_rgb(img: ImageTensor) -> ImageTensor:
    if img.data.shape[0] != 1:
        raise ChannelsMismatch(f"expected a single channel, got {img.data.shape[0]}")
    return ImageTensor(img.data.expand(3, -1, -1).clone(), img.value_range)


def resize_bilinear(img: ImageTensor, out_h: int, out_w: int) -> ImageTensor:
    """Bilinear resize with half-pixel centres and no antialiasing."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target size must be positive, got {out_h}x{out_w}")
    _, h, w = img.data.shape
    if (h, w) == (out_h, out_w):
        return ImageTensor(img.data.clone(), img.value_range)
    out = F.interpolate(
        img.data[None], size=(out_h, out_w), mode="bilinear", align_corners=False, antialias=False
    )[0]
    # rounding can push a lerp one ulp past its endpoints
    out = out.clamp(img.data.min(), img.data.max())
    return ImageTensor(out, img.value_range)


def pad_vertical_white(
    img: ImageTensor, side: int = 768, height: int = 1024, pad_value: float | None = None
) -> ImageTensor:
    """Pad a side x side image with equal white bands on top and bottom."""
    _, h, w = img.data.shape
    if (h, w) != (side, side):
        raise DimensionMismatch(f"expected {side}x{side} input, got {h}x{w}")
    if (height - side) % 2 or height < side:
        raise DimensionMismatch(f"cannot pad {side} rows symmetrically to {height}")
    if pad_value is None:
        try:
            pad_value = _WHITE[img.value_range]
        except KeyError:
            raise RangeError("padding must happen before normalization") from None
    band = (height - side) // 2
    out = F.pad(img.data, (0, 0, band, band), value=pad_value)
    return ImageTensor(out, img.value_range)


def to_unit(img: ImageTensor) -> ImageTensor:
    if img.value_range is not ValueRange.RAW_0_255:
        raise RangeError(f"to_unit expects raw_0_255, got {img.value_range.value}")
    return ImageTensor(img.data / 255.0, ValueRange.UNIT_0_1)


def normalize(img: ImageTensor, spec: NormalizationSpec = NormalizationSpec()) -> ImageTensor:
    if img.value_range is not ValueRange.UNIT_0_1:
        raise RangeError(f"normalize expects unit_0_1, got {img.value_range.value}")
    mean = torch.tensor(spec.mean, dtype=torch.float32).view(3, 1, 1)
    std = torch.tensor(spec.std, dtype=torch.float32).view(3, 1, 1)
    return ImageTensor((img.data - mean) / std, ValueRange.NORMALIZED)


# ---------------------------------------------------------------------------
# decoding


@functools.lru_cache(maxsize=8)
def _fer_rows(csv_path: str) -> list[dict]:
    return read_fer2013_rows(csv_path)


_GRAY_MODES = {"1", "L", "LA", "I", "I;16", "F"}
SYNTHETIC_SIDE = 28  # divisible by the 7 label bands


def render_synthetic(seed: int, index: int, label: int, side: int = SYNTHETIC_SIDE) -> np.ndarray:
    """Grayscale image with a bright vertical band at column block ``label``.

    Background is noise in [0, 100); the band is in [200, 256).
    """
    rng = np.random.default_rng([seed, index])
    img = rng.integers(0, 100, size=(side, side), dtype=np.uint8)
    width = side // 7
    img[:, label * width : (label + 1) * width] = rng.integers(
        200, 256, size=(side, width), dtype=np.uint8
    )
    return img


def decode(sample: Sample) -> ImageTensor:
    """Load a sample's pixels as a 3-channel raw-range tensor."""
    ref = sample.image_ref
    if ref.startswith("synthetic:"):
        _, seed, index = ref.split(":")
        arr = render_synthetic(int(seed), int(index), int(sample.label))
    elif "#" in ref and not Path(ref).exists():
        path, row = ref.rsplit("#", 1)
        rows = _fer_rows(path)
        try:
            arr = fer2013_pixels(rows[int(row)]["pixels"])
        except (IndexError, ValueError):
            raise FormatError(f"bad FER-2013 reference {ref}") from None
    else:
        try:
            with Image.open(ref) as im:
                arr = np.asarray(im.convert("L" if im.mode in _GRAY_MODES else "RGB"))
        except (OSError, ValueError) as e:
            raise FormatError(f"cannot decode image {ref}: {e}") from e
    img = ImageTensor.from_array(arr)
    return gray_to_rgb(img) if img.data.shape[0] == 1 else img


def preprocess(img: ImageTensor, cfg: PreprocessConfig = PreprocessConfig()) -> ImageTensor:
    """Resize, pad and normalize a raw 3-channel image."""
    if img.data.shape[0] == 1:
        img = gray_to_rgb(img)
    img = resize_bilinear(img, cfg.resize, cfg.resize)
    img = pad_vertical_white(img, cfg.resize, cfg.height, cfg.pad_value)
    img = to_unit(img)
    return normalize(img, cfg.norm)


def load_and_preprocess(sample: Sample, cfg: PreprocessConfig = PreprocessConfig()) -> torch.Tensor:
    return preprocess(decode(sample), cfg).data
