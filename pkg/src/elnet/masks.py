"""Binary masks, grayscale images, and segmentation metrics.

Masks binarize 8-bit files at the 128 midpoint. Metric conventions for
degenerate masks: iou/dice of two empty masks is 1.0, of one empty mask 0.0;
a class absent from both inputs contributes 1.0 to the two-class mean IoU.
File formats: PNG (8-bit gray or RGB) and binary PGM (P5).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image

__all__ = [
    "Mask",
    "GrayImage",
    "ConfusionCounts",
    "load_mask",
    "save_mask",
    "load_image",
    "save_image",
    "confusion",
    "accuracy",
    "iou",
    "dice",
    "miou",
]

BIN_THRESHOLD = 128


@dataclass(frozen=True)
class Mask:
    """H x W grid of {0,1} uint8 values, 1 = foreground."""

    bits: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.bits)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"mask must be 2-D and non-empty, got shape {arr.shape}")
        if not np.isin(arr, (0, 1)).all():
            raise ValueError("mask values must be 0 or 1")
        object.__setattr__(self, "bits", arr.astype(np.uint8))

    @property
    def shape(self) -> tuple[int, int]:
        return self.bits.shape

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    def count(self) -> int:
        return int(self.bits.sum())

    def __eq__(self, other) -> bool:
        return isinstance(other, Mask) and np.array_equal(self.bits, other.bits)

    def __hash__(self):
        return hash((self.shape, self.bits.tobytes()))


@dataclass(frozen=True)
class GrayImage:
    """H x W float image with values in [0,1]; stored single-channel."""

    values: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float32)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"image must be 2-D and non-empty, got shape {arr.shape}")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("image values must lie in [0,1]")
        object.__setattr__(self, "values", arr)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        for name in ("tp", "fp", "tn", "fn"):
            if getattr(self, name) < 0:
                raise ValueError(f"negative count {name}")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


# -- file IO ---------------------------------------------------------------


def _read_array(path: str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.mode in ("I", "I;16", "F"):
                raise ValueError(f"unsupported bit depth in {path} (mode {im.mode})")
            if im.mode not in ("L", "RGB"):
                im = im.convert("RGB" if "A" in im.mode or im.mode == "P" else "L")
            arr = np.asarray(im)
    except FileNotFoundError:
        raise
    except ValueError:
        raise
    except Exception as exc:
        raise ValueError(f"unreadable image file {path}: {exc}") from exc
    if arr.ndim == 3:
        # ITU-R 601 luma, same weights Pillow uses for L conversion
        arr = (arr[..., 0] * 0.299 + arr[..., 1] * 0.587 + arr[..., 2] * 0.114).round()
    return arr.astype(np.uint8)


def load_mask(path: str) -> Mask:
    arr = _read_array(path)
    return Mask((arr >= BIN_THRESHOLD).astype(np.uint8))


def save_mask(mask: Mask, path: str) -> None:
    Image.fromarray(mask.bits * np.uint8(255), mode="L").save(path)


def load_image(path: str) -> GrayImage:
    return GrayImage(_read_array(path).astype(np.float32) / 255.0)


def save_image(img: GrayImage, path: str) -> None:
    arr = np.clip(np.rint(img.values * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)


# -- metrics ------------------------------------------------------------------


def _check_shapes(a, b) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")


def confusion(pred: Mask, gt: Mask) -> ConfusionCounts:
    _check_shapes(pred, gt)
    p = pred.bits.astype(bool)
    g = gt.bits.astype(bool)
    return ConfusionCounts(
        tp=int(np.count_nonzero(p & g)),
        fp=int(np.count_nonzero(p & ~g)),
        tn=int(np.count_nonzero(~p & ~g)),
        fn=int(np.count_nonzero(~p & g)),
    )


def accuracy(c: ConfusionCounts) -> float:
    if c.total == 0:
        raise ValueError("empty confusion counts")
    return (c.tp + c.tn) / c.total


def iou(a: Mask, b: Mask) -> float:
    _check_shapes(a, b)
    inter = int(np.count_nonzero(a.bits & b.bits))
    union = int(np.count_nonzero(a.bits | b.bits))
    if union == 0:
        return 1.0  # both empty
    return inter / union


def dice(a: Mask, b: Mask) -> float:
    _check_shapes(a, b)
    inter = int(np.count_nonzero(a.bits & b.bits))
    total = a.count() + b.count()
    if total == 0:
        return 1.0
    return 2.0 * inter / total


def miou(pred: Mask, gt: Mask) -> float:
    """Two-class mean IoU; a class absent from both masks scores 1.0."""
    c = confusion(pred, gt)
    scores = []
    for tp_c, fp_c, fn_c in ((c.tp, c.fp, c.fn), (c.tn, c.fn, c.fp)):
        denom = tp_c + fp_c + fn_c
        scores.append(1.0 if denom == 0 else tp_c / denom)
    return float(np.mean(scores))
