"""Image containers, 8-bit PNG I/O, resampling and rectilinear edge extraction."""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import List, Union

import numpy as np
from PIL import Image

ArrayOrImage = Union["GrayImage", np.ndarray]


@dataclass(frozen=True)
class GrayImage:
    """A 2D grid of values in [0, 1] with a square physical pixel size (nm)."""

    data: np.ndarray
    pixel_size: float = 1.0

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64, copy=True)
        if arr.ndim != 2 or arr.shape[0] == 0 or arr.shape[1] == 0:
            raise ValueError(f"image data must be a non-empty 2D array, got shape {arr.shape}")
        if not self.pixel_size > 0:
            raise ValueError(f"pixel_size must be positive, got {self.pixel_size}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("image data contains non-finite values")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("image values must lie in [0, 1]")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "pixel_size", float(self.pixel_size))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self):
        return self.data.shape

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)


@dataclass(frozen=True)
class BinaryImage(GrayImage):
    def __post_init__(self):
        super().__post_init__()
        if not np.all((self.data == 0.0) | (self.data == 1.0)):
            raise ValueError("binary image values must be exactly 0 or 1")


@dataclass(frozen=True)
class EdgeSegment:
    """Axis-aligned piece of a design boundary.

    ``fixed_coord`` is the boundary line position (y for horizontal segments,
    x for vertical ones); the span runs along the other axis. ``inside_direction``
    is +1 when the pattern lies on the increasing-coordinate side of the line.
    """

    axis: str
    fixed_coord: float
    span_start: float
    span_end: float
    inside_direction: int

    def __post_init__(self):
        if self.axis not in ("horizontal", "vertical"):
            raise ValueError(f"bad axis {self.axis!r}")
        if not self.span_end > self.span_start:
            raise ValueError("span_end must exceed span_start")
        if self.inside_direction not in (1, -1):
            raise ValueError("inside_direction must be +1 or -1")

    @property
    def length(self) -> float:
        return self.span_end - self.span_start


def as_array(img: ArrayOrImage) -> np.ndarray:
    if isinstance(img, GrayImage):
        return img.data
    return np.asarray(img, dtype=np.float64)


def pixel_size_of(img: ArrayOrImage, default: float = 1.0) -> float:
    return img.pixel_size if isinstance(img, GrayImage) else default


def load_png(path, pixel_size: float = 1.0) -> GrayImage:
    """Read an 8-bit grayscale PNG; values become ``byte / 255``."""
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with Image.open(path) as im:
        if im.format != "PNG":
            raise ValueError(f"{path}: not a PNG file")
        if im.mode != "L":
            raise ValueError(f"{path}: unsupported PNG mode {im.mode!r}, expected 8-bit grayscale")
        raw = np.asarray(im, dtype=np.uint8)
    return GrayImage(raw.astype(np.float64) / 255.0, pixel_size)


def to_bytes(img: ArrayOrImage) -> np.ndarray:
    return np.rint(as_array(img) * 255.0).astype(np.uint8)


def save_png(img: ArrayOrImage, path) -> None:
    Image.fromarray(to_bytes(img), mode="L").save(path, format="PNG")


def binarize(img: ArrayOrImage, thresh: float = 0.5) -> BinaryImage:
    if not 0.0 < thresh < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {thresh}")
    out = (as_array(img) > thresh).astype(np.float64)
    return BinaryImage(out, pixel_size_of(img))


def avg_pool(img: ArrayOrImage, factor: int) -> GrayImage:
    arr = as_array(img)
    h, w = arr.shape
    if factor < 1 or h % factor or w % factor:
        raise ValueError(f"pool factor {factor} does not divide image shape {arr.shape}")
    pooled = arr.reshape(h // factor, factor, w // factor, factor).mean(axis=(1, 3))
    return GrayImage(np.clip(pooled, 0.0, 1.0), pixel_size_of(img) * factor)


def _cubic_weight(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    t = np.abs(t)
    w = np.zeros_like(t)
    near = t <= 1
    far = (t > 1) & (t < 2)
    w[near] = (a + 2) * t[near] ** 3 - (a + 3) * t[near] ** 2 + 1
    w[far] = a * t[far] ** 3 - 5 * a * t[far] ** 2 + 8 * a * t[far] - 4 * a
    return w


def bicubic_matrix(n: int, factor: int) -> np.ndarray:
    """Dense (n*factor, n) interpolation matrix, half-pixel aligned, edge-replicated."""
    out = n * factor
    src = (np.arange(out) + 0.5) / factor - 0.5
    base = np.floor(src).astype(int)
    mat = np.zeros((out, n))
    rows = np.arange(out)
    for off in (-1, 0, 1, 2):
        idx = base + off
        wts = _cubic_weight(src - idx)
        np.add.at(mat, (rows, np.clip(idx, 0, n - 1)), wts)
    return mat


def upsample_bicubic(img: ArrayOrImage, factor: int) -> GrayImage:
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    arr = as_array(img)
    if factor == 1:
        return GrayImage(arr, pixel_size_of(img))
    uh = bicubic_matrix(arr.shape[0], factor)
    uw = bicubic_matrix(arr.shape[1], factor)
    up = np.clip(uh @ arr @ uw.T, 0.0, 1.0)
    return GrayImage(up, pixel_size_of(img) / factor)


def _runs(mask: np.ndarray):
    """Yield (start, stop) index runs where a 1D boolean mask is True."""
    padded = np.concatenate(([False], mask, [False]))
    diff = np.diff(padded.astype(np.int8))
    starts = np.flatnonzero(diff == 1)
    stops = np.flatnonzero(diff == -1)
    return zip(starts.tolist(), stops.tolist())


def extract_edges(design: ArrayOrImage) -> List[EdgeSegment]:
    """Decompose the 0/1 boundary of a rectilinear raster into maximal straight segments.

    Pixels outside the image count as 0, so patterns touching the border get a
    closing edge on the image boundary.
    """
    arr = as_array(design) > 0.5
    ps = pixel_size_of(design)
    padded = np.pad(arr, 1).astype(np.int8)
    segments = []
    # horizontal boundaries: between rows r-1 and r, for r in 0..H
    dy = padded[1:, 1:-1] - padded[:-1, 1:-1]
    for r in range(dy.shape[0]):
        for sign in (1, -1):
            for c0, c1 in _runs(dy[r] == sign):
                segments.append(EdgeSegment("horizontal", r * ps, c0 * ps, c1 * ps, sign))
    dx = padded[1:-1, 1:] - padded[1:-1, :-1]
    for c in range(dx.shape[1]):
        for sign in (1, -1):
            for r0, r1 in _runs(dx[:, c] == sign):
                segments.append(EdgeSegment("vertical", c * ps, r0 * ps, r1 * ps, sign))
    return segments
