"""Input checks shared by the estimator wrappers."""

from __future__ import annotations

from typing import Optional

import numpy as np

from .raster import GrayImage


def check_image(x, name: str = "image", binary: bool = False) -> np.ndarray:
    """Return a finite float64 2D array in [0, 1] (exactly 0/1 when ``binary``)."""
    arr = np.asarray(x.data if isinstance(x, GrayImage) else x, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2D, got shape {arr.shape}")
    if arr.size == 0 or not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be non-empty and finite")
    if arr.min() < 0 or arr.max() > 1:
        raise ValueError(f"{name} values must lie in [0, 1]")
    if binary and not np.all((arr == 0) | (arr == 1)):
        raise ValueError(f"{name} must be binary (0/1)")
    return arr


def check_stack(X, name: str = "X", binary: bool = False) -> np.ndarray:
    """Accept one image or a sequence of equally sized images; return (N, H, W) float64."""
    if isinstance(X, GrayImage):
        X = [X]
    if isinstance(X, np.ndarray) and X.ndim == 2:
        X = [X]
    imgs = [check_image(x, f"{name}[{i}]", binary) for i, x in enumerate(X)]
    if not imgs:
        raise ValueError(f"{name} is empty")
    shapes = {im.shape for im in imgs}
    if len(shapes) != 1:
        raise ValueError(f"{name} images differ in shape: {sorted(shapes)}")
    return np.stack(imgs)


def check_pair(X, y, binary_y: bool = True):
    Xs = check_stack(X, "X", binary=True)
    ys = check_stack(y, "y", binary=binary_y)
    if Xs.shape != ys.shape:
        raise ValueError(f"X and y shapes differ: {Xs.shape} vs {ys.shape}")
    return Xs, ys


def check_positive(value, name: str, allow_zero: bool = False) -> float:
    v = float(value)
    if not np.isfinite(v) or v < 0 or (v == 0 and not allow_zero):
        raise ValueError(f"{name} must be {'non-negative' if allow_zero else 'positive'}, got {value!r}")
    return v


def check_is_fitted(est, attr: str) -> None:
    if getattr(est, attr, None) is None:
        raise RuntimeError(f"{type(est).__name__} is not fitted yet; call fit first")


def resolve_kernels(kernels, default_seed: Optional[int] = 0):
    """KernelSet, a path to a kernel file, or None (synthetic default set)."""
    from .litho import KernelSet, load_kernels, synth_kernels

    if kernels is None:
        return synth_kernels(seed=default_seed or 0)
    if isinstance(kernels, KernelSet):
        return kernels
    return load_kernels(kernels)
