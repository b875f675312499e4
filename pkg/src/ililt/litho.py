"""Forward lithography: SOCS optics, resist models, sigmoid relaxations and kernel I/O."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np
import scipy.fft as sfft
from numpy.polynomial.hermite import hermval

from .raster import BinaryImage, GrayImage, as_array, pixel_size_of

KERNEL_MAGIC = b"SOCSKRN1"
I_TH = 0.225


@dataclass(frozen=True)
class ProcessCondition:
    kernel_label: str = "nominal"
    i_th: float = I_TH
    dose_scale: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.i_th < 1.0:
            raise ValueError(f"i_th must lie in (0, 1), got {self.i_th}")
        if not self.dose_scale > 0.0:
            raise ValueError(f"dose_scale must be positive, got {self.dose_scale}")


def process_corners(i_th: float = I_TH, delta: float = 0.02, kernel_label: str = "nominal"):
    """(nominal, inner, outer) dose corners."""
    return (
        ProcessCondition(kernel_label, i_th, 1.0),
        ProcessCondition(kernel_label, i_th, 1.0 - delta),
        ProcessCondition(kernel_label, i_th, 1.0 + delta),
    )


@dataclass(frozen=True)
class RelaxConfig:
    beta_m: float = 4.0
    beta_z: float = 50.0

    def __post_init__(self):
        if not (self.beta_m > 0 and self.beta_z > 0):
            raise ValueError("sigmoid steepness values must be positive")


@dataclass(frozen=True, eq=False)
class KernelSet:
    """SOCS kernels ``h_k`` (origin-centred, odd square size) with weights ``alpha_k``."""

    kernels: np.ndarray
    weights: np.ndarray
    label: str = "nominal"
    pixel_size: float = 1.0
    _spectra: Dict[Tuple[int, int], np.ndarray] = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        kernels = np.array(self.kernels, dtype=np.complex128, copy=True)
        weights = np.array(self.weights, dtype=np.float64, copy=True).reshape(-1)
        if kernels.ndim != 3 or kernels.shape[1] != kernels.shape[2]:
            raise ValueError(f"kernels must have shape (N, size, size), got {kernels.shape}")
        if kernels.shape[0] < 1 or kernels.shape[0] != weights.shape[0]:
            raise ValueError("need at least one kernel and one weight per kernel")
        if kernels.shape[1] % 2 == 0:
            raise ValueError(f"kernel size must be odd, got {kernels.shape[1]}")
        if not np.all(np.isfinite(kernels)):
            raise ValueError("non-finite kernel values")
        if not np.all(weights > 0):
            raise ValueError("non-positive weight")
        if np.any(np.diff(weights) > 0):
            raise ValueError("weights must be sorted non-increasing")
        kernels.setflags(write=False)
        weights.setflags(write=False)
        object.__setattr__(self, "kernels", kernels)
        object.__setattr__(self, "weights", weights)

    @property
    def count(self) -> int:
        return self.kernels.shape[0]

    @property
    def size(self) -> int:
        return self.kernels.shape[1]

    @property
    def radius(self) -> int:
        return self.size // 2

    @property
    def intensity_bound(self) -> float:
        l1 = np.abs(self.kernels).sum(axis=(1, 2))
        return float(np.sum(self.weights * l1**2))

    def spectra(self, shape) -> np.ndarray:
        """FFTs of the kernels embedded origin-centred in a grid of ``shape``."""
        shape = tuple(shape)
        if shape not in self._spectra:
            h, w = shape
            if h < self.size or w < self.size:
                raise ValueError(f"mask {shape} smaller than kernel size {self.size}")
            r = self.radius
            grid = np.zeros((self.count, h, w), dtype=np.complex128)
            grid[:, : self.size, : self.size] = self.kernels
            grid = np.roll(grid, (-r, -r), axis=(1, 2))
            self._spectra[shape] = sfft.fft2(grid, axes=(1, 2))
        return self._spectra[shape]

    def __eq__(self, other):
        if not isinstance(other, KernelSet):
            return NotImplemented
        return (
            self.label == other.label
            and self.kernels.shape == other.kernels.shape
            and np.array_equal(self.kernels, other.kernels)
            and np.array_equal(self.weights, other.weights)
        )

    __hash__ = None


def _wrap_like(template, arr, binary=False):
    if isinstance(template, GrayImage):
        cls = BinaryImage if binary else GrayImage
        return cls(arr, template.pixel_size)
    return arr


def coherent_fields(mask, ks: KernelSet) -> np.ndarray:
    """Complex fields ``h_k * M`` (circular convolution), shape (N, H, W)."""
    m = as_array(mask)
    spec = sfft.fft2(m)
    return sfft.ifft2(ks.spectra(m.shape) * spec[None], axes=(1, 2))


def intensity_from_fields(fields: np.ndarray, ks: KernelSet) -> np.ndarray:
    return np.einsum("k,kij->ij", ks.weights, fields.real**2 + fields.imag**2)


def simulate_intensity(mask, ks: KernelSet):
    """Aerial intensity ``sum_k alpha_k |h_k * M|^2``.

    Returns a plain array for array input. For GrayImage input the result is
    clipped to [0, 1] to fit the container; use arrays when intensities may
    exceed one.
    """
    m = as_array(mask)
    if m.shape[0] < ks.size or m.shape[1] < ks.size:
        raise ValueError(f"mask {m.shape} smaller than kernel size {ks.size}")
    intensity = intensity_from_fields(coherent_fields(m, ks), ks)
    if isinstance(mask, GrayImage):
        return GrayImage(np.clip(intensity, 0.0, 1.0), mask.pixel_size)
    return intensity


def resist_threshold(intensity, pc: ProcessCondition):
    out = (pc.dose_scale * as_array(intensity) > pc.i_th).astype(np.float64)
    return _wrap_like(intensity, out, binary=True)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid_mask(m_prime, cfg: RelaxConfig = RelaxConfig()):
    m = _sigmoid(cfg.beta_m * (as_array(m_prime) - 0.5))
    return _wrap_like(m_prime, m)


def sigmoid_resist(intensity, pc: ProcessCondition, cfg: RelaxConfig = RelaxConfig()):
    z = _sigmoid(cfg.beta_z * (pc.dose_scale * as_array(intensity) - pc.i_th))
    return _wrap_like(intensity, z)


def intensity_gradient(mask, upstream, ks: KernelSet) -> np.ndarray:
    """Back-propagate ``dl/dI`` to ``dl/dM`` through the SOCS model."""
    m = as_array(mask)
    g = np.asarray(upstream, dtype=np.float64)
    if g.shape != m.shape:
        raise ValueError(f"upstream shape {g.shape} does not match mask {m.shape}")
    spectra = ks.spectra(m.shape)
    fields = sfft.ifft2(spectra * sfft.fft2(m)[None], axes=(1, 2))
    weighted = (2.0 * ks.weights)[:, None, None] * g[None] * fields
    back = sfft.fft2(weighted, axes=(1, 2)) * np.conj(spectra)
    return sfft.ifft2(back.sum(axis=0)).real


def _hermite_orders(n: int):
    orders = []
    degree = 0
    while len(orders) < n:
        for nx in range(degree, -1, -1):
            orders.append((nx, degree - nx))
        degree += 1
    return orders[:n]


def synth_kernels(
    seed: int = 0,
    n: int = 4,
    size: int = 35,
    sigma_nm: float = 32.0,
    pixel_size: float = 8.0,
    label: str = "nominal",
) -> KernelSet:
    """Gaussian-Hermite kernel set standing in for calibrated SOCS kernels.

    Kernel k is a Gaussian envelope times the k-th 2D Hermite polynomial, with
    a seeded +-5% anisotropy of the envelope and a seeded global phase. Weights
    start as ``0.6**k`` and are rescaled so an open (all-ones) field images to
    intensity 1.
    """
    if n < 1:
        raise ValueError("need at least one kernel")
    if size % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {size}")
    rng = np.random.default_rng(seed)
    sigma = sigma_nm / pixel_size
    r = size // 2
    coords = np.arange(-r, r + 1, dtype=np.float64)
    kernels = np.zeros((n, size, size), dtype=np.complex128)
    for k, (nx, ny) in enumerate(_hermite_orders(n)):
        sx, sy = sigma * (1.0 + rng.uniform(-0.05, 0.05, size=2))
        phase = np.exp(1j * rng.uniform(0.0, 2.0 * np.pi))
        hx = hermval(coords / sx, np.eye(nx + 1)[nx]) * np.exp(-0.5 * (coords / sx) ** 2)
        hy = hermval(coords / sy, np.eye(ny + 1)[ny]) * np.exp(-0.5 * (coords / sy) ** 2)
        kern = np.outer(hy, hx) * phase
        kernels[k] = kern / np.sqrt(np.sum(np.abs(kern) ** 2))
    # keep every stored value float32-representable so the binary format round-trips
    kernels = kernels.real.astype(np.float32) + 1j * kernels.imag.astype(np.float32)
    weights = 0.6 ** np.arange(n, dtype=np.float64)
    open_field = np.sum(weights * np.abs(kernels.sum(axis=(1, 2))) ** 2)
    weights = (weights / open_field).astype(np.float32).astype(np.float64)
    return KernelSet(kernels, weights, label=label, pixel_size=pixel_size)


def save_kernels(ks: KernelSet, path, sidecar: bool = True) -> None:
    n, size = ks.count, ks.size
    blob = bytearray(KERNEL_MAGIC)
    blob += struct.pack("<II", n, size)
    blob += ks.weights.astype("<f4").tobytes()
    pairs = np.stack([ks.kernels.real, ks.kernels.imag], axis=-1).astype("<f4")
    blob += pairs.tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(blob))
    if sidecar:
        with open(str(path) + ".json", "w") as fh:
            json.dump({"label": ks.label, "pixel_size_nm": ks.pixel_size}, fh, indent=2)


def load_kernels(path) -> KernelSet:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != KERNEL_MAGIC:
        raise ValueError(f"{path}: bad magic, not a SOCS kernel file")
    if len(blob) < 16:
        raise ValueError(f"{path}: truncated header")
    n, size = struct.unpack_from("<II", blob, 8)
    if n < 1:
        raise ValueError(f"{path}: kernel count must be >= 1")
    if size % 2 == 0:
        raise ValueError(f"{path}: kernel size {size} is not odd")
    expected = 16 + 4 * n + 8 * n * size * size
    if len(blob) != expected:
        raise ValueError(f"{path}: truncated or oversized file ({len(blob)} bytes, expected {expected})")
    weights = np.frombuffer(blob, dtype="<f4", count=n, offset=16).astype(np.float64)
    if not np.all(weights > 0):
        raise ValueError(f"{path}: non-positive weight")
    pairs = np.frombuffer(blob, dtype="<f4", offset=16 + 4 * n).reshape(n, size, size, 2)
    kernels = pairs[..., 0].astype(np.float64) + 1j * pairs[..., 1].astype(np.float64)
    label, pixel_size = "nominal", 1.0
    try:
        with open(str(path) + ".json") as fh:
            meta = json.load(fh)
        label = meta.get("label", label)
        pixel_size = float(meta.get("pixel_size_nm", pixel_size))
    except FileNotFoundError:
        pass
    return KernelSet(kernels, weights, label=label, pixel_size=pixel_size)
