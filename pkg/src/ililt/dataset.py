"""Synthetic rectilinear tiles, golden-mask datasets and their JSON manifest."""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed

from .ilt import IltConfig, IltDivergence, ilt_optimize
from .litho import KernelSet, load_kernels, resist_threshold, save_kernels, simulate_intensity
from .metrics import EpeConfig, epe_violations
from .raster import BinaryImage, load_png, save_png

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1
Rect = Tuple[float, float, float, float]  # x, y, width, height in nm


@dataclass(frozen=True)
class TileBounds:
    side: int = 256
    pixel_size: float = 8.0
    margin: float = 160.0
    min_width: float = 40.0
    max_width: float = 400.0
    min_space: float = 48.0
    min_rects: int = 1
    max_rects: int = 8
    max_attempts: int = 2000

    def __post_init__(self):
        if self.max_rects < 1 or self.min_rects < 1 or self.min_rects > self.max_rects:
            raise ValueError("rectangle count bounds must satisfy 1 <= min_rects <= max_rects")
        if self.min_width <= 0 or self.max_width < self.min_width or self.min_space <= 0:
            raise ValueError("width/space bounds must be positive and ordered")


@dataclass(frozen=True)
class TileSpec:
    side: int
    pixel_size: float
    margin: float
    rects: Tuple[Rect, ...]
    min_width: float
    min_space: float

    def rasterize(self) -> BinaryImage:
        img = np.zeros((self.side, self.side))
        ps = self.pixel_size
        for x, y, w, h in self.rects:
            c0, r0 = int(round(x / ps)), int(round(y / ps))
            img[r0 : r0 + int(round(h / ps)), c0 : c0 + int(round(w / ps))] = 1.0
        return BinaryImage(img, ps)


def rect_gap(a: Rect, b: Rect) -> float:
    """Euclidean distance between two axis-aligned rectangles (0 if they touch/overlap)."""
    dx = max(0.0, max(a[0], b[0]) - min(a[0] + a[2], b[0] + b[2]))
    dy = max(0.0, max(a[1], b[1]) - min(a[1] + a[3], b[1] + b[3]))
    return float(np.hypot(dx, dy))


def gen_tile(seed: int, bounds: TileBounds = TileBounds()) -> Tuple[TileSpec, BinaryImage]:
    """Sample 1..max_rects non-touching rectangles by rejection.

    Raises RuntimeError when the attempt cap is hit before the sampled count
    of rectangles could be placed; a rule-violating tile is never returned.
    """
    rng = np.random.default_rng(seed)
    ps = bounds.pixel_size
    lo_px = int(np.ceil(bounds.margin / ps))
    hi_px = bounds.side - lo_px
    wmin = int(np.ceil(bounds.min_width / ps))
    wmax = min(int(np.floor(bounds.max_width / ps)), hi_px - lo_px)
    if wmax < wmin:
        raise RuntimeError("tile bounds infeasible: no room for a minimum-width rectangle")
    target = int(rng.integers(bounds.min_rects, bounds.max_rects + 1))
    rects: List[Rect] = []
    attempts = 0
    while len(rects) < target:
        attempts += 1
        if attempts > bounds.max_attempts:
            raise RuntimeError(f"could not place {target} rectangles within {bounds.max_attempts} attempts (seed {seed})")
        w, h = rng.integers(wmin, wmax + 1, size=2)
        x = rng.integers(lo_px, hi_px - w + 1)
        y = rng.integers(lo_px, hi_px - h + 1)
        cand = (float(x * ps), float(y * ps), float(w * ps), float(h * ps))
        if all(rect_gap(cand, r) >= bounds.min_space for r in rects):
            rects.append(cand)
    spec = TileSpec(bounds.side, ps, bounds.margin, tuple(rects), bounds.min_width, bounds.min_space)
    return spec, spec.rasterize()


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class ManifestEntry:
    design: str
    mask: str
    seed: int
    golden_epe: int = 0
    flagged: bool = False


@dataclass
class DatasetManifest:
    version: int
    pixel_size_nm: float
    tile_side: int
    kernels: str
    kernels_sha256: str
    ilt_config: dict
    entries: List[ManifestEntry] = field(default_factory=list)

    def to_json(self, path) -> None:
        tmp = str(path) + ".tmp"
        with open(tmp, "w") as fh:
            json.dump(asdict(self), fh, indent=2)
        os.replace(tmp, path)

    @classmethod
    def from_json(cls, path) -> "DatasetManifest":
        with open(path) as fh:
            raw = json.load(fh)
        raw["entries"] = [ManifestEntry(**e) for e in raw.get("entries", [])]
        return cls(**raw)


def _golden(seed: int, bounds: TileBounds, ks: KernelSet, ilt_cfg: IltConfig, epe_cfg: EpeConfig, max_retries: int = 10):
    for retry in range(max_retries):
        tile_seed = seed + retry * 1_000_003
        spec, design = gen_tile(tile_seed, bounds)
        try:
            mask, _ = ilt_optimize(design, ks, ilt_cfg)
        except IltDivergence as err:
            log.warning("tile seed %d diverged at iteration %d; regenerating", tile_seed, err.iteration)
            continue
        wafer = resist_threshold(simulate_intensity(mask.data, ks), ilt_cfg.nominal)
        epe, _ = epe_violations(BinaryImage(wafer, design.pixel_size), design, epe_cfg)
        return tile_seed, design, mask, epe
    raise RuntimeError(f"ILT diverged on {max_retries} consecutive tiles starting at seed {seed}")


def build_dataset(
    n: int,
    seed: int,
    ks: KernelSet,
    ilt_cfg: IltConfig,
    out_dir,
    bounds: TileBounds = TileBounds(),
    epe_cfg: EpeConfig = EpeConfig(),
    n_jobs: int = 1,
) -> DatasetManifest:
    """Generate ``n`` tiles, solve each with ILT and write PNG pairs plus ``manifest.json``."""
    if n < 1:
        raise ValueError("dataset needs at least one tile")
    os.makedirs(os.path.join(out_dir, "designs"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "masks"), exist_ok=True)
    kpath = os.path.join(out_dir, "kernels.bin")
    save_kernels(ks, kpath)
    seeds = [seed * 100_000 + i for i in range(n)]
    results = Parallel(n_jobs=n_jobs)(delayed(_golden)(s, bounds, ks, ilt_cfg, epe_cfg) for s in seeds)
    manifest = DatasetManifest(
        MANIFEST_VERSION, bounds.pixel_size, bounds.side, "kernels.bin", sha256_file(kpath), ilt_cfg.to_dict()
    )
    for i, (tile_seed, design, mask, epe) in enumerate(results):
        dname, mname = f"designs/tile_{i:05d}.png", f"masks/tile_{i:05d}.png"
        save_png(design, os.path.join(out_dir, dname))
        save_png(mask, os.path.join(out_dir, mname))
        manifest.entries.append(ManifestEntry(dname, mname, int(tile_seed), int(epe), epe > 0))
    manifest.to_json(os.path.join(out_dir, "manifest.json"))
    log.info("wrote %d tiles to %s (%d flagged)", n, out_dir, sum(e.flagged for e in manifest.entries))
    return manifest


@dataclass
class Dataset:
    root: str
    manifest: DatasetManifest
    kernels: KernelSet
    designs: np.ndarray
    masks: np.ndarray

    def __len__(self):
        return self.designs.shape[0]

    @property
    def pixel_size(self) -> float:
        return self.manifest.pixel_size_nm

    @classmethod
    def from_arrays(cls, designs, masks, kernels: KernelSet, pixel_size: Optional[float] = None) -> "Dataset":
        """In-memory dataset (no files) from (N, H, W) design and golden-mask stacks."""
        designs = np.asarray(designs, dtype=np.float64)
        masks = np.asarray(masks, dtype=np.float64)
        if designs.ndim != 3 or designs.shape != masks.shape:
            raise ValueError(f"expected matching (N, H, W) stacks, got {designs.shape} and {masks.shape}")
        ps = kernels.pixel_size if pixel_size is None else pixel_size
        entries = [ManifestEntry(f"<memory:{i}>", f"<memory:{i}>", -1) for i in range(designs.shape[0])]
        man = DatasetManifest(MANIFEST_VERSION, ps, designs.shape[-1], "", "", {}, entries)
        return cls("", man, kernels, designs, masks)

    def subset(self, idx: Sequence[int]) -> "Dataset":
        idx = np.asarray(idx, dtype=int)
        entries = [self.manifest.entries[i] for i in idx]
        man = DatasetManifest(**{**asdict(self.manifest), "entries": entries})
        return Dataset(self.root, man, self.kernels, self.designs[idx], self.masks[idx])

    def split(self, val_fraction: float = 0.1, seed: int = 0) -> Tuple["Dataset", "Dataset"]:
        """Seeded (train, validation) split; validation gets ``round(n * val_fraction)`` tiles."""
        n = len(self)
        n_val = int(round(n * val_fraction))
        order = np.random.default_rng(seed).permutation(n)
        return self.subset(np.sort(order[n_val:])), self.subset(np.sort(order[:n_val]))


def load_dataset(root, verify: bool = True) -> Dataset:
    manifest = DatasetManifest.from_json(os.path.join(root, "manifest.json"))
    kpath = os.path.join(root, manifest.kernels)
    if verify and sha256_file(kpath) != manifest.kernels_sha256:
        raise ValueError(f"{kpath}: kernel file hash does not match manifest")
    ks = load_kernels(kpath)
    designs, masks = [], []
    for e in manifest.entries:
        for rel, acc in ((e.design, designs), (e.mask, masks)):
            img = load_png(os.path.join(root, rel), manifest.pixel_size_nm)
            acc.append((img.data > 0.5).astype(np.float64))
    if not designs:
        raise ValueError(f"{root}: dataset is empty")
    shapes = {d.shape for d in designs} | {m.shape for m in masks}
    if len(shapes) != 1:
        raise ValueError(f"{root}: inconsistent tile dimensions {sorted(shapes)}")
    return Dataset(str(root), manifest, ks, np.stack(designs), np.stack(masks))
