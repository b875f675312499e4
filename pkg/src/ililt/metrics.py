"""Printability metrics: EPE violations at nominal dose and PVB area across dose corners."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import List, Optional, Tuple

import numpy as np

from .litho import KernelSet, ProcessCondition, simulate_intensity
from .raster import EdgeSegment, as_array, extract_edges, pixel_size_of


@dataclass(frozen=True)
class EpeConfig:
    sample_interval: float = 40.0
    tolerance: float = 16.0
    search_window: float = 80.0

    def __post_init__(self):
        if min(self.sample_interval, self.tolerance, self.search_window) <= 0:
            raise ValueError("EPE config values must be positive")
        if self.search_window < self.tolerance:
            raise ValueError("search_window must be >= tolerance")


@dataclass(frozen=True)
class EpeSite:
    position: Tuple[float, float]  # (x, y) in nm
    measured_epe: Optional[float]  # None when no contour was found
    violating: bool


def sample_positions(seg: EdgeSegment, interval: float) -> List[float]:
    """Points along a segment: the midpoint, then outward steps strictly inside the span."""
    mid = 0.5 * (seg.span_start + seg.span_end)
    points = [mid]
    k = 1
    while True:
        added = False
        for pos in (mid - k * interval, mid + k * interval):
            if seg.span_start < pos < seg.span_end:
                points.append(pos)
                added = True
        if not added:
            break
        k += 1
    return sorted(points)


def _nearest_transition(line: np.ndarray, boundary: int, inside: int, reach: int) -> Optional[int]:
    """Distance (pixels) from ``boundary`` to the closest matching 0/1 crossing in ``line``.

    A crossing sits between indices ``b-1`` and ``b``; it matches when the
    pixel on the ``inside`` side is 1 and the other side is 0. Outside the
    array counts as 0.
    """
    n = line.shape[0]

    def px(i):
        return line[i] if 0 <= i < n else 0

    for d in range(reach + 1):
        for b in {boundary - d, boundary + d}:
            lo, hi = px(b - 1), px(b)
            if (inside > 0 and lo == 0 and hi == 1) or (inside < 0 and lo == 1 and hi == 0):
                return d
    return None


def epe_violations(wafer, design, cfg: EpeConfig = EpeConfig()):
    """Count EPE violations of a printed wafer against a rectilinear target.

    Returns ``(count, sites)``.
    """
    w = as_array(wafer) > 0.5
    ps = pixel_size_of(design)
    if pixel_size_of(wafer, ps) != ps:
        raise ValueError(f"pixel size mismatch: wafer {pixel_size_of(wafer)} vs design {ps}")
    if w.shape != as_array(design).shape:
        raise ValueError("wafer and design dimensions differ")
    w = w.astype(np.int8)
    reach = int(np.floor(cfg.search_window / ps + 1e-9))
    sites: List[EpeSite] = []
    for seg in extract_edges(design):
        boundary = int(round(seg.fixed_coord / ps))
        for pos in sample_positions(seg, cfg.sample_interval):
            idx = min(int(np.floor(pos / ps)), (w.shape[1] if seg.axis == "horizontal" else w.shape[0]) - 1)
            if seg.axis == "vertical":
                line = w[idx, :]
                xy = (seg.fixed_coord, pos)
            else:
                line = w[:, idx]
                xy = (pos, seg.fixed_coord)
            d = _nearest_transition(line, boundary, seg.inside_direction, reach)
            if d is None:
                sites.append(EpeSite(xy, None, True))
            else:
                epe = d * ps
                sites.append(EpeSite(xy, epe, epe > cfg.tolerance))
    count = sum(s.violating for s in sites)
    return count, sites


def printed_corners(mask, ks: KernelSet, nominal: ProcessCondition, inner: ProcessCondition, outer: ProcessCondition):
    """Binary prints at (nominal, inner, outer) from a single intensity simulation."""
    if not outer.dose_scale >= nominal.dose_scale >= inner.dose_scale:
        raise ValueError("process corners must satisfy outer dose >= nominal dose >= inner dose")
    intensity = simulate_intensity(as_array(mask), ks)
    return tuple(pc.dose_scale * intensity > pc.i_th for pc in (nominal, inner, outer))


def pvb_area(mask, ks: KernelSet, nominal: ProcessCondition, inner: ProcessCondition, outer: ProcessCondition) -> float:
    """Area (nm^2) printed at the outer corner but not at the inner corner."""
    _, p_in, p_out = printed_corners(mask, ks, nominal, inner, outer)
    ps = pixel_size_of(mask, ks.pixel_size)
    return float(np.count_nonzero(p_out & ~p_in)) * ps * ps


def l2_error(a, b) -> float:
    x, y = as_array(a), as_array(b)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    return float(np.sum((x - y) ** 2))


def sites_to_json(sites: List[EpeSite], path) -> None:
    with open(path, "w") as fh:
        json.dump([asdict(s) for s in sites], fh, indent=1)
