"""Numerical ILT: gradient descent on the sigmoid-relaxed mask variable."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .litho import (
    KernelSet,
    ProcessCondition,
    RelaxConfig,
    coherent_fields,
    intensity_from_fields,
    intensity_gradient,
    sigmoid_mask,
    sigmoid_resist,
)
from .raster import BinaryImage, as_array, pixel_size_of

log = logging.getLogger(__name__)


class IltDivergence(RuntimeError):
    def __init__(self, iteration: int):
        super().__init__(f"ILT loss became non-finite at iteration {iteration}")
        self.iteration = iteration


@dataclass(frozen=True)
class IltConfig:
    max_iters: int = 200
    step_size: float = 2.0
    relax: RelaxConfig = field(default_factory=RelaxConfig)
    nominal: ProcessCondition = field(default_factory=ProcessCondition)
    loss_kind: str = "squared-l2"
    stop_rel_tol: float = 0.0
    keep_best: bool = True
    snapshot_every: int = 0

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError(f"max_iters must be >= 1, got {self.max_iters}")
        if not self.step_size >= 0:
            raise ValueError(f"step_size must be non-negative, got {self.step_size}")
        if self.stop_rel_tol < 0:
            raise ValueError("stop_rel_tol must be >= 0")
        if self.loss_kind != "squared-l2":
            raise ValueError(f"unsupported loss kind {self.loss_kind!r}")

    def to_dict(self) -> dict:
        return {
            "max_iters": self.max_iters,
            "step_size": self.step_size,
            "beta_m": self.relax.beta_m,
            "beta_z": self.relax.beta_z,
            "i_th": self.nominal.i_th,
            "dose_scale": self.nominal.dose_scale,
            "loss_kind": self.loss_kind,
            "stop_rel_tol": self.stop_rel_tol,
            "keep_best": self.keep_best,
            "snapshot_every": self.snapshot_every,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "IltConfig":
        d = dict(d)
        relax = RelaxConfig(d.pop("beta_m", 4.0), d.pop("beta_z", 50.0))
        nominal = ProcessCondition(i_th=d.pop("i_th", 0.225), dose_scale=d.pop("dose_scale", 1.0))
        return cls(relax=relax, nominal=nominal, **d)


@dataclass
class OptTrace:
    losses: List[float] = field(default_factory=list)
    snapshots: List[Tuple[int, np.ndarray]] = field(default_factory=list)
    best_mask: Optional[np.ndarray] = None
    best_iter: int = -1

    @property
    def best_loss(self) -> float:
        return self.losses[self.best_iter]

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("iter,loss\n")
            for i, loss in enumerate(self.losses):
                fh.write(f"{i},{loss:.10g}\n")


def ilt_loss(z_relaxed, design) -> float:
    z, target = as_array(z_relaxed), as_array(design)
    if z.shape != target.shape:
        raise ValueError(f"shape mismatch {z.shape} vs {target.shape}")
    return float(np.sum((z - target) ** 2))


def _forward(m_prime, design, ks, cfg):
    mask = sigmoid_mask(m_prime, cfg.relax)
    fields = coherent_fields(mask, ks)
    intensity = intensity_from_fields(fields, ks)
    z = sigmoid_resist(intensity, cfg.nominal, cfg.relax)
    return mask, z, float(np.sum((z - design) ** 2))


def _backward(mask, z, design, ks, cfg):
    dz = 2.0 * (z - design)
    di = dz * cfg.relax.beta_z * cfg.nominal.dose_scale * z * (1.0 - z)
    dm = intensity_gradient(mask, di, ks)
    return dm * cfg.relax.beta_m * mask * (1.0 - mask)


def ilt_loss_and_gradient(m_prime, design, ks: KernelSet, cfg: IltConfig = IltConfig()):
    mp, target = as_array(m_prime), as_array(design)
    if mp.shape != target.shape:
        raise ValueError(f"shape mismatch {mp.shape} vs {target.shape}")
    mask, z, loss = _forward(mp, target, ks, cfg)
    return loss, _backward(mask, z, target, ks, cfg)


def ilt_gradient(m_prime, design, ks: KernelSet, cfg: IltConfig = IltConfig()) -> np.ndarray:
    """Gradient of the relaxed squared-L2 printing loss with respect to ``M'``."""
    return ilt_loss_and_gradient(m_prime, design, ks, cfg)[1]


def ilt_optimize(design, ks: KernelSet, cfg: IltConfig = IltConfig()):
    """Run plain gradient descent from ``M' = design``.

    Returns the (best, if ``keep_best``) relaxed mask binarized at 0.5 and the
    optimisation trace. The trace records the loss of every evaluated iterate,
    starting with the initial design.
    """
    target = as_array(design)
    mp = target.astype(np.float64).copy()
    trace = OptTrace()
    window = 10
    for it in range(cfg.max_iters):
        mask, z, loss = _forward(mp, target, ks, cfg)
        if not np.isfinite(loss):
            raise IltDivergence(it)
        trace.losses.append(loss)
        if trace.best_iter < 0 or loss < trace.best_loss or not cfg.keep_best:
            trace.best_iter = it
            trace.best_mask = mask
        if cfg.snapshot_every and it % cfg.snapshot_every == 0:
            trace.snapshots.append((it, mask.copy()))
        if cfg.stop_rel_tol > 0 and it >= window:
            prev = trace.losses[it - window]
            if prev > 0 and (prev - loss) / prev < cfg.stop_rel_tol:
                log.debug("ILT stopped at iteration %d (relative improvement below tolerance)", it)
                break
        if it == cfg.max_iters - 1:
            break
        grad = _backward(mask, z, target, ks, cfg)
        mp = mp - cfg.step_size * grad
    out = (trace.best_mask > 0.5).astype(np.float64)
    return BinaryImage(out, pixel_size_of(design, ks.pixel_size)), trace
