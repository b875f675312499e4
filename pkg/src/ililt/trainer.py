"""Back-propagation-through-time training of the update operator, plus evaluation."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import grad as G
from .dataset import Dataset
from .litho import ProcessCondition, RelaxConfig, process_corners
from .metrics import EpeConfig, epe_violations, l2_error, printed_corners
from .model import (
    BackboneConfig,
    InferConfig,
    LithoContext,
    Operator,
    UntiedOperator,
    UpdateOperator,
    iterate,
    save_operator,
    unroll,
)
from .raster import BinaryImage

log = logging.getLogger(__name__)


def half_round(T: int) -> int:
    """round(T/2) with ties going up."""
    return int(math.floor(T / 2 + 0.5))


def trajectory_weights(T: int) -> Dict[int, float]:
    if T < 1:
        raise ValueError("T must be >= 1")
    return {t: math.exp(t / T - 1.0) for t in range(half_round(T), T + 1)}


def trajectory_loss(masks: Sequence, golden, T: int) -> G.Tensor:
    """Weighted squared distance of the late-trajectory masks to the golden mask.

    ``masks`` holds exactly ``M_t`` for ``t = round(T/2) .. T``.
    """
    weights = trajectory_weights(T)
    if len(masks) != len(weights):
        raise ValueError(f"expected {len(weights)} masks for T={T}, got {len(masks)}")
    target = golden if isinstance(golden, G.Tensor) else G.Tensor(np.asarray(golden))
    total = None
    for (t, w), m in zip(sorted(weights.items()), masks):
        m = m if isinstance(m, G.Tensor) else G.Tensor(np.asarray(m))
        term = G.scalar_mul(G.frobenius_sq_diff(m, target), w)
        total = term if total is None else G.add(total, term)
    return total


@dataclass
class TrainConfig:
    T: int = 4
    epochs: int = 5
    lr: float = 0.004
    lr_decay: float = 0.5
    weight_decay: float = 0.0001
    batch_size: int = 2
    seed: int = 0
    weight_tying: bool = True
    backprop_through_litho: bool = False
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    relax: RelaxConfig = field(default_factory=RelaxConfig)
    i_th: float = 0.225
    dtype: str = "float32"
    checkpoint_dir: Optional[str] = None

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if isinstance(d.get("backbone"), dict):
            d["backbone"] = BackboneConfig(**d["backbone"])
        if isinstance(d.get("relax"), dict):
            d["relax"] = RelaxConfig(**d["relax"])
        return cls(**d)


@dataclass
class TrainReport:
    epoch_loss: List[float] = field(default_factory=list)
    val_epe: List[Optional[float]] = field(default_factory=list)
    checkpoints: List[str] = field(default_factory=list)
    epoch_seconds: List[float] = field(default_factory=list)
    n_params: int = 0

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=2)


def make_operator(cfg: TrainConfig) -> Operator:
    dtype = np.dtype(cfg.dtype)
    if cfg.weight_tying:
        return UpdateOperator(cfg.backbone, seed=cfg.seed, dtype=dtype)
    return UntiedOperator(cfg.backbone, cfg.T, seed=cfg.seed, dtype=dtype)


def sample_loss(op: Operator, designs: np.ndarray, golden: np.ndarray, cfg: TrainConfig, ctx: LithoContext) -> G.Tensor:
    """Summed trajectory loss of a (N, H, W) batch; record on an active tape for gradients."""
    masks, _ = unroll(designs, op, cfg.T, ctx, through_litho=cfg.backprop_through_litho)
    late = masks[half_round(cfg.T) :]
    return trajectory_loss(late, G.Tensor(np.asarray(golden, dtype=op.dtype)), cfg.T)


def train(
    dataset: Dataset,
    cfg: TrainConfig = TrainConfig(),
    val: Optional[Dataset] = None,
    op: Optional[Operator] = None,
    epe_cfg: EpeConfig = EpeConfig(),
):
    """Train with Adam on mean-over-batch trajectory loss.

    Returns ``(operator, report)``. Pass ``op`` to continue from existing weights.
    """
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    if dataset.designs.shape != dataset.masks.shape:
        raise ValueError("design and mask stacks have different shapes")
    op = op if op is not None else make_operator(cfg)
    ctx = LithoContext(dataset.kernels, ProcessCondition(i_th=cfg.i_th), cfg.relax)
    params = op.parameters()
    report = TrainReport(n_params=op.count_params())
    n = len(dataset)
    for epoch in range(cfg.epochs):
        start = time.perf_counter()
        lr = cfg.lr * cfg.lr_decay**epoch
        order = np.random.default_rng(cfg.seed * 7919 + epoch).permutation(n)
        losses = []
        for b0 in range(0, n, cfg.batch_size):
            idx = order[b0 : b0 + cfg.batch_size]
            G.zero_grad(params)
            with G.Tape() as tape:
                loss = sample_loss(op, dataset.designs[idx], dataset.masks[idx], cfg, ctx)
            G.backward(tape, loss, scale=1.0 / len(idx))
            G.adam_step(params, lr=lr, weight_decay=cfg.weight_decay)
            losses.append(loss.item() / len(idx))
        report.epoch_loss.append(float(np.mean(losses)))
        report.epoch_seconds.append(time.perf_counter() - start)
        if val is not None and len(val):
            summary = evaluate(val, op, InferConfig(t_max=cfg.T, litho=ctx), epe_cfg=epe_cfg, with_pvb=False)
            report.val_epe.append(summary["EPE"])
        else:
            report.val_epe.append(None)
        if cfg.checkpoint_dir:
            os.makedirs(cfg.checkpoint_dir, exist_ok=True)
            path = os.path.join(cfg.checkpoint_dir, f"epoch_{epoch + 1:03d}.bin")
            save_operator(path, op, {"T": cfg.T, "epoch": epoch + 1, "train_config": _jsonable(cfg.to_dict())})
            report.checkpoints.append(path)
        log.info("epoch %d: loss %.4g (%.1fs)", epoch + 1, report.epoch_loss[-1], report.epoch_seconds[-1])
    return op, report


def _jsonable(d):
    return json.loads(json.dumps(d, default=str))


def evaluate(
    dataset: Dataset,
    op: Operator,
    cfg: InferConfig,
    epe_cfg: EpeConfig = EpeConfig(),
    dose_delta: float = 0.02,
    with_pvb: bool = True,
) -> dict:
    """Infer every tile and score it: EPE at nominal, PVB across dose corners, seconds per tile.

    Returns a dict with means (``EPE``, ``PVB``, ``Throughput``, ``L2``) and
    per-tile ``rows`` (which also carry the residual sequence).
    """
    ks = cfg.litho.kernels
    nominal, inner, outer = process_corners(cfg.litho.condition.i_th, dose_delta, ks.label)
    ps = dataset.pixel_size
    rows = []
    for i in range(len(dataset)):
        design = BinaryImage(dataset.designs[i], ps)
        start = time.perf_counter()
        soft, residuals, _ = iterate(design, op, cfg)
        seconds = time.perf_counter() - start
        mask = (np.asarray(soft, dtype=np.float64) > 0.5).astype(np.float64)
        p_nom, p_in, p_out = printed_corners(mask, ks, nominal, inner, outer)
        if not (np.all(p_in <= p_nom) and np.all(p_nom <= p_out)):
            raise AssertionError("process-corner prints are not nested")
        epe, _ = epe_violations(BinaryImage(p_nom.astype(np.float64), ps), design, epe_cfg)
        pvb = float(np.count_nonzero(p_out & ~p_in)) * ps * ps if with_pvb else float("nan")
        rows.append(
            {
                "tile_id": i,
                "EPE": int(epe),
                "PVB": pvb,
                "Throughput": seconds,
                "L2": l2_error(soft.astype(np.float64), dataset.masks[i]),
                "steps": len(residuals),
                "residuals": [float(r) for r in residuals],
            }
        )
    return {
        "EPE": float(np.mean([r["EPE"] for r in rows])),
        "PVB": float(np.mean([r["PVB"] for r in rows])),
        "Throughput": float(np.mean([r["Throughput"] for r in rows])),
        "L2": float(np.mean([r["L2"] for r in rows])),
        "rows": rows,
    }


def write_metrics_csv(summary: dict, path) -> None:
    """Per-tile rows (tile_id, EPE, PVB [nm^2], Throughput [s/tile]) followed by a mean row."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["tile_id", "EPE", "PVB", "Throughput"])
        for r in summary["rows"]:
            writer.writerow([r["tile_id"], r["EPE"], f"{r['PVB']:.1f}", f"{r['Throughput']:.6f}"])
        writer.writerow(["mean", f"{summary['EPE']:.4f}", f"{summary['PVB']:.1f}", f"{summary['Throughput']:.6f}"])
