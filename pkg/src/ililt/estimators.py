"""scikit-learn style wrappers around the simulator, the ILT solver and the learned optimiser.

Images go in as one 2D array or a sequence / (N, H, W) stack of equally
sized arrays; outputs are always (N, H, W) float arrays.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .dataset import Dataset
from .ilt import IltConfig, ilt_optimize
from .litho import ProcessCondition, RelaxConfig, resist_threshold, simulate_intensity
from .metrics import EpeConfig, epe_violations
from .model import BackboneConfig, InferConfig, LithoContext, iterate
from .raster import BinaryImage
from .trainer import TrainConfig, train
from .validation import check_is_fitted, check_pair, check_positive, check_stack, resolve_kernels


class LithoSimulator(TransformerMixin, BaseEstimator):
    """Mask stack -> aerial intensity (``output="intensity"``) or binary wafer (``"wafer"``)."""

    def __init__(self, kernels=None, i_th: float = 0.225, dose_scale: float = 1.0, output: str = "wafer"):
        self.kernels = kernels
        self.i_th = i_th
        self.dose_scale = dose_scale
        self.output = output

    def fit(self, X, y=None):
        if self.output not in ("wafer", "intensity"):
            raise ValueError(f"output must be 'wafer' or 'intensity', got {self.output!r}")
        self.kernels_ = resolve_kernels(self.kernels)
        self.condition_ = ProcessCondition(self.kernels_.label, self.i_th, self.dose_scale)
        check_stack(X)
        return self

    def transform(self, X):
        check_is_fitted(self, "kernels_")
        out = []
        for m in check_stack(X):
            inten = simulate_intensity(m, self.kernels_)
            out.append(inten if self.output == "intensity" else resist_threshold(inten, self.condition_))
        return np.stack(out)


class IltSolver(TransformerMixin, BaseEstimator):
    """Design stack -> numerical ILT mask stack. ``fit`` only validates and resolves kernels."""

    def __init__(self, kernels=None, max_iters: int = 200, step_size: float = 2.0, stop_rel_tol: float = 0.0, beta_m: float = 4.0, beta_z: float = 50.0, i_th: float = 0.225):
        self.kernels = kernels
        self.max_iters = max_iters
        self.step_size = step_size
        self.stop_rel_tol = stop_rel_tol
        self.beta_m = beta_m
        self.beta_z = beta_z
        self.i_th = i_th

    def fit(self, X=None, y=None):
        self.kernels_ = resolve_kernels(self.kernels)
        check_positive(self.step_size, "step_size", allow_zero=True)
        self.config_ = IltConfig(
            max_iters=int(self.max_iters),
            step_size=float(self.step_size),
            relax=RelaxConfig(self.beta_m, self.beta_z),
            nominal=ProcessCondition(i_th=self.i_th),
            stop_rel_tol=self.stop_rel_tol,
        )
        return self

    def transform(self, X):
        check_is_fitted(self, "config_")
        Xs = check_stack(X, binary=True)
        self.traces_ = []
        out = []
        for d in Xs:
            mask, trace = ilt_optimize(BinaryImage(d, self.kernels_.pixel_size), self.kernels_, self.config_)
            out.append(mask.data)
            self.traces_.append(trace)
        return np.stack(out)


class ILILTOptimizer(BaseEstimator):
    """Learned weight-tied mask optimiser.

    ``fit(designs, golden_masks)`` trains the update operator with the
    trajectory loss; ``transform`` returns soft masks after ``t_max`` steps,
    ``predict`` their 0.5-binarised version; ``score`` is minus the mean EPE
    violation count of the printed predictions (higher is better).
    """

    def __init__(
        self,
        kernels=None,
        T: int = 4,
        epochs: int = 5,
        lr: float = 0.004,
        lr_decay: float = 0.5,
        weight_decay: float = 1e-4,
        batch_size: int = 2,
        weight_tying: bool = True,
        backprop_through_litho: bool = False,
        patch_size: int = 32,
        modes: int = 8,
        channels: int = 16,
        pool: int = 2,
        t_max: Optional[int] = None,
        residual_tol: float = 0.0,
        i_th: float = 0.225,
        seed: int = 0,
    ):
        self.kernels = kernels
        self.T = T
        self.epochs = epochs
        self.lr = lr
        self.lr_decay = lr_decay
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.weight_tying = weight_tying
        self.backprop_through_litho = backprop_through_litho
        self.patch_size = patch_size
        self.modes = modes
        self.channels = channels
        self.pool = pool
        self.t_max = t_max
        self.residual_tol = residual_tol
        self.i_th = i_th
        self.seed = seed

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            T=self.T,
            epochs=self.epochs,
            lr=self.lr,
            lr_decay=self.lr_decay,
            weight_decay=self.weight_decay,
            batch_size=self.batch_size,
            seed=self.seed,
            weight_tying=self.weight_tying,
            backprop_through_litho=self.backprop_through_litho,
            backbone=BackboneConfig(self.patch_size, self.modes, self.channels, self.pool),
            i_th=self.i_th,
        )

    def fit(self, X, y):
        Xs, ys = check_pair(X, y)
        self.kernels_ = resolve_kernels(self.kernels)
        ds = Dataset.from_arrays(Xs, ys, self.kernels_)
        self.operator_, self.report_ = train(ds, self._train_config())
        return self

    def _infer_config(self) -> InferConfig:
        ctx = LithoContext(self.kernels_, ProcessCondition(i_th=self.i_th))
        return InferConfig(self.t_max or self.T, self.residual_tol, ctx)

    def transform(self, X):
        check_is_fitted(self, "operator_")
        cfg = self._infer_config()
        self.residuals_ = []
        out = []
        for d in check_stack(X, binary=True):
            soft, res, _ = iterate(d, self.operator_, cfg)
            out.append(np.asarray(soft, dtype=np.float64))
            self.residuals_.append(res)
        return np.stack(out)

    def predict(self, X):
        return (self.transform(X) > 0.5).astype(np.float64)

    def score(self, X, y=None):
        masks = self.predict(X)
        designs = check_stack(X, binary=True)
        nominal = ProcessCondition(i_th=self.i_th)
        ps = self.kernels_.pixel_size
        counts = []
        for m, d in zip(masks, designs):
            wafer = resist_threshold(simulate_intensity(m, self.kernels_), nominal)
            counts.append(epe_violations(BinaryImage(wafer, ps), BinaryImage(d, ps), EpeConfig())[0])
        return -float(np.mean(counts))
