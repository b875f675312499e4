"""Weight-tied mask update operator, its unrolled recurrence and fixed-point inference.

One update maps the current mask, its simulated wafer and the target design
to the next mask through a small patch-wise Fourier backbone:

    stack(M_t, Z_t, Z*) -> avg_pool -> patch_split -> fft2 -> keep low modes
    -> complex channel mixing -> ifft2 -> real -> relu -> patch_merge
    -> 3x3 token conv -> relu -> bicubic upsample
    -> 1x1 head over [features, M_t, Z_t, Z*] -> sigmoid
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from . import grad as G
from .litho import (
    KernelSet,
    ProcessCondition,
    RelaxConfig,
    coherent_fields,
    intensity_from_fields,
    intensity_gradient,
    sigmoid_resist,
)
from .raster import BinaryImage, as_array, pixel_size_of


LOGIT_EPS = 0.01


def _is_pow2(n: int) -> bool:
    return n >= 1 and not n & (n - 1)


@dataclass(frozen=True)
class BackboneConfig:
    patch_size: int = 32
    modes: int = 8
    channels: int = 16
    pool: int = 2
    token_kernel: int = 3
    skip_inputs: bool = True
    logit_skip: bool = True

    def __post_init__(self):
        if self.channels < 1:
            raise ValueError("backbone needs at least one hidden channel")
        if not _is_pow2(self.patch_size) or not _is_pow2(self.pool):
            raise ValueError("patch_size and pool must be powers of two")
        if self.patch_size % self.pool:
            raise ValueError("pool must divide patch_size")
        if not 1 <= self.modes <= min(self.patch_size // 2, self.pooled_patch):
            raise ValueError(f"modes must lie in [1, {min(self.patch_size // 2, self.pooled_patch)}]")
        if self.token_kernel % 2 == 0:
            raise ValueError("token conv kernel must be odd")

    @property
    def pooled_patch(self) -> int:
        return self.patch_size // self.pool

    def check_tile(self, shape) -> None:
        h, w = shape[-2:]
        if h % self.patch_size or w % self.patch_size:
            raise ValueError(f"patch size {self.patch_size} does not divide tile {h}x{w}")

    def parameter_shapes(self) -> List[Tuple[str, tuple]]:
        c, k, kt = self.channels, self.modes, self.token_kernel
        head_in = c + 3 if self.skip_inputs else c
        return [
            ("spectral.weight", (3, c, k, k, 2)),
            ("spectral.bias", (c,)),
            ("token.weight", (c, c, kt, kt)),
            ("token.bias", (c,)),
            ("head.weight", (1, head_in, 1, 1)),
            ("head.bias", (1,)),
        ]

    def to_dict(self) -> dict:
        return asdict(self)


class UpdateOperator:
    """The network ``g(M_t, Z_t, Z*; w)``; the same parameters serve every step."""

    def __init__(self, config: BackboneConfig = BackboneConfig(), seed: int = 0, dtype=np.float32, prefix: str = ""):
        self.config = config
        self.prefix = prefix
        rng = np.random.default_rng(seed)
        c, k = config.channels, config.modes
        init = {
            "spectral.weight": rng.uniform(-1, 1, (3, c, k, k, 2)) / (3 * k),
            "spectral.bias": np.zeros(c),
            "token.weight": rng.normal(0, np.sqrt(2.0 / (c * config.token_kernel**2)), (c, c, config.token_kernel, config.token_kernel)),
            "token.bias": np.zeros(c),
        }
        head_in = c + 3 if config.skip_inputs else c
        head = rng.normal(0, 1.0 / np.sqrt(head_in), (1, head_in, 1, 1))
        bias = 0.0
        if config.skip_inputs and config.logit_skip:
            # exactly "keep the current mask" in logit space, up to the feature term
            head[0, c:, 0, 0] = (1.0, 0.0, 0.0)
        elif config.skip_inputs:
            # start near "keep the current mask"
            head[0, c:, 0, 0] = (4.0, 0.0, 4.0)
            bias = -4.0
        init["head.weight"] = head
        init["head.bias"] = np.array([bias])
        self.params = {
            name: G.Parameter(prefix + name, init[name].reshape(shape), dtype=dtype)
            for name, shape in config.parameter_shapes()
        }

    def parameters(self) -> List[G.Parameter]:
        return list(self.params.values())

    def for_step(self, t: int) -> "UpdateOperator":
        return self

    def count_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, m_t, z_t, design) -> G.Tensor:
        return self.forward(m_t, z_t, design)

    def forward(self, m_t, z_t, design) -> G.Tensor:
        """Batched update on (N, H, W) tensors/arrays; returns the next mask (N, H, W)."""
        cfg, P = self.config, self.params
        m_t, z_t, design = (_as_batch(x, self.dtype) for x in (m_t, z_t, design))
        if not (m_t.shape == z_t.shape == design.shape):
            raise ValueError(f"input shapes differ: {m_t.shape}, {z_t.shape}, {design.shape}")
        cfg.check_tile(m_t.shape)
        n, h, w = m_t.shape
        x = G.concat([_channel(m_t), _channel(z_t), _channel(design)], axis=1)
        pooled = G.avg_pool(x, cfg.pool) if cfg.pool > 1 else x
        pp = cfg.pooled_patch
        grid = (h // cfg.patch_size, w // cfg.patch_size)
        patches = G.patch_split(pooled, pp)
        spec = G.mode_select(G.fft2(patches), cfg.modes)
        mixed = G.spectral_linear(spec, G.as_complex(P["spectral.weight"].tensor))
        feat = G.real(G.ifft2(G.mode_scatter(mixed, pp)))
        feat = G.relu(G.add(feat, _bias4(P["spectral.bias"].tensor)))
        feat = G.patch_merge(feat, grid)
        feat = G.relu(G.conv2d(feat, P["token.weight"].tensor, P["token.bias"].tensor))
        if cfg.pool > 1:
            feat = G.bicubic_upsample(feat, cfg.pool)
        if cfg.skip_inputs:
            m_skip = G.logit(_channel(m_t), LOGIT_EPS) if cfg.logit_skip else _channel(m_t)
            feat = G.concat([feat, m_skip, _channel(z_t), _channel(design)], axis=1)
        out = G.sigmoid(G.conv2d(feat, P["head.weight"].tensor, P["head.bias"].tensor))
        return _unchannel(out)

    @property
    def dtype(self):
        return next(iter(self.params.values())).data.dtype

    def header(self) -> dict:
        return {"backbone": self.config.to_dict(), "weight_tying": True, "n_sets": 1}


class UntiedOperator:
    """L2O ablation: one independent parameter set per unrolled step."""

    def __init__(self, config: BackboneConfig, n_steps: int, seed: int = 0, dtype=np.float32):
        if n_steps < 1:
            raise ValueError("need at least one step")
        self.config = config
        self.ops = [UpdateOperator(config, seed + t, dtype, prefix=f"step{t}.") for t in range(n_steps)]

    def for_step(self, t: int) -> UpdateOperator:
        # steps past the trained depth reuse the last set
        return self.ops[min(t, len(self.ops) - 1)]

    def parameters(self) -> List[G.Parameter]:
        return [p for op in self.ops for p in op.parameters()]

    def count_params(self) -> int:
        return sum(op.count_params() for op in self.ops)

    @property
    def dtype(self):
        return self.ops[0].dtype

    def header(self) -> dict:
        return {"backbone": self.config.to_dict(), "weight_tying": False, "n_sets": len(self.ops)}


Operator = Union[UpdateOperator, UntiedOperator]


def count_params(op: Operator) -> int:
    return op.count_params()


def _as_batch(x, dtype) -> G.Tensor:
    if not isinstance(x, G.Tensor):
        x = G.Tensor(np.asarray(as_array(x), dtype=dtype))
    if x.data.ndim == 2:
        x = _reshape(x, (1,) + x.shape)
    return x


def _reshape(t: G.Tensor, shape) -> G.Tensor:
    old = t.shape
    return G._record("reshape", (t,), t.data.reshape(shape), lambda g: (g.reshape(old),))


def _channel(t: G.Tensor) -> G.Tensor:
    return _reshape(t, (t.shape[0], 1) + t.shape[1:])


def _unchannel(t: G.Tensor) -> G.Tensor:
    return _reshape(t, (t.shape[0],) + t.shape[2:])


def _bias4(b: G.Tensor) -> G.Tensor:
    return _reshape(b, (1, b.shape[0], 1, 1))


# ------------------------------------------------------------------ litho glue


@dataclass(frozen=True)
class LithoContext:
    kernels: KernelSet
    condition: ProcessCondition = field(default_factory=ProcessCondition)
    relax: RelaxConfig = field(default_factory=RelaxConfig)

    def wafer(self, masks: np.ndarray) -> np.ndarray:
        """Relaxed wafer images for a (N, H, W) or (H, W) stack of masks."""
        m = np.asarray(masks, dtype=np.float64)
        if m.ndim == 2:
            return self._one(m)
        return np.stack([self._one(x) for x in m])

    def _one(self, m):
        intensity = intensity_from_fields(coherent_fields(m, self.kernels), self.kernels)
        return sigmoid_resist(intensity, self.condition, self.relax)


def litho_wafer(m: G.Tensor, ctx: LithoContext) -> G.Tensor:
    """Differentiable relaxed lithography on a (N, H, W) mask tensor."""
    data = np.asarray(m.data, dtype=np.float64)
    z = ctx.wafer(data)
    dose, beta = ctx.condition.dose_scale, ctx.relax.beta_z

    def vjp(g):
        di = np.asarray(g, dtype=np.float64) * beta * dose * z * (1.0 - z)
        return (np.stack([intensity_gradient(data[i], di[i], ctx.kernels) for i in range(data.shape[0])]),)

    return G._record("litho_wafer", (m,), z.astype(m.dtype), vjp)


# ------------------------------------------------------------------- recurrence


def unroll(design, op: Operator, T: int, ctx: LithoContext, through_litho: bool = False):
    """Run the recurrence for ``T`` steps from ``M_0 = design``.

    Returns lists ``masks`` and ``wafers`` of length ``T + 1`` (Tensors of
    shape (N, H, W)). Unless ``through_litho`` is set, each ``Z_t`` enters the
    operator detached from the gradient graph.
    """
    if T < 1:
        raise ValueError(f"unroll depth must be >= 1, got {T}")
    m = _as_batch(design, op.dtype)
    masks, wafers = [m], []
    for t in range(T + 1):
        if through_litho:
            z = litho_wafer(m, ctx)
        else:
            z = G.Tensor(ctx.wafer(m.data).astype(op.dtype))
        wafers.append(z)
        if t == T:
            break
        m = op.for_step(t).forward(m, z, masks[0])
        masks.append(m)
    return masks, wafers


@dataclass(frozen=True)
class InferConfig:
    t_max: int = 4
    residual_tol: float = 0.0
    litho: Optional[LithoContext] = None

    def __post_init__(self):
        if self.t_max < 1:
            raise ValueError("t_max must be >= 1")
        if self.residual_tol < 0:
            raise ValueError("residual_tol must be >= 0")


def step(m_t, z_t, design, op: Operator, t: int = 0) -> np.ndarray:
    """One derivative-free update; accepts 2D images or (N, H, W) stacks."""
    single = not isinstance(m_t, G.Tensor) and np.ndim(as_array(m_t)) == 2
    out = op.for_step(t).forward(m_t, z_t, design).data
    return out[0] if single else out


def iterate(design, op: Operator, cfg: InferConfig, keep_masks: bool = False):
    """Fixed-point iteration. Returns (final soft mask, residuals, masks or None)."""
    if cfg.litho is None:
        raise ValueError("InferConfig.litho is required")
    target = np.asarray(as_array(design), dtype=op.dtype)
    m = target
    residuals: List[float] = []
    history = [m] if keep_masks else None
    for t in range(cfg.t_max):
        z = cfg.litho.wafer(m).astype(op.dtype)
        nxt = step(m, z, target, op, t)
        r = float(np.sqrt(np.sum((nxt.astype(np.float64) - m) ** 2) / m.size))
        residuals.append(r)
        m = nxt
        if keep_masks:
            history.append(m)
        if r < cfg.residual_tol:
            break
    return m, residuals, history


def infer(design, op: Operator, cfg: InferConfig):
    """Derivative-free mask optimisation; returns (binary mask, residuals)."""
    soft, residuals, _ = iterate(design, op, cfg)
    mask = (np.asarray(soft, dtype=np.float64) > 0.5).astype(np.float64)
    return BinaryImage(mask, pixel_size_of(design, cfg.litho.kernels.pixel_size)), residuals


# ------------------------------------------------------------------ checkpoints


def save_operator(path, op: Operator, extra: Optional[dict] = None) -> None:
    header = op.header()
    header.update(extra or {})
    G.save_checkpoint(path, op.parameters(), header)


def load_operator(path, dtype=np.float32) -> Tuple[Operator, dict]:
    header, arrays = G.load_checkpoint(path)
    config = BackboneConfig(**header["backbone"])
    if header.get("weight_tying", True):
        op: Operator = UpdateOperator(config, dtype=dtype)
    else:
        op = UntiedOperator(config, int(header["n_sets"]), dtype=dtype)
    params = op.parameters()
    if [p.name for p in params] != [e["name"] for e in header["params"]]:
        raise ValueError(f"{path}: parameter layout does not match backbone config")
    for p in params:
        p.tensor.data[...] = arrays[p.name]
    return op, header
