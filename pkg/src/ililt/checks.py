"""Finite-difference gradient checks for every differentiable primitive."""

from __future__ import annotations

from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np

from . import grad as G
from .litho import RelaxConfig, synth_kernels

Case = Tuple[Callable, List[np.ndarray]]


def _probe(t: G.Tensor, seed: int) -> G.Tensor:
    """sum(c * t) with fixed random c so every output entry contributes."""
    c = np.random.default_rng(seed).normal(size=t.shape)
    return G.total(G.mul(t, c))


def _cprobe(t: G.Tensor, seed: int) -> G.Tensor:
    return G.add(_probe(G.real(t), seed), _probe(G.imag(t), seed + 1))


def gradcheck_cases(seed: int = 0) -> Dict[str, Case]:
    """Named (fn, inputs) pairs; all spatial extents are at most 16x16."""
    from .model import BackboneConfig, LithoContext, UpdateOperator, _reshape, litho_wafer

    rng = np.random.default_rng(seed)

    def R(*shape):
        return rng.normal(size=shape)

    ctx = LithoContext(synth_kernels(seed=seed, n=2, size=5, sigma_nm=10.0), relax=RelaxConfig(beta_z=8.0))
    tiny = UpdateOperator(BackboneConfig(patch_size=8, modes=2, channels=2, pool=2), seed=seed, dtype=np.float64)
    head_names = list(tiny.params)

    def operator_fn(m, z, d, *ws):
        saved = {n: tiny.params[n].tensor for n in head_names}
        try:
            for n, w in zip(head_names, ws):
                tiny.params[n].tensor = w
            return _probe(tiny.forward(m, z, d), 9)
        finally:
            for n in head_names:
                tiny.params[n].tensor = saved[n]

    def three_layer(x, w1, b1, w2, b2, w3, b3):
        h = G.relu(G.conv2d(x, w1, b1))
        h = G.sigmoid(G.conv2d(h, w2, b2))
        return _probe(G.conv2d(h, w3, b3), 11)

    cases: Dict[str, Case] = {
        "add": (lambda a, b: _probe(G.add(a, b), 1), [R(2, 3, 4), R(1, 3, 1)]),
        "mul": (lambda a, b: _probe(G.mul(a, b), 1), [R(2, 3), R(3)]),
        "complex_pointwise_mul": (lambda a, b: _cprobe(G.mul(G.as_complex(a), G.as_complex(b)), 1), [R(3, 4, 2), R(3, 4, 2)]),
        "scalar_mul": (lambda a: _probe(G.scalar_mul(a, -1.7), 1), [R(4, 4)]),
        "sigmoid": (lambda a: _probe(G.sigmoid(a), 1), [R(6, 6)]),
        "relu": (lambda a: _probe(G.relu(a), 1), [R(6, 6) + 0.1 * np.sign(R(6, 6))]),
        "logit": (lambda a: _probe(G.logit(a), 1), [0.5 + 0.4 * np.tanh(R(6, 6))]),
        "sum": (lambda a: G.scalar_mul(G.total(a), 0.3), [R(5, 5)]),
        "frobenius_sq_diff": (lambda a, b: G.frobenius_sq_diff(a, b), [R(4, 4), R(4, 4)]),
        "concat": (lambda a, b: _probe(G.concat([a, b], axis=1), 1), [R(2, 1, 4), R(2, 3, 4)]),
        "reshape": (lambda a: _probe(_reshape(a, (4, 8)), 1), [R(2, 16)]),
        "fft2": (lambda a: _cprobe(G.fft2(G.as_complex(a)), 1), [R(2, 8, 8, 2)]),
        "ifft2": (lambda a: _cprobe(G.ifft2(G.as_complex(a)), 1), [R(2, 8, 16, 2)]),
        "real_imag_as_complex": (lambda a: _cprobe(G.as_complex(a), 1), [R(3, 3, 2)]),
        "spectral_linear": (
            lambda x, w: _cprobe(G.spectral_linear(G.as_complex(x), G.as_complex(w)), 1),
            [R(2, 3, 4, 4, 2), R(3, 4, 4, 4, 2)],
        ),
        "mode_select": (lambda a: _cprobe(G.mode_select(G.as_complex(a), 3), 1), [R(1, 8, 8, 2)]),
        "mode_scatter": (lambda a: _cprobe(G.mode_scatter(G.as_complex(a), 8), 1), [R(1, 4, 4, 2)]),
        "patch_split": (lambda a: _probe(G.patch_split(a, 4), 1), [R(2, 3, 8, 8)]),
        "patch_merge": (lambda a: _probe(G.patch_merge(a, (2, 2)), 1), [R(8, 2, 4, 4)]),
        "avg_pool": (lambda a: _probe(G.avg_pool(a, 2), 1), [R(2, 8, 8)]),
        "bicubic_upsample": (lambda a: _probe(G.bicubic_upsample(a, 2), 1), [R(2, 8, 8)]),
        "conv2d": (lambda x, w, b: _probe(G.conv2d(x, w, b), 1), [R(2, 3, 8, 8), R(4, 3, 3, 3), R(4)]),
        "litho_wafer": (lambda m: _probe(litho_wafer(m, ctx), 1), [rng.random((1, 16, 16))]),
        "composite_3layer": (
            three_layer,
            [R(1, 2, 8, 8), R(4, 2, 3, 3), R(4), R(4, 4, 3, 3), R(4), R(1, 4, 1, 1), R(1)],
        ),
        "update_operator": (
            operator_fn,
            [rng.random((1, 16, 16)), rng.random((1, 16, 16)), rng.random((1, 16, 16))]
            + [tiny.params[n].data.copy() for n in head_names],
        ),
    }
    return cases


def run_gradcheck(seed: int = 0, n_coords: int = 10, eps: float = 1e-5, names: Sequence[str] = ()) -> Dict[str, float]:
    """Max relative error per case (64-bit, central differences).

    eps = 1e-5 balances truncation against round-off for the deeper cases.
    """
    cases = gradcheck_cases(seed)
    chosen = names or sorted(cases)
    return {name: G.numeric_vs_analytic(*cases[name], n_coords=n_coords, eps=eps, seed=seed) for name in chosen}
