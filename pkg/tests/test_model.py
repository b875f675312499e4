import numpy as np
import pytest

from ililt import grad as G
from ililt.litho import ProcessCondition, RelaxConfig, synth_kernels
from ililt.model import (
    BackboneConfig,
    InferConfig,
    LithoContext,
    UntiedOperator,
    UpdateOperator,
    count_params,
    infer,
    iterate,
    litho_wafer,
    load_operator,
    save_operator,
    step,
    unroll,
)
from ililt.raster import BinaryImage

SMALL = BackboneConfig(patch_size=16, modes=4, channels=4, pool=2)
DESK_PARAM_COUNT = 8500


@pytest.fixture(scope="module")
def ctx():
    return LithoContext(synth_kernels(seed=0, n=2, size=9, sigma_nm=16.0))


def design(side=64, seed=0):
    rng = np.random.default_rng(seed)
    d = np.zeros((side, side))
    r, c = rng.integers(8, side // 2, 2)
    d[r : r + 16, c : c + 12] = 1
    return d


def rand_inputs(side=64, seed=1):
    rng = np.random.default_rng(seed)
    return rng.random((side, side)), rng.random((side, side)), design(side, seed)


class TestBackboneConfig:
    def test_zero_channels_rejected(self):
        with pytest.raises(ValueError):
            BackboneConfig(channels=0)

    def test_modes_bound(self):
        with pytest.raises(ValueError):
            BackboneConfig(patch_size=16, modes=9, pool=1)

    def test_patch_must_divide_tile(self):
        op = UpdateOperator(SMALL)
        with pytest.raises(ValueError):
            op.forward(*[np.zeros((40, 40))] * 3)

    def test_desk_param_count_pinned(self):
        assert count_params(UpdateOperator()) == DESK_PARAM_COUNT

    def test_count_is_config_determined(self):
        a, b = UpdateOperator(SMALL, seed=1), UpdateOperator(SMALL, seed=2)
        assert count_params(a) == count_params(b)
        expected = sum(int(np.prod(s)) for _, s in SMALL.parameter_shapes())
        assert count_params(a) == expected


class TestStep:
    def test_output_range(self):
        op = UpdateOperator(SMALL, seed=3, dtype=np.float64)
        for seed in range(3):
            out = step(*rand_inputs(seed=seed), op)
            assert out.shape == (64, 64) and np.all(out > 0) and np.all(out < 1)

    def test_zero_head_gives_half(self):
        op = UpdateOperator(SMALL, seed=3)
        op.params["head.weight"].data[...] = 0
        op.params["head.bias"].data[...] = 0
        out = step(*rand_inputs(), op)
        assert np.all(out == 0.5)

    def test_logit_skip_init_keeps_mask(self):
        # with the feature weights of the head removed the initial operator is sigma(logit(M_t))
        op = UpdateOperator(SMALL, seed=3, dtype=np.float64)
        op.params["head.weight"].data[0, : SMALL.channels] = 0
        m, z, d = rand_inputs()
        assert np.allclose(step(m, z, d, op), np.clip(m, 0.01, 0.99), atol=1e-12)

    def test_linear_skip_variant(self):
        cfg = BackboneConfig(patch_size=16, modes=4, channels=4, pool=2, logit_skip=False)
        op = UpdateOperator(cfg, seed=3, dtype=np.float64)
        op.params["head.weight"].data[0, : cfg.channels] = 0
        m, z, d = rand_inputs()
        expected = 1 / (1 + np.exp(-(4 * m + 4 * d - 4)))
        assert np.allclose(step(m, z, d, op), expected, atol=1e-12)
        assert count_params(op) == count_params(UpdateOperator(SMALL))

    def test_shape_mismatch(self):
        op = UpdateOperator(SMALL)
        with pytest.raises(ValueError):
            op.forward(np.zeros((32, 32)), np.zeros((32, 32)), np.zeros((64, 64)))

    def test_patch_translation(self):
        op = UpdateOperator(SMALL, seed=5, dtype=np.float64)
        m, z, d = rand_inputs(side=128, seed=2)
        p = SMALL.patch_size
        base = step(m, z, d, op)
        roll = lambda a: np.roll(a, p, axis=1)  # noqa: E731
        moved = step(roll(m), roll(z), roll(d), op)
        # the 3x3 token conv and the bicubic stencil reach one patch; compare
        # columns at least two patches away from the wrapped seam
        inner = slice(3 * p, 128 - p)
        assert np.array_equal(roll(base)[:, inner], moved[:, inner])

    def test_deterministic(self):
        op = UpdateOperator(SMALL, seed=5)
        a, b = step(*rand_inputs(), op), step(*rand_inputs(), op)
        assert np.array_equal(a, b)

    def test_batch_equals_single(self):
        op = UpdateOperator(SMALL, seed=6, dtype=np.float64)
        x1, x2 = rand_inputs(seed=1), rand_inputs(seed=2)
        batch = step(*[np.stack([a, b]) for a, b in zip(x1, x2)], op)
        assert np.allclose(batch[0], step(*x1, op), atol=1e-12)
        assert np.allclose(batch[1], step(*x2, op), atol=1e-12)

    def test_gradcheck_through_operator(self):
        cfg = BackboneConfig(patch_size=8, modes=2, channels=2, pool=2)
        op = UpdateOperator(cfg, seed=0, dtype=np.float64)
        rng = np.random.default_rng(0)
        m, z, d = rng.random((1, 16, 16)), rng.random((1, 16, 16)), rng.random((1, 16, 16))
        names = list(op.params)

        def fn(*ws):
            for name, w in zip(names, ws):
                op.params[name].tensor = w
            return G.total(G.mul(op.forward(m, z, d), np.linspace(-1, 1, 256).reshape(1, 16, 16)))

        originals = {n: op.params[n].tensor for n in names}
        try:
            err = G.numeric_vs_analytic(fn, [op.params[n].data.copy() for n in names], n_coords=6)
        finally:
            for n in names:
                op.params[n].tensor = originals[n]
        assert err < 1e-5


class TestWeightTying:
    def test_same_storage_every_step(self):
        op = UpdateOperator(SMALL)
        sets = [op.for_step(t).parameters() for t in range(4)]
        for s in sets[1:]:
            assert all(a is b and a.data is b.data for a, b in zip(sets[0], s))

    def test_untied_disjoint(self):
        op = UntiedOperator(SMALL, 3)
        ids = [id(p.data) for p in op.parameters()]
        assert len(set(ids)) == len(ids)
        assert count_params(op) == 3 * count_params(UpdateOperator(SMALL))
        assert len({p.name for p in op.parameters()}) == len(ids)
        assert op.for_step(7) is op.for_step(2)


class TestUnroll:
    def test_T1_trajectory_length(self, ctx):
        op = UpdateOperator(SMALL)
        calls = []
        orig = op.forward
        op.forward = lambda *a: calls.append(1) or orig(*a)
        masks, wafers = unroll(design(), op, 1, ctx)
        assert len(calls) == 1 and len(masks) == 2 and len(wafers) == 2

    def test_rejects_zero_depth(self, ctx):
        with pytest.raises(ValueError):
            unroll(design(), UpdateOperator(SMALL), 0, ctx)

    def test_starts_from_design_and_z_recomputed(self, ctx):
        op = UpdateOperator(SMALL, dtype=np.float64)
        d = design()
        masks, wafers = unroll(d, op, 3, ctx)
        assert np.array_equal(masks[0].data[0], d)
        for m, z in zip(masks, wafers):
            assert np.allclose(z.data, ctx.wafer(m.data), atol=1e-9)

    def test_bit_identical(self, ctx):
        a, _ = unroll(design(), UpdateOperator(SMALL, seed=2), 3, ctx)
        b, _ = unroll(design(), UpdateOperator(SMALL, seed=2), 3, ctx)
        assert all(np.array_equal(x.data, y.data) for x, y in zip(a, b))

    def test_detached_by_default(self, ctx):
        op = UpdateOperator(SMALL, dtype=np.float64)
        with G.Tape() as tape:
            unroll(design(), op, 2, ctx)
        assert "litho_wafer" not in {n.op for n in tape.nodes}
        with G.Tape() as tape:
            unroll(design(), op, 2, ctx, through_litho=True)
        assert "litho_wafer" in {n.op for n in tape.nodes}


def test_litho_wafer_gradcheck():
    ctx = LithoContext(synth_kernels(seed=1, n=2, size=5, sigma_nm=10.0), relax=RelaxConfig(beta_z=8.0))
    m0 = np.random.default_rng(0).random((1, 16, 16))
    fn = lambda m: G.total(G.mul(litho_wafer(m, ctx), np.linspace(0, 1, 256).reshape(1, 16, 16)))  # noqa: E731
    assert G.numeric_vs_analytic(fn, [m0], n_coords=10) < 1e-5


class TestInfer:
    def test_infinite_tol_one_step(self, ctx):
        _, res = infer(BinaryImage(design(), 8.0), UpdateOperator(SMALL), InferConfig(5, np.inf, ctx))
        assert len(res) == 1

    def test_zero_tol_runs_t_max(self, ctx):
        mask, res = infer(BinaryImage(design(), 8.0), UpdateOperator(SMALL), InferConfig(5, 0.0, ctx))
        assert len(res) == 5
        assert set(np.unique(mask.data)) <= {0.0, 1.0}

    def test_missing_litho(self):
        with pytest.raises(ValueError):
            iterate(design(), UpdateOperator(SMALL), InferConfig(2))

    def test_fixed_point_stays(self, ctx):
        # an operator whose head outputs its M_t input unchanged (to float precision) is at a fixed point immediately
        op = UpdateOperator(SMALL, dtype=np.float64)
        c = SMALL.channels
        op.params["head.weight"].data[...] = 0
        op.params["head.weight"].data[0, c, 0, 0] = 60.0  # saturate on M_t
        op.params["head.bias"].data[...] = -30.0
        _, res, hist = iterate(design(), op, InferConfig(6, 0.0, ctx), keep_masks=True)
        assert res[0] < 1e-12
        for a, b in zip(hist[1:], hist[2:]):
            assert np.array_equal(a, b)

    def test_residual_definition(self, ctx):
        op = UpdateOperator(SMALL, dtype=np.float64)
        _, res, hist = iterate(design(), op, InferConfig(3, 0.0, ctx), keep_masks=True)
        for r, a, b in zip(res, hist, hist[1:]):
            assert np.isclose(r, np.linalg.norm(b - a) / np.sqrt(a.size))


class TestCheckpoint:
    def test_round_trip(self, tmp_path, ctx):
        op = UpdateOperator(SMALL, seed=4)
        save_operator(tmp_path / "op.bin", op, {"T": 4})
        back, header = load_operator(tmp_path / "op.bin")
        assert header["T"] == 4 and back.config == SMALL
        assert np.array_equal(step(*rand_inputs(), op), step(*rand_inputs(), back))

    def test_untied_round_trip(self, tmp_path):
        op = UntiedOperator(SMALL, 2, seed=1)
        save_operator(tmp_path / "op.bin", op)
        back, _ = load_operator(tmp_path / "op.bin")
        assert isinstance(back, UntiedOperator) and len(back.ops) == 2
        for a, b in zip(op.parameters(), back.parameters()):
            assert np.array_equal(a.data, b.data)
