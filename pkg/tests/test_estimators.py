import numpy as np
import pytest
from sklearn.base import clone

from ililt import ILILTOptimizer, IltSolver, LithoSimulator, synth_kernels
from ililt.validation import check_image, check_stack


@pytest.fixture(scope="module")
def ks():
    return synth_kernels(seed=0, n=2, size=9, sigma_nm=16.0)


def designs(n=2, side=32):
    out = []
    for i in range(n):
        d = np.zeros((side, side))
        d[6 + i : 22 + i, 8:20] = 1
        out.append(d)
    return np.stack(out)


class TestValidation:
    def test_rejects_3d(self):
        with pytest.raises(ValueError):
            check_image(np.zeros((2, 2, 2)))

    def test_rejects_range(self):
        with pytest.raises(ValueError):
            check_image(np.full((2, 2), 2.0))

    def test_rejects_non_binary(self):
        with pytest.raises(ValueError):
            check_stack([np.full((2, 2), 0.5)], binary=True)

    def test_ragged(self):
        with pytest.raises(ValueError):
            check_stack([np.zeros((2, 2)), np.zeros((3, 3))])

    def test_single_image_promoted(self):
        assert check_stack(np.zeros((4, 4))).shape == (1, 4, 4)


class TestLithoSimulator:
    def test_params_and_clone(self, ks):
        est = LithoSimulator(kernels=ks, i_th=0.3)
        assert est.get_params()["i_th"] == 0.3
        assert clone(est).get_params()["i_th"] == 0.3

    def test_transform(self, ks):
        X = designs()
        wafer = LithoSimulator(kernels=ks).fit_transform(X)
        inten = LithoSimulator(kernels=ks, output="intensity").fit_transform(X)
        assert wafer.shape == X.shape and set(np.unique(wafer)) <= {0.0, 1.0}
        assert np.array_equal(wafer, (inten > 0.225).astype(float))

    def test_not_fitted(self, ks):
        with pytest.raises(RuntimeError):
            LithoSimulator(kernels=ks).transform(designs())

    def test_bad_output(self, ks):
        with pytest.raises(ValueError):
            LithoSimulator(kernels=ks, output="nope").fit(designs())


def test_ilt_solver(ks):
    est = IltSolver(kernels=ks, max_iters=5).fit()
    masks = est.transform(designs(1))
    assert masks.shape == (1, 32, 32) and len(est.traces_) == 1
    assert len(est.traces_[0].losses) == 5


def test_ililt_optimizer_round_trip(ks):
    X = designs(2)
    est = ILILTOptimizer(kernels=ks, T=2, epochs=1, patch_size=16, modes=4, channels=4)
    est.fit(X, X)
    soft = est.transform(X)
    assert soft.shape == X.shape and np.all((soft > 0) & (soft < 1))
    assert np.array_equal(est.predict(X), (soft > 0.5).astype(float))
    assert est.score(X) <= 0
    assert est.set_params(t_max=3).get_params()["t_max"] == 3
    est.transform(X)
    assert all(len(r) == 3 for r in est.residuals_)


def test_ililt_optimizer_shape_mismatch(ks):
    with pytest.raises(ValueError):
        ILILTOptimizer(kernels=ks).fit(designs(2), designs(1))
