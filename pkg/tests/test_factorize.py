import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rsfactor.admm import FactorParams
from rsfactor.factorize import (
    MAX_K,
    ParamVector,
    export_factors,
    factor_differences,
    factorize,
    init_factor_thresholds,
    nu_schedule,
)
from rsfactor.image import Image
from rsfactor.io import read_image
from rsfactor.synth import SynthConfig, synth_dataset


def random_params(rng, k=5, t=3, units="relative"):
    pv = ParamVector.initial(k, t, units=units)
    vec = pv.to_vector()
    noise = rng.uniform(0.5, 1.5, size=vec.size)
    return pv.with_vector(np.maximum(vec * noise + rng.uniform(0, 0.2, size=vec.size) * ~pv.positive_mask(), 0))


class TestThresholdInit:
    def test_blend_zero_is_analytic(self):
        learned = FactorParams.constant(7.0, 9.0, 1.3)
        p = init_factor_thresholds(2, 5, 0.5, learned, blend=0.0)
        assert p.alpha == pytest.approx((0.3,) * 3)
        assert p.beta == pytest.approx((0.2,) * 3)
        assert p.mu == learned.mu

    def test_last_factor_alpha_zero(self):
        p = init_factor_thresholds(5, 5, 0.4, FactorParams.constant(0.0, 0.1, 1.0), blend=0.0)
        assert p.alpha == (0.0, 0.0, 0.0)

    def test_worked_blend(self):
        p = init_factor_thresholds(1, 5, 0.1, FactorParams.constant(0.2, 0.0, 1.0), blend=0.9)
        assert p.alpha[0] == pytest.approx(0.188, abs=1e-12)

    @pytest.mark.parametrize("k", [0, 6])
    def test_index_out_of_range(self, k):
        with pytest.raises(ValueError):
            init_factor_thresholds(k, 5, 0.1, FactorParams.constant(0.1, 0.1, 1.0))


class TestParamVector:
    def test_default_size(self):
        pv = ParamVector.initial()
        assert (pv.k_factors, pv.t_iters, pv.size) == (5, 3, 45)

    def test_nu_schedule(self):
        nu = ParamVector.initial(4).nu
        assert np.all(np.diff(nu) > 0) and nu[-1] == 1.0
        assert np.allclose(nu_schedule(5), [0.2, 0.4, 0.6, 0.8, 1.0])

    def test_vector_round_trip(self):
        pv = random_params(np.random.default_rng(0))
        assert pv.with_vector(pv.to_vector()) == pv

    def test_dict_round_trip(self):
        pv = random_params(np.random.default_rng(1), k=3, t=2)
        assert ParamVector.from_dict(json.loads(json.dumps(pv.to_dict()))) == pv

    def test_k_bounds(self):
        with pytest.raises(ValueError):
            ParamVector.initial(MAX_K + 1)
        with pytest.raises(ValueError):
            ParamVector.initial(0)

    def test_positive_mask_marks_mu(self):
        pv = ParamVector.initial(2, 2)
        vec = pv.to_vector()
        assert np.all(vec[pv.positive_mask()] == 1.0)
        assert pv.positive_mask().sum() == 4


class TestFactorize:
    def test_single_factor_is_image(self):
        img = Image(np.random.default_rng(2).random((12, 9, 3)))
        st_ = factorize(img, ParamVector.initial(1))
        assert np.array_equal(st_.e[0], img.data.astype(np.float64))
        assert np.array_equal(st_.f[0], st_.e[0])

    @given(st.integers(0, 10_000), st.integers(1, 6), st.integers(1, 4), st.sampled_from([1, 3]),
           st.sampled_from(["relative", "absolute"]))
    def test_additivity(self, seed, k, t, c, units):
        rng = np.random.default_rng(seed)
        h, w = rng.integers(4, 24, size=2)
        img = Image(rng.random((h, w, c)))
        stack = factorize(img, random_params(rng, k, t, units))
        assert np.max(np.abs(stack.e.sum(axis=0) - img.data)) <= 1e-5
        assert stack.e.shape == (k, h, w, c) and stack.f.shape == (k, h, w, c)
        assert np.allclose(stack.f.sum(axis=0), stack.e[-1], atol=1e-12)

    def test_deterministic(self):
        img = Image(np.random.default_rng(3).random((16, 16, 3)))
        pv = random_params(np.random.default_rng(4))
        a, b = factorize(img, pv), factorize(img, pv)
        assert np.array_equal(a.e, b.e) and np.array_equal(a.f, b.f)

    def test_without_absorption(self):
        img = Image(np.random.default_rng(5).random((10, 10)))
        st_ = factorize(img, ParamVector.initial(3), absorb_residual=False)
        assert not st_.residual_absorbed
        assert np.allclose(st_.e.sum(axis=0) + st_.residual, img.data, atol=1e-12)

    def test_raw_factors_exclude_residual(self):
        img = Image(np.random.default_rng(6).random((10, 10, 3)))
        st_ = factorize(img, ParamVector.initial(3))
        assert np.allclose(st_.e_raw()[-1] + st_.residual, st_.e[-1], atol=1e-12)

    def test_zero_image(self):
        st_ = factorize(Image(np.zeros((8, 8, 3))), ParamVector.initial())
        assert not np.any(st_.e)

    def test_analytic_init_orders_ratios(self):
        low, _ = synth_dataset(1, 5, SynthConfig(height=48, width=48))[0]
        ratios = factorize(low, ParamVector.initial()).energy_ratios().mean(axis=1)
        assert ratios[0] < ratios[1] < ratios[2]

    def test_analytic_support_grows_until_input_is_spent(self):
        # with the raw analytic schedule a middle factor can absorb nearly all
        # of its input; the support only has to grow up to that point
        for low, _ in synth_dataset(3, 21, SynthConfig(height=48, width=48)):
            st_ = factorize(low, ParamVector.initial(blend=0.0))
            scale = np.abs(st_.inputs[0]).mean()
            live = [k for k in range(5) if np.abs(st_.inputs[k]).mean() > 0.05 * scale]
            counts = [(np.abs(st_.e_raw()[k]) > 1e-6).sum() for k in live]
            assert all(a <= b for a, b in zip(counts, counts[1:])), counts


@pytest.fixture(scope="module")
def trained_gray():
    """Gray dark scene and scalars trained on it until L_f < 0.05."""
    from rsfactor.losses import loss_factorization
    from rsfactor.train import TrainConfig, train

    low, _ = synth_dataset(1, 11, SynthConfig(height=32, width=32))[0]
    img = Image(low.data.mean(axis=2))
    pv = None
    for lr in (0.01, 0.003, 0.001, 0.0003):
        cfg = TrainConfig(epochs=20, freeze_epoch=20, phase1_objective="factorization",
                          batch_size=1, learning_rate=lr)
        pv = train([img], cfg, params=pv).params
        if loss_factorization(factorize(img, pv)) < 0.05:
            break
    return img, pv


class TestTrainedFactorization:
    def test_ratios_increase_with_k(self, trained_gray):
        from rsfactor.losses import loss_factorization

        img, pv = trained_gray
        stack = factorize(img, pv)
        assert loss_factorization(stack) < 0.05
        ratios = stack.energy_ratios()[:, 0]
        assert np.all(np.diff(ratios) > 0)
        assert np.allclose(ratios, pv.nu, atol=0.05)

    def test_support_grows_with_k(self, trained_gray):
        img, pv = trained_gray
        stack = factorize(img, pv)
        counts = [(np.abs(stack.e_raw()[k]) > 1e-6).sum() for k in range(5)]
        assert all(a <= b for a, b in zip(counts, counts[1:])), counts


class TestDifferences:
    def test_single(self):
        e = np.random.default_rng(7).random((1, 3, 3, 1))
        assert np.array_equal(factor_differences(e), e)

    def test_equal_neighbours(self):
        e1 = np.random.default_rng(8).random((3, 3))
        f = factor_differences([e1, e1])
        assert not np.any(f[1])

    def test_telescoping(self):
        e = np.random.default_rng(9).standard_normal((6, 4, 5, 3))
        assert np.allclose(factor_differences(e).sum(axis=0), e[-1], atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            factor_differences([np.zeros((2, 2)), np.zeros((3, 2))])


def test_export_factors(tmp_path):
    img = Image(np.random.default_rng(10).random((10, 12, 3)))
    stack = factorize(img, ParamVector.initial(3))
    written = export_factors(stack, tmp_path, "pic", include_differences=True, include_residual=True)
    names = sorted(p.name for p in written)
    assert names == sorted(["pic_E1.png", "pic_E2.png", "pic_E3.png", "pic_F1.png", "pic_F2.png",
                            "pic_F3.png", "pic_R.png", "pic_meta.json"])
    meta = json.loads((tmp_path / "pic_meta.json").read_text())
    layer = meta["layers"][0]
    png = read_image(tmp_path / "pic_E1.png").data.astype(np.float64)
    restored = layer["min"] + png * (layer["max"] - layer["min"])
    assert np.max(np.abs(restored - stack.e[0])) <= (layer["max"] - layer["min"]) / 255
    assert meta["layers"][2]["nu"] == 1.0
