import numpy as np
import pytest

from rkhsmiss.simulate import (
    SimDesign,
    bootstrap_replicate_bruteforce,
    generate,
    hsic_bruteforce,
    loo_bruteforce,
)


def test_noiseless_linear_fully_observed():
    ds, truth = generate(SimDesign(n=50, p_num=2, signal="linear", noise_sd=0.0,
                                   mechanism={"kind": "mcar", "p": 1.0}, seed=0))
    assert ds.mask.all()
    np.testing.assert_allclose(ds.response, 3.0 * ds.numeric[:, 0], atol=1e-12)
    np.testing.assert_allclose(truth["m"], ds.response, atol=1e-12)
    assert truth["active"] == (0,)


def test_mcar_observed_fraction():
    ds, _ = generate(SimDesign(n=10000, p_num=1, signal="null",
                               mechanism={"kind": "mcar", "p": 0.6}, seed=1))
    assert abs(ds.mask.mean() - 0.6) < 0.02


def test_mnar_probability_decreases_with_age_proxy():
    ds, truth = generate(SimDesign(n=2000, p_num=2, signal="linear",
                                   mechanism={"kind": "mnar_age_like", "beta0": 0.5, "beta": 1.0},
                                   seed=2))
    corr = np.corrcoef(truth["pi"], ds.numeric[:, 0])[0, 1]
    assert corr < 0.0


def test_mar_logistic_uses_given_coefficients():
    ds, truth = generate(SimDesign(n=3000, p_num=2, signal="null",
                                   mechanism={"kind": "mar_logistic", "beta0": 0.0, "beta": [2.0]},
                                   seed=3))
    corr = np.corrcoef(truth["pi"], ds.numeric[:, 0])[0, 1]
    assert corr > 0.5


def test_generator_deterministic():
    design = SimDesign(n=100, p_num=2, p_cat=1, signal="interaction", noise_sd=0.5,
                       mechanism={"kind": "mcar", "p": 0.8}, seed=42)
    ds1, t1 = generate(design)
    ds2, t2 = generate(design)
    np.testing.assert_array_equal(ds1.numeric, ds2.numeric)
    np.testing.assert_array_equal(ds1.mask, ds2.mask)
    np.testing.assert_array_equal(t1["m"], t2["m"])
    ds3, _ = generate(SimDesign(n=100, p_num=2, p_cat=1, signal="interaction", noise_sd=0.5,
                                mechanism={"kind": "mcar", "p": 0.8}, seed=43))
    assert not np.array_equal(ds1.numeric, ds3.numeric)


def test_quantile_signal_design():
    ds, truth = generate(SimDesign(n=40, p_num=1, signal="quantile_signal", noise_sd=0.0,
                                   mechanism={"kind": "mcar", "p": 1.0}, seed=4))
    assert ds.has_distributional
    means = np.array([q.mean() for q in ds.distributional])
    np.testing.assert_allclose(ds.response, 2.0 * means, atol=1e-12)
    assert truth["active"] == ("distributional",)


def test_design_validation():
    with pytest.raises(ValueError, match="unknown signal"):
        SimDesign(n=10, signal="cubic")
    with pytest.raises(ValueError, match="unknown mechanism"):
        SimDesign(n=10, mechanism={"kind": "whenever"})
    with pytest.raises(ValueError, match="probability"):
        SimDesign(n=10, mechanism={"kind": "mcar", "p": 0.0})
    with pytest.raises(ValueError, match="distributional"):
        SimDesign(n=10, signal="quantile_signal", with_distributional=False)


def test_hsic_bruteforce_hand_algebra_n2():
    kx = np.array([[1.0, 0.5], [0.5, 1.0]])
    ky = np.array([[1.0, 0.2], [0.2, 1.0]])
    w = np.array([0.5, 0.5])
    t1 = 0.25 * (1 + 0.1 + 0.1 + 1)
    t2 = 0.25 * (1 + 0.5 + 0.5 + 1) * 0.25 * (1 + 0.2 + 0.2 + 1)
    t3 = sum(
        w[i] * w[j] * w[k] * kx[i, j] * ky[i, k]
        for i in range(2) for j in range(2) for k in range(2)
    )
    expected = t1 + t2 - 2 * t3
    assert hsic_bruteforce(kx, ky, w) == pytest.approx(expected, abs=1e-15)


def test_hsic_bruteforce_constant_ky():
    rng = np.random.default_rng(5)
    kx = np.exp(-rng.uniform(0, 2, (6, 6)))
    kx = 0.5 * (kx + kx.T)
    w = np.full(6, 1 / 6)
    assert hsic_bruteforce(kx, np.ones((6, 6)), w) == pytest.approx(0.0, abs=1e-12)


def test_bruteforce_size_guards():
    big = np.eye(40)
    w = np.full(40, 1 / 40)
    with pytest.raises(ValueError, match="n <= 30"):
        hsic_bruteforce(big, big, w)
    with pytest.raises(ValueError, match="n <= 30"):
        bootstrap_replicate_bruteforce(big, big, w, w, np.arange(40))


def test_loo_bruteforce_symmetric_two_points():
    from rkhsmiss.kernels import KernelSpec
    from conftest import numeric_dataset

    ds = numeric_dataset(np.array([[1.0], [-1.0]]), y=[1.0, -1.0])
    obs, resid = loo_bruteforce(ds, KernelSpec(b=1.0, sigma_mult=1.0), None, 0.5, "complete_case")
    assert resid[0] == pytest.approx(-resid[1], abs=1e-12)


def test_loo_bruteforce_large_lambda_null_model():
    from rkhsmiss.kernels import KernelSpec
    from conftest import numeric_dataset

    rng = np.random.default_rng(6)
    ds = numeric_dataset(rng.standard_normal((8, 1)), y=rng.standard_normal(8))
    obs, resid = loo_bruteforce(ds, KernelSpec(b=1.0, sigma_mult=1.0), None, 1e9, "complete_case")
    np.testing.assert_allclose(resid, ds.response[obs], atol=1e-6)
