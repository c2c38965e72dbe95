import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, optimize

from purcellkit.errors import ConvergenceError
from purcellkit.fit import (
    G2Dataset,
    IdentifiabilityError,
    LifetimeProtocol,
    curve_fit,
    emg_cdf,
    emg_pdf,
    fit_constant_deshelving,
    fit_g2_global,
    fit_g2_single,
    fit_lifetime,
    fit_lorentzian,
    fit_saturation,
    g2_model,
    lifetime_model,
    lm_minimize,
    lorentzian,
)
from purcellkit.photophysics import RateModel, g2_params, saturation_power
from purcellkit.synthetic import lifetime_histogram, saturation_series, spectrum

# --------------------------------------------------------------------------
# engine


def test_linear_regression_matches_normal_equations():
    rng = np.random.default_rng(0)
    x = np.linspace(0, 10, 50)
    X = np.vander(x, 3)
    sigma = 0.1 + 0.05 * x
    y = X @ [0.3, -1.2, 4.0] + rng.normal(0, sigma)
    res = curve_fit(lambda t, a, b, c: a * t**2 + b * t + c, x, y, [0, 0, 0], sigma=sigma)
    W = np.diag(1 / sigma**2)
    cov = np.linalg.inv(X.T @ W @ X)
    beta = cov @ X.T @ W @ y
    np.testing.assert_allclose(res.x, beta, rtol=1e-10, atol=1e-10)
    np.testing.assert_allclose(res.covariance, cov, rtol=1e-7)
    assert res.dof == 47


def test_rosenbrock_minimum():
    res = lm_minimize(lambda p: np.array([10 * (p[1] - p[0] ** 2), 1 - p[0]]), [-1.2, 1.0])
    np.testing.assert_allclose(res.x, [1.0, 1.0], atol=1e-10)


@settings(max_examples=50, deadline=None)
@given(A=st.floats(0.5, 50.0), tau=st.floats(0.3, 8.0), c=st.floats(-1.0, 1.0))
def test_noiseless_exponential_recovery(A, tau, c):
    t = np.linspace(0, 20, 120)
    y = A * np.exp(-t / tau) + c
    # baseline and amplitude read off the data; the lifetime guess is fixed
    p0 = [y[0] - y[-1], 1.0, y[-1]]
    res = curve_fit(lambda t, A, tau, c: A * np.exp(-t / tau) + c, t, y, p0,
                    bounds=([0, 1e-3, -np.inf], [np.inf, np.inf, np.inf]))
    np.testing.assert_allclose(res.x, [A, tau, c], rtol=1e-8, atol=1e-8)


def test_agrees_with_scipy_least_squares():
    rng = np.random.default_rng(3)
    t = np.linspace(0, 5, 80)
    y = 3.0 * np.exp(-t / 1.3) * np.cos(2.1 * t) + rng.normal(0, 0.05, t.size)

    def resid(p):
        return (p[0] * np.exp(-t / p[1]) * np.cos(p[2] * t) - y) / 0.05

    ours = lm_minimize(resid, [2.0, 1.0, 2.0])
    ref = optimize.least_squares(resid, [2.0, 1.0, 2.0], method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-15)
    J = ref.jac
    np.testing.assert_allclose(ours.x, ref.x, rtol=1e-8)
    np.testing.assert_allclose(ours.errors, np.sqrt(np.diag(np.linalg.inv(J.T @ J))), rtol=1e-5)


def test_unweighted_covariance_matches_scipy_curve_fit():
    rng = np.random.default_rng(4)
    x = np.linspace(0, 4, 60)
    y = 2.0 * np.exp(-x / 0.9) + rng.normal(0, 0.02, x.size)
    f = lambda x, a, b: a * np.exp(-x / b)  # noqa: E731
    ours = curve_fit(f, x, y, [1.0, 1.0])
    popt, pcov = optimize.curve_fit(f, x, y, [1.0, 1.0])
    np.testing.assert_allclose(ours.x, popt, rtol=1e-7)
    np.testing.assert_allclose(ours.covariance, pcov, rtol=1e-4)


def test_bounds_respected_and_pinned_parameter_reported():
    x = np.linspace(0, 1, 20)
    y = 1.0 - 2.0 * x
    res = curve_fit(lambda x, a, b: a + b * x, x, y, [0.5, 0.5], bounds=([0, 0], [np.inf, np.inf]))
    assert res["b"] if "b" in res.names else True
    assert res.x[1] == 0.0
    assert res.errors[1] == 0.0


def test_identifiability_and_convergence_errors():
    x = np.linspace(0, 1, 20)
    with pytest.raises(IdentifiabilityError):
        curve_fit(lambda x, a, b: a * b * x, x, 2 * x, [1.0, 1.0])
    with pytest.raises(ConvergenceError):
        lm_minimize(lambda p: np.array([10 * (p[1] - p[0] ** 2), 1 - p[0]]), [-1.2, 1.0], max_iter=2)
    with pytest.raises(ValueError):
        lm_minimize(lambda p: p, [2.0], bounds=([0.0], [1.0]))


# --------------------------------------------------------------------------
# lifetimes


@settings(max_examples=60, deadline=None)
@given(tau=st.floats(0.1, 5.0), x=st.floats(-1.0, 10.0))
def test_emg_small_sigma_limit(tau, x):
    assert emg_cdf(x, 0.0, 1e-7, tau) == pytest.approx(float(emg_cdf(x, 0.0, 0.0, tau)), abs=1e-6)


@pytest.mark.parametrize("sigma,tau", [(0.157, 0.5), (0.157, 3.0), (0.5, 0.05), (0.02, 10.0)])
def test_emg_normalized_and_cdf_consistent(sigma, tau):
    total, _ = integrate.quad(lambda t: float(emg_pdf(t, 0.0, sigma, tau)), -10 * sigma, 60 * tau, limit=400,
                              points=[0.0, 5 * sigma])
    assert total == pytest.approx(1.0, abs=1e-8)
    part, _ = integrate.quad(lambda t: float(emg_pdf(t, 0.0, sigma, tau)), -10 * sigma, 0.7, limit=200)
    assert float(emg_cdf(0.7, 0.0, sigma, tau)) == pytest.approx(part, abs=1e-9)


def test_emg_extreme_arguments_finite():
    t = np.array([-50.0, 0.0, 200.0])
    assert np.all(np.isfinite(emg_pdf(t, 0.0, 0.01, 0.02)))


@pytest.mark.parametrize("weighting", ["neyman", "deviance"])
def test_lifetime_noiseless_histogram(weighting):
    edges = -2.0 + 0.05 * np.arange(401)
    counts = lifetime_model(edges, 0.1, 0.157, [1e6], [1.03], 2.0)
    fit = fit_lifetime(edges, counts, LifetimeProtocol(weighting=weighting))
    assert set(fit.per_window) == {"full_trace", "decay_from_peak", "pure_exponential_tail"}
    for tau in fit.per_window.values():
        assert tau == pytest.approx(1.03, rel=1e-5)


def test_lifetime_two_components_keep_slow_one():
    edges = -2.0 + 0.05 * np.arange(401)
    counts = lifetime_model(edges, 0.0, 0.157, [8e5, 3e5], [1.5, 0.2], 1.0)
    fit = fit_lifetime(edges, counts, LifetimeProtocol(components=2, windows=("full_trace",)))
    assert fit.tau == pytest.approx(1.5, rel=1e-4)


def test_lifetime_deviance_less_biased_at_low_counts():
    edges, hist, _ = lifetime_histogram(1.03, 0.157, 1e5, seed=21)
    ney = fit_lifetime(edges, hist, LifetimeProtocol(windows=("full_trace",)))
    dev = fit_lifetime(edges, hist, LifetimeProtocol(windows=("full_trace",), weighting="deviance"))
    assert abs(dev.tau - 1.03) < abs(ney.tau - 1.03)


def test_lifetime_rejects_flat_histogram():
    with pytest.raises(ValueError):
        fit_lifetime(np.arange(101.0), np.full(100, 5.0))


# --------------------------------------------------------------------------
# spectra


def test_lorentzian_recovers_nd5_linewidth():
    wl, counts = spectrum(752.4, 1.1, seed=31)
    fit = fit_lorentzian(wl, counts)
    assert fit.center == pytest.approx(752.4, abs=0.01)
    assert fit.Q_em == pytest.approx(684.0, rel=0.02)
    assert fit.secondary is None


def test_lorentzian_flags_second_peak():
    wl = np.arange(740.0, 765.0, 0.05)
    rng = np.random.default_rng(32)
    y = lorentzian(wl, 2000, 752.4, 1.1, 50) + lorentzian(wl, 400, 757.0, 0.8, 0)
    fit = fit_lorentzian(wl, rng.poisson(y).astype(float))
    assert fit.secondary == pytest.approx(757.0, abs=0.2)


def test_lorentzian_errors():
    wl = np.arange(740.0, 760.0, 0.05)
    with pytest.raises(ValueError):
        fit_lorentzian(wl, np.full(wl.size, 100.0))
    coarse = np.arange(740.0, 760.0, 1.0)
    with pytest.raises(ValueError):
        fit_lorentzian(coarse, lorentzian(coarse, 1000, 750.0, 0.05, 10))


# --------------------------------------------------------------------------
# saturation


def test_saturation_one_sigma_coverage():
    truth = (1.07, 0.6, 0.05)
    inside = []
    for seed in range(200):
        P, I, err = saturation_series(*truth, seed=seed)
        fit = fit_saturation(P, I, err)
        inside.append(abs(fit.P_sat - truth[1]) < fit.errors["P_sat"])
    assert 0.60 <= np.mean(inside) <= 0.76


def test_saturation_linear_data_is_degenerate():
    P = np.geomspace(0.1, 2.0, 8)
    fit = fit_saturation(P, 0.3 * P, 0.01 * np.ones(P.size))
    assert fit.degenerate
    assert fit.a_bg == pytest.approx(0.3, rel=1e-6)
    assert math.isnan(fit.P_sat)


def test_saturation_input_checks():
    with pytest.raises(ValueError):
        fit_saturation([1, 2, 3], [1, 2, 3])
    with pytest.raises(ValueError):
        fit_saturation(np.linspace(1, 2, 6), np.linspace(1, 2, 6))


# --------------------------------------------------------------------------
# g2


def test_g2_model_limits():
    tau = np.linspace(-50, 50, 101)
    ideal = g2_model(tau, 0.6, 80.0, 1.5)
    assert ideal[50] == pytest.approx(0.0, abs=1e-12)
    np.testing.assert_allclose(g2_model(tau, 0.6, 80.0, 1.5, rho=0.8), 1 - 0.64 * (1 - ideal))
    blurred = g2_model(tau, 0.6, 80.0, 1.5, irf_sigma=1e-6)
    np.testing.assert_allclose(blurred, ideal, atol=1e-5)
    # the blurred bin average tends to the unblurred one for a tiny IRF
    sharp = g2_model(tau, 0.6, 80.0, 1.5, bin_width=0.5)
    np.testing.assert_allclose(g2_model(tau, 0.6, 80.0, 1.5, irf_sigma=1e-6, bin_width=0.5), sharp, atol=1e-6)


@pytest.mark.parametrize("irf", [1e-3, 0.157, 2.0])
@pytest.mark.parametrize("center", [0.0, 0.3, 7.1, -40.0])
def test_g2_bin_average_with_irf_matches_quadrature(irf, center):
    bw = 0.5
    want, _ = integrate.quad(lambda u: float(g2_model(u, 0.6, 80.0, 1.5, 0.9, irf)), center - bw / 2,
                             center + bw / 2, points=[0.0] if abs(center) < bw else None, epsabs=1e-13, limit=200)
    assert float(g2_model(center, 0.6, 80.0, 1.5, 0.9, irf, bw)) == pytest.approx(want / bw, abs=1e-11)


@pytest.mark.parametrize("irf", [0.0, 0.157])
def test_g2_single_noiseless_round_trip(irf):
    tau = np.arange(-300, 300, 0.25) + 0.125
    g = g2_model(tau, 0.55, 90.0, 1.4, 0.9, irf, 0.25)
    res = fit_g2_single(tau, g, np.full(tau.size, 0.01), irf_sigma=irf, bin_width=0.25)
    np.testing.assert_allclose(res.x, [0.55, 90.0, 1.4, 0.9], rtol=1e-6)


def test_g2_single_flat_trace():
    tau = np.linspace(-100, 100, 400)
    with pytest.raises(IdentifiabilityError):
        fit_g2_single(tau, np.ones(tau.size) + 0.001 * np.sin(tau))


def _noiseless_datasets(models, fractions=(0.1, 0.3, 1.0, 3.0, 10.0)):
    out = []
    for env, m in models.items():
        ps = saturation_power(m)
        for f in fractions:
            gp = g2_params(m, f * ps)
            bw = max(gp.tau1 / 2, 0.02)
            tau = np.arange(-min(800, 10 * gp.tau2), min(800, 10 * gp.tau2), bw) + bw / 2
            g = g2_model(tau, gp.tau1, gp.tau2, gp.a, bin_width=bw)
            out.append(G2Dataset(f * ps, env, tau, g, np.full(tau.size, 0.01), bin_width=bw, rho=1.0))
    return out


def test_global_fit_noiseless_recovers_truth(nd1_free_space, nd1_cavity):
    models = {"free_space": nd1_free_space, "cavity": nd1_cavity}
    tau1_0 = {k: m.tau1_0 for k, m in models.items()}
    fit = fit_g2_global(_noiseless_datasets(models), tau1_0)
    for name, want in (("d", 10.0), ("d_c", 10.0), ("sigma", 1000.0), ("sigma_c", 1000.0),
                       ("tau2_0", 150.0), ("k23_0", 24.1)):
        assert fit.params[name] == pytest.approx(want, rel=1e-4), name
    assert fit.derived["free_space"]["Gamma"] == pytest.approx(578.0, rel=0.01)
    # the fixed-deshelving alternative cannot describe the power dependence
    alt = fit_constant_deshelving(fit.points, tau1_0)
    assert alt.chi2 > 100 * max(fit.result.chi2, 1e-6)


def test_global_fit_symmetric_environments(nd1_free_space):
    models = {"free_space": nd1_free_space, "cavity": nd1_free_space}
    tau1_0 = {k: m.tau1_0 for k, m in models.items()}
    fit = fit_g2_global(_noiseless_datasets(models, (0.1, 1.0, 10.0)), tau1_0)
    for a, b in (("d", "d_c"), ("sigma", "sigma_c"), ("a_inf", "a_inf_c")):
        assert fit.params[a] == pytest.approx(fit.params[b], rel=1e-6)


def test_global_fit_needs_two_powers(nd1_free_space):
    models = {"free_space": nd1_free_space, "cavity": nd1_free_space}
    data = _noiseless_datasets(models, (1.0,))
    with pytest.raises(IdentifiabilityError):
        fit_g2_global(data, {k: nd1_free_space.tau1_0 for k in models})
