"""Published figures that the acceptance suite does not already cover."""

import numpy as np
import pytest

from purcellkit import cavity as cv
from purcellkit.design import design_row, load_emitters, load_setup
from purcellkit.fit import LifetimeProtocol, fit_lifetime, fit_saturation
from purcellkit.io import reference_stack
from purcellkit.photophysics import qe_from_lifetime_change
from purcellkit.synthetic import lifetime_histogram, saturation_series
from purcellkit.tmm import field_factor_above_mirror, transmission


@pytest.fixture(scope="module")
def setup():
    return load_setup()


def test_fiber_mirror_transmission_at_design_wavelength():
    assert transmission(reference_stack("fiber"), 740.0) * 1e6 == pytest.approx(1500.0, rel=0.02)


def test_planar_field_maximum_sits_30nm_above_surface():
    z = np.linspace(0.0, 200.0, 4001)
    f = field_factor_above_mirror(reference_stack("planar"), 780.0, z)
    assert z[np.argmax(f)] == pytest.approx(30.0, abs=5.0)


def test_shortest_cavity_length_budget(setup):
    cfg = setup.config
    assert cfg.d_eff == pytest.approx(5 * 740.0 / 2)
    assert cfg.d_eff - cfg.d_geo == pytest.approx(1160.0, rel=0.02)


def test_finesse_at_design_wavelength(setup):
    assert 3400 <= cv.finesse(setup.losses_at(740.0)) <= 4100


def test_linewidth_from_quality_factor():
    kappa_GHz, _ = cv.linewidth(1.9e4, 752.4)
    assert kappa_GHz == pytest.approx(21.0, rel=0.02)


def test_outcoupling_of_bare_design():
    assert cv.outcoupling(cv.LossBudget(1500.0, 60.0, 40.0)) == pytest.approx(0.94, abs=0.05)


@pytest.mark.parametrize("ratio, C, qe, tol", [(1.28, 4.6, 0.065, 0.02), (1.45, 1.8, 0.25, 0.03)])
def test_quantum_efficiency_from_lifetime_change(ratio, C, qe, tol):
    assert qe_from_lifetime_change(ratio, 1.0, C).qe == pytest.approx(qe, abs=tol)


def test_fraction_coupled_out_for_nd5(setup):
    nd5 = next(em for em in load_emitters() if em.id == "ND5")
    assert design_row(setup, nd5)["beta_tot_per_qe"] == pytest.approx(0.16, abs=0.02)


def test_nd3_like_lifetime_and_protocol_spread():
    edges, counts, _ = lifetime_histogram(1.03, 0.157, 1e6, seed=3)
    fit = fit_lifetime(edges, counts, LifetimeProtocol(irf_sigma=0.157))
    assert fit.tau == pytest.approx(1.03, abs=0.01)
    assert fit.spread <= 0.01


@pytest.mark.parametrize("seed", range(5))
def test_nd4_like_saturation_within_quoted_errors(seed):
    P, I, err = saturation_series(1.78, 1.0, 0.040, seed)
    fit = fit_saturation(P, I, err)
    assert abs(fit.I_inf - 1.78) < 2 * 0.13
    assert fit.errors["I_inf"] < 0.13


@pytest.mark.parametrize("seed", range(5))
def test_nd4_like_background_slope(seed):
    # 62e3 counts/(s mW) in free space
    P, I, err = saturation_series(1.07, 1.0, 0.062, seed)
    fit = fit_saturation(P, I, err)
    assert abs(fit.a_bg - 0.062) < 2 * fit.errors["a_bg"]
