import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from purcellkit.errors import EvanescentError
from purcellkit.io import reference_stack
from purcellkit.tmm import (
    LayerStack,
    field_factor_above_mirror,
    mirror_optical_thickness,
    quarter_wave_penetration,
    quarter_wave_stack,
    quarter_wave_transmission,
    reflectivity,
    stack_response,
    sweep,
    transmission,
)


def fresnel(n0, n1, angle):
    """Tangential-field Fresnel coefficients of a bare interface."""
    c0 = np.cos(angle)
    c1 = np.sqrt(1 - (n0 * np.sin(angle) / n1) ** 2)
    rs = (n0 * c0 - n1 * c1) / (n0 * c0 + n1 * c1)
    rp = (n0 / c0 - n1 / c1) / (n0 / c0 + n1 / c1)
    return rs, rp


@pytest.mark.parametrize("angle", [0.0, 0.3, 0.9, 1.3])
def test_bare_interface_matches_fresnel(angle):
    stack = LayerStack(1.0, (), 1.45)
    rs, rp = fresnel(1.0, 1.45, angle)
    assert reflectivity(stack, 700.0, angle, "s") == pytest.approx(rs, abs=1e-14)
    assert reflectivity(stack, 700.0, angle, "p") == pytest.approx(rp, abs=1e-14)


def test_single_film_matches_airy_formula():
    n0, n1, ns, t, wl = 1.0, 2.1, 1.45, 123.0, 640.0
    stack = LayerStack(n0, ((n1, t),), ns)
    r01 = (n0 - n1) / (n0 + n1)
    r12 = (n1 - ns) / (n1 + ns)
    ph = np.exp(2j * 2 * np.pi * n1 * t / wl)
    want = (r01 + r12 * ph) / (1 + r01 * r12 * ph)
    assert reflectivity(stack, wl) == pytest.approx(want, abs=1e-13)


@pytest.mark.parametrize("pairs", [3, 8, 15])
def test_quarter_wave_transmission_closed_form(pairs):
    stack = quarter_wave_stack(2.3, 1.46, pairs, 780.0)
    T = transmission(stack, 780.0)
    assert T == pytest.approx(quarter_wave_transmission(2.3, 1.46, pairs), rel=1e-10)


def test_normal_incidence_polarizations_agree():
    stack = reference_stack("fiber")
    resp = stack_response(stack, 737.0)
    assert resp.r_s == pytest.approx(resp.r_p, abs=1e-14)
    assert resp.T_s == pytest.approx(resp.T_p, rel=1e-12)


stacks = st.lists(st.tuples(st.floats(1.3, 2.6), st.floats(5.0, 300.0)), min_size=0, max_size=12).map(
    lambda layers: LayerStack(1.0, tuple(layers), 1.45)
)


@settings(max_examples=150, deadline=None)
@given(stack=stacks, wl=st.floats(400.0, 1000.0), angle=st.floats(0.0, 1.4), pol=st.sampled_from("sp"))
def test_lossless_stack_conserves_energy(stack, wl, angle, pol):
    r = reflectivity(stack, wl, angle, pol)
    T = transmission(stack, wl, angle, pol)
    assert abs(r) ** 2 + T == pytest.approx(1.0, abs=1e-10)


@settings(max_examples=60, deadline=None)
@given(stack=stacks, wl=st.floats(400.0, 1000.0))
def test_transmission_is_reciprocal(stack, wl):
    assert transmission(stack.reversed(), wl) == pytest.approx(transmission(stack, wl), rel=1e-9, abs=1e-15)


def test_reference_planar_transmissions():
    planar = reference_stack("planar")
    assert transmission(planar, 740.0) * 1e6 == pytest.approx(200.0, rel=0.05)
    assert transmission(planar, 780.0) * 1e6 == pytest.approx(60.0, rel=0.05)


def test_penetration_of_long_bragg_mirror():
    stack = quarter_wave_stack(2.3, 1.46, 30, 780.0)
    numeric = mirror_optical_thickness(stack, 780.0)
    assert numeric == pytest.approx(quarter_wave_penetration(2.3, 1.46, 780.0), rel=0.02)


def test_field_factor_ideal_mirror_and_bounds():
    z = np.linspace(0, 500, 201)
    f = field_factor_above_mirror(None, 600.0, z, r=-1.0)
    np.testing.assert_allclose(f, 4 * np.sin(2 * np.pi * z / 600.0) ** 2, atol=1e-12)
    g = field_factor_above_mirror(reference_stack("planar"), 754.0, z)
    assert np.all((g >= 0) & (g <= 4))


def test_evanescent_substrate_raises():
    stack = LayerStack(1.5, ((2.0, 100.0),), 1.0)
    with pytest.raises(EvanescentError):
        reflectivity(stack, 700.0, 1.2)


@pytest.mark.parametrize("bad", [dict(wavelength=-1.0), dict(angle=np.pi / 2)])
def test_invalid_arguments(bad):
    kw = dict(wavelength=700.0, angle=0.0) | bad
    with pytest.raises(ValueError):
        reflectivity(reference_stack("planar"), **kw)


def test_sweep_rows_and_empty_grid():
    assert sweep(reference_stack("planar"), []) == []
    rows = sweep(reference_stack("planar"), [740.0, 730.0], angles=(0.0, 0.2))
    assert len(rows) == 8
    assert [r[0] for r in rows] == sorted(r[0] for r in rows)
