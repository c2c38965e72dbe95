import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from purcellkit.dipole import (
    DipoleGeometry,
    collection_efficiency,
    collection_efficiency_isotropic,
    dipole_pattern,
    free_space_cone_fraction,
    orientation_factor,
    position_factor_curve,
    purcell_position_factor,
)
from purcellkit.io import reference_stack
from purcellkit.tmm import field_factor_above_mirror, reflectivity

PLANAR = reference_stack("planar")


@pytest.mark.parametrize("theta", [0.0, 0.4, math.pi / 2])
def test_pattern_normalized_over_sphere(theta):
    total = 0.0
    for pol in "sp":
        val, _ = integrate.dblquad(lambda phi, a: float(dipole_pattern(a, theta, phi, pol)) * math.sin(a),
                                   0, math.pi, 0, 2 * math.pi, epsabs=1e-11)
        total += val
    assert total == pytest.approx(1.0, abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(theta=st.floats(0.0, math.pi / 2), na=st.floats(0.05, 0.95))
def test_no_mirror_matches_cone_fraction(theta, na):
    geom = DipoleGeometry(theta, 50.0, na, 754.0)
    got = collection_efficiency(geom, None, r=0.0)
    assert got == pytest.approx(free_space_cone_fraction(theta, na), abs=1e-8)


def test_full_hemisphere_collects_half():
    assert free_space_cone_fraction(0.3, 1.0 - 1e-15) == pytest.approx(0.5, abs=1e-7)


@pytest.mark.parametrize("theta", [0.0, math.pi / 2])
@pytest.mark.parametrize("interference", ["literal", "image"])
def test_quad_matches_dblquad(theta, interference):
    geom = DipoleGeometry(theta, 50.0, 0.55, 754.0)
    a = collection_efficiency(geom, PLANAR, interference=interference)
    b = collection_efficiency(geom, PLANAR, interference=interference, method="dblquad")
    assert a == pytest.approx(b, abs=1e-4)


def test_interference_conventions_agree_for_parallel_dipole():
    geom = DipoleGeometry(math.pi / 2, 50.0, 0.55, 754.0)
    assert collection_efficiency(geom, PLANAR) == pytest.approx(
        collection_efficiency(geom, PLANAR, interference="image"), abs=1e-12)


def test_isotropic_average():
    geom = DipoleGeometry(0.7, 50.0, 0.55, 754.0)
    par = collection_efficiency(DipoleGeometry(math.pi / 2, 50.0, 0.55, 754.0), PLANAR)
    ax = collection_efficiency(DipoleGeometry(0.0, 50.0, 0.55, 754.0), PLANAR)
    assert collection_efficiency_isotropic(geom, PLANAR) == pytest.approx(2 * par / 3 + ax / 3)
    # linear in sin(theta)**2
    mid = collection_efficiency(geom, PLANAR)
    s2 = math.sin(0.7) ** 2
    assert mid == pytest.approx(s2 * par + (1 - s2) * ax, abs=1e-9)


def test_geometry_validation():
    with pytest.raises(ValueError):
        DipoleGeometry(theta=2.0)
    with pytest.raises(ValueError):
        DipoleGeometry(na=1.0)
    with pytest.raises(ValueError):
        collection_efficiency(DipoleGeometry(), None)


@pytest.mark.parametrize("wl", [737.0, 754.0, 780.0])
def test_position_factor_matches_grid_search(wl):
    nominal, lo, hi = purcell_position_factor(PLANAR, wl, 100.0)
    z = np.linspace(0.0, 100.0, 20001)
    r = complex(reflectivity(PLANAR, wl))
    f = field_factor_above_mirror(PLANAR, wl, z) / (1 + abs(r)) ** 2
    assert lo == pytest.approx(f.min(), abs=1e-7)
    assert hi == pytest.approx(f.max(), abs=1e-7)
    assert nominal == pytest.approx(field_factor_above_mirror(PLANAR, wl, 50.0) / (1 + abs(r)) ** 2)


def test_position_factor_curve_and_validation():
    rows = position_factor_curve(PLANAR, [740.0, 760.0])
    assert len(rows) == 2 and all(r[2] <= r[1] <= r[3] for r in rows)
    with pytest.raises(ValueError):
        purcell_position_factor(PLANAR, 754.0, crystal_size=0.0)
    with pytest.raises(ValueError):
        purcell_position_factor(PLANAR, 754.0, emitter_offset=150.0)


def test_orientation_factor():
    np.testing.assert_allclose(orientation_factor(np.array([0.0, math.pi / 2])), [0.0, 1.0], atol=1e-15)
    with pytest.raises(ValueError):
        orientation_factor(2.0)
