"""Dipole emission above a planar mirror and Purcell correction factors.

The dipole sits a height ``z0`` above the top surface of a :class:`LayerStack`
and radiates into the ambient half space.  Emission at polar angle ``alpha``
(from the surface normal) interferes with its mirror reflection, which adds
the phase ``2 k z0 cos(alpha)`` plus the phase of ``r``.

``interference="literal"`` weights both terms of the p-polarized pattern with
``|1 + r_p e^{i delta}|**2``.  ``"image"`` instead gives the term driven by the
dipole's normal component the opposite sign, ``|1 - r_p e^{i delta}|**2``, as
image-dipole theory requires when ``r`` is a ratio of tangential fields.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate

from .errors import ConvergenceError
from .tmm import LayerStack, reflectivity

__all__ = [
    "DipoleGeometry",
    "dipole_pattern",
    "emitted_power_near_mirror",
    "collection_efficiency",
    "collection_efficiency_isotropic",
    "free_space_cone_fraction",
    "purcell_position_factor",
    "position_factor_curve",
    "orientation_factor",
]

NORM = 3.0 / (8.0 * np.pi)
INTERFERENCE = ("literal", "image")


@dataclass(frozen=True)
class DipoleGeometry:
    theta: float = math.pi / 2  # dipole angle to the optical axis
    z0: float = 50.0  # nm above the mirror surface
    na: float = 0.55
    wavelength: float = 754.0  # nm

    def __post_init__(self):
        if not 0 <= self.theta <= math.pi / 2 + 1e-12:
            raise ValueError("theta must lie in [0, pi/2]")
        if not 0 < self.na < 1:
            raise ValueError("NA must lie in (0, 1)")
        if self.z0 < 0:
            raise ValueError("z0 must be >= 0")
        if self.wavelength <= 0:
            raise ValueError("wavelength must be positive")

    @property
    def alpha_max(self) -> float:
        return math.asin(self.na)


def dipole_pattern(alpha, theta, phi, pol):
    """Free-space power per solid angle of a unit dipole, split by polarization.

    Integrates to one over the full sphere when both polarizations are summed.
    """
    alpha, phi = np.asarray(alpha, dtype=float), np.asarray(phi, dtype=float)
    if pol == "s":
        return NORM * np.sin(theta) ** 2 * np.sin(phi) ** 2 + 0 * alpha
    if pol == "p":
        return NORM * (np.cos(theta) * np.sin(alpha) + np.sin(theta) * np.cos(alpha) * np.cos(phi)) ** 2
    raise ValueError(f"polarization must be 's' or 'p', got {pol!r}")


def _coefficients(stack, wavelength, alpha, z0, r_override=None):
    """``(r_s, r_p, exp(2 i k z0 cos alpha))`` at angles ``alpha``."""
    alpha = np.asarray(alpha, dtype=float)
    if r_override is not None:
        rs = rp = np.asarray(r_override, dtype=complex)
        n0 = 1.0
    else:
        rs = reflectivity(stack, wavelength, alpha, "s")
        rp = reflectivity(stack, wavelength, alpha, "p")
        n0 = stack.ambient_index
    ph = np.exp(2j * (2.0 * np.pi * n0 / wavelength) * np.cos(alpha) * z0)
    return rs, rp, ph


def _factors(stack, wavelength, alpha, z0, r_override=None):
    """Interference factors ``(f_s, f_p+, f_p-)`` at angles ``alpha``."""
    rs, rp, ph = _coefficients(stack, wavelength, alpha, z0, r_override)
    return np.abs(1 + rs * ph) ** 2, np.abs(1 + rp * ph) ** 2, np.abs(1 - rp * ph) ** 2


def emitted_power_near_mirror(
    geom: DipoleGeometry, stack: LayerStack | None, alpha, phi, interference="literal", r=None
):
    """Angular power density with the mirror, normalized to the free dipole.

    ``stack=None`` together with ``r`` models an ideal reflector of constant
    amplitude reflectivity (``r=0`` recovers free space).
    """
    if interference not in INTERFERENCE:
        raise ValueError(f"interference must be one of {INTERFERENCE}")
    if stack is None and r is None:
        raise ValueError("need a stack or an explicit reflectivity r")
    alpha = np.asarray(alpha, dtype=float)
    phi = np.asarray(phi, dtype=float)
    rs, rp, ph = _coefficients(stack, geom.wavelength, alpha, geom.z0, r)
    th = geom.theta
    Ps = dipole_pattern(alpha, th, phi, "s")
    fs = np.abs(1 + rs * ph) ** 2
    if interference == "literal":
        return fs * Ps + np.abs(1 + rp * ph) ** 2 * dipole_pattern(alpha, th, phi, "p")
    # p field split into its in-plane (+) and normal (-) dipole parts
    amp = np.cos(th) * np.sin(alpha) * (1 - rp * ph) + np.sin(th) * np.cos(alpha) * np.cos(phi) * (1 + rp * ph)
    return fs * Ps + NORM * np.abs(amp) ** 2


def _phi_integrated(geom, stack, alpha, interference, r=None):
    """Integrand after the analytic azimuthal integral, times ``sin(alpha)``.

    The interference factors do not depend on ``phi``, so the azimuthal
    integrals of the pattern are elementary; the cross term ``cos(phi)``
    integrates to zero.
    """
    fs, fpp, fpm = _factors(stack, geom.wavelength, alpha, geom.z0, r)
    s2, c2 = math.sin(geom.theta) ** 2, math.cos(geom.theta) ** 2
    f_normal = fpp if interference == "literal" else fpm
    inner = fs * np.pi * s2 + fpp * np.pi * s2 * np.cos(alpha) ** 2 + f_normal * 2 * np.pi * c2 * np.sin(alpha) ** 2
    return NORM * inner * np.sin(alpha)


def collection_efficiency(
    geom: DipoleGeometry,
    stack: LayerStack | None,
    tol: float = 1e-4,
    interference: str = "literal",
    method: str = "quad",
    r=None,
) -> float:
    """Fraction of the free-dipole power collected within the objective NA.

    ``method="quad"`` integrates the azimuth analytically and adapts over the
    polar angle; ``"dblquad"`` runs the full two-dimensional adaptive scheme.
    Both are converged to absolute tolerance ``tol``.
    """
    if interference not in INTERFERENCE:
        raise ValueError(f"interference must be one of {INTERFERENCE}")
    if stack is None and r is None:
        raise ValueError("need a stack or an explicit reflectivity r")
    amax = geom.alpha_max
    if method == "quad":
        val, err = integrate.quad(
            lambda a: float(_phi_integrated(geom, stack, a, interference, r)),
            0.0, amax, epsabs=min(tol, 1e-8), epsrel=1e-10, limit=200,
        )
    elif method == "dblquad":
        def f(phi, a):
            return float(emitted_power_near_mirror(geom, stack, a, phi, interference, r)) * math.sin(a)
        val, err = integrate.dblquad(f, 0.0, amax, 0.0, 2 * np.pi, epsabs=tol / 10, epsrel=1e-8)
    else:
        raise ValueError("method must be 'quad' or 'dblquad'")
    if not np.isfinite(val) or err > tol:
        raise ConvergenceError(
            f"collection integral did not reach tolerance {tol:g} (error estimate {err:.2g})",
            {"value": val, "error": err},
        )
    return float(val)


def collection_efficiency_isotropic(geom: DipoleGeometry, stack, **kw) -> float:
    """Orientation average for a randomly oriented dipole.

    The collected fraction is linear in ``sin(theta)**2`` so the average over
    the sphere weights the parallel result by 2/3 and the axial one by 1/3.
    """
    par = collection_efficiency(DipoleGeometry(math.pi / 2, geom.z0, geom.na, geom.wavelength), stack, **kw)
    ax = collection_efficiency(DipoleGeometry(0.0, geom.z0, geom.na, geom.wavelength), stack, **kw)
    return 2.0 * par / 3.0 + ax / 3.0


def free_space_cone_fraction(theta: float, na: float) -> float:
    """Closed-form fraction of a free dipole's power inside a cone of half-angle asin(NA)."""
    cm = math.sqrt(1.0 - na * na)
    s2, c2 = math.sin(theta) ** 2, math.cos(theta) ** 2
    # integrate over u = cos(alpha) from cm to 1
    par = 3.0 / 8.0 * ((1 - cm) + (1 - cm**3) / 3.0)
    ax = 3.0 / 4.0 * ((1 - cm) - (1 - cm**3) / 3.0)
    return s2 * par + c2 * ax


def _extrema_on_interval(r, wavelength, n0, z_lo, z_hi):
    """Min and max of ``|1 + r e^{2ikz}|**2`` for z in [z_lo, z_hi]."""
    k = 2.0 * np.pi * n0 / wavelength
    phase0 = np.angle(r)
    f = lambda z: abs(1 + abs(r) * np.exp(1j * (2 * k * z + phase0))) ** 2
    cands = [z_lo, z_hi]
    # stationary points where 2kz + arg r is a multiple of pi
    m_lo = math.ceil((2 * k * z_lo + phase0) / np.pi)
    m_hi = math.floor((2 * k * z_hi + phase0) / np.pi)
    cands += [(m * np.pi - phase0) / (2 * k) for m in range(m_lo, m_hi + 1)]
    vals = [f(z) for z in cands]
    return min(vals), max(vals)


def purcell_position_factor(
    stack: LayerStack, wavelength: float, crystal_size: float = 100.0, emitter_offset: float | None = None
):
    """Field intensity at the emitter relative to the standing-wave maximum.

    Returns ``(nominal, lower, upper)``: the value at ``emitter_offset``
    (default mid-crystal) and the extremes over a crystal of the given size
    resting on the mirror.
    """
    if crystal_size <= 0:
        raise ValueError("crystal size must be positive")
    z_nom = crystal_size / 2.0 if emitter_offset is None else float(emitter_offset)
    if not 0 <= z_nom <= crystal_size:
        raise ValueError("emitter offset must lie inside the crystal")
    r = complex(reflectivity(stack, wavelength))
    peak = (1.0 + abs(r)) ** 2
    k = 2.0 * np.pi * stack.ambient_index / wavelength
    nominal = abs(1 + r * np.exp(2j * k * z_nom)) ** 2 / peak
    lo, hi = _extrema_on_interval(r, wavelength, stack.ambient_index, 0.0, crystal_size)
    return float(nominal), float(lo / peak), float(hi / peak)


def position_factor_curve(stack, wavelengths, crystal_size=100.0, emitter_offset=None):
    """Rows ``(wavelength_nm, factor_nominal, factor_min, factor_max)``."""
    return [
        (float(w), *purcell_position_factor(stack, w, crystal_size, emitter_offset))
        for w in np.asarray(wavelengths, dtype=float)
    ]


def orientation_factor(phi):
    """``sin(phi)**2`` for the angle between dipole and cavity field."""
    phi = np.asarray(phi, dtype=float)
    if np.any(phi < 0) or np.any(phi > np.pi / 2 + 1e-12):
        raise ValueError("phi must lie in [0, pi/2]")
    out = np.sin(phi) ** 2
    return float(out) if out.ndim == 0 else out
