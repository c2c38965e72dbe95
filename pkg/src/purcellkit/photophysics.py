"""Three-level emitter dynamics, saturation and efficiency bookkeeping.

Rates are in MHz, powers in mW at the sample and slopes in MHz/mW, so that
``1e3 / rate`` is a time in ns.  Level 1 is the ground state, 2 the emitting
state and 3 the shelving state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import OscillatoryRegimeError

__all__ = [
    "Rates",
    "RateModel",
    "ConstantDeshelvingModel",
    "G2Params",
    "EmitterSpec",
    "DetectionChain",
    "QEEstimate",
    "rates_at_power",
    "g2_params",
    "g2_analytic",
    "g2_bin_average",
    "a_asymptote",
    "e_from_asymptote",
    "equilibrium_population",
    "population_asymptote",
    "total_rate",
    "saturation_power",
    "saturation_model",
    "qe_from_lifetime_change",
    "qe_in_cavity",
    "emission_rate_free_space",
    "emission_rate_cavity",
    "purcell_experimental",
    "device_efficiency",
    "qe_from_total_rate",
]


class Rates(NamedTuple):
    k12: float
    k21: float
    k23: float
    k31: float
    k32: float


@dataclass(frozen=True)
class RateModel:
    """Power-dependent three-level model.

    ``k12 = sigma P``, ``k32 = d P``, ``k23 = e P + k23_0``; ``k21`` and
    ``k31`` are constant.  ``gamma_r`` is the radiative part of ``k21``
    (defaults to all of it).
    """

    sigma: float
    d: float
    e: float
    k23_0: float
    k21: float
    k31: float
    gamma_r: float | None = None

    def __post_init__(self):
        for name in ("sigma", "d", "e", "k23_0", "k21", "k31"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} = {v} must be finite and >= 0")
        if self.k21 <= 0:
            raise ValueError("k21 must be > 0")
        if self.gamma_r is None:
            object.__setattr__(self, "gamma_r", float(self.k21))
        if not 0 <= self.gamma_r <= self.k21 * (1 + 1e-12):
            raise ValueError("gamma_r must lie in [0, k21]")

    @classmethod
    def from_lifetimes(cls, sigma, d, e, tau1_0, tau2_0, k23_0, qe=1.0):
        """Constant rates from zero-power lifetimes (ns): ``k21 = 1/tau1_0 - k23_0``."""
        k21 = 1e3 / tau1_0 - k23_0
        if k21 <= 0:
            raise ValueError("1/tau1_0 must exceed k23_0")
        return cls(sigma, d, e, k23_0, k21, 1e3 / tau2_0, gamma_r=qe * k21)

    @classmethod
    def from_asymptote(cls, sigma, d, a_inf, tau1_0, tau2_0, k23_0, qe=1.0):
        return cls.from_lifetimes(sigma, d, e_from_asymptote(a_inf, d, sigma), tau1_0, tau2_0, k23_0, qe)

    @property
    def gamma_nr(self) -> float:
        return self.k21 - self.gamma_r

    @property
    def qe(self) -> float:
        return self.gamma_r / self.k21

    @property
    def tau1_0(self) -> float:
        return 1e3 / (self.k21 + self.k23_0)

    @property
    def tau2_0(self) -> float:
        return 1e3 / self.k31 if self.k31 > 0 else math.inf

    def rates(self, P) -> Rates:
        if np.any(np.asarray(P) < 0):
            raise ValueError("power must be >= 0")
        return Rates(
            self.sigma * P,
            self.k21 + 0 * P,
            self.e * P + self.k23_0,
            self.k31 + 0 * P,
            self.d * P,
        )

    def slopes(self):
        """Per-mW slopes and constant terms, as used by the simulator."""
        return (self.sigma, 0.0, self.e, 0.0, self.d), (0.0, self.k21, self.k23_0, self.k31, 0.0)


@dataclass(frozen=True)
class ConstantDeshelvingModel:
    """Earlier three-level model in which only the pump rate grows with power.

    Shelving ``k23`` and deshelving ``k32`` are constant, so the bunching
    time ``tau2`` tends to ``1/(k23 + k31 + k32)`` instead of zero.
    """

    sigma: float
    k23: float
    k21: float
    k31: float
    k32: float
    gamma_r: float | None = None

    def __post_init__(self):
        if self.gamma_r is None:
            object.__setattr__(self, "gamma_r", float(self.k21))

    def rates(self, P) -> Rates:
        if np.any(np.asarray(P) < 0):
            raise ValueError("power must be >= 0")
        return Rates(self.sigma * P, self.k21 + 0 * P, self.k23 + 0 * P, self.k31 + 0 * P, self.k32 + 0 * P)

    def slopes(self):
        return (self.sigma, 0.0, 0.0, 0.0, 0.0), (0.0, self.k21, self.k23, self.k31, self.k32)


def rates_at_power(model, P) -> Rates:
    return model.rates(P)


class G2Params(NamedTuple):
    tau1: float  # ns
    tau2: float  # ns
    a: float
    A: float  # MHz
    B: float  # MHz**2


def _composites(r: Rates):
    A = r.k12 + r.k21 + r.k23 + r.k31 + r.k32
    B = r.k23 * r.k31 + r.k21 * (r.k31 + r.k32) + r.k12 * (r.k23 + r.k31 + r.k32)
    return A, B


def g2_params(model, P) -> G2Params:
    """Time constants and bunching amplitude of g2 at power ``P``.

    Vectorized over ``P``.  Raises :class:`OscillatoryRegimeError` when the
    eigenvalues are complex.
    """
    r = model.rates(P)
    A, B = _composites(r)
    D = A * A - 4.0 * B
    # roundoff can push an exactly degenerate discriminant slightly negative
    tol = 1e-12 * A * A
    if np.any(D < -tol):
        raise OscillatoryRegimeError(f"A**2 < 4B at P = {P}: g2 oscillates")
    sq = np.sqrt(np.maximum(D, 0.0))
    # 2/(A + sq) and its conjugate root written without cancellation
    tau1_us = 2.0 / (A + sq)
    tau2_us = (A + sq) / (2.0 * B)
    k = r.k31 + r.k32
    with np.errstate(divide="ignore", invalid="ignore"):
        a = (1.0 - tau2_us * k) / (k * (tau2_us - tau1_us))
    a = np.where(np.isfinite(a), a, 0.0)
    if np.ndim(a) == 0:
        return G2Params(float(tau1_us * 1e3), float(tau2_us * 1e3), float(a), float(A), float(B))
    return G2Params(tau1_us * 1e3, tau2_us * 1e3, a, A, B)


def g2_analytic(params, tau):
    """``1 - (1 + a) exp(-|t|/tau1) + a exp(-|t|/tau2)``; ``params`` may be a tuple."""
    tau1, tau2, a = params[:3]
    t = np.abs(np.asarray(tau, dtype=float))
    return 1.0 - (1.0 + a) * np.exp(-t / tau1) + a * np.exp(-t / tau2)


def _exp_bin_mean(lo, hi, tau):
    """Mean of exp(-|t|/tau) over [lo, hi]."""
    def prim(t):
        # antiderivative of exp(-|t|/tau), odd-symmetric about 0
        return np.sign(t) * tau * (1.0 - np.exp(-np.abs(t) / tau))
    return (prim(hi) - prim(lo)) / (hi - lo)


def g2_bin_average(params, lo, hi):
    """Average of :func:`g2_analytic` over lag bins ``[lo, hi]``."""
    tau1, tau2, a = params[:3]
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    return 1.0 - (1.0 + a) * _exp_bin_mean(lo, hi, tau1) + a * _exp_bin_mean(lo, hi, tau2)


def a_asymptote(sigma, d, e):
    """Large-power bunching amplitude ``e sigma / (d (sigma - d - e))``."""
    den = d * (sigma - d - e)
    if den == 0:
        raise ZeroDivisionError("a_inf undefined for d = 0 or sigma = d + e")
    return e * sigma / den


def e_from_asymptote(a_inf, d, sigma):
    """Shelving slope ``e`` that yields the large-power amplitude ``a_inf``."""
    den = a_inf * d + sigma
    if den == 0:
        raise ZeroDivisionError("a_inf d + sigma = 0")
    return (-a_inf * d**2 + a_inf * d * sigma) / den


def equilibrium_population(model, P):
    """Steady-state population of the emitting level."""
    r = model.rates(P)
    _, B = _composites(r)
    return r.k12 * (r.k31 + r.k32) / B


def population_asymptote(model) -> float:
    """``n2`` in the limit of infinite power."""
    if model.sigma == 0:
        return 0.0
    if isinstance(model, RateModel):
        if model.d > 0:
            return 1.0 / (1.0 + model.e / model.d)
        if model.e > 0:
            return 0.0
        return model.k31 / (model.k23_0 + model.k31)
    r = model.rates(1.0)
    k = r.k31 + r.k32
    return k / (r.k23 + k)


def total_rate(model) -> float:
    """Saturated de-excitation rate ``Gamma = n2_inf k21`` (MHz)."""
    return population_asymptote(model) * model.k21


def saturation_power(model, rel_tol=1e-12) -> float:
    """Power at which ``n2`` reaches half its asymptote, by bisection."""
    half = 0.5 * population_asymptote(model)
    if half <= 0:
        return math.inf
    lo, hi = 0.0, 1.0
    while equilibrium_population(model, hi) < half:
        hi *= 2.0
        if hi > 1e30:
            return math.inf
    while hi - lo > rel_tol * hi:
        mid = 0.5 * (lo + hi)
        if equilibrium_population(model, mid) < half:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def saturation_model(P, I_inf, P_sat, a_bg=0.0):
    """Count rate ``P I_inf / (P + P_sat) + a_bg P``."""
    P = np.asarray(P, dtype=float)
    if P_sat <= 0:
        raise ValueError("P_sat must be > 0")
    return P * I_inf / (P + P_sat) + a_bg * P


class QEEstimate(NamedTuple):
    qe: float
    consistent: bool  # False if the estimate exceeds 1


def qe_from_lifetime_change(tau0, tauc, C) -> QEEstimate:
    """Quantum efficiency from ``tau0 / tauc = C QE + 1``.

    Values above 1 are returned unclamped with ``consistent=False``.
    """
    if C <= 0:
        raise ValueError("Purcell factor must be > 0")
    if tauc > tau0:
        raise ValueError("cavity lifetime longer than free-space lifetime")
    qe = (tau0 / tauc - 1.0) / C
    return QEEstimate(qe, qe <= 1.0)


def qe_in_cavity(C, QE):
    """``(C + 1) / (C + 1/QE)``."""
    if not 0 < QE <= 1:
        raise ValueError("QE must lie in (0, 1]")
    if C < 0:
        raise ValueError("C must be >= 0")
    return (C + 1.0) / (C + 1.0 / QE)


@dataclass(frozen=True)
class EmitterSpec:
    """Spectral and coupling properties of one color center."""

    id: str
    wavelength: float  # nm
    fwhm: float  # nm
    zeta: float = 0.8
    qe: float | None = None
    dipole_theta: float = math.pi / 2
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.wavelength <= 0 or self.fwhm <= 0:
            raise ValueError(f"{self.id}: wavelength and linewidth must be positive")
        if not 0 < self.zeta <= 1:
            raise ValueError(f"{self.id}: zeta must lie in (0, 1]")

    @property
    def Q_em(self) -> float:
        return self.wavelength / self.fwhm


_CHAIN_FIELDS = ("eta_det", "eta_trans", "eta_obj", "eta_coll", "eta_fiber", "eta_c", "epsilon")


@dataclass(frozen=True)
class DetectionChain:
    """Collection and detection efficiencies of both set-ups."""

    eta_det: float = 1.0
    eta_trans: float = 1.0
    eta_obj: float = 1.0
    eta_coll: float = 1.0
    eta_fiber: float = 1.0
    eta_c: float = 1.0
    epsilon: float = 1.0

    def __post_init__(self):
        for name in _CHAIN_FIELDS:
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise ValueError(f"{name} = {v} must lie in (0, 1]")

    @property
    def free_space(self) -> float:
        return self.eta_det * self.eta_trans * self.eta_coll * self.eta_obj

    @property
    def cavity(self) -> float:
        return self.eta_det * self.eta_trans * self.eta_c * self.eta_fiber * self.epsilon


def emission_rate_free_space(I_m, chain: DetectionChain):
    """Emission rate into 4 pi from the detected free-space count rate."""
    return I_m / chain.free_space


def emission_rate_cavity(I_m, chain: DetectionChain):
    """Emission rate into the cavity mode from the detected count rate."""
    return I_m / chain.cavity


def purcell_experimental(I_inf_cav, I_inf_fs):
    if I_inf_fs <= 0:
        raise ValueError("free-space rate must be > 0")
    return I_inf_cav / I_inf_fs


def device_efficiency(qe_c, beta, eta_c, epsilon):
    """Probability that an excitation leaves the fiber as a photon."""
    return qe_c * beta * eta_c * epsilon


def qe_from_total_rate(I_fs, model) -> float:
    """QE implied by comparing a saturated emission rate (MHz) with ``Gamma``."""
    return I_fs / total_rate(model)
