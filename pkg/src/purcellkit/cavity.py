"""Fabry-Perot figures of merit for a fiber-based microcavity.

Lengths enter in the units they are usually quoted in (ROC and waists in um,
cavity lengths and wavelengths in nm, losses in ppm) and are converted to SI
internally.  Mode volumes are returned in units of ``lambda**3``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple, Sequence

import numpy as np
from scipy.constants import c as SPEED_OF_LIGHT

from .errors import CalibrationError, GeometryError, UnstableCavityError
from .tmm import LayerStack, mirror_optical_thickness, stack_optical_path, transmission

PPM = 1e-6

__all__ = [
    "LossBudget",
    "CavityConfig",
    "CavityMode",
    "LengthCalibration",
    "finesse",
    "quality_factor",
    "linewidth",
    "calibrate_length",
    "gaussian_waist",
    "mode_volume",
    "purcell_prefactor",
    "purcell_ideal",
    "effective_q",
    "purcell_effective",
    "beta",
    "cavity_transmission",
    "extinction_to_loss",
    "outcoupling",
    "mode_matching",
    "spectral_density",
    "spectral_enhancement",
    "losses_from_stacks",
]


@dataclass(frozen=True)
class LossBudget:
    """Round-trip losses in ppm: mirror transmissions, absorption, extinction."""

    T_f: float
    T_p: float
    A: float = 0.0
    L: float = 0.0

    def __post_init__(self):
        for name in ("T_f", "T_p", "A", "L"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise ValueError(f"loss {name}={value} ppm must be finite and >= 0")

    @property
    def total_ppm(self) -> float:
        return self.T_f + self.T_p + self.A + self.L

    @property
    def total(self) -> float:
        """Total loss as a fraction."""
        return self.total_ppm * PPM

    def with_extinction(self, L: float) -> "LossBudget":
        return replace(self, L=float(L))


def _require_loss(losses: LossBudget):
    if losses.total_ppm <= 0:
        raise ValueError("total round-trip loss is zero; finesse would be unbounded")


def finesse(losses: LossBudget) -> float:
    """``F = 2 pi / (T_f + T_p + A + L)``."""
    _require_loss(losses)
    return 2.0 * np.pi / losses.total


def quality_factor(q: int, F: float) -> float:
    if q < 1:
        raise ValueError(f"mode order q must be >= 1, got {q}")
    if F <= 0:
        raise ValueError("finesse must be positive")
    return q * F


def linewidth(Q: float, wavelength: float) -> tuple[float, float]:
    """Cavity FWHM as ``(kappa_GHz, fwhm_pm)`` for quality factor ``Q``."""
    if Q <= 0 or wavelength <= 0:
        raise ValueError("Q and wavelength must be positive")
    nu = SPEED_OF_LIGHT / (wavelength * 1e-9)
    return nu / Q * 1e-9, wavelength / Q * 1e3


class LengthCalibration(NamedTuple):
    d_eff: float  # nm
    q: int
    spread: float  # relative half min-max across adjacent pairs
    pairs: np.ndarray  # per-pair length estimates, nm


def calibrate_length(resonances: Sequence[float], max_spread: float = 0.05) -> LengthCalibration:
    """Effective length and mode order from a comb of resonance wavelengths.

    ``resonances`` must be sorted in descending wavelength (ascending order
    q, q+1, ...).  Each adjacent pair gives ``lq * lq1 / (2 (lq - lq1))``.
    """
    lam = np.asarray(resonances, dtype=float)
    if lam.ndim != 1 or lam.size < 2:
        raise CalibrationError("need at least two resonance wavelengths")
    if np.any(lam <= 0):
        raise CalibrationError("resonance wavelengths must be positive")
    if np.any(np.diff(lam) >= 0):
        raise CalibrationError("resonances must be strictly descending in wavelength")
    pairs = lam[:-1] * lam[1:] / (2.0 * (lam[:-1] - lam[1:]))
    d_eff = float(np.mean(pairs))
    spread = float(0.5 * (pairs.max() - pairs.min()) / d_eff)
    if spread > max_spread:
        raise CalibrationError(
            f"adjacent-pair lengths disagree by {spread:.1%} (> {max_spread:.0%}): {pairs.round(1)}"
        )
    q = int(round(2.0 * d_eff / lam[0]))
    if q < 1:
        raise CalibrationError("comb implies mode order below 1")
    return LengthCalibration(d_eff, q, spread, pairs)


def gaussian_waist(roc: float, d_eff: float, wavelength: float) -> float:
    """Ideal plano-concave waist ``sqrt(lambda/pi) (d (R - d))**0.25`` in um.

    ``roc`` in um, ``d_eff`` and ``wavelength`` in nm.
    """
    R = roc * 1e-6
    d = d_eff * 1e-9
    lam = wavelength * 1e-9
    if d <= 0:
        raise UnstableCavityError("cavity length must be positive")
    if d >= R:
        raise UnstableCavityError(f"d_eff = {d_eff} nm >= ROC = {roc} um: no stable mode")
    return float(np.sqrt(lam / np.pi) * (d * (R - d)) ** 0.25 * 1e6)


def mode_volume(w0: float, d_eff: float, wavelength: float) -> float:
    """``pi w0**2 d_eff / 4`` in units of ``lambda**3`` (w0 in um, others in nm)."""
    if w0 <= 0 or d_eff <= 0 or wavelength <= 0:
        raise ValueError("waist, length and wavelength must be positive")
    w = w0 * 1e-6
    return float(np.pi * w**2 * d_eff * 1e-9 / 4.0 / (wavelength * 1e-9) ** 3)


def purcell_prefactor(n: float = 1.0) -> float:
    """``3 / (4 pi**2 n**3)``: Purcell factor per unit Q for ``V_m = lambda**3``."""
    return 3.0 / (4.0 * np.pi**2 * n**3)


def purcell_ideal(Q: float, V_m: float, n: float = 1.0) -> float:
    """``C0 = 3 (lambda/n)**3 / (4 pi**2) * Q / V_m`` with ``V_m`` in ``lambda**3``."""
    if Q <= 0 or V_m <= 0 or n <= 0:
        raise ValueError("Q, V_m and n must be positive")
    return purcell_prefactor(n) * Q / V_m


def effective_q(Q_c: float, Q_em: float) -> float:
    """Harmonic combination; ``Q_em = inf`` returns ``Q_c``."""
    return 1.0 / (1.0 / Q_c + 1.0 / Q_em)


def purcell_effective(Q_c, Q_em, V_m, zeta=1.0, eta_E=1.0, n=1.0) -> float:
    """Purcell factor of a broadband emitter with ZPL fraction ``zeta``.

    ``eta_E`` is the normalized dipole-field overlap (position times orientation).
    """
    if not 0 <= zeta <= 1 or not 0 <= eta_E <= 1:
        raise ValueError("zeta and eta_E must lie in [0, 1]")
    return purcell_ideal(effective_q(Q_c, Q_em), V_m, n) * zeta * eta_E


def beta(C):
    """Fraction of emission into the cavity mode, ``C / (C + 1)``."""
    C = np.asarray(C, dtype=float)
    if np.any(C < 0):
        raise ValueError("Purcell factor must be >= 0")
    out = C / (C + 1.0)
    return float(out) if out.ndim == 0 else out


def cavity_transmission(losses: LossBudget) -> float:
    """On-resonance transmission ``4 T_p T_f / (sum of losses)**2``."""
    _require_loss(losses)
    return 4.0 * losses.T_p * losses.T_f / losses.total_ppm**2


def extinction_to_loss(T_over_T0: float, base: LossBudget) -> float:
    """Extinction loss ``L`` (ppm) that reduces the cavity transmission by ``T_over_T0``.

    ``base.L`` is treated as the empty-cavity extinction and must be zero.
    """
    if base.L != 0:
        raise ValueError("base loss budget must have L = 0")
    if not 0 < T_over_T0 <= 1:
        raise ValueError(f"T/T0 = {T_over_T0} must lie in (0, 1]")
    return base.total_ppm * (1.0 / np.sqrt(T_over_T0) - 1.0)


def outcoupling(losses: LossBudget) -> float:
    """Fraction of intracavity loss leaving through the fiber mirror."""
    _require_loss(losses)
    return losses.T_f / losses.total_ppm


def mode_matching(w0: float, w_f: float, s: float, wavelength: float) -> float:
    """Power overlap of two coaxial Gaussian beams with waists ``s`` apart.

    ``w0``, ``w_f`` and ``s`` in um, ``wavelength`` in nm.
    """
    if w0 <= 0 or w_f <= 0:
        raise ValueError("waists must be positive")
    if np.any(np.asarray(s) < 0):
        raise ValueError("waist separation must be >= 0")
    x = np.asarray(s) * wavelength * 1e-3 / (np.pi * w0 * w_f)
    out = 4.0 / ((w_f / w0 + w0 / w_f) ** 2 + x**2)
    return float(out) if np.ndim(out) == 0 else out


def spectral_density(rate: float, kappa: float) -> float:
    """Peak spectral density ``2 rate / (pi kappa)`` for a Lorentzian of FWHM ``kappa``."""
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    return 2.0 * rate / (np.pi * kappa)


def spectral_enhancement(C: float, Q_c: float, Q_em: float) -> float:
    """Peak spectral density gain when the cavity narrows the emission: ``C Q_c / Q_em``."""
    return C * Q_c / Q_em


def losses_from_stacks(
    fiber: LayerStack, planar: LayerStack, wavelength, A: float = 0.0, L: float = 0.0
):
    """Mirror transmissions (ppm) at ``wavelength``; scalar -> LossBudget, array -> arrays."""
    T_f = transmission(fiber, wavelength) / PPM
    T_p = transmission(planar, wavelength) / PPM
    if np.ndim(wavelength) == 0:
        return LossBudget(float(T_f), float(T_p), A, L)
    return T_f, T_p


@dataclass(frozen=True)
class CavityMode:
    w0: float  # um
    w_f: float  # um
    V_m: float  # lambda**3
    F: float
    Q_c: float
    kappa: float  # GHz
    fwhm: float  # pm
    d_eff: float  # nm
    wavelength: float  # nm


S_POLICIES = ("stack", "penetration", "explicit")


@dataclass(frozen=True)
class CavityConfig:
    """Geometry and loss budget of the fiber cavity.

    ``d_eff = d_geo + d_mirror_fiber + d_mirror_planar`` must agree with
    ``q * wavelength / 2`` to ``length_tolerance`` (relative).

    The waist separation used for mode matching follows ``s_policy``:

    ``"stack"``
        ``d_geo`` plus the optical path ``sum(n t)`` of the fiber coating
        (``fiber_stack_path``).
    ``"penetration"``
        ``d_geo`` plus the phase-slope penetration ``d_mirror_fiber``.
    ``"explicit"``
        the value of ``s_um``.
    """

    roc: float  # um
    d_geo: float  # nm
    q: int
    wavelength: float  # nm
    losses: LossBudget
    d_mirror_fiber: float = 0.0  # nm
    d_mirror_planar: float = 0.0  # nm
    fiber_stack_path: float | None = None  # nm
    w0_override: float | None = None  # um
    w_f: float = 2.5  # um
    s_policy: str = "stack"
    s_um: float | None = None
    n: float = 1.0
    length_tolerance: float = 0.05
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.q < 1:
            raise ValueError("mode order q must be >= 1")
        if self.wavelength <= 0 or self.w_f <= 0:
            raise ValueError("wavelength and fiber mode radius must be positive")
        if not 0 < self.d_geo < self.roc * 1e3:
            raise UnstableCavityError(
                f"need 0 < d_geo < ROC (d_geo = {self.d_geo} nm, ROC = {self.roc} um)"
            )
        if self.s_policy not in S_POLICIES:
            raise ValueError(f"s_policy must be one of {S_POLICIES}")
        if self.s_policy == "stack" and self.fiber_stack_path is None:
            raise ValueError("s_policy 'stack' needs fiber_stack_path")
        if self.s_policy == "explicit" and self.s_um is None:
            raise ValueError("s_policy 'explicit' needs s_um")
        target = self.q * self.wavelength / 2.0
        mismatch = abs(self.d_eff - target) / target
        if mismatch > self.length_tolerance:
            raise GeometryError(
                f"d_geo + penetrations = {self.d_eff:.1f} nm but q lambda / 2 = {target:.1f} nm "
                f"({mismatch:.1%} apart, tolerance {self.length_tolerance:.0%})"
            )

    @classmethod
    def from_stacks(cls, fiber: LayerStack, planar: LayerStack, roc, q, wavelength, A=0.0, L=0.0, **kw):
        """Build a config whose penetrations and transmissions come from coatings.

        ``d_geo`` defaults to the gap that puts the cavity exactly on order ``q``.
        """
        pen_f = mirror_optical_thickness(fiber, wavelength)
        pen_p = mirror_optical_thickness(planar, wavelength)
        d_geo = kw.pop("d_geo", q * wavelength / 2.0 - pen_f - pen_p)
        losses = losses_from_stacks(fiber, planar, wavelength, A, L)
        return cls(
            roc=roc,
            d_geo=d_geo,
            q=q,
            wavelength=wavelength,
            losses=losses,
            d_mirror_fiber=pen_f,
            d_mirror_planar=pen_p,
            fiber_stack_path=stack_optical_path(fiber),
            **kw,
        )

    @property
    def d_eff(self) -> float:
        return self.d_geo + self.d_mirror_fiber + self.d_mirror_planar

    @property
    def waist_separation(self) -> float:
        """Mode-matching distance ``s`` in um."""
        if self.s_policy == "explicit":
            return float(self.s_um)
        extra = self.fiber_stack_path if self.s_policy == "stack" else self.d_mirror_fiber
        return (self.d_geo + extra) * 1e-3

    def waist(self) -> float:
        if self.w0_override is not None:
            return float(self.w0_override)
        return gaussian_waist(self.roc, self.d_eff, self.wavelength)

    def mode(self) -> CavityMode:
        w0 = self.waist()
        F = finesse(self.losses)
        Q = quality_factor(self.q, F)
        kappa, fwhm = linewidth(Q, self.wavelength)
        V = mode_volume(w0, self.d_eff, self.wavelength)
        return CavityMode(w0, self.w_f, V, F, Q, kappa, fwhm, self.d_eff, self.wavelength)

    def mode_matching(self) -> float:
        return mode_matching(self.waist(), self.w_f, self.waist_separation, self.wavelength)

    def outcoupling(self) -> float:
        return outcoupling(self.losses)

    def purcell_ideal(self) -> float:
        m = self.mode()
        return purcell_ideal(m.Q_c, m.V_m, self.n)
