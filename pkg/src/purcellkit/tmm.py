"""Transfer-matrix optics of dielectric mirror stacks.

Phase convention
----------------
Fields carry a time dependence ``exp(-i omega t)``, so a plane wave travelling
a distance ``z`` picks up ``exp(+i k z)``.  Reflection coefficients are ratios
of *tangential* electric field amplitudes at the top (ambient-side) interface
of the stack, for both polarizations.  With this choice ``r_s == r_p`` at
normal incidence, and the standing-wave intensity a distance ``z0`` above the
stack is ``|1 + r exp(2 i k cos(alpha) z0)|**2``.

Layers of a :class:`LayerStack` are stored in deposition order: the first
layer sits on the substrate, the last one faces the ambient medium.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import EvanescentError

__all__ = [
    "LayerStack",
    "PolarizedResponse",
    "stack_response",
    "reflectivity",
    "field_factor_above_mirror",
    "mirror_optical_thickness",
    "stack_optical_path",
    "quarter_wave_stack",
    "quarter_wave_transmission",
    "quarter_wave_penetration",
    "sweep",
]


@dataclass(frozen=True)
class LayerStack:
    """Planar multilayer between a semi-infinite ambient and substrate.

    ``layers`` holds ``(refractive_index, thickness_nm)`` pairs in deposition
    order (substrate first).  An empty list describes a bare interface.
    """

    ambient_index: float = 1.0
    layers: tuple = field(default_factory=tuple)
    substrate_index: float = 1.5
    name: str = ""

    def __post_init__(self):
        layers = tuple((float(n), float(t)) for n, t in self.layers)
        object.__setattr__(self, "layers", layers)
        if self.ambient_index < 1 or self.substrate_index < 1:
            raise ValueError("ambient and substrate indices must be >= 1")
        for i, (n, t) in enumerate(layers):
            if n < 1:
                raise ValueError(f"layer {i}: refractive index {n} < 1")
            if t <= 0:
                raise ValueError(f"layer {i}: thickness {t} nm must be > 0")

    @property
    def indices(self) -> np.ndarray:
        return np.array([n for n, _ in self.layers], dtype=float)

    @property
    def thicknesses(self) -> np.ndarray:
        return np.array([t for _, t in self.layers], dtype=float)

    def reversed(self) -> "LayerStack":
        """The same stack illuminated from the substrate side."""
        return LayerStack(
            ambient_index=self.substrate_index,
            layers=tuple(reversed(self.layers)),
            substrate_index=self.ambient_index,
            name=self.name,
        )

    def with_cap(self, index: float, thickness: float) -> "LayerStack":
        """Return a copy with one extra layer deposited on top."""
        return LayerStack(
            self.ambient_index,
            self.layers + ((index, thickness),),
            self.substrate_index,
            self.name,
        )


@dataclass(frozen=True)
class PolarizedResponse:
    r_s: complex
    r_p: complex
    T_s: float
    T_p: float
    wavelength: float
    angle: float

    def r(self, polarization: str) -> complex:
        return self.r_s if polarization == "s" else self.r_p

    def T(self, polarization: str) -> float:
        return self.T_s if polarization == "s" else self.T_p


def _cos_in(index, n0_sin):
    """Cosine of the propagation angle inside a medium of the given index."""
    ratio = n0_sin / index
    if np.any(ratio >= 1.0):
        raise EvanescentError(
            f"angle beyond total internal reflection for index {index:g}"
        )
    return np.sqrt(1.0 - ratio**2)


def _admittance(index, cos_t, polarization):
    if polarization == "s":
        return index * cos_t
    if polarization == "p":
        return index / cos_t
    raise ValueError(f"polarization must be 's' or 'p', got {polarization!r}")


def _amplitudes(stack: LayerStack, wavelength, angle, polarization):
    """Vectorized core: complex r and power T over broadcast wavelength/angle."""
    wavelength = np.asarray(wavelength, dtype=float)
    angle = np.asarray(angle, dtype=float)
    if np.any(wavelength <= 0):
        raise ValueError("wavelength must be positive")
    if np.any(angle < 0) or np.any(angle >= np.pi / 2):
        raise ValueError("angle must lie in [0, pi/2)")
    wavelength, angle = np.broadcast_arrays(wavelength, angle)

    n0 = stack.ambient_index
    n0_sin = n0 * np.sin(angle)
    eta0 = _admittance(n0, np.cos(angle), polarization)
    cos_sub = _cos_in(stack.substrate_index, n0_sin)
    eta_sub = _admittance(stack.substrate_index, cos_sub, polarization)

    # [B, C]^T = M_top ... M_bottom [1, eta_sub]^T
    B = np.ones_like(wavelength, dtype=complex)
    C = eta_sub.astype(complex)
    for n, t in stack.layers:
        cos_j = _cos_in(n, n0_sin)
        eta_j = _admittance(n, cos_j, polarization)
        delta = 2.0 * np.pi * n * t * cos_j / wavelength
        c, s = np.cos(delta), np.sin(delta)
        B, C = c * B - 1j * s / eta_j * C, -1j * eta_j * s * B + c * C

    denom = eta0 * B + C
    r = (eta0 * B - C) / denom
    T = 4.0 * eta0 * eta_sub / np.abs(denom) ** 2
    return r, T


def stack_response(
    stack: LayerStack, wavelength: float, angle: float = 0.0, polarization: str | None = None
) -> PolarizedResponse:
    """Complex amplitude reflectivity and power transmission of ``stack``.

    Both polarizations are always computed; ``polarization`` is accepted for
    interface symmetry and validated only.
    """
    if polarization not in (None, "s", "p"):
        raise ValueError(f"polarization must be 's' or 'p', got {polarization!r}")
    if wavelength <= 0:
        raise ValueError(f"wavelength must be positive, got {wavelength}")
    r_s, T_s = _amplitudes(stack, wavelength, angle, "s")
    r_p, T_p = _amplitudes(stack, wavelength, angle, "p")
    return PolarizedResponse(
        complex(r_s), complex(r_p), float(T_s), float(T_p), float(wavelength), float(angle)
    )


def reflectivity(stack: LayerStack, wavelength, angle=0.0, polarization="s"):
    """Vectorized complex reflectivity; broadcasts ``wavelength`` and ``angle``."""
    return _amplitudes(stack, wavelength, angle, polarization)[0]


def transmission(stack: LayerStack, wavelength, angle=0.0, polarization="s"):
    """Vectorized power transmission."""
    return _amplitudes(stack, wavelength, angle, polarization)[1]


def field_factor_above_mirror(stack, wavelength, z0, angle=0.0, polarization="s", r=None):
    """Standing-wave intensity a height ``z0`` (nm) above the stack.

    Normalized to the incident intensity, so the result lies in ``[0, 4]``.
    A precomputed reflectivity may be passed as ``r`` (e.g. ``r=1`` for an
    ideal mirror); otherwise it is obtained from ``stack``.
    """
    z0 = np.asarray(z0, dtype=float)
    if np.any(z0 < 0):
        raise ValueError("z0 must be >= 0")
    if r is None:
        r = reflectivity(stack, wavelength, angle, polarization)
    n0 = 1.0 if stack is None else stack.ambient_index
    k = 2.0 * np.pi * n0 / np.asarray(wavelength, dtype=float)
    phase = 2.0 * k * np.cos(angle) * z0 + np.angle(r)
    return np.abs(1.0 + np.abs(r) * np.exp(1j * phase)) ** 2


def mirror_optical_thickness(stack: LayerStack, wavelength: float, rel_step: float = 1e-5) -> float:
    """Frequency penetration length of the stack (nm), from ``d arg(r) / d k``.

    A mirror whose reflection phase varies with frequency behaves, for the
    cavity resonance spacing, like an ideal mirror displaced by
    ``0.5 * d(arg r)/d k0`` behind the physical surface.
    """
    k0 = 2.0 * np.pi / wavelength
    h = rel_step * k0
    r_hi = reflectivity(stack, 2.0 * np.pi / (k0 + h))
    r_lo = reflectivity(stack, 2.0 * np.pi / (k0 - h))
    dphi = np.angle(r_hi / r_lo)
    return float(0.5 * dphi / (2.0 * h))


def stack_optical_path(stack: LayerStack) -> float:
    """Sum of ``n * t`` over all layers (nm)."""
    return float(np.sum(stack.indices * stack.thicknesses)) if stack.layers else 0.0


def quarter_wave_stack(
    n_high: float,
    n_low: float,
    pairs: int,
    design_wavelength: float,
    substrate_index: float = 1.45,
    ambient_index: float = 1.0,
    top: str = "H",
) -> LayerStack:
    """Quarter-wave Bragg mirror ``sub | (L H) x pairs | ambient``.

    With ``top='H'`` the high-index layer faces the ambient; ``top='L'``
    swaps the roles of the two materials.
    """
    qh = design_wavelength / (4.0 * n_high)
    ql = design_wavelength / (4.0 * n_low)
    first, second = ((n_low, ql), (n_high, qh)) if top == "H" else ((n_high, qh), (n_low, ql))
    layers = [first, second] * pairs
    return LayerStack(ambient_index, tuple(layers), substrate_index)


def quarter_wave_transmission(n_high, n_low, pairs, substrate_index=1.45, ambient_index=1.0):
    """Closed-form transmission of :func:`quarter_wave_stack` (``top='H'``) at design.

    Each quarter-wave layer of index n inverts the load admittance, Y -> n**2/Y,
    so ``pairs`` (L H) pairs turn ``n_s`` into ``n_s * (n_H/n_L)**(2 pairs)``.
    """
    Y = substrate_index * (n_high / n_low) ** (2 * pairs)
    return 4.0 * ambient_index * Y / (ambient_index + Y) ** 2


def quarter_wave_penetration(n_high, n_low, design_wavelength, ambient_index=1.0):
    """Frequency penetration length of a semi-infinite quarter-wave mirror.

    High-index layer facing the ambient; valid in the high-reflectivity limit:
    ``L = lambda * n_0 / (4 * (n_H - n_L))`` measured as optical path in the
    ambient.  See :func:`mirror_optical_thickness` for the numeric counterpart.
    """
    return design_wavelength * ambient_index / (4.0 * (n_high - n_low))


def sweep(
    stack: LayerStack,
    wavelengths: Sequence[float],
    angles: Sequence[float] = (0.0,),
    polarizations: Sequence[str] = ("s", "p"),
):
    """Rows ``(wavelength_nm, angle_rad, pol, re_r, im_r, T)`` over a grid."""
    rows = []
    wl = np.asarray(wavelengths, dtype=float)
    if wl.size == 0:
        return rows
    for angle in angles:
        for pol in polarizations:
            r, T = _amplitudes(stack, wl, angle, pol)
            for w, rr, tt in zip(wl, np.atleast_1d(r), np.atleast_1d(T)):
                rows.append((float(w), float(angle), pol, float(rr.real), float(rr.imag), float(tt)))
    rows.sort(key=lambda row: (row[0], row[1], row[2]))
    return rows
