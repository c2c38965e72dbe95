"""Per-emitter design tables built from cavity, coating and emitter configs."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import cavity as cv
from .dipole import DipoleGeometry, collection_efficiency
from .errors import SchemaError
from .io import DATA_DIR, load_config, load_stack, require
from .photophysics import (
    DetectionChain,
    EmitterSpec,
    emission_rate_cavity,
    emission_rate_free_space,
    purcell_experimental,
    qe_from_lifetime_change,
    qe_in_cavity,
)
from .tmm import LayerStack

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class CavitySetup:
    """Everything needed to evaluate the cavity at an arbitrary emitter line."""

    config: cv.CavityConfig
    fiber: LayerStack
    planar: LayerStack
    absorption: float  # ppm
    detection: dict = field(default_factory=dict)
    dipole: dict = field(default_factory=dict)
    source: dict = field(default_factory=dict, compare=False)

    def losses_at(self, wavelength: float, extinction: float | None = None) -> cv.LossBudget:
        base = cv.losses_from_stacks(self.fiber, self.planar, wavelength, self.absorption)
        if extinction is None:
            return base
        return base.with_extinction(cv.extinction_to_loss(extinction, base))

    def mode_at(self, wavelength: float, extinction: float | None = None) -> cv.CavityMode:
        """Cavity tuned to order q at ``wavelength`` (length follows the line)."""
        cfg = self.config
        d_eff = cfg.q * wavelength / 2.0
        losses = self.losses_at(wavelength, extinction)
        w0 = cfg.w0_override if cfg.w0_override is not None else cv.gaussian_waist(cfg.roc, d_eff, wavelength)
        F = cv.finesse(losses)
        Q = cv.quality_factor(cfg.q, F)
        kappa, fwhm = cv.linewidth(Q, wavelength)
        V = cv.mode_volume(w0, d_eff, wavelength)
        return cv.CavityMode(w0, cfg.w_f, V, F, Q, kappa, fwhm, d_eff, wavelength)

    def collection(self) -> float:
        value = self.detection.get("eta_coll", "auto")
        if value != "auto":
            return float(value)
        d = self.dipole
        geom = DipoleGeometry(
            theta=float(d.get("theta_rad", math.pi / 2)),
            z0=float(d.get("z0_nm", float(d.get("crystal_nm", 100.0)) / 2.0)),
            na=float(self.detection.get("na", 0.55)),
            wavelength=float(d.get("wavelength_nm", 754.0)),
        )
        return collection_efficiency(geom, self.planar)

    def epsilon(self) -> float:
        value = self.detection.get("epsilon", "auto")
        return self.config.mode_matching() if value == "auto" else float(value)

    def chain(self, eta_c: float = 1.0) -> DetectionChain:
        det = self.detection
        return DetectionChain(
            eta_det=float(det.get("eta_det", 1.0)),
            eta_trans=float(det.get("eta_trans", 1.0)),
            eta_obj=float(det.get("eta_obj", 1.0)),
            eta_coll=self.collection(),
            eta_fiber=float(det.get("eta_fiber", 1.0)),
            eta_c=eta_c,
            epsilon=self.epsilon(),
        )


def _resolve(base: Path, name: str) -> Path:
    p = Path(name)
    if not p.is_absolute():
        p = base / p
        if not p.exists():
            p = DATA_DIR / name
    if not p.exists():
        raise FileNotFoundError(f"stack file {name!r} not found")
    return p


def load_setup(path=None) -> CavitySetup:
    """Read a cavity config (default: the bundled reference cavity)."""
    path = Path(path) if path is not None else DATA_DIR / "cavity.toml"
    raw = load_config(path)
    if int(raw.get("schema", SCHEMA_VERSION)) != SCHEMA_VERSION:
        raise SchemaError(f"{path}: unsupported schema version {raw.get('schema')}")
    if "cavity" not in raw:
        raise SchemaError(f"{path}: missing [cavity] table")
    c = raw["cavity"]
    where = f"{path} [cavity]"
    fiber = load_stack(_resolve(path.parent, require(c, "fiber_stack", str, where)))
    planar = load_stack(_resolve(path.parent, require(c, "planar_stack", str, where)))
    A = float(c.get("absorption_ppm", 0.0))
    kw = dict(
        w_f=float(c.get("w_f_um", 2.5)),
        s_policy=str(c.get("s_policy", "stack")),
    )
    if "w0_override_um" in c:
        kw["w0_override"] = float(c["w0_override_um"])
    if "s_um" in c:
        kw["s_um"] = float(c["s_um"])
    if "length_tolerance" in c:
        kw["length_tolerance"] = float(c["length_tolerance"])
    d_geo = c.get("d_geo_nm", "auto")
    if d_geo != "auto":
        kw["d_geo"] = float(d_geo)
    config = cv.CavityConfig.from_stacks(
        fiber,
        planar,
        roc=require(c, "roc_um", float, where),
        q=require(c, "q", int, where),
        wavelength=require(c, "wavelength_nm", float, where),
        A=A,
        **kw,
    )
    return CavitySetup(config, fiber, planar, A, dict(raw.get("detection", {})),
                       dict(raw.get("dipole", {})), source={"path": str(path), "raw": raw})


def load_emitters(path=None) -> list[EmitterSpec]:
    path = Path(path) if path is not None else DATA_DIR / "emitters.toml"
    raw = load_config(path)
    entries = raw.get("emitter")
    if not entries:
        raise SchemaError(f"{path}: no [[emitter]] entries")
    out = []
    for i, e in enumerate(entries):
        where = f"{path} emitter #{i + 1}"
        ident = require(e, "id", str, where)
        known = {"id", "wavelength_nm", "fwhm_nm", "zeta", "qe", "theta_rad"}
        try:
            out.append(
                EmitterSpec(
                    id=ident,
                    wavelength=require(e, "wavelength_nm", float, where),
                    fwhm=require(e, "fwhm_nm", float, where),
                    zeta=float(e.get("zeta", 0.8)),
                    qe=float(e["qe"]) if "qe" in e else None,
                    dipole_theta=float(e.get("theta_rad", math.pi / 2)),
                    meta={k: v for k, v in e.items() if k not in known},
                )
            )
        except ValueError as exc:
            raise SchemaError(f"{where}: {exc}") from None
    return out


# --------------------------------------------------------------------------
# tables

DESIGN_COLUMNS = [
    "id", "wavelength_nm", "Q_em", "finesse", "Q_c", "Q_eff", "V_m_lambda3", "C_eff",
    "beta", "L_ppm", "eta_c", "epsilon", "C_exp", "beta_exp", "beta_tot_per_qe",
    "kappa_GHz", "spectral_density",
]


def design_row(setup: CavitySetup, em: EmitterSpec, eta_E: float = 1.0) -> dict:
    ext = em.meta.get("extinction")
    mode = setup.mode_at(em.wavelength, ext)
    losses = setup.losses_at(em.wavelength, ext)
    Q_eff = cv.effective_q(mode.Q_c, em.Q_em)
    C = cv.purcell_effective(mode.Q_c, em.Q_em, mode.V_m, em.zeta, eta_E, setup.config.n)
    eta_c_model = cv.outcoupling(losses)
    eta_c = float(em.meta.get("eta_c", eta_c_model))
    eps = setup.epsilon()
    row = dict(
        id=em.id, wavelength_nm=em.wavelength, Q_em=em.Q_em, finesse=mode.F, Q_c=mode.Q_c,
        Q_eff=Q_eff, V_m_lambda3=mode.V_m, C_eff=C, beta=cv.beta(C), L_ppm=losses.L,
        eta_c=eta_c_model, epsilon=eps, C_exp=math.nan, beta_exp=math.nan,
        beta_tot_per_qe=math.nan, kappa_GHz=mode.kappa, spectral_density=math.nan,
    )
    rates = emission_rates(setup, em)
    if rates is not None:
        C_exp = rates["C_exp"]
        row.update(C_exp=C_exp, beta_exp=cv.beta(C_exp),
                   beta_tot_per_qe=cv.beta(C_exp) * eta_c * eps)
    if "I_m_c_MHz" in em.meta:
        row["spectral_density"] = cv.spectral_density(em.meta["I_m_c_MHz"] * 1e6, mode.kappa)
    return row


def design_table(setup: CavitySetup, emitters) -> list[dict]:
    return [design_row(setup, em) for em in emitters]


def emission_rates(setup: CavitySetup, em: EmitterSpec) -> dict | None:
    """Emission rates (MHz) from saturated count rates, or None if not measured."""
    m = em.meta
    if "I_m_fs_MHz" not in m or "I_m_c_MHz" not in m:
        return None
    eta_c = float(m["eta_c"]) if "eta_c" in m else cv.outcoupling(setup.losses_at(em.wavelength, m.get("extinction")))
    chain = setup.chain(eta_c)
    I_fs = emission_rate_free_space(m["I_m_fs_MHz"], chain)
    I_c = emission_rate_cavity(m["I_m_c_MHz"], chain)
    return dict(I_fs=I_fs, I_c=I_c, C_exp=purcell_experimental(I_c, I_fs), eta_c=eta_c)


def table_rows(setup: CavitySetup, emitters, lifetimes: dict | None = None):
    """Rows for the four summary tables as ``{name: (header, rows)}``.

    ``lifetimes`` maps emitter id to ``(tau0, tauc, tauc2)`` with optional
    spreads; when absent the configured lifetimes are used.
    """
    tables = {}
    rows_I = []
    for em in emitters:
        vals = (lifetimes or {}).get(em.id)
        if vals is None and "tau0_ns" in em.meta:
            vals = (em.meta["tau0_ns"], em.meta["tauc_ns"], em.meta.get("tauc2_ns", math.nan))
        if vals is None:
            continue
        tau0, tauc = vals[0], vals[1]
        tauc2 = vals[2] if len(vals) > 2 else math.nan
        rows_I.append((em.id, tau0, tauc, tauc2, tau0 / tauc))
    tables["table_I"] = (["id", "tau0_ns", "tauc_ns", "tauc2_ns", "ratio"], rows_I)

    rows_II, rows_IV = [], []
    for em in emitters:
        r = emission_rates(setup, em)
        if r is None:
            continue
        row = design_row(setup, em)
        rows_II.append((em.id, em.meta["I_m_fs_MHz"], em.meta["I_m_c_MHz"], r["I_fs"], r["I_c"],
                        row["C_eff"], r["C_exp"]))
        ext = em.meta.get("extinction", math.nan)
        b = cv.beta(r["C_exp"])
        rows_IV.append((em.id, ext, r["eta_c"], row["eta_c"], r["C_exp"], b, b * r["eta_c"]))
    tables["table_II"] = (["id", "I_m_fs_MHz", "I_m_c_MHz", "I_fs_MHz", "I_c_MHz", "C_th", "C_exp"], rows_II)

    rows_III = [(em.id, em.wavelength, em.fwhm, em.Q_em, design_row(setup, em)["C_eff"],
                 em.meta.get("g2_zero", math.nan)) for em in emitters]
    tables["table_III"] = (["id", "wavelength_nm", "fwhm_nm", "Q_em", "C_eff", "g2_zero"], rows_III)
    tables["table_IV"] = (["id", "T_over_T0", "eta_c", "eta_c_model", "C_exp", "beta", "beta_eta_c"], rows_IV)
    return tables


def qe_summary(setup: CavitySetup, emitters) -> list[tuple]:
    """Quantum efficiency from the lifetime change, using the measured Purcell factor."""
    out = []
    for em in emitters:
        r = emission_rates(setup, em)
        if r is None or "tau0_ns" not in em.meta:
            continue
        est = qe_from_lifetime_change(em.meta["tau0_ns"], em.meta["tauc_ns"], r["C_exp"])
        qe_c = qe_in_cavity(r["C_exp"], est.qe) if 0 < est.qe <= 1 else math.nan
        out.append((em.id, em.meta["tau0_ns"] / em.meta["tauc_ns"], r["C_exp"], est.qe, est.consistent, qe_c))
    return out


def as_rows(dicts, columns=DESIGN_COLUMNS):
    return [tuple(d[c] for c in columns) for d in dicts]


def finesse_curve(setup: CavitySetup, wavelengths):
    wl = np.asarray(wavelengths, dtype=float)
    T_f, T_p = cv.losses_from_stacks(setup.fiber, setup.planar, wl)
    F = 2.0 * np.pi / ((T_f + T_p + setup.absorption) * cv.PPM)
    return T_f, T_p, F
