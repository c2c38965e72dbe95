"""Simulation configs from TOML and seeded synthetic stand-ins for measured data."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import mcsim
from .errors import SchemaError
from .fit import G2Dataset, lorentzian
from .io import DATA_DIR, load_config, require
from .photophysics import (
    ConstantDeshelvingModel,
    RateModel,
    equilibrium_population,
    g2_params,
    saturation_model,
    saturation_power,
)

__all__ = [
    "model_from_mapping",
    "sim_config_from_mapping",
    "load_sim_config",
    "load_synthetic_spec",
    "lifetime_histogram",
    "spectrum",
    "saturation_series",
    "G2Trace",
    "g2_ensemble",
]

SIM_DIR = DATA_DIR / "sim"


def model_from_mapping(m: dict, where="model"):
    """Rate model from a config table.

    Either ``k21`` (MHz) or ``tau1_0_ns`` and either ``k31`` (MHz) or
    ``tau2_0_ns`` must be given; slopes are in MHz/mW.
    """
    kind = m.get("type", "rate")
    if kind == "constant_deshelving":
        return ConstantDeshelvingModel(
            require(m, "sigma", float, where), require(m, "k23", float, where),
            require(m, "k21", float, where), require(m, "k31", float, where),
            require(m, "k32", float, where),
        )
    if kind != "rate":
        raise SchemaError(f"{where}: unknown model type {kind!r}")
    k23_0 = require(m, "k23_0", float, where)
    if "k21" in m:
        k21 = require(m, "k21", float, where)
    else:
        k21 = 1e3 / require(m, "tau1_0_ns", float, where) - k23_0
    k31 = require(m, "k31", float, where) if "k31" in m else 1e3 / require(m, "tau2_0_ns", float, where)
    qe = float(m.get("qe", 1.0))
    return RateModel(require(m, "sigma", float, where), float(m.get("d", 0.0)), float(m.get("e", 0.0)),
                     k23_0, k21, k31, gamma_r=qe * k21)


def sim_config_from_mapping(cfg: dict, seed: int | None = None) -> mcsim.SimConfig:
    model = model_from_mapping(require(cfg, "model", dict, "sim config"))
    ex = require(cfg, "excitation", dict, "sim config")
    kind = ex.get("kind", "cw")
    power = require(ex, "power_mW", float, "excitation")
    if kind == "cw":
        excitation = mcsim.CW(power)
    elif kind == "pulsed":
        excitation = mcsim.Pulsed(power, float(ex.get("rep_rate_MHz", 20.0)), float(ex.get("pulse_width_ps", 50.0)))
    else:
        raise SchemaError(f"excitation: kind must be 'cw' or 'pulsed', got {kind!r}")
    acq = require(cfg, "acquisition", dict, "sim config")
    blink = cfg.get("blinking")
    blinking = None
    if blink is not None:
        blinking = mcsim.Blinking(require(blink, "on_rate_Hz", float, "blinking"),
                                  require(blink, "off_rate_Hz", float, "blinking"))
    return mcsim.SimConfig(
        model=model,
        excitation=excitation,
        duration=require(acq, "duration_s", float, "acquisition"),
        efficiency=float(acq.get("efficiency", 1.0)),
        irf_sigma=float(acq.get("irf_sigma_ns", 0.0)),
        dark_rate=float(acq.get("dark_rate_cps", 0.0)),
        background_rate=float(acq.get("background_rate_cps", 0.0)),
        background_lifetime=float(acq.get("background_lifetime_ns", 0.0)),
        blinking=blinking,
        split=float(acq.get("split", 0.5)),
        dead_time=float(acq.get("dead_time_ns", 0.0)),
        start_state=str(acq.get("start_state", "steady")),
        seed=int(seed if seed is not None else cfg.get("seed", 0)),
    )


def load_sim_config(path, seed: int | None = None) -> tuple[mcsim.SimConfig, dict]:
    """``(SimConfig, output options)`` from a simulation TOML file."""
    path = Path(path)
    if not path.exists() and (SIM_DIR / path.name).exists():
        path = SIM_DIR / path.name
    cfg = load_config(path)
    return sim_config_from_mapping(cfg, seed), dict(cfg.get("output", {}))


def load_synthetic_spec(path=None) -> dict:
    return load_config(path or DATA_DIR / "synthetic.toml")


# --------------------------------------------------------------------------
# generators


def lifetime_histogram(tau: float, irf_sigma: float, counts: float, seed: int,
                       bins: int = 400, width: float = 0.05, start: float = -2.0, background: float = 0.0):
    """TCSPC histogram of a pulsed emitter with zero-power lifetime ``tau`` (ns).

    The emitter is driven hard enough that most pulses excite it; the
    acquisition time is chosen to collect about ``counts`` detections.
    """
    model = RateModel(sigma=1000.0, d=0.0, e=0.0, k23_0=0.0, k21=1e3 / tau, k31=1e3 / 150.0)
    pulsed = mcsim.Pulsed(power=20.0, rep_rate=20.0, pulse_width=50.0)
    p_exc = 1.0 - math.exp(-model.sigma * pulsed.power * 1e-3 * pulsed.pulse_width * 1e-3)
    duration = counts / (p_exc * pulsed.rep_rate * 1e6)
    rate_bg = background * counts / duration if background > 0 else 0.0
    cfg = mcsim.SimConfig(model, pulsed, duration, irf_sigma=irf_sigma, background_rate=rate_bg,
                          background_lifetime=0.0, seed=seed)
    stream = mcsim.simulate(cfg)
    edges, hist = mcsim.tcspc_histogram(stream, bins=bins, width=width, start=start)
    return edges, hist, cfg


def spectrum(center: float, fwhm: float, seed: int, peak: float = 2000.0, background: float = 50.0,
             lo: float | None = None, hi: float | None = None, step: float = 0.05):
    """Poisson-sampled Lorentzian line on a flat background."""
    lo = center - 15 * fwhm if lo is None else lo
    hi = center + 15 * fwhm if hi is None else hi
    wl = np.arange(lo, hi + step / 2, step)
    rng = np.random.default_rng(seed)
    return wl, rng.poisson(lorentzian(wl, peak, center, fwhm, background)).astype(float)


def saturation_series(I_inf: float, P_sat: float, a_bg: float, seed: int, powers=None, rel_noise: float = 0.03):
    """Count rates (MHz) following the saturation law with relative Gaussian noise."""
    P = np.geomspace(0.1, 10.0, 12) * P_sat if powers is None else np.asarray(powers, dtype=float)
    truth = saturation_model(P, I_inf, P_sat, a_bg)
    err = rel_noise * truth
    rng = np.random.default_rng(seed)
    return P, truth + rng.normal(0.0, err), err


@dataclass
class G2Trace:
    dataset: G2Dataset
    photons: int
    p_sat: float
    fraction: float


def g2_ensemble(models: dict, fractions, photons: float, seed: int, n_blocks: int = 100,
                max_lag_cap: float = 800.0) -> list[G2Trace]:
    """cw HBT traces at powers ``fraction * P_sat`` for each environment.

    Bin widths follow the antibunching time and the lag window covers about
    ten bunching times, so the traces constrain both time constants.
    """
    out = []
    ss = np.random.SeedSequence(seed)
    envs = sorted(models)
    children = ss.spawn(len(envs) * len(fractions))
    k = 0
    for env in envs:
        model = models[env]
        p_sat = saturation_power(model)
        for f in fractions:
            P = f * p_sat
            gp = g2_params(model, P)
            n2 = equilibrium_population(model, P)
            duration = photons / (n2 * model.gamma_r * 1e6)
            child_seed = int(children[k].generate_state(1)[0])
            k += 1
            stream = mcsim.simulate(mcsim.SimConfig(model, mcsim.CW(P), duration, seed=child_seed))
            bw = round(max(gp.tau1 / 2.0, 0.02), 3)
            lag = min(max_lag_cap, 10.0 * gp.tau2)
            est = mcsim.hbt_correlate(stream, bin_width=bw, max_lag=lag, n_blocks=n_blocks)
            ds = G2Dataset(P, env, est.centers, est.g2, est.err, bin_width=bw, replicates=est.replicates)
            out.append(G2Trace(ds, int(stream.times.size), p_sat, f))
    return out
