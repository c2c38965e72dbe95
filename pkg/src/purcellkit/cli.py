"""Command-line front end: design, simulate, analyze and report.

Every command writes into an output directory (``--out``, default
``$PURCELLKIT_WORKSPACE/out``).  Each output file carries the digest of the
run manifest, which records the command, its parameters, the digests of all
input files and the seed; identical manifests give byte-identical outputs.

Exit codes: 0 success, 2 usage, 3 parse error, 4 schema error, 5 fit or
convergence failure, 6 missing input, 7 invalid physical input.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import cavity as cv
from . import design as ds
from . import dipole as dp
from . import fit, mcsim, plotting, synthetic
from . import tmm
from .errors import ConvergenceError, ParseError, PurcellKitError, SchemaError
from .io import DATA_DIR, digest, file_digest, load_config, load_stack, read_csv, write_csv, write_json
from .photophysics import (
    ConstantDeshelvingModel,
    g2_params,
    qe_from_lifetime_change,
    saturation_model,
)

EXIT_OK, EXIT_USAGE, EXIT_PARSE, EXIT_SCHEMA, EXIT_CONVERGENCE, EXIT_MISSING, EXIT_INPUT = 0, 2, 3, 4, 5, 6, 7
ENV_WORKSPACE = "PURCELLKIT_WORKSPACE"
ENVIRONMENTS = ("free_space", "cavity")


class MissingInputError(PurcellKitError, FileNotFoundError):
    """A required input or upstream result is absent."""


# --------------------------------------------------------------------------
# run bookkeeping


class Run:
    """Output directory, manifest digest and the list of files written."""

    def __init__(self, args, command: str, params: dict, inputs=()):
        self.out = Path(args.out)
        self.fmt = args.format
        self.quiet = args.quiet
        self.command = command
        input_digests = {}
        for p in inputs:
            p = Path(p)
            if not p.exists():
                raise MissingInputError(f"input file not found: {p}")
            input_digests[p.name] = file_digest(p)
        self.record = {
            "command": command,
            "params": params,
            "inputs": input_digests,
            "version": __version__,
            "numpy": np.__version__,
        }
        self.manifest = digest(self.record)
        self.written = []

    def path(self, name) -> Path:
        p = self.out / name
        p.parent.mkdir(parents=True, exist_ok=True)
        self.written.append(p)
        return p

    def csv(self, name, header, rows, comments=()):
        return write_csv(self.path(name), header, rows, manifest=self.manifest, comments=comments)

    def json(self, name, obj):
        return write_json(self.path(name), {"manifest": self.manifest, **obj})

    def text(self, name, body: str):
        p = self.path(name)
        p.write_text(f"# manifest: {self.manifest}\n{body}")
        return p

    def svg(self, name, func, *a, **kw):
        if self.fmt != "svg":
            return None
        return func(self.path(name), *a, manifest=self.manifest, **kw)

    def say(self, msg=""):
        if not self.quiet:
            print(msg)

    def finish(self):
        files = {str(p.relative_to(self.out)): file_digest(p) for p in self.written if p.exists()}
        write_json(self.out / f"manifest_{self.command}.json",
                   {"manifest": self.manifest, **self.record, "outputs": files})
        self.say(f"manifest {self.manifest}: {len(files)} file(s) in {self.out}")
        return EXIT_OK


def _workspace() -> Path:
    return Path(os.environ.get(ENV_WORKSPACE, "."))


def _default(name: str) -> Path:
    """Workspace copy of a config if present, else the bundled one."""
    p = _workspace() / name
    return p if p.exists() else DATA_DIR / name


def _config_inputs(setup: ds.CavitySetup):
    src = Path(setup.source["path"])
    c = setup.source["raw"]["cavity"]
    return [src, ds._resolve(src.parent, c["fiber_stack"]), ds._resolve(src.parent, c["planar_stack"])]


def _csv_meta(path) -> dict:
    """``# key: value`` comment lines of a CSV file."""
    meta = {}
    with open(path) as fh:
        for line in fh:
            if not line.startswith("#"):
                break
            if ":" in line:
                k, v = line[1:].split(":", 1)
                meta[k.strip()] = v.strip()
    return meta


# --------------------------------------------------------------------------
# tmm


def cmd_tmm(args):
    if not 0 < args.range[0] < args.range[1]:
        raise ValueError(f"--range needs 0 < LO < HI, got {args.range[0]:g} {args.range[1]:g}")
    if args.points < 0:
        raise ValueError("--points must be >= 0")
    wl = np.linspace(args.range[0], args.range[1], args.points) if args.points > 0 else np.empty(0)
    if args.stacks:
        stacks = [(Path(p).stem, load_stack(p)) for p in args.stacks]
        inputs = list(args.stacks)
        setup = None
    else:
        setup = ds.load_setup(args.config)
        stacks = [("fiber", setup.fiber), ("planar", setup.planar)]
        inputs = _config_inputs(setup)
    run = Run(args, "tmm", {"range": list(args.range), "points": args.points, "angle_deg": args.angle,
                            "stacks": [n for n, _ in stacks], "format": args.format}, inputs)
    angle = math.radians(args.angle)
    series = {}
    header = ["wavelength_nm"]
    cols = [wl]
    for name, st in stacks:
        T = np.array([np.mean([tmm.transmission(st, w, angle, pol) for pol in ("s", "p")]) for w in wl])
        r = tmm.reflectivity(st, wl, angle, "s") if wl.size else np.empty(0, dtype=complex)
        header += [f"T_{name}_ppm", f"phase_{name}_rad"]
        cols += [T * 1e6, np.angle(r)]
        series[name] = T * 1e6
    if setup is not None:
        T_f, T_p, F = ds.finesse_curve(setup, wl) if wl.size else (np.empty(0),) * 3
        header.append("finesse")
        cols.append(F)
    rows = list(zip(*cols)) if wl.size else []
    run.csv("tmm.csv", header, rows, comments=[f"angle_deg: {args.angle}"])
    if wl.size:
        run.svg("tmm_transmission.svg", plotting.line_plot, wl, series, "wavelength (nm)", "transmission (ppm)",
                logy=True)
        if setup is not None:
            run.svg("tmm_finesse.svg", plotting.line_plot, wl, {"finesse": F}, "wavelength (nm)", "finesse")
    run.say(f"{len(rows)} wavelength points, stacks: {', '.join(n for n, _ in stacks)}")
    return run.finish()


# --------------------------------------------------------------------------
# design


def cmd_design(args):
    setup = ds.load_setup(args.config)
    emitters_path = Path(args.emitters) if args.emitters else _default("emitters.toml")
    emitters = ds.load_emitters(emitters_path)
    run = Run(args, "design", {"format": args.format}, _config_inputs(setup) + [emitters_path])
    cfg = setup.config
    mode = cfg.mode()
    summary = {
        "d_geo_nm": cfg.d_geo, "d_eff_nm": cfg.d_eff, "finesse": mode.F, "Q_c": mode.Q_c,
        "kappa_GHz": mode.kappa, "fwhm_pm": mode.fwhm, "w0_um": mode.w0, "V_m_lambda3": mode.V_m,
        "C0": cfg.purcell_ideal(), "mode_matching": cfg.mode_matching(), "eta_c": cfg.outcoupling(),
        "T_fiber_ppm": cfg.losses.T_f, "T_planar_ppm": cfg.losses.T_p, "absorption_ppm": cfg.losses.A,
    }
    run.csv("cavity_summary.csv", ["quantity", "value"], sorted(summary.items()))
    rows = ds.design_table(setup, emitters)
    run.csv("design.csv", ds.DESIGN_COLUMNS, ds.as_rows(rows))
    qe_rows = ds.qe_summary(setup, emitters)
    run.csv("qe.csv", ["id", "tau_ratio", "C_exp", "QE", "QE_consistent", "QE_c"], qe_rows)
    wls = np.arange(700.0, 800.0 + 0.25, 0.5)
    crystal = float(setup.dipole.get("crystal_nm", 100.0))
    curve = dp.position_factor_curve(setup.planar, wls, crystal)
    run.csv("position_factor.csv", ["wavelength_nm", "factor", "factor_min", "factor_max"], curve,
            comments=[f"crystal_nm: {crystal}"])
    arr = np.array(curve)
    run.svg("position_factor.svg", plotting.line_plot, arr[:, 0],
            {"mid-crystal": arr[:, 1], "minimum": arr[:, 2], "maximum": arr[:, 3]},
            "wavelength (nm)", "Purcell correction")
    run.svg("design_purcell.svg", plotting.bar_plot, [r["id"] for r in rows],
            {"C_eff": [r["C_eff"] for r in rows], "C_exp": [r["C_exp"] for r in rows]}, "Purcell factor")
    for r in rows:
        run.say(f"{r['id']}: Q_em={r['Q_em']:.0f} Q_c={r['Q_c']:.0f} C_eff={r['C_eff']:.2f} "
                f"beta={r['beta']:.3f} C_exp={r['C_exp']:.2f}")
    return run.finish()


# --------------------------------------------------------------------------
# simulate


def cmd_simulate(args):
    config, output = synthetic.load_sim_config(args.sim_config, args.seed)
    src = Path(args.sim_config)
    src = src if src.exists() else synthetic.SIM_DIR / src.name
    run = Run(args, "simulate", {"config": config.describe(), "output": output,
                                 "timestamps": args.timestamps, "format": args.format}, [src])
    stream = mcsim.simulate(config)
    stem = src.stem
    ext = "csv" if args.timestamps == "csv" else "pkts"
    mcsim.write_timestamps(run.path(f"{stem}_timestamps.{ext}"), stream, args.timestamps, run.manifest)
    summary = {"photons": int(stream.times.size), "config_digest": stream.meta["config_digest"],
               "seed": config.seed, **{k: stream.meta[k] for k in ("pulses", "excitations", "decays_21", "events",
                                                                    "emitter_detections", "occupancy")}}
    if "trace_bin_s" in output:
        t, c = mcsim.intensity_trace(stream, float(output["trace_bin_s"]))
        run.csv(f"{stem}_trace.csv", ["t_s", "counts"], zip(t, c))
        run.svg(f"{stem}_trace.svg", plotting.line_plot, t, {"counts": c}, "time (s)",
                f"counts per {output['trace_bin_s']} s")
    if "tcspc_bin_ns" in output:
        edges, counts = mcsim.tcspc_histogram(stream, int(output.get("tcspc_bins", 400)),
                                              float(output["tcspc_bin_ns"]), float(output.get("tcspc_start_ns", -2.0)))
        centers = 0.5 * (edges[:-1] + edges[1:])
        run.csv(f"{stem}_tcspc.csv", ["t_ns", "counts"], zip(centers, counts))
        run.svg(f"{stem}_tcspc.svg", plotting.line_plot, centers, {"counts": np.maximum(counts, 0.5)},
                "delay (ns)", "counts", logy=True)
    if "g2_bin_ns" in output:
        est = mcsim.hbt_correlate(stream, float(output["g2_bin_ns"]), float(output.get("g2_max_lag_ns", 200.0)))
        run.csv(f"{stem}_g2.csv", ["tau_ns", "g2", "err"], zip(est.centers, est.g2, est.err),
                comments=[f"bin_ns: {output['g2_bin_ns']}"])
        run.svg(f"{stem}_g2.svg", plotting.line_plot, est.centers, {"g2": est.g2}, "delay (ns)", "g2")
    run.json(f"{stem}_summary.json", summary)
    run.say(f"{summary['photons']} detections in {config.duration} s (seed {config.seed})")
    return run.finish()


# --------------------------------------------------------------------------
# analyze


def _label(args, path):
    meta = _csv_meta(path)
    emitter = args.emitter or meta.get("emitter")
    env = args.env or meta.get("environment")
    label = "_".join(x for x in (emitter, env) if x) or Path(path).stem
    return label, emitter, env


def _analyze_lifetime(args, run, path, label, emitter, env):
    data = read_csv(path, required=("t_ns", "counts"))
    t, counts = data["t_ns"], data["counts"]
    if t.size < 2:
        raise SchemaError(f"{path}: need at least two histogram bins")
    w = float(np.median(np.diff(t)))
    edges = np.append(t - w / 2, t[-1] + w / 2)
    proto = fit.LifetimeProtocol(components=args.components, irf_sigma=args.irf)
    lf = fit.fit_lifetime(edges, counts, proto)
    body = [f"tau_ns: {lf.tau:.6g}", f"spread_ns: {lf.spread:.3g}"]
    for win, res in lf.results.items():
        body += [f"[{win}] tau_ns = {lf.per_window[win]:.6g}", res.as_text()]
    for win, msg in lf.failures.items():
        body.append(f"[{win}] failed: {msg}")
    run.text(f"analysis/lifetime_{label}.txt", "\n".join(body) + "\n")
    run.json(f"analysis/lifetime_{label}.json", {"kind": "lifetime", "emitter": emitter, "environment": env,
                                                 "tau_ns": lf.tau, "spread_ns": lf.spread, "per_window": lf.per_window,
                                                 "failures": lf.failures, "irf_sigma_ns": args.irf})
    res = lf.results.get("full_trace") or next(iter(lf.results.values()))
    if "t0" in res.names:
        p = res.params
        amps = [p["A"]] + ([p["A2"]] if "A2" in p else [])
        taus = [p["tau"]] + ([p["tau_b"]] if "tau_b" in p else [])
        model = fit.lifetime_model(edges, p["t0"], args.irf, amps, taus, p.get("bg", 0.0))
        resid = (counts - model) / np.sqrt(np.maximum(counts, 1.0))
        run.csv(f"analysis/lifetime_{label}_fit.csv", ["t_ns", "counts", "model", "residual"],
                zip(t, counts, model, resid))
        run.svg(f"analysis/lifetime_{label}.svg", plotting.fit_plot, t, np.maximum(counts, 0.5), t,
                np.maximum(model, 0.5), "delay (ns)", "counts", residuals=resid, logy=True)
    run.say(f"{label}: tau = {lf.tau:.4f} +/- {lf.spread:.4f} ns")


def _analyze_spectrum(args, run, path, label, emitter, env):
    data = read_csv(path, required=("wavelength_nm", "counts"))
    lz = fit.fit_lorentzian(data["wavelength_nm"], data["counts"])
    run.text(f"analysis/spectrum_{label}.txt", lz.result.as_text())
    run.json(f"analysis/spectrum_{label}.json", {"kind": "spectrum", "emitter": emitter, "environment": env,
                                                 "center_nm": lz.center, "fwhm_nm": lz.fwhm, "Q_em": lz.Q_em,
                                                 "errors": lz.result.uncertainties, "secondary_nm": lz.secondary})
    x = data["wavelength_nm"]
    model = fit.lorentzian(x, *lz.result.x)
    run.csv(f"analysis/spectrum_{label}_fit.csv", ["wavelength_nm", "counts", "model"], zip(x, data["counts"], model))
    run.svg(f"analysis/spectrum_{label}.svg", plotting.fit_plot, x, data["counts"], x, model,
            "wavelength (nm)", "counts")
    flag = f", secondary peak near {lz.secondary:.2f} nm" if lz.secondary is not None else ""
    run.say(f"{label}: center {lz.center:.2f} nm, FWHM {lz.fwhm:.3f} nm, Q_em {lz.Q_em:.0f}{flag}")


def _analyze_saturation(args, run, path, label, emitter, env):
    data = read_csv(path, required=("power_mW", "rate_MHz"))
    err = data.get("err_MHz")
    sf = fit.fit_saturation(data["power_mW"], data["rate_MHz"], err)
    run.text(f"analysis/saturation_{label}.txt", sf.result.as_text() + f"degenerate: {sf.degenerate}\n")
    run.json(f"analysis/saturation_{label}.json", {"kind": "saturation", "emitter": emitter, "environment": env,
                                                   "I_inf_MHz": sf.I_inf, "P_sat_mW": sf.P_sat,
                                                   "a_bg_MHz_per_mW": sf.a_bg, "errors": sf.errors,
                                                   "degenerate": sf.degenerate})
    P = data["power_mW"]
    grid = np.geomspace(P[P > 0].min(), P.max(), 200)
    model = saturation_model(grid, sf.I_inf, sf.P_sat, sf.a_bg) if not sf.degenerate else sf.a_bg * grid
    run.csv(f"analysis/saturation_{label}_fit.csv", ["power_mW", "model_MHz"], zip(grid, model))
    comps = None if sf.degenerate else {"emitter": saturation_model(grid, sf.I_inf, sf.P_sat, 0.0),
                                        "background": sf.a_bg * grid}
    run.svg(f"analysis/saturation_{label}.svg", plotting.fit_plot, P, data["rate_MHz"], grid, model,
            "power (mW)", "count rate (MHz)", yerr=err, components=comps)
    run.say(f"{label}: I_inf = {sf.I_inf:.4g} +/- {sf.errors['I_inf']:.2g} MHz, P_sat = {sf.P_sat:.3g} mW, "
            f"a_bg = {sf.a_bg:.3g} MHz/mW" + (" (degenerate: linear only)" if sf.degenerate else ""))


def _read_g2(path):
    data = read_csv(path, required=("tau_ns", "g2"))
    reps = sorted(k for k in data if k.startswith("jk_"))
    replicates = np.array([data[k] for k in reps]) if reps else None
    meta = _csv_meta(path)
    bw = float(meta["bin_ns"]) if "bin_ns" in meta else float(np.median(np.diff(data["tau_ns"])))
    return data["tau_ns"], data["g2"], data.get("err"), replicates, bw


def _analyze_g2(args, run, path, label, emitter, env):
    tau, g2, err, reps, bw = _read_g2(path)
    res = fit.fit_g2_single(tau, g2, err, args.irf, args.rho, bw, replicates=reps)
    run.text(f"analysis/g2_{label}.txt", res.as_text())
    run.json(f"analysis/g2_{label}.json", {"kind": "g2", "emitter": emitter, "environment": env,
                                           "params": res.params, "errors": res.uncertainties})
    rho = res["rho"] if "rho" in res.names else args.rho
    model = fit.g2_model(tau, res["tau1"], res["tau2"], res["a"], rho, args.irf, bw)
    run.csv(f"analysis/g2_{label}_fit.csv", ["tau_ns", "g2", "model"], zip(tau, g2, model))
    run.svg(f"analysis/g2_{label}.svg", plotting.fit_plot, tau, g2, tau, model, "delay (ns)", "g2")
    run.say(f"{label}: tau1 = {res['tau1']:.4g} ns, tau2 = {res['tau2']:.4g} ns, a = {res['a']:.4g}")


def _qe_tension(setup, emitters, emitter_id, gamma):
    """Quantum efficiency from the total rate against the one from the lifetime change."""
    em = next((e for e in emitters if e.id == emitter_id), None)
    if em is None or "I_m_fs_MHz" not in em.meta:
        return None
    d = setup.dipole
    out = {"Gamma_MHz": gamma}
    for name, theta in (("parallel", math.pi / 2), ("axial", 0.0)):
        geom = dp.DipoleGeometry(theta, float(d.get("crystal_nm", 100.0)) / 2,
                                 float(setup.detection.get("na", 0.55)), float(d.get("wavelength_nm", 754.0)))
        chain = dataclasses.replace(setup.chain(1.0), eta_coll=dp.collection_efficiency(geom, setup.planar))
        I_fs = em.meta["I_m_fs_MHz"] / chain.free_space
        out[f"I_fs_{name}_MHz"] = I_fs
        out[f"QE_rate_{name}"] = I_fs / gamma
    rates = ds.emission_rates(setup, em)
    if rates is not None and "tau0_ns" in em.meta:
        est = qe_from_lifetime_change(em.meta["tau0_ns"], em.meta["tauc_ns"], rates["C_exp"])
        out["QE_lifetime"] = est.qe
        out["C_exp"] = rates["C_exp"]
    return out


def _analyze_g2_global(args, run, path, label, emitter, env):
    index = load_config(path)
    traces = index.get("trace")
    if not traces:
        raise SchemaError(f"{path}: no [[trace]] entries")
    tau1_0 = index.get("tau1_0_ns", {})
    missing = [e for e in ENVIRONMENTS if e not in tau1_0]
    if missing:
        raise SchemaError(f"{path}: [tau1_0_ns] lacks {missing}")
    datasets = []
    for i, tr in enumerate(traces):
        where = f"{path} trace #{i + 1}"
        f = Path(tr.get("file", ""))
        f = f if f.is_absolute() else Path(path).parent / f
        if not f.exists():
            raise MissingInputError(f"{where}: file {f} not found")
        environment = str(tr.get("environment", ""))
        if environment not in ENVIRONMENTS:
            raise SchemaError(f"{where}: environment must be one of {ENVIRONMENTS}")
        tau, g2, err, reps, bw = _read_g2(f)
        datasets.append(fit.G2Dataset(float(tr["power_mW"]), environment, tau, g2, err, bw,
                                      float(tr.get("rho", 1.0)), float(tr.get("irf_sigma_ns", 0.0)), reps))
    gf = fit.fit_g2_global(datasets, {k: float(v) for k, v in tau1_0.items()}, p0=index.get("p0"))
    alt = fit.fit_constant_deshelving(gf.points, {k: float(v) for k, v in tau1_0.items()})
    emitter = emitter or index.get("emitter")
    setup = ds.load_setup(args.config)
    emitters = ds.load_emitters(Path(args.emitters) if args.emitters else _default("emitters.toml"))
    tension = _qe_tension(setup, emitters, emitter, gf.derived["free_space"]["Gamma"]) if emitter else None
    body = gf.result.as_text() + "derived:\n" + "".join(
        f"  {e}: " + ", ".join(f"{k} = {v:.6g}" for k, v in d.items()) + "\n" for e, d in gf.derived.items())
    body += "constant-deshelving alternative:\n" + alt.as_text()
    if tension:
        body += "quantum efficiency:\n" + "".join(f"  {k} = {v:.4g}\n" for k, v in tension.items())
    run.text("analysis/g2_global.txt", body)
    run.json("analysis/g2_global.json", {
        "kind": "g2_global", "emitter": emitter, "params": gf.params, "errors": gf.result.uncertainties,
        "chi2": gf.result.chi2, "dof": gf.result.dof, "derived": gf.derived,
        "alternative": {"params": alt.params, "chi2": alt.chi2}, "qe": tension,
    })
    # parameter-versus-power overlay with both models
    rows = [(P, e, *vals, *np.sqrt(np.diag(np.linalg.inv(W.T @ W)))) for P, e, vals, W in gf.points]
    run.csv("analysis/g2_global_points.csv",
            ["power_mW", "environment", "tau1_ns", "tau2_ns", "a", "tau1_err", "tau2_err", "a_err"], rows)
    curve_rows = []
    panels = [{"ylabel": "tau1 (ns)"}, {"ylabel": "tau2 (ns)", "logy": True}, {"ylabel": "a"}]
    for p in panels:
        p["points"], p["curves"] = {}, {}
    for e in ENVIRONMENTS:
        pts = [r for r in rows if r[1] == e]
        P = np.array([r[0] for r in pts])
        grid = np.geomspace(P.min() / 2, P.max() * 2, 120)
        g_rev = g2_params(gf.models[e], grid)
        g_alt = g2_params(alt.extra["models"][e], grid)
        for k in range(grid.size):
            curve_rows.append((grid[k], e, g_rev.tau1[k], g_rev.tau2[k], g_rev.a[k],
                               g_alt.tau1[k], g_alt.tau2[k], g_alt.a[k]))
        for j, p in enumerate(panels):
            p["points"][e] = (P, np.array([r[2 + j] for r in pts]), np.array([r[5 + j] for r in pts]))
            p["curves"][f"{e} power-dependent"] = (grid, g_rev[j], "-")
            p["curves"][f"{e} constant"] = (grid, g_alt[j], "--")
    run.csv("analysis/g2_global_curves.csv",
            ["power_mW", "environment", "tau1_ns", "tau2_ns", "a", "tau1_alt_ns", "tau2_alt_ns", "a_alt"], curve_rows)
    run.svg("analysis/g2_global.svg", plotting.panels_plot, panels, "power (mW)")
    run.say(gf.result.as_text().split("covariance:")[0].rstrip())
    for e, d in gf.derived.items():
        run.say(f"{e}: n2_inf = {d['n2_inf']:.3f}, k21 = {d['k21']:.1f} MHz, Gamma = {d['Gamma']:.1f} MHz")
    run.say(f"chi2 power-dependent = {gf.result.chi2:.1f}, constant deshelving = {alt.chi2:.1f}")


ANALYZERS = {
    "lifetime": _analyze_lifetime,
    "spectrum": _analyze_spectrum,
    "saturation": _analyze_saturation,
    "g2": _analyze_g2,
    "g2-global": _analyze_g2_global,
}


def cmd_analyze(args):
    inputs = [Path(p) for p in args.files]
    run = Run(args, "analyze", {"kind": args.kind, "irf": args.irf, "rho": args.rho,
                                "components": args.components, "emitter": args.emitter, "env": args.env,
                                "format": args.format}, inputs)
    # keyed by digest so analyze runs on different inputs keep separate records
    run.command = f"analyze_{args.kind.replace('-', '_')}_{run.manifest}"
    for path in inputs:
        label, emitter, env = _label(args, path)
        ANALYZERS[args.kind](args, run, path, label, emitter, env)
    return run.finish()


# --------------------------------------------------------------------------
# synthetic data


def cmd_synth(args):
    spec_path = Path(args.spec) if args.spec else _default("synthetic.toml")
    spec = load_config(spec_path)
    emitters_path = Path(args.emitters) if args.emitters else _default("emitters.toml")
    emitters = {e.id: e for e in ds.load_emitters(emitters_path)}
    seed = int(args.seed if args.seed is not None else spec.get("seed", 0))
    run = Run(args, "synth", {"seed": seed, "quick": args.quick, "format": args.format}, [spec_path, emitters_path])
    children = iter(np.random.SeedSequence(seed).spawn(64))

    def child():
        return int(next(children).generate_state(1)[0])

    base = "synthetic"
    lt = dict(spec.get("lifetime_defaults", {}))
    for entry in spec.get("lifetime", []):
        s = child()
        counts = float(lt.get("counts", 1e6)) * (0.1 if args.quick else 1.0)
        edges, hist, cfg = synthetic.lifetime_histogram(
            float(entry["tau_ns"]), float(lt.get("irf_sigma_ns", 0.157)), counts, s,
            int(lt.get("bins", 400)), float(lt.get("bin_ns", 0.05)), float(lt.get("start_ns", -2.0)))
        centers = 0.5 * (edges[:-1] + edges[1:])
        run.csv(f"{base}/lifetime_{entry['emitter']}_{entry['environment']}.csv", ["t_ns", "counts"],
                zip(centers, hist), comments=[f"emitter: {entry['emitter']}", f"environment: {entry['environment']}",
                                              f"truth_tau_ns: {entry['tau_ns']}", f"seed: {s}"])
    sp = spec.get("spectrum", {})
    for em in emitters.values():
        s = child()
        wl, counts = synthetic.spectrum(em.wavelength, em.fwhm, s, float(sp.get("peak_counts", 2000.0)),
                                        float(sp.get("background_counts", 50.0)), step=float(sp.get("step_nm", 0.05)))
        run.csv(f"{base}/spectrum_{em.id}.csv", ["wavelength_nm", "counts"], zip(wl, counts),
                comments=[f"emitter: {em.id}", "environment: free_space", f"seed: {s}"])
    for entry in spec.get("saturation", []):
        s = child()
        P, I, err = synthetic.saturation_series(float(entry["I_inf_MHz"]), float(entry["P_sat_mW"]),
                                                float(entry["a_bg_MHz_per_mW"]), s)
        run.csv(f"{base}/saturation_{entry['emitter']}_{entry['environment']}.csv",
                ["power_mW", "rate_MHz", "err_MHz"], zip(P, I, err),
                comments=[f"emitter: {entry['emitter']}", f"environment: {entry['environment']}", f"seed: {s}"])
    g = spec.get("g2_global")
    if g is not None:
        s = child()
        models = {e: synthetic.model_from_mapping(g[e], f"g2_global.{e}") for e in ENVIRONMENTS}
        photons = float(g.get("photons", 2e6)) * (0.25 if args.quick else 1.0)
        traces = synthetic.g2_ensemble(models, g.get("power_fractions", [0.1, 0.3, 1, 3, 10]), photons, s,
                                       int(g.get("n_blocks", 25)))
        index = ["# Power series for the global g2 fit; traces carry jackknife replicates (jk_*).",
                 f"# manifest: {run.manifest}", "schema = 1", f"emitter = \"{g.get('emitter', '')}\"", ""]
        for k, tr in enumerate(traces):
            d = tr.dataset
            name = f"g2_{d.environment}_{k:02d}.csv"
            nrep = d.replicates.shape[0]
            header = ["tau_ns", "g2", "err"] + [f"jk_{j:03d}" for j in range(nrep)]
            rows = np.column_stack([d.tau, d.g2, d.err, d.replicates.T])
            run.csv(f"{base}/{name}", header, rows.tolist(),
                    comments=[f"emitter: {g.get('emitter', '')}", f"environment: {d.environment}",
                              f"power_mW: {d.power!r}", f"bin_ns: {d.bin_width!r}", f"photons: {tr.photons}"])
            index += ["[[trace]]", f'file = "{name}"', f"power_mW = {d.power!r}",
                      f'environment = "{d.environment}"', ""]
        index += ["[tau1_0_ns]"] + [f"{e} = {models[e].tau1_0!r}" for e in ENVIRONMENTS] + [""]
        p = run.path(f"{base}/g2_global.toml")
        p.write_text("\n".join(index))
    run.say(f"synthetic datasets written to {run.out / base} (seed {seed})")
    return run.finish()


# --------------------------------------------------------------------------
# report


def _load_results(folder: Path):
    out = []
    for p in sorted(folder.glob("*.json")):
        try:
            out.append(json.loads(p.read_text()))
        except json.JSONDecodeError as exc:
            raise ParseError(str(exc), p, exc.lineno) from None
    return out


MEASURED_KEYS = ("I_m_fs_MHz", "I_m_c_MHz", "tau0_ns", "tauc_ns")


def cmd_report(args):
    setup = ds.load_setup(args.config)
    emitters_path = Path(args.emitters) if args.emitters else _default("emitters.toml")
    emitters = ds.load_emitters(emitters_path)
    folder = Path(args.results) if args.results else Path(args.out) / "analysis"
    results = _load_results(folder) if folder.exists() else []
    if not results:
        raise MissingInputError(f"no analysis results in {folder}; run 'purcellkit analyze' first "
                                "(needed: lifetime, spectrum, saturation)")
    inputs = _config_inputs(setup) + [emitters_path] + sorted(folder.glob("*.json"))
    run = Run(args, "report", {"format": args.format}, inputs)
    # measured quantities come only from analysis results; design constants from the config
    by = {}
    for r in results:
        by.setdefault((r.get("kind"), r.get("emitter"), r.get("environment")), r)
    merged = []
    lifetimes = {}
    gaps = []
    for em in emitters:
        meta = {k: v for k, v in em.meta.items() if k not in MEASURED_KEYS}
        wl, fwhm = em.wavelength, em.fwhm
        spec = next((r for (k, e, _), r in by.items() if k == "spectrum" and e == em.id), None)
        if spec is not None:
            wl, fwhm = spec["center_nm"], spec["fwhm_nm"]
        else:
            gaps.append(f"table_III: {em.id} has no spectrum fit (configured line used)")
        lt_fs, lt_c = by.get(("lifetime", em.id, "free_space")), by.get(("lifetime", em.id, "cavity"))
        if lt_fs and lt_c:
            meta["tau0_ns"], meta["tauc_ns"] = lt_fs["tau_ns"], lt_c["tau_ns"]
            lifetimes[em.id] = (lt_fs["tau_ns"], lt_c["tau_ns"], em.meta.get("tauc2_ns", math.nan))
        elif "tau0_ns" in em.meta:
            gaps.append(f"table_I: {em.id} lacks a lifetime fit for "
                        + " and ".join(e for e, r in (("free_space", lt_fs), ("cavity", lt_c)) if r is None))
        s_fs, s_c = by.get(("saturation", em.id, "free_space")), by.get(("saturation", em.id, "cavity"))
        if s_fs and s_c:
            meta["I_m_fs_MHz"], meta["I_m_c_MHz"] = s_fs["I_inf_MHz"], s_c["I_inf_MHz"]
        elif "I_m_fs_MHz" in em.meta:
            gaps.append(f"table_II/table_IV: {em.id} lacks a saturation fit for "
                        + " and ".join(e for e, r in (("free_space", s_fs), ("cavity", s_c)) if r is None))
        merged.append(dataclasses.replace(em, wavelength=wl, fwhm=fwhm, meta=meta))
    tables = ds.table_rows(setup, merged, lifetimes)
    tables["table_I"] = (tables["table_I"][0], [r for r in tables["table_I"][1] if r[0] in lifetimes])
    for name, (header, rows) in tables.items():
        run.csv(f"report/{name}.csv", header, rows)
    ids = lambda name: [r[0] for r in tables[name][1]]  # noqa: E731
    col = lambda name, c: [r[tables[name][0].index(c)] for r in tables[name][1]]  # noqa: E731
    if tables["table_I"][1]:
        run.svg("report/table_I.svg", plotting.bar_plot, ids("table_I"),
                {"free space": col("table_I", "tau0_ns"), "cavity": col("table_I", "tauc_ns")}, "lifetime (ns)")
    if tables["table_II"][1]:
        run.svg("report/table_II.svg", plotting.bar_plot, ids("table_II"),
                {"C_th": col("table_II", "C_th"), "C_exp": col("table_II", "C_exp")}, "Purcell factor")
    run.svg("report/table_III.svg", plotting.bar_plot, ids("table_III"), {"C_eff": col("table_III", "C_eff")},
            "Purcell factor")
    if tables["table_IV"][1]:
        run.svg("report/table_IV.svg", plotting.bar_plot, ids("table_IV"),
                {"eta_c": col("table_IV", "eta_c"), "beta eta_c": col("table_IV", "beta_eta_c")}, "efficiency")
    run.json("report/provenance.json", {"results": [r.get("manifest") for r in results], "gaps": gaps,
                                        "tables": {k: len(v[1]) for k, v in tables.items()}})
    for name, (_, rows) in tables.items():
        run.say(f"{name}: {len(rows)} row(s)")
    for g in gaps:
        run.say(f"gap: {g}")
    return run.finish()


# --------------------------------------------------------------------------
# pipeline


def cmd_pipeline(args):
    """synth -> analyze (every bundled dataset) -> design -> report."""
    status = cmd_synth(args)
    base = Path(args.out) / "synthetic"
    for kind, pattern in (("lifetime", "lifetime_*.csv"), ("spectrum", "spectrum_*.csv"),
                          ("saturation", "saturation_*.csv")):
        files = sorted(str(p) for p in base.glob(pattern))
        if files:
            ns = argparse.Namespace(**{**vars(args), "kind": kind, "files": files, "emitter": None, "env": None,
                                       "irf": 0.157 if kind == "lifetime" else 0.0, "rho": None, "components": 1})
            status = status or cmd_analyze(ns)
    if (base / "g2_global.toml").exists() and not args.skip_g2:
        ns = argparse.Namespace(**{**vars(args), "kind": "g2-global", "files": [str(base / "g2_global.toml")],
                                   "emitter": None, "env": None, "irf": 0.0, "rho": 1.0, "components": 1})
        status = status or cmd_analyze(ns)
    status = status or cmd_design(args)
    return status or cmd_report(args)


# --------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="cavity config (TOML); default: workspace cavity.toml or bundled")
    common.add_argument("--out", default=None, help="output directory (default: $PURCELLKIT_WORKSPACE/out)")
    common.add_argument("--seed", type=int, default=None, help="override the configured seed")
    common.add_argument("--format", choices=("csv", "svg"), default="svg",
                        help="'csv' writes tables only; 'svg' adds figures")
    common.add_argument("--quiet", action="store_true")

    p = argparse.ArgumentParser(prog="purcellkit", description=__doc__.split("\n")[0], parents=[common])
    p.add_argument("--version", action="version", version=f"purcellkit {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("tmm", parents=[common], help="mirror transmission and finesse versus wavelength")
    s.add_argument("stacks", nargs="*", help="stack files (default: the cavity's two mirrors)")
    s.add_argument("--range", nargs=2, type=float, default=(650.0, 850.0), metavar=("LO", "HI"))
    s.add_argument("--points", type=int, default=401)
    s.add_argument("--angle", type=float, default=0.0, help="incidence angle in degrees")
    s.set_defaults(func=cmd_tmm)

    s = sub.add_parser("design", parents=[common], help="per-emitter Purcell and efficiency table")
    s.add_argument("--emitters", help="emitter file (TOML)")
    s.set_defaults(func=cmd_design)

    s = sub.add_parser("simulate", parents=[common], help="Monte Carlo photon stream from a sim config")
    s.add_argument("sim_config", help="simulation TOML (bundled names such as nd1_cw.toml also work)")
    s.add_argument("--timestamps", choices=("binary", "csv"), default="binary")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("analyze", parents=[common], help="fit measured or simulated data")
    s.add_argument("kind", choices=sorted(ANALYZERS))
    s.add_argument("files", nargs="+")
    s.add_argument("--emitter")
    s.add_argument("--env", choices=ENVIRONMENTS)
    s.add_argument("--emitters", help="emitter file, used for the quantum-efficiency comparison")
    s.add_argument("--irf", type=float, default=None, help="IRF sigma in ns (lifetime default 0.157, g2 default 0)")
    s.add_argument("--rho", type=float, default=None, help="signal fraction for g2 fits (fitted if omitted)")
    s.add_argument("--components", type=int, choices=(1, 2), default=1)
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("synth", parents=[common], help="write the seeded synthetic datasets")
    s.add_argument("--spec", help="synthetic dataset spec (TOML)")
    s.add_argument("--emitters")
    s.add_argument("--quick", action="store_true", help="fewer counts, for smoke tests")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("report", parents=[common], help="tables I-IV from analysis results")
    s.add_argument("--emitters")
    s.add_argument("--results", help="folder of analysis JSON files (default: OUT/analysis)")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("pipeline", parents=[common], help="synth, analyze, design and report in one go")
    s.add_argument("--spec")
    s.add_argument("--emitters")
    s.add_argument("--results")
    s.add_argument("--quick", action="store_true")
    s.add_argument("--skip-g2", action="store_true", help="skip the global g2 fit")
    s.set_defaults(func=cmd_pipeline)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.out is None:
        args.out = str(_workspace() / "out")
    if getattr(args, "irf", "absent") is None:
        args.irf = 0.157 if args.kind == "lifetime" else 0.0
    try:
        return args.func(args)
    except ParseError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except SchemaError as exc:
        print(f"schema error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except ConvergenceError as exc:
        print(f"fit failed: {exc}", file=sys.stderr)
        for k, v in exc.diagnostics.items():
            print(f"  {k}: {v}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except FileNotFoundError as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (PurcellKitError, ValueError, KeyError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
