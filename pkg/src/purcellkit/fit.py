"""Levenberg-Marquardt engine and the fitting protocols built on it.

The solver minimizes ``0.5 * sum(r(x)**2)`` with Marquardt's diagonal
scaling and Nielsen's damping update: after a successful step with gain
ratio ``rho`` the damping is multiplied by ``max(1/3, 1 - (2 rho - 1)**3)``;
after a rejected step it is multiplied by ``nu`` and ``nu`` doubles.  Bounds
are honored by clipping trial points to the feasible box.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import erfc, erfcx

from .errors import ConvergenceError
from .photophysics import (
    ConstantDeshelvingModel,
    RateModel,
    e_from_asymptote,
    g2_analytic,
    g2_bin_average,
    g2_params,
    population_asymptote,
    saturation_model,
    total_rate,
)

__all__ = [
    "FitResult",
    "IdentifiabilityError",
    "lm_minimize",
    "curve_fit",
    "emg_pdf",
    "emg_cdf",
    "lifetime_model",
    "LifetimeProtocol",
    "LifetimeFit",
    "fit_lifetime",
    "LorentzFit",
    "fit_lorentzian",
    "SaturationFit",
    "fit_saturation",
    "g2_model",
    "fit_g2_single",
    "G2Dataset",
    "GlobalFit",
    "fit_g2_global",
]


class IdentifiabilityError(ConvergenceError):
    """The data do not constrain all parameters (singular Jacobian)."""


@dataclass
class FitResult:
    names: tuple
    x: np.ndarray
    errors: np.ndarray
    covariance: np.ndarray
    residuals: np.ndarray
    chi2: float
    dof: int
    nfev: int
    niter: int
    message: str
    method: str = "levenberg-marquardt (Nielsen damping)"
    extra: dict = field(default_factory=dict)

    @property
    def redchi(self) -> float:
        return self.chi2 / self.dof if self.dof > 0 else math.nan

    @property
    def params(self) -> dict:
        return dict(zip(self.names, self.x.tolist()))

    @property
    def uncertainties(self) -> dict:
        return dict(zip(self.names, self.errors.tolist()))

    def __getitem__(self, name):
        return float(self.x[self.names.index(name)])

    def err(self, name) -> float:
        return float(self.errors[self.names.index(name)])

    def as_text(self) -> str:
        lines = [f"method: {self.method}", f"message: {self.message}",
                 f"chi2: {self.chi2:.6g}", f"dof: {self.dof}", f"reduced_chi2: {self.redchi:.6g}",
                 f"iterations: {self.niter}", f"evaluations: {self.nfev}", "parameters:"]
        lines += [f"  {n} = {v:.10g} +/- {e:.3g}" for n, v, e in zip(self.names, self.x, self.errors)]
        lines.append("covariance:")
        lines += ["  " + " ".join(f"{c: .4e}" for c in row) for row in self.covariance]
        for k, v in self.extra.items():
            lines.append(f"{k}: {v}")
        return "\n".join(lines) + "\n"


def _jacobian(fun, x, r0, lo, hi, scheme):
    n = x.size
    J = np.empty((r0.size, n))
    nfev = 0
    for j in range(n):
        h = (np.finfo(float).eps ** (1 / 3 if scheme == "central" else 1 / 2)) * max(abs(x[j]), 1e-8)
        xp = x.copy()
        xm = x.copy()
        if scheme == "central" and x[j] - h >= lo[j] and x[j] + h <= hi[j]:
            xp[j] += h
            xm[j] -= h
            J[:, j] = (fun(xp) - fun(xm)) / (2 * h)
            nfev += 2
        else:
            # one-sided step pointing into the feasible box
            step = h if x[j] + h <= hi[j] else -h
            xp[j] += step
            J[:, j] = (fun(xp) - r0) / step
            nfev += 1
    return J, nfev


def lm_minimize(
    fun: Callable[[np.ndarray], np.ndarray],
    x0: Sequence[float],
    bounds=None,
    jac: Callable | None = None,
    names: Sequence[str] | None = None,
    max_iter: int = 500,
    gtol: float = 1e-10,
    xtol: float = 1e-12,
    ftol: float = 1e-14,
    scale_covariance: bool = False,
    diff: str = "central",
) -> FitResult:
    """Minimize ``0.5 * |fun(x)|**2``.

    ``fun`` returns weighted residuals.  With ``scale_covariance`` the
    covariance ``inv(J^T J)`` is multiplied by the reduced chi-square, which
    is appropriate when the residual weights are only relative.
    """
    x = np.asarray(x0, dtype=float).copy()
    n = x.size
    names = tuple(names) if names is not None else tuple(f"p{i}" for i in range(n))
    if bounds is None:
        lo, hi = np.full(n, -np.inf), np.full(n, np.inf)
    else:
        lo, hi = (np.broadcast_to(np.asarray(b, dtype=float), (n,)).copy() for b in bounds)
    if np.any(x < lo) or np.any(x > hi):
        raise ValueError("initial point outside bounds")

    r = np.asarray(fun(x), dtype=float)
    if not np.all(np.isfinite(r)):
        raise ConvergenceError("residuals are not finite at the initial point", {"x0": x.tolist()})
    nfev = 1
    cost = 0.5 * r @ r

    def jacobian(x, r):
        if jac is not None:
            return np.asarray(jac(x), dtype=float), 0
        return _jacobian(fun, x, r, lo, hi, diff)

    J, k = jacobian(x, r)
    nfev += k
    mu, nu = 1e-3, 2.0
    message = "maximum iterations reached"
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        g = J.T @ r
        # gradient test on free coordinates (those not pinned at an active bound)
        free = ~(((x <= lo) & (g > 0)) | ((x >= hi) & (g < 0)))
        if np.max(np.abs(g[free]), initial=0.0) <= gtol * max(1.0, cost):
            message, converged = "gradient below tolerance", True
            break
        A = J.T @ J
        D = np.maximum(np.diag(A), 1e-12 * max(np.max(np.diag(A)), 1e-300))
        fi = np.flatnonzero(free)
        Af = A[np.ix_(fi, fi)]
        while True:
            h = np.zeros(n)
            try:
                # coordinates held at a bound by the gradient stay out of the step
                h[fi] = np.linalg.solve(Af + mu * np.diag(D[fi]), -g[fi])
            except np.linalg.LinAlgError:
                mu *= nu
                nu *= 2.0
                continue
            x_new = np.clip(x + h, lo, hi)
            step = x_new - x
            if np.linalg.norm(step) <= xtol * (np.linalg.norm(x) + xtol):
                message, converged = "step below tolerance", True
                break
            r_new = np.asarray(fun(x_new), dtype=float)
            nfev += 1
            cost_new = 0.5 * r_new @ r_new if np.all(np.isfinite(r_new)) else np.inf
            crossed = (x + h < lo) | (x + h > hi)
            if np.any(crossed & (h != 0)):
                # a clipped step can land far from the search direction; also
                # try the crossed coordinates held at their bounds with the
                # rest re-solved, and the step shortened to stay inside the box
                cands = []
                rest = np.flatnonzero(free & ~crossed)
                if rest.size:
                    hb = np.where(crossed, np.clip(x + h, lo, hi) - x, 0.0)
                    rhs = -g[rest] - A[np.ix_(rest, np.flatnonzero(crossed))] @ hb[crossed]
                    try:
                        hb[rest] = np.linalg.solve(A[np.ix_(rest, rest)] + mu * np.diag(D[rest]), rhs)
                        cands.append(np.clip(x + hb, lo, hi))
                    except np.linalg.LinAlgError:
                        pass
                room = np.where(h < 0, x - lo, hi - x)
                frac = 0.9 * np.min(room[crossed] / np.abs(h[crossed]))
                if frac > 0:
                    cands.append(x + frac * h)
                for x_alt in cands:
                    r_alt = np.asarray(fun(x_alt), dtype=float)
                    nfev += 1
                    cost_alt = 0.5 * r_alt @ r_alt if np.all(np.isfinite(r_alt)) else np.inf
                    if cost_alt < cost_new:
                        x_new, r_new, cost_new, step = x_alt, r_alt, cost_alt, x_alt - x
            predicted = -(step @ g) - 0.5 * step @ (A @ step)
            noise = 16 * np.finfo(float).eps * cost
            if 0 < predicted <= noise and cost_new <= cost + noise:
                # the cost can no longer resolve the gain; take the final
                # Gauss-Newton refinement on the strength of the linear model
                x, r, cost = x_new, r_new, cost_new
                J, k = jacobian(x, r)
                nfev += k
                message, converged = "reduction below rounding level", True
                break
            rho = (cost - cost_new) / predicted if predicted > 0 else -1.0
            if rho > 0 and np.isfinite(cost_new):
                small = (cost - cost_new) <= ftol * max(cost, 1e-300)
                x, r, cost_old, cost = x_new, r_new, cost, cost_new
                mu *= max(1.0 / 3.0, 1.0 - (2.0 * rho - 1.0) ** 3)
                nu = 2.0
                J, k = jacobian(x, r)
                nfev += k
                if small:
                    message, converged = "relative reduction below tolerance", True
                break
            mu *= nu
            nu *= 2.0
            if mu > 1e30:
                message, converged = "damping saturated at a local minimum", True
                break
        if converged:
            break
    if not converged:
        raise ConvergenceError(f"no convergence after {max_iter} iterations",
                               {"x": x.tolist(), "cost": cost, "nfev": nfev})

    m = r.size
    dof = max(m - n, 0)
    chi2 = float(r @ r)
    # covariance of parameters not pinned at a bound
    active = (x <= lo) | (x >= hi)
    free = ~active
    cov = np.zeros((n, n))
    Jf = J[:, free]
    if Jf.size:
        u, s, vt = np.linalg.svd(Jf, full_matrices=False)
        if s[-1] <= 1e-10 * s[0] or s[-1] == 0:
            bad = [names[i] for i in np.flatnonzero(free)[np.abs(vt[-1]) > 0.3]]
            raise IdentifiabilityError(
                f"singular Jacobian at the solution; poorly constrained: {bad}",
                {"x": x.tolist(), "singular_values": s.tolist()},
            )
        cov_f = (vt.T / s**2) @ vt
        if scale_covariance and dof > 0:
            cov_f *= chi2 / dof
        cov[np.ix_(free, free)] = cov_f
    errors = np.sqrt(np.maximum(np.diag(cov), 0.0))
    return FitResult(names, x, errors, cov, r, chi2, dof, nfev, it, message)


def curve_fit(model, x, y, p0, sigma=None, bounds=None, names=None, scale_covariance=None, **kw) -> FitResult:
    """Fit ``model(x, *p)`` to ``y``.

    Without ``sigma`` the fit is unweighted and the covariance is scaled by the
    reduced chi-square; with ``sigma`` the weights are taken as absolute.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("data must be finite")
    w = 1.0 / np.asarray(sigma, dtype=float) if sigma is not None else np.ones_like(y)
    if scale_covariance is None:
        scale_covariance = sigma is None
    return lm_minimize(lambda p: (model(x, *p) - y) * w, p0, bounds=bounds, names=names,
                       scale_covariance=scale_covariance, **kw)


# --------------------------------------------------------------------------
# lifetimes


def _exp_erfc(x, sigma, tau):
    """``exp(sigma**2/(2 tau**2) - x/tau) * erfc((sigma/tau - x/sigma)/sqrt(2))`` without overflow."""
    b = (sigma / tau - x / sigma) / math.sqrt(2.0)
    with np.errstate(over="ignore", under="ignore"):
        pos = np.exp(-0.5 * (x / sigma) ** 2) * erfcx(np.maximum(b, 0.0))
        neg = np.exp(np.minimum(0.5 * (sigma / tau) ** 2 - x / tau, 700.0)) * erfc(np.minimum(b, 0.0))
    return np.where(b > 0, pos, neg)


def emg_pdf(t, t0, sigma, tau):
    """Unit-area exponential decay starting at ``t0`` convolved with a Gaussian."""
    x = np.asarray(t, dtype=float) - t0
    if sigma <= 0:
        return np.where(x >= 0, np.exp(-np.maximum(x, 0) / tau) / tau, 0.0)
    return 0.5 / tau * _exp_erfc(x, sigma, tau)


def emg_cdf(t, t0, sigma, tau):
    x = np.asarray(t, dtype=float) - t0
    if sigma <= 0:
        return np.where(x >= 0, -np.expm1(-np.maximum(x, 0) / tau), 0.0)
    phi = 0.5 * erfc(-x / (sigma * math.sqrt(2.0)))
    return phi - tau * emg_pdf(t, t0, sigma, tau)


def lifetime_model(edges, t0, sigma, amps, taus, bg):
    """Expected counts per bin: sum of EMG components plus a constant per bin."""
    edges = np.asarray(edges, dtype=float)
    out = np.full(edges.size - 1, float(bg))
    for A, tau in zip(amps, taus):
        out += A * (emg_cdf(edges[1:], t0, sigma, tau) - emg_cdf(edges[:-1], t0, sigma, tau))
    return out


WINDOWS = ("full_trace", "decay_from_peak", "pure_exponential_tail")


@dataclass(frozen=True)
class LifetimeProtocol:
    windows: tuple = WINDOWS
    components: int = 1
    background: bool = True
    irf_sigma: float = 0.157  # ns
    tail_start: float | None = None  # ns after the peak; default 5 sigma
    weighting: str = "neyman"  # "neyman": sigma = sqrt(max(y, 1)); "deviance": Poisson likelihood

    def __post_init__(self):
        if not set(self.windows) <= set(WINDOWS) or not self.windows:
            raise ValueError(f"windows must be drawn from {WINDOWS}")
        if self.weighting not in ("neyman", "deviance"):
            raise ValueError("weighting must be 'neyman' or 'deviance'")
        if self.components not in (1, 2):
            raise ValueError("components must be 1 or 2")


@dataclass
class LifetimeFit:
    tau: float
    spread: float
    per_window: dict
    results: dict
    failures: dict


def _poisson_sigma(counts):
    return np.sqrt(np.maximum(counts, 1.0))


def _deviance_residuals(m, y):
    """Signed Poisson deviance residuals; their squared sum is twice the negative log-likelihood ratio."""
    m = np.maximum(m, 1e-300)
    with np.errstate(divide="ignore", invalid="ignore"):
        term = np.where(y > 0, y * np.log(y / m), 0.0)
    dev = np.maximum(2.0 * (m - y + term), 0.0)
    return np.sign(y - m) * np.sqrt(dev)


def _histogram_fit(model, x, y, p0, bounds, names, weighting):
    if weighting == "neyman":
        return curve_fit(model, x, y, p0, sigma=_poisson_sigma(y), bounds=bounds, names=names)
    return lm_minimize(lambda p: _deviance_residuals(model(x, *p), y), p0, bounds=bounds, names=names)


def fit_lifetime(edges, counts, protocol: LifetimeProtocol = LifetimeProtocol()) -> LifetimeFit:
    """Lifetime from a TCSPC histogram with the three-window protocol.

    The reported lifetime is the mean over successful windows and the spread
    is half of their max-min difference.  With two components the slower one
    is treated as the emitter and the fast one as background fluorescence.
    """
    edges = np.asarray(edges, dtype=float)
    counts = np.asarray(counts, dtype=float)
    if edges.size != counts.size + 1:
        raise ValueError("edges must have one more entry than counts")
    centers = 0.5 * (edges[:-1] + edges[1:])
    width = np.diff(edges)
    ipk = int(np.argmax(counts))
    tail = counts[int(0.9 * counts.size):]
    bg0 = float(np.median(tail)) if tail.size else 0.0
    if np.sum(counts > bg0 + 3 * math.sqrt(max(bg0, 1.0))) < 50:
        raise ValueError("histogram needs at least 50 bins above background")
    sig = protocol.irf_sigma
    peak_t = centers[ipk]
    # 1/e point of the decay as a starting lifetime
    above = counts[ipk:] - bg0
    drop = np.flatnonzero(above < above[0] / math.e)
    tau0 = max((centers[ipk + drop[0]] - peak_t) if drop.size else 1.0, 2 * width.mean())
    total = max(counts.sum() - bg0 * counts.size, 1.0)

    per, results, failures = {}, {}, {}
    for win in protocol.windows:
        try:
            if win == "pure_exponential_tail":
                start = peak_t + (protocol.tail_start if protocol.tail_start is not None else 5 * max(sig, width.mean()))
                sel = centers >= start
                ee = edges[np.flatnonzero(sel)[0]: np.flatnonzero(sel)[-1] + 2]

                def model(_, A, tau, bg):
                    return A * tau * (np.exp(-(ee[:-1] - start) / tau) - np.exp(-(ee[1:] - start) / tau)) + bg

                p0 = [max(counts[sel][0] - bg0, 1.0) / width.mean(), tau0, max(bg0, 1e-3)]
                names = ("A", "tau", "bg")
                lo, hi = [0, 1e-3, 0], [np.inf, np.inf, np.inf]
                if not protocol.background:
                    model_nb = model
                    model = lambda x, A, tau: model_nb(x, A, tau, 0.0)  # noqa: E731
                    p0, names, lo, hi = p0[:2], names[:2], lo[:2], hi[:2]
                res = _histogram_fit(model, centers[sel], counts[sel], p0, (lo, hi), names, protocol.weighting)
            else:
                sel = np.ones(counts.size, dtype=bool) if win == "full_trace" else centers >= peak_t
                first, last = np.flatnonzero(sel)[0], np.flatnonzero(sel)[-1]
                ee = edges[first:last + 2]
                if win == "decay_from_peak" and sig <= 0:
                    # without IRF blur the shift t0 only rescales the amplitude
                    t_fix = ee[0]

                    def model(_, A, tau, bg=0.0):
                        return lifetime_model(ee, t_fix, 0.0, [A], [tau], bg)
                    p0 = [total, tau0]
                    names = ["A", "tau"]
                    lo, hi = [0, 1e-3], [np.inf, np.inf]
                    if protocol.components == 2:
                        raise ValueError("two components need a finite IRF width in this window")
                elif protocol.components == 1:
                    def model(_, A, t0, tau, bg=0.0):
                        return lifetime_model(ee, t0, sig, [A], [tau], bg)
                    p0 = [total, peak_t - (sig if sig > 0 else 0.0), tau0]
                    names = ["A", "t0", "tau"]
                    lo, hi = [0, edges[0] - 5, 1e-3], [np.inf, edges[-1], np.inf]
                else:
                    def model(_, A, t0, tau, A2, tau_b, bg=0.0):
                        return lifetime_model(ee, t0, sig, [A, A2], [tau, tau_b], bg)
                    p0 = [0.8 * total, peak_t - sig, tau0, 0.2 * total, 0.2 * tau0]
                    names = ["A", "t0", "tau", "A2", "tau_b"]
                    lo, hi = [0, edges[0] - 5, 1e-3, 0, 1e-3], [np.inf, edges[-1], np.inf, np.inf, np.inf]
                if protocol.background:
                    p0.append(max(bg0, 1e-3))
                    names.append("bg")
                    lo.append(0)
                    hi.append(np.inf)
                res = _histogram_fit(model, centers[sel], counts[sel], p0, (lo, hi), names, protocol.weighting)
                if protocol.components == 2 and res["tau_b"] > res["tau"]:
                    # keep the slow component as the emitter
                    res.extra["swapped"] = True
            tau = res["tau"] if not res.extra.get("swapped") else res["tau_b"]
            per[win] = tau
            results[win] = res
        except (ConvergenceError, ValueError, np.linalg.LinAlgError) as exc:
            failures[win] = str(exc)
    if not per:
        raise ConvergenceError("lifetime fit failed in every window", failures)
    vals = np.array(list(per.values()))
    return LifetimeFit(float(vals.mean()), float(0.5 * (vals.max() - vals.min())), per, results, failures)


# --------------------------------------------------------------------------
# spectra


@dataclass
class LorentzFit:
    center: float  # nm
    fwhm: float  # nm
    Q_em: float
    result: FitResult
    secondary: float | None = None  # wavelength of a flagged second peak


def lorentzian(x, A, x0, w, bg):
    return bg + A / (1.0 + ((x - x0) / (0.5 * w)) ** 2)


def fit_lorentzian(wavelength, counts, sigma=None, secondary_threshold: float = 5.0) -> LorentzFit:
    """Lorentzian plus constant background; flags a secondary peak in the residuals."""
    x = np.asarray(wavelength, dtype=float)
    y = np.asarray(counts, dtype=float)
    order = np.argsort(x)
    x, y = x[order], y[order]
    med = float(np.median(y))
    ipk = int(np.argmax(y))
    if not y[ipk] > 3 * max(med, 0) or y[ipk] <= 0:
        raise ValueError("no peak found (maximum below 3x median)")
    half = med + 0.5 * (y[ipk] - med)
    left = ipk
    while left > 0 and y[left] > half:
        left -= 1
    right = ipk
    while right < y.size - 1 and y[right] > half:
        right += 1
    step = float(np.median(np.diff(x)))
    w0 = max(x[right] - x[left], step)
    if sigma is None:
        sigma = np.sqrt(np.maximum(y, 1.0))
    else:
        sigma = np.asarray(sigma, dtype=float)[order]
    res = curve_fit(lorentzian, x, y, [y[ipk] - med, x[ipk], w0, med], sigma=sigma,
                    bounds=([0, x[0], step * 1e-3, -np.inf], [np.inf, x[-1], x[-1] - x[0], np.inf]),
                    names=("A", "center", "fwhm", "bg"))
    if res["fwhm"] < step:
        raise ValueError(f"fitted linewidth {res['fwhm']:.3g} nm is below the sampling step {step:.3g} nm")
    z = (y - lorentzian(x, *res.x)) / sigma
    # secondary peak: a run of strongly positive residuals
    kernel = np.ones(3) / 3.0
    zs = np.convolve(z, kernel, mode="same") * math.sqrt(3.0)
    secondary = None
    if zs.max() > secondary_threshold:
        secondary = float(x[int(np.argmax(zs))])
    return LorentzFit(res["center"], res["fwhm"], res["center"] / res["fwhm"], res, secondary)


# --------------------------------------------------------------------------
# saturation


@dataclass
class SaturationFit:
    I_inf: float
    P_sat: float
    a_bg: float
    errors: dict
    result: FitResult
    degenerate: bool = False


def fit_saturation(P, I, sigma=None) -> SaturationFit:
    """Fit ``P I_inf/(P + P_sat) + a_bg P`` to a power series.

    Data without visible saturation are refit with the linear term alone and
    flagged ``degenerate`` (``P_sat`` is then undefined).
    """
    P = np.asarray(P, dtype=float)
    I = np.asarray(I, dtype=float)
    if P.size < 5:
        raise ValueError("need at least 5 powers")
    pos = P[P > 0]
    if pos.size < 2 or pos.max() / pos.min() < 10:
        raise ValueError("powers must span at least one decade")
    order = np.argsort(P)
    Ps, Is = P[order], I[order]
    slope_hi = (Is[-1] - Is[-2]) / (Ps[-1] - Ps[-2])
    a0 = max(slope_hi, 0.0)
    rest = Is - a0 * Ps
    I0 = max(rest.max(), 1e-12)
    Psat0 = float(np.interp(0.5 * I0, rest, Ps)) if np.all(np.diff(rest) > 0) else float(np.median(pos))
    Psat0 = min(max(Psat0, pos.min() * 0.1), pos.max() * 10)
    try:
        res = curve_fit(saturation_model, P, I, [I0, Psat0, a0], sigma=sigma,
                        bounds=([0, 1e-12, 0], [np.inf, np.inf, np.inf]), names=("I_inf", "P_sat", "a_bg"))
        degenerate = res["I_inf"] < 2 * res.err("I_inf") or res["P_sat"] > 100 * pos.max()
    except ConvergenceError:
        degenerate = True
        res = None
    if degenerate:
        lin = curve_fit(lambda x, a: a * x, P, I, [max(np.polyfit(P, I, 1)[0], 1e-12)], sigma=sigma,
                        names=("a_bg",))
        return SaturationFit(0.0, math.nan, lin["a_bg"],
                             {"I_inf": res.err("I_inf") if res is not None else math.nan,
                              "P_sat": math.nan, "a_bg": lin.err("a_bg")}, lin, True)
    return SaturationFit(res["I_inf"], res["P_sat"], res["a_bg"], res.uncertainties, res, False)


# --------------------------------------------------------------------------
# g2

def _two_sided_exp_conv(t, T, sigma):
    """``exp(-|t|/T)`` convolved with a unit Gaussian of width ``sigma``."""
    t = np.asarray(t, dtype=float)
    if sigma <= 0:
        return np.exp(-np.abs(t) / T)
    return 0.5 * (_exp_erfc(t, sigma, T) + _exp_erfc(-t, sigma, T))


def _two_sided_exp_conv_prim(t, T, sigma):
    """Antiderivative in ``t`` of :func:`_two_sided_exp_conv` for ``sigma > 0``.

    Each one-sided term is an exponentially modified Gaussian whose
    cumulative distribution is ``Phi(x/sigma) - _exp_erfc(x, sigma, T)/2``.
    """
    t = np.asarray(t, dtype=float)
    return T * (-erfc(t / (sigma * math.sqrt(2.0))) + 1.0
                - 0.5 * _exp_erfc(t, sigma, T) + 0.5 * _exp_erfc(-t, sigma, T))


def g2_model(tau, tau1, tau2, a, rho=1.0, irf_sigma=0.0, bin_width=0.0):
    """Measured g2: ideal three-level form, IRF-blurred and diluted by background.

    ``rho`` is the signal fraction of detected counts.  With ``bin_width`` the
    model is averaged over each lag bin.
    """
    tau = np.asarray(tau, dtype=float)
    if bin_width > 0:
        if irf_sigma <= 0:
            ideal = g2_bin_average((tau1, tau2, a), tau - bin_width / 2, tau + bin_width / 2)
        else:
            lo, hi = tau - bin_width / 2, tau + bin_width / 2

            def mean(T):
                return (_two_sided_exp_conv_prim(hi, T, irf_sigma) - _two_sided_exp_conv_prim(lo, T, irf_sigma)) / bin_width

            ideal = 1 - (1 + a) * mean(tau1) + a * mean(tau2)
    else:
        ideal = 1 - (1 + a) * _two_sided_exp_conv(tau, tau1, irf_sigma) + a * _two_sided_exp_conv(tau, tau2, irf_sigma)
    return 1.0 - rho**2 * (1.0 - ideal)


def _g2_initial(tau, g2):
    """Heuristic start values from the antibunching dip and bunching shoulder."""
    t = np.abs(tau)
    order = np.argsort(t)
    t, g = t[order], g2[order]
    gmin = g[: max(3, t.size // 50)].min()
    gmax = g.max()
    a = max(gmax - 1.0, 0.02)
    # tau1: where the dip recovers halfway to the shoulder
    halfway = gmin + 0.5 * (gmax - gmin)
    idx = np.flatnonzero(g >= halfway)
    tau1 = max(t[idx[0]] / math.log(2.0), 1e-2) if idx.size else max(t[1], 1e-2)
    # tau2: where the shoulder has decayed to 1/e of its height
    ipk = int(np.argmax(g))
    after = np.flatnonzero((g[ipk:] - 1.0) < (gmax - 1.0) / math.e)
    tau2 = t[ipk + after[0]] if after.size else t[-1] / 3
    tau2 = max(tau2, 3 * tau1)
    return tau1, tau2, a


def fit_g2_single(tau, g2, err=None, irf_sigma=0.0, rho=None, bin_width=0.0, p0=None,
                  replicates=None) -> FitResult:
    """Fit ``(tau1, tau2, a)`` (and the signal fraction if ``rho`` is None).

    ``err`` are per-bin standard errors; without them the fit is unweighted.
    Neighbouring lag bins of a measured correlation are not independent, so
    the Jacobian covariance understates the parameter scatter.  Passing the
    delete-one-block ``replicates`` of the trace replaces it with the
    jackknife covariance of refits to each replicate.
    """
    tau = np.asarray(tau, dtype=float)
    g2 = np.asarray(g2, dtype=float)
    if np.ptp(g2) < 0.05 or g2.min() > 0.95:
        raise IdentifiabilityError("flat trace: no antibunching dip to constrain the model")
    start = p0 if p0 is not None else _g2_initial(tau, g2)
    names = ["tau1", "tau2", "a"]
    lo, hi = [1e-4, 1e-4, 0.0], [np.inf, np.inf, np.inf]
    x0 = list(start)
    if rho is None:
        names.append("rho")
        x0.append(min(math.sqrt(max(1.0 - g2.min(), 0.05)), 1.0))
        lo.append(0.0)
        hi.append(1.0)

        def model(t, t1, t2, a, r):
            return g2_model(t, t1, t2, a, r, irf_sigma, bin_width)
    else:
        def model(t, t1, t2, a):
            return g2_model(t, t1, t2, a, rho, irf_sigma, bin_width)
    res = curve_fit(model, tau, g2, x0, sigma=err, bounds=(lo, hi), names=names)
    if replicates is not None:
        reps = np.asarray(replicates, dtype=float)
        if reps.ndim != 2 or reps.shape[1] != g2.size or reps.shape[0] < 2:
            raise ValueError("replicates must have shape (n_blocks, len(g2))")
        thetas = np.array([
            curve_fit(model, tau, rep, res.x, sigma=err, bounds=(lo, hi), names=names).x for rep in reps
        ])
        n = thetas.shape[0]
        dev = thetas - thetas.mean(axis=0)
        res.covariance = (n - 1) / n * dev.T @ dev
        res.errors = np.sqrt(np.diag(res.covariance))
        res.extra["covariance"] = f"block jackknife ({n} blocks)"
    if res["tau1"] > res["tau2"]:
        # the model is symmetric under swapping the roles only when a = -1; flag rather than swap
        res.extra["warning"] = "tau1 > tau2 at the solution"
    return res


@dataclass
class G2Dataset:
    power: float  # mW
    environment: str  # "free_space" or "cavity"
    tau: np.ndarray
    g2: np.ndarray
    err: np.ndarray | None = None
    bin_width: float = 0.0
    rho: float = 1.0
    irf_sigma: float = 0.0
    replicates: np.ndarray | None = None


GLOBAL_NAMES = ("d", "d_c", "sigma", "sigma_c", "a_inf", "a_inf_c", "tau2_0", "k23_0")
ENVS = ("free_space", "cavity")


@dataclass
class GlobalFit:
    result: FitResult
    models: dict  # environment -> RateModel
    derived: dict  # environment -> {"n2_inf", "k21", "Gamma", "e"}
    points: list = field(default_factory=list)  # (P, env, (tau1, tau2, a), whitening matrix)

    @property
    def params(self) -> dict:
        return self.result.params

    def err(self, name):
        return self.result.err(name)


def _models_from(params, tau1_0, qe=None):
    d, d_c, s, s_c, ai, ai_c, t2, k23 = params
    out = {}
    for env, dd, ss, aa in (("free_space", d, s, ai), ("cavity", d_c, s_c, ai_c)):
        e = e_from_asymptote(aa, dd, ss)
        out[env] = RateModel.from_lifetimes(ss, dd, max(e, 0.0), tau1_0[env], t2, k23,
                                            qe=(qe or {}).get(env, 1.0))
    return out


def fit_g2_global(datasets: Sequence[G2Dataset], tau1_0: dict, p0: dict | None = None,
                  mode: str = "parameters", qe: dict | None = None) -> GlobalFit:
    """Joint fit of the power-dependent model to g2 data in two environments.

    ``tau1_0`` gives the zero-power lifetime (ns) per environment, which fixes
    ``k21 = 1/tau1_0 - k23_0``.  The eight free parameters are
    ``d, d_c, sigma, sigma_c, a_inf, a_inf_c, tau2_0, k23_0``; ``tau2_0`` and
    ``k23_0`` are shared.

    ``mode="parameters"`` first fits every trace on its own and then fits the
    model to the resulting ``(tau1, tau2, a)`` versus power.  ``mode="traces"``
    fits all traces at once.  The fit runs in log-parameters; the reported
    covariance is transformed back.
    """
    by_env = {env: [ds for ds in datasets if ds.environment == env] for env in ENVS}
    for env in ENVS:
        if len({ds.power for ds in by_env[env]}) < 2:
            raise IdentifiabilityError(f"need at least two distinct powers for {env}")
    if mode not in ("parameters", "traces"):
        raise ValueError("mode must be 'parameters' or 'traces'")

    points = []
    if mode == "parameters":
        for ds in datasets:
            res = fit_g2_single(ds.tau, ds.g2, ds.err, ds.irf_sigma, ds.rho, ds.bin_width,
                                replicates=ds.replicates)
            # whiten with the full covariance since tau1, tau2 and a are correlated
            whiten = np.linalg.inv(np.linalg.cholesky(res.covariance[:3, :3]))
            points.append((ds.power, ds.environment, res.x[:3].copy(), whiten))

    if p0 is None:
        p0 = _global_initial(points, datasets, tau1_0) if points else None
    if p0 is None:
        raise ValueError("mode='traces' needs explicit start values p0")
    x0 = np.log([p0[n] for n in GLOBAL_NAMES])

    def residuals(logp):
        params = np.exp(logp)
        try:
            models = _models_from(params, tau1_0)
        except ValueError:
            return np.full(n_res, 1e6)
        out = []
        try:
            if mode == "parameters":
                for P, env, vals, whiten in points:
                    gp = g2_params(models[env], P)
                    out.append(whiten @ (np.array(gp[:3]) - vals))
            else:
                for ds in datasets:
                    gp = g2_params(models[ds.environment], ds.power)
                    m = g2_model(ds.tau, gp.tau1, gp.tau2, gp.a, ds.rho, ds.irf_sigma, ds.bin_width)
                    w = 1.0 / ds.err if ds.err is not None else 1.0
                    out.append((m - ds.g2) * w)
        except (ValueError, ZeroDivisionError):
            return np.full(n_res, 1e6)
        return np.concatenate(out)

    n_res = 3 * len(points) if mode == "parameters" else sum(ds.tau.size for ds in datasets)
    res_log = lm_minimize(residuals, x0, names=GLOBAL_NAMES, max_iter=1000)
    params = np.exp(res_log.x)
    D = np.diag(params)
    cov = D @ res_log.covariance @ D
    result = FitResult(GLOBAL_NAMES, params, np.sqrt(np.diag(cov)), cov, res_log.residuals,
                       res_log.chi2, res_log.dof, res_log.nfev, res_log.niter, res_log.message,
                       extra={"mode": mode})
    models = _models_from(params, tau1_0, qe)
    derived = {env: {"n2_inf": population_asymptote(m), "k21": m.k21, "Gamma": total_rate(m), "e": m.e}
               for env, m in models.items()}
    return GlobalFit(result, models, derived, points)


def _global_initial(points, datasets, tau1_0):
    """Start values from the single-trace parameters.

    At the highest power of each environment ``1/tau2`` grows like
    ``(d + e) P`` and ``1/tau1`` like ``sigma P``; ``a`` there approximates
    ``a_inf``.  ``tau2_0`` comes from the lowest power.
    """
    p = {}
    tau2_low = []
    for env, suffix in (("free_space", ""), ("cavity", "_c")):
        pts = sorted([pt for pt in points if pt[1] == env], key=lambda pt: pt[0])
        P_hi, _, (t1, t2, a), _ = pts[-1]
        tau2_low.append(pts[0][2][1])
        sigma = max(1e3 / t1 - 1e3 / tau1_0[env], 1e-3) / P_hi
        a_inf = max(a * 1.1, 0.05)
        de = max(1e3 / t2 / P_hi, 1e-3)
        # split d + e using n2_inf-free guess e = a_inf d (small-d limit of the asymptote)
        d = de / (1.0 + a_inf)
        p["d" + suffix] = d
        p["sigma" + suffix] = max(sigma, 2 * de)
        p["a_inf" + suffix] = a_inf
    p["tau2_0"] = max(tau2_low) * 1.2
    p["k23_0"] = 0.02 * min(1e3 / tau1_0[e] for e in ENVS)
    return p


def fit_constant_deshelving(points, tau1_0: dict, p0=None) -> FitResult:
    """Fit the constant-deshelving alternative to single-trace parameters.

    Free parameters ``sigma, sigma_c`` (per environment) and shared
    ``k23, k31, k32``; ``k21 = 1/tau1_0 - k23``.
    """
    names = ("sigma", "sigma_c", "k23", "k31", "k32")
    if p0 is None:
        p0 = {"sigma": 500.0, "sigma_c": 500.0, "k23": 30.0, "k31": 5.0, "k32": 20.0}

    def models_from(p):
        s, s_c, k23, k31, k32 = p
        return {
            env: ConstantDeshelvingModel(ss, k23, 1e3 / tau1_0[env] - k23, k31, k32)
            for env, ss in (("free_space", s), ("cavity", s_c))
        }

    def residuals(logp):
        ms = models_from(np.exp(logp))
        out = []
        try:
            for P, env, vals, whiten in points:
                gp = g2_params(ms[env], P)
                out.append(whiten @ (np.array(gp[:3]) - vals))
        except (ValueError, ZeroDivisionError):
            return np.full(3 * len(points), 1e6)
        return np.concatenate(out)

    # a rate that the data push to zero ends pinned at the lower bound
    bounds = (np.full(len(names), math.log(1e-6)), np.full(len(names), math.log(1e7)))
    x0 = np.clip(np.log([p0[n] for n in names]), bounds[0], bounds[1])
    res = lm_minimize(residuals, x0, bounds=bounds, names=names, max_iter=1000)
    params = np.exp(res.x)
    D = np.diag(params)
    cov = D @ res.covariance @ D
    out = FitResult(names, params, np.sqrt(np.diag(cov)), cov, res.residuals, res.chi2, res.dof,
                    res.nfev, res.niter, res.message)
    out.extra["models"] = models_from(params)
    return out
