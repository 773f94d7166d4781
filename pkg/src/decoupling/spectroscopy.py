"""
Noise spectroscopy: recover S(omega) from coherence curves of several sequences.

All curves share one spectrum, a natural cubic spline in log-log space with
fixed log-uniform knots; each curve gets its own normalization N, which is
profiled out in closed form at every objective evaluation.
"""
from __future__ import annotations

import csv
import json
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.optimize import curve_fit, minimize, minimize_scalar

from .dephasing import chi_kernel
from .exceptions import ConvergenceError, ValidationError
from .noise import LogLogSplineSpectrum
from .sequences import PulseSequence

__all__ = [
    "CoherenceCurve",
    "DecayFit",
    "SpectrumFit",
    "fit_decay",
    "fit_coherence_time",
    "fit_spectrum",
    "linear_scaling_report",
    "UNCERTAINTY_FLOOR",
]

UNCERTAINTY_FLOOR = 0.01
DEFAULT_OMEGA_RANGE = (2 * np.pi * 50.0, 2 * np.pi * 5e5)


@dataclass(frozen=True, eq=False)
class CoherenceCurve:
    """Contrast versus tau for one sequence family.

    ``sequence`` carries the normalized timings (its own ``tau`` is
    irrelevant; every point rescales it).
    """

    taus: np.ndarray
    contrasts: np.ndarray
    uncertainties: np.ndarray
    sequence: PulseSequence
    source: str = "simulated"

    def __post_init__(self):
        t = np.asarray(self.taus, dtype=float)
        c = np.asarray(self.contrasts, dtype=float)
        u = np.asarray(self.uncertainties, dtype=float)
        if not (t.shape == c.shape == u.shape) or t.ndim != 1 or t.size == 0:
            raise ValidationError("curve arrays must be matching and 1-d")
        if np.any(np.diff(t) <= 0) or np.any(t <= 0):
            raise ValidationError("curve taus must be positive and strictly increasing")
        if np.any(u < 0):
            raise ValidationError("uncertainties must be >= 0")
        if self.source not in ("simulated", "ingested"):
            raise ValidationError("source must be 'simulated' or 'ingested'")
        object.__setattr__(self, "taus", t)
        object.__setattr__(self, "contrasts", c)
        object.__setattr__(self, "uncertainties", u)

    @property
    def label(self) -> str:
        return self.sequence.label

    @property
    def n(self) -> int:
        return self.sequence.n

    def sigma(self, floor: float = UNCERTAINTY_FLOOR) -> np.ndarray:
        return np.maximum(self.uncertainties, floor)

    def scaled(self, factor: float) -> "CoherenceCurve":
        return CoherenceCurve(self.taus, self.contrasts * factor, self.uncertainties,
                              self.sequence, self.source)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["tau_s", "contrast", "uncertainty"])
            for row in zip(self.taus, self.contrasts, self.uncertainties):
                w.writerow([repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path, sequence: PulseSequence, source="ingested"):
        try:
            data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        except (OSError, ValueError) as exc:
            raise ValidationError(f"cannot read coherence curve {path}: {exc}") from exc
        return cls(data[:, 0], data[:, 1], data[:, 2], sequence, source)


# ---------------------------------------------------------------------------
# 1/e time from a single curve
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DecayFit:
    tau_c: float
    tau_c_err: float
    normalization: float
    stretch: float
    stretch_err: float


def _stretched(t, norm, tau_c, p):
    return norm * np.exp(-np.power(t / tau_c, p))


def fit_decay(curve: CoherenceCurve) -> DecayFit:
    """Fit C = N exp(-(tau/tau_c)^p) with N, tau_c, p free."""
    t, c, s = curve.taus, curve.contrasts, curve.sigma()
    if t.size < 4:
        raise ValidationError("need at least 4 points to fit a stretched exponential")
    n0 = float(np.max(c[: max(2, t.size // 4)]))
    below = np.nonzero(c < n0 / math.e)[0]
    tc0 = float(t[below[0]]) if below.size else float(t[-1])
    try:
        popt, pcov = curve_fit(_stretched, t, c, p0=[min(n0, 1.0), tc0, 1.0], sigma=s,
                               absolute_sigma=True,
                               bounds=([1e-6, t[0] * 1e-3, 0.2], [1.5, t[-1] * 1e3, 10.0]),
                               maxfev=20000)
    except RuntimeError as exc:
        raise ConvergenceError(f"decay fit failed: {exc}") from exc
    norm, tau_c, p = popt
    if np.min(c) > norm / math.e:
        raise ConvergenceError("insufficient decay: curve never falls below N/e",
                               float(np.min(c) - norm / math.e))
    err = np.sqrt(np.clip(np.diag(pcov), 0, None))
    return DecayFit(float(tau_c), float(err[1]), float(norm), float(p), float(err[2]))


def fit_coherence_time(curve: CoherenceCurve):
    """(tau_c, standard error) where the fitted contrast reaches N/e."""
    fit = fit_decay(curve)
    return fit.tau_c, fit.tau_c_err


# ---------------------------------------------------------------------------
# spectrum fit
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class SpectrumFit:
    spline: LogLogSplineSpectrum
    normalizations: np.ndarray
    residual: float
    dof: int
    knot_frequencies: np.ndarray
    band: tuple
    unconstrained: bool = False
    start_residuals: list = field(default_factory=list)

    def slope(self, band=None, samples: int = 200) -> float:
        """Least-squares log-log slope of the fitted spectrum over ``band`` (rad/s)."""
        lo, hi = self.band if band is None else band
        w = np.geomspace(lo, hi, samples)
        return float(np.polyfit(np.log(w), np.log(self.spline(w)), 1)[0])

    def to_dict(self) -> dict:
        return {
            "knot_frequencies_rad_s": self.knot_frequencies.tolist(),
            "log_s": self.spline.log_s.tolist(),
            "omega_max_rad_s": self.spline.omega_max,
            "normalizations": self.normalizations.tolist(),
            "residual": self.residual,
            "dof": self.dof,
            "band_rad_s": list(self.band),
            "mid_band_slope": self.slope(),
            "unconstrained": self.unconstrained,
        }

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")

    def write_spectrum_csv(self, path, samples: int = 200) -> None:
        w = np.geomspace(self.knot_frequencies[0], self.knot_frequencies[-1], samples)
        w[-1] = min(w[-1], self.spline.omega_max)
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh, lineterminator="\n")
            out.writerow(["omega_rad_s", "S"])
            for a, b in zip(w, self.spline(w)):
                out.writerow([repr(float(a)), repr(float(b))])


class _Objective:
    """Weighted chi-square with per-curve N profiled out."""

    def __init__(self, log_knots, log_nodes, kernels, contrasts, sigmas):
        self.log_knots = log_knots
        self.log_nodes = log_nodes
        self.kernels = kernels
        self.contrasts = contrasts
        self.inv_var = [1.0 / s ** 2 for s in sigmas]

    def spectrum_nodes(self, theta):
        return np.exp(CubicSpline(self.log_knots, theta, bc_type="natural")(self.log_nodes))

    def profile(self, theta):
        s = self.spectrum_nodes(theta)
        total = 0.0
        norms = []
        for k, c, iv in zip(self.kernels, self.contrasts, self.inv_var):
            m = np.exp(-(k @ s))
            den = np.sum(m * m * iv)
            nrm = np.sum(m * c * iv) / den if den > 0 else 1.0
            nrm = min(max(nrm, 1e-6), 1.0)
            total += float(np.sum((nrm * m - c) ** 2 * iv))
            norms.append(nrm)
        return total, np.array(norms)

    def __call__(self, theta):
        with np.errstate(over="ignore", invalid="ignore"):
            val = self.profile(theta)[0]
        return val if np.isfinite(val) else 1e300


def _run_start(args):
    objective, theta0, bounds, maxfev = args
    best = None
    x = theta0
    for _ in range(4):
        res = minimize(objective, x, method="Nelder-Mead", bounds=bounds,
                       options={"maxfev": maxfev, "xatol": 1e-6, "fatol": 1e-10,
                                "adaptive": True})
        if best is not None and best.fun - res.fun < 1e-9 * max(1.0, abs(best.fun)):
            best = res if res.fun < best.fun else best
            break
        best = res
        x = res.x
    return best.x, float(best.fun)


def _sensitive_band(objective, theta, lo_frac=0.1, hi_frac=0.9):
    """Frequency range holding the central 80 % of the fitted chi contributions."""
    s = objective.spectrum_nodes(theta)
    weight = np.zeros_like(s)
    for k, c, iv in zip(objective.kernels, objective.contrasts, objective.inv_var):
        weight += (np.sqrt(iv)[:, None] * k * s[None, :]).sum(axis=0)
    cum = np.cumsum(weight)
    if not cum[-1] > 0:
        return float(np.exp(objective.log_knots[0])), float(np.exp(objective.log_knots[-1]))
    cum /= cum[-1]
    lo = float(np.exp(np.interp(lo_frac, cum, objective.log_nodes)))
    hi = float(np.exp(np.interp(hi_frac, cum, objective.log_nodes)))
    return lo, max(hi, lo * 1.5)


def fit_spectrum(curves, knots: int = 8, omega_range=DEFAULT_OMEGA_RANGE, seed: int = 0,
                 n_starts: int = 8, nodes_per_decade: int = 100, maxfev: int = 4000,
                 workers: int = 1) -> SpectrumFit:
    """Fit one log-log spline spectrum and per-curve normalizations to all curves.

    Minimizes sum ((N_c exp(-chi) - C_obs) / sigma)^2 over the knot values
    with bounded Nelder-Mead from ``n_starts`` starts: power laws with
    exponents -2..-6 (amplitude tuned along a 1-d line search) followed by
    seeded random perturbations of the best of those.

    Raises
    ------
    ValidationError
        Fewer data points than parameters, or fewer than 4 knots.
    ConvergenceError
        No start produced a finite residual.
    """
    curves = list(curves)
    if knots < 4:
        raise ValidationError("need at least 4 knots")
    if not curves:
        raise ValidationError("need at least one coherence curve")
    n_points = sum(c.taus.size for c in curves)
    n_params = knots + len(curves)
    if n_points <= n_params:
        raise ValidationError(f"{n_points} data points cannot constrain {n_params} parameters")
    distinct = {c.n for c in curves}
    unconstrained = len(distinct) < 2
    if unconstrained:
        warnings.warn("curves share one pulse count; the spectrum is not identifiable",
                      RuntimeWarning, stacklevel=2)

    lo, hi = map(float, omega_range)
    if not 0 < lo < hi:
        raise ValidationError("omega_range must satisfy 0 < lo < hi")
    log_knots = np.linspace(math.log(lo), math.log(hi), knots)
    n_nodes = max(knots, int(nodes_per_decade * math.log10(hi / lo)) + 1)
    log_nodes = np.linspace(log_knots[0], log_knots[-1], n_nodes)
    kernels = [chi_kernel(c.sequence, c.taus, np.exp(log_nodes)) for c in curves]
    objective = _Objective(log_knots, log_nodes, kernels, [c.contrasts for c in curves],
                           [c.sigma() for c in curves])

    rng = np.random.default_rng(seed)
    centre = 0.5 * (log_knots[0] + log_knots[-1])
    starts = []
    for expo in (2.0, 3.0, 4.0, 5.0, 6.0):
        shape = -expo * (log_knots - centre)
        r = minimize_scalar(lambda a: objective(shape + a), bounds=(-80.0, 80.0),
                            method="bounded", options={"xatol": 1e-6})
        starts.append(shape + r.x)
    best_pl = min(starts, key=objective)
    while len(starts) < n_starts:
        starts.append(best_pl + rng.normal(0.0, 1.0, knots))
    starts = starts[:n_starts]
    span = np.array(starts)
    bounds = list(zip((span.min(axis=0) - 30.0).tolist(), (span.max(axis=0) + 30.0).tolist()))

    jobs = [(objective, s, bounds, maxfev) for s in starts]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_run_start, jobs))
    else:
        results = [_run_start(j) for j in jobs]
    finite = [(f, i, x) for i, (x, f) in enumerate(results) if np.isfinite(f) and f < 1e300]
    if not finite:
        raise ConvergenceError("spectrum fit stagnated in every start", math.inf)
    fbest, _, theta = min(finite, key=lambda t: (t[0], t[1]))
    resid, norms = objective.profile(theta)

    max_chi = max(float(np.max(k @ objective.spectrum_nodes(theta))) for k in kernels)
    if max_chi < 0.05:
        unconstrained = True
    spline = LogLogSplineSpectrum(log_knots, theta, omega_max=hi)
    return SpectrumFit(spline=spline, normalizations=norms, residual=float(resid),
                       dof=n_points - n_params, knot_frequencies=np.exp(log_knots),
                       band=_sensitive_band(objective, theta), unconstrained=unconstrained,
                       start_residuals=[f for _, f in results])


def linear_scaling_report(points):
    """Weighted straight line tau_c = slope * n + intercept.

    ``points`` is a list of ``(n, tau_c, sigma)``; sigma <= 0 means unweighted.
    Returns ``(slope, intercept, r_squared)``.
    """
    arr = np.asarray(points, dtype=float)
    if arr.ndim != 2 or arr.shape[0] < 3:
        raise ValidationError("need at least 3 (n, tau_c, sigma) points")
    n, t = arr[:, 0], arr[:, 1]
    sig = arr[:, 2] if arr.shape[1] > 2 else np.zeros_like(n)
    w = np.where(sig > 0, 1.0 / np.where(sig > 0, sig, 1.0) ** 2, 1.0)
    if np.any(sig > 0) and np.any(sig <= 0):
        raise ValidationError("either all or no points must carry uncertainties")
    design = np.column_stack([n, np.ones_like(n)])
    sw = np.sqrt(w)
    (slope, intercept), *_ = np.linalg.lstsq(design * sw[:, None], t * sw, rcond=None)
    pred = slope * n + intercept
    mean = np.sum(w * t) / np.sum(w)
    ss_res = np.sum(w * (t - pred) ** 2)
    ss_tot = np.sum(w * (t - mean) ** 2)
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), float(r2)
