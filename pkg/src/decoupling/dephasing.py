"""
Filter-function prediction of Ramsey contrast under Gaussian dephasing noise.

For a sequence whose sign function s(t) flips at every pi-pulse,

.. math::

    F(\\omega\\tau) = \\left|\\omega\\int_0^\\tau s(t) e^{i\\omega t} dt\\right|^2, \\qquad
    \\chi(\\tau) = \\int_0^\\infty \\frac{S(\\omega) F(\\omega\\tau)}{2\\pi\\omega^2} d\\omega,

and the contrast is C = N exp(-chi). With the PSD convention of
:mod:`decoupling.noise`, chi equals half the accumulated phase variance.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import mpmath
import numpy as np

from .exceptions import ConvergenceError, QuadratureError, ValidationError
from .noise import NoiseSpectrum, LorentzianSpectrum
from .sequences import PulseSequence

__all__ = [
    "FilterEvaluation",
    "CoherenceModel",
    "filter_function",
    "filter_function_finite",
    "sequence_edges",
    "chi",
    "chi_kernel",
    "coherence",
    "coherence_time",
    "coherence_curve",
    "write_coherence_csv",
    "write_filter_csv",
]

_GL = {m: np.polynomial.legendre.leggauss(m) for m in (8, 10, 16, 20)}


@dataclass(frozen=True)
class FilterEvaluation:
    x: float
    value: float

    def __post_init__(self):
        if self.value < 0:
            raise ValidationError("filter values are nonnegative")


def sequence_edges(alphas, half_width: float = 0.0):
    """Edge times and coefficients of the sign function on [0, 1].

    ``half_width`` is half the pulse length in units of tau; the sign
    function is zero inside each pulse window. Returns ``(betas, coeffs)``
    with ``F(x) = |sum_k coeffs_k exp(i x betas_k)|**2``.
    """
    a = [float(v) for v in alphas]
    h = float(half_width)
    starts = [0.0] + [v + h for v in a]
    stops = [v - h for v in a] + [1.0]
    for lo, hi in zip(starts, stops):
        if hi < lo - 1e-15:
            raise ValidationError("pulse windows overlap or cross the sequence boundary")
    acc = {}
    for i, (lo, hi) in enumerate(zip(starts, stops)):
        s = (-1.0) ** i
        acc[hi] = acc.get(hi, 0.0) + s
        acc[lo] = acc.get(lo, 0.0) - s
    betas = np.array(sorted(acc))
    coeffs = np.array([acc[b] for b in betas])
    keep = coeffs != 0.0
    return betas[keep], coeffs[keep]


def _filter_from_edges(betas, coeffs, x):
    x = np.asarray(x, dtype=float)
    flat = x.ravel()
    out = np.empty(flat.size)
    chunk = max(1, 2 ** 18 // max(1, betas.size))
    for i in range(0, flat.size, chunk):
        ph = np.exp(1j * np.outer(flat[i:i + chunk], betas)) @ coeffs
        out[i:i + chunk] = ph.real ** 2 + ph.imag ** 2
    return out.reshape(x.shape)


def _filter_mp(alphas, x):
    terms = [mpmath.mpf(0)] + list(alphas) + [mpmath.mpf(1)]
    total = mpmath.mpc(0)
    for i in range(len(terms) - 1):
        total += (-1) ** i * (mpmath.expj(x * terms[i + 1]) - mpmath.expj(x * terms[i]))
    return abs(total) ** 2


def filter_function(alphas, x):
    """Filter function of instantaneous pulses at normalized times ``alphas``.

    Vectorized over ``x`` for float timings. If the timings are
    ``mpmath.mpf`` (e.g. ``udd_times(n, precision=60)``) the sum is evaluated
    in mpmath at the current working precision, which is needed to see the
    high-order vanishing of F near x = 0.
    """
    if any(isinstance(a, mpmath.mpf) for a in alphas):
        if np.ndim(x):
            return [_filter_mp(alphas, mpmath.mpf(v)) for v in np.ravel(x)]
        return _filter_mp(alphas, mpmath.mpf(x))
    if np.any(np.asarray(x) < 0):
        raise ValidationError("filter argument x = omega*tau must be >= 0")
    betas, coeffs = sequence_edges(alphas)
    out = _filter_from_edges(betas, coeffs, x)
    return out if np.ndim(out) else float(out)


def _half_width(sequence: PulseSequence, tau=None):
    tau = sequence.tau if tau is None else tau
    return 0.5 * sequence.pulse_duration / tau


def filter_function_finite(sequence: PulseSequence, x, tau=None):
    """Filter function with finite pulses modelled as dead time.

    The qubit is taken to be insensitive to dephasing during each pulse
    window of length ``sequence.pulse_duration`` centred on its nominal
    time. Reduces to :func:`filter_function` for zero pulse length.
    """
    if np.any(np.asarray(x) < 0):
        raise ValidationError("filter argument x = omega*tau must be >= 0")
    betas, coeffs = sequence_edges(sequence.alphas, _half_width(sequence, tau))
    out = _filter_from_edges(betas, coeffs, x)
    return out if np.ndim(out) else float(out)


# ---------------------------------------------------------------------------
# chi integral
# ---------------------------------------------------------------------------

_X_LOW = 1e-9
_X_OSC = 2000.0


def _panel_layout(betas, tau, spectrum, x_osc_min=_X_OSC):
    """Initial panel edges in x = omega*tau, split into oscillatory and tail parts."""
    gaps = np.diff(betas)
    dmin = float(gaps.min()) if gaps.size else 1.0
    x_osc = min(max(x_osc_min, 50.0 / dmin), 2e5)
    x_hi = spectrum.omega_max * tau
    low = np.geomspace(_X_LOW, np.pi, 32)
    osc_end = min(x_osc, x_hi)
    mid = np.arange(np.pi, osc_end, np.pi)
    osc = np.unique(np.concatenate([low, mid, [osc_end]]))
    osc = osc[osc <= osc_end]
    marks = [b * tau for b in spectrum.breakpoints()]
    if isinstance(spectrum, LorentzianSpectrum):
        marks.append(spectrum.rate * tau)
    if x_hi > x_osc:
        top = x_hi if math.isfinite(x_hi) else x_osc * 1e10
        tail = np.geomspace(x_osc, top, max(2, int(np.log(top / x_osc) / np.log(1.5)) + 1))
    else:
        tail = np.array([])
    marks = np.asarray(marks, dtype=float)
    osc = np.union1d(osc, marks[(marks > osc[0]) & (marks < osc[-1])])
    if tail.size:
        tail = np.union1d(tail, marks[(marks > tail[0]) & (marks < tail[-1])])
    return osc, tail


def _integrand(kind, x, tau, spectrum, betas, coeffs, fbar):
    s = spectrum(x / tau)
    if kind == "osc":
        f = _filter_from_edges(betas, coeffs, x)
    else:
        f = fbar
    return s * f / x ** 2


def _adaptive(edges, kind, tau, spectrum, betas, coeffs, fbar, rtol, atol, max_panels):
    lo, hi = edges[:-1].copy(), edges[1:].copy()
    xa, wa = _GL[10]
    xb, wb = _GL[20]
    total = err = 0.0
    for _ in range(60):
        if lo.size == 0:
            return 0.0, 0.0
        mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
        fa = _integrand(kind, mid[:, None] + half[:, None] * xa, tau, spectrum, betas, coeffs,
                        fbar)
        fb = _integrand(kind, mid[:, None] + half[:, None] * xb, tau, spectrum, betas, coeffs,
                        fbar)
        ia = (fa @ wa) * half
        ib = (fb @ wb) * half
        e = np.abs(ib - ia)
        total, err = float(ib.sum()), float(e.sum())
        target = max(rtol * abs(total), atol)
        if err <= target:
            return total, err
        bad = e > target / lo.size
        if not bad.any():
            bad = e == e.max()
        if lo.size + bad.sum() > max_panels:
            break
        m = mid[bad]
        lo = np.concatenate([lo[~bad], lo[bad], m])
        hi = np.concatenate([hi[~bad], m, hi[bad]])
    raise QuadratureError("chi quadrature did not reach tolerance", err)


def chi(sequence: PulseSequence, tau: float, spectrum: NoiseSpectrum, rtol: float = 1e-8,
        atol: float = 1e-14, max_panels: int = 200000) -> float:
    """Decoherence exponent chi(tau) for ``sequence`` scaled to duration ``tau``.

    Adaptive Gauss-Legendre panels on x = omega*tau: geometric below pi,
    one panel per lobe (width pi) up to the oscillatory cutoff, then a tail
    where F is replaced by its mean value sum(c_k^2) because it oscillates
    much faster than S varies. Spectrum breakpoints are panel edges.
    ``atol`` is an absolute floor on the error of chi itself; it only
    matters when chi is so small that the filter sum is at roundoff.

    Raises
    ------
    QuadratureError
        Carrying the error estimate if the tolerance is not reached.
    """
    if not tau > 0:
        raise ValidationError("tau must be positive")
    betas, coeffs = sequence_edges(sequence.alphas, _half_width(sequence, tau))
    fbar = float(np.sum(coeffs ** 2))
    osc, tail = _panel_layout(betas, tau, spectrum)
    scale = tau / (2 * np.pi)
    floor = atol / scale
    i1, _ = _adaptive(osc, "osc", tau, spectrum, betas, coeffs, fbar, rtol, floor, max_panels)
    i2 = 0.0
    if tail.size:
        i2, _ = _adaptive(tail, "tail", tau, spectrum, betas, coeffs, fbar, rtol, floor,
                          max_panels)
    return max(0.0, scale * (i1 + i2))


def chi_kernel(sequence: PulseSequence, taus, omega_nodes, lobe_points: int = 16) -> np.ndarray:
    """Matrix W with chi(taus[i]) ~= W[i] @ S(omega_nodes).

    S is represented as piecewise linear in log omega between the nodes,
    held flat below the first node and zero above the last. Used by the
    spectrum fit, where chi must be evaluated for many candidate spectra.
    """
    nodes = np.asarray(omega_nodes, dtype=float)
    if nodes.ndim != 1 or nodes.size < 2 or np.any(np.diff(nodes) <= 0):
        raise ValidationError("kernel nodes must be increasing")
    lnodes = np.log(nodes)
    xg, wg = _GL[lobe_points]
    out = np.zeros((len(taus), nodes.size))
    for row, tau in enumerate(taus):
        betas, coeffs = sequence_edges(sequence.alphas, _half_width(sequence, tau))
        fbar = float(np.sum(coeffs ** 2))
        gaps = np.diff(betas)
        x_osc = min(max(_X_OSC, 50.0 / (float(gaps.min()) if gaps.size else 1.0)), 2e5)
        x_top = nodes[-1] * tau
        low = np.geomspace(_X_LOW, np.pi, 48)
        mid = np.arange(np.pi, min(x_osc, x_top), np.pi / 2)
        osc = np.union1d(np.concatenate([low, mid]), nodes * tau)
        osc = osc[osc <= min(x_osc, x_top)]
        if osc[-1] < min(x_osc, x_top):
            osc = np.append(osc, min(x_osc, x_top))
        parts = [(osc, False)]
        if x_top > x_osc:
            tail = np.union1d(np.geomspace(x_osc, x_top, 200), nodes * tau)
            parts.append((tail[tail >= x_osc], True))
        for edges, is_tail in parts:
            lo, hi = edges[:-1], edges[1:]
            mid_, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
            x = (mid_[:, None] + half[:, None] * xg).ravel()
            w = (half[:, None] * wg).ravel()
            f = fbar if is_tail else _filter_from_edges(betas, coeffs, x)
            k = w * f / x ** 2 * tau / (2 * np.pi)
            lw = np.log(x / tau)
            j = np.clip(np.searchsorted(lnodes, lw) - 1, 0, nodes.size - 2)
            t = np.clip((lw - lnodes[j]) / (lnodes[j + 1] - lnodes[j]), 0.0, 1.0)
            inside = lw <= lnodes[-1]
            np.add.at(out[row], j[inside], (k * (1 - t))[inside])
            np.add.at(out[row], j[inside] + 1, (k * t)[inside])
    return out


@dataclass(frozen=True)
class CoherenceModel:
    """Normalization, pulse sequence and noise spectrum of one prediction."""

    sequence: PulseSequence
    spectrum: NoiseSpectrum
    normalization: float = 1.0

    def __post_init__(self):
        if not 0 < self.normalization <= 1:
            raise ValidationError("normalization N must lie in (0, 1]")


def coherence(model: CoherenceModel, tau: float, **kwargs) -> float:
    """C(tau) = N exp(-chi(tau))."""
    return model.normalization * math.exp(-chi(model.sequence, tau, model.spectrum, **kwargs))


def coherence_curve(model: CoherenceModel, taus, **kwargs):
    """Arrays (contrast, chi) on a tau grid."""
    chis = np.array([chi(model.sequence, t, model.spectrum, **kwargs) for t in taus])
    return model.normalization * np.exp(-chis), chis


def coherence_time(model: CoherenceModel, tau_guess: float = 1e-3, rtol: float = 1e-4,
                   tau_range=(1e-12, 1e6)) -> float:
    """1/e time: the tau where chi(tau) = 1, so C = N/e.

    Geometric bracket expansion by factors of 2 from ``tau_guess`` followed
    by bisection in log tau to relative width ``rtol``.
    """
    seq, spec = model.sequence, model.spectrum
    tmin = max(tau_range[0], seq.n * seq.pulse_duration * (1 + 1e-6))

    def g(t):
        return chi(seq, t, spec) - 1.0

    a = b = min(max(tau_guess, tmin * 2), tau_range[1])
    gb = g(b)
    if gb < 0:
        while gb < 0:
            a = b
            b *= 2.0
            if b > tau_range[1]:
                raise ConvergenceError(
                    "no 1/e crossing below the upper tau limit; chi may saturate", gb + 1)
            gb = g(b)
    else:
        ga = gb
        while ga >= 0:
            b = a
            a /= 2.0
            if a <= tmin:
                raise ConvergenceError("chi exceeds 1 already at the shortest feasible tau",
                                       ga + 1)
            ga = g(a)
    while b / a - 1 > rtol:
        m = math.sqrt(a * b)
        if g(m) < 0:
            a = m
        else:
            b = m
    return math.sqrt(a * b)


def write_coherence_csv(path, taus, contrasts, chis) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["tau_s", "contrast", "chi"])
        for row in zip(taus, contrasts, chis):
            w.writerow([repr(float(v)) for v in row])


def write_filter_csv(path, xs, values) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "F"])
        for x, f in zip(xs, values):
            w.writerow([repr(float(x)), repr(float(f))])
