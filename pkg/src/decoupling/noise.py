"""
Noise power spectra of the qubit frequency offset and Gaussian trajectory synthesis.

Convention used throughout the package: S(omega) is the one-sided PSD of
delta(t) in rad^2/s, with omega in rad/s, normalized so that

.. math::

    \\langle\\delta(t)\\delta(t+u)\\rangle = \\frac{1}{\\pi}\\int_0^\\infty S(\\omega)\\cos(\\omega u)\\,d\\omega .

In particular the variance of delta is (1/pi) * integral of S.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import fft as sp_fft
from scipy import signal as sp_signal
from scipy.interpolate import CubicSpline
from scipy.interpolate import CubicSpline

from .exceptions import ValidationError

__all__ = [
    "NoiseSpectrum",
    "WhiteSpectrum",
    "PowerLawSpectrum",
    "LorentzianSpectrum",
    "LogLogSplineSpectrum",
    "TabulatedSpectrum",
    "SumSpectrum",
    "spectrum_eval",
    "spectrum_from_dict",
    "load_spectrum",
    "NoiseTrajectory",
    "synthesize_trajectory",
    "synthesize_batch",
    "estimate_psd",
    "RMS_WARNING_CAP",
]

# 2*pi x 10 kHz
RMS_WARNING_CAP = 2 * np.pi * 1e4


class NoiseSpectrum:
    """Base class. Subclasses implement ``_eval`` on a positive float array."""

    variant = "abstract"

    def __call__(self, omega):
        w = np.asarray(omega, dtype=float)
        out = self._eval(np.maximum(w, 1e-300))
        return out if out.ndim else float(out)

    def _eval(self, w):
        raise NotImplementedError

    @property
    def omega_max(self) -> float:
        """Upper edge of the support (``inf`` if unbounded)."""
        return math.inf

    def breakpoints(self) -> list:
        """Frequencies where S or its derivative is discontinuous."""
        return []

    def to_dict(self) -> dict:
        raise NotImplementedError

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    def __add__(self, other):
        return SumSpectrum(((1.0, self), (1.0, other)))

    def __mul__(self, a):
        return SumSpectrum(((float(a), self),))

    __rmul__ = __mul__


@dataclass(frozen=True, eq=False)
class WhiteSpectrum(NoiseSpectrum):
    """Flat S0 up to ``omega_max`` (inclusive), zero above."""

    s0: float
    omega_max_: float = math.inf
    variant = "white"

    def __post_init__(self):
        if self.s0 < 0:
            raise ValidationError("white spectrum level must be >= 0")
        if not self.omega_max_ > 0:
            raise ValidationError("omega_max must be positive")

    @property
    def omega_max(self):
        return self.omega_max_

    def _eval(self, w):
        return np.where(w <= self.omega_max_, self.s0, 0.0)

    def breakpoints(self):
        return [self.omega_max_] if math.isfinite(self.omega_max_) else []

    def to_dict(self):
        return {"variant": "white", "s0": self.s0,
                "omega_max": None if math.isinf(self.omega_max_) else self.omega_max_}


@dataclass(frozen=True, eq=False)
class PowerLawSpectrum(NoiseSpectrum):
    """A (omega/omega_ref)^(-exponent) on [omega_min, omega_max], zero outside."""

    amplitude: float
    exponent: float
    omega_min: float
    omega_max_: float
    omega_ref: float = 1.0
    variant = "power_law"

    def __post_init__(self):
        if self.amplitude < 0:
            raise ValidationError("power-law amplitude must be >= 0")
        if not 0 < self.omega_min < self.omega_max_:
            raise ValidationError(
                f"need 0 < omega_min < omega_max, got {self.omega_min}, {self.omega_max_}")
        if not self.omega_ref > 0:
            raise ValidationError("omega_ref must be positive")

    @property
    def omega_max(self):
        return self.omega_max_

    def _eval(self, w):
        inside = (w >= self.omega_min) & (w <= self.omega_max_)
        return np.where(inside, self.amplitude * (w / self.omega_ref) ** (-self.exponent), 0.0)

    def breakpoints(self):
        return [self.omega_min] + ([self.omega_max_] if math.isfinite(self.omega_max_) else [])

    def to_dict(self):
        return {"variant": "power_law", "amplitude": self.amplitude, "exponent": self.exponent,
                "omega_min": self.omega_min,
                "omega_max": None if math.isinf(self.omega_max_) else self.omega_max_,
                "omega_ref": self.omega_ref}


@dataclass(frozen=True, eq=False)
class LorentzianSpectrum(NoiseSpectrum):
    """Ornstein-Uhlenbeck noise: covariance variance*exp(-rate*|u|).

    S(omega) = 2 variance rate / (rate^2 + omega^2).
    """

    variance: float
    rate: float
    variant = "lorentzian"

    def __post_init__(self):
        if self.variance < 0 or not self.rate > 0:
            raise ValidationError("lorentzian needs variance >= 0 and rate > 0")

    def _eval(self, w):
        return 2.0 * self.variance * self.rate / (self.rate ** 2 + w ** 2)

    def to_dict(self):
        return {"variant": "lorentzian", "variance": self.variance, "rate": self.rate}


class LogLogSplineSpectrum(NoiseSpectrum):
    """Natural cubic spline through (log omega, log S) knots.

    Below the first knot S is held flat; above the last knot the log-log
    slope at the last knot is continued; S is zero above ``omega_max``.
    """

    variant = "loglog_spline"

    def __init__(self, log_omega, log_s, omega_max=math.inf):
        x = np.asarray(log_omega, dtype=float)
        y = np.asarray(log_s, dtype=float)
        if x.ndim != 1 or x.shape != y.shape or x.size < 4:
            raise ValidationError("spline spectrum needs >= 4 matching knots")
        if np.any(np.diff(x) <= 0):
            raise ValidationError("spline knots must be strictly increasing in log omega")
        if not np.all(np.isfinite(y)):
            raise ValidationError("spline knot values must be finite")
        if not omega_max > math.exp(x[0]):
            raise ValidationError("omega_max must exceed the first knot")
        self.log_omega = x
        self.log_s = y
        self.omega_max_ = float(omega_max)
        self._spline = CubicSpline(x, y, bc_type="natural")
        self._end_slope = float(self._spline(x[-1], 1))

    @property
    def omega_max(self):
        return self.omega_max_

    @property
    def knot_frequencies(self) -> np.ndarray:
        return np.exp(self.log_omega)

    def log_slope(self, omega):
        """d log S / d log omega of the spline (0 below, end slope above)."""
        lw = np.log(np.asarray(omega, dtype=float))
        inner = self._spline(np.clip(lw, self.log_omega[0], self.log_omega[-1]), 1)
        return np.where(lw < self.log_omega[0], 0.0,
                        np.where(lw > self.log_omega[-1], self._end_slope, inner))

    def _eval(self, w):
        lw = np.log(w)
        x0, x1 = self.log_omega[0], self.log_omega[-1]
        ly = self._spline(np.clip(lw, x0, x1))
        above = lw > x1
        if np.any(above):
            ly = np.where(above, self.log_s[-1] + self._end_slope * (lw - x1), ly)
        return np.where(w <= self.omega_max_, np.exp(ly), 0.0)

    def breakpoints(self):
        pts = list(np.exp(self.log_omega))
        if math.isfinite(self.omega_max_):
            pts.append(self.omega_max_)
        return pts

    def to_dict(self):
        return {"variant": "loglog_spline", "log_omega": self.log_omega.tolist(),
                "log_s": self.log_s.tolist(),
                "omega_max": None if math.isinf(self.omega_max_) else self.omega_max_}


class TabulatedSpectrum(NoiseSpectrum):
    """Samples (omega, S), linearly interpolated; flat below, zero above the last sample."""

    variant = "tabulated"

    def __init__(self, omega, s):
        w = np.asarray(omega, dtype=float)
        v = np.asarray(s, dtype=float)
        if w.ndim != 1 or w.shape != v.shape or w.size < 2:
            raise ValidationError("tabulated spectrum needs >= 2 matching samples")
        if np.any(np.diff(w) <= 0) or w[0] < 0:
            raise ValidationError("tabulated frequencies must be >= 0 and increasing")
        if np.any(v < 0) or not np.all(np.isfinite(v)):
            raise ValidationError("tabulated spectrum values must be finite and >= 0")
        self.omega = w
        self.s = v

    @property
    def omega_max(self):
        return float(self.omega[-1])

    def _eval(self, w):
        return np.interp(w, self.omega, self.s, left=self.s[0], right=0.0)

    def breakpoints(self):
        return [float(self.omega[-1])]

    def to_dict(self):
        return {"variant": "tabulated", "omega": self.omega.tolist(), "s": self.s.tolist()}


class SumSpectrum(NoiseSpectrum):
    """Nonnegative combination sum_k w_k S_k."""

    variant = "sum"

    def __init__(self, terms):
        flat = []
        for w, s in terms:
            if w < 0:
                raise ValidationError("spectrum weights must be >= 0")
            if isinstance(s, SumSpectrum):
                flat.extend((w * w2, s2) for w2, s2 in s.terms)
            else:
                flat.append((float(w), s))
        self.terms = tuple(flat)

    @property
    def omega_max(self):
        return max(s.omega_max for _, s in self.terms)

    def _eval(self, w):
        return sum(wt * s._eval(w) for wt, s in self.terms)

    def breakpoints(self):
        return sorted({b for _, s in self.terms for b in s.breakpoints()})

    def to_dict(self):
        return {"variant": "sum",
                "terms": [{"weight": w, "spectrum": s.to_dict()} for w, s in self.terms]}


def spectrum_eval(spectrum: NoiseSpectrum, omega):
    """S(omega) for omega > 0 (rad/s)."""
    if np.any(np.asarray(omega) <= 0):
        raise ValidationError("spectrum is only defined for omega > 0")
    return spectrum(omega)


def _opt_inf(v):
    return math.inf if v is None else float(v)


def spectrum_from_dict(d: dict) -> NoiseSpectrum:
    try:
        kind = d["variant"]
        if kind == "white":
            return WhiteSpectrum(float(d["s0"]), _opt_inf(d.get("omega_max")))
        if kind == "power_law":
            return PowerLawSpectrum(float(d["amplitude"]), float(d["exponent"]),
                                    float(d["omega_min"]), _opt_inf(d.get("omega_max")),
                                    float(d.get("omega_ref", 1.0)))
        if kind == "lorentzian":
            return LorentzianSpectrum(float(d["variance"]), float(d["rate"]))
        if kind == "loglog_spline":
            return LogLogSplineSpectrum(d["log_omega"], d["log_s"], _opt_inf(d.get("omega_max")))
        if kind == "tabulated":
            return TabulatedSpectrum(d["omega"], d["s"])
        if kind == "sum":
            return SumSpectrum([(float(t["weight"]), spectrum_from_dict(t["spectrum"]))
                                for t in d["terms"]])
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"malformed spectrum record: {exc}") from exc
    raise ValidationError(f"unknown spectrum variant {d.get('variant')!r}")


def load_spectrum(path) -> NoiseSpectrum:
    return spectrum_from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# time-domain synthesis
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class NoiseTrajectory:
    """delta(t) sampled at t = k*dt, held constant over each step."""

    dt: float
    samples: np.ndarray
    seed: object = None

    def __post_init__(self):
        if not self.dt > 0:
            raise ValidationError("trajectory dt must be positive")
        s = np.asarray(self.samples, dtype=float)
        if not np.all(np.isfinite(s)):
            raise ValidationError("trajectory samples must be finite")
        object.__setattr__(self, "samples", s)

    @property
    def duration(self) -> float:
        return self.dt * self.samples.size

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.samples.size)

    def to_csv(self, path) -> None:
        data = np.column_stack([self.times, self.samples])
        np.savetxt(path, data, delimiter=",", header="t_s,delta_rad_per_s", comments="",
                   fmt="%.17g")


_GL8 = np.polynomial.legendre.leggauss(8)
# the lowest LOW_BINS bins of the FFT grid are replaced by LOW_LEVELS finer
# linear grids, each 16x finer than the one above, before the rest is static
LOW_BINS = 16
LOW_LEVELS = 3
LOW_PER_LEVEL = 240
LOW_KNOTS = 1024


def _integrate_bins(spectrum, lo, hi):
    """(1/pi) * integral of S over each [lo, hi], 8-point Gauss-Legendre per bin."""
    xg, wg = _GL8
    mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
    pts = mid[:, None] + half[:, None] * xg[None, :]
    return (spectrum(np.maximum(pts, 1e-300)) @ wg) * half / np.pi


def _static_power(spectrum, top):
    # [0, top] can hide a peak much narrower than top: geometric panels
    edges = np.concatenate([[0.0], top * np.logspace(-12, 0, 97)])
    return float(np.sum(_integrate_bins(spectrum, edges[:-1], edges[1:])))


def _bin_powers(spectrum, n_freq, d_omega):
    """Variance carried by each harmonic bin, (1/pi) * integral of S over the bin.

    Bin 0 is the quasi-static piece [0, d_omega/2]; bin k >= 1 is centred on
    k*d_omega. S above the Nyquist bin is dropped by construction.
    """
    k = np.arange(n_freq)
    out = _integrate_bins(spectrum, np.maximum((k - 0.5) * d_omega, 0.0), (k + 0.5) * d_omega)
    out[0] = _static_power(spectrum, 0.5 * d_omega)
    return out


@lru_cache(maxsize=32)
def _cached_powers(spectrum, n_freq, d_omega):
    return _bin_powers(spectrum, n_freq, d_omega)


@lru_cache(maxsize=32)
def _low_band(spectrum, d_omega):
    """Harmonics refining [0, (LOW_BINS - 1/2) d_omega] and the static rest.

    Level j covers [top/16, top) on a linear grid whose bins are at most
    1/16 of their lower edge wide, so steep spectra and band edges far
    below d_omega keep their shape. Returns (frequencies, powers, static).
    """
    top = (LOW_BINS - 0.5) * d_omega
    freqs, powers = [], []
    for _ in range(LOW_LEVELS):
        edges = np.linspace(top / 16.0, top, LOW_PER_LEVEL + 1)
        freqs.append(0.5 * (edges[:-1] + edges[1:]))
        powers.append(_integrate_bins(spectrum, edges[:-1], edges[1:]))
        top /= 16.0
    return np.concatenate(freqs), np.concatenate(powers), _static_power(spectrum, top)


def _grid(dt, duration):
    n_samples = int(math.ceil(duration / dt - 1e-9)) + 1
    # extended period >= 4x the duration, padded to an FFT-friendly even length
    m = sp_fft.next_fast_len(4 * n_samples, real=True)
    m += m % 2
    d_omega = 2 * np.pi / (m * dt)
    return n_samples, m, d_omega


def _check_resolution(spectrum, dt, m):
    if m // 2 < 16:
        raise ValidationError(f"only {m // 2} harmonics; lengthen duration or shrink dt")
    if math.isfinite(spectrum.omega_max) and dt > np.pi / spectrum.omega_max * (1 + 1e-9):
        raise ValidationError(
            f"dt={dt:g} s does not resolve omega_max={spectrum.omega_max:g} rad/s "
            f"(need dt <= {np.pi / spectrum.omega_max:g})")


def synthesize_batch(spectrum: NoiseSpectrum, dt: float, duration: float, rngs,
                     random_amplitudes: bool = True) -> np.ndarray:
    """Trajectories for a list of generators, one row per generator.

    Each generator is consumed in the same way as by
    :func:`synthesize_trajectory`, so rows are reproducible individually.
    """
    n_samples, m, d_omega = _grid(dt, duration)
    _check_resolution(spectrum, dt, m)
    n_freq = m // 2 + 1
    powers = _cached_powers(spectrum, n_freq, d_omega).copy()
    powers[:LOW_BINS] = 0.0
    low_freqs, low_powers, static = _low_band(spectrum, d_omega)
    n_low = low_freqs.size
    spec = np.empty((len(rngs), n_freq), dtype=complex)
    low = np.empty((len(rngs), n_low), dtype=complex)
    offset = np.empty(len(rngs))
    for r, rng in enumerate(rngs):
        if random_amplitudes:
            # complex Gaussian coefficients: Rayleigh amplitude, uniform phase
            z = rng.standard_normal(2 * (n_freq + n_low)).view(np.complex128)
            offset[r] = rng.standard_normal()
        else:
            z = np.sqrt(2.0) * np.exp(2j * np.pi * rng.random(n_freq + n_low))
            offset[r] = np.sqrt(2.0) * np.cos(2 * np.pi * rng.random())
        spec[r] = z[:n_freq] * np.sqrt(powers)
        low[r] = z[n_freq:] * np.sqrt(low_powers)
    # delta_m = Re sum_k c_k exp(2 pi i k m / M); irfft halves the interior bins
    spec[:, 0] = 0.0
    spec[:, 1:-1] *= m / 2.0
    spec[:, -1] = spec[:, -1].real * m
    out = sp_fft.irfft(spec, n=m, axis=1)[:, :n_samples]
    # the low band spans under 25 rad over the run: a coarse grid plus a
    # cubic spline is exact to ~1e-10 relative
    coarse = np.linspace(0.0, (n_samples - 1) * dt, min(n_samples, LOW_KNOTS))
    phase = np.outer(low_freqs, coarse)
    cos, sin = np.cos(phase), np.sin(phase)
    # row by row so each row is bitwise independent of the batch; contiguous
    # copies because matmul on strided views skips BLAS
    slow = np.array([np.ascontiguousarray(c.real) @ cos - np.ascontiguousarray(c.imag) @ sin
                     for c in low]).reshape(len(rngs), coarse.size)
    if coarse.size < n_samples:
        slow = CubicSpline(coarse, slow, axis=1)(dt * np.arange(n_samples))
    out += slow
    out += np.sqrt(static) * offset[:, None]
    return out


def synthesize_trajectory(spectrum: NoiseSpectrum, dt: float, duration: float, seed,
                          random_amplitudes: bool = True,
                          rms_cap: float = RMS_WARNING_CAP) -> NoiseTrajectory:
    """Gaussian stationary realization of ``spectrum`` by harmonic superposition.

    Harmonics sit on a linear grid of spacing 2*pi/(4*duration) up to the
    Nyquist frequency pi/dt. Below 16 grid spacings the grid is refined in
    three levels of 16x finer linear grids, and what lies below those is a
    quasi-static offset. Each bin carries the variance (1/pi) * integral of
    S over it. With
    ``random_amplitudes`` (default) the bin coefficients are complex
    Gaussian, which makes the process exactly Gaussian; otherwise they have
    fixed amplitude and uniform random phase.

    Parameters
    ----------
    seed : int or sequence of int or numpy.random.SeedSequence
        Full determinism: equal seeds give bit-identical samples.
    """
    if not dt > 0 or not duration >= dt:
        raise ValidationError("need dt > 0 and duration >= dt")
    rng = np.random.default_rng(seed)
    samples = synthesize_batch(spectrum, dt, duration, [rng], random_amplitudes)[0]
    rms = float(np.sqrt(np.mean(samples ** 2)))
    if rms > rms_cap:
        warnings.warn(f"trajectory RMS {rms:.3g} rad/s exceeds cap {rms_cap:.3g} rad/s",
                      RuntimeWarning, stacklevel=2)
    return NoiseTrajectory(dt=dt, samples=samples, seed=seed)


def estimate_psd(trajectory: NoiseTrajectory, n_segments: int = 32) -> TabulatedSpectrum:
    """Welch estimate of S(omega) in the package convention.

    Hann-windowed segments with 50 % overlap, sized so that about
    ``n_segments`` segments are averaged.
    """
    x = np.asarray(trajectory.samples, dtype=float)
    if x.size < 1024:
        raise ValidationError(f"need >= 1024 samples for a PSD estimate, got {x.size}")
    nperseg = max(64, int(2 * x.size // (n_segments + 1)))
    f, p = sp_signal.welch(x, fs=1.0 / trajectory.dt, window="hann", nperseg=nperseg,
                           noverlap=nperseg // 2, detrend=False, scaling="density")
    # variance = integral p df = (1/pi) integral S domega with omega = 2 pi f
    return TabulatedSpectrum(2 * np.pi * f, p / 2.0)
