"""
Time-domain emulation of a Ramsey experiment with a decoupling sequence.

Each shot draws its own noise trajectory, evolves the Bloch vector through
pi/2 - [free / pi]... - pi/2 and samples a projective measurement. Free
evolution under a piecewise-constant detuning is a z rotation by the
accumulated phase; finite pulses are integrated step by step with the
exact rotation for constant (detuning, Rabi frequency) on each step.
"""
from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .exceptions import ConvergenceError, ValidationError
from .noise import NoiseSpectrum, NoiseTrajectory, _cached_powers, _grid, synthesize_batch
from .sequences import PulseSequence
from .spectroscopy import CoherenceCurve

__all__ = [
    "PulseParams",
    "FringeDataset",
    "ContrastEstimate",
    "evolve_bloch",
    "bloch_vectors",
    "apply_readout_error",
    "default_phases",
    "ramsey_fringe",
    "fit_fringe",
    "coherence_curve_mc",
    "choose_dt",
    "PulseErrorFloor",
    "pulse_error_floor",
]

CHUNK = 256
MAX_STEP_PHASE = 0.05


@dataclass(frozen=True)
class PulseParams:
    """Drive and readout parameters.

    ``pi_pulse_phase_mode`` sets the pi-pulse axis relative to the first
    pi/2 pulse: ``"fixed_x"`` (CP, perpendicular to the prepared Bloch
    vector) or ``"quadrature_y"`` (CPMG, parallel to it). Per-pulse phases
    from the sequence are added on top.
    """

    rabi_frequency: float = 2 * np.pi * 18e3
    pi_pulse_phase_mode: str = "quadrature_y"
    readout_error: float = 0.002
    instantaneous: bool = False

    def __post_init__(self):
        if self.pi_pulse_phase_mode not in ("fixed_x", "quadrature_y"):
            raise ValidationError(f"unknown pi-pulse phase mode {self.pi_pulse_phase_mode!r}")
        if not 0 <= self.readout_error < 0.5:
            raise ValidationError("readout_error must lie in [0, 0.5)")
        if not self.instantaneous and not self.rabi_frequency > 0:
            raise ValidationError("rabi_frequency must be positive for finite pulses")

    @property
    def pi_duration(self) -> float:
        return 0.0 if self.instantaneous else math.pi / self.rabi_frequency

    @property
    def axis_offset(self) -> float:
        return 0.0 if self.pi_pulse_phase_mode == "fixed_x" else math.pi / 2


@dataclass(frozen=True)
class FringeDataset:
    """Phase-scan outcomes of one Ramsey run."""

    phases: np.ndarray
    successes: np.ndarray
    trials: np.ndarray
    tau: float = float("nan")
    sequence_label: str = ""

    def __post_init__(self):
        ph = np.asarray(self.phases, dtype=float)
        k = np.asarray(self.successes, dtype=np.int64)
        n = np.asarray(self.trials, dtype=np.int64)
        if not (ph.shape == k.shape == n.shape) or ph.ndim != 1:
            raise ValidationError("phases, successes and trials must be matching 1-d arrays")
        if np.any(n <= 0) or np.any(k < 0) or np.any(k > n):
            raise ValidationError("need 0 <= successes <= trials and trials > 0")
        if np.unique(np.round(ph, 12)).size < 6:
            raise ValidationError("a fringe needs at least 6 distinct phases")
        object.__setattr__(self, "phases", ph)
        object.__setattr__(self, "successes", k)
        object.__setattr__(self, "trials", n)

    @property
    def rates(self) -> np.ndarray:
        return self.successes / self.trials

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["phase_deg", "successes", "trials"])
            for p, k, n in zip(self.phases, self.successes, self.trials):
                w.writerow([repr(float(np.degrees(p))), int(k), int(n)])

    @classmethod
    def from_csv(cls, path, tau=float("nan"), sequence_label=""):
        try:
            data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        except (OSError, ValueError) as exc:
            raise ValidationError(f"cannot read fringe file {path}: {exc}") from exc
        return cls(np.radians(data[:, 0]), data[:, 1].astype(np.int64),
                   data[:, 2].astype(np.int64), tau, sequence_label)


@dataclass(frozen=True)
class ContrastEstimate:
    contrast: float
    phase_offset: float
    uncertainty: float
    n_bootstrap: int
    at_bound: bool = False


def default_phases() -> np.ndarray:
    """-450 deg to +450 deg in 20 steps of 45 deg."""
    return np.radians(np.linspace(-450.0, 450.0, 21))


def apply_readout_error(p, eps):
    """Symmetric bit-flip readout: p -> p(1-eps) + (1-p) eps."""
    return p * (1 - eps) + (1 - p) * eps


# ---------------------------------------------------------------------------
# Bloch evolution
# ---------------------------------------------------------------------------

def _rotate(v, axis, angle):
    """Rodrigues rotation of rows of ``v`` about unit ``axis`` rows by ``angle``."""
    c = np.cos(angle)[:, None]
    s = np.sin(angle)[:, None]
    dot = np.sum(axis * v, axis=1, keepdims=True)
    return v * c + np.cross(axis, v) * s + axis * dot * (1 - c)


def _rotate_z(v, angle):
    c, s = np.cos(angle), np.sin(angle)
    x = v[:, 0] * c - v[:, 1] * s
    y = v[:, 0] * s + v[:, 1] * c
    return np.column_stack([x, y, v[:, 2]])


def _timeline(sequence, params, tau):
    """Ordered list of ('pulse', t0, t1, phase, angle) / ('free', t0, t1) segments."""
    t_half = 0.5 * params.pi_duration
    t_pi = params.pi_duration
    segs = [("pulse", 0.0, t_half, 0.0, math.pi / 2)]
    cursor = t_half
    for a, ph in zip(sequence.alphas, sequence.pulse_phases):
        c = t_half + a * tau
        lo, hi = c - 0.5 * t_pi, c + 0.5 * t_pi
        if lo < cursor - 1e-15:
            raise ValidationError("pulse windows overlap or start before the first pi/2 pulse")
        segs.append(("free", cursor, lo))
        segs.append(("pulse", lo, hi, ph + params.axis_offset, math.pi))
        cursor = hi
    end = t_half + tau
    if cursor > end + 1e-15:
        raise ValidationError("last pi-pulse runs past the end of the sequence")
    segs.append(("free", cursor, end))
    segs.append(("pulse", end, end + t_half, None, math.pi / 2))
    return segs, end + t_half


def _reference_phase(sequence, params):
    # azimuth of the noiseless Bloch vector before the analysis pulse
    beta = math.pi / 2
    for ph in sequence.pulse_phases:
        beta = 2 * (ph + params.axis_offset) - beta
    return beta - math.pi / 2


def _phase_at(cum, samples, dt, t):
    k = min(int(t / dt), samples.shape[1] - 1)
    return cum[:, k] + samples[:, k] * (t - k * dt)


def _evolve_batch(sequence, params, samples, dt, ramsey_phases, tau=None):
    """Final Bloch vectors for a batch of trajectories (rows of ``samples``)."""
    tau = sequence.tau if tau is None else tau
    segs, t_end = _timeline(sequence, params, tau)
    b, m = samples.shape
    if m * dt < t_end * (1 - 1e-12):
        raise ValidationError(
            f"trajectory covers {m * dt:g} s but the sequence needs {t_end:g} s")
    cum = np.zeros((b, m + 1))
    np.cumsum(samples * dt, axis=1, out=cum[:, 1:])
    ref = _reference_phase(sequence, params)
    omega = params.rabi_frequency
    v = np.tile([0.0, 0.0, -1.0], (b, 1))
    ramsey_phases = np.broadcast_to(np.asarray(ramsey_phases, dtype=float), (b,))
    for seg in segs:
        if seg[0] == "free":
            _, t0, t1 = seg
            if t1 > t0:
                v = _rotate_z(v, _phase_at(cum, samples, dt, t1) - _phase_at(cum, samples, dt, t0))
            continue
        _, t0, t1, ph, angle = seg
        phase = ramsey_phases + ref if ph is None else np.full(b, ph)
        if t1 <= t0:
            axis = np.column_stack([np.cos(phase), np.sin(phase), np.zeros(b)])
            v = _rotate(v, axis, np.full(b, angle))
            continue
        k0 = int(t0 / dt)
        grid = np.arange(k0 + 1, int(math.ceil(t1 / dt))) * dt
        cuts = np.concatenate([[t0], grid[(grid > t0) & (grid < t1)], [t1]])
        cp, sp = np.cos(phase), np.sin(phase)
        for lo, hi in zip(cuts[:-1], cuts[1:]):
            k = min(int(0.5 * (lo + hi) / dt), m - 1)
            d = samples[:, k]
            rate = np.sqrt(omega ** 2 + d ** 2)
            axis = np.column_stack([omega * cp, omega * sp, d]) / rate[:, None]
            v = _rotate(v, axis, rate * (hi - lo))
    return v


def bloch_vectors(sequence: PulseSequence, params: PulseParams, trajectory: NoiseTrajectory,
                  ramsey_phase: float = 0.0) -> np.ndarray:
    """Final Bloch vector (x, y, z) for one trajectory."""
    return _evolve_batch(sequence, params, trajectory.samples[None, :], trajectory.dt,
                         ramsey_phase)[0]


def evolve_bloch(sequence: PulseSequence, params: PulseParams, trajectory: NoiseTrajectory,
                 ramsey_phase: float = 0.0) -> float:
    """Probability of measuring the upper state, before readout error.

    The qubit starts in the lower state; both pi/2 pulses are referenced so
    that a noiseless run with ``ramsey_phase = 0`` ends in the upper state.
    """
    z = bloch_vectors(sequence, params, trajectory, ramsey_phase)[2]
    return float(np.clip(0.5 * (1 + z), 0.0, 1.0))


# ---------------------------------------------------------------------------
# phase scans
# ---------------------------------------------------------------------------

def choose_dt(sequence, params, spectrum, tau, min_steps=1024, max_step_phase=MAX_STEP_PHASE):
    """Step size resolving the sequence and the spectrum's band.

    Pulses need no extra resolution: every step is an exact rotation for
    constant detuning. Halved until the RMS phase per step is below
    ``max_step_phase``.
    """
    t_total = tau + params.pi_duration
    dt = t_total / min_steps
    if math.isfinite(spectrum.omega_max):
        dt = min(dt, math.pi / spectrum.omega_max)
    for _ in range(30):
        _, m, dw = _grid(dt, t_total)
        rms = math.sqrt(float(np.sum(_cached_powers(spectrum, m // 2 + 1, dw))))
        if rms * dt <= max_step_phase:
            return dt
        dt *= 0.5
    raise ValidationError("could not find a step size resolving the noise amplitude")


def _run_chunk(args):
    (sequence, params, spectrum, tau, dt, seed, tau_index, shot_ids, phases, t_total) = args
    rngs = [np.random.default_rng(np.random.SeedSequence([seed, tau_index, int(g)]))
            for g in shot_ids]
    samples = synthesize_batch(spectrum, dt, t_total, rngs)
    z = _evolve_batch(sequence, params, samples, dt, phases, tau=tau)[:, 2]
    p = apply_readout_error(np.clip(0.5 * (1 + z), 0.0, 1.0), params.readout_error)
    u = np.array([rng.random() for rng in rngs])
    return u < p


def ramsey_fringe(sequence: PulseSequence, params: PulseParams, spectrum: NoiseSpectrum,
                  phases=None, shots_per_phase: int = 200, seed: int = 0, tau=None,
                  tau_index: int = 0, dt=None, executor=None,
                  duration=None) -> FringeDataset:
    """Simulated phase scan; one fresh trajectory per shot.

    Shot ``g`` (global index ``phase_index * shots_per_phase + j``) is seeded
    from ``(seed, tau_index, g)``, so results do not depend on chunking or
    on the number of workers. Passing the same ``dt`` and a common
    ``duration`` to runs of different sequences makes them see identical
    noise (common random numbers).
    """
    if shots_per_phase < 1:
        raise ValidationError("shots_per_phase must be >= 1")
    tau = sequence.tau if tau is None else float(tau)
    phases = default_phases() if phases is None else np.asarray(phases, dtype=float)
    if dt is None:
        dt = choose_dt(sequence, params, spectrum, tau)
    t_total = tau + params.pi_duration
    if duration is not None:
        if duration < t_total:
            raise ValidationError(f"duration {duration:g} s is shorter than the run ({t_total:g} s)")
        t_total = float(duration)
    total = phases.size * shots_per_phase
    shot_phase = np.repeat(phases, shots_per_phase)
    jobs = []
    for start in range(0, total, CHUNK):
        ids = np.arange(start, min(total, start + CHUNK))
        jobs.append((sequence, params, spectrum, tau, dt, seed, tau_index, ids, shot_phase[ids],
                     t_total))
    mapper = executor.map if executor is not None else map
    outcomes = np.concatenate(list(mapper(_run_chunk, jobs)))
    succ = outcomes.reshape(phases.size, shots_per_phase).sum(axis=1)
    return FringeDataset(phases, succ, np.full(phases.size, shots_per_phase), tau,
                         sequence.label)


def _lsq_fringe(phases, rates, weights):
    design = np.column_stack([np.cos(phases), np.sin(phases)]) * np.sqrt(weights)[:, None]
    y = (2 * rates - 1) * np.sqrt(weights)
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    return coef


def fit_fringe(dataset: FringeDataset, n_bootstrap: int = 500, seed: int = 0) -> ContrastEstimate:
    """Least-squares fit of rate = (1 + C cos(phi - phi0))/2.

    The model is linear in (C cos phi0, C sin phi0). C is clipped to [0, 1]
    (``at_bound`` is set when clipping occurs). The uncertainty is the
    standard deviation of C over binomial resamples of each phase point.
    """
    ph, n = dataset.phases, dataset.trials.astype(float)
    span = np.ptp(ph)
    if span < 1.5 * 2 * np.pi:
        raise ValidationError(f"phase scan spans {np.degrees(span):.0f} deg; need >= 540 deg")
    design = np.column_stack([np.cos(ph), np.sin(ph)])
    if np.linalg.matrix_rank(design) < 2:
        raise ConvergenceError("fringe fit is degenerate for these phases")
    a, b = _lsq_fringe(ph, dataset.rates, n)
    c_raw = math.hypot(a, b)
    phi0 = math.atan2(b, a)
    at_bound = c_raw > 1.0
    sigma = 0.0
    if n_bootstrap > 0:
        rng = np.random.default_rng(seed)
        p = dataset.rates
        k = rng.binomial(dataset.trials[None, :], p[None, :], size=(n_bootstrap, p.size))
        y = (2 * k / n - 1) * np.sqrt(n)
        w_design = design * np.sqrt(n)[:, None]
        coefs = np.linalg.lstsq(w_design, y.T, rcond=None)[0]
        cs = np.minimum(np.hypot(coefs[0], coefs[1]), 1.0)
        sigma = float(np.std(cs, ddof=1))
    return ContrastEstimate(min(c_raw, 1.0), phi0, sigma, n_bootstrap, at_bound)


def coherence_curve_mc(sequence: PulseSequence, params: PulseParams, spectrum: NoiseSpectrum,
                       taus, shots_per_phase: int = 200, seed: int = 0, phases=None,
                       n_bootstrap: int = 500, workers: int = 1, return_fringes: bool = False):
    """Fitted Ramsey contrast versus tau, pulse timings rescaled to each tau."""
    taus = np.asarray(taus, dtype=float)
    if taus.ndim != 1 or taus.size == 0 or np.any(np.diff(taus) <= 0):
        raise ValidationError("taus must be strictly increasing")
    fringes = []
    pool = ProcessPoolExecutor(workers) if workers > 1 else None
    try:
        for i, tau in enumerate(taus):
            fr = ramsey_fringe(sequence.with_tau(tau), params, spectrum, phases,
                               shots_per_phase, seed, tau_index=i, executor=pool)
            fringes.append(fr)
    finally:
        if pool is not None:
            pool.shutdown()
    ests = [fit_fringe(fr, n_bootstrap, seed=seed + i) for i, fr in enumerate(fringes)]
    curve = CoherenceCurve(taus, np.array([e.contrast for e in ests]),
                           np.array([e.uncertainty for e in ests]),
                           sequence.with_tau(taus[0]), source="simulated")
    if return_fringes:
        return curve, fringes
    return curve


@dataclass(frozen=True)
class PulseErrorFloor:
    """Short-time contrast versus pulse number and the implied pi-pulse fidelity.

    ``fidelity`` is exp(slope) of a weighted straight-line fit of
    log(contrast) against n, i.e. the contrast lost per added pulse.
    """

    ns: np.ndarray
    contrasts: np.ndarray
    uncertainties: np.ndarray
    fidelity: float
    fidelity_err: float

    def is_monotonic(self) -> bool:
        return bool(np.all(np.diff(self.contrasts) < 0))


def pulse_error_floor(params: PulseParams, spectrum: NoiseSpectrum, ns=(0, 4, 8, 12, 16, 20),
                      shots_per_phase: int = 500, seed: int = 0, phases=None,
                      n_bootstrap: int = 200, workers: int = 1) -> PulseErrorFloor:
    """Contrast of equally spaced sequences in the tau -> 0 limit.

    The shortest possible run has the pi-pulses back to back (tau = n t_pi),
    so no free evolution is left and only pulse errors from the detuning
    during the finite pulses remain. All n share the step size, the
    trajectory duration and the shot seeds, so differences between n are not
    buried in shot noise.
    """
    if params.instantaneous:
        raise ValidationError("the pulse-error floor needs finite pulses")
    ns = np.asarray(sorted(set(int(n) for n in ns)))
    if ns.size < 2 or ns[0] < 0:
        raise ValidationError("need at least two distinct non-negative pulse numbers")
    t_pi = params.pi_duration
    # a tiny free gap keeps n = 0 a valid sequence and avoids touching windows
    gap = 1e-3 * t_pi
    taus = ns * t_pi + gap
    duration = taus[-1] + t_pi
    probe = PulseSequence(tau=taus[-1])
    dt = min(choose_dt(probe, params, spectrum, taus[-1]), t_pi / 16)
    pool = ProcessPoolExecutor(workers) if workers > 1 else None
    ests = []
    try:
        for n, tau in zip(ns, taus):
            alphas = [(i - 0.5) / n for i in range(1, n + 1)] if n else []
            seq = PulseSequence(alphas=tuple(alphas), tau=tau, label=f"cpmg-{n}")
            fr = ramsey_fringe(seq, params, spectrum, phases, shots_per_phase, seed,
                               tau_index=0, dt=dt, executor=pool, duration=duration)
            ests.append(fit_fringe(fr, n_bootstrap, seed=seed))
    finally:
        if pool is not None:
            pool.shutdown()
    c = np.array([e.contrast for e in ests])
    u = np.array([e.uncertainty for e in ests])
    y = np.log(np.maximum(c, 1e-12))
    w = 1.0 / np.maximum(u / np.maximum(c, 1e-12), 1e-4) ** 2
    design = np.column_stack([np.ones_like(y), ns.astype(float)])
    cov = np.linalg.inv(design.T @ (design * w[:, None]))
    coef = cov @ design.T @ (w * y)
    fid = math.exp(coef[1])
    return PulseErrorFloor(ns, c, u, fid, fid * math.sqrt(cov[1, 1]))
