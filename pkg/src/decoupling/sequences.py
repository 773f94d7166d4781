"""
Dynamic-decoupling pulse timings.

A sequence of n instantaneous pi-pulses at normalized times
``0 < alpha_1 < ... < alpha_n < 1`` flips the sign of the accumulated
phase at every pulse. The phase error caused by a frequency offset that
drifts as a polynomial in normalized time t = time/tau is

.. math::

    \\phi = \\sum_j \\frac{p_{j-1}}{j}\\left[(-1)^n - 2\\sum_i (-1)^i \\alpha_i^j\\right]

so a sequence cancels every drift of degree < m if the bracket vanishes
for j = 1..m. Uhrig (UDD) timings satisfy this for m = n; CPMG timings
only for m = 1.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import mpmath
import numpy as np

from .exceptions import ConvergenceError, ValidationError

__all__ = [
    "PulseSequence",
    "DriftPolynomial",
    "udd_times",
    "cpmg_times",
    "cancellation_residual",
    "solve_polynomial_cancellation",
    "phase_error",
    "cancellation_order",
    "make_sequence",
    "load_sequence",
]


def _check_alphas(alphas):
    a = [float(v) for v in alphas]
    if any(not math.isfinite(v) for v in a):
        raise ValidationError("pulse times must be finite")
    if a and (a[0] <= 0.0 or a[-1] >= 1.0):
        raise ValidationError(f"pulse times must lie strictly inside (0, 1), got {a}")
    if any(b <= c for c, b in zip(a, a[1:])):
        # coincident pulses are rejected rather than merged
        raise ValidationError(f"pulse times must be strictly increasing, got {a}")
    return a


@dataclass(frozen=True)
class PulseSequence:
    """Normalized pi-pulse times plus the physical timing of one run.

    Parameters
    ----------
    alphas : tuple of float
        Pulse centres as fractions of ``tau``. Empty means free (Ramsey)
        evolution.
    tau : float
        Total sequence duration in seconds.
    pulse_duration : float
        Length of each pi-pulse in seconds; 0 means instantaneous.
    pulse_phases : tuple of float
        Drive phase of each pi-pulse in radians. Defaults to zeros.
    label : str
        Free-form tag such as ``"udd-4"``.
    """

    alphas: tuple = ()
    tau: float = 1.0
    pulse_duration: float = 0.0
    pulse_phases: tuple = None
    label: str = ""

    def __post_init__(self):
        alphas = tuple(_check_alphas(self.alphas))
        object.__setattr__(self, "alphas", alphas)
        phases = self.pulse_phases
        if phases is None:
            phases = (0.0,) * len(alphas)
        phases = tuple(float(p) for p in phases)
        object.__setattr__(self, "pulse_phases", phases)
        if len(phases) != len(alphas):
            raise ValidationError(
                f"pulse_phases has {len(phases)} entries for {len(alphas)} pulses")
        if not self.tau > 0:
            raise ValidationError(f"tau must be positive, got {self.tau}")
        if not self.pulse_duration >= 0:
            raise ValidationError(f"pulse_duration must be >= 0, got {self.pulse_duration}")
        if self.n * self.pulse_duration >= self.tau:
            raise ValidationError(
                f"{self.n} pulses of {self.pulse_duration:g} s do not fit in tau={self.tau:g} s")

    @property
    def n(self) -> int:
        return len(self.alphas)

    @property
    def pulse_times(self) -> np.ndarray:
        """Pulse centres in seconds."""
        return np.asarray(self.alphas) * self.tau

    def with_tau(self, tau: float) -> "PulseSequence":
        """Same normalized timings rescaled to a new duration."""
        return replace(self, tau=float(tau))

    def mirrored(self) -> "PulseSequence":
        """Time-reversed sequence (alpha -> 1 - alpha)."""
        return replace(self, alphas=tuple(1.0 - a for a in reversed(self.alphas)),
                       pulse_phases=tuple(reversed(self.pulse_phases)))

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "n": self.n,
            "alphas": list(self.alphas),
            "tau_s": self.tau,
            "pulse_duration_s": self.pulse_duration,
            "pulse_phases_rad": list(self.pulse_phases),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PulseSequence":
        try:
            seq = cls(alphas=tuple(d["alphas"]), tau=float(d.get("tau_s", 1.0)),
                      pulse_duration=float(d.get("pulse_duration_s", 0.0)),
                      pulse_phases=d.get("pulse_phases_rad"), label=d.get("label", ""))
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed sequence record: {exc}") from exc
        if "n" in d and int(d["n"]) != seq.n:
            raise ValidationError(f"sequence record says n={d['n']} but has {seq.n} alphas")
        return seq

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def load_sequence(path) -> PulseSequence:
    return PulseSequence.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class DriftPolynomial:
    """Frequency offset delta(t) = sum_j p_j t^j in normalized time t in [0, 1]."""

    coeffs: tuple = field(default_factory=tuple)

    def __post_init__(self):
        c = tuple(float(v) for v in self.coeffs)
        if not c:
            raise ValidationError("drift polynomial needs at least one coefficient")
        object.__setattr__(self, "coeffs", c)

    @property
    def degree(self) -> int:
        return len(self.coeffs) - 1

    def __call__(self, t):
        # np.polyval wants highest power first
        return np.polyval(self.coeffs[::-1], t)


def _check_n(n):
    if int(n) != n or n < 1:
        raise ValidationError(f"number of pulses must be a positive integer, got {n!r}")
    return int(n)


def udd_times(n: int, precision: int | None = None) -> list:
    """Uhrig timings sin^2(pi i / (2(n+1))), i = 1..n.

    With ``precision`` (decimal digits) the values are returned as
    ``mpmath.mpf`` so that high-order cancellation survives downstream
    arithmetic; otherwise as floats.
    """
    n = _check_n(n)
    if precision is None:
        return [math.sin(math.pi * i / (2 * (n + 1))) ** 2 for i in range(1, n + 1)]
    with mpmath.workdps(precision):
        return [+mpmath.sin(mpmath.pi * i / (2 * (n + 1))) ** 2 for i in range(1, n + 1)]


def cpmg_times(n: int) -> list:
    """Equally spaced timings (i - 1/2)/n, i = 1..n."""
    n = _check_n(n)
    return [(i - 0.5) / n for i in range(1, n + 1)]


def make_sequence(kind: str, n: int, tau: float = 1.0, pulse_duration: float = 0.0,
                  pulse_phases=None) -> PulseSequence:
    """Build a labelled sequence; ``n = 0`` gives free evolution for any kind."""
    kind = kind.lower()
    if kind in ("ramsey", "fid") or n == 0:
        alphas = []
    elif kind == "hahn":
        if n != 1:
            raise ValidationError("a Hahn echo has exactly one pulse")
        alphas = [0.5]
    elif kind == "udd":
        alphas = udd_times(n)
    elif kind == "cpmg":
        alphas = cpmg_times(n)
    else:
        raise ValidationError(f"unknown sequence kind {kind!r}")
    return PulseSequence(alphas=tuple(alphas), tau=tau, pulse_duration=pulse_duration,
                         pulse_phases=pulse_phases, label=f"{kind}-{len(alphas)}")


def cancellation_residual(alphas, j: int):
    """Signed residual (-1)^n - 2 sum_i (-1)^i alpha_i^j for drift order j.

    Zero means a drift proportional to t^(j-1) leaves no phase error.
    Works on floats or ``mpmath.mpf`` values.
    """
    if j < 1:
        raise ValidationError(f"j must be >= 1, got {j}")
    n = len(alphas)
    acc = 0
    for i, a in enumerate(alphas, start=1):
        acc += (-1) ** i * a ** j
    return (-1) ** n - 2 * acc


def _residual_vector(alphas: np.ndarray) -> np.ndarray:
    n = alphas.size
    signs = (-1.0) ** np.arange(1, n + 1)
    powers = alphas[None, :] ** np.arange(1, n + 1)[:, None]
    return (-1.0) ** n - 2.0 * powers @ signs


def _residual_jacobian(alphas: np.ndarray) -> np.ndarray:
    # d/d alpha_i of row j: -2 (-1)^i j alpha_i^(j-1)
    n = alphas.size
    j = np.arange(1, n + 1)[:, None]
    signs = (-1.0) ** np.arange(1, n + 1)[None, :]
    return -2.0 * signs * j * alphas[None, :] ** (j - 1)


def _max_ordered_step(alphas: np.ndarray, step: np.ndarray, keep: float = 0.5) -> float:
    """Largest lambda <= 1 keeping every gap above ``keep`` of its current width."""
    ext = np.concatenate(([0.0], alphas, [1.0]))
    dstep = np.concatenate(([0.0], step, [0.0]))
    gaps = np.diff(ext)
    shrink = -np.diff(dstep)
    mask = shrink > 0
    if not mask.any():
        return 1.0
    return float(min(1.0, np.min((1.0 - keep) * gaps[mask] / shrink[mask])))


def solve_polynomial_cancellation(n: int, initial_guess, tol: float = 1e-10,
                                  max_iter: int = 200) -> list:
    """Solve the n cancellation conditions for n pulse times by damped Newton.

    Steps are shortened so that the iterate stays strictly ordered inside
    (0, 1), then halved until the residual norm decreases.

    Raises
    ------
    ConvergenceError
        If the iteration cap is hit, the Jacobian is singular, or the final
        residual exceeds ``tol``.
    """
    n = _check_n(n)
    alphas = np.array(_check_alphas(initial_guess), dtype=float)
    if alphas.size != n:
        raise ValidationError(f"initial guess has {alphas.size} entries, expected {n}")

    r = _residual_vector(alphas)
    norm = np.max(np.abs(r))
    for _ in range(max_iter):
        if norm < 1e-15:
            break
        jac = _residual_jacobian(alphas)
        if not np.all(np.isfinite(jac)) or np.linalg.cond(jac) > 1e15:
            raise ConvergenceError("degenerate Jacobian in cancellation solve", norm)
        step = np.linalg.solve(jac, -r)
        lam = _max_ordered_step(alphas, step)
        while lam > 1e-12:
            trial = alphas + lam * step
            r_trial = _residual_vector(trial)
            n_trial = np.max(np.abs(r_trial))
            if n_trial < norm:
                break
            lam *= 0.5
        else:
            # no descent possible; stop at the current point
            break
        converged = np.max(np.abs(trial - alphas)) < 1e-16
        alphas, r, norm = trial, r_trial, n_trial
        if converged:
            break
    else:
        raise ConvergenceError(f"cancellation solve did not converge in {max_iter} iterations",
                               norm)
    if norm > tol:
        raise ConvergenceError("cancellation solve stalled above tolerance", norm)
    return alphas.tolist()


def cancellation_order(alphas, tol: float = 1e-9) -> int:
    """Number of leading drift orders (j = 1, 2, ...) the timings cancel."""
    m = 0
    while abs(cancellation_residual(alphas, m + 1)) < tol:
        m += 1
        if m > 4 * len(alphas) + 4:
            break
    return m


def phase_error(alphas, poly) -> float:
    """Signed phase picked up under drift ``poly`` (normalized time units).

    Evaluated exactly from antiderivatives; the segment before the first
    pulse carries weight +1. Multiply by ``tau`` for the physical phase.
    """
    if not isinstance(poly, DriftPolynomial):
        poly = DriftPolynomial(tuple(poly))
    alphas = _check_alphas(alphas)
    edges = [0.0] + alphas + [1.0]
    total = 0.0
    for i in range(len(edges) - 1):
        a, b = edges[i], edges[i + 1]
        seg = sum(p * (b ** (j + 1) - a ** (j + 1)) / (j + 1)
                  for j, p in enumerate(poly.coeffs))
        total += (-1) ** i * seg
    return total
