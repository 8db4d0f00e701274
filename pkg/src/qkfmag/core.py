"""Physical parameters, unit conventions, time grids.

Internal units are SI seconds and gauss throughout.  The gyromagnetic
ratio is stored *angular* (rad s^-1 G^-1); lab-style inputs quoted in
kHz/mG are cycle frequencies and must be converted with
:func:`gamma_from_cycles` at the boundary.

``prior_b_variance`` may be ``math.inf``, a distinguished value meaning
"no prior knowledge of the field"; estimators handle it in information
form rather than as a large float.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

INFINITE = math.inf

# 1 kHz/mG (cycles) = 1e6 Hz/G = 2*pi*1e6 rad s^-1 G^-1
_CYCLES_KHZ_PER_MG_TO_ANGULAR = 2.0 * math.pi * 1.0e6


@dataclass(frozen=True)
class PhysicalParams:
    """Experiment definition for a continuously measured spin ensemble.

    j_total          collective spin J (dimensionless)
    gamma            gyromagnetic ratio, angular, rad s^-1 G^-1
    b_true           applied field, G
    meas_strength    measurement strength M, s^-1
    efficiency       detector efficiency eta, in (0, 1]
    prior_b_variance prior field variance, G^2 (may be INFINITE)
    t_total          total measurement time, s
    """

    j_total: float
    gamma: float
    b_true: float
    meas_strength: float
    efficiency: float
    prior_b_variance: float
    t_total: float


def validate_params(p: PhysicalParams) -> PhysicalParams:
    """Return ``p`` unchanged iff every invariant holds.

    All violations are reported together, by field name.
    """
    problems = []
    if not (p.j_total > 0):
        problems.append("j_total: collective spin must be positive")
    if not (p.gamma > 0):
        problems.append("gamma: gyromagnetic ratio must be positive")
    if not (p.meas_strength > 0):
        problems.append("meas_strength: measurement strength must be positive")
    if not (0.0 < p.efficiency <= 1.0):
        problems.append("efficiency: efficiency must be in (0,1]")
    if not (p.prior_b_variance >= 0):  # inf passes
        problems.append("prior_b_variance: prior variance must be >= 0 or INFINITE")
    if not (p.t_total > 0):
        problems.append("t_total: total time must be positive")
    if not all(
        math.isfinite(x)
        for x in (p.j_total, p.gamma, p.b_true, p.meas_strength, p.efficiency, p.t_total)
    ):
        problems.append("finite: all fields except prior_b_variance must be finite")
    if problems:
        raise ValueError("invalid parameters: " + "; ".join(problems))
    return p


def gamma_from_cycles(value_khz_per_mg: float) -> float:
    """Convert a cycle-frequency gyromagnetic ratio (kHz/mG) to angular rad s^-1 G^-1."""
    if not value_khz_per_mg > 0:
        raise ValueError("gamma must be positive")
    return _CYCLES_KHZ_PER_MG_TO_ANGULAR * value_khz_per_mg


def gamma_to_cycles(gamma_angular: float) -> float:
    """Inverse of :func:`gamma_from_cycles`."""
    if not gamma_angular > 0:
        raise ValueError("gamma must be positive")
    return gamma_angular / _CYCLES_KHZ_PER_MG_TO_ANGULAR


def larmor_frequency(p: PhysicalParams) -> float:
    """Precession frequency gamma*B, rad/s."""
    return p.gamma * p.b_true


def t2_bound(p: PhysicalParams) -> float:
    """Upper bound 2/M on the transverse coherence time, s."""
    return 2.0 / p.meas_strength


def snr(p: PhysicalParams) -> float:
    """Signal-to-noise figure J*sqrt(M)."""
    return p.j_total * math.sqrt(p.meas_strength)


def collapse_rate(p: PhysicalParams) -> float:
    """Measurement-induced variance collapse rate 2*eta*M*J, s^-1.

    Fastest timescale in the model: the conditional variance halves
    after 1/collapse_rate of measurement.
    """
    return 2.0 * p.efficiency * p.meas_strength * p.j_total


class TimeGrid:
    """Strictly increasing time grid starting at 0.

    The bulk of the grid is uniform with spacing ``dt``.  An optional
    geometric (log-dense) prefix resolves the early variance collapse:
    at large J no affordable uniform step can follow the first instants
    of the squeezing transient, while geometric spacing tracks its 1/t
    slowdown with a constant per-step cost.
    """

    __slots__ = ("dt", "n_steps", "prefix", "_times")

    def __init__(self, dt: float, n_steps: int, prefix=()):
        if not dt > 0:
            raise ValueError("dt must be positive")
        if n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        self.dt = float(dt)
        self.n_steps = int(n_steps)
        self.prefix = np.asarray(prefix, dtype=float)
        start = self.prefix[-1] if self.prefix.size else 0.0
        uniform = start + self.dt * np.arange(1, self.n_steps + 1)
        self._times = np.concatenate([[0.0], self.prefix, uniform])
        if not np.all(np.diff(self._times) > 0):
            raise ValueError("grid points must be strictly increasing")

    @property
    def times(self) -> np.ndarray:
        return self._times

    @property
    def t_total(self) -> float:
        return float(self._times[-1])

    @property
    def n_intervals(self) -> int:
        return len(self._times) - 1

    def __eq__(self, other):
        return isinstance(other, TimeGrid) and np.array_equal(self._times, other._times)

    def __repr__(self):
        return (f"TimeGrid(dt={self.dt:g}, n_steps={self.n_steps}, "
                f"prefix_len={self.prefix.size}, t_total={self.t_total:g})")

    @classmethod
    def uniform(cls, dt: float, n_steps: int) -> "TimeGrid":
        return cls(dt, n_steps)

    @classmethod
    def with_prefix(cls, dt: float, t_total: float, t_first: float, ratio: float = 1.2) -> "TimeGrid":
        """Geometric prefix from ``t_first`` until steps reach ``dt``, then uniform to ``t_total``."""
        if not (0 < t_first < t_total):
            raise ValueError("t_first must be in (0, t_total)")
        if not ratio > 1:
            raise ValueError("ratio must exceed 1")
        pts = [t_first]
        while pts[-1] * (ratio - 1.0) < dt and pts[-1] * ratio < 0.5 * t_total:
            pts.append(pts[-1] * ratio)
        start = pts[-1]
        n = max(1, int(math.ceil((t_total - start) / dt - 1e-9)))
        return cls(dt=(t_total - start) / n, n_steps=n, prefix=pts)


def make_grid(p: PhysicalParams, dt: float | None = None, prefix: str | bool = "auto",
              prefix_ratio: float = 1.2, prefix_safety: float = 0.2) -> TimeGrid:
    """Default grid for ``p``: uniform dt <= 1e-3/M, log prefix when needed.

    The prefix is enabled automatically once ``collapse_rate * dt``
    exceeds ``prefix_safety``; its first point is placed at
    ``prefix_safety / collapse_rate`` so every early step stays well
    inside the collapse timescale.
    """
    validate_params(p)
    if dt is None:
        dt = 1.0e-3 / p.meas_strength
    lam = collapse_rate(p)
    want_prefix = prefix is True or (prefix == "auto" and lam * dt > prefix_safety)
    if want_prefix:
        t_first = prefix_safety / lam
        if t_first < dt:
            return TimeGrid.with_prefix(dt, p.t_total, t_first, prefix_ratio)
    n = max(1, int(round(p.t_total / dt)))
    return TimeGrid(dt=p.t_total / n, n_steps=n)


def with_field(p: PhysicalParams, b_true: float) -> PhysicalParams:
    return replace(p, b_true=b_true)


def with_spin(p: PhysicalParams, j_total: float) -> PhysicalParams:
    return replace(p, j_total=j_total)
