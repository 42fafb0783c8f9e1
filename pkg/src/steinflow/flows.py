"""Gaussian probability paths and score/velocity algebra.

A noise schedule (alpha_tau, sigma_tau) interpolates between pure noise at
tau=0 (alpha=0, sigma=1) and clean data at tau=1 (alpha=1, sigma=0). The
marginal of data x1 at level tau is N(alpha*x1, sigma^2 I). For such paths
the probability-flow velocity, the marginal score, and the posterior-mean
clean prediction are related by exact linear maps, implemented here:

    v(x)     = (alpha'/alpha) x - ((sigma'*sigma*alpha - alpha'*sigma^2)/alpha) s(x)
    xhat0(x) = sigma/(alpha'*sigma - sigma'*alpha) v(x)
               - sigma'/(alpha'*sigma - sigma'*alpha) x

Score formulas are never evaluated at the path endpoints: tau is clamped to
[eps_clamp, 1 - eps_clamp] inside the conversions (alpha=0 and sigma=0 are
both singular).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, DomainError

RECTIFIED_LINEAR = "rectified_linear"
VARIANCE_PRESERVING = "variance_preserving"

_KINDS = (RECTIFIED_LINEAR, VARIANCE_PRESERVING)


@dataclass(frozen=True)
class NoiseSchedule:
    """Continuous noise schedule with boundary convention alpha(0)=0, sigma(0)=1.

    rectified_linear:      alpha = tau,           sigma = 1 - tau
    variance_preserving:   alpha = sin(pi*tau/2), sigma = cos(pi*tau/2)
    """

    kind: str = RECTIFIED_LINEAR
    eps_clamp: float = 1e-3

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise DomainError(f"unknown schedule kind {self.kind!r}")
        if not 0.0 < self.eps_clamp < 0.5:
            raise DomainError(f"eps_clamp must lie in (0, 0.5), got {self.eps_clamp}")

    def alpha(self, tau: float) -> float:
        if self.kind == RECTIFIED_LINEAR:
            return float(tau)
        return math.sin(0.5 * math.pi * tau)

    def sigma(self, tau: float) -> float:
        if self.kind == RECTIFIED_LINEAR:
            return 1.0 - float(tau)
        return math.cos(0.5 * math.pi * tau)

    def alpha_dot(self, tau: float) -> float:
        if self.kind == RECTIFIED_LINEAR:
            return 1.0
        return 0.5 * math.pi * math.cos(0.5 * math.pi * tau)

    def sigma_dot(self, tau: float) -> float:
        if self.kind == RECTIFIED_LINEAR:
            return -1.0
        return -0.5 * math.pi * math.sin(0.5 * math.pi * tau)

    def clamp(self, tau: float) -> float:
        """Clamp tau into [0, 1 - eps_clamp] (upper endpoint excluded)."""
        return min(max(float(tau), 0.0), 1.0 - self.eps_clamp)

    def clamp_interior(self, tau: float) -> float:
        """Clamp tau into [eps_clamp, 1 - eps_clamp] (both endpoints excluded)."""
        return min(max(float(tau), self.eps_clamp), 1.0 - self.eps_clamp)

    def marginal_scale(self, tau: float) -> tuple[float, float]:
        """(alpha, sigma) at the clamped level, for marginal-density formulas."""
        tc = self.clamp(tau)
        return self.alpha(tc), self.sigma(tc)


@dataclass(frozen=True)
class AnnealLadder:
    """Discrete annealing grid: integer levels t = T..0 mapped to tau in [0, 1).

    t=T is the noise end (tau=0) and t=0 the data end (tau clamped just below
    1). ``grid`` selects the mapping: "uniform" uses tau = (T-t)/T, "extended"
    uses tau = (T-t)/(T+1), which never reaches the data endpoint.
    """

    T: int
    schedule: NoiseSchedule
    grid: str = "uniform"

    def __post_init__(self):
        if self.T < 1:
            raise DomainError(f"annealing length must be >= 1, got {self.T}")
        if self.grid not in ("uniform", "extended"):
            raise DomainError(f"unknown ladder grid {self.grid!r}")

    def tau_of(self, t: int) -> float:
        if not 0 <= t <= self.T:
            raise DomainError(f"level t={t} outside [0, {self.T}]")
        denom = self.T if self.grid == "uniform" else self.T + 1
        raw = (self.T - t) / denom
        return min(raw, 1.0 - self.schedule.eps_clamp)

    def step(self, t: int) -> float:
        """tau(t-1) - tau(t), the (positive) move made when annealing to t-1."""
        if not 1 <= t <= self.T:
            raise DomainError(f"step index t={t} outside [1, {self.T}]")
        return self.tau_of(t - 1) - self.tau_of(t)

    def taus(self) -> np.ndarray:
        """tau values indexed by level, i.e. taus()[t] == tau_of(t)."""
        return np.array([self.tau_of(t) for t in range(self.T + 1)])


def _coefficients(tau: float, sched: NoiseSchedule) -> tuple[float, float, float, float]:
    tc = sched.clamp_interior(tau)
    return sched.alpha(tc), sched.sigma(tc), sched.alpha_dot(tc), sched.sigma_dot(tc)


def _check_tau(tau: float, sched: NoiseSchedule) -> None:
    # tau=0 is admitted and evaluated at the clamped limit point eps_clamp,
    # where the alpha'/alpha singularity is finite for both schedule kinds.
    if not 0.0 <= tau <= 1.0 - sched.eps_clamp + 1e-12:
        raise DomainError(
            f"tau={tau} outside [0, {1.0 - sched.eps_clamp}] for score algebra"
        )


def velocity_from_score(
    x: np.ndarray, s: np.ndarray, tau: float, sched: NoiseSchedule
) -> np.ndarray:
    """Probability-flow velocity from the marginal score at level tau.

    v = (alpha'/alpha) x - ((sigma'*sigma*alpha - alpha'*sigma^2)/alpha) s
    """
    if x.shape != s.shape:
        raise ContractViolation(f"x and score differ in shape: {x.shape} vs {s.shape}")
    _check_tau(tau, sched)
    a, sg, ad, sd = _coefficients(tau, sched)
    return (ad / a) * x - ((sd * sg * a - ad * sg * sg) / a) * s


def score_from_velocity(
    x: np.ndarray, v: np.ndarray, tau: float, sched: NoiseSchedule
) -> np.ndarray:
    """Algebraic inverse of :func:`velocity_from_score`.

    Needed for backends that answer with velocities rather than scores.
    """
    if x.shape != v.shape:
        raise ContractViolation(f"x and velocity differ in shape: {x.shape} vs {v.shape}")
    _check_tau(tau, sched)
    a, sg, ad, sd = _coefficients(tau, sched)
    coef = -(sd * sg * a - ad * sg * sg) / a
    if coef == 0.0:
        raise DomainError(f"score coefficient vanishes at tau={tau}")
    return (v - (ad / a) * x) / coef


def clean_prediction(
    x: np.ndarray, v: np.ndarray, tau: float, sched: NoiseSchedule
) -> np.ndarray:
    """Posterior-mean estimate of the data endpoint from state and velocity.

    xhat0 = (sigma * v - sigma' * x) / (alpha'*sigma - sigma'*alpha)
    """
    if x.shape != v.shape:
        raise ContractViolation(f"x and velocity differ in shape: {x.shape} vs {v.shape}")
    a, sg, ad, sd = _coefficients(tau, sched)
    denom = ad * sg - sd * a
    if abs(denom) < 1e-12:
        raise DomainError(f"degenerate clean-prediction denominator at tau={tau}")
    return (sg / denom) * v - (sd / denom) * x
