"""Masked score composition and context-conditional enforcement.

The composed target score at annealing level t is

    s*(x) = sum_i w_i * M_i . s_i(x, tau_t)          (lambda = 0)

optionally plus a soft context pull -lambda * M_ctx . (x - z_t). Under the
default hard policy the context term is omitted from the score and enforced
instead by masked projection onto the context conditionals, followed by an
optional reconstruction-gradient correction of the clean prediction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

from .errors import ContractViolation, DomainError, ExpertEvaluationError
from .flows import AnnealLadder, NoiseSchedule, clean_prediction, velocity_from_score
from .masks import MaskSet


class ScoreModel(Protocol):
    """Anything that can score lattice fields at a noise level."""

    name: str

    def score(self, x: np.ndarray, tau: float, sched: NoiseSchedule) -> np.ndarray: ...


@dataclass(frozen=True)
class ContextConditionals:
    """Per-level context tensors z_t, t = T..0; z_0 is the clean reference."""

    levels: np.ndarray  # (T+1, H, W, N, C)
    source: str  # "inversion" | "direct"
    reference: np.ndarray

    def __post_init__(self):
        if self.source not in ("inversion", "direct"):
            raise DomainError(f"unknown context source {self.source!r}")
        if self.levels.shape[1:] != self.reference.shape:
            raise ContractViolation("context levels and reference differ in field shape")

    @property
    def T(self) -> int:
        return self.levels.shape[0] - 1

    def at(self, t: int) -> np.ndarray:
        if not 0 <= t <= self.T:
            raise ContractViolation(f"no context conditional stored for level t={t}")
        return self.levels[t]


@dataclass(frozen=True)
class LambdaPolicy:
    kind: str = "project_hard"  # or "soft"
    lam: float = 0.0

    def __post_init__(self):
        if self.kind not in ("project_hard", "soft"):
            raise DomainError(f"unknown lambda policy {self.kind!r}")
        if self.kind == "soft" and self.lam < 0:
            raise DomainError("soft lambda must be >= 0")


@dataclass(frozen=True)
class ReconStep:
    step_size: float = 0.1
    every: int = 1

    def __post_init__(self):
        if self.step_size <= 0:
            raise DomainError("recon step size must be > 0")
        if self.every < 1:
            raise DomainError("recon cadence must be >= 1")


@dataclass
class CompositeTarget:
    """Experts with masks, context conditionals, and enforcement policy."""

    experts: list[tuple[ScoreModel, np.ndarray, float]]  # (model, mask, weight)
    ladder: AnnealLadder
    masks: MaskSet | None = None
    context: ContextConditionals | None = None
    lambda_policy: LambdaPolicy = field(default_factory=LambdaPolicy)
    recon: ReconStep | None = None

    def __post_init__(self):
        if not self.experts:
            raise ContractViolation("composite target needs at least one expert")
        covered = np.zeros(self.experts[0][1].shape)
        for _, mask, weight in self.experts:
            if weight < 0:
                raise DomainError("expert weights must be >= 0")
            covered = covered + weight * mask
        if self.context_mask is not None:
            covered = covered + self.context_mask
        if covered.min() <= 0.0:
            raise ContractViolation("some lattice cells are covered by no expert or context mask")

    @property
    def schedule(self) -> NoiseSchedule:
        return self.ladder.schedule

    @property
    def context_mask(self) -> np.ndarray | None:
        if self.masks is None or self.context is None:
            return None
        return self.masks.context

    @property
    def shape(self) -> tuple[int, int, int, int]:
        mask = self.experts[0][1]
        channels = self.context.reference.shape[3] if self.context is not None else None
        if channels is None:
            model = self.experts[0][0]
            channels = model.shape[3] if hasattr(model, "shape") else 1
        return mask.shape[:3] + (channels,)


def composed_score(x: np.ndarray, t: int, target: CompositeTarget) -> np.ndarray:
    """Mask-weighted sum of expert scores at level t (plus soft context pull)."""
    tau = target.ladder.tau_of(t)
    total = np.zeros_like(np.asarray(x, dtype=np.float64))
    for model, mask, weight in target.experts:
        try:
            s = model.score(x, tau, target.schedule)
        except Exception as exc:  # noqa: BLE001 - identity must survive
            raise ExpertEvaluationError(getattr(model, "name", "?"), str(exc)) from exc
        total += weight * mask * s
    if target.lambda_policy.kind == "soft" and target.context is not None:
        m = target.context_mask
        if m is None:
            raise ContractViolation("soft lambda policy needs masks alongside context")
        total += m * (-target.lambda_policy.lam * (x - target.context.at(t)))
    return total


def context_project(x: np.ndarray, t: int, target: CompositeTarget) -> np.ndarray:
    """Overwrite context cells with the level-t conditional: (1-M).x + M.z_t."""
    if target.context is None:
        return x
    m = target.context_mask
    if m is None:
        raise ContractViolation("context projection needs masks alongside context")
    return (1.0 - m) * x + m * target.context.at(t)


def recon_grad_step(x: np.ndarray, t: int, target: CompositeTarget) -> np.ndarray:
    """One gradient step on || M_ctx . xhat0(x) - z_0 ||^2.

    The score inside the clean prediction is held fixed, which collapses the
    Jacobian of xhat0 to 1/alpha and makes the update a closed-form masked
    correction. No-op when the recon step or context is not configured.
    """
    if target.recon is None or target.context is None:
        return x
    m = target.context_mask
    if m is None:
        raise ContractViolation("recon step needs masks alongside context")
    tau = target.ladder.tau_of(t)
    sched = target.schedule
    s = composed_score(x, t, target)
    v = velocity_from_score(x, s, tau, sched)
    xhat0 = clean_prediction(x, v, tau, sched)
    alpha = sched.alpha(sched.clamp_interior(tau))
    grad = (2.0 / alpha) * m * (m * xhat0 - target.context.reference)
    return x - target.recon.step_size * grad


def direct_conditionals(
    reference: np.ndarray, ladder: AnnealLadder, rng: np.random.Generator
) -> ContextConditionals:
    """Forward-noise the reference along the path with one fixed noise draw.

    z_t = alpha(tau_t) * z_0 + sigma(tau_t) * eps, with z at the data end
    stored as the reference itself so hard projection reproduces it exactly.
    """
    sched = ladder.schedule
    eps = rng.standard_normal(reference.shape)
    levels = np.empty((ladder.T + 1,) + reference.shape)
    levels[0] = reference
    for t in range(1, ladder.T + 1):
        a, sg = sched.marginal_scale(ladder.tau_of(t))
        levels[t] = a * reference + sg * eps
    return ContextConditionals(levels=levels, source="direct", reference=reference.copy())


def model_velocity_field(
    model: ScoreModel, sched: NoiseSchedule
) -> Callable[[np.ndarray, float], np.ndarray]:
    """Probability-flow velocity field induced by a score model."""

    def velocity(z: np.ndarray, tau: float) -> np.ndarray:
        return velocity_from_score(z, model.score(z, tau, sched), tau, sched)

    return velocity
