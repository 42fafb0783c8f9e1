"""Annealed Stein variational transport of a particle ensemble.

Per annealing level t (walking the ladder from noise to data):

  1. evaluate the composed score of every particle at tau_t, convert to a
     probability-flow velocity, and push the ensemble one Euler step;
  2. apply the kernelized transport direction

         phi*(x_j) = (1/L) sum_i [ k(x_i, x_j) s(x_i) + grad_{x_i} k(x_i, x_j) ]

     with the RBF kernel k(a, b) = exp(-||a - b||^2 / h) and the bandwidth h
     set to the median pairwise particle distance (floored);
  3. project context cells onto the stored conditionals, optionally followed
     by a reconstruction-gradient correction;
  4. refine the adaptive masks on the configured cadence.

All particle updates within one level read a frozen ensemble snapshot, so the
sweep is order-independent and can be evaluated by parallel workers.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.spatial.distance import pdist

from .compose import CompositeTarget, composed_score, context_project, recon_grad_step
from .errors import ContractViolation, DomainError, SamplingDivergedError
from .fields import FieldShape
from .flows import AnnealLadder, clean_prediction, velocity_from_score
from .masks import refine_masks, smooth_mask


@dataclass(frozen=True)
class SvgdConfig:
    eta: float = 1e-3
    inner_iters: int = 1
    repulsion_enabled: bool = True
    bandwidth_floor: float = 1e-8
    workers: int = 1

    def __post_init__(self):
        if self.eta <= 0:
            raise DomainError("step size eta must be > 0")
        if self.inner_iters < 1:
            raise DomainError("inner_iters must be >= 1")
        if self.bandwidth_floor <= 0:
            raise DomainError("bandwidth floor must be > 0")
        if self.workers < 1:
            raise DomainError("worker count must be >= 1")


@dataclass(frozen=True)
class RefinePolicy:
    every: int = 5
    threshold: float | None = None  # None: 0.5 * RMS of the context reference
    resmooth_radius: int = 1
    resmooth_sigma: float = 0.5

    def __post_init__(self):
        if self.every < 1:
            raise DomainError("refinement cadence must be >= 1")


class ParticleEnsemble:
    """L lattice fields plus per-particle counter-based random streams."""

    def __init__(self, particles: np.ndarray, seed: int):
        particles = np.asarray(particles, dtype=np.float64)
        if particles.ndim != 5:
            raise ContractViolation("ensemble array must have shape (L, H, W, N, C)")
        self.particles = particles
        self.seed = int(seed)
        self.streams = particle_streams(particles.shape[0], seed)

    @classmethod
    def init_standard_normal(cls, L: int, shape: FieldShape, seed: int) -> "ParticleEnsemble":
        if L < 1:
            raise DomainError("particle count must be >= 1")
        particles = np.stack([g.standard_normal(shape) for g in particle_streams(L, seed)])
        return cls(particles, seed)

    @property
    def L(self) -> int:
        return self.particles.shape[0]

    @property
    def shape(self) -> FieldShape:
        return tuple(self.particles.shape[1:])

    def flat(self) -> np.ndarray:
        return self.particles.reshape(self.L, -1)

    def mean_pairwise_distance(self) -> float:
        if self.L < 2:
            return 0.0
        return float(pdist(self.flat()).mean())


def particle_streams(L: int, seed: int) -> list[np.random.Generator]:
    """Independent counter-based (Philox) streams, one per particle."""
    children = np.random.SeedSequence(seed).spawn(L)
    return [np.random.Generator(np.random.Philox(c)) for c in children]


def _pairwise_sq(flat: np.ndarray) -> np.ndarray:
    """Dense squared-distance matrix via one Gram product."""
    sqnorm = np.einsum("ij,ij->i", flat, flat)
    sq = sqnorm[:, None] + sqnorm[None, :] - 2.0 * (flat @ flat.T)
    np.maximum(sq, 0.0, out=sq)
    return sq


def median_bandwidth(ensemble: ParticleEnsemble | np.ndarray, floor: float = 1e-8) -> float:
    """Median of all L(L-1)/2 pairwise flattened-tensor distances, floored.

    A single particle (no pairs) returns the floor.
    """
    particles = ensemble.particles if isinstance(ensemble, ParticleEnsemble) else ensemble
    L = particles.shape[0]
    if L < 2:
        return floor
    d = pdist(particles.reshape(L, -1))
    return max(float(np.median(d)), floor)


def svgd_directions(
    particles: np.ndarray,
    scores: np.ndarray,
    h: float,
    repulsion_enabled: bool = True,
) -> np.ndarray:
    """phi* for every particle against the frozen ensemble snapshot."""
    L = particles.shape[0]
    flat_x = particles.reshape(L, -1)
    flat_scores = scores.reshape(L, -1)
    K = np.exp(-_pairwise_sq(flat_x) / h)
    if repulsion_enabled:
        # sum_i grad_{x_i} k(x_i, x_j) = -(2/h) sum_i (x_i - x_j) K_ij, fused
        # with the kernel-weighted score sum into a single product
        drive = K.T @ (flat_scores - (2.0 / h) * flat_x)
        drive += (2.0 / h) * K.sum(axis=0)[:, None] * flat_x
    else:
        drive = K.T @ flat_scores
    return (drive / L).reshape(particles.shape)


def svgd_direction(
    l: int,
    ensemble: ParticleEnsemble | np.ndarray,
    scores: np.ndarray,
    h: float,
    repulsion_enabled: bool = True,
) -> np.ndarray:
    """phi* for particle ``l``; scores must be pre-evaluated per particle."""
    particles = ensemble.particles if isinstance(ensemble, ParticleEnsemble) else ensemble
    if not np.all(np.isfinite(scores)):
        bad = int(np.argwhere(~np.isfinite(scores.reshape(scores.shape[0], -1)).all(axis=1))[0][0])
        raise SamplingDivergedError(-1, bad)
    return svgd_directions(particles, scores, h, repulsion_enabled)[l]


@dataclass
class StepRecord:
    t: int
    tau: float
    bandwidth: float
    mean_log_density: float | None
    mean_pairwise_distance: float

    def as_dict(self) -> dict:
        return {
            "t": self.t,
            "tau": self.tau,
            "bandwidth": self.bandwidth,
            "mean_log_density": self.mean_log_density,
            "mean_pairwise_distance": self.mean_pairwise_distance,
        }


@dataclass
class SampleResult:
    ensemble: ParticleEnsemble
    records: list[StepRecord] = field(default_factory=list)
    initial_particles: np.ndarray | None = None


def _batched_scores(particles: np.ndarray, t: int, target: CompositeTarget, workers: int) -> np.ndarray:
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(lambda x: composed_score(x, t, target), particles))
        return np.stack(rows)
    return composed_score(particles, t, target)


def _check_finite(particles: np.ndarray, t: int) -> None:
    finite = np.isfinite(particles.reshape(particles.shape[0], -1)).all(axis=1)
    if not finite.all():
        raise SamplingDivergedError(t, int(np.argwhere(~finite)[0][0]))


def _mean_log_density(particles: np.ndarray, target: CompositeTarget) -> float | None:
    """Masked data-level product log-density averaged over particles.

    Serves as the progress proxy in the metrics stream; None when some
    expert cannot report a density (e.g. remote backends).
    """
    total = np.zeros(particles.shape[0])
    for model, mask, weight in target.experts:
        if not hasattr(model, "data_log_density"):
            return None
        masked = model
        if hasattr(model, "with_region"):
            masked = model.with_region(mask)
        total = total + weight * np.atleast_1d(masked.data_log_density(particles))
    return float(total.mean())


def anneal_sample(
    target: CompositeTarget,
    ladder: AnnealLadder,
    svgd: SvgdConfig,
    L: int,
    seed: int,
    on_step: Callable[[StepRecord], None] | None = None,
    refine: RefinePolicy | None = None,
    keep_initial: bool = False,
) -> SampleResult:
    """Run the full annealing loop and return the final ensemble."""
    if ladder != target.ladder:
        raise ContractViolation("target and sampler must share one annealing ladder")
    ens = ParticleEnsemble.init_standard_normal(L, target.shape, seed)
    particles = ens.particles
    initial = particles.copy() if keep_initial else None
    records: list[StepRecord] = []

    threshold = None
    if refine is not None and target.context is not None:
        threshold = refine.threshold
        if threshold is None:
            threshold = 0.5 * float(np.sqrt(np.mean(target.context.reference**2)))

    for t in range(ladder.T - 1, -1, -1):
        tau = ladder.tau_of(t)
        dtau = tau - ladder.tau_of(t + 1)

        pre_particles = particles
        scores = _batched_scores(particles, t, target, svgd.workers)
        velocities = velocity_from_score(particles, scores, tau, target.schedule)
        particles = particles + dtau * velocities
        _check_finite(particles, t)

        h = median_bandwidth(particles, svgd.bandwidth_floor)
        for j in range(svgd.inner_iters):
            if j > 0:
                particles = context_project(particles, t, target)
                scores = _batched_scores(particles, t, target, svgd.workers)
            particles = particles + svgd.eta * svgd_directions(
                particles, scores, h, svgd.repulsion_enabled
            )
        particles = context_project(particles, t, target)
        if target.recon is not None and t % target.recon.every == 0:
            particles = recon_grad_step(particles, t, target)
        _check_finite(particles, t)

        if (
            refine is not None
            and target.context is not None
            and target.masks is not None
            and t > 0
            and (ladder.T - t) % refine.every == 0
        ):
            # reuse the sweep's score evaluations: clean predictions of the
            # pre-pushforward states, averaged over the ensemble
            xhat0 = clean_prediction(pre_particles, velocities, tau, target.schedule)
            masks = refine_masks(
                xhat0.mean(axis=0), target.context.reference, target.masks, threshold
            )
            if refine.resmooth_radius > 0 or refine.resmooth_sigma > 0:
                masks = masks.smoothed(refine.resmooth_radius, refine.resmooth_sigma)
            target.masks = masks

        record = StepRecord(
            t=t,
            tau=tau,
            bandwidth=h,
            mean_log_density=_mean_log_density(particles, target),
            mean_pairwise_distance=float(pdist(particles.reshape(L, -1)).mean()) if L > 1 else 0.0,
        )
        records.append(record)
        if on_step is not None:
            on_step(record)

    out = ParticleEnsemble(particles, seed)
    return SampleResult(ensemble=out, records=records, initial_particles=initial)
