"""Segmented long-sequence generation with overlap pinning.

Each segment after the first reuses the last K frames of its predecessor as
context: those frames get a context mask of one and conditionals derived from
the predecessor's content (by inversion, or by direct forward-noising), so the
sampler reproduces them while generating the remaining frames fresh.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .compose import (
    CompositeTarget,
    ContextConditionals,
    LambdaPolicy,
    ReconStep,
    ScoreModel,
    direct_conditionals,
    model_velocity_field,
)
from .errors import ContractViolation, DomainError
from .experts import isotropic_expert
from .fields import FRAME_AXIS
from .flows import AnnealLadder, NoiseSchedule
from .inversion import rf_invert
from .masks import MaskSet, as_mask
from .svgd import RefinePolicy, SampleResult, SvgdConfig, anneal_sample


@dataclass(frozen=True)
class SegmentSpec:
    """Per-segment expert set; masks and ladder length may be overridden."""

    experts: list[tuple[ScoreModel, np.ndarray, float]]
    masks: MaskSet | None = None
    T: int | None = None


@dataclass(frozen=True)
class SegmentPlan:
    frames_per_segment: int
    overlap: int
    segments: list[SegmentSpec]
    context_mode: str = "inversion"  # "inversion" | "direct"
    context_var: float = 0.05
    first_context: ContextConditionals | None = None

    def __post_init__(self):
        if not self.segments:
            raise DomainError("plan needs at least one segment")
        if not 0 < self.overlap < self.frames_per_segment:
            raise DomainError(
                f"overlap must satisfy 0 < K < N, got K={self.overlap}, N={self.frames_per_segment}"
            )
        if self.context_mode not in ("inversion", "direct"):
            raise DomainError(f"unknown context mode {self.context_mode!r}")

    @property
    def count(self) -> int:
        return len(self.segments)

    def total_frames(self) -> int:
        n, k, s = self.frames_per_segment, self.overlap, self.count
        return n + (s - 1) * (n - k)


@dataclass
class SegmentResult:
    index: int
    sample: np.ndarray  # the continued particle (H, W, N, C)
    result: SampleResult
    context: ContextConditionals | None


@dataclass
class ExtendResult:
    sequence: np.ndarray  # (H, W, total_frames, C)
    segments: list[SegmentResult] = field(default_factory=list)

    def overlap_errors(self, overlap: int) -> list[float]:
        """Relative L2 disagreement on each segment boundary's shared frames."""
        errs = []
        for prev, cur in zip(self.segments, self.segments[1:]):
            tail = prev.sample[:, :, -overlap:, :]
            head = cur.sample[:, :, :overlap, :]
            denom = float(np.linalg.norm(tail))
            errs.append(float(np.linalg.norm(head - tail)) / max(denom, 1e-300))
        return errs


def overlap_frame_mask(shape: tuple[int, int, int, int], overlap: int) -> np.ndarray:
    """Mask that is one on the first ``overlap`` frames, zero elsewhere."""
    m = np.zeros(shape[:3] + (1,))
    m[:, :, :overlap, :] = 1.0
    return m


def _segment_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def _overlap_context(
    plan: SegmentPlan,
    tail: np.ndarray,
    shape: tuple[int, int, int, int],
    ladder: AnnealLadder,
    sched: NoiseSchedule,
    seed: int,
    index: int,
) -> ContextConditionals:
    """Conditionals for the reference that pins the previous segment's tail.

    Frames past the overlap hold the last shared frame, a static continuation
    that only matters as scaffolding (their context mask is zero).
    """
    reference = np.repeat(tail[:, :, -1:, :], shape[2], axis=FRAME_AXIS)
    reference[:, :, : plan.overlap, :] = tail
    if plan.context_mode == "direct":
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, index, 7])))
        return direct_conditionals(reference, ladder, rng)
    model = isotropic_expert(reference, plan.context_var, name="overlap-context")
    return rf_invert(reference, model_velocity_field(model, sched), ladder)


def extend(
    plan: SegmentPlan,
    base_ladder: AnnealLadder,
    svgd: SvgdConfig,
    L: int,
    seed: int,
    lambda_policy: LambdaPolicy | None = None,
    recon: ReconStep | None = None,
    refine: RefinePolicy | None = None,
) -> ExtendResult:
    """Run the plan segment by segment and concatenate with overlap dedup.

    Earlier segments keep their copy of shared frames; each segment continues
    particle 0 of its predecessor's ensemble.
    """
    sched = base_ladder.schedule
    segments: list[SegmentResult] = []
    chunks: list[np.ndarray] = []
    tail: np.ndarray | None = None

    for s, spec in enumerate(plan.segments):
        ladder = base_ladder if spec.T is None else AnnealLadder(
            T=spec.T, schedule=sched, grid=base_ladder.grid
        )
        shape = spec.experts[0][1].shape[:3] + (1,)
        if shape[2] != plan.frames_per_segment:
            raise ContractViolation(
                f"segment {s} masks carry {shape[2]} frames, plan says {plan.frames_per_segment}"
            )

        if s == 0:
            context = plan.first_context
            masks = spec.masks
            experts = list(spec.experts)
        else:
            assert tail is not None
            channels = tail.shape[3]
            field_shape = shape[:3] + (channels,)
            if tail.shape != field_shape[:2] + (plan.overlap, channels):
                raise ContractViolation(
                    f"overlap tail shape {tail.shape} incompatible with segment fields {field_shape}"
                )
            context = _overlap_context(plan, tail, field_shape, ladder, sched, seed, s)
            gate = 1.0 - overlap_frame_mask(shape, plan.overlap)
            experts = [(m, as_mask(mask * gate), w) for m, mask, w in spec.experts]
            src = spec.masks or MaskSet.from_masks(
                1.0 - overlap_frame_mask(shape, plan.overlap), np.zeros(shape)
            )
            masks = MaskSet.from_masks(src.fg * gate, src.sim * gate)

        target = CompositeTarget(
            experts=experts,
            ladder=ladder,
            masks=masks,
            context=context,
            lambda_policy=lambda_policy or LambdaPolicy(),
            recon=recon,
        )
        result = anneal_sample(target, ladder, svgd, L, _segment_seed(seed, s), refine=refine)
        sample = result.ensemble.particles[0]
        segments.append(SegmentResult(index=s, sample=sample, result=result, context=context))

        if s == 0:
            chunks.append(sample)
        else:
            chunks.append(sample[:, :, plan.overlap :, :])
        tail = sample[:, :, -plan.overlap :, :]

    return ExtendResult(sequence=np.concatenate(chunks, axis=FRAME_AXIS), segments=segments)
