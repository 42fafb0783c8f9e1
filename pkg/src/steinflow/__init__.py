"""Annealed Stein variational sampling from masked products of flow experts."""

__version__ = "0.1.0"

from .flows import AnnealLadder, NoiseSchedule, clean_prediction, score_from_velocity, velocity_from_score
from .experts import GaussianComponent, GmmExpert, GridSpec, grid_brute_density, isotropic_expert, product_moments
from .compose import CompositeTarget, ContextConditionals, LambdaPolicy, ReconStep, composed_score, context_project, recon_grad_step
from .inversion import flow_forward, rf_invert
from .masks import MaskSet, refine_masks, smooth_mask
from .svgd import ParticleEnsemble, SvgdConfig, anneal_sample, median_bandwidth, svgd_direction
from .segments import SegmentPlan, SegmentSpec, extend

__all__ = [
    "AnnealLadder",
    "NoiseSchedule",
    "clean_prediction",
    "score_from_velocity",
    "velocity_from_score",
    "GaussianComponent",
    "GmmExpert",
    "GridSpec",
    "grid_brute_density",
    "isotropic_expert",
    "product_moments",
    "CompositeTarget",
    "ContextConditionals",
    "LambdaPolicy",
    "ReconStep",
    "composed_score",
    "context_project",
    "recon_grad_step",
    "flow_forward",
    "rf_invert",
    "MaskSet",
    "refine_masks",
    "smooth_mask",
    "ParticleEnsemble",
    "SvgdConfig",
    "anneal_sample",
    "median_bandwidth",
    "svgd_direction",
    "SegmentPlan",
    "SegmentSpec",
    "extend",
]
