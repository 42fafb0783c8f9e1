"""Closed-form score experts over lattice fields.

A Gaussian-mixture expert treats the whole lattice tensor as one variable in
R^d with isotropic per-component covariance. Under a Gaussian path the level-
tau marginal stays a mixture with means alpha*mu_k and variances
alpha^2*v_k + sigma^2, so scores and log-densities are exact.

Masked semantics: a mask m in [0,1]^{H,W,N,1} weights each cell's squared
residual inside the Gaussian exponent (and scales the log-normalizer by the
number of weighted cells). For binary masks this is exactly the expert
restricted to its masked sub-tensor; cells with zero weight get zero score.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .errors import ContractViolation, DomainError, UnsupportedOracleError
from .fields import as_field
from .flows import NoiseSchedule

_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class GaussianComponent:
    weight: float
    mean: np.ndarray  # lattice field (H, W, N, C)
    var: float  # isotropic per-cell variance

    def __post_init__(self):
        object.__setattr__(self, "mean", as_field(self.mean))
        if self.var <= 0.0:
            raise DomainError(f"component variance must be > 0, got {self.var}")
        if self.weight < 0.0:
            raise DomainError(f"component weight must be >= 0, got {self.weight}")


@dataclass(frozen=True)
class GmmExpert:
    """Mixture-of-Gaussians score backend; also usable as a ground-truth oracle."""

    components: tuple[GaussianComponent, ...]
    region: np.ndarray | None = None  # optional (H, W, N, 1) cell weights
    name: str = "gmm"

    def __post_init__(self):
        if not self.components:
            raise DomainError("expert needs at least one component")
        total = sum(c.weight for c in self.components)
        if abs(total - 1.0) > 1e-12:
            raise DomainError(f"component weights sum to {total}, expected 1")
        shape = self.components[0].mean.shape
        for c in self.components:
            if c.mean.shape != shape:
                raise ContractViolation("component means differ in shape")
        if self.region is not None:
            reg = np.asarray(self.region, dtype=np.float64)
            if reg.shape != shape[:3] + (1,):
                raise ContractViolation(
                    f"region shape {reg.shape} incompatible with field shape {shape}"
                )
            if reg.min() < 0.0 or reg.max() > 1.0:
                raise DomainError("region weights must lie in [0, 1]")
            object.__setattr__(self, "region", reg)

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.components[0].mean.shape

    def with_region(self, region: np.ndarray | None) -> "GmmExpert":
        return GmmExpert(self.components, region=region, name=self.name)

    def marginal_params(self, tau: float, sched: NoiseSchedule) -> list[tuple[float, np.ndarray, float]]:
        """Per-component (weight, mean, variance) of the level-tau marginal."""
        a, sg = sched.marginal_scale(tau)
        return [(c.weight, a * c.mean, a * a * c.var + sg * sg) for c in self.components]

    def score(self, x: np.ndarray, tau: float, sched: NoiseSchedule) -> np.ndarray:
        """Gradient of the (masked) marginal log-density at x.

        Accepts a single field or a stacked batch with leading axes; the
        mixture reduction always runs over the trailing 4 field axes.
        """
        x = np.asarray(x, dtype=np.float64)
        params = self.marginal_params(tau, sched)
        if len(params) == 1:
            # single Gaussian: responsibilities are trivially 1
            _, mean, var = params[0]
            out = (mean - x) / var
            return out * self.region if self.region is not None else out
        logits, residuals = self._component_logits(x, params)
        # responsibilities: softmax over components, broadcast to field axes
        r = np.exp(logits - logsumexp(logits, axis=0, keepdims=True))
        r = r.reshape(r.shape + (1, 1, 1, 1))
        out = np.zeros_like(x)
        for k, (_, _, var) in enumerate(params):
            out += r[k] * (-residuals[k] / var)
        if self.region is not None:
            out = out * self.region
        return out

    def log_density(self, x: np.ndarray, tau: float, sched: NoiseSchedule) -> np.ndarray:
        """(Masked) marginal log-density; scalar for a single field, else batched."""
        x = np.asarray(x, dtype=np.float64)
        params = self.marginal_params(tau, sched)
        logits, _ = self._component_logits(x, params)
        out = logsumexp(logits, axis=0)
        return float(out) if out.ndim == 0 else out

    def data_log_density(self, x: np.ndarray) -> np.ndarray:
        """(Masked) log-density of the clean data mixture itself."""
        x = np.asarray(x, dtype=np.float64)
        params = [(c.weight, c.mean, c.var) for c in self.components]
        logits, _ = self._component_logits(x, params)
        out = logsumexp(logits, axis=0)
        return float(out) if out.ndim == 0 else out

    def _component_logits(self, x, params):
        """log(w_k) + masked component log-density, stacked over components."""
        weights = self.region if self.region is not None else None
        if weights is None:
            n_eff = float(np.prod(self.shape))
        else:
            n_eff = float(weights.sum()) * self.shape[3]
        logits = []
        residuals = []
        for w, mean, var in params:
            resid = x - mean
            sq = resid * resid if weights is None else weights * resid * resid
            sqsum = sq.sum(axis=(-4, -3, -2, -1))
            loglik = -0.5 * sqsum / var - 0.5 * n_eff * (_LOG_2PI + np.log(var))
            logits.append(np.log(w) if w > 0 else -np.inf)
            logits[-1] = logits[-1] + loglik
            residuals.append(resid)
        return np.stack(logits, axis=0), residuals


def isotropic_expert(
    mean: np.ndarray | float,
    var: float,
    shape: tuple[int, int, int, int] | None = None,
    name: str = "gaussian",
) -> GmmExpert:
    """Single-component Gaussian expert; scalar means become constant fields."""
    if np.isscalar(mean):
        if shape is None:
            raise ContractViolation("scalar mean needs an explicit lattice shape")
        mean = np.full(shape, float(mean))
    return GmmExpert((GaussianComponent(1.0, np.asarray(mean), var),), name=name)


def product_moments(experts: list[GmmExpert]) -> tuple[np.ndarray, float]:
    """Precision-weighted mean field and variance of a product of Gaussians.

    Exact for single-component, unmasked experts; anything else is refused so
    the oracle stays trustworthy.
    """
    if not experts:
        raise UnsupportedOracleError("empty expert list")
    for e in experts:
        if len(e.components) != 1:
            raise UnsupportedOracleError("product oracle requires single-component experts")
        if e.region is not None and not np.all(e.region == 1.0):
            raise UnsupportedOracleError("product oracle requires unmasked experts")
    precision = sum(1.0 / e.components[0].var for e in experts)
    mean = sum(e.components[0].mean / e.components[0].var for e in experts) / precision
    return mean, 1.0 / precision


@dataclass(frozen=True)
class GridSpec:
    lo: float = -6.0
    hi: float = 6.0
    num: int = 201

    def axis(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.num)


@dataclass
class DensityTable:
    """Normalized brute-force density on a tensor-product grid over cell values."""

    shape: tuple[int, int, int, int]
    axes: list[np.ndarray]
    log_values: np.ndarray  # unnormalized on construction, normalized after
    log_norm: float = field(default=0.0)

    def log_prob(self, x: np.ndarray) -> float:
        """Normalized log-density at the nearest grid cell to x."""
        flat = np.asarray(x, dtype=np.float64).reshape(-1)
        idx = tuple(int(np.argmin(np.abs(ax - v))) for ax, v in zip(self.axes, flat))
        return float(self.log_values[idx])

    def integral(self) -> float:
        """Trapezoid integral of the stored density (1.0 after normalization)."""
        vals = np.exp(self.log_values)
        for d in reversed(range(len(self.axes))):
            vals = np.trapezoid(vals, self.axes[d], axis=d)
        return float(vals)


def grid_brute_density(
    experts: list[GmmExpert],
    masks: list[np.ndarray] | None,
    grid: GridSpec = GridSpec(),
) -> DensityTable:
    """Tabulate the masked product of clean-data expert densities.

    Independent oracle for low-dimensional lattices: the total number of
    scalar cells (H*W*N*C) must be <= 3. Masks follow the same cell-weighted
    exponent semantics as the expert scores.
    """
    if not experts:
        raise UnsupportedOracleError("empty expert list")
    shape = experts[0].shape
    d = int(np.prod(shape))
    if d > 3:
        raise UnsupportedOracleError(f"grid oracle supports <= 3 cells, lattice has {d}")
    if masks is not None and len(masks) != len(experts):
        raise ContractViolation("need one mask per expert")

    axes = [grid.axis() for _ in range(d)]
    mesh = np.meshgrid(*axes, indexing="ij")
    points = np.stack([m.reshape(-1) for m in mesh], axis=-1)  # (G, d)
    fields = points.reshape((-1,) + shape)

    total = np.zeros(points.shape[0])
    for i, e in enumerate(experts):
        if masks is None:
            total += np.atleast_1d(e.data_log_density(fields))
        else:
            masked = GmmExpert(e.components, region=np.asarray(masks[i], dtype=np.float64), name=e.name)
            total += np.atleast_1d(masked.data_log_density(fields))

    table = DensityTable(shape=shape, axes=axes, log_values=total.reshape([grid.num] * d))
    raw = table.integral()
    if raw <= 0.0 or not np.isfinite(raw):
        raise UnsupportedOracleError("density mass vanished on the requested grid")
    table.log_values = table.log_values - np.log(raw)
    table.log_norm = float(np.log(raw))
    return table
