"""Independent reference computations the implementation is checked against.

Everything here is derived from first principles (Gaussian conditioning,
finite differences, quadrature, closed-form ODE solutions) and never calls
into the conversion formulas under test.
"""

from __future__ import annotations

import numpy as np
from scipy.integrate import cumulative_trapezoid


def gaussian_posterior_moments(x, mu, data_var, alpha, sigma):
    """E[x1 | x_tau = x] and E[eps | x_tau = x] for x1 ~ N(mu, data_var I).

    With x = alpha*x1 + sigma*eps, standard Gaussian conditioning gives the
    posterior mean of the data endpoint and of the injected noise.
    """
    marg_var = alpha * alpha * data_var + sigma * sigma
    e_x1 = (sigma * sigma * mu + data_var * alpha * x) / marg_var
    e_eps = (x - alpha * e_x1) / sigma
    return e_x1, e_eps


def flux_velocity_1d(pdf, xs, tau, h=1e-4):
    """Probability-flow velocity on a 1-d state from the continuity equation.

    v(x) = -(1/p(x)) * int_{-inf}^{x} dp/dtau(y) dy, with dp/dtau estimated by
    central differences of the marginal density and the integral by the
    trapezoid rule. ``pdf(ys, tau)`` must evaluate the density on a grid.
    """
    dp_dtau = (pdf(xs, tau + h) - pdf(xs, tau - h)) / (2.0 * h)
    flux = cumulative_trapezoid(dp_dtau, xs, initial=0.0)
    return -flux / pdf(xs, tau)


def fd_gradient(f, x, h=1e-4):
    """Central-difference gradient of a scalar function of a lattice field."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        xp = x.copy()
        xm = x.copy()
        xp[idx] += h
        xm[idx] -= h
        grad[idx] = (f(xp) - f(xm)) / (2.0 * h)
        it.iternext()
    return grad


def linear_flow_solution(z0, a, tau0, tau1):
    """Exact solution of dz/dtau = a*z from tau0 to tau1."""
    return z0 * np.exp(a * (tau1 - tau0))


def pairwise_distances(points):
    """All unordered pairwise Euclidean distances, by explicit enumeration."""
    pts = [np.asarray(p, dtype=np.float64).ravel() for p in points]
    out = []
    for i in range(len(pts)):
        for j in range(i + 1, len(pts)):
            out.append(float(np.linalg.norm(pts[i] - pts[j])))
    return out


def product_moments_by_quadrature(means, variances, lo=-30.0, hi=30.0, num=200001):
    """Mean/variance of a 1-d product of Gaussians via direct integration."""
    xs = np.linspace(lo, hi, num)
    log_p = np.zeros_like(xs)
    for m, v in zip(means, variances):
        log_p += -0.5 * (xs - m) ** 2 / v - 0.5 * np.log(2 * np.pi * v)
    p = np.exp(log_p - log_p.max())
    z = np.trapezoid(p, xs)
    mean = np.trapezoid(xs * p, xs) / z
    var = np.trapezoid((xs - mean) ** 2 * p, xs) / z
    return float(mean), float(var)
