"""Schedule boundaries, ladder structure, and the score/velocity algebra."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from steinflow.errors import ContractViolation, DomainError
from steinflow.experts import GmmExpert, GaussianComponent, isotropic_expert
from steinflow.flows import (
    AnnealLadder,
    NoiseSchedule,
    clean_prediction,
    score_from_velocity,
    velocity_from_score,
)

from oracles import flux_velocity_1d, gaussian_posterior_moments

SHAPE = (2, 2, 3, 1)
CELL = (1, 1, 1, 1)


@pytest.fixture(params=["rectified_linear", "variance_preserving"])
def sched(request):
    return NoiseSchedule(kind=request.param)


class TestNoiseSchedule:
    def test_boundary_convention(self, sched):
        """alpha(0)=0, sigma(0)=1, alpha(1)=1, sigma(1)=0 to machine precision."""
        assert sched.alpha(0.0) == pytest.approx(0.0, abs=1e-15)
        assert sched.sigma(0.0) == pytest.approx(1.0, abs=1e-15)
        assert sched.alpha(1.0) == pytest.approx(1.0, abs=1e-15)
        assert sched.sigma(1.0) == pytest.approx(0.0, abs=1e-15)

    def test_monotone(self, sched):
        taus = np.linspace(0, 1, 201)
        alphas = [sched.alpha(t) for t in taus]
        sigmas = [sched.sigma(t) for t in taus]
        assert np.all(np.diff(alphas) >= 0)
        assert np.all(np.diff(sigmas) <= 0)

    def test_rectified_is_linear(self):
        s = NoiseSchedule()
        assert s.alpha(0.3) == pytest.approx(0.3)
        assert s.sigma(0.3) == pytest.approx(0.7)
        assert s.alpha_dot(0.9) == 1.0
        assert s.sigma_dot(0.1) == -1.0

    def test_clamp(self):
        s = NoiseSchedule(eps_clamp=1e-3)
        assert s.clamp(2.0) == pytest.approx(0.999)
        assert s.clamp(-1.0) == 0.0
        assert s.clamp_interior(0.0) == pytest.approx(1e-3)

    def test_bad_kind_rejected(self):
        with pytest.raises(DomainError):
            NoiseSchedule(kind="cosine")


class TestAnnealLadder:
    def test_endpoints_and_monotonicity(self):
        ladder = AnnealLadder(T=50, schedule=NoiseSchedule())
        assert ladder.tau_of(50) == 0.0
        assert ladder.tau_of(0) == pytest.approx(1.0 - 1e-3)
        taus = ladder.taus()
        assert np.all(np.diff(taus) < 0)  # strictly decreasing in t

    def test_steps_positive(self):
        for grid in ("uniform", "extended"):
            ladder = AnnealLadder(T=37, schedule=NoiseSchedule(), grid=grid)
            assert all(ladder.step(t) > 0 for t in range(1, 38))

    def test_uniform_spacing(self):
        ladder = AnnealLadder(T=10, schedule=NoiseSchedule())
        assert ladder.tau_of(7) == pytest.approx(0.3)
        # final step is shortened by the clamp at the data end
        assert ladder.step(1) == pytest.approx(0.1 - 1e-3)

    def test_extended_grid_never_reaches_data(self):
        ladder = AnnealLadder(T=10, schedule=NoiseSchedule(), grid="extended")
        assert ladder.tau_of(0) == pytest.approx(10 / 11)

    def test_domain_checks(self):
        ladder = AnnealLadder(T=5, schedule=NoiseSchedule())
        with pytest.raises(DomainError):
            ladder.tau_of(6)
        with pytest.raises(DomainError):
            ladder.step(0)


class TestVelocityFromScore:
    def test_zero_in_zero_out(self, sched):
        z = np.zeros(SHAPE)
        assert_allclose(velocity_from_score(z, z, 0.37, sched), 0.0)

    def test_shape_mismatch_rejected(self, sched):
        with pytest.raises(ContractViolation):
            velocity_from_score(np.zeros(SHAPE), np.zeros(CELL), 0.5, sched)

    def test_tau_domain(self, sched):
        x = np.zeros(CELL)
        with pytest.raises(DomainError):
            velocity_from_score(x, x, -0.1, sched)
        with pytest.raises(DomainError):
            velocity_from_score(x, x, 1.0, sched)

    def test_gaussian_posterior_velocity(self):
        """v must equal alpha'*E[x1|x] + sigma'*E[eps|x] for N(mu, I) data."""
        sched = NoiseSchedule()
        rng = np.random.default_rng(7)
        mu = rng.normal(size=SHAPE)
        expert = GmmExpert((GaussianComponent(1.0, mu, 1.0),))
        tau = 0.5
        for _ in range(20):
            x = rng.normal(size=SHAPE) * 2.0
            s = expert.score(x, tau, sched)
            v = velocity_from_score(x, s, tau, sched)
            a, sg = sched.alpha(tau), sched.sigma(tau)
            e_x1, e_eps = gaussian_posterior_moments(x, mu, 1.0, a, sg)
            oracle = sched.alpha_dot(tau) * e_x1 + sched.sigma_dot(tau) * e_eps
            assert np.max(np.abs(v - oracle)) < 1e-9

    def test_standard_normal_is_stationary_at_midpoint(self):
        """For N(0, I) data on the linear path, s(x) = -2x and v = 0 at tau=0.5."""
        sched = NoiseSchedule()
        expert = isotropic_expert(0.0, 1.0, SHAPE)
        rng = np.random.default_rng(3)
        x = rng.normal(size=SHAPE)
        s = expert.score(x, 0.5, sched)
        assert_allclose(s, -2.0 * x, atol=1e-12)
        v = velocity_from_score(x, s, 0.5, sched)
        assert np.max(np.abs(v)) < 1e-12

    @pytest.mark.parametrize("tau", [0.15, 0.4, 0.5, 0.8])
    def test_matches_flux_velocity(self, sched, tau):
        """Continuity-equation finite-difference oracle on a 1-cell lattice."""
        comps = (
            GaussianComponent(0.4, np.full(CELL, -1.2), 0.6),
            GaussianComponent(0.6, np.full(CELL, 0.9), 0.3),
        )
        expert = GmmExpert(comps)
        xs = np.linspace(-8, 8, 32001)

        def pdf(ys, t):
            fields = ys.reshape(-1, 1, 1, 1, 1)
            return np.exp(expert.log_density(fields, t, sched))

        v_fd = flux_velocity_1d(pdf, xs, tau)
        idx = np.linspace(8000, 24000, 25, dtype=int)  # stay in the bulk
        for i in idx:
            x = np.full(CELL, xs[i])
            v = velocity_from_score(x, expert.score(x, tau, sched), tau, sched)
            rel = abs(float(v.ravel()[0]) - v_fd[i]) / max(abs(v_fd[i]), 1e-2)
            assert rel < 1e-5


class TestCleanPrediction:
    def test_recovers_data_endpoint_on_path(self):
        """x = alpha*x1 + sigma*eps with the path velocity recovers x1 exactly."""
        sched = NoiseSchedule()
        rng = np.random.default_rng(11)
        x1 = rng.normal(size=SHAPE)
        eps = rng.normal(size=SHAPE)
        for tau in (0.2, 0.5, 0.77):
            x = sched.alpha(tau) * x1 + sched.sigma(tau) * eps
            v = x1 - eps  # rectified-path conditional velocity
            assert np.max(np.abs(clean_prediction(x, v, tau, sched) - x1)) < 1e-9

    def test_zero_velocity_identity(self):
        sched = NoiseSchedule()
        rng = np.random.default_rng(5)
        x = rng.normal(size=SHAPE)
        assert_allclose(clean_prediction(x, np.zeros(SHAPE), 0.4, sched), x)

    def test_matches_gaussian_posterior_mean(self, sched):
        """xhat0 must be E[x1 | x] for Gaussian data, any schedule."""
        rng = np.random.default_rng(13)
        mu = rng.normal(size=SHAPE)
        expert = GmmExpert((GaussianComponent(1.0, mu, 1.0),))
        for tau in (0.25, 0.6, 0.9):
            x = rng.normal(size=SHAPE)
            s = expert.score(x, tau, sched)
            v = velocity_from_score(x, s, tau, sched)
            a, sg = sched.alpha(sched.clamp_interior(tau)), sched.sigma(sched.clamp_interior(tau))
            e_x1, _ = gaussian_posterior_moments(x, mu, 1.0, a, sg)
            assert np.max(np.abs(clean_prediction(x, v, tau, sched) - e_x1)) < 1e-9

    def test_tweedie_identity(self, sched):
        """clean_prediction of the converted velocity equals (x + sigma^2 s)/alpha."""
        rng = np.random.default_rng(17)
        for tau in (0.1, 0.45, 0.85):
            x = rng.normal(size=SHAPE)
            s = rng.normal(size=SHAPE)
            v = velocity_from_score(x, s, tau, sched)
            a = sched.alpha(sched.clamp_interior(tau))
            sg = sched.sigma(sched.clamp_interior(tau))
            assert np.max(np.abs(clean_prediction(x, v, tau, sched) - (x + sg * sg * s) / a)) < 1e-9


class TestScoreFromVelocity:
    def test_round_trip(self, sched):
        rng = np.random.default_rng(23)
        for _ in range(100):
            tau = rng.uniform(0.05, 0.99)
            x = rng.normal(size=CELL)
            v = rng.normal(size=CELL)
            s = score_from_velocity(x, v, tau, sched)
            assert np.max(np.abs(velocity_from_score(x, s, tau, sched) - v)) < 1e-12

    def test_zero_maps_to_zero(self, sched):
        z = np.zeros(SHAPE)
        assert_allclose(score_from_velocity(z, z, 0.5, sched), 0.0)

    def test_recovers_analytic_score(self):
        sched = NoiseSchedule()
        expert = isotropic_expert(1.5, 2.0, SHAPE)
        rng = np.random.default_rng(29)
        x = rng.normal(size=SHAPE)
        tau = 0.65
        s_true = expert.score(x, tau, sched)
        v = velocity_from_score(x, s_true, tau, sched)
        assert np.max(np.abs(score_from_velocity(x, v, tau, sched) - s_true)) < 1e-9


def test_marginal_variance_continuity():
    """alpha^2 v + sigma^2 approaches the data variance at the data end."""
    sched = NoiseSchedule()
    v = 0.7
    for eps in (1e-3, 1e-4):
        tau = 1.0 - eps
        marg = sched.alpha(tau) ** 2 * v + sched.sigma(tau) ** 2
        assert abs(marg - v) < 3.0 * eps
