import numpy as np
import pytest
from scipy import stats

from vaeprior.field import synthesize, to_permeability
from vaeprior.flow import FlowSolverError, FlowSystem, SensorLayout, five_spot_wells
from vaeprior.mcmc import (ChainConfig, ChainState, ForwardModel, InverseProblem, KLEPrior,
                           LikelihoodSpec, VAEPrior, chain_seed, log_likelihood, metropolis_step,
                           pcn_propose, relative_misfit, run_chain, run_ensemble)
from vaeprior.vae.model import ArchitectureSpec, decode, init_params


def flat(theta):
    return 0.0


def quad(theta):
    # Gaussian likelihood centred at 1 with variance 0.5
    return -float(np.sum((theta - 1.0) ** 2)) / (2 * 0.5)


def reject_all(theta):
    return -np.inf


def fail_half(theta):
    if theta[0] > 0:
        raise FlowSolverError("synthetic failure")
    return 0.0


class TestProposal:
    def test_moments(self):
        rng = np.random.default_rng(0)
        theta = np.array([2.0, -1.0, 0.5])
        g = 0.3
        xi = np.array([pcn_propose(theta, g, rng) for _ in range(100_000)])
        np.testing.assert_allclose(xi.mean(0), np.sqrt(1 - g * g) * theta, atol=0.005)
        np.testing.assert_allclose(xi.std(0), g, rtol=0.01)

    def test_gamma_one_is_fresh_draw(self):
        theta = np.arange(4.0)
        a = pcn_propose(theta, 1.0, np.random.default_rng(5))
        np.testing.assert_array_equal(a, np.random.default_rng(5).standard_normal(4))

    def test_small_gamma_continuity(self, rng):
        theta = rng.standard_normal(10)
        assert np.max(np.abs(pcn_propose(theta, 1e-8, rng) - theta)) < 1e-6

    @pytest.mark.parametrize("g", [0.0, 1.5, -0.1])
    def test_invalid_gamma(self, g):
        with pytest.raises(ValueError):
            pcn_propose(np.zeros(2), g, np.random.default_rng(0))

    def test_preserves_prior(self):
        # exact pCN moves keep N(0, I) invariant
        rng = np.random.default_rng(1)
        x = rng.standard_normal((20_000, 2))
        for _ in range(5):
            x = pcn_propose(x, 0.4, rng)
        assert stats.kstest(x[:, 0], "norm").pvalue > 1e-3
        assert abs(np.cov(x.T)[0, 1]) < 0.03


class TestMetropolis:
    def test_equal_loglik_always_accepts(self, rng):
        s = ChainState(np.zeros(3), 0.0)
        for _ in range(100):
            s2, acc, failed = metropolis_step(s, flat, 0.5, rng)
            assert acc and not failed
            s = s2

    def test_forced_reject_keeps_state(self, rng):
        s = ChainState(np.ones(3), -1.0)
        for _ in range(20):
            s2, acc, _ = metropolis_step(s, reject_all, 0.5, rng)
            assert not acc and s2 is s

    def test_shift_invariance(self):
        # adding a constant to logL changes nothing
        c = 1234.5
        a = run_chain(ChainConfig(500, 0, 0.5), quad, 2, 9)
        b = run_chain(ChainConfig(500, 0, 0.5), lambda t: quad(t) + c, 2, 9)
        np.testing.assert_array_equal(a.accepted, b.accepted)
        np.testing.assert_array_equal(a.thetas, b.thetas)

    def test_solver_failure_is_rejection(self, rng):
        s = ChainState(np.full(2, -3.0), 0.0)
        n_fail = 0
        for _ in range(200):
            s, acc, failed = metropolis_step(s, fail_half, 0.9, rng)
            n_fail += failed
            assert not (acc and failed)
            assert s.theta[0] <= 0
        assert n_fail > 0


class TestChain:
    def test_counters_and_length(self):
        tr = run_chain(ChainConfig(1000, 100, 0.3, thin=4), quad, 3, 17)
        assert tr.thetas.shape == (250, 3)
        np.testing.assert_array_equal(tr.steps, np.arange(4, 1001, 4))
        assert tr.n_moves == 900
        assert 0 < tr.n_accepted <= 900
        assert tr.post_burn_in().shape == (225, 3)

    def test_cached_loglik(self):
        tr = run_chain(ChainConfig(300, 0, 0.5), quad, 2, 3)
        for th, ll in zip(tr.thetas, tr.logliks):
            assert ll == pytest.approx(quad(th), abs=1e-12)
        assert tr.initial_loglik == pytest.approx(quad(tr.initial_theta), abs=1e-12)

    def test_accept_count_matches_flags(self):
        tr = run_chain(ChainConfig(400, 50, 0.5), quad, 2, 4)
        assert tr.n_accepted == int(tr.accepted[tr.steps > 50].sum())
        moved = np.any(np.diff(np.vstack([tr.initial_theta, tr.thetas]), axis=0) != 0, axis=1)
        np.testing.assert_array_equal(moved, tr.accepted)

    def test_deterministic(self):
        a = run_chain(ChainConfig(200, 0, 0.2), quad, 4, 77)
        b = run_chain(ChainConfig(200, 0, 0.2), quad, 4, 77)
        np.testing.assert_array_equal(a.thetas, b.thetas)
        c = run_chain(ChainConfig(200, 0, 0.2), quad, 4, 78)
        assert not np.array_equal(a.thetas, c.thetas)

    def test_flat_likelihood_keeps_prior(self):
        finals = np.array([run_chain(ChainConfig(30, 0, 0.3), flat, 2, s).thetas[-1]
                           for s in range(2000)])
        assert stats.kstest(finals[:, 0], "norm").pvalue > 1e-3
        assert stats.kstest(finals[:, 1], "norm").pvalue > 1e-3

    def test_gaussian_posterior(self):
        # prior N(0, 1) and likelihood N(1, 0.5): posterior N(2/3, 1/3)
        tr = run_chain(ChainConfig(60_000, 2000, 0.6), quad, 1, 2)
        s = tr.post_burn_in()[:, 0]
        assert s.mean() == pytest.approx(2 / 3, abs=0.03)
        assert s.var() == pytest.approx(1 / 3, rel=0.08)

    def test_ensemble_serial_equals_parallel(self, tmp_path):
        cfg = ChainConfig(200, 20, 0.4)
        a = run_ensemble(3, cfg, quad, 2, 5)
        b = run_ensemble(3, cfg, quad, 2, 5, trace_dir=tmp_path, workers=2)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.thetas, y.thetas)
        assert sorted(p.name for p in tmp_path.iterdir()) == ["chain_00.trc", "chain_01.trc",
                                                              "chain_02.trc"]
        assert len({chain_seed(5, i) for i in range(3)}) == 3

    def test_aborted_chain_reported(self):
        def boom(theta):
            raise FlowSolverError("always")
        out = run_ensemble(2, ChainConfig(10, 0, 0.5), boom, 2, 0)
        assert all(t.aborted for t in out)

    @pytest.mark.parametrize("kw", [dict(iterations=0), dict(burn_in=10, iterations=10),
                                    dict(gamma=0.0), dict(gamma=1.2), dict(thin=0)])
    def test_config_validation(self, kw):
        with pytest.raises(ValueError):
            ChainConfig(**kw)


class TestPriors:
    def test_kle_prior_matches_synthesize(self, basis20, rng):
        p = KLEPrior(basis20, 20)
        th = rng.standard_normal(20)
        np.testing.assert_array_equal(p.gaussian(th).values, synthesize(basis20, th, 20).values)
        np.testing.assert_array_equal(p.permeability(th).values,
                                      to_permeability(synthesize(basis20, th, 20), 9.87e-14, 1.0).values)
        with pytest.raises(ValueError):
            p.gaussian(np.zeros(19))
        with pytest.raises(ValueError):
            KLEPrior(basis20, 0)

    def test_vae_prior_composition(self, grid20, rng):
        arch = ArchitectureSpec(input_shape=(20, 20), latent_dim=3, filters=2, kernel=3, dense_units=8)
        params = init_params(arch, rng)
        p = VAEPrior(params, grid20)
        z = rng.standard_normal(3)
        np.testing.assert_array_equal(p.gaussian(z).values, decode(params, z)[..., 0].ravel())
        with pytest.raises(ValueError):
            VAEPrior(params, type(grid20)(50.0, 50.0, 10, 10))


class TestLikelihood:
    def test_relative_misfit(self):
        assert relative_misfit([3.0, 4.0], [0.0, 0.0]) == 1.0
        assert relative_misfit([3.0, 4.0], [3.0, 4.0]) == 0.0
        with pytest.raises(ValueError):
            relative_misfit([0.0, 0.0], [1.0, 1.0])

    def test_log_likelihood(self):
        spec = LikelihoodSpec(np.array([3.0, 4.0]), sigma2=0.25)
        assert log_likelihood(spec, [0.0, 4.0]) == pytest.approx(-9 / 25 / 0.25)
        with pytest.raises(ValueError):
            LikelihoodSpec(np.ones(2), sigma2=0.0)

    def test_inverse_problem(self, basis20, grid20, rng):
        prior = KLEPrior(basis20, 10)
        flow = FlowSystem(grid20, five_spot_wells(grid20))
        fwd = ForwardModel(flow, SensorLayout.lattice(grid20).cells(grid20))
        th = rng.standard_normal(10)
        d = InverseProblem(prior, fwd, LikelihoodSpec(np.ones(25))).simulate(th)
        prob = InverseProblem(prior, fwd, LikelihoodSpec(d))
        assert prob(th) == 0.0
        assert prob(th + 0.5) < 0.0
