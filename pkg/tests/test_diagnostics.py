import numpy as np
import pytest
from scipy import stats

from vaeprior.diagnostics import (ErrorSummary, MPSRFSeries, acceptance_rate, data_relative_error,
                                  field_relative_error, kolmogorov_sf, ks_two_sample, mpsrf,
                                  pool_posterior, posterior_mean_field)
from vaeprior.field import FieldSample, GridSpec
from vaeprior.mcmc import ChainConfig, ChainTrace, run_chain


def mpsrf_oracle(chains):
    # direct evaluation at the full length
    chains = [np.asarray(c) for c in chains]
    m, n = len(chains), chains[0].shape[0]
    W = np.mean([np.cov(c, rowvar=False) for c in chains], axis=0)
    means = np.array([c.mean(0) for c in chains])
    Bn = np.atleast_2d(np.cov(means, rowvar=False))
    W = np.atleast_2d(W)
    lam = np.max(np.real(np.linalg.eigvals(np.linalg.solve(W, Bn))))
    return (n - 1) / n + (m + 1) / m * lam


def fake_trace(n_acc, iterations=100, burn_in=0):
    z = np.zeros(0)
    return ChainTrace(0, 1, iterations, burn_in, 1, z.astype(int), np.zeros((0, 1)), z,
                      z.astype(bool), n_accepted=n_acc)


class TestMPSRF:
    def test_identical_chains(self, rng):
        x = rng.standard_normal((500, 3))
        r = mpsrf([x, x.copy(), x.copy()], every=100)
        np.testing.assert_allclose(r.values, (r.n_samples - 1) / r.n_samples, rtol=1e-14)

    def test_matches_oracle(self, rng):
        chains = [rng.standard_normal((400, 3)) + 0.1 * k for k in range(4)]
        r = mpsrf(chains, checkpoints=[400])
        assert r.values[-1] == pytest.approx(mpsrf_oracle(chains), rel=1e-10)
        r2 = mpsrf(chains, checkpoints=[200, 400])
        assert r2.values[0] == pytest.approx(mpsrf_oracle([c[:200] for c in chains]), rel=1e-10)
        assert r2.values[1] == pytest.approx(r.values[0], rel=1e-12)

    def test_iid_converged(self):
        rng = np.random.default_rng(2)
        r = mpsrf([rng.standard_normal((5000, 5)) for _ in range(4)], every=1000)
        assert r.values[-1] < 1.05
        assert r.convergence_iteration == 1000

    def test_offset_detected(self):
        rng = np.random.default_rng(3)
        chains = [rng.standard_normal((5000, 5)) for _ in range(4)]
        chains[0] = chains[0] + 5.0
        r = mpsrf(chains, every=1000)
        assert np.all(r.values > 1.2)
        assert r.convergence_iteration is None

    def test_affine_invariance(self, rng):
        chains = [rng.standard_normal((300, 3)) + 0.2 * k for k in range(3)]
        A = rng.standard_normal((3, 3)) + 3 * np.eye(3)
        b = rng.standard_normal(3)
        r1 = mpsrf(chains, checkpoints=[300]).values[0]
        r2 = mpsrf([c @ A.T + b for c in chains], checkpoints=[300]).values[0]
        assert r2 == pytest.approx(r1, rel=1e-8)

    def test_burn_in_and_traces(self):
        traces = [run_chain(ChainConfig(600, 100, 0.5), lambda t: 0.0, 2, s) for s in range(3)]
        r = mpsrf(traces, every=100)
        assert r.checkpoints[0] == 200 and r.checkpoints[-1] == 600
        assert r.n_samples[-1] == 500
        post = [t.post_burn_in() for t in traces]
        assert r.values[-1] == pytest.approx(mpsrf_oracle(post), rel=1e-10)

    def test_singular_within_covariance(self, rng):
        # a constant coordinate makes W singular
        chains = [np.column_stack([rng.standard_normal(200), np.zeros(200)]) for _ in range(3)]
        chains[1][:, 0] += 0.3
        r = mpsrf(chains, checkpoints=[200])
        assert r.regularized and np.isfinite(r.values[0])

    def test_errors(self, rng):
        with pytest.raises(ValueError):
            mpsrf([rng.standard_normal((10, 2))])
        with pytest.raises(ValueError):
            mpsrf([rng.standard_normal((10, 2)), rng.standard_normal((10, 3))])

    def test_series_convergence(self):
        s = MPSRFSeries(np.array([10, 20, 30]), np.array([1.5, 1.1, 1.3]), np.array([1, 2, 3]))
        assert s.convergence_iteration == 20


class TestAcceptance:
    def test_bounds(self):
        assert acceptance_rate(fake_trace(0)) == 0.0
        assert acceptance_rate(fake_trace(100)) == 100.0
        assert acceptance_rate(fake_trace(9, 100, 70)) == 30.0

    def test_flat_likelihood_accepts_all(self):
        tr = run_chain(ChainConfig(200, 20, 0.3), lambda t: 0.0, 2, 1)
        assert acceptance_rate(tr) == 100.0


class TestKS:
    def test_matches_scipy(self, rng):
        for _ in range(20):
            a = rng.standard_normal(rng.integers(20, 200))
            b = rng.normal(0.3, 1.2, rng.integers(20, 200))
            r = ks_two_sample(a, b)
            ref = stats.ks_2samp(a, b)
            assert r.statistic == pytest.approx(ref.statistic, abs=1e-14)
            en = a.size * b.size / (a.size + b.size)
            assert r.pvalue == pytest.approx(stats.kstwobign.sf(np.sqrt(en) * r.statistic), abs=1e-10)

    @pytest.mark.parametrize("x", [0.05, 0.3, 0.8, 1.17, 1.19, 1.5, 2.5])
    def test_kolmogorov_sf(self, x):
        assert kolmogorov_sf(x) == pytest.approx(stats.kstwobign.sf(x), abs=1e-12)

    def test_identical_samples(self, rng):
        a = rng.standard_normal(50)
        r = ks_two_sample(a, a.copy())
        assert r.statistic == 0.0 and r.pvalue == 1.0

    def test_disjoint_supports(self):
        r = ks_two_sample(np.arange(10.0), np.arange(10.0) + 100)
        assert r.statistic == 1.0
        assert r.pvalue < 1e-3

    def test_calibration(self):
        rng = np.random.default_rng(8)
        p = np.array([ks_two_sample(rng.standard_normal(100), rng.standard_normal(100)).pvalue
                      for _ in range(500)])
        assert 0.02 <= np.mean(p < 0.05) <= 0.09

    def test_empty(self):
        with pytest.raises(ValueError):
            ks_two_sample([], [1.0])


class TestRelativeErrors:
    def test_exact_match(self):
        s = data_relative_error([1.0, 2.0], [[1.0, 2.0], [1.0, 2.0]])
        assert s.mean == 0.0 and s.std == 0.0 and s.count == 2

    def test_zero_simulation(self):
        assert data_relative_error([1.0, 2.0], [[0.0, 0.0]]).mean == 1.0

    def test_scaled_fields(self):
        g = GridSpec(1.0, 1.0, 2, 2)
        y = FieldSample(g, np.array([1.0, -2.0, 3.0, 0.5]))
        fields = [FieldSample(g, y.values * s) for s in (0.5, 1.5, 2.0)]
        s = field_relative_error(y, fields)
        np.testing.assert_allclose(s.values, [0.5, 0.5, 1.0], rtol=1e-14)
        assert s.std == pytest.approx(np.std([0.5, 0.5, 1.0], ddof=1))
        with pytest.raises(ValueError):
            field_relative_error(y, np.zeros((2, 3)))

    def test_summary(self):
        s = ErrorSummary.of([1.0, 3.0])
        assert (s.mean, s.count) == (2.0, 2)
        assert s.std == pytest.approx(np.sqrt(2.0))


class TestMeanField:
    def test_single_and_constant(self):
        g = GridSpec(1.0, 1.0, 2, 2)
        f = FieldSample(g, np.arange(4.0))
        np.testing.assert_array_equal(posterior_mean_field(f).values, f.values)
        m = posterior_mean_field([FieldSample(g, np.full(4, 2.0))] * 5)
        assert np.all(m.values == 2.0)

    def test_mean_of_pair(self):
        g = GridSpec(1.0, 1.0, 2, 1)
        m = posterior_mean_field(np.array([[1.0, 3.0], [3.0, 5.0]]), g)
        np.testing.assert_array_equal(m.values, [2.0, 4.0])
        with pytest.raises(ValueError):
            posterior_mean_field(np.ones((2, 2)))


class TestPooling:
    def test_draws_from_tails(self):
        traces = [run_chain(ChainConfig(300, 100, 0.5), lambda t: 0.0, 2, s) for s in range(3)]
        out = pool_posterior(traces, 50, 120, np.random.default_rng(0))
        assert out.shape == (120, 2)
        pool = np.concatenate([t.post_burn_in()[-50:] for t in traces])
        rows = {tuple(r) for r in pool}
        assert all(tuple(r) in rows for r in out)
        assert len({tuple(r) for r in out}) == 120
        with pytest.raises(ValueError):
            pool_posterior(traces, 50, 151, np.random.default_rng(0))
