from dataclasses import replace

import numpy as np
import pytest

from vcmm import (FitConfig, SimConfig, SimTruth, calibration_study, generate_dataset,
                  mise_study, rmise_study)
from vcmm.simulation import rate_study, replicate_rng


class TestGenerator:
    def test_deterministic(self, sim_default):
        a = generate_dataset(sim_default, seed=5, rep=3)
        b = generate_dataset(sim_default, seed=5, rep=3)
        assert a.data == b.data
        np.testing.assert_array_equal(a.e, b.e)
        c = generate_dataset(sim_default, seed=5, rep=4)
        assert not np.array_equal(a.data.y[:10], c.data.y[:10])

    def test_stream_definition(self):
        want = np.random.Generator(np.random.PCG64(np.random.SeedSequence(8, spawn_key=(2,))))
        assert replicate_rng(8, 2).standard_normal() == want.standard_normal()

    def test_cluster_sizes(self):
        sd = generate_dataset(SimConfig(m=100_000, sigma=0.0), seed=1)
        sizes = sd.data.sizes
        assert sizes.min() >= 6
        # E floor(|2 xi| + 6) = 6 + sum_k P(|xi| >= k/2) = 7.1292
        assert sizes.mean() == pytest.approx(7.129, abs=0.02)

    def test_fixed_cluster_size(self):
        sd = generate_dataset(SimConfig(m=7, cluster_size=50), seed=0)
        assert (sd.data.sizes == 50).all()

    def test_response_composition(self):
        sd = generate_dataset(SimConfig(m=30), seed=2)
        d = sd.data
        lay = sd.truth.layout
        fixed = np.einsum("ns,ns->n", lay.gamma(d.x, d.z[d.cluster_index]), sd.truth.theta(d.u))
        rand = np.einsum("np,np->n", d.x, sd.e[d.cluster_index])
        np.testing.assert_allclose(d.y, fixed + rand + sd.eps, atol=1e-12)

    def test_default_truth(self):
        t = SimTruth.default()
        u = np.array([0.25])
        assert t.coef("alpha0_1", u)[0] == pytest.approx(1.0)
        assert t.coef("alpha1_2", u)[0] == pytest.approx(0.0, abs=1e-15)
        assert t.coef("alpha2_3", u)[0] == pytest.approx(np.sqrt(0.5))
        assert t.coef("beta_0", u)[0] == pytest.approx(1.0)

    def test_invalid_configs(self):
        with pytest.raises(ValueError):
            SimConfig(Sigma=-1.0)
        with pytest.raises(ValueError):
            SimConfig(Sigma=np.ones((2, 2)))
        with pytest.raises(ValueError):
            SimConfig(truth=SimTruth.default(p=2))


class TestStudies:
    def test_mise_noiseless_linear_truth(self):
        sim = SimConfig(m=40, sigma=0.0, Sigma=0.0)
        truth = sim.truth
        for nm in sim.layout.names:
            truth = truth.with_function(nm, lambda u: 0.3 - 1.2 * u)
        rep = mise_study(replace(sim, truth=truth), FitConfig(h=0.3), reps=2, seed=1)
        assert rep.mise.max() < 1e-10
        assert max(rep.varcomp_mse.values()) < 1e-20
        assert rep.failed == 0

    def test_mise_grows_with_noise(self):
        cfg = FitConfig(h=0.2)
        lo = mise_study(SimConfig(m=50, sigma=0.2), cfg, reps=4, seed=3)
        hi = mise_study(SimConfig(m=50, sigma=1.0), cfg, reps=4, seed=3)
        assert hi.mise.sum() > lo.mise.sum()
        assert set(lo.varcomp_mse) == {"Sigma_11", "Sigma_12", "Sigma_13", "Sigma_22",
                                       "Sigma_23", "Sigma_33", "sigma2"}

    def test_mise_integration_modes(self):
        sim = SimConfig(m=40)
        full = mise_study(sim, FitConfig(h=0.2), reps=1, seed=0)
        trim = mise_study(sim, FitConfig(h=0.2), reps=1, seed=0, integrate="trimmed")
        assert full.integration != trim.integration
        with pytest.raises(ValueError):
            mise_study(sim, FitConfig(h=0.2), reps=1, integrate="middle")

    def test_rmise_shapes(self):
        sim = SimConfig(m=30, intercept=False)
        rep = rmise_study(sim, bandwidths=(0.2, 0.3), reps=1, seed=0)
        assert rep.rmise_a.shape == (2,) and rep.rmise_beta.shape == (2,)
        assert np.all(rep.rmise_a > 0) and np.all(np.isfinite(rep.rmise_beta))
        assert np.all((rep.infeasible >= 0) & (rep.infeasible <= 1))

    def test_calibration_report(self):
        sim = SimConfig(m=60)
        rep = calibration_study(sim, FitConfig(h=0.2), reps=3, seed=0)
        assert rep.reps == 3 and rep.statistics.size + rep.failed == 3
        assert 0 <= rep.reject_rate <= 1 and 0 <= rep.coverage <= 1
        assert np.all((rep.p_values >= 0) & (rep.p_values <= 1))
        assert set(rep.as_dict()) >= {"constancy_reject_rate", "band_coverage"}

    def test_rate_requires_constant_truth(self):
        with pytest.raises(ValueError):
            rate_study(SimConfig(m=30), FitConfig(h=0.3), reps=1)

    def test_rate_report(self):
        sim = SimConfig(m=40)
        sim = replace(sim, truth=sim.truth.with_constant("alpha1_1", 0.5))
        rep = rate_study(sim, FitConfig(h=0.25), reps=2, seed=0)
        assert rep.names == ("alpha1_1",)
        assert rep.m == (40, 80)
        assert rep.mse_constants.shape == (2, 1)
        assert rep.ratio_total == pytest.approx(rep.ratio_constants[0])
