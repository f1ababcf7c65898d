import numpy as np
import pytest

from maxpost.condsim import ConditionalSampler, ConditioningSet, conditional_simulate
from maxpost.errors import SamplerError
from maxpost.margins import ks_test_gumbel
from maxpost.maxstable import simulate_brown_resnick_panel
from maxpost.variogram import Anisotropy, CrossVariogram

MODEL = CrossVariogram(
    sigma=1.0, kappa=0.03, aniso=Anisotropy(), beta=0.5, c=0.3,
    sigma1=0.8, nu1=1.0, sigma2=0.9, nu2=1.5, a=0.05, rho=0.6,
)

# complete obs-pred dependence: the cross-variogram vanishes identically
FULL_DEP = CrossVariogram(
    sigma=1.0, kappa=0.02, aniso=Anisotropy(), beta=0.5, c=0.0,
    sigma1=1.0, nu1=1.2, sigma2=1.0, nu2=1.2, a=0.04, rho=1.0,
)

# near-independent components: large constant effect pushes gamma_12 up
NEAR_IND = CrossVariogram(
    sigma=1.0, kappa=0.03, aniso=Anisotropy(), beta=0.5, c=7.5,
    sigma1=1.0, nu1=1.0, sigma2=1.0, nu2=1.0, a=0.05, rho=0.0,
)


class TestConditioningSet:
    def test_duplicate_sites_rejected(self):
        with pytest.raises(ValueError, match="distinct"):
            ConditioningSet(sites=[[0.0, 0.0], [0.0, 0.0]], values=[1.0, 2.0])

    def test_nonfinite_values_rejected(self):
        with pytest.raises(ValueError, match="finite"):
            ConditioningSet(sites=[[0.0, 0.0]], values=[np.inf])


class TestConditioningConsistency:
    def test_pred_component_at_conditioning_site_is_exact(self):
        cond = ConditioningSet(sites=[[5.0, 5.0]], values=[0.7])
        draws = conditional_simulate(
            MODEL, cond, [[5.0, 5.0]], 9, seed=1, target_component="pred"
        )
        assert np.all(draws == 0.7)

    def test_reconditioning_reproduces_values(self):
        cond = ConditioningSet(
            sites=[[0.0, 0.0], [20.0, 10.0]], values=[0.3, -0.4]
        )
        draws = conditional_simulate(
            MODEL, cond, cond.sites, 5, seed=2, target_component="pred"
        )
        again = conditional_simulate(
            MODEL,
            ConditioningSet(sites=cond.sites, values=draws[0]),
            cond.sites,
            3,
            seed=3,
            target_component="pred",
        )
        assert np.all(again == draws[0])

    def test_complete_dependence_identity(self):
        cond = ConditioningSet(sites=[[5.0, 5.0]], values=[0.7])
        draws = conditional_simulate(FULL_DEP, cond, [[5.0, 5.0]], 40, seed=4)
        assert np.max(np.abs(draws - 0.7)) < 1e-6


class TestDistributionalChecks:
    def test_near_independence_marginal_is_gumbel(self):
        cond = ConditioningSet(sites=[[0.0, 0.0]], values=[1.2])
        draws = conditional_simulate(NEAR_IND, cond, [[400.0, 300.0]], 10_000, seed=5)
        _, p = ks_test_gumbel(draws[:, 0])
        assert p >= 0.01

    def test_rejection_binning_oracle_single_site(self):
        cond_site = np.array([[0.0, 0.0]])
        target = np.array([[20.0, 10.0]])
        locs = np.vstack([target, cond_site])
        panel = simulate_brown_resnick_panel(locs, MODEL, 120_000, seed=6)
        z_target = panel[:, 0, 0]
        z_cond = panel[:, 1, 1]
        zstar = 0.0
        keep = np.abs(z_cond - zstar) <= 0.05
        survivors = z_target[keep]
        assert survivors.size >= 2000
        draws = conditional_simulate(
            MODEL, ConditioningSet(sites=cond_site, values=[zstar]), target, 5000, seed=7
        )
        for x in (-1.0, 0.0, 1.0):
            diff = abs(np.mean(draws[:, 0] <= x) - np.mean(survivors <= x))
            assert diff <= 0.05

    def test_monotone_in_conditioning_values(self):
        cond_sites = [[0.0, 0.0], [10.0, 0.0]]
        target = [[5.0, 5.0]]
        lo = conditional_simulate(
            MODEL, ConditioningSet(sites=cond_sites, values=[0.0, 0.2]), target,
            10_000, seed=8,
        )
        hi = conditional_simulate(
            MODEL, ConditioningSet(sites=cond_sites, values=[2.0, 2.2]), target,
            10_000, seed=8,
        )
        assert np.median(hi) > np.median(lo)

    def test_total_probability_recovers_marginal(self):
        # average the conditional law over unconditional conditioning draws
        cond_site = np.array([[0.0, 0.0]])
        target = np.array([[25.0, 15.0]])
        locs = np.vstack([cond_site])
        z_cond = simulate_brown_resnick_panel(locs, MODEL, 4000, seed=9)[:, 1, 0]
        sampler = ConditionalSampler(MODEL, cond_site, target)
        children = np.random.SeedSequence(10).spawn(z_cond.size)
        pooled = np.array(
            [sampler.sample([zc], 1, child)[0, 0] for zc, child in zip(z_cond, children)]
        )
        _, p = ks_test_gumbel(pooled)
        assert p >= 0.01


class TestSamplerMechanics:
    def test_deterministic(self):
        cond = ConditioningSet(sites=[[0.0, 0.0], [15.0, 5.0]], values=[0.5, -0.2])
        a = conditional_simulate(MODEL, cond, [[10.0, 10.0]], 64, seed=11)
        b = conditional_simulate(MODEL, cond, [[10.0, 10.0]], 64, seed=11)
        assert np.array_equal(a, b)

    def test_first_draw_stable_across_batch_sizes(self):
        cond = ConditioningSet(sites=[[0.0, 0.0]], values=[0.5])
        one = conditional_simulate(MODEL, cond, [[10.0, 10.0]], 1, seed=12)
        many = conditional_simulate(MODEL, cond, [[10.0, 10.0]], 100, seed=12)
        assert one[0, 0] == many[0, 0]

    def test_gibbs_matches_exact_enumeration(self):
        cond = ConditioningSet(
            sites=[[0.0, 0.0], [12.0, 4.0], [-8.0, 10.0]], values=[0.4, 0.9, -0.3]
        )
        target = [[6.0, 6.0]]
        exact = conditional_simulate(MODEL, cond, target, 4000, seed=13)
        gibbs = conditional_simulate(
            MODEL, cond, target, 4000, seed=14, exact_partition_limit=0, gibbs_sweeps=60
        )
        for x in (-1.0, 0.0, 1.0, 2.0):
            diff = abs(np.mean(exact[:, 0] <= x) - np.mean(gibbs[:, 0] <= x))
            assert diff <= 0.04

    def test_partition_table_is_probability_distribution(self):
        sampler = ConditionalSampler(
            MODEL, [[0.0, 0.0], [12.0, 4.0], [-8.0, 10.0]], [[6.0, 6.0]]
        )
        parts, probs = sampler.partition_table(np.array([0.4, 0.9, -0.3]))
        assert len(parts) == 5  # Bell number of 3
        assert probs.sum() == pytest.approx(1.0, abs=1e-12)
        assert np.all(probs >= 0)

    def test_budget_exhaustion_raises(self):
        cond = ConditioningSet(sites=[[0.0, 0.0]], values=[0.5])
        with pytest.raises(SamplerError):
            conditional_simulate(MODEL, cond, [[1.0, 0.0]], 10, seed=15, rejection_budget=2)

    def test_empty_targets_rejected(self):
        cond = ConditioningSet(sites=[[0.0, 0.0]], values=[0.5])
        with pytest.raises(ValueError):
            conditional_simulate(MODEL, cond, np.zeros((0, 2)), 5, seed=16)
