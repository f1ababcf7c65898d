import numpy as np
import pytest

from maxpost.margins import GevParams, ks_test_gumbel, to_gumbel
from maxpost.postproc import (
    EnsemblePanel,
    MaximaPanel,
    Normalization,
    ensemble_max_forecast,
    ensemble_normalization,
    forecast_to_gumbel,
    postprocess,
    standardize,
)
from maxpost.variogram import Anisotropy, CrossVariogram

IDENTITY_MODEL = CrossVariogram(
    sigma=1.0, kappa=0.02, aniso=Anisotropy(), beta=0.5, c=0.0,
    sigma1=1.0, nu1=1.2, sigma2=1.0, nu2=1.2, a=0.04, rho=1.0,
)


def panel_from_means(means):
    maxima = means.max(axis=3) + 1.0
    return EnsemblePanel(means=means, maxima=maxima)


class TestEnsembleNormalization:
    def test_hand_case(self):
        means = np.array([[[[2.0, 4.0], [1.0, 3.0]]]])  # one station, one period, J=2, H=2
        e = panel_from_means(means)
        norm = ensemble_normalization(e)
        assert norm.m[0, 0] == pytest.approx(3.0)
        # sum of squared deviations from 3 is 1+1+4+0 = 6; divisor J*H-1 = 3
        assert norm.s[0, 0] == pytest.approx(np.sqrt(2.0), rel=1e-12)

    def test_degenerate_ensemble_floored(self):
        means = np.full((1, 1, 3, 4), 5.0)
        norm = ensemble_normalization(panel_from_means(means), s_floor=1e-6)
        assert norm.m[0, 0] == 5.0
        assert norm.s[0, 0] == 1e-6

    def test_paper_divisor_for_full_ensemble(self):
        # 20 members x 10 hours uses the 1/199 divisor
        rng = np.random.default_rng(0)
        means = rng.gamma(4.0, 2.0, size=(2, 3, 20, 10))
        e = panel_from_means(means)
        norm = ensemble_normalization(e)
        member_means = means.mean(axis=3)
        m = member_means.max(axis=2)
        expected = np.sqrt(((means - m[:, :, None, None]) ** 2).sum(axis=(2, 3)) / 199.0)
        assert np.allclose(norm.s, expected, rtol=1e-12)

    def test_normalizers_affine_equivariant(self):
        rng = np.random.default_rng(1)
        means = rng.gamma(4.0, 2.0, size=(2, 2, 6, 5))
        norm = ensemble_normalization(panel_from_means(means))
        a, b = 2.5, 3.0
        norm2 = ensemble_normalization(panel_from_means(a * means + b))
        assert np.allclose(norm2.m, a * norm.m + b, rtol=1e-12)
        assert np.allclose(norm2.s, a * norm.s, rtol=1e-12)


class TestEnsembleMaxForecast:
    def test_hand_case(self):
        means = np.ones((1, 1, 3, 2))
        maxima = np.array([[[10.0, 12.0, 11.0]]])
        e = EnsemblePanel(means=means, maxima=maxima)
        assert ensemble_max_forecast(e)[0, 0] == 12.0

    def test_dominates_members(self):
        rng = np.random.default_rng(2)
        means = rng.gamma(4.0, 2.0, size=(3, 4, 5, 2))
        maxima = rng.gamma(6.0, 2.0, size=(3, 4, 5))
        e = EnsemblePanel(means=means, maxima=maxima)
        vmax = ensemble_max_forecast(e)
        assert np.all(vmax[:, :, None] >= maxima)


class TestStandardize:
    def test_zero_at_location(self):
        norm = Normalization(m=np.full((1, 1), 4.0), s=np.full((1, 1), 2.0))
        assert standardize(np.full((1, 1), 4.0), norm)[0, 0] == 0.0

    def test_hand_case(self):
        norm = Normalization(m=np.full((1, 1), 4.0), s=np.full((1, 1), 2.0))
        assert standardize(np.full((1, 1), 10.0), norm)[0, 0] == pytest.approx(3.0)

    def test_affine_invariance(self):
        rng = np.random.default_rng(3)
        v = rng.gamma(5.0, 2.0, size=(3, 4))
        m = rng.gamma(5.0, 1.0, size=(3, 4))
        s = 0.5 + rng.random((3, 4))
        a, b = 1.7, 2.2
        y1 = standardize(v, Normalization(m=m, s=s))
        y2 = standardize(a * v + b, Normalization(m=a * m + b, s=a * s))
        assert np.allclose(y1, y2, rtol=1e-12)

    def test_missing_propagates(self):
        norm = Normalization(m=np.zeros((1, 2)), s=np.ones((1, 2)))
        mask = np.array([[False, True]])
        y = standardize(np.array([[1.0, 2.0]]), norm, mask)
        assert y[0, 0] == 1.0
        assert np.isnan(y[0, 1])

    def test_shape_mismatch_rejected(self):
        norm = Normalization(m=np.zeros((1, 2)), s=np.ones((1, 2)))
        with pytest.raises(ValueError):
            standardize(np.zeros((2, 2)), norm)


class TestForecastToGumbel:
    def test_support_violation_clamped_and_counted(self):
        params = [GevParams(0.3, 2.0, 0.5)]
        # forecast far below the support lower endpoint
        x, clamped = forecast_to_gumbel(
            np.array([0.0]), np.array([10.0]), np.array([1.0]), params
        )
        assert clamped == [0]
        # clamp lands on the 1e-6 quantile of the standard Gumbel
        assert x[0] == pytest.approx(-np.log(-np.log(1e-6)))

    def test_in_support_matches_to_gumbel(self):
        params = [GevParams(0.1, 1.5, 0.6)]
        x, clamped = forecast_to_gumbel(
            np.array([12.0]), np.array([8.0]), np.array([2.0]), params
        )
        assert clamped == []
        assert x[0] == pytest.approx(to_gumbel(12.0, 8.0, 2.0, params[0]))


class TestPostprocess:
    def test_identity_pipeline(self):
        # complete dependence and identical margins: output equals the forecast
        site = np.array([[5.0, 5.0]])
        params = [GevParams(0.05, 1.5, 0.5)]
        m, s = np.array([8.0]), np.array([1.5])
        forecast = np.array([11.3])
        res = postprocess(
            forecast=forecast,
            cond_sites=site,
            cond_norm=(m, s),
            pred_params=params,
            target_sites=site,
            target_norm=(m, s),
            obs_params=params,
            model=IDENTITY_MODEL,
            n_draws=25,
            seed=1,
        )
        assert res.n_clamped == 0
        assert np.max(np.abs(res.fields - forecast[0])) < 1e-5

    def test_first_draw_stable_in_batch_size(self):
        site = np.array([[0.0, 0.0]])
        target = np.array([[12.0, 8.0]])
        params = [GevParams(0.05, 1.5, 0.5)]
        m, s = np.array([8.0]), np.array([1.5])
        model = CrossVariogram(
            sigma=1.0, kappa=0.02, aniso=Anisotropy(), beta=0.5, c=0.3,
            sigma1=0.8, nu1=1.0, sigma2=0.9, nu2=1.3, a=0.05, rho=0.5,
        )
        kwargs = dict(
            forecast=np.array([10.0]),
            cond_sites=site,
            cond_norm=(m, s),
            pred_params=params,
            target_sites=target,
            target_norm=(m, s),
            obs_params=params,
            model=model,
            seed=7,
        )
        one = postprocess(n_draws=1, **kwargs)
        many = postprocess(n_draws=64, **kwargs)
        assert one.fields[0, 0] == many.fields[0, 0]

    def test_misaligned_inputs_rejected(self):
        site = np.array([[0.0, 0.0]])
        params = [GevParams(0.05, 1.5, 0.5)]
        with pytest.raises(ValueError):
            postprocess(
                forecast=np.array([10.0, 11.0]),
                cond_sites=site,
                cond_norm=(np.array([8.0]), np.array([1.5])),
                pred_params=params,
                target_sites=site,
                target_norm=(np.array([8.0]), np.array([1.5])),
                obs_params=params,
                model=IDENTITY_MODEL,
                n_draws=2,
                seed=0,
            )


class TestPanelPostprocessing:
    def test_backtransformed_fields_are_gumbel(self):
        # With the true model and margins, conditional draws pooled over
        # unconditionally generated forecasts are marginally standard Gumbel.
        # One draw per period keeps the pooled sample independent, which the
        # KS test requires (replicates within a period share conditioning).
        import sys

        sys.path.insert(0, "tests")
        from conftest import make_world
        from maxpost.pipeline import PipelineConfig, postprocess_panel

        world = make_world(n_stations=5, n_periods=360, seed=616, block_length=30)
        config = PipelineConfig(n_draws=1, n_cond_neighbors=2)
        fields, n_clamped = postprocess_panel(
            world.panel, world.ensembles, world.norm, world.obs_margins,
            world.pred_margins, world.model, config, seed=12,
        )
        assert n_clamped == 0
        shape = world.obs_margins.shape
        for i in range(world.panel.n_stations):
            params = GevParams(
                shape, float(world.obs_margins.loc[i]), float(world.obs_margins.scale[i])
            )
            pooled = to_gumbel(fields[0, i, :], world.norm.m[i], world.norm.s[i], params)
            _, p = ks_test_gumbel(pooled)
            assert p >= 0.01


class TestPanels:
    def test_ensemble_panel_validation(self):
        with pytest.raises(ValueError, match="at least 2 members"):
            EnsemblePanel(means=np.ones((1, 1, 1, 2)), maxima=np.ones((1, 1, 1)))
        with pytest.raises(ValueError, match="nonnegative"):
            EnsemblePanel(means=-np.ones((1, 1, 2, 2)), maxima=np.ones((1, 1, 2)))

    def test_maxima_panel_requires_distinct_coords(self):
        with pytest.raises(ValueError, match="distinct"):
            MaximaPanel(
                station_ids=("a", "b"),
                coords=np.zeros((2, 2)),
                periods=("1",),
                blocks=("b1",),
                v_obs=np.ones((2, 1)),
                v_pred=np.ones((2, 1)),
                mask=np.zeros((2, 1), dtype=bool),
            )
