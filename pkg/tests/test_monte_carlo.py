"""Monte-Carlo checks of the estimator; run with `pytest -m slow`."""

import numpy as np
import pytest
from scipy import stats

from conftest import balanced_config
from estimators.hlm_estimator import Level1Term, ModelSpec, fit, gls_fixed_effects, VarianceComponents
from simulators.simulator import PredictorGenerator, anova_oracle, load_preset, simulate

pytestmark = pytest.mark.slow


def within_mc_error(values, truth, k=3.0):
    values = np.asarray(values)
    mc_se = values.std(ddof=1) / np.sqrt(len(values))
    return abs(values.mean() - truth) <= k * mc_se


def test_reml_equals_anova_on_balanced_designs():
    for seed in range(100):
        ds = simulate(balanced_config(seed=seed, tau00=1.0))
        sigma2, tau00 = anova_oracle(ds, 'y')
        if tau00 <= 0:
            continue
        result = fit(ModelSpec('y'), ds)
        assert result.vc.sigma2 == pytest.approx(sigma2, rel=1e-6)
        assert result.vc.tau00 == pytest.approx(tau00, rel=1e-6)


def test_gls_at_zero_tau_is_ols():
    for seed in range(50):
        rng = np.random.default_rng(seed)
        x_blocks = [np.column_stack([np.ones(n), rng.normal(size=n), rng.normal(size=n)])
                    for n in rng.integers(3, 12, size=20)]
        y_blocks = [rng.normal(size=len(X)) for X in x_blocks]
        beta, _ = gls_fixed_effects(VarianceComponents([[0.0]], 2.0), x_blocks, y_blocks)
        ols, *_ = np.linalg.lstsq(np.vstack(x_blocks), np.concatenate(y_blocks), rcond=None)
        np.testing.assert_allclose(beta, ols, atol=1e-6)


def test_parameter_recovery_on_the_unconditional_preset(settings):
    reml, ml = {'g': [], 'tau': [], 'sigma2': []}, {'tau': []}
    for seed in range(200):
        ds = simulate(load_preset('paper-model0', settings, seed=seed))
        result = fit(ModelSpec('math'), ds)
        reml['g'].append(result.fixed[0].gamma_hat)
        reml['tau'].append(result.vc.tau00)
        reml['sigma2'].append(result.vc.sigma2)
        ml['tau'].append(fit(ModelSpec('math', method='ML'), ds).vc.tau00)

    assert within_mc_error(reml['g'], 609.14)
    assert within_mc_error(reml['tau'], 2238.6)
    assert within_mc_error(reml['sigma2'], 8195.39)
    # ML shrinks tau00 toward zero on every replicate
    assert np.mean(ml['tau']) < np.mean(reml['tau'])
    assert np.all(np.array(ml['tau']) <= np.array(reml['tau']) + 1e-6)
    # and REML lands closer to the true tau00
    assert abs(np.mean(reml['tau']) - 2238.6) < abs(np.mean(ml['tau']) - 2238.6)


def test_intercept_test_is_calibrated_under_the_null():
    p_values = []
    for seed in range(500):
        ds = simulate(balanced_config(J=100, n=10, tau00=0.0, sigma2=1.0, seed=seed))
        p_values.append(fit(ModelSpec('y'), ds).vc_test('intercept').p)
    assert stats.kstest(p_values, 'uniform').pvalue > 0.01


def _slope_p_values(slope_variance, reps=200):
    spec = ModelSpec('y', level1_terms=(Level1Term('x', random_slope=True),))
    p_values = []
    for seed in range(reps):
        cfg = balanced_config(J=50, n=20, sigma2=1.0, seed=seed,
                              gamma={'intercept': 10.0, 'x': 2.0},
                              predictors=(PredictorGenerator('x'),), random_slopes=('x',),
                              tau=[[4.0, 0.0], [0.0, slope_variance]])
        p_values.append(fit(spec, simulate(cfg)).vc_test('x').p)
    return np.array(p_values)


def test_slope_test_rarely_rejects_without_slope_variance():
    assert np.mean(_slope_p_values(0.0) > 0.05) >= 0.90


def test_slope_test_detects_large_slope_variance():
    assert np.mean(_slope_p_values(25.0) < 0.01) >= 0.95
