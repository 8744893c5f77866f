import numpy as np
import pytest
from scipy import stats

from conftest import make_dataset
from estimators.diagnostics import (build_report, correlations, descriptives, design_effect,
                                    effective_sample_size, icc, interpret_icc,
                                    proportion_reduction, variance_explained)
from estimators.hlm_estimator import Level1Term, ModelSpec, fit
from reports.report_writer import diagnostics_text

TAU00, SIGMA2 = 2238.6, 8195.38


def test_icc_published_components():
    assert icc(TAU00, SIGMA2) == pytest.approx(0.2146, abs=1e-4)
    assert round(icc(TAU00, SIGMA2), 3) == 0.215


def test_icc_limits():
    assert icc(0.0, 5.0) == 0.0
    assert icc(5.0, 0.0) == 1.0
    with pytest.raises(ValueError):
        icc(0.0, 0.0)
    with pytest.raises(ValueError):
        icc(-1.0, 2.0)


def test_design_effect_and_effective_sample_size():
    deff = design_effect(32.89, 0.215)
    assert 7.85 <= deff <= 7.86
    ess = effective_sample_size(4605, 7.86)
    assert 585.8 <= ess.value <= 586.0
    assert ess.rounded == 586
    assert effective_sample_size(4605, 7.856).value == pytest.approx(586.2, abs=0.05)


def test_design_effect_limits():
    assert design_effect(30, 0.0) == 1.0
    assert design_effect(30, 1.0) == 30
    assert design_effect(1, 0.4) == 1.0
    with pytest.raises(ValueError):
        design_effect(0.5, 0.2)
    with pytest.raises(ValueError):
        design_effect(10, 1.5)
    with pytest.raises(ValueError):
        effective_sample_size(100, 0.9)


def test_icc_bands():
    assert interpret_icc(0.01) == 'negligible'
    assert interpret_icc(0.07) == 'small'
    assert interpret_icc(0.215) == 'moderate'
    assert interpret_icc(0.4) == 'large'
    assert interpret_icc(0.07, {'low': 0.5}) == 'low'


def test_variance_explained_sample():
    explained = proportion_reduction(2238.6, 8195.39, 0.552 * 2238.6, 0.95 * 8195.39)
    assert explained.r2_level1 == pytest.approx(0.05)
    assert explained.r2_level2 == pytest.approx(0.448)
    assert 0.134 <= explained.r2_total <= 0.137
    assert not any(explained.negative.values())


def test_negative_variance_explained_flagged():
    explained = proportion_reduction(10.0, 20.0, 12.0, 17.0)
    assert explained.r2_level2 == pytest.approx(-0.2)
    assert explained.negative == {'r2_level1': False, 'r2_level2': True, 'r2_total': False}


def test_proportion_reduction_needs_positive_null():
    with pytest.raises(ValueError):
        proportion_reduction(0.0, 10.0, 0.0, 9.0)


def test_descriptives():
    ds = make_dataset({'school': ['a', 'a', 'b'], 'x': [1.0, 2.0, 3.0], 'y': [np.nan] * 3})
    table = descriptives(ds, ['x', 'y'])
    assert table.loc['x', 'n'] == 3
    assert table.loc['x', 'mean'] == 2.0
    assert table.loc['x', 'sd'] == pytest.approx(1.0)
    assert (table.loc['x', 'min'], table.loc['x', 'max']) == (1.0, 3.0)
    assert table.loc['y', 'n'] == 0
    assert np.isnan(table.loc['y', 'mean'])
    with pytest.raises(ValueError):
        descriptives(ds, [])


def test_correlations_direct_formula():
    x = np.array([1.0, 2.0, 4.0, 3.0, 7.0])
    y = np.array([2.0, 1.0, 5.0, 4.0, 8.0])
    ds = make_dataset({'school': ['a'] * 5, 'x': x, 'y': y, 'x_copy': x, 'neg': -x})
    table = correlations(ds, ['x', 'y', 'x_copy', 'neg'])

    dx, dy = x - x.mean(), y - y.mean()
    expected = (dx @ dy) / np.sqrt((dx @ dx) * (dy @ dy))
    assert table.r.loc['x', 'y'] == pytest.approx(expected, abs=1e-12)
    assert table.r.loc['y', 'x'] == table.r.loc['x', 'y']
    assert table.r.loc['x', 'x_copy'] == pytest.approx(1.0)
    assert table.r.loc['x', 'neg'] == pytest.approx(-1.0)
    assert table.p.loc['x', 'y'] == pytest.approx(stats.pearsonr(x, y)[1], abs=1e-9)
    assert table.n.loc['x', 'y'] == 5


def test_correlations_pairwise_complete_and_constant():
    ds = make_dataset({'school': ['a'] * 4, 'x': [1.0, 2.0, np.nan, 4.0],
                       'y': [2.0, 1.0, 3.0, 5.0], 'c': [1.0] * 4})
    table = correlations(ds, ['x', 'y', 'c'])
    assert table.n.loc['x', 'y'] == 3
    assert np.isnan(table.r.loc['x', 'c'])
    with pytest.raises(ValueError):
        correlations(ds, ['x'])


def test_correlation_text_diagonal_follows_r():
    ds = make_dataset({'school': ['a'] * 4, 'x': [1.0, 2.0, 3.0, 4.0], 'c': [1.0] * 4})
    lines = diagnostics_text(build_report(ds=ds, variables=['x', 'c']))
    start = next(i for i, line in enumerate(lines) if line.startswith('CORRELATIONS'))
    rows = {line.split()[0]: line.split() for line in lines[start + 3:start + 5]}
    assert rows['x'][1] == '1.00'
    assert rows['c'][-1] == 'NA'


def test_report_from_explicit_components():
    report = build_report(tau00=TAU00, sigma2=SIGMA2, n_bar=32.89, n_total=4605)
    assert report.icc == pytest.approx(0.21455, abs=1e-5)
    assert report.design_effect == pytest.approx(7.842, abs=1e-3)
    assert report.effective_sample_size == pytest.approx(587.2, abs=0.05)
    # hand-calculation chain from the rounded ICC
    assert round(report.design_effect_stepwise, 2) == 7.86
    assert round(report.effective_sample_size_stepwise, 1) == 585.9
    assert report.icc_band == 'moderate'


def test_report_from_fits(predictor_data):
    null = fit(ModelSpec('y'), predictor_data)
    model = fit(ModelSpec('y', level1_terms=(Level1Term('x'),)), predictor_data)
    report = build_report(ds=predictor_data, variables=['y', 'x'], null_fit=null, model_fit=model)
    assert report.icc == pytest.approx(null.vc.tau00 / (null.vc.tau00 + null.vc.sigma2))
    assert report.n_bar == 15.0
    assert report.N == 600 and report.J == 40
    assert report.r2_level1 > 0
    assert report.r2_total == pytest.approx(variance_explained(null, model).r2_total)
    assert list(report.descriptives.index) == ['y', 'x']
    assert report.correlations.r.shape == (2, 2)


def test_variance_explained_needs_same_rows(predictor_data, balanced_data):
    with pytest.raises(ValueError):
        variance_explained(fit(ModelSpec('y'), predictor_data), fit(ModelSpec('y'), balanced_data))
