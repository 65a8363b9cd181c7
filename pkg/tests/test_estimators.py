import numpy as np
import pytest
from sklearn.base import clone
from sklearn.linear_model import QuantileRegressor

from creste import (
    CRESTE,
    ComplianceWeighter,
    ConfigError,
    DataError,
    EstimatorConfig,
    ExpectedShortfallRegressor,
    WeightedQuantileRegressor,
    two_stage_fit,
)
from creste.estimators import discrete_mask, make_frame
from creste.quantile import pinball


@pytest.fixture(scope="module")
def xy(request):
    from creste import DgpSpec, simulate_sample
    s = simulate_sample(DgpSpec(n=400, seed=31))
    X = np.column_stack([s.frame.x_cont[:, 0], s.frame.x_disc[:, 0]])
    return X, s.frame.y, s.frame.d, s.frame.v, s.complier, s.frame


def test_quantile_regressor_matches_sklearn_objective():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(150, 2))
    y = X @ [1.0, -0.5] + rng.standard_t(4, 150)
    ours = WeightedQuantileRegressor(alpha=0.3).fit(X, y)
    ref = QuantileRegressor(quantile=0.3, alpha=0.0, solver="highs").fit(X, y)
    obj = lambda m: pinball(y - m.predict(X), 0.3).sum()  # noqa: E731
    assert obj(ours) == pytest.approx(obj(ref), rel=1e-9)
    assert ours.optimality_gap_ < 1e-8


def test_sample_weight_equals_row_duplication():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(40, 1))
    y = 2 * X[:, 0] + rng.normal(size=40)
    w = np.ones(40)
    w[:10] = 2.0
    a = WeightedQuantileRegressor(0.4).fit(X, y, sample_weight=w)
    b = WeightedQuantileRegressor(0.4).fit(np.vstack([X, X[:10]]), np.r_[y, y[:10]])
    np.testing.assert_allclose(a.coef_, b.coef_, atol=1e-12)


def test_shortfall_regressor_intercept_only():
    y = np.arange(1.0, 6.0)
    m = ExpectedShortfallRegressor(alpha=0.4).fit(np.zeros((5, 0)), y)
    assert m.intercept_ == pytest.approx(1.5)
    assert m.predict(np.zeros((2, 0))).tolist() == pytest.approx([1.5, 1.5])


def test_params_and_clone():
    est = CRESTE(alpha=(0.25, 0.5), n_bootstrap=3)
    params = est.get_params()
    assert params["alpha"] == (0.25, 0.5) and params["n_bootstrap"] == 3
    c = clone(est).set_params(weight_mode="naive")
    assert c.weight_mode == "naive" and est.weight_mode == "proposed"
    assert ComplianceWeighter().get_params()["grid"] == EstimatorConfig().grid


def test_creste_matches_functional_pipeline(xy):
    X, y, d, v, _, frame = xy
    est = CRESTE(alpha=(0.3, 0.5), discrete_features=[1]).fit(X, y, treatment=d, instrument=v)
    ref = two_stage_fit(frame, EstimatorConfig(alphas=(0.3, 0.5)))
    np.testing.assert_array_equal(est.shortfall_effect_, [e.gamma1 for e in ref])
    np.testing.assert_array_equal(est.coef_quantile_[1], ref[1].beta_full)
    assert est.design_names_ == ("treatment", "intercept", "x1", "x2")
    pred = est.predict(X[:5], d[:5])
    assert pred.shape == (5, 2)
    np.testing.assert_allclose(pred[:, 0], frame.design()[:5] @ ref[0].gamma_full)
    assert est.predict_quantile(X[:5], d[:5]).shape == (5, 2)


def test_creste_bootstrap_and_oracle(xy):
    X, y, d, v, c, _ = xy
    est = CRESTE(alpha=0.3, weight_mode="oracle", discrete_features=[False, True], n_bootstrap=5,
                 random_state=2).fit(X, y, treatment=d, instrument=v, complier=c)
    assert est.se_shortfall_.shape == (1,) and est.se_shortfall_[0] > 0
    lo, hi = est.ci_shortfall_[0]
    assert lo < est.shortfall_effect_[0] < hi


def test_weighter_bounds(xy):
    X, y, d, v, _, frame = xy
    w = ComplianceWeighter(discrete_features=[1], sigma1=0.3, sigma2=0.4)
    kappa = w.fit_transform(X, y, treatment=d, instrument=v)
    n = len(y)
    assert kappa.min() >= 10 / n and kappa.max() <= 1 - 10 / n
    assert (w.sigma1_, w.sigma2_) == (0.3, 0.4) and w.n_cells_ == 2


def test_input_validation(xy):
    X, y, d, v, _, _ = xy
    bad = d.copy()
    bad[3] = 2
    with pytest.raises(DataError, match="non-binary treatment at row 4"):
        CRESTE().fit(X, y, treatment=bad, instrument=v)
    with pytest.raises(ValueError):
        CRESTE().fit(X[:10], y, treatment=d, instrument=v)
    with pytest.raises(ConfigError):
        discrete_mask([5], 2)
    est = CRESTE(weight_mode="naive").fit(X, y, treatment=d, instrument=v)
    with pytest.raises(DataError):
        est.predict(X[:, :1], d)


def test_unfitted_predict_raises():
    from sklearn.exceptions import NotFittedError
    with pytest.raises(NotFittedError):
        WeightedQuantileRegressor().predict(np.zeros((1, 1)))


def test_make_frame_splits_columns():
    X = np.array([[0.1, 1, 5.0], [0.2, 0, 6.0]])
    f = make_frame(X, [1.0, 2.0], [0, 1], [1, 0], discrete_features=[1], feature_names=["a", "b", "c"])
    assert f.cont_names == ("a", "c") and f.disc_names == ("b",)
