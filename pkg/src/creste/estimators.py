"""scikit-learn style wrappers around the functional pipeline.

``X`` always holds the covariates only. The treatment and the instrument are
passed to ``fit`` by keyword, and the intercept is added internally.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_consistent_length, check_is_fitted

from .bootstrap import bootstrap_variance
from .data import ObservationFrame, stratify
from .exceptions import ConfigError, DataError
from .kernels import DEFAULT_GRID, complier_proportion
from .quantile import wqr
from .shortfall import EstimatorConfig, fit_weights, pseudo_response, two_stage_fit, weighted_normal_solve

__all__ = [
    "ComplianceWeighter",
    "CRESTE",
    "ExpectedShortfallRegressor",
    "WeightedQuantileRegressor",
    "check_binary",
    "discrete_mask",
    "make_frame",
]


def check_binary(a, name: str) -> np.ndarray:
    """1-d float array whose entries are all 0 or 1."""
    a = check_array(a, ensure_2d=False, dtype=float, input_name=name)
    if a.ndim != 1:
        raise DataError(f"{name} must be one-dimensional", column=name)
    bad = np.flatnonzero((a != 0) & (a != 1))
    if bad.size:
        raise DataError(f"non-binary {name} at row {bad[0] + 1}", row=int(bad[0]) + 1, column=name)
    return a


def discrete_mask(discrete_features, n_features: int) -> np.ndarray:
    """Boolean mask from ``None``, a boolean mask or a list of column indices."""
    mask = np.zeros(n_features, dtype=bool)
    if discrete_features is None:
        return mask
    df = np.asarray(discrete_features)
    if df.dtype == bool:
        if df.shape != (n_features,):
            raise ConfigError(f"discrete_features mask has length {df.size}, X has {n_features} columns")
        return df.copy()
    idx = df.astype(int).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= n_features):
        raise ConfigError(f"discrete_features index out of range for {n_features} columns")
    mask[idx] = True
    return mask


def make_frame(X, y, treatment, instrument, discrete_features=None, feature_names=None) -> ObservationFrame:
    """Validate sklearn-style inputs and pack them into an ObservationFrame."""
    n = len(y)
    if X is None:
        X = np.zeros((n, 0))
    X = check_array(X, dtype=float, ensure_min_features=0, input_name="X")
    y = check_array(y, ensure_2d=False, dtype=float, input_name="y")
    d = check_binary(treatment, "treatment")
    v = check_binary(instrument, "instrument")
    check_consistent_length(X, y, d, v)
    mask = discrete_mask(discrete_features, X.shape[1])
    names = feature_names if feature_names is not None else [f"x{j + 1}" for j in range(X.shape[1])]
    names = [str(s) for s in names]
    return ObservationFrame(
        y, d, v, x_cont=X[:, ~mask], x_disc=X[:, mask],
        cont_names=tuple(s for s, m in zip(names, mask) if not m),
        disc_names=tuple(s for s, m in zip(names, mask) if m),
    )


def _design(X) -> np.ndarray:
    X = check_array(X, dtype=float, ensure_min_features=0, input_name="X")
    return np.column_stack([np.ones(X.shape[0]), X])


class WeightedQuantileRegressor(RegressorMixin, BaseEstimator):
    """Linear conditional ``alpha``-quantile fitted by exact simplex.

    Unlike :class:`sklearn.linear_model.QuantileRegressor` there is no
    penalty, ``alpha`` is the quantile level, and the fit carries an
    optimality certificate (``optimality_gap_``).
    """

    def __init__(self, alpha=0.5):
        self.alpha = alpha

    def fit(self, X, y, sample_weight=None):
        Z = _design(X)
        y = check_array(y, ensure_2d=False, dtype=float, input_name="y")
        check_consistent_length(Z, y)
        if sample_weight is not None:
            sample_weight = check_array(sample_weight, ensure_2d=False, dtype=float, input_name="sample_weight")
            check_consistent_length(y, sample_weight)
        fit = wqr(Z, y, sample_weight, self.alpha)
        self.intercept_ = float(fit.beta_hat[0])
        self.coef_ = fit.beta_hat[1:].copy()
        self.n_features_in_ = Z.shape[1] - 1
        self.optimality_gap_ = fit.optimality_gap
        self.n_iter_ = fit.pivots
        self.fit_ = fit
        return self

    def predict(self, X):
        check_is_fitted(self)
        X = check_array(X, dtype=float, ensure_min_features=0)
        return self.intercept_ + X @ self.coef_


class ExpectedShortfallRegressor(RegressorMixin, BaseEstimator):
    """Linear conditional expected shortfall by the two-step orthogonal fit.

    First a quantile regression at ``alpha``, then least squares of the
    pseudo-response on the same regressors, both with ``sample_weight``.
    """

    def __init__(self, alpha=0.5, tail="lower"):
        self.alpha = alpha
        self.tail = tail

    def fit(self, X, y, sample_weight=None):
        Z = _design(X)
        y = check_array(y, ensure_2d=False, dtype=float, input_name="y")
        check_consistent_length(Z, y)
        w = np.ones(len(y)) if sample_weight is None else check_array(
            sample_weight, ensure_2d=False, dtype=float, input_name="sample_weight")
        check_consistent_length(y, w)
        self.quantile_ = WeightedQuantileRegressor(self.alpha).fit(X, y, w)
        s = pseudo_response(y, self.quantile_.fit_.fitted_q, self.alpha, self.tail)
        g, res, _ = weighted_normal_solve(Z, s, w)
        self.intercept_ = float(g[0])
        self.coef_ = g[1:]
        self.n_features_in_ = Z.shape[1] - 1
        self.score_residual_ = res
        return self

    def predict(self, X):
        check_is_fitted(self)
        X = check_array(X, dtype=float, ensure_min_features=0)
        return self.intercept_ + X @ self.coef_


class _PipelineParams:
    def _config(self) -> EstimatorConfig:
        alpha = getattr(self, "alpha", 0.5)
        alphas = (alpha,) if np.isscalar(alpha) else tuple(alpha)
        return EstimatorConfig(
            alphas=alphas, tail=getattr(self, "tail", "lower"), weight_mode=getattr(self, "weight_mode", "proposed"),
            kernel_order_pi=self.kernel_order_pi, kernel_order_v=self.kernel_order_v,
            grid=tuple(self.grid), sigma1=self.sigma1, sigma2=self.sigma2, cv_folds=self.cv_folds,
            cv_seed=self.cv_seed, standardize=self.standardize, pi_clip=self.pi_clip,
        )


class ComplianceWeighter(_PipelineParams, BaseEstimator):
    """Estimated complier weights ``kappa_tilde`` for an IV sample.

    ``fit`` stores the weights in ``kappa_``; ``fit_transform`` returns them.
    Columns flagged by ``discrete_features`` are stratified on, the rest are
    smoothed with a product kernel.
    """

    def __init__(self, discrete_features=None, kernel_order_pi=2, kernel_order_v=2, grid=DEFAULT_GRID,
                 sigma1=None, sigma2=None, cv_folds=5, cv_seed=0, standardize=False, pi_clip=0.01):
        self.discrete_features = discrete_features
        self.kernel_order_pi = kernel_order_pi
        self.kernel_order_v = kernel_order_v
        self.grid = grid
        self.sigma1 = sigma1
        self.sigma2 = sigma2
        self.cv_folds = cv_folds
        self.cv_seed = cv_seed
        self.standardize = standardize
        self.pi_clip = pi_clip

    def fit(self, X, y, *, treatment, instrument):
        frame = make_frame(X, y, treatment, instrument, self.discrete_features)
        w = fit_weights(frame, self._config())
        self.weights_ = w
        self.kappa_ = np.asarray(w.kappa_tilde)
        self.sigma1_, self.sigma2_ = w.sigma1, w.sigma2
        self.n_cells_ = len(stratify(frame))
        self.n_features_in_ = frame.p_cont + frame.p_disc
        return self

    def fit_transform(self, X, y, *, treatment, instrument):
        return self.fit(X, y, treatment=treatment, instrument=instrument).kappa_


class CRESTE(_PipelineParams, BaseEstimator):
    """Complier expected-shortfall treatment effect with a binary instrument.

    Parameters
    ----------
    alpha : float or sequence of float
        Tail level(s). Fitted attributes are arrays with one entry per level.
    weight_mode : {"proposed", "naive", "oracle"}
        ``oracle`` needs ``complier=`` at fit time.
    n_bootstrap : int
        Bootstrap replicates for standard errors; 0 skips the bootstrap.

    Attributes
    ----------
    shortfall_effect_, quantile_effect_ : ndarray of shape (n_alphas,)
        Treatment coefficients of the shortfall and quantile fits.
    coef_shortfall_, coef_quantile_ : ndarray of shape (n_alphas, p)
        Full coefficient vectors in the order ``(treatment, intercept, X...)``
        with continuous columns before discrete ones.
    se_shortfall_, se_quantile_ : ndarray of shape (n_alphas,)
        Bootstrap standard errors, present when ``n_bootstrap > 0``.
    """

    def __init__(self, alpha=0.3, tail="lower", weight_mode="proposed", discrete_features=None,
                 kernel_order_pi=2, kernel_order_v=2, grid=DEFAULT_GRID, sigma1=None, sigma2=None,
                 cv_folds=5, cv_seed=0, standardize=False, pi_clip=0.01,
                 n_bootstrap=0, level=0.95, ci_method="normal", random_state=0, n_jobs=1):
        self.alpha = alpha
        self.tail = tail
        self.weight_mode = weight_mode
        self.discrete_features = discrete_features
        self.kernel_order_pi = kernel_order_pi
        self.kernel_order_v = kernel_order_v
        self.grid = grid
        self.sigma1 = sigma1
        self.sigma2 = sigma2
        self.cv_folds = cv_folds
        self.cv_seed = cv_seed
        self.standardize = standardize
        self.pi_clip = pi_clip
        self.n_bootstrap = n_bootstrap
        self.level = level
        self.ci_method = ci_method
        self.random_state = random_state
        self.n_jobs = n_jobs

    def fit(self, X, y, *, treatment, instrument, complier=None):
        frame = make_frame(X, y, treatment, instrument, self.discrete_features)
        config = self._config()
        if complier is not None:
            complier = check_binary(complier, "complier")
            check_consistent_length(frame.y, complier)
        ests = two_stage_fit(frame, config, complier)
        self.estimates_ = ests
        self.design_names_ = frame.design_names
        self._disc_mask = discrete_mask(self.discrete_features, frame.p_cont + frame.p_disc)
        self.alphas_ = np.array([e.alpha for e in ests])
        self.quantile_effect_ = np.array([e.beta1 for e in ests])
        self.shortfall_effect_ = np.array([e.gamma1 for e in ests])
        self.coef_quantile_ = np.vstack([e.beta_full for e in ests])
        self.coef_shortfall_ = np.vstack([e.gamma_full for e in ests])
        self.weights_meta_ = ests[0].weights_meta
        self.n_features_in_ = frame.p_cont + frame.p_disc
        try:
            self.complier_share_ = complier_proportion(frame)
        except ArithmeticError:
            self.complier_share_ = float("nan")
        if self.n_bootstrap:
            seed = 0 if self.random_state is None else int(self.random_state)
            boots = bootstrap_variance(frame, config, int(self.n_bootstrap), seed, complier, ests,
                                       self.level, self.ci_method, n_jobs=self.n_jobs)
            self.bootstrap_ = boots
            self.se_quantile_ = np.array([b.se[b.coordinate("beta")] for b in boots])
            self.se_shortfall_ = np.array([b.se[b.coordinate("gamma")] for b in boots])
            self.ci_quantile_ = np.vstack([b.ci[b.coordinate("beta")] for b in boots])
            self.ci_shortfall_ = np.vstack([b.ci[b.coordinate("gamma")] for b in boots])
        return self

    def _rows(self, X, treatment):
        X = check_array(X, dtype=float, ensure_min_features=0)
        d = check_binary(treatment, "treatment")
        check_consistent_length(X, d)
        if X.shape[1] != self.n_features_in_:
            raise DataError(f"X has {X.shape[1]} columns, fitted with {self.n_features_in_}")
        m = self._disc_mask
        return np.column_stack([d, np.ones(len(d)), X[:, ~m], X[:, m]])

    def predict(self, X, treatment):
        """Complier conditional shortfall at each level, shape ``(n, n_alphas)``."""
        check_is_fitted(self)
        return self._rows(X, treatment) @ self.coef_shortfall_.T

    def predict_quantile(self, X, treatment):
        check_is_fitted(self)
        return self._rows(X, treatment) @ self.coef_quantile_.T
