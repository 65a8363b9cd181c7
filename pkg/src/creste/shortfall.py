"""Expected-shortfall stage and the full two-stage fit.

Given weights ``w`` and a fitted quantile ``q_i``, the orthogonalised score is
linear in the shortfall coefficients, so they solve a weighted least-squares
problem on the pseudo-response ``q_i + (y_i - q_i) 1{y_i <= q_i} / alpha``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.linalg

from .data import ObservationFrame, stratify
from .exceptions import ConfigError, RankDeficientError
from .kernels import (
    DEFAULT_GRID,
    ComplianceWeights,
    KernelSpec,
    cv_bandwidth,
    estimate_kappa,
)
from .quantile import QuantileFit, fit_wqr

WEIGHT_MODES = ("proposed", "naive", "oracle")
TAILS = ("lower", "upper")


def pseudo_response(y, q_hat, alpha: float, tail: str = "lower") -> np.ndarray:
    """Pseudo-response whose weighted projection gives the shortfall fit.

    Lower tail: ``q + (y - q) 1{y <= q} / alpha``.
    Upper tail: ``q + (y - q) 1{y > q} / (1 - alpha)``.
    """
    if not 0.0 < alpha < 1.0:
        raise ConfigError(f"alpha must lie in (0, 1), got {alpha}")
    y = np.asarray(y, dtype=float)
    q = np.asarray(q_hat, dtype=float)
    if tail == "lower":
        return q + (y - q) * (y <= q) / alpha
    if tail == "upper":
        return q + (y - q) * (y > q) / (1.0 - alpha)
    raise ConfigError(f"tail must be 'lower' or 'upper', got {tail!r}")


@dataclass(frozen=True, eq=False)
class ShortfallFit:
    alpha: float
    gamma_hat: np.ndarray
    pseudo_response: np.ndarray
    score_residual_norm: float
    score_scale: float
    tail: str = "lower"

    @property
    def certified(self) -> bool:
        return self.score_residual_norm <= 1e-8 * (1.0 + self.score_scale)


def weighted_normal_solve(Z, s, w, names=None):
    """Solve ``sum w_i z_i (s_i - z_i'g) = 0`` by pivoted QR of ``sqrt(w) Z``.

    Returns ``(g, residual_norm, scale)`` where ``scale = ||sum w_i z_i s_i||``.
    """
    keep = w > 0
    Zk, sk, wk = Z[keep], s[keep], w[keep]
    sw = np.sqrt(wk)
    A = Zk * sw[:, None]
    b = sk * sw
    p = Z.shape[1]
    Q, R, piv = scipy.linalg.qr(A, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    tol = max(A.shape) * np.finfo(float).eps * (diag[0] if diag.size else 0.0)
    rank = int(np.sum(diag > tol)) if diag.size else 0
    if rank < p:
        bad = int(piv[rank]) if rank < len(piv) else rank
        name = names[bad] if names is not None else f"column {bad}"
        raise RankDeficientError(f"weighted Gram matrix is singular: '{name}' is not identified", column=name)
    g = np.empty(p)
    g[piv] = scipy.linalg.solve_triangular(R, Q.T @ b)
    score = Zk.T @ (wk * (sk - Zk @ g))
    return g, float(np.linalg.norm(score)), float(np.linalg.norm(Zk.T @ (wk * sk)))


def fit_es(frame: ObservationFrame, weights, quantile_fit: QuantileFit, alpha=None, tail: str = "lower") -> ShortfallFit:
    """Step 3: solve the weighted estimating equation for the shortfall coefficients."""
    alpha = quantile_fit.alpha if alpha is None else alpha
    w = getattr(weights, "kappa_tilde", weights)
    w = np.ones(frame.n) if w is None else np.asarray(w, dtype=float)
    s = pseudo_response(frame.y, quantile_fit.fitted_q, alpha, tail)
    g, res, scale = weighted_normal_solve(frame.design(), s, w, frame.design_names)
    return ShortfallFit(alpha, g, s, res, scale, tail)


@dataclass(frozen=True)
class EstimatorConfig:
    """Everything the two-stage fit needs besides the data.

    ``sigma1``/``sigma2`` fix the bandwidths; left as ``None`` they are chosen
    by ``cv_folds``-fold cross-validation over ``grid``.
    """

    alphas: tuple = (0.3,)
    tail: str = "lower"
    weight_mode: str = "proposed"
    kernel_order_pi: int = 2
    kernel_order_v: int = 2
    grid: tuple = DEFAULT_GRID
    sigma1: float | None = None
    sigma2: float | None = None
    cv_folds: int = 5
    cv_seed: int = 0
    standardize: bool = False
    pi_clip: float = 0.01

    def __post_init__(self):
        alphas = (self.alphas,) if np.isscalar(self.alphas) else tuple(self.alphas)
        object.__setattr__(self, "alphas", tuple(float(a) for a in alphas))
        object.__setattr__(self, "grid", tuple(float(s) for s in self.grid))
        if not self.alphas or any(not 0.0 < a < 1.0 for a in self.alphas):
            raise ConfigError(f"every alpha must lie in (0, 1), got {self.alphas}")
        if self.tail not in TAILS:
            raise ConfigError(f"tail must be one of {TAILS}, got {self.tail!r}")
        if self.weight_mode not in WEIGHT_MODES:
            raise ConfigError(f"weight_mode must be one of {WEIGHT_MODES}, got {self.weight_mode!r}")
        for s in (self.sigma1, self.sigma2):
            if s is not None and s <= 0:
                raise ConfigError("fixed bandwidths must be positive")
        KernelSpec(self.kernel_order_pi)
        KernelSpec(self.kernel_order_v)

    def replace(self, **changes) -> "EstimatorConfig":
        return EstimatorConfig(**{**asdict(self), **changes})

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class CresteEstimate:
    alpha: float
    beta1: float
    gamma1: float
    beta_full: np.ndarray
    gamma_full: np.ndarray
    tail: str
    weight_mode: str
    quantile_fit: QuantileFit = field(repr=False)
    shortfall_fit: ShortfallFit = field(repr=False)
    weights_meta: dict = field(default_factory=dict)


def select_bandwidths(frame: ObservationFrame, config: EstimatorConfig, cells=None):
    """Cross-validated ``(sigma1, sigma2)`` unless the config pins them."""
    cells = stratify(frame) if cells is None else cells
    s1, s2 = config.sigma1, config.sigma2
    if s1 is None:
        s1 = cv_bandwidth(frame, cells, KernelSpec(config.kernel_order_pi), config.grid, "pi",
                          config.cv_folds, config.cv_seed, config.standardize).chosen
    if s2 is None:
        s2 = cv_bandwidth(frame, cells, KernelSpec(config.kernel_order_v), config.grid, "v",
                          config.cv_folds, config.cv_seed, config.standardize).chosen
    return s1, s2


def fit_weights(frame: ObservationFrame, config: EstimatorConfig, complier=None) -> ComplianceWeights:
    """Step 1 for the configured weight mode."""
    if config.weight_mode == "naive":
        return ComplianceWeights.unit(frame.n)
    if config.weight_mode == "oracle":
        if complier is None:
            raise ConfigError("oracle weights need the complier indicator")
        return ComplianceWeights.indicator(complier)
    cells = stratify(frame)
    s1, s2 = select_bandwidths(frame, config, cells)
    return estimate_kappa(
        frame, cells, s1, s2, KernelSpec(config.kernel_order_pi), KernelSpec(config.kernel_order_v),
        config.pi_clip, config.standardize,
    )


def weights_meta(weights: ComplianceWeights) -> dict:
    return {
        "mode": weights.mode,
        "sigma1": weights.sigma1,
        "sigma2": weights.sigma2,
        "truncated_count": weights.truncated_count,
        "pi_clamped_count": weights.pi_clamped_count,
        "fallback_count": weights.fallback_count,
        "c_l": weights.c_l,
        "c_u": weights.c_u,
    }


def fit_at_level(frame, weights: ComplianceWeights, alpha: float, tail: str = "lower", start=None) -> CresteEstimate:
    """Steps 2 and 3 at one level, reusing already-estimated weights."""
    qf = fit_wqr(frame, weights, alpha, start=start)
    sf = fit_es(frame, weights, qf, alpha, tail)
    return CresteEstimate(
        alpha=alpha, beta1=float(qf.beta_hat[0]), gamma1=float(sf.gamma_hat[0]),
        beta_full=qf.beta_hat, gamma_full=sf.gamma_hat, tail=tail,
        weight_mode=weights.mode, quantile_fit=qf, shortfall_fit=sf,
        weights_meta=weights_meta(weights),
    )


def two_stage_fit(frame: ObservationFrame, config: EstimatorConfig, complier=None) -> list[CresteEstimate]:
    """Steps 1-3 at every level in ``config.alphas`` (weights shared across levels)."""
    weights = fit_weights(frame, config, complier)
    return [fit_at_level(frame, weights, a, config.tail) for a in config.alphas]
