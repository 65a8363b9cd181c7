"""Nonparametric bootstrap for the two-stage coefficients.

Every replicate resamples rows with replacement and reruns the whole
pipeline, weights included. Replicate ``b`` draws from its own stream seeded
by ``(seed, b)``, so the output does not depend on evaluation order or on how
replicates are spread over workers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from joblib import Parallel, delayed
from scipy.stats import norm

from .data import ObservationFrame, stratify
from .exceptions import ConfigError, NumericalError
from .kernels import ComplianceWeights, KernelSpec, estimate_kappa
from .shortfall import CresteEstimate, EstimatorConfig, fit_at_level, fit_weights, two_stage_fit

UNRELIABLE_FAILURE_SHARE = 0.05


def replicate_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream for replicate ``index`` under root ``seed``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def resample_indices(n: int, rng: np.random.Generator) -> np.ndarray:
    if n < 1:
        raise ConfigError("cannot resample an empty frame")
    return rng.integers(0, n, size=n)


def resample(frame: ObservationFrame, rng: np.random.Generator) -> ObservationFrame:
    """``n`` rows drawn uniformly with replacement."""
    return frame.take(resample_indices(frame.n, rng))


def normal_interval(theta, se, level: float = 0.95) -> np.ndarray:
    """``theta -/+ z se`` with ``z`` the ``1 - (1 - level)/2`` normal quantile; shape ``(k, 2)``."""
    if not 0.0 < level < 1.0:
        raise ConfigError(f"confidence level must lie in (0, 1), got {level}")
    z = norm.ppf(1.0 - (1.0 - level) / 2.0)
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    se = np.atleast_1d(np.asarray(se, dtype=float))
    return np.column_stack([theta - z * se, theta + z * se])


@dataclass(frozen=True, eq=False)
class BootstrapResult:
    """Bootstrap draws of ``(beta, gamma)`` at one level.

    ``draws`` has one row per successful replicate, columns ``beta`` then
    ``gamma``. ``estimate`` is the full-sample fit in the same layout.
    """

    alpha: float
    B: int
    draws: np.ndarray
    estimate: np.ndarray
    se: np.ndarray
    names: tuple
    seed: int
    failed: int = 0
    failures: list = field(default_factory=list)
    level: float = 0.95
    ci_method: str = "normal"

    @property
    def n_ok(self) -> int:
        return self.draws.shape[0]

    @property
    def unreliable(self) -> bool:
        return self.failed > UNRELIABLE_FAILURE_SHARE * self.B

    @property
    def ci(self) -> np.ndarray:
        return confidence_interval(self, self.level, self.ci_method)

    @property
    def p(self) -> int:
        return self.estimate.shape[0] // 2

    def coordinate(self, which: str, j: int = 0) -> int:
        """Column of ``beta``/``gamma`` coordinate ``j`` in ``draws``."""
        return j if which == "beta" else self.p + j


def draw_se(draws: np.ndarray) -> np.ndarray:
    if draws.shape[0] < 2:
        return np.full(draws.shape[1], np.nan)
    return draws.std(axis=0, ddof=1)


def confidence_interval(result: BootstrapResult, level: float = 0.95, method: str = "normal") -> np.ndarray:
    """Per-coordinate intervals, shape ``(2p, 2)``.

    ``normal`` centres on the full-sample estimate; ``percentile`` takes the
    empirical quantiles of the draws.
    """
    if method == "normal":
        return normal_interval(result.estimate, result.se, level)
    if method == "percentile":
        if not 0.0 < level < 1.0:
            raise ConfigError(f"confidence level must lie in (0, 1), got {level}")
        a = (1.0 - level) / 2.0
        return np.quantile(result.draws, [a, 1.0 - a], axis=0).T
    raise ConfigError(f"unknown CI method {method!r}")


def _replicate(frame, config, b, seed, complier, bandwidths, starts):
    rng = replicate_rng(seed, b)
    idx = resample_indices(frame.n, rng)
    sub = frame.take(idx)
    try:
        if config.weight_mode == "naive":
            w = ComplianceWeights.unit(sub.n)
        elif config.weight_mode == "oracle":
            w = ComplianceWeights.indicator(np.asarray(complier)[idx])
        elif bandwidths is None:
            w = fit_weights(sub, config)
        else:
            w = estimate_kappa(
                sub, stratify(sub), bandwidths[0], bandwidths[1],
                KernelSpec(config.kernel_order_pi), KernelSpec(config.kernel_order_v),
                config.pi_clip, config.standardize,
            )
        rows = []
        for a, start in zip(config.alphas, starts):
            est = fit_at_level(sub, w, a, config.tail, start=start)
            rows.append(np.concatenate([est.beta_full, est.gamma_full]))
        return b, rows, None
    except (NumericalError, np.linalg.LinAlgError) as exc:
        return b, None, f"replicate {b}: {exc}"


def bootstrap_variance(
    frame: ObservationFrame,
    config: EstimatorConfig,
    B: int = 200,
    seed: int = 0,
    complier=None,
    estimates: list[CresteEstimate] | None = None,
    level: float = 0.95,
    ci_method: str = "normal",
    reselect_bandwidths: bool = False,
    n_jobs: int = 1,
) -> list[BootstrapResult]:
    """Bootstrap every level in ``config.alphas``; one result per level.

    Bandwidths are chosen once on the original sample and reused in every
    replicate unless ``reselect_bandwidths`` is set. Replicates whose design
    turns singular are skipped and counted in ``failed``.
    """
    if B < 2:
        raise ConfigError(f"need at least two bootstrap replicates, got B={B}")
    if estimates is None:
        estimates = two_stage_fit(frame, config, complier)
    bandwidths = None
    if config.weight_mode == "proposed" and not reselect_bandwidths:
        meta = estimates[0].weights_meta
        bandwidths = (meta["sigma1"], meta["sigma2"])
    starts = [e.beta_full for e in estimates]

    if n_jobs == 1:
        out = [_replicate(frame, config, b, seed, complier, bandwidths, starts) for b in range(B)]
    else:
        out = Parallel(n_jobs=n_jobs)(
            delayed(_replicate)(frame, config, b, seed, complier, bandwidths, starts) for b in range(B)
        )
    out.sort(key=lambda t: t[0])
    failures = [msg for _, rows, msg in out if rows is None]
    ok = [rows for _, rows, _ in out if rows is not None]
    names = tuple(f"beta[{c}]" for c in frame.design_names) + tuple(f"gamma[{c}]" for c in frame.design_names)
    results = []
    for k, est in enumerate(estimates):
        p2 = 2 * len(est.beta_full)
        draws = np.array([rows[k] for rows in ok]) if ok else np.zeros((0, p2))
        results.append(
            BootstrapResult(
                alpha=est.alpha, B=B, draws=draws,
                estimate=np.concatenate([est.beta_full, est.gamma_full]),
                se=draw_se(draws), names=names, seed=seed, failed=len(failures),
                failures=failures, level=level, ci_method=ci_method,
            )
        )
    return results
