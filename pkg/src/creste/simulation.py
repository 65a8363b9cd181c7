"""Monte-Carlo lab: data-generating processes and Table-style metrics.

Compliers have outcome ``log(tau) - 0.2 X1 - 0.3 X2 + 0.5 exp(0.3 tau) D`` with
``tau ~ U(0, 1)``; everyone else ``-0.1 X1 - 0.2 X2 + 0.2 D + N(0, 0.5^2)``.
The instrument is Bernoulli with logit ``0.1 X2 + X1^2 + X1 X2 + eps``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from joblib import Parallel, delayed

from .bootstrap import bootstrap_variance, normal_interval
from .data import ObservationFrame
from .exceptions import ConfigError, NumericalError
from .shortfall import EstimatorConfig, two_stage_fit

SCENARIOS = ("continuous_x", "discrete_x")
ESTIMATORS = ("oracle", "proposed", "naive")
TARGETS = ("beta1", "gamma1")

COMPLIER, ALWAYS_TAKER, NEVER_TAKER = 0, 1, 2


@dataclass(frozen=True)
class DgpSpec:
    n: int = 500
    scenario: str = "continuous_x"
    group_probs: tuple = (2 / 3, 1 / 6, 1 / 6)
    sigma_eps: float = 0.5
    sigma_nc: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise ConfigError(f"n must be positive, got {self.n}")
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"scenario must be one of {SCENARIOS}, got {self.scenario!r}")
        probs = tuple(float(p) for p in self.group_probs)
        if len(probs) != 3 or min(probs) < 0 or not math.isclose(sum(probs), 1.0, abs_tol=1e-12):
            raise ConfigError(f"group_probs must be three nonnegative numbers summing to 1, got {probs}")
        object.__setattr__(self, "group_probs", probs)


@dataclass(frozen=True, eq=False)
class SimulatedSample:
    frame: ObservationFrame
    complier: np.ndarray
    group: np.ndarray
    d1: np.ndarray
    d0: np.ndarray


def simulate_sample(spec: DgpSpec, rng: np.random.Generator | None = None) -> SimulatedSample:
    """Draw one sample together with its latent compliance labels."""
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    n = spec.n
    group = rng.choice(3, size=n, p=np.asarray(spec.group_probs))
    if spec.scenario == "continuous_x":
        x1 = rng.uniform(0.0, 1.0, n)
    else:
        x1 = rng.binomial(1, 0.5, n).astype(float)
    x2 = rng.binomial(1, 0.5, n).astype(float)
    eps = rng.normal(0.0, spec.sigma_eps, n)
    lin = 0.1 * x2 + x1**2 + x1 * x2 + eps
    v = (rng.uniform(size=n) < 1.0 / (1.0 + np.exp(-lin))).astype(float)
    d1 = np.where(group == NEVER_TAKER, 0.0, 1.0)
    d0 = np.where(group == ALWAYS_TAKER, 1.0, 0.0)
    d = np.where(v == 1, d1, d0)
    tau = rng.uniform(0.0, 1.0, n)
    e_nc = rng.normal(0.0, spec.sigma_nc, n)
    complier = group == COMPLIER
    with np.errstate(divide="ignore"):
        y_c = np.log(tau) - 0.2 * x1 - 0.3 * x2 + 0.5 * np.exp(0.3 * tau) * d
    y_nc = -0.1 * x1 - 0.2 * x2 + 0.2 * d + e_nc
    y = np.where(complier, y_c, y_nc)
    if spec.scenario == "continuous_x":
        frame = ObservationFrame(y, d, v, x_cont=x1, x_disc=x2, cont_names=("x1",), disc_names=("x2",))
    else:
        frame = ObservationFrame(y, d, v, x_disc=np.column_stack([x1, x2]), disc_names=("x1", "x2"))
    return SimulatedSample(frame, complier.astype(float), group, d1, d0)


def gen_dataset(spec: DgpSpec, rng: np.random.Generator | None = None):
    """``(frame, complier_indicator)`` for one simulated sample."""
    s = simulate_sample(spec, rng)
    return s.frame, s.complier


@dataclass(frozen=True)
class TruthRow:
    alpha: float
    beta1: float
    gamma1: float
    beta_full: tuple
    gamma_full: tuple


def true_effects(alpha: float) -> TruthRow:
    """True complier coefficients at level ``alpha``.

    The complier quantile of the outcome is ``log(a) - 0.2 X1 - 0.3 X2 +
    0.5 exp(0.3 a) D``; averaging over ``a in (0, alpha)`` gives the shortfall
    coefficients. Coefficient order matches the design ``(D, 1, X1, X2)``.
    """
    if not 0.0 < alpha < 1.0:
        raise ConfigError(f"alpha must lie in (0, 1), got {alpha}")
    b1 = 0.5 * math.exp(0.3 * alpha)
    g1 = 0.5 * math.expm1(0.3 * alpha) / (0.3 * alpha)
    la = math.log(alpha)
    return TruthRow(alpha, b1, g1, (b1, la, -0.2, -0.3), (g1, la - 1.0, -0.2, -0.3))


@dataclass(frozen=True)
class MetricsRow:
    alpha: float
    n: int
    estimator: str
    target: str
    bias: float
    emp_var: float
    boot_var: float
    cov95: float
    n_reps: int
    B: int
    failed: int = 0


@dataclass(frozen=True)
class ReplicationRecord:
    rep: int
    estimator: str
    alpha: float
    estimate: tuple  # (beta1, gamma1)
    se: tuple
    covers: tuple
    boot_failed: int = 0


def replication_seed(seed: int, rep: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), int(rep)])


def _estimator_config(base: EstimatorConfig, estimator: str, alphas) -> EstimatorConfig:
    return base.replace(weight_mode=estimator, alphas=tuple(alphas))


def run_one_replication(spec: DgpSpec, alphas, estimators, B: int, seed: int, rep: int,
                        base_config: EstimatorConfig | None = None, level: float = 0.95):
    """Fit and bootstrap every estimator on replication ``rep``'s sample.

    Returns ``(records, failure_message_or_None)``.
    """
    base_config = EstimatorConfig() if base_config is None else base_config
    ss = replication_seed(seed, rep)
    data_ss, boot_ss = ss.spawn(2)
    sample = simulate_sample(spec, np.random.default_rng(data_ss))
    boot_seed = int(boot_ss.generate_state(1)[0])
    truths = {a: true_effects(a) for a in alphas}
    records = []
    try:
        for est_name in estimators:
            cfg = _estimator_config(base_config, est_name, alphas)
            complier = sample.complier if est_name == "oracle" else None
            ests = two_stage_fit(sample.frame, cfg, complier)
            boots = bootstrap_variance(sample.frame, cfg, B, boot_seed, complier, ests, level)
            for e, bres in zip(ests, boots):
                t = truths[e.alpha]
                se = (float(bres.se[bres.coordinate("beta")]), float(bres.se[bres.coordinate("gamma")]))
                theta = (e.beta1, e.gamma1)
                ci = normal_interval(theta, se, level)
                covers = tuple(bool(lo <= tv <= hi) for (lo, hi), tv in zip(ci, (t.beta1, t.gamma1)))
                records.append(ReplicationRecord(rep, est_name, e.alpha, theta, se, covers, bres.failed))
    except NumericalError as exc:
        return [], f"replication {rep}: {exc}"
    return records, None


def aggregate(records, spec: DgpSpec, alphas, estimators, B: int, failed: int = 0) -> list[MetricsRow]:
    """Fold per-replication records into one metrics row per (alpha, estimator, target)."""
    rows = []
    for a in alphas:
        truth = true_effects(a)
        for est in estimators:
            recs = sorted((r for r in records if r.estimator == est and r.alpha == a), key=lambda r: r.rep)
            for k, target in enumerate(TARGETS):
                vals = np.array([r.estimate[k] for r in recs])
                ses = np.array([r.se[k] for r in recs])
                cov = np.array([r.covers[k] for r in recs], dtype=float)
                tv = truth.beta1 if target == "beta1" else truth.gamma1
                nr = len(recs)
                rows.append(MetricsRow(
                    alpha=a, n=spec.n, estimator=est, target=target,
                    bias=float(vals.mean() - tv) if nr else math.nan,
                    emp_var=float(vals.var(ddof=1)) if nr > 1 else math.nan,
                    boot_var=float(np.mean(ses**2)) if nr else math.nan,
                    cov95=float(cov.mean()) if nr else math.nan,
                    n_reps=nr, B=B, failed=failed,
                ))
    return rows


@dataclass
class SimulationResult:
    rows: list
    records: list
    failures: list = field(default_factory=list)


def run_simulation(spec: DgpSpec, alphas=(0.3,), estimators=ESTIMATORS, R: int = 200, B: int = 200,
                   seed: int = 0, base_config: EstimatorConfig | None = None, level: float = 0.95,
                   n_jobs: int = 1, progress=None) -> SimulationResult:
    """Monte-Carlo study; replication ``r`` is reproducible from ``(seed, r)`` alone."""
    if R < 2:
        raise ConfigError(f"need at least two replications, got R={R}")
    unknown = set(estimators) - set(ESTIMATORS)
    if unknown:
        raise ConfigError(f"unknown estimators: {sorted(unknown)}")
    alphas = tuple(float(a) for a in alphas)
    args = (spec, alphas, tuple(estimators), B, seed)
    if n_jobs == 1:
        out = []
        for r in range(R):
            out.append(run_one_replication(*args, r, base_config, level))
            if progress is not None:
                progress(r + 1, R)
    else:
        out = Parallel(n_jobs=n_jobs)(
            delayed(run_one_replication)(*args, r, base_config, level) for r in range(R)
        )
    records = [rec for recs, _ in out for rec in recs]
    failures = [msg for _, msg in out if msg is not None]
    rows = aggregate(records, spec, alphas, estimators, B, len(failures))
    return SimulationResult(rows, records, failures)


def run_replications(spec: DgpSpec, alphas=(0.3,), estimators=ESTIMATORS, R: int = 200, B: int = 200,
                     seed: int = 0, **kwargs) -> list[MetricsRow]:
    return run_simulation(spec, alphas, estimators, R, B, seed, **kwargs).rows


METRIC_FIELDS = tuple(MetricsRow.__dataclass_fields__)


def metrics_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_FIELDS)
    for r in rows:
        d = asdict(r)
        w.writerow([repr(d[k]) if isinstance(d[k], float) else d[k] for k in METRIC_FIELDS])
    return buf.getvalue()


def render_table(rows) -> str:
    """Plain-text table grouped by level and sample size, estimators side by side."""
    rows = list(rows)
    ests = [e for e in ESTIMATORS if any(r.estimator == e for r in rows)]
    header = f"{'alpha':>5} {'n':>5} {'metric':<9}" + "".join(f" {e + ':' + t:>16}" for e in ests for t in TARGETS)
    lines = [header, "-" * len(header)]
    keys = sorted({(r.alpha, r.n) for r in rows})
    lookup = {(r.alpha, r.n, r.estimator, r.target): r for r in rows}
    for a, n in keys:
        for label, attr in (("Bias", "bias"), ("Emp var", "emp_var"), ("Boot var", "boot_var"), ("Cov 95", "cov95")):
            cells = []
            for e in ests:
                for t in TARGETS:
                    r = lookup.get((a, n, e, t))
                    cells.append(f" {getattr(r, attr):>16.3f}" if r is not None else f" {'':>16}")
            lines.append(f"{a:>5.2f} {n:>5d} {label:<9}" + "".join(cells))
        lines.append("")
    return "\n".join(lines)
