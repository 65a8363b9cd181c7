"""Compliance weights from Nadaraya-Watson estimates of the instrument propensity.

Two conditional probabilities are smoothed, each within a discrete-covariate
cell: ``pi(x) = P(V=1 | X=x)`` over the continuous covariates, and
``v(y, z) = P(V=1 | Y=y, Z=z)`` over ``(y, x_cont)`` inside the treatment arm.
They combine into the weight ``1 - D(1-v)/(1-pi) - (1-D)v/pi``, which is then
truncated into ``[10/n, 1 - 10/n]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

from .data import CellPartition, ObservationFrame, stratify
from .exceptions import BandwidthError, ConfigError, DegenerateInstrumentError

DEFAULT_GRID = tuple(round(0.1 * k, 1) for k in range(1, 10))


@dataclass(frozen=True)
class KernelSpec:
    """Epanechnikov-family kernel on ``[-1, 1]`` of order 2 or 4.

    Order 2 is ``3/4 (1 - u^2)``. Order 4 is ``15/32 (3 - 10u^2 + 7u^4)``,
    which integrates to one with a vanishing second moment and takes negative
    values for ``|u| > sqrt(3/7)``.
    """

    order: int = 2
    name: str = "epanechnikov"

    def __post_init__(self):
        if self.order not in (2, 4):
            raise ConfigError(f"kernel order must be 2 or 4, got {self.order}")

    def __call__(self, u):
        u = np.asarray(u, dtype=float)
        u2 = u * u
        if self.order == 2:
            k = 0.75 * (1.0 - u2)
        else:
            k = (15.0 / 32.0) * (3.0 - 10.0 * u2 + 7.0 * u2 * u2)
        return np.where(np.abs(u) <= 1.0, k, 0.0)


def kernel_eval(spec: KernelSpec, u) -> float:
    """Product kernel ``prod_j k(u_j)``."""
    return float(np.prod(spec(np.atleast_1d(u))))


@numba.njit(cache=True)
def _nw_sums_grid(q, p, vals, sigmas, order):
    # p must be sorted on its first column; the window uses the widest bandwidth
    m, dim = q.shape
    g = sigmas.shape[0]
    num = np.zeros((m, g))
    den = np.zeros((m, g))
    first = p[:, 0]
    smax = sigmas.max()
    inv = 1.0 / sigmas
    for i in range(m):
        lo = np.searchsorted(first, q[i, 0] - smax)
        hi = np.searchsorted(first, q[i, 0] + smax, side="right")
        for j in range(lo, hi):
            for s in range(g):
                kk = 1.0
                for c in range(dim):
                    u = (q[i, c] - p[j, c]) * inv[s]
                    u2 = u * u
                    if u2 > 1.0:
                        kk = 0.0
                        break
                    if order == 2:
                        kk *= 0.75 * (1.0 - u2)
                    else:
                        kk *= 0.46875 * (3.0 - 10.0 * u2 + 7.0 * u2 * u2)
                if kk != 0.0:
                    num[i, s] += kk * vals[j]
                    den[i, s] += kk
    return num, den


def nw_ratio(query, points, values, sigmas, spec: KernelSpec):
    """Nadaraya-Watson sums at ``query`` for each bandwidth in ``sigmas``.

    Returns ``(estimate, degenerate)``, both shaped ``(m, len(sigmas))``.
    ``degenerate`` marks a non-positive kernel mass (no neighbours within the
    bandwidth, or cancellation under the order-4 kernel); the estimate there
    is NaN and callers substitute a fallback.
    """
    query = np.ascontiguousarray(np.atleast_2d(query), dtype=float)
    points = np.asarray(points, dtype=float)
    values = np.asarray(values, dtype=float)
    sig = np.atleast_1d(np.asarray(sigmas, dtype=float))
    order = np.argsort(points[:, 0], kind="stable")
    num, den = _nw_sums_grid(
        query, np.ascontiguousarray(points[order]), np.ascontiguousarray(values[order]), sig, spec.order
    )
    degenerate = den <= 1e-12
    with np.errstate(divide="ignore", invalid="ignore"):
        est = np.where(degenerate, np.nan, num / den)
    return np.clip(est, 0.0, 1.0), degenerate


def _scale(points: np.ndarray, standardize: bool) -> np.ndarray:
    if not standardize or points.shape[0] < 2:
        return np.ones(points.shape[1])
    sd = points.std(axis=0, ddof=1)
    return np.where(sd > 0, sd, 1.0)


def _pi_points(frame, idx):
    return frame.x_cont[idx]


def _v_points(frame, idx):
    return np.column_stack([frame.y[idx], frame.x_cont[idx]])


def _smooth_group(points_q, points_t, v_t, sigmas, spec, standardize, fallback):
    """Estimates for queries against one training group; fallback where degenerate."""
    m = points_q.shape[0]
    g = len(sigmas)
    if points_t.shape[0] == 0:
        return np.full((m, g), fallback), np.ones((m, g), dtype=bool)
    if points_t.shape[1] == 0:
        return np.full((m, g), float(v_t.mean())), np.zeros((m, g), dtype=bool)
    sc = _scale(points_t, standardize)
    est, deg = nw_ratio(points_q / sc, points_t / sc, v_t, sigmas, spec)
    est = np.where(deg, fallback, est)
    return est, deg


def estimate_pi(frame: ObservationFrame, cells: CellPartition, sigma1: float, spec: KernelSpec, standardize=False):
    """In-sample ``pi_hat`` for every row, with per-row fallback flags."""
    pi = np.empty(frame.n)
    flag = np.zeros(frame.n, dtype=bool)
    for idx in cells.cells:
        pts = _pi_points(frame, idx)
        vv = frame.v[idx]
        est, deg = _smooth_group(pts, pts, vv, [sigma1], spec, standardize, float(vv.mean()))
        pi[idx] = est[:, 0]
        flag[idx] = deg[:, 0]
    return pi, flag


def estimate_v(frame: ObservationFrame, cells: CellPartition, sigma2: float, spec: KernelSpec, standardize=False):
    """In-sample ``v_hat(Y_i, Z_i)``, smoothing within cell and treatment arm."""
    vh = np.empty(frame.n)
    flag = np.zeros(frame.n, dtype=bool)
    for idx in cells.cells:
        for arm in (0.0, 1.0):
            sub = idx[frame.d[idx] == arm]
            if sub.size == 0:
                continue
            pts = _v_points(frame, sub)
            vv = frame.v[sub]
            est, deg = _smooth_group(pts, pts, vv, [sigma2], spec, standardize, float(vv.mean()))
            vh[sub] = est[:, 0]
            flag[sub] = deg[:, 0]
    return vh, flag


def _query(frame, cells, i):
    i = int(i)
    if not 0 <= i < frame.n:
        raise IndexError(f"query row {i} out of range for n={frame.n}")
    return i, cells.cells[cells.cell_ids[i]]


def nw_pi(frame, cells, sigma1, spec, query_index):
    """``pi_hat`` at one row, using only rows in its cell."""
    i, idx = _query(frame, cells, query_index)
    vv = frame.v[idx]
    est, _ = _smooth_group(_pi_points(frame, [i]), _pi_points(frame, idx), vv, [sigma1], spec, False, float(vv.mean()))
    return float(est[0, 0])


def nw_v(frame, cells, sigma2, spec, query_index):
    """``v_hat`` at one row, using rows in its cell and treatment arm."""
    i, idx = _query(frame, cells, query_index)
    sub = idx[frame.d[idx] == frame.d[i]]
    vv = frame.v[sub]
    est, _ = _smooth_group(_v_points(frame, [i]), _v_points(frame, sub), vv, [sigma2], spec, False, float(vv.mean()))
    return float(est[0, 0])


@dataclass(frozen=True, eq=False)
class BandwidthSelection:
    grid: tuple
    target: str
    chosen: float
    cv_scores: np.ndarray
    degenerate: np.ndarray = field(default=None)


def cv_bandwidth(
    frame: ObservationFrame,
    cells: CellPartition,
    spec: KernelSpec,
    grid=DEFAULT_GRID,
    target: str = "pi",
    folds: int = 5,
    seed: int = 0,
    standardize: bool = False,
) -> BandwidthSelection:
    """K-fold cross-validated bandwidth minimising mean ``|V_i - estimate_i|``.

    Held-out rows are predicted from training rows in the same cell (and the
    same treatment arm for ``target="v"``). Ties go to the smallest bandwidth.
    """
    grid = tuple(float(s) for s in grid)
    if not grid or any(s <= 0 for s in grid) or list(grid) != sorted(grid):
        raise ConfigError("bandwidth grid must be nonempty, positive and ascending")
    if target not in ("pi", "v"):
        raise ConfigError(f"unknown bandwidth target {target!r}")
    if folds < 2 or frame.n < folds:
        raise ConfigError(f"need 2 <= folds <= n, got folds={folds}, n={frame.n}")
    if len(grid) == 1:
        return BandwidthSelection(grid, target, grid[0], np.zeros(1), np.zeros(1, dtype=bool))

    perm = np.random.default_rng(seed).permutation(frame.n)
    fold_of = np.empty(frame.n, dtype=np.intp)
    for k, part in enumerate(np.array_split(perm, folds)):
        fold_of[part] = k

    g = len(grid)
    abs_err = np.zeros(g)
    fallback_all = np.ones(g, dtype=bool)
    points = _pi_points if target == "pi" else _v_points
    for k in range(folds):
        test_mask = fold_of == k
        train_mask = ~test_mask
        overall = float(frame.v[train_mask].mean())
        for idx in cells.cells:
            tr_cell = idx[train_mask[idx]]
            cell_mean = float(frame.v[tr_cell].mean()) if tr_cell.size else overall
            groups = [idx] if target == "pi" else [idx[frame.d[idx] == arm] for arm in (0.0, 1.0)]
            for grp in groups:
                te = grp[test_mask[grp]]
                if te.size == 0:
                    continue
                tr = grp[train_mask[grp]]
                fb = float(frame.v[tr].mean()) if tr.size else cell_mean
                est, deg = _smooth_group(points(frame, te), points(frame, tr), frame.v[tr], grid, spec, standardize, fb)
                abs_err += np.abs(frame.v[te][:, None] - est).sum(axis=0)
                fallback_all &= deg.all(axis=0)
    scores = abs_err / frame.n
    if fallback_all.all():
        raise BandwidthError(
            f"every bandwidth in the grid left all held-out rows without neighbours ({target}); use a wider grid"
        )
    masked = np.where(fallback_all, np.inf, scores)
    best = int(np.flatnonzero(masked == masked.min())[0])
    return BandwidthSelection(grid, target, grid[best], scores, fallback_all)


@dataclass(frozen=True, eq=False)
class ComplianceWeights:
    """Per-row weights for the two estimation stages.

    ``mode`` is ``"proposed"`` for kernel-estimated weights, ``"naive"`` for
    unit weights and ``"oracle"`` for a known complier indicator. Only the
    proposed mode fills the diagnostics and obeys the truncation bounds.
    """

    kappa_tilde: np.ndarray
    mode: str = "proposed"
    kappa_raw: np.ndarray | None = None
    pi_hat: np.ndarray | None = None
    v_hat: np.ndarray | None = None
    c_l: float | None = None
    c_u: float | None = None
    truncated_count: int = 0
    pi_clamped_count: int = 0
    pi_fallback: np.ndarray | None = None
    v_fallback: np.ndarray | None = None
    sigma1: float | None = None
    sigma2: float | None = None

    @classmethod
    def unit(cls, n: int) -> "ComplianceWeights":
        return cls(np.ones(n), mode="naive")

    @classmethod
    def indicator(cls, complier) -> "ComplianceWeights":
        c = np.asarray(complier, dtype=float)
        if np.any((c != 0) & (c != 1)):
            raise ConfigError("complier indicator must be 0/1")
        return cls(c, mode="oracle")

    @property
    def n(self) -> int:
        return self.kappa_tilde.shape[0]

    @property
    def fallback_count(self) -> int:
        if self.pi_fallback is None:
            return 0
        return int(self.pi_fallback.sum() + self.v_fallback.sum())


def kappa_formula(d, v_hat, pi_hat):
    """``1 - D(1 - v)/(1 - pi) - (1 - D) v / pi``."""
    d = np.asarray(d, dtype=float)
    v_hat = np.asarray(v_hat, dtype=float)
    pi_hat = np.asarray(pi_hat, dtype=float)
    return 1.0 - d * (1.0 - v_hat) / (1.0 - pi_hat) - (1.0 - d) * v_hat / pi_hat


def truncation_bounds(n: int) -> tuple[float, float]:
    return 10.0 / n, 1.0 - 10.0 / n


def truncate(kappa_raw, n: int):
    c_l, c_u = truncation_bounds(n)
    if c_l > c_u:
        # n < 20: the bounds cross; collapse to their midpoint
        c_l = c_u = 0.5
    return np.minimum(np.maximum(kappa_raw, c_l), c_u), c_l, c_u


def estimate_kappa(
    frame: ObservationFrame,
    cells: CellPartition | None,
    sigma1: float,
    sigma2: float,
    spec_pi: KernelSpec = KernelSpec(2),
    spec_v: KernelSpec = KernelSpec(2),
    pi_clip: float = 0.01,
    standardize: bool = False,
) -> ComplianceWeights:
    """Kernel-estimated, truncated compliance weights for every row."""
    if sigma1 <= 0 or sigma2 <= 0:
        raise ConfigError("bandwidths must be positive")
    if not 0 <= pi_clip < 0.5:
        raise ConfigError("pi_clip must lie in [0, 0.5)")
    if cells is None:
        cells = stratify(frame)
    pi_hat, pi_fb = estimate_pi(frame, cells, sigma1, spec_pi, standardize)
    v_hat, v_fb = estimate_v(frame, cells, sigma2, spec_v, standardize)
    pi_c = np.clip(pi_hat, pi_clip, 1.0 - pi_clip)
    raw = kappa_formula(frame.d, v_hat, pi_c)
    kt, c_l, c_u = truncate(raw, frame.n)
    return ComplianceWeights(
        kappa_tilde=kt, mode="proposed", kappa_raw=raw, pi_hat=pi_hat, v_hat=v_hat,
        c_l=c_l, c_u=c_u, truncated_count=int(np.sum(kt != raw)),
        pi_clamped_count=int(np.sum(pi_c != pi_hat)),
        pi_fallback=pi_fb, v_fallback=v_fb, sigma1=float(sigma1), sigma2=float(sigma2),
    )


def complier_proportion(frame: ObservationFrame) -> float:
    """Share of compliers, ``1 - sum D(1-V)/sum(1-V) - sum (1-D)V / sum V``."""
    d, v = frame.d, frame.v
    sv, s1v = v.sum(), (1.0 - v).sum()
    if sv == 0 or s1v == 0:
        raise DegenerateInstrumentError("p_c undefined: degenerate instrument (V is constant)")
    return float(1.0 - np.sum(d * (1.0 - v)) / s1v - np.sum((1.0 - d) * v) / sv)
