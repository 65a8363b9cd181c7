"""Weighted linear quantile regression solved to an exact vertex.

The problem ``min_b sum_i w_i rho_alpha(y_i - z_i'b)`` is a linear program.
We walk its vertices directly: a vertex is a basis ``h`` of ``p`` rows fitted
exactly, an edge releases one basic row, and the step along the edge is the
exact minimiser of the piecewise-linear objective (a weighted-median search
over the breakpoints, as in Barrodale and Roberts). Termination is certified
by an explicit dual solution of the LP.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import ObservationFrame
from .exceptions import ConfigError, NumericalError, RankDeficientError


def pinball(u, alpha):
    """Check loss ``rho_alpha(u) = u (alpha - 1{u <= 0})``."""
    u = np.asarray(u, dtype=float)
    return u * (alpha - (u <= 0))


def wqr_objective(Z, y, w, alpha, beta) -> float:
    return float(np.dot(w, pinball(y - Z @ beta, alpha)))


@dataclass(frozen=True, eq=False)
class QuantileFit:
    alpha: float
    beta_hat: np.ndarray
    fitted_q: np.ndarray
    active_set: np.ndarray
    basis: np.ndarray
    objective: float
    optimality_gap: float
    dual: np.ndarray
    dual_infeasibility: float
    pivots: int
    solver: str = "simplex"

    @property
    def certified(self) -> bool:
        return self.optimality_gap <= 1e-8 * (1.0 + abs(self.objective)) and self.dual_infeasibility <= 1e-9


def check_rank(Z: np.ndarray, names=None) -> None:
    """Raise naming the first column that is a combination of earlier ones."""
    p = Z.shape[1]
    if Z.shape[0] >= p and np.linalg.matrix_rank(Z) == p:
        return
    for j in range(p):
        if np.linalg.matrix_rank(Z[:, : j + 1]) < j + 1:
            name = names[j] if names is not None else f"column {j}"
            raise RankDeficientError(f"design is rank deficient: '{name}' is collinear with earlier columns", column=name)
    raise RankDeficientError("design is rank deficient: fewer rows than columns")


def _initial_basis(Z, r) -> np.ndarray:
    p = Z.shape[1]
    order = np.lexsort((np.arange(len(r)), np.abs(r)))
    basis: list[int] = []
    Q = np.zeros((0, p))
    for i in order:
        z = Z[i]
        resid = z - Q.T @ (Q @ z) if len(basis) else z.copy()
        nz = np.linalg.norm(resid)
        if nz > 1e-9 * max(1.0, np.linalg.norm(z)):
            basis.append(int(i))
            Q = np.vstack([Q, resid / nz])
            if len(basis) == p:
                return np.array(basis)
    raise RankDeficientError("could not find a full-rank basis")


def _merge_identical(M):
    """Group identical rows; returns (first index of each group, group of each row).

    Groups are numbered in order of first appearance.
    """
    n = M.shape[0]
    order = np.lexsort(M.T[::-1])
    sm = M[order]
    new = np.empty(n, dtype=bool)
    new[0] = True
    np.any(sm[1:] != sm[:-1], axis=1, out=new[1:])
    gid_sorted = np.cumsum(new) - 1
    rep = order[new]  # lexsort is stable, so this is the smallest index in the group
    by_first = np.argsort(rep, kind="stable")
    renum = np.empty(rep.size, dtype=np.intp)
    renum[by_first] = np.arange(rep.size)
    inverse = np.empty(n, dtype=np.intp)
    inverse[order] = renum[gid_sorted]
    return rep[by_first], inverse


def _dual(Z, w, r, h, Zh_inv, alpha):
    """Dual values for all rows at basis ``h``.

    Nonbasic rows take ``alpha - 1{r < 0}``; basic rows take the values that
    zero the weighted score ``Z'(w * a)``.
    """
    a = np.where(r < 0, alpha - 1.0, alpha)
    a[h] = 0.0
    g = Z.T @ (w * a)
    u = Zh_inv.T @ g
    a[h] = -u / w[h]
    return a, u


class _Stalled(Exception):
    def __init__(self, basis):
        super().__init__("degenerate pivots are cycling")
        self.basis = basis


def _simplex(Z, y, w, alpha, h, max_pivots, tol=1e-11, stall_limit=None):
    """Vertex walk from basis ``h``; raises ``_Stalled`` on a degenerate cycle."""
    n, p = Z.shape
    stall_limit = 10 * p + 50 if stall_limit is None else stall_limit
    bland = False
    degenerate_run = 0
    seen = set()
    for pivot in range(max_pivots + 1):
        Zh = Z[h]
        Zh_inv = np.linalg.inv(Zh)
        beta = np.linalg.solve(Zh, y[h])
        r = y - Z @ beta
        r[h] = 0.0
        a, u = _dual(Z, w, r, h, Zh_inv, alpha)
        wh = w[h]
        up = u - (1.0 - alpha) * wh  # > 0: releasing with s=+1 descends
        dn = -alpha * wh - u  # > 0: releasing with s=-1 descends
        viol = np.maximum(up, dn)
        scale = tol * (1.0 + np.abs(u) + wh)
        cand = np.flatnonzero(viol > scale)
        if cand.size == 0:
            return beta, h, r, a, pivot
        if pivot == max_pivots:
            break
        if bland:
            j = cand[np.argmin(h[cand])]
        else:
            j = cand[np.argmax(viol[cand] / wh[cand])]
        s = 1.0 if up[j] >= dn[j] else -1.0

        d = s * Zh_inv[:, j]
        az = Z @ d
        az[h] = 0.0
        # slope at t=0 with zero-residual rows in their pre-crossing state
        slope = -float(np.dot(w * a, az))
        zero_neg = (r == 0) & (az < 0)
        zero_neg[h] = False
        slope += float(np.dot(w[zero_neg], az[zero_neg]))
        slope += w[h[j]] * ((1.0 - alpha) if s > 0 else alpha)
        if slope >= 0:
            # numerically marginal violation; treat as optimal
            return beta, h, r, a, pivot

        with np.errstate(divide="ignore", invalid="ignore"):
            t = r / az
        ok = (az != 0) & ((t > 0) | (r == 0))
        ok[h] = False
        idx = np.flatnonzero(ok)
        tb = np.where(r[idx] == 0, 0.0, t[idx])
        order = np.lexsort((idx, tb))
        idx, tb = idx[order], tb[order]
        cum = slope + np.cumsum(w[idx] * np.abs(az[idx]))
        k = int(np.searchsorted(cum >= 0, True))
        if k >= idx.size:
            raise NumericalError("quantile regression objective unbounded along an edge")
        # Bland's rule only while pivots stay degenerate; that is where cycling lives
        step = tb[k] * float(np.max(np.abs(d)))
        bland = step <= 1e-13 * (1.0 + float(np.max(np.abs(beta))))
        h = h.copy()
        h[j] = idx[k]
        if bland:
            degenerate_run += 1
            key = tuple(np.sort(h))
            if key in seen or degenerate_run > stall_limit:
                raise _Stalled(h)
            seen.add(key)
        else:
            degenerate_run = 0
            seen.clear()
    raise _Stalled(h)


def _perturbation(n, scale):
    # deterministic, distinct offsets (golden-ratio sequence) so no two rows tie
    i = np.arange(1, n + 1)
    return scale * (np.mod(i * 0.6180339887498949, 1.0) - 0.5)


def _solve(Z, y, w, alpha, h0, max_pivots):
    """Simplex with a perturbation restart when degenerate pivots cycle.

    A basis optimal for a slightly perturbed response is dual feasible for
    the original one, since rows fitted exactly may take any dual value in
    ``[alpha - 1, alpha]``. If its certificate fails on the original data the
    walk resumes from there without perturbation.
    """
    try:
        return _simplex(Z, y, w, alpha, h0, max_pivots)
    except _Stalled as st:
        h = st.basis
    eta = 1e-9 * (1.0 + float(np.max(np.abs(y))))
    try:
        _, h, _, a, pivots = _simplex(Z, y + _perturbation(len(y), eta), w, alpha, h, max_pivots)
    except _Stalled:
        raise NumericalError("simplex cycled on a degenerate problem") from None
    beta = np.linalg.solve(Z[h], y[h])
    r = y - Z @ beta
    r[h] = 0.0
    obj = float(np.dot(w, pinball(r, alpha)))
    gap = abs(obj - float(np.dot(w * a, y))) + abs(float(beta @ (Z.T @ (w * a))))
    if gap <= 1e-9 * (1.0 + abs(obj)):
        return beta, h, r, a, pivots
    try:
        return _simplex(Z, y, w, alpha, h, max_pivots)
    except _Stalled:
        raise NumericalError("simplex did not converge on a degenerate problem") from None


def wqr(Z, y, w=None, alpha=0.5, start=None, names=None, max_pivots=None) -> QuantileFit:
    """Weighted quantile regression on an explicit design matrix.

    Rows with zero weight are ignored. ``start`` is any coefficient guess; the
    solver builds its first vertex from the rows it fits best, so a good guess
    (e.g. the full-sample fit when bootstrapping) saves pivots.
    """
    if not 0.0 < alpha < 1.0:
        raise ConfigError(f"alpha must lie in (0, 1), got {alpha}")
    Z = np.asarray(Z, dtype=float)
    y = np.asarray(y, dtype=float)
    n_all = y.shape[0]
    w = np.ones(n_all) if w is None else np.asarray(w, dtype=float)
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ConfigError("weights must be finite and nonnegative")
    keep = np.flatnonzero(w > 0)
    # identical (z, y) rows are one term of the objective; merging them
    # removes the degenerate vertices that bootstrap duplicates create
    rep, inverse = _merge_identical(np.column_stack([Z[keep], y[keep]]))
    keep_u = keep[rep]
    Zk, yk = Z[keep_u], y[keep_u]
    wk = np.bincount(inverse, weights=w[keep], minlength=rep.size)
    check_rank(Zk, names)
    p = Z.shape[1]
    if start is None:
        sw = np.sqrt(wk)
        start = np.linalg.lstsq(Zk * sw[:, None], yk * sw, rcond=None)[0]
    if max_pivots is None:
        max_pivots = 50 * p + 10 * len(yk)
    h0 = _initial_basis(Zk, yk - Zk @ np.asarray(start, dtype=float))
    beta, h, r, a, pivots = _solve(Zk, yk, wk, alpha, h0, max_pivots)

    obj = float(np.dot(wk, pinball(r, alpha)))
    dual_obj = float(np.dot(wk * a, yk))
    infeas = float(max(0.0, np.max(a - alpha), np.max((alpha - 1.0) - a)))
    score = Zk.T @ (wk * a)
    gap = abs(obj - dual_obj) + abs(float(beta @ score))
    dual_full = np.zeros(n_all)
    dual_full[keep] = a[inverse]
    fitted = Z @ beta
    active = keep[r[inverse] == 0]
    return QuantileFit(
        alpha=alpha, beta_hat=beta, fitted_q=fitted, active_set=active,
        basis=keep_u[h], objective=obj, optimality_gap=gap, dual=dual_full,
        dual_infeasibility=infeas, pivots=pivots,
    )


def fit_wqr(frame: ObservationFrame, weights, alpha: float, start=None) -> QuantileFit:
    """Step-2 weighted quantile regression of ``Y`` on ``Z = (D, 1, X)``.

    ``weights`` is a :class:`~creste.kernels.ComplianceWeights` or a plain
    vector (unit weights give the naive fit, a 0/1 complier indicator the
    oracle fit).
    """
    w = getattr(weights, "kappa_tilde", weights)
    w = np.ones(frame.n) if w is None else np.asarray(w, dtype=float)
    return wqr(frame.design(), frame.y, w, alpha, start=start, names=frame.design_names)
