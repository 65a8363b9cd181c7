import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.integrate import simpson

from creste import BandwidthError, ComplianceWeights, DegenerateInstrumentError, KernelSpec, ObservationFrame
from creste.data import stratify
from creste.kernels import (
    _smooth_group,
    complier_proportion,
    cv_bandwidth,
    estimate_kappa,
    estimate_pi,
    kappa_formula,
    kernel_eval,
    nw_pi,
    nw_v,
    truncate,
)


def k2(u):
    return 0.75 * (1 - u * u) if abs(u) <= 1 else 0.0


def gauss_legendre(f, deg=20):
    x, w = np.polynomial.legendre.leggauss(deg)
    return float(np.dot(w, f(x)))


# ---- kernels ---------------------------------------------------------------

def test_kernel_values():
    assert kernel_eval(KernelSpec(2), [0.0]) == 0.75
    assert kernel_eval(KernelSpec(2), [2.0]) == 0.0
    assert kernel_eval(KernelSpec(2), [0.5, 0.0]) == pytest.approx(0.75 * 0.75 * 0.75)
    assert kernel_eval(KernelSpec(4), [0.3, 1.01]) == 0.0


def test_bad_order():
    with pytest.raises(ValueError):
        KernelSpec(3)


@pytest.mark.parametrize("order", [2, 4])
def test_kernel_moments_by_quadrature(order):
    k = KernelSpec(order)
    u = np.linspace(-1, 1, 20001)
    assert abs(simpson(k(u), x=u) - 1) < 1e-10
    assert abs(gauss_legendre(k) - 1) < 1e-12
    if order == 4:
        assert abs(simpson(u**2 * k(u), x=u)) < 1e-10
        assert abs(gauss_legendre(lambda x: x**2 * k(x))) < 1e-12


def test_order2_nonnegative():
    u = np.linspace(-2, 2, 401)
    assert np.all(KernelSpec(2)(u) >= 0)


# ---- Nadaraya-Watson -------------------------------------------------------

def _frame(x, v, d=None, y=None, xd=None):
    n = len(v)
    return ObservationFrame(
        np.zeros(n) if y is None else y, np.zeros(n) if d is None else d, v,
        x_cont=None if x is None else np.asarray(x, float), x_disc=xd,
    )


def test_nw_pi_hand_evaluation():
    f = _frame([0.0, 0.5, 1.0], [1, 0, 1])
    num = sum(k2((0.5 - xj) / 0.6) * vj for xj, vj in zip([0, 0.5, 1], [1, 0, 1]))
    den = sum(k2((0.5 - xj) / 0.6) for xj in [0, 0.5, 1])
    assert nw_pi(f, stratify(f), 0.6, KernelSpec(2), 1) == pytest.approx(num / den, abs=1e-14)
    assert num / den == pytest.approx(0.3793103448, abs=1e-9)


def test_nw_pi_constant_instrument():
    f = _frame(np.linspace(0, 1, 7), np.ones(7))
    cells = stratify(f)
    assert all(nw_pi(f, cells, 0.2, KernelSpec(2), i) == 1.0 for i in range(7))


def test_nw_pi_without_continuous_is_cell_mean():
    f = _frame(None, [1, 0, 1, 0])
    pi, flags = estimate_pi(f, stratify(f), 0.3, KernelSpec(2))
    np.testing.assert_array_equal(pi, 0.5)
    assert not flags.any()


def test_nw_pi_isolated_point_falls_back_to_cell_mean():
    f = _frame([0.0, 0.05, 5.0], [1, 1, 0])
    pi, flags = estimate_pi(f, stratify(f), 0.1, KernelSpec(2))
    # the far point only sees itself, which is a proper (non-degenerate) fit
    assert pi[2] == 0.0 and not flags.any()
    # a query with no neighbour at all uses the fallback
    est, deg = _smooth_group(np.array([[2.5]]), f.x_cont, f.v, [0.1], KernelSpec(2), False, 2 / 3)
    assert deg[0, 0] and est[0, 0] == pytest.approx(2 / 3)


def test_nw_v_single_neighbour_is_own_value():
    f = _frame([0.0, 3.0], [1, 0], d=[1, 0], y=[0.0, 10.0])
    cells = stratify(f)
    assert nw_v(f, cells, 0.5, KernelSpec(2), 0) == 1.0
    assert nw_v(f, cells, 0.5, KernelSpec(2), 1) == 0.0


def test_nw_v_wide_bandwidth_direct_ratio():
    y = np.array([0.1, 0.4, 0.2, 0.9])
    x = np.array([0.3, 0.1, 0.8, 0.5])
    v = np.array([1, 0, 1, 1])
    f = _frame(x, v, d=np.ones(4), y=y)
    s = 5.0
    for i in range(4):
        w = [k2((y[i] - y[j]) / s) * k2((x[i] - x[j]) / s) for j in range(4)]
        expect = np.dot(w, v) / np.sum(w)
        assert nw_v(f, stratify(f), s, KernelSpec(2), i) == pytest.approx(expect, abs=1e-14)


def test_nw_v_uses_own_arm_only():
    f = _frame([0.0, 0.0, 0.0], [1, 0, 0], d=[1, 0, 0], y=[0.0, 0.0, 0.0])
    assert nw_v(f, stratify(f), 0.5, KernelSpec(2), 0) == 1.0


@given(st.lists(st.floats(-3, 3), min_size=3, max_size=25), st.integers(0, 2**31), st.floats(-50, 50))
def test_nw_pi_translation_invariant(x, seed, shift):
    x = np.array(x)
    v = np.random.default_rng(seed).integers(0, 2, len(x))
    f, g = _frame(x, v), _frame(x + shift, v)
    a, _ = estimate_pi(f, stratify(f), 0.7, KernelSpec(2))
    b, _ = estimate_pi(g, stratify(g), 0.7, KernelSpec(2))
    np.testing.assert_allclose(a, b, atol=1e-9)


@given(st.integers(0, 2**31), st.sampled_from([2, 4]), st.floats(0.05, 2.0))
def test_estimates_are_probabilities(seed, order, sigma):
    rng = np.random.default_rng(seed)
    n = 40
    f = _frame(rng.normal(size=n), rng.integers(0, 2, n), d=rng.integers(0, 2, n), y=rng.normal(size=n))
    w = estimate_kappa(f, None, sigma, sigma, KernelSpec(order), KernelSpec(order))
    assert np.all((w.pi_hat >= 0) & (w.pi_hat <= 1))
    assert np.all((w.v_hat >= 0) & (w.v_hat <= 1))


def test_fully_discrete_pi_is_cell_mean():
    xd = np.array([0, 0, 0, 1, 1, 1, 1], float)
    v = np.array([1, 0, 1, 0, 0, 1, 0], float)
    f = _frame(None, v, d=v, y=np.arange(7.0), xd=xd)
    w = estimate_kappa(f, None, 0.3, 0.3)
    np.testing.assert_array_equal(w.pi_hat, [2 / 3] * 3 + [0.25] * 4)


# ---- cross-validation ------------------------------------------------------

def test_cv_constant_instrument_picks_smallest():
    f = _frame(np.linspace(0, 1, 30), np.ones(30))
    sel = cv_bandwidth(f, stratify(f), KernelSpec(2), target="pi")
    assert sel.chosen == 0.1
    np.testing.assert_array_equal(sel.cv_scores, 0.0)


def test_cv_single_grid_point():
    f = _frame(np.linspace(0, 1, 30), np.r_[np.ones(15), np.zeros(15)])
    assert cv_bandwidth(f, stratify(f), KernelSpec(2), grid=(0.35,)).chosen == 0.35


def _cv_oracle(x, v, grid, folds, seed):
    """Straight-line K-fold CV for a single cell and the pi target."""
    n = len(x)
    perm = np.random.default_rng(seed).permutation(n)
    parts = np.array_split(perm, folds)
    scores = []
    for s in grid:
        err = 0.0
        for part in parts:
            test = set(part.tolist())
            train = [j for j in range(n) if j not in test]
            fb = np.mean([v[j] for j in train])
            for i in part:
                num = den = 0.0
                for j in train:
                    kk = k2((x[i] - x[j]) / s)
                    num += kk * v[j]
                    den += kk
                est = num / den if den > 1e-12 else fb
                err += abs(v[i] - est)
        scores.append(err / n)
    return np.array(scores)


def test_cv_matches_brute_force_on_steep_propensity():
    rng = np.random.default_rng(5)
    x = np.sort(rng.uniform(0, 1, 20))
    v = (x > 0.5).astype(float)
    v[[3, 15]] = 1 - v[[3, 15]]
    grid = (0.1, 0.2, 0.3, 0.5, 0.9)
    f = _frame(x, v)
    sel = cv_bandwidth(f, stratify(f), KernelSpec(2), grid=grid, folds=5, seed=3)
    oracle = _cv_oracle(x, v, grid, 5, 3)
    np.testing.assert_allclose(sel.cv_scores, oracle, atol=1e-12)
    assert sel.chosen == grid[int(np.argmin(oracle))]
    assert oracle[-1] > oracle.min()  # oversmoothing loses


def test_cv_all_degenerate_raises():
    f = _frame(np.arange(25.0) * 10, np.arange(25) % 2)
    with pytest.raises(BandwidthError, match="wider grid"):
        cv_bandwidth(f, stratify(f), KernelSpec(2), grid=(0.1, 0.2))


def test_cv_rejects_bad_grid():
    f = _frame(np.linspace(0, 1, 10), np.arange(10) % 2)
    with pytest.raises(ValueError):
        cv_bandwidth(f, stratify(f), KernelSpec(2), grid=(0.5, 0.1))


# ---- weight algebra --------------------------------------------------------

def test_kappa_cases():
    n = 100
    raw = kappa_formula([1, 1, 0], [1.0, 0.4, 0.3], [0.5, 0.4, 0.6])
    np.testing.assert_allclose(raw, [1.0, 0.0, 0.5], atol=1e-15)
    kt, lo, hi = truncate(raw, n)
    np.testing.assert_allclose(kt, [1 - 10 / n, 10 / n, 0.5])
    assert (lo, hi) == (0.1, 0.9)


def test_truncation_collapses_for_tiny_samples():
    kt, lo, hi = truncate(np.array([0.0, 0.3, 1.0]), 10)
    assert lo == hi == 0.5
    np.testing.assert_array_equal(kt, 0.5)


@given(st.integers(20, 120), st.integers(0, 2**31), st.sampled_from([2, 4]),
       st.floats(0.05, 1.0), st.floats(0.05, 1.0), st.booleans())
def test_truncation_bounds_hold(n, seed, order, s1, s2, with_disc):
    rng = np.random.default_rng(seed)
    f = ObservationFrame(
        rng.standard_cauchy(n), rng.integers(0, 2, n), rng.integers(0, 2, n),
        x_cont=rng.uniform(size=n), x_disc=rng.integers(0, 3, n) if with_disc else None,
    )
    w = estimate_kappa(f, None, s1, s2, KernelSpec(order), KernelSpec(order))
    assert w.kappa_tilde.min() >= 10 / n and w.kappa_tilde.max() <= 1 - 10 / n
    np.testing.assert_array_equal(w.kappa_tilde, np.clip(w.kappa_raw, 10 / n, 1 - 10 / n))
    pc = np.clip(w.pi_hat, 0.01, 0.99)
    np.testing.assert_allclose(w.kappa_raw, kappa_formula(f.d, w.v_hat, pc), rtol=0, atol=0)


def test_unit_and_indicator_weights():
    assert ComplianceWeights.unit(3).mode == "naive"
    np.testing.assert_array_equal(ComplianceWeights.unit(3).kappa_tilde, 1.0)
    w = ComplianceWeights.indicator([1, 0, 1])
    assert w.mode == "oracle" and w.kappa_tilde.tolist() == [1, 0, 1]
    with pytest.raises(ValueError):
        ComplianceWeights.indicator([0.5])


# ---- complier proportion ---------------------------------------------------

def test_complier_proportion_cases():
    f = lambda d, v: ObservationFrame(np.zeros(len(d)), d, v)  # noqa: E731
    assert complier_proportion(f([1, 0, 1, 0], [1, 0, 1, 0])) == 1.0
    assert complier_proportion(f([1, 1, 1, 1], [1, 0, 1, 0])) == 0.0
    assert complier_proportion(f([1, 1, 0, 0], [1, 0, 1, 0])) == 0.0


def test_complier_proportion_degenerate_instrument():
    with pytest.raises(DegenerateInstrumentError, match="p_c undefined: degenerate instrument"):
        complier_proportion(ObservationFrame([0.0, 1.0], [1, 0], [1, 1]))
