"""Stable tail dependence models, their margins, gradients and the pair integral map."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate
from scipy.special import ndtr

from pairstdf.models import (
    BlockLogisticModel, BrownResnickModel, BrownResnickParams, DegeneratePairError,
    DomainError, LogisticModel, LogisticParams, OneSidedDerivativeWarning, SiteSet,
    SmithModel, SmithParams, TauMatrix, br_to_smith, get_family, hr_pair_psi, hr_pair_row,
    pair_dependence_scale, psi, psi_jacobian, reparam_tau, smith_to_br, tau_to_params,
    variogram,
)
from pairstdf.quadrature import QuadConfig

SQUARE = SiteSet.grid(2, 2)
BR_REF = BrownResnickParams(1.0, 3.0, 0.5, 0.5)


def _models():
    grid = SiteSet.grid(2, 2, spacing=1.3)
    return [
        LogisticModel(0.35, 4),
        LogisticModel(1.0, 4),
        BlockLogisticModel(0.6, [0, 0, 1, 1]),
        BrownResnickModel(grid, BR_REF),
        BrownResnickModel(grid, BrownResnickParams(1.7, 0.8, 0.2, 1.4)),
        SmithModel(grid, SmithParams(1.0, 1.5, 0.5)),
    ]


MODELS = _models()


def _bivariate_hr(a, x, y):
    return x * ndtr(a / 2 + np.log(x / y) / a) + y * ndtr(a / 2 + np.log(y / x) / a)


# --- sites and parameters ----------------------------------------------------


def test_site_set_validation():
    with pytest.raises(ValueError):
        SiteSet(("a",), [[0.0, 0.0]])
    with pytest.raises(ValueError):
        SiteSet(("a", "a"), [[0.0, 0.0], [1.0, 0.0]])
    with pytest.raises(ValueError):
        SiteSet(("a", "b"), [[0.0, 0.0], [np.inf, 0.0]])


def test_site_set_csv_round_trip(tmp_path):
    s = SiteSet.from_coords([[0.5, 1.0], [2.0, -1.0], [3.25, 0.0]], ids=["x", "y", "z"])
    s.to_csv(tmp_path / "s.csv")
    back = SiteSet.from_csv(tmp_path / "s.csv")
    assert back.ids == s.ids
    np.testing.assert_array_equal(back.coords, s.coords)


def test_grid_layout_and_distances():
    g = SiteSet.grid(3, 2)
    np.testing.assert_array_equal(g.coords[:4], [[0, 0], [1, 0], [2, 0], [0, 1]])
    assert g.distance(0, 4) == pytest.approx(math.sqrt(2))


def test_parameter_invariants():
    with pytest.raises(DomainError):
        LogisticParams(0.0)
    with pytest.raises(DomainError):
        LogisticParams(1.2)
    with pytest.raises(DomainError):
        SmithParams(1.0, 1.0, 1.0)
    with pytest.raises(DomainError):
        BrownResnickParams(2.5, 1.0)
    with pytest.raises(DomainError):
        BrownResnickParams(1.0, 1.0, math.pi / 2, 1.0)
    with pytest.raises(DomainError):
        BrownResnickParams(1.0, 1.0, 0.0, 0.0)
    with pytest.raises(DomainError):
        TauMatrix(1.0, 1.0, 2.0)


# --- variogram and pair scale -----------------------------------------------------


def test_variogram_unit_case_and_origin():
    p = BrownResnickParams(2.0, 1.0, 0.0, 1.0)
    assert variogram(p, [1.0, 0.0]) == pytest.approx(1.0, abs=1e-15)
    assert variogram(BR_REF, [0.0, 0.0]) == 0.0


def test_variogram_reference_value():
    # symbolic evaluation of [h' V'V h / rho^2]^(1/2) at h = (1, 0)
    assert variogram(BR_REF, [1.0, 0.0]) == pytest.approx(0.30324419289127961689, rel=1e-14)


@given(st.floats(-5, 5), st.floats(-5, 5))
def test_variogram_is_even(x, y):
    assert variogram(BR_REF, [x, y]) == pytest.approx(variogram(BR_REF, [-x, -y]), rel=1e-14)


def test_pair_scale_smith_identity():
    assert pair_dependence_scale(SmithParams(1.0, 1.0, 0.0), [0, 0], [2, 0]) == pytest.approx(2.0)
    S = SmithParams(1.0, 1.5, 0.5)
    h = np.array([1.0, -2.0])
    a2 = h @ np.linalg.inv(S.matrix) @ h
    assert pair_dependence_scale(S, [0, 0], -h) ** 2 == pytest.approx(a2, rel=1e-13)


def test_pair_scale_reference_value():
    assert pair_dependence_scale(BR_REF, [0, 0], [1, 0]) == pytest.approx(
        0.77877364219814170197, rel=1e-14)


def test_pair_scale_coincident_sites():
    with pytest.raises(DegeneratePairError):
        pair_dependence_scale(BR_REF, [1, 1], [1, 1])


def test_alpha_two_corresponds_to_smith():
    br = BrownResnickParams(2.0, 1.0, 0.0, 1.0)
    sm = br_to_smith(br)
    # unit-range power variogram with alpha = 2 is the Smith model with Sigma = I/2
    np.testing.assert_allclose(sm.matrix, 0.5 * np.eye(2), atol=1e-15)
    for h in ([1.0, 0.0], [0.3, -2.0], [1.5, 1.5]):
        assert pair_dependence_scale(br, [0, 0], h) == pytest.approx(
            pair_dependence_scale(sm, [0, 0], h), rel=1e-12)


def test_smith_br_round_trip():
    S = SmithParams(1.0, 1.5, 0.5)
    br, tau = smith_to_br(S)
    assert br.alpha == 2.0
    np.testing.assert_allclose(br_to_smith(br).matrix, S.matrix, rtol=1e-12)
    g = SiteSet.grid(3, 3)
    a, b = SmithModel(g, S), BrownResnickModel(g, br)
    pts = np.random.default_rng(0).uniform(0.01, 3, (50, 2))
    for u, v in ((0, 1), (0, 4), (2, 6), (3, 8)):
        np.testing.assert_allclose(a.margin((u, v), pts), b.margin((u, v), pts), rtol=1e-10)


# --- tau reparametrisation ----------------------------------------------------------


def test_tau_identity():
    t = reparam_tau(BrownResnickParams(1.0, 1.0, 0.0, 1.0))
    np.testing.assert_allclose(t.matrix, np.eye(2), atol=1e-15)
    assert t.is_isotropic


def test_tau_reference_value():
    t = reparam_tau(BR_REF)
    np.testing.assert_allclose(
        [t.tau11, t.tau22, t.tau12],
        [0.091957040522283599336, 0.046931848366605289553, -0.035061291033662354444],
        rtol=1e-13)


@given(st.floats(0.1, 2.0), st.floats(0.1, 10.0), st.floats(0.0, 1.5), st.floats(0.2, 5.0))
def test_tau_round_trip(alpha, rho, beta, c):
    if abs(c - 1.0) < 1e-3:
        c = 1.0
        beta = 0.0
    p = BrownResnickParams(alpha, rho, beta, c)
    back = tau_to_params(reparam_tau(p), alpha)
    np.testing.assert_allclose([back.rho, back.beta, back.c], [rho, beta, c],
                               rtol=1e-9, atol=1e-9)


def test_isotropy_characterisation():
    assert reparam_tau(BrownResnickParams(1.0, 2.0, 0.3, 1.0)).matrix[0, 1] == pytest.approx(0)
    t = reparam_tau(BrownResnickParams(1.0, 2.0, 0.3, 1.0))
    assert t.tau11 == pytest.approx(t.tau22)
    assert not reparam_tau(BrownResnickParams(1.0, 2.0, 0.3, 1.2)).is_isotropic


def test_tau_inverse_rejects_indefinite():
    with pytest.raises(DomainError):
        tau_to_params(np.array([[1.0, 2.0], [2.0, 1.0]]), 1.0)


# --- margins ---------------------------------------------------------------------


def test_single_index_margin():
    for m in MODELS:
        assert float(m.margin((1,), np.array([0.7]))) == pytest.approx(0.7)


def test_logistic_reference():
    assert float(LogisticModel(0.5, 3).margin((0, 1), np.array([1.0, 1.0]))) == pytest.approx(
        math.sqrt(2), rel=1e-14)


def test_br_extremal_coefficient_formula():
    m = BrownResnickModel(SQUARE, BR_REF)
    for u, v in ((0, 1), (0, 3), (1, 2)):
        a = m.scale(u, v)
        assert float(m.margin((u, v), np.ones(2))) == pytest.approx(2 * ndtr(a / 2), abs=1e-12)


@pytest.mark.parametrize("idx,x,mean,se", [
    ((0, 1, 2), (1.0, 0.5, 2.0), 2.0884219644285915, 0.0007073484823073813),
    ((0, 1, 2, 3), (0.3, 1.2, 0.8, 1.0), 1.5240389508815906, 0.0005717452360021266),
    ((0, 1, 3), (1.0, 1.0, 1.0), 1.4555247591637397, 0.0004469041225915584),
    ((0, 1, 2, 3), (1.0, 1.0, 1.0, 1.0), 1.6112639153506347, 0.0004837260467291614),
])
def test_br_higher_margins_against_monte_carlo(idx, x, mean, se):
    # E max_j x_j exp(W_j - gamma_j) with W Gaussian anchored at the first site,
    # 4e6 draws from an independent script
    m = BrownResnickModel(SQUARE, BR_REF)
    assert abs(float(m.margin(idx, np.array(x))) - mean) < 4 * se


def test_margin_errors():
    m = MODELS[3]
    with pytest.raises(DomainError):
        m.margin((0, 1), np.array([-0.1, 1.0]))
    big = BrownResnickModel(SiteSet.grid(3, 2), BR_REF)
    with pytest.raises(DomainError):
        big.margin((0, 1, 2, 3, 4), np.ones(5))
    with pytest.raises(DomainError):
        m.margin((0, 0), np.ones(2))


positive = st.floats(0.01, 10.0)


@settings(max_examples=60, deadline=None)
@given(st.lists(positive, min_size=4, max_size=4), st.sampled_from([0.5, 2.0, 10.0]),
       st.integers(0, len(MODELS) - 1), st.integers(1, 4))
def test_homogeneity(x, t, which, size):
    m = MODELS[which]
    idx = tuple(range(size))
    x = np.array(x[:size])
    lx = float(m.margin(idx, x))
    assert abs(float(m.margin(idx, t * x)) - t * lx) <= 1e-10 * t * lx


@pytest.mark.parametrize("which", range(len(MODELS)))
def test_bounds(which):
    m = MODELS[which]
    rng = np.random.default_rng(which)
    for size in (2, 3, 4):
        x = rng.exponential(size=(1000, size)) * (rng.random((1000, size)) > 0.1)
        val = m.margin(tuple(range(size)), x)
        assert np.all(val >= x.max(axis=1) - 1e-12)
        assert np.all(val <= x.sum(axis=1) + 1e-12)


@pytest.mark.parametrize("which", range(len(MODELS)))
def test_margin_consistency(which):
    m = MODELS[which]
    rng = np.random.default_rng(10 + which)
    xy = rng.uniform(0.05, 2, (20, 2))
    for u, v in ((0, 1), (1, 3), (0, 2)):
        full = np.zeros((20, 4))
        full[:, u], full[:, v] = xy[:, 0], xy[:, 1]
        np.testing.assert_allclose(m.margin((0, 1, 2, 3), full), m.margin((u, v), xy),
                                   atol=1e-8)


@pytest.mark.parametrize("which", range(len(MODELS)))
def test_gradient_against_finite_differences(which):
    m = MODELS[which]
    rng = np.random.default_rng(20 + which)
    for size in (2, 3, 4):
        idx = tuple(range(size))
        x = rng.uniform(0.1, 3, (10, size))
        g = m.gradient(idx, x)
        assert np.all((g >= -1e-12) & (g <= 1 + 1e-12))
        for j in range(size):
            e = np.zeros(size)
            e[j] = 1e-6
            fd = (m.margin(idx, x + e) - m.margin(idx, x - e)) / 2e-6
            np.testing.assert_allclose(g[:, j], fd, atol=1e-5)
        np.testing.assert_allclose((g * x).sum(axis=1), m.margin(idx, x), rtol=1e-9)


def test_gradient_special_cases():
    g = LogisticModel(1.0, 3).gradient((0, 1, 2), np.array([0.2, 1.0, 3.0]))
    np.testing.assert_allclose(g, 1.0)
    m = BrownResnickModel(SQUARE, BR_REF)
    a = m.scale(0, 1)
    np.testing.assert_allclose(m.gradient((0, 1), np.ones(2)), ndtr(a / 2), rtol=1e-12)


def test_gradient_at_zero_is_one_sided():
    m = BrownResnickModel(SQUARE, BR_REF)
    with pytest.warns(OneSidedDerivativeWarning):
        g = m.gradient((0, 1), np.array([0.0, 1.0]))
    # l(x, 1) = 1 + o(x) near zero for a Husler-Reiss pair
    assert g[1] == pytest.approx(1.0, abs=1e-5)
    assert 0.0 <= g[0] <= 1e-4


# --- pair integrals ----------------------------------------------------------------


def test_psi_independence_and_comonotone_limits():
    pairs = [(0, 1), (1, 2), (0, 3)]
    np.testing.assert_allclose(psi(LogisticModel(1.0, 4), pairs), 1.0, atol=1e-9)
    np.testing.assert_allclose(psi(LogisticModel(1e-8, 4), pairs), 2 / 3, atol=1e-7)


def test_psi_br_against_quasi_random_oracle():
    # 2^23 scrambled Sobol points of the bivariate formula, computed once
    assert float(hr_pair_psi(1.0)) == pytest.approx(0.7519960611133686, abs=1e-5)


@pytest.mark.parametrize("a", [0.05, 0.4, 1.0, 2.5, 6.0])
def test_psi_closed_form_against_adaptive_quadrature(a):
    # symmetric, order-one homogeneous integrand: psi = (2/3) int_0^1 l(1, t) dt;
    # breakpoints resolve the ridge of width ~a at t = 1
    pts = sorted({min(max(1 - f * a, 1e-6), 1 - 1e-9) for f in (10, 2, 0.5, 0.1)})
    ref = integrate.quad(lambda t: _bivariate_hr(a, 1.0, t), 0, 1, points=pts,
                         epsabs=1e-14, epsrel=1e-13, limit=500)[0] * 2 / 3
    assert float(hr_pair_psi(a)) == pytest.approx(ref, abs=1e-11)


def test_generic_face_reduction_matches_closed_form():
    m = BrownResnickModel(SQUARE, BR_REF)
    closed = m.psi_pairs([(0, 1), (0, 3), (1, 2)])
    generic = [super(type(m), m).pair_psi(u, v) for u, v in ((0, 1), (0, 3), (1, 2))]
    np.testing.assert_allclose(closed, generic, atol=1e-9)


def test_psi_entries_in_range_and_deterministic():
    for m in MODELS:
        vals = psi(m, [(0, 1), (2, 3), (0, 3)])
        assert np.all((vals >= 2 / 3 - 1e-12) & (vals <= 1 + 1e-12))
        np.testing.assert_array_equal(vals, psi(m, [(0, 1), (2, 3), (0, 3)]))


def test_psi_requires_pairs():
    with pytest.raises(ValueError):
        psi(MODELS[0], [])


@pytest.mark.parametrize("a", [0.3, 1.0, 3.0])
def test_pair_row_closed_form(a):
    s = np.array([0.0, 0.1, 0.5, 1.0])
    h, c = hr_pair_row(a, s)
    for si, hi, ci in zip(s[1:], h[1:], c[1:]):
        ref = integrate.quad(lambda t: _bivariate_hr(a, si, t) if t > 0 else si, 0, 1,
                             epsabs=1e-13)[0]
        assert hi == pytest.approx(ref, abs=1e-10)
        eps = 1e-6
        dh = (hr_pair_row(a, si + eps)[0] - hr_pair_row(a, si - eps)[0]) / (2 * eps)
        assert ci == pytest.approx(float(dh), abs=1e-7)
    assert h[0] == 0.5 and c[0] == 0.0
    # the row integral integrates to psi
    val = integrate.quad(lambda t: float(hr_pair_row(a, t)[0]), 0, 1, epsabs=1e-12)[0]
    assert val == pytest.approx(float(hr_pair_psi(a)), abs=1e-9)


# --- Jacobian ------------------------------------------------------------------------


def test_logistic_jacobian_positive():
    J, full = psi_jacobian(get_family("logistic"), [0.5], SiteSet.line(4), [(0, 1), (2, 3)])
    assert full and np.all(J > 0)
    eps = 1e-3
    fd = (psi(LogisticModel(0.5 + eps, 4), [(0, 1)]) - psi(LogisticModel(0.5 - eps, 4),
                                                           [(0, 1)])) / (2 * eps)
    assert J[0, 0] == pytest.approx(float(fd[0]), rel=1e-5)


def test_isotropic_smith_jacobian_symmetry():
    g = SiteSet.grid(3, 3)
    pairs = [(0, 1), (1, 2), (0, 3), (4, 5), (0, 4), (2, 4)]
    J, _ = psi_jacobian(get_family("smith"), [1.0, 1.0, 0.0], g, pairs)
    np.testing.assert_allclose(J[0], J[1], atol=1e-9)
    np.testing.assert_allclose(J[0, [0, 1]], J[2, [1, 0]], atol=1e-9)


def test_br_jacobian_against_brute_force():
    theta = np.array([1.0, 3.0, 0.5, 0.5])
    pairs = [(0, 1), (0, 2), (0, 3), (1, 2)]
    fam = get_family("br")
    J, full = psi_jacobian(fam, theta, SQUARE, pairs)
    assert full

    def brute(th):
        p = BrownResnickParams(*th)
        out = []
        for u, v in pairs:
            a = pair_dependence_scale(p, SQUARE.coords[u], SQUARE.coords[v])
            out.append(integrate.dblquad(lambda y, x: _bivariate_hr(a, x, y), 0, 1, 0, 1,
                                         epsabs=1e-11, epsrel=1e-11)[0])
        return np.array(out)

    for j in range(4):
        h = 1e-3 * max(abs(theta[j]), 1)
        e = np.zeros(4)
        e[j] = h
        fd = (brute(theta + e) - brute(theta - e)) / (2 * h)
        np.testing.assert_allclose(J[:, j], fd, atol=1e-4)


def test_families_round_trip_free_coordinates():
    cases = {"logistic": [0.4], "smith": [1.0, 1.5, 0.5], "smith_iso": [2.0],
             "br": [1.5, 1.0, 0.25, 1.5], "br_tau": [1.2, 0.5, 0.8, -0.1], "br_iso": [0.7, 3.0]}
    for name, theta in cases.items():
        fam = get_family(name)
        np.testing.assert_allclose(fam.from_free(fam.to_free(np.array(theta))), theta,
                                   rtol=1e-12, atol=1e-12)
        assert fam.is_valid(np.array(theta))
    with pytest.raises(ValueError):
        get_family("schlather")


def test_block_logistic_tail_independence():
    m = BlockLogisticModel.regions(0.5, 10, 2)
    assert m.tail_independent((0, 1), (5, 6))
    assert not m.tail_independent((0, 1), (1, 6))
    x = np.array([0.3, 0.9])
    assert float(m.margin((0, 5), x)) == pytest.approx(1.2)


def test_psi_quadrature_error_carries_estimate():
    from pairstdf.quadrature import QuadratureError, adaptive_gl
    with pytest.raises(QuadratureError) as exc:
        adaptive_gl(lambda t: np.sign(t - 1 / 3), 0.0, 1.0, order=4, tol=1e-16, max_depth=3)
    assert exc.value.error_estimate > 0


def test_generic_pair_psi_uses_quad_config():
    m = BlockLogisticModel(0.5, [0, 0, 0])
    loose = m.pair_psi(0, 1, QuadConfig(tol=1e-4))
    tight = m.pair_psi(0, 1, QuadConfig(tol=1e-12))
    assert abs(loose - tight) < 1e-4
