import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from wideflow import constitutive as cv
from wideflow.constitutive import ConstitutiveParams, ParameterError


def gauss_potential(S, A, n=64):
    """Oracle: int_0^1 S(lam A) . A dlam by Gauss-Legendre quadrature."""
    x, w = np.polynomial.legendre.leggauss(n)
    lam = 0.5 * (x + 1.0)
    out = 0.0
    for l_, w_ in zip(lam, w):
        out = out + 0.5 * w_ * cv.sym_dot(S(l_ * A), A)
    return out


def fd_gradient_sym(f, A, h=1e-6):
    """Central differences w.r.t. the full matrix, mapped to triple storage."""
    g = np.zeros(3)
    for i, scale in ((0, 1.0), (1, 1.0), (2, 0.5)):
        e = np.zeros(3)
        e[i] = h
        g[i] = scale * (f(A + e) - f(A - e)) / (2 * h)
    return g


def test_zero_tensor_gives_zero():
    p = ConstitutiveParams()
    assert np.all(cv.stress_bulk(np.zeros(3), p) == 0)
    assert np.all(cv.stress_boundary(np.zeros(2), p) == 0)
    assert cv.potential_bulk(np.zeros(3), p) == 0
    assert cv.potential_boundary(np.zeros(2), p) == 0


def test_r4_bulk_value():
    p = ConstitutiveParams(r=4.0, sigma2=1.0, sigma_r=1.0)
    S = cv.stress_bulk(np.array([1.0, -1.0, 0.0]), p, stabilized=False)
    assert np.allclose(S, [6.0, -6.0, 0.0], rtol=0, atol=1e-14)


def test_r4_boundary_value():
    p = ConstitutiveParams(r=4.0, rho2=1.0, rho_r=1.0)
    s = cv.stress_boundary(np.array([1.0, 0.0]), p, stabilized=False)
    assert np.allclose(s, [4.0, 0.0], rtol=0, atol=1e-14)


def test_linear_potential_value():
    p = ConstitutiveParams(r=2.0, sigma2=0.5)
    A = np.array([1.0, -1.0, 0.0])  # |A|^2 = 2
    assert cv.potential_bulk(A, p, stabilized=False) == pytest.approx(1.0, abs=1e-15)
    q = ConstitutiveParams(r=2.0, rho2=0.5)
    assert cv.potential_boundary(np.array([1.0, 1.0]), q, stabilized=False) == pytest.approx(1.0)


def test_linear_law_is_linear():
    p = ConstitutiveParams(r=2.0, sigma2=0.3)
    A = np.array([0.2, -0.7, 1.1])
    assert np.allclose(cv.stress_bulk(A, p, stabilized=False), 0.6 * A, rtol=1e-15)


@pytest.mark.parametrize("stab", [False, True])
def test_stress_is_potential_gradient_r3(rng, stab):
    p = ConstitutiveParams(r=3.0, sigma2=0.5, sigma_r=0.25, eps=0.2)
    for _ in range(20):
        A = rng.normal(size=3)
        g = fd_gradient_sym(lambda X: cv.potential_bulk(X, p, stab), A)
        S = cv.stress_bulk(A, p, stab)
        assert np.linalg.norm(g - S) <= 1e-6 * np.linalg.norm(S)


@pytest.mark.parametrize("stab", [False, True])
def test_boundary_stress_is_potential_gradient(rng, stab):
    p = ConstitutiveParams(r=2.5, eps=0.3)
    for _ in range(20):
        u = rng.normal(size=2)
        g = np.array([(cv.potential_boundary(u + h, p, stab) - cv.potential_boundary(u - h, p, stab))
                      / 2e-6 for h in (np.array([1e-6, 0]), np.array([0, 1e-6]))])
        s = cv.stress_boundary(u, p, stab)
        assert np.linalg.norm(g - s) <= 1e-6 * np.linalg.norm(s)


def test_potential_matches_quadrature_r3(rng):
    p = ConstitutiveParams(r=3.0, sigma2=0.5, sigma_r=0.25)
    A = rng.normal(size=(50, 3))
    ref = gauss_potential(lambda X: cv.stress_bulk(X, p, False), A)
    val = cv.potential_bulk(A, p, False)
    assert np.max(np.abs(val - ref) / np.abs(ref)) <= 1e-10


def test_boundary_potential_matches_quadrature(rng):
    p = ConstitutiveParams(r=2.5, eps=0.1)
    u = rng.normal(size=(50, 2))
    x, w = np.polynomial.legendre.leggauss(64)
    ref = sum(0.5 * wi * np.sum(cv.stress_boundary(0.5 * (xi + 1) * u, p) * u, axis=-1)
              for xi, wi in zip(x, w))
    assert np.max(np.abs(cv.potential_boundary(u, p) - ref) / ref) <= 1e-10


def test_potential_small_argument_accuracy():
    # expm1/log1p form keeps relative accuracy where the naive difference cancels
    p = ConstitutiveParams(r=2.5, sigma2=0.1, sigma_r=0.1)
    A = np.array([1e-7, 0.0, 0.0])
    ref = gauss_potential(lambda X: cv.stress_bulk(X, p, False), A)
    assert abs(cv.potential_bulk(A, p, False) / ref - 1) < 1e-12


@given(st.floats(0.0, 2 * np.pi), st.lists(st.floats(-5, 5), min_size=3, max_size=3))
def test_potential_frame_indifference(theta, a):
    p = ConstitutiveParams(r=2.7)
    A = np.array([[a[0], a[2]], [a[2], a[1]]])
    R = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    B = R.T @ A @ R
    pa = cv.potential_bulk(np.array(a), p)
    pb = cv.potential_bulk(np.array([B[0, 0], B[1, 1], B[0, 1]]), p)
    assert abs(pa - pb) <= 1e-12 * max(1.0, abs(pa))


@given(st.lists(st.floats(-10, 10), min_size=6, max_size=6), st.sampled_from([2.0, 2.5, 3.0, 4.5]))
def test_monotonicity_property(ab, r):
    p = ConstitutiveParams(r=r, eps=0.05)
    A, B = np.array(ab[:3]), np.array(ab[3:])
    val = cv.sym_dot(cv.stress_bulk(A, p) - cv.stress_bulk(B, p), A - B)
    assert val >= -1e-12


@given(st.lists(st.floats(-10, 10), min_size=3, max_size=3))
def test_growth_bound(a):
    # C fitted once on this parameter set (largest ratio over a dense sample is ~2.2)
    p = ConstitutiveParams(r=2.5, eps=0.1)
    A = np.array(a)
    n = np.sqrt(cv.sym_norm2(A))
    S = np.sqrt(cv.sym_norm2(cv.stress_bulk(A, p)))
    bound = n + n ** (p.r - 1) + p.eps * n ** 3 + p.eps * n ** (p.q - 1)
    assert S <= 3.0 * bound + 1e-300


def test_increasing_sigma4_never_decreases_potential(rng):
    A = rng.normal(size=(100, 3)) * 3
    lo = cv.potential_bulk(A, ConstitutiveParams(sigma4=0.01))
    hi = cv.potential_bulk(A, ConstitutiveParams(sigma4=0.02))
    assert np.all(hi >= lo)


def test_validate_window_ok():
    rep = cv.validate_params(ConstitutiveParams(r=2.2, q=4.5))
    assert rep.in_window
    assert "r_below_window" not in rep.flags


def test_validate_linear_flag():
    rep = cv.validate_params(ConstitutiveParams(r=2.0))
    assert "linear_case" in rep.flags


def test_validate_subcritical_flag_nonfatal():
    rep = cv.validate_params(ConstitutiveParams(r=4.5, q=4.6))
    assert not rep.in_window
    assert "r_subcritical" in rep.flags


def test_validate_korn_check_reported():
    rep = cv.validate_params(ConstitutiveParams(), korn_c4=1.0)
    assert rep.flags["stabilization_c4"].startswith("contradicted")  # 0.01 <= 1/4
    rep2 = cv.validate_params(ConstitutiveParams(), korn_c4=0.01)
    assert rep2.flags["stabilization_c4"].startswith("not contradicted")


@pytest.mark.parametrize("kw", [dict(r=1.5), dict(sigma2=0.0), dict(rho_q=-1.0), dict(q=1.0)])
def test_fatal_parameters(kw):
    with pytest.raises(ParameterError):
        ConstitutiveParams(**kw)


def test_r_below_two_message_cites_boundary():
    with pytest.raises(ParameterError, match="r >= 2"):
        ConstitutiveParams(r=1.5)
