"""Weighted orthonormal basis on the source interval.

The frozen literals below were derived independently with exact symbolic
Gram-Schmidt on {x0^n exp(x0)} in L2(-1, 1) (sympy, exact integrals of
x^k exp(2x), then evaluated to 17 significant digits):

    psi_0(0) = 1 / sqrt(sinh 2) = 0.52509100618062695
    psi_1(0)                    = -0.67641922008529085
    psi_2(0)                    = -0.40885455460037569
    M[0, 1] = 2.3974669038519443
    M[0, 2] = 2.4255076360276344
    M[1, 2] = 3.8146409831201621
    integrals of psi_n: 1.2341751544701950, -0.66361909459760052,
                        0.18791566283335711
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from waveinv.basis import BasisSet, build_basis, choose_quadrature, eval_basis
from waveinv.errors import ConfigError, NumericalError

PSI_AT_ZERO = [0.52509100618062695, -0.67641922008529085, -0.40885455460037569]
M_UPPER = {(0, 1): 2.3974669038519443, (0, 2): 2.4255076360276344, (1, 2): 3.8146409831201621}
MOMENTS = [1.2341751544701950, -0.66361909459760052, 0.18791566283335711]


def test_values_match_symbolic_oracle(basis3):
    psi, _ = basis3.eval(np.array([0.0]))
    np.testing.assert_allclose(psi[0], PSI_AT_ZERO, rtol=0, atol=5e-15)


def test_m_matrix_matches_symbolic_oracle(basis3):
    for (m, n), val in M_UPPER.items():
        np.testing.assert_allclose(basis3.M[m, n], val, rtol=1e-13)


def test_moments_match_symbolic_oracle(basis3):
    np.testing.assert_allclose(basis3.moments(), MOMENTS, rtol=1e-13)


@pytest.mark.parametrize("N,d", [(1, 1.0), (3, 1.0), (6, 1.0), (4, 0.4), (6, 0.4)])
def test_gram_identity(N, d):
    b = build_basis(N, d)
    np.testing.assert_allclose(b.gram(), np.eye(N), rtol=0, atol=1e-12)


@pytest.mark.parametrize("N,d", [(3, 1.0), (6, 1.0), (6, 0.4)])
def test_m_unit_upper_triangular(N, d):
    b = build_basis(N, d)
    np.testing.assert_allclose(np.diag(b.M), 1.0, rtol=0, atol=1e-10)
    assert np.max(np.abs(np.tril(b.M, -1))) < 1e-10


def test_m_invertible_and_well_conditioned():
    b = build_basis(6, 1.0)
    # unit triangular: determinant exactly 1 up to round-off
    sign, logdet = np.linalg.slogdet(b.M)
    assert sign == 1.0
    np.testing.assert_allclose(logdet, 0.0, atol=1e-10)
    # entries grow with order but the inverse stays computable
    assert np.linalg.cond(b.M) < 1e6


def test_derivative_tabulation_consistent(basis3):
    # dpsi_q from the coefficient recurrence vs a central difference of eval
    x = basis3.quad_nodes
    h = 1e-6
    psi_p, _ = basis3._eval_raw(x + h)
    psi_m, _ = basis3._eval_raw(x - h)
    fd = (psi_p - psi_m) / (2 * h)
    np.testing.assert_allclose(basis3.dpsi_q, fd, rtol=1e-8, atol=1e-8)


def test_eval_vector_shapes(basis3):
    x = np.linspace(-1.0, 1.0, 7).reshape(7, 1)
    psi, dpsi = basis3.eval(x)
    assert psi.shape == (7, 1, 3)
    assert dpsi.shape == (7, 1, 3)


def test_eval_outside_interval_rejected(basis3):
    with pytest.raises(ConfigError):
        basis3.eval(1.5)


def test_project_inverts_eval(basis3):
    # a function already in the span projects back to its coefficients
    rng = np.random.default_rng(7)
    coef = rng.standard_normal(3)
    samples = basis3.psi_q @ coef
    np.testing.assert_allclose(basis3.project(samples), coef, rtol=1e-12, atol=1e-13)


def test_project_batch_axis(basis3):
    rng = np.random.default_rng(8)
    coefs = rng.standard_normal((5, 3))
    samples = coefs @ basis3.psi_q.T  # (5, K)
    out = basis3.project(samples)
    assert out.shape == (5, 3)
    np.testing.assert_allclose(out, coefs, rtol=1e-12, atol=1e-13)


def test_quadrature_integrates_weighted_monomials():
    nodes, weights = choose_quadrature(3, 1.0)
    # exact antiderivative check for int x exp(2x) on [-1, 1]
    val = float(weights @ (nodes * np.exp(2 * nodes)))
    exact = (np.exp(2) + 3 * np.exp(-2)) / 4
    np.testing.assert_allclose(val, exact, rtol=1e-13)
    assert np.all(np.abs(nodes) < 1.0)
    assert np.all(weights > 0)


def test_build_rejects_bad_args():
    with pytest.raises(ConfigError):
        build_basis(0, 1.0)
    with pytest.raises(ConfigError):
        build_basis(3, -1.0)


def test_orthonormality_holds_well_past_production_order():
    # double-pass Gram-Schmidt keeps the family orthonormal at the nodes
    # far beyond N = 6; the breakdown guard is defensive only
    b = build_basis(12, 1.0)
    assert float(np.abs(b.gram() - np.eye(12)).max()) < 1e-12


def test_functional_wrapper(basis3):
    psi_a, dpsi_a = eval_basis(basis3, 0.3)
    psi_b, dpsi_b = basis3.eval(0.3)
    np.testing.assert_array_equal(psi_a, psi_b)
    np.testing.assert_array_equal(dpsi_a, dpsi_b)


@settings(max_examples=40, deadline=None)
@given(x0=st.floats(min_value=-0.999, max_value=0.999, allow_nan=False))
def test_m_is_derivative_gram(x0):
    # M[m, n] = <psi_n', psi_m> implies d/dx0 of the basis vector lies in
    # the span with coefficients given by the columns of M plus a residual
    # orthogonal to the span; spot-check the defining inner products
    b = build_basis(3, 1.0)
    approx = (b.psi_q * b.quad_weights[:, None]).T @ b.dpsi_q
    np.testing.assert_allclose(approx, b.M, rtol=0, atol=1e-12)
    psi, dpsi = b.eval(x0)
    assert np.all(np.isfinite(psi)) and np.all(np.isfinite(dpsi))


def test_scaling_with_interval_width():
    # psi_0 = exp(x) / ||exp||: closed form for any d
    for d in (0.3, 1.0, 2.0):
        b = build_basis(1, d)
        psi, _ = b.eval(0.0)
        np.testing.assert_allclose(psi[0], 1.0 / np.sqrt(np.sinh(2 * d)), rtol=1e-13)
