import math

import numpy as np
import pytest
import scipy.linalg
from numpy.testing import assert_allclose, assert_array_equal

from vpei.errors import DimensionError, UnsupportedError, UsageError
from vpei.tableau import (
    TABLEAUX,
    ButcherTableau,
    build_exp_coefficients,
    equal_node_two_stage,
    explicit_euler,
    exponential_grid,
    gauss_legendre,
    get_tableau,
    load_tableau,
    order_check,
    parse_tableau,
    symplecticity_residual,
)

GAUSS2_TEXT = """\
# two-stage Gauss-Legendre
2
1/2 - sqrt(3)/6 | 1/4 1/4 - sqrt(3)/6
1/2 + sqrt(3)/6 | 1/4 + sqrt(3)/6 1/4
1/2 1/2
"""


def test_gauss_legendre_coefficients():
    t = gauss_legendre(2)
    r = math.sqrt(3) / 6
    assert_allclose(t.c, [0.5 - r, 0.5 + r], rtol=0, atol=1e-16)
    assert_allclose(t.A, [[0.25, 0.25 - r], [0.25 + r, 0.25]], rtol=0, atol=1e-16)
    assert_array_equal(gauss_legendre(1).A, [[0.5]])
    with pytest.raises(UnsupportedError):
        gauss_legendre(3)


@pytest.mark.parametrize(
    ("tableau", "order"),
    [(gauss_legendre(1), 2), (gauss_legendre(2), 4), (equal_node_two_stage(), 2), (explicit_euler(), 1)],
)
def test_order_conditions(tableau, order):
    assert order_check(tableau, order)
    if order < 4:
        assert not order_check(tableau, order + 1)


def test_order_check_range():
    with pytest.raises(UnsupportedError):
        order_check(gauss_legendre(2), 5)
    with pytest.raises(UnsupportedError):
        order_check(gauss_legendre(2), 0)


def test_symplecticity_and_gate():
    for t in (gauss_legendre(1), gauss_legendre(2), equal_node_two_stage()):
        assert symplecticity_residual(t) < 1e-15
        assert t.is_ssei
    euler = explicit_euler()
    assert symplecticity_residual(euler) == pytest.approx(1.0)
    assert not euler.is_ssei
    assert euler.explicit


def test_equal_nodes():
    assert equal_node_two_stage().equal_nodes
    assert gauss_legendre(1).equal_nodes
    assert not gauss_legendre(2).equal_nodes


def test_zero_weight_fails_gate():
    t = ButcherTableau(c=[0.0, 1.0], b=[0.0, 1.0], A=[[0.0, 0.0], [0.5, 0.5]])
    assert not t.nonzero_weights
    assert not t.is_ssei


def test_tableau_shapes_are_validated():
    with pytest.raises(DimensionError):
        ButcherTableau(c=[0.5, 0.5], b=[1.0], A=[[0.5]])


def test_parse_tableau_reads_exact_entries():
    t = parse_tableau(GAUSS2_TEXT, name="g2")
    reference = gauss_legendre(2)
    assert t.name == "g2"
    assert_allclose(t.A, reference.A, rtol=0, atol=1e-16)
    assert_allclose(t.c, reference.c, rtol=0, atol=1e-16)
    assert_array_equal(t.b, reference.b)


def test_printed_tableau_parses_back():
    t = parse_tableau(str(gauss_legendre(2)))
    assert_allclose(t.A, gauss_legendre(2).A, rtol=0, atol=1e-16)


@pytest.mark.parametrize(
    "text",
    ["", "x", "2\n0.5 | 0.5\n1", "1\n0.5 0.5\n1", "1\n0.5 | 0.5\n1 2", "1\n0.5 | y\n1"],
)
def test_parse_tableau_rejects_malformed_text(text):
    with pytest.raises(UsageError):
        parse_tableau(text)


def test_load_tableau(tmp_path):
    path = tmp_path / "gauss2.tab"
    path.write_text(GAUSS2_TEXT)
    t = load_tableau(path)
    assert t.name == "gauss2"
    assert t.is_ssei
    with pytest.raises(UsageError):
        load_tableau(tmp_path / "missing.tab")


def test_named_tableaux():
    assert get_tableau("midpoint").s == 1
    assert get_tableau("equal-node2").equal_nodes
    with pytest.raises(UsageError):
        get_tableau("rk4")


def test_coefficients_reduce_to_tableau_at_zero_k():
    t = gauss_legendre(2)
    coefficients = build_exp_coefficients(t, 0.1, np.zeros((3, 3)))
    for i in range(2):
        assert_array_equal(coefficients.bbar[i], t.b[i] * np.eye(3))
        for j in range(2):
            assert_array_equal(coefficients.abar[i, j], t.A[i, j] * np.eye(3))


def test_coefficients_follow_the_exponential():
    t = gauss_legendre(2)
    h = 0.05
    K = np.array([[0.0, 1.0], [-400.0, 0.0]])
    coefficients = build_exp_coefficients(t, h, K)
    assert (coefficients.s, coefficients.n) == (2, 2)
    assert_allclose(coefficients.step_exponential, scipy.linalg.expm(h * K), atol=1e-13)
    for i in range(2):
        assert_allclose(
            coefficients.bbar[i], t.b[i] * scipy.linalg.expm((1 - t.c[i]) * h * K), atol=1e-13
        )
        assert_allclose(
            coefficients.node_exponentials[i], scipy.linalg.expm(t.c[i] * h * K), atol=1e-13
        )
        for j in range(2):
            expected = t.A[i, j] * scipy.linalg.expm((t.c[i] - t.c[j]) * h * K)
            assert_allclose(coefficients.abar[i, j], expected, atol=1e-13)


def test_exponential_grid_has_identity_diagonal():
    E = exponential_grid(0.1, np.array([[0.0, 1.0], [-1.0, 0.0]]), gauss_legendre(2).c)
    assert_array_equal(E[0, 0], np.eye(2))
    assert_array_equal(E[1, 1], np.eye(2))
    assert_allclose(E[0, 1] @ E[1, 0], np.eye(2), atol=1e-15)


@pytest.mark.parametrize("name", list(TABLEAUX))
def test_symplectic_tableaux_are_anti_similar_to_their_transpose(name):
    t = TABLEAUX[name]()
    assert t.symplectic
    assert np.all(t.b != 0)
    D = np.diag(t.b)
    lhs = D @ (t.A - np.outer(np.ones(t.s), t.b)) @ np.linalg.inv(D)
    assert_allclose(lhs, -t.A.T, rtol=0, atol=1e-15)


@pytest.mark.parametrize("name", list(TABLEAUX))
def test_exponential_coefficients_pair_to_plain_products(name):
    t = TABLEAUX[name]()
    K = np.random.default_rng(3).standard_normal((3, 3))
    abar = build_exp_coefficients(t, 0.2, K).abar
    for i in range(t.s):
        for j in range(t.s):
            assert_allclose(
                abar[i, j] @ abar[j, i], t.A[i, j] * t.A[j, i] * np.eye(3), rtol=0, atol=1e-14
            )
