import math
from fractions import Fraction

import numpy as np
import pytest
import scipy.special
from numpy.testing import assert_allclose, assert_array_equal

from vpei.errors import PreconditionError, ReferenceUnreliableError, UsageError
from vpei.problems import (
    PROBLEMS,
    charged_particle,
    cubic_oscillator,
    divergence_free_3d,
    duffing,
    get_problem,
    helmholtz_duffing,
    jacobi_elliptic,
    reference_solution,
    relative_global_error,
    synthetic_f_infinity,
)


@pytest.mark.parametrize("m", [0.0, 0.0035, 0.3, 0.7, 0.99])
@pytest.mark.parametrize("u", [0.0, 0.4, 3.0, 41.5, 200.0])
def test_jacobi_elliptic_matches_scipy(u, m):
    sn, cn, dn, _ = scipy.special.ellipj(u, m * m)
    assert_allclose(jacobi_elliptic(u, m), (sn, cn, dn), atol=1e-11)


def test_jacobi_elliptic_identities():
    sn, cn, dn = jacobi_elliptic(1.3, 0.6)
    assert sn**2 + cn**2 == pytest.approx(1.0, abs=1e-15)
    assert dn**2 + 0.36 * sn**2 == pytest.approx(1.0, abs=1e-15)
    with pytest.raises(PreconditionError):
        jacobi_elliptic(1.0, 1.0)
    with pytest.raises(PreconditionError):
        jacobi_elliptic(1.0, -0.1)


def test_duffing_exact_solution_solves_the_equation():
    spec = duffing()
    assert_allclose(spec.exact(0.0), spec.y0, atol=1e-15)
    for t in (0.3, 7.0):
        delta = 1e-6
        derivative = (spec.exact(t + delta) - spec.exact(t - delta)) / (2 * delta)
        assert_allclose(derivative, spec.problem.f(spec.exact(t)), rtol=1e-6, atol=1e-4)


@pytest.mark.parametrize("name", list(PROBLEMS))
def test_jacobians_match_finite_differences(name):
    p = get_problem(name).problem
    y = np.linspace(0.35, 0.8, p.n)
    J = p.g_jac(y)
    eps = 1e-6
    columns = []
    for j in range(p.n):
        e = np.zeros(p.n)
        e[j] = eps
        columns.append((p.g(y + e) - p.g(y - e)) / (2 * eps))
    assert_allclose(J, np.column_stack(columns), atol=1e-6 * (1 + np.abs(J).max()))


@pytest.mark.parametrize("name", list(PROBLEMS))
def test_divergence_of_benchmark_fields(name):
    spec = get_problem(name)
    trace = np.trace(spec.problem.f_jac(spec.y0))
    expected = np.trace(spec.problem.K)
    assert trace == pytest.approx(expected, abs=1e-12)


def test_benchmark_defaults():
    assert duffing().step_sizes == (Fraction(1, 2), Fraction(1, 10), Fraction(1, 50), Fraction(1, 200))
    assert duffing().error_steps == tuple(Fraction(1, 10) / 2**i for i in range(1, 5))
    assert divergence_free_3d().error_steps[0] == Fraction(1, 40)
    assert helmholtz_duffing().horizon == 200.0
    assert charged_particle().partitioned is None
    assert charged_particle(0.0).partitioned is not None
    assert cubic_oscillator().partitioned is not None


def test_damped_oscillator_embedding():
    spec = helmholtz_duffing()
    assert_array_equal(spec.problem.K, [[0.0, 1.0], [-200.0, -0.02]])
    assert_allclose(spec.problem.g(np.array([2.0, 0.0])), [0.0, -(-0.5 * 4 + 8)])


def test_charged_particle_is_singular_at_the_axis():
    spec = charged_particle()
    with pytest.raises(PreconditionError):
        spec.problem.g(np.array([0.0, 0.0, 1.0, 0.0, 0.0, 0.0]))


def test_synthetic_fields_need_even_blocks():
    with pytest.raises(PreconditionError):
        synthetic_f_infinity(m=3)


def test_get_problem():
    assert get_problem("duffing").name == "duffing"
    with pytest.raises(UsageError):
        get_problem("lorenz")


def test_relative_global_error():
    assert relative_global_error([1.0, 1.0], [1.0, 0.0]) == 1.0
    assert relative_global_error([np.nan, 0.0], [1.0, 0.0]) == math.inf


def test_reference_uses_the_exact_solution():
    spec = duffing()
    assert_array_equal(reference_solution(spec, 10.0, 0.05), spec.exact(10.0))


def test_reference_refinement():
    spec = helmholtz_duffing()
    y = reference_solution(spec, 1.0, 0.1, quality=2, rtol=None)
    assert np.all(np.isfinite(y))
    with pytest.raises(ReferenceUnreliableError) as info:
        reference_solution(spec, 1.0, 0.5, quality=1, rtol=1e-16)
    assert info.value.difference > 1e-16
