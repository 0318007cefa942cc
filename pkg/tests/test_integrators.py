import numpy as np
import pytest
import scipy.linalg
from numpy.testing import assert_allclose, assert_array_equal

from vpei.errors import DivergenceError, IntegrationError, PreconditionError
from vpei.integrators import (
    STOP_DIVERGED,
    STOP_MAX_ITER,
    STOP_STAGNATION,
    STOP_TOLERANCE,
    ERKNStepper,
    PartitionedProblem,
    RKNStepper,
    RKStepper,
    SecondOrderEIStepper,
    SecondOrderProblem,
    SolverConfig,
    SSEIStepper,
    VectorFieldProblem,
    erkn_step,
    fixed_point_solve,
    integrate,
    rk_step,
    rkn_step,
    ssei_step,
    step_count,
)
from vpei.problems import cubic_oscillator, duffing, helmholtz_duffing, relative_global_error
from vpei.tableau import equal_node_two_stage, gauss_legendre


def linear_problem(K):
    n = len(K)
    return VectorFieldProblem(
        K=np.asarray(K, dtype=float),
        g=lambda y: np.zeros(n),
        g_jac=lambda y: np.zeros((n, n)),
    )


def blowup_problem():
    return VectorFieldProblem(
        K=np.zeros((1, 1)), g=lambda y: y**2, g_jac=lambda y: np.diag(2 * y)
    )


def test_fixed_point_converges_on_contraction():
    result = fixed_point_solve(lambda x: 0.5 * x + 1.0, np.zeros((1, 1)), SolverConfig(h=0.1))
    assert result.converged
    assert result.reason == STOP_TOLERANCE
    assert_allclose(result.stages, [[2.0]], rtol=1e-15)


def test_fixed_point_iteration_limit_is_not_an_error():
    cfg = SolverConfig(h=0.1, fp_max_iter=3)
    result = fixed_point_solve(lambda x: 0.5 * x + 1.0, np.zeros((1, 1)), cfg)
    assert not result.converged
    assert result.iterations == 3
    assert result.reason == STOP_MAX_ITER
    assert result.increment_norm == pytest.approx(0.25)


def test_fixed_point_stagnation():
    calls = []

    def wobble(x):
        calls.append(None)
        return np.full_like(x, 1.0 + (-1) ** len(calls) * 1e-15)

    result = fixed_point_solve(wobble, np.zeros((1, 1)), SolverConfig(h=0.1))
    assert result.converged
    assert result.reason == STOP_STAGNATION
    assert result.iterations == 3


def test_fixed_point_divergence_names_the_stage():
    def stage_map(x):
        return np.array([[0.5], [10.0 * x[1, 0] + 1.0]])

    with pytest.raises(DivergenceError) as info:
        fixed_point_solve(stage_map, np.zeros((2, 1)), SolverConfig(h=0.1))
    assert info.value.stage == 1
    assert info.value.iteration > 1


def test_solver_config_validation():
    with pytest.raises(PreconditionError):
        SolverConfig(h=0.0)
    with pytest.raises(PreconditionError):
        SolverConfig(h=0.1, fp_max_iter=0)
    with pytest.raises(PreconditionError):
        SolverConfig(h=0.1, fp_tol=0.0)


@pytest.mark.parametrize("s", [1, 2])
def test_ssei_is_exact_on_linear_problems(s):
    K = np.array([[0.0, 1.0], [-400.0, 0.0]])
    y = np.array([0.3, -2.0])
    record = ssei_step(linear_problem(K), gauss_legendre(s), SolverConfig(h=0.1), y)
    assert record.iterations == 1
    assert_allclose(record.y_next, scipy.linalg.expm(0.1 * K) @ y, rtol=1e-13, atol=1e-12)


def test_ssei_with_zero_linear_part_is_runge_kutta():
    p = duffing().problem
    as_nonlinear = VectorFieldProblem(K=np.zeros((2, 2)), g=p.f, g_jac=p.f_jac)
    cfg = SolverConfig(h=0.01)
    y = np.array([0.4, 18.0])
    ssei = ssei_step(as_nonlinear, gauss_legendre(2), cfg, y)
    rk = rk_step(p, gauss_legendre(2), cfg, y)
    assert_allclose(ssei.y_next, rk.y_next, rtol=1e-13)


def test_midpoint_ssei_is_second_order_on_duffing():
    spec = duffing()
    errors = []
    for h in (0.025, 0.0125):
        stepper = SSEIStepper(spec.problem, gauss_legendre(1), SolverConfig(h=h))
        y = integrate(stepper, spec.y0, 1.0).final
        errors.append(relative_global_error(y, spec.exact(1.0)))
    assert errors[0] / errors[1] == pytest.approx(4.0, rel=0.25)


def test_rk_step_records_divergence():
    record = rk_step(blowup_problem(), gauss_legendre(1), SolverConfig(h=1.0), np.array([10.0]))
    assert record.stop_reason == STOP_DIVERGED
    assert not record.converged
    assert np.isnan(record.y_next).all()

    after = rk_step(blowup_problem(), gauss_legendre(1), SolverConfig(h=1.0), record.y_next)
    assert after.stop_reason == STOP_DIVERGED
    assert after.iterations == 0


def test_ssei_divergence_raises_and_integrate_keeps_partial():
    stepper = SSEIStepper(blowup_problem(), gauss_legendre(1), SolverConfig(h=1.0))
    with pytest.raises(DivergenceError):
        stepper.step(np.array([10.0]))
    with pytest.raises(IntegrationError) as info:
        integrate(stepper, np.array([10.0]), 3.0)
    assert info.value.step == 0
    assert info.value.partial.states.shape == (1, 1)


def test_integrate_records_every_step():
    spec = duffing()
    stepper = SSEIStepper(spec.problem, gauss_legendre(1), SolverConfig(h=0.1))
    trajectory = integrate(stepper, spec.y0, 1.0)
    assert trajectory.states.shape == (11, 2)
    assert len(trajectory.records) == 10
    assert_allclose(trajectory.times[-1], 1.0)
    assert trajectory.nonconverged == 0
    assert trajectory.diverged == 0
    assert trajectory.iterations >= 10

    empty = integrate(stepper, spec.y0, 0.0)
    assert_array_equal(empty.final, spec.y0)
    assert empty.records == []


def test_step_count():
    assert step_count(0.02, 100.0) == 5000
    assert step_count(0.1, 0.0) == 0
    with pytest.raises(PreconditionError):
        step_count(0.3, 1.0)
    with pytest.raises(PreconditionError):
        step_count(0.1, -1.0)


def test_second_order_stepper_matches_first_order_ssei():
    spec = helmholtz_duffing()
    cfg = SolverConfig(h=0.01)
    first = SSEIStepper(spec.problem, gauss_legendre(2), cfg)
    second = SecondOrderEIStepper(spec.second_order, gauss_legendre(2), cfg)
    y = spec.y0
    for _ in range(20):
        expected = first.step(y).y_next
        assert_allclose(second.step(y).y_next, expected, rtol=1e-11, atol=1e-11)
        y = expected


def test_second_order_stepper_without_stiffness_uses_phi_functions():
    problem = SecondOrderProblem(
        N=np.array([[0.0, 1.0], [-1.0, 0.0]]),
        Omega=np.zeros((2, 2)),
        gradV1=lambda q: q**3,
        gradV1_jac=lambda q: np.diag(3 * q**2),
    )
    cfg = SolverConfig(h=0.05)
    y = np.array([0.3, -0.2, 0.5, 0.1])
    second = SecondOrderEIStepper(problem, gauss_legendre(2), cfg).step(y)
    first = SSEIStepper(problem.embedding(), gauss_legendre(2), cfg).step(y)
    assert_allclose(second.y_next, first.y_next, atol=1e-12)


def test_non_commuting_second_order_problem_falls_back_to_flat_exponential():
    problem = SecondOrderProblem(
        N=np.array([[0.0, 1.0], [-1.0, 0.0]]),
        Omega=np.diag([1.0, 4.0]),
        gradV1=lambda q: q**3,
        gradV1_jac=lambda q: np.diag(3 * q**2),
    )
    cfg = SolverConfig(h=0.05)
    y = np.array([0.3, -0.2, 0.5, 0.1])
    second = SecondOrderEIStepper(problem, gauss_legendre(1), cfg).step(y)
    first = SSEIStepper(problem.embedding(), gauss_legendre(1), cfg).step(y)
    assert_allclose(second.y_next, first.y_next, atol=1e-12)


def test_erkn_matches_first_order_ssei():
    spec = duffing()
    cfg = SolverConfig(h=0.01)
    y = spec.y0
    expected = ssei_step(spec.problem, gauss_legendre(2), cfg, y).y_next
    record = erkn_step(spec.partitioned, gauss_legendre(2), cfg, y)
    assert_allclose(record.y_next, expected, rtol=1e-12, atol=1e-11)


def test_equal_node_nystrom_steps_are_explicit():
    spec = cubic_oscillator()
    cfg = SolverConfig(h=0.05)
    for tableau in (gauss_legendre(1), equal_node_two_stage()):
        assert erkn_step(spec.partitioned, tableau, cfg, spec.y0).iterations == 1
        assert rkn_step(spec.partitioned, tableau, cfg, spec.y0).iterations == 1


def test_full_stages_reconstruct_velocities():
    spec = duffing()
    cfg = SolverConfig(h=0.01)
    y = np.array([0.2, 19.0])
    stepper = ERKNStepper(spec.partitioned, gauss_legendre(2), cfg)
    record = stepper.step(y)
    stages = stepper.full_stages(y, record)
    expected = SSEIStepper(spec.problem, gauss_legendre(2), cfg).step(y).stages
    assert stages.shape == (2, 2)
    assert_allclose(stages, expected, rtol=1e-12, atol=1e-11)


def test_rkn_needs_zero_stiffness():
    spec = duffing()
    with pytest.raises(PreconditionError):
        RKNStepper(spec.partitioned, gauss_legendre(1), SolverConfig(h=0.1))
    folded = spec.partitioned.without_linear_part()
    assert not folded.Omega.any()
    q = np.array([0.3])
    assert_allclose(folded.gtilde(q), spec.partitioned.gtilde(q) - spec.partitioned.Omega @ q)


def test_to_partitioned_needs_zero_damping():
    with pytest.raises(PreconditionError):
        helmholtz_duffing().second_order.to_partitioned()


def test_rk_first_order_form_has_no_linear_part():
    spec = duffing()
    stepper = RKStepper(spec.problem, gauss_legendre(1), SolverConfig(h=0.1))
    assert not stepper.first_order.K.any()
    y = np.array([0.1, 2.0])
    assert_allclose(stepper.first_order.g(y), spec.problem.f(y))


def test_embeddings():
    p = PartitionedProblem(
        Omega=np.array([[4.0]]), gtilde=lambda q: -(q**3), gtilde_jac=lambda q: np.diag(-3 * q**2)
    )
    first = p.embedding()
    assert_array_equal(first.K, [[0.0, 1.0], [-4.0, 0.0]])
    assert_allclose(first.f(np.array([2.0, 1.0])), [1.0, -16.0])


def test_nystrom_midpoint_by_hand():
    problem = PartitionedProblem(
        Omega=np.zeros((1, 1)), gtilde=lambda q: -q, gtilde_jac=lambda q: -np.eye(1)
    )
    record = rkn_step(problem, gauss_legendre(1), SolverConfig(h=0.1), np.array([1.0, 0.0]))
    assert_allclose(record.y_next, [0.995, -0.1], rtol=0, atol=1e-15)


def test_gauss_ssei_step_follows_the_exact_duffing_solution():
    spec = duffing()
    h = 1e-3
    record = ssei_step(spec.problem, gauss_legendre(2), SolverConfig(h=h), spec.y0)
    assert relative_global_error(record.y_next, spec.exact(h)) <= 1e-12
