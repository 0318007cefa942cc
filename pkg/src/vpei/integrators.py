"""Exponential, Runge-Kutta and Nyström steppers with their stage solver.

Every stepper is prepared once for a (problem, tableau, config) triple and
then advanced with ``step``. States of second-order problems are the
stacked vector (q, q').
"""

from abc import ABC, abstractmethod
from collections.abc import Callable
from dataclasses import dataclass, field
from functools import cached_property
from typing import TYPE_CHECKING, Final, NamedTuple
import logging
import math

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import DivergenceError, IntegrationError, PreconditionError
from .matfun import (
    BlockMatrix,
    Matrix,
    as_square,
    commutes,
    exp_blocks,
    hadamard_kron,
    phi_all,
    phi_trig_pair,
    second_order_exp_blocks,
    second_order_matrix,
)
from .tableau import ButcherTableau, ExpCoefficients, build_exp_coefficients

if TYPE_CHECKING:
    from .vpcheck import ClassCertificate

logger = logging.getLogger(__name__)

State = NDArray[np.float64]

STOP_TOLERANCE: Final[str] = "tolerance"
STOP_STAGNATION: Final[str] = "stagnation"
STOP_MAX_ITER: Final[str] = "max_iter"
STOP_DIVERGED: Final[str] = "diverged"


@dataclass(frozen=True, eq=False)
class VectorFieldProblem:
    """The first-order problem y' = Ky + g(y).

    Attributes:
      K: The linear part.
      g: The nonlinearity.
      g_jac: The analytic Jacobian of ``g``.
      class_cert: Optional vector-field class certificate.
      exact: Optional exact solution t ↦ y(t) for the default initial value.
      name: Display name.
    """

    K: Matrix
    g: Callable[[State], State]
    g_jac: Callable[[State], Matrix]
    class_cert: "ClassCertificate | None" = None
    exact: Callable[[float], State] | None = None
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "K", as_square(self.K, "K"))

    @property
    def n(self) -> int:
        return self.K.shape[0]

    def f(self, y: ArrayLike) -> State:
        y = np.asarray(y, dtype=float)
        return self.K @ y + self.g(y)

    def f_jac(self, y: ArrayLike) -> Matrix:
        return self.K + self.g_jac(np.asarray(y, dtype=float))


@dataclass(frozen=True, eq=False)
class SecondOrderProblem:
    """The oscillator q'' − Nq' + Ωq = −∇V₁(q).

    Attributes:
      N: Velocity coupling.
      Omega: Stiffness.
      gradV1: ∇V₁.
      gradV1_jac: The Hessian of V₁.
      class_cert: Optional certificate for the first-order embedding.
      exact: Optional exact solution t ↦ (q, q')(t).
      name: Display name.
    """

    N: Matrix
    Omega: Matrix
    gradV1: Callable[[State], State]
    gradV1_jac: Callable[[State], Matrix]
    class_cert: "ClassCertificate | None" = None
    exact: Callable[[float], State] | None = None
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "N", as_square(self.N, "N"))
        object.__setattr__(self, "Omega", as_square(self.Omega, "Omega"))
        second_order_matrix(self.N, self.Omega)

    @property
    def n(self) -> int:
        return self.N.shape[0]

    def embedding(self) -> VectorFieldProblem:
        """The first-order form with K = [[0, I], [−Ω, N]] and g = (0, −∇V₁(q))."""
        n = self.n

        def g(y: State) -> State:
            return np.concatenate([np.zeros(n), -self.gradV1(y[:n])])

        def g_jac(y: State) -> Matrix:
            J = np.zeros((2 * n, 2 * n))
            J[n:, :n] = -self.gradV1_jac(y[:n])
            return J

        return VectorFieldProblem(
            K=second_order_matrix(self.N, self.Omega),
            g=g,
            g_jac=g_jac,
            class_cert=self.class_cert,
            exact=self.exact,
            name=self.name,
        )

    def to_partitioned(self) -> "PartitionedProblem":
        """The (q, p) form q'' + Ωq = −∇V₁(q).

        Raises:
          PreconditionError: If N is not zero.
        """
        if self.N.any():
            raise PreconditionError("Only problems with N = 0 have a partitioned form")
        return PartitionedProblem(
            Omega=self.Omega,
            gtilde=lambda q: -self.gradV1(q),
            gtilde_jac=lambda q: -self.gradV1_jac(q),
            class_cert=self.class_cert,
            exact=self.exact,
            name=self.name,
        )


@dataclass(frozen=True, eq=False)
class PartitionedProblem:
    """The system (q, p)' = (p, −Ωq + g̃(q))."""

    Omega: Matrix
    gtilde: Callable[[State], State]
    gtilde_jac: Callable[[State], Matrix]
    class_cert: "ClassCertificate | None" = None
    exact: Callable[[float], State] | None = None
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "Omega", as_square(self.Omega, "Omega"))

    @property
    def n(self) -> int:
        return self.Omega.shape[0]

    def embedding(self) -> VectorFieldProblem:
        n = self.n

        def g(y: State) -> State:
            return np.concatenate([np.zeros(n), self.gtilde(y[:n])])

        def g_jac(y: State) -> Matrix:
            J = np.zeros((2 * n, 2 * n))
            J[n:, :n] = self.gtilde_jac(y[:n])
            return J

        return VectorFieldProblem(
            K=second_order_matrix(np.zeros((n, n)), self.Omega),
            g=g,
            g_jac=g_jac,
            class_cert=self.class_cert,
            exact=self.exact,
            name=self.name,
        )

    def without_linear_part(self) -> "PartitionedProblem":
        """Fold −Ωq into the nonlinearity so that Ω = 0."""
        Omega = self.Omega
        return PartitionedProblem(
            Omega=np.zeros_like(Omega),
            gtilde=lambda q: self.gtilde(q) - Omega @ q,
            gtilde_jac=lambda q: self.gtilde_jac(q) - Omega,
            class_cert=self.class_cert,
            exact=self.exact,
            name=self.name,
        )


@dataclass(frozen=True)
class SolverConfig:
    """Settings of the fixed-point stage solver.

    Attributes:
      h: Step size.
      fp_tol: Absolute max-norm bound on the stage increment.
      fp_max_iter: Maximum number of stage-map evaluations per step.
      method: Method identifier, for reports.
      tableau: The tableau the method was built from, for reports.
      fp_divergence_bound: Iterates beyond bound·(1 + ‖initial‖∞) diverge.
      stagnation_factor: Increments below factor·eps·(1 + ‖x‖∞) that stop
        decreasing count as converged.
    """

    h: float
    fp_tol: float = 1e-16
    fp_max_iter: int = 100
    method: str = ""
    tableau: ButcherTableau | None = None
    fp_divergence_bound: float = 1e8
    stagnation_factor: float = 100.0

    def __post_init__(self):
        object.__setattr__(self, "h", float(self.h))
        if not (math.isfinite(self.h) and self.h > 0):
            raise PreconditionError(f"Step size must be positive, got {self.h}")
        if not self.fp_tol > 0:
            raise PreconditionError(f"Tolerance must be positive, got {self.fp_tol}")
        if self.fp_max_iter < 1:
            raise PreconditionError(
                f"Iteration limit must be at least 1, got {self.fp_max_iter}"
            )


@dataclass(frozen=True, eq=False)
class StepRecord:
    """The outcome of one step.

    Attributes:
      y_next: The accepted state.
      stages: The converged stage values, shape (s, ·).
      iterations: Number of stage-map evaluations.
      converged: Whether the stage solver met its stopping test.
      increment_norm: The last max-norm stage increment.
      stop_reason: One of tolerance, stagnation, max_iter, diverged.
    """

    y_next: State
    stages: NDArray[np.float64]
    iterations: int
    converged: bool
    increment_norm: float
    stop_reason: str = STOP_TOLERANCE


class FixedPointResult(NamedTuple):
    stages: NDArray[np.float64]
    iterations: int
    converged: bool
    increment_norm: float
    reason: str


def _check_finite(x: NDArray[np.float64], bound: float, iteration: int) -> None:
    rows = x.reshape(x.shape[0] if x.ndim else 1, -1)
    bad = ~np.all(np.isfinite(rows), axis=1)
    with np.errstate(invalid="ignore"):
        bad |= np.abs(rows).max(axis=1) > bound
    if bad.any():
        raise DivergenceError(int(np.flatnonzero(bad)[0]), iteration)


def fixed_point_solve(
    stage_map: Callable[[NDArray[np.float64]], NDArray[np.float64]],
    initial: ArrayLike,
    cfg: SolverConfig,
) -> FixedPointResult:
    """Iterate x ← stage_map(x) until the increment is small enough.

    Args:
      stage_map: Map of the stacked stages, rows indexed by stage.
      initial: The starting stages.
      cfg: Solver settings.

    Returns:
      The last iterate, the number of map evaluations, the convergence flag,
      the last increment and the stopping reason. Reaching ``fp_max_iter``
      is not an error.

    Raises:
      DivergenceError: If an iterate is non-finite or leaves the bound.
    """
    x = np.array(initial, dtype=float)
    bound = cfg.fp_divergence_bound * (1.0 + np.abs(x).max(initial=0.0))
    eps = np.finfo(float).eps
    previous = math.inf
    increment = math.inf
    for iteration in range(1, cfg.fp_max_iter + 1):
        x_new = np.asarray(stage_map(x), dtype=float)
        _check_finite(x_new, bound, iteration)
        increment = float(np.abs(x_new - x).max(initial=0.0))
        x = x_new
        if increment <= cfg.fp_tol:
            return FixedPointResult(x, iteration, True, increment, STOP_TOLERANCE)
        floor = cfg.stagnation_factor * eps * (1.0 + np.abs(x).max(initial=0.0))
        if increment >= previous and increment <= floor:
            logger.debug("Stage iteration stagnated at %.3e", increment)
            return FixedPointResult(x, iteration, True, increment, STOP_STAGNATION)
        previous = increment
    logger.debug(
        "Stage iteration stopped after %d iterations at %.3e",
        cfg.fp_max_iter,
        increment,
    )
    return FixedPointResult(x, cfg.fp_max_iter, False, increment, STOP_MAX_ITER)


def _stack(fn: Callable[[State], State], stages: NDArray[np.float64]) -> NDArray[np.float64]:
    return np.array([fn(stage) for stage in stages])


class Stepper(ABC):
    """A one-step method prepared for one problem, tableau and step size.

    Attributes:
      tableau: The Runge-Kutta tableau.
      config: Solver settings, including h.
      name: Display name.
    """

    def __init__(self, tableau: ButcherTableau, config: SolverConfig, name: str = ""):
        self.tableau = tableau
        self.config = config
        self.name = name or config.method or type(self).__name__

    @property
    def h(self) -> float:
        return self.config.h

    @property
    @abstractmethod
    def first_order(self) -> VectorFieldProblem:
        """The problem as y' = Ky + g(y) in the form this stepper integrates."""

    @cached_property
    def coefficients(self) -> ExpCoefficients:
        return build_exp_coefficients(self.tableau, self.h, self.first_order.K)

    @abstractmethod
    def step(self, y: ArrayLike) -> StepRecord:
        """Advance ``y`` by one step."""

    def full_stages(self, y: ArrayLike, record: StepRecord) -> NDArray[np.float64]:
        """The stages k_i of the first-order form, shape (s, dimension)."""
        return record.stages

    @property
    def dimension(self) -> int:
        return self.first_order.n


class SSEIStepper(Stepper):
    """Exponential integrator with coefficients ā_ij = a_ij e^{(c_i−c_j)hK}."""

    def __init__(
        self,
        problem: VectorFieldProblem,
        tableau: ButcherTableau,
        config: SolverConfig,
        name: str = "",
    ):
        super().__init__(tableau, config, name)
        self.problem = problem
        if not tableau.is_ssei:
            logger.warning(
                "Tableau %s fails the SSEI gate; volume results do not apply",
                tableau.name,
            )
        self._coupling = self.coefficients.abar.to_dense()

    @property
    def first_order(self) -> VectorFieldProblem:
        return self.problem

    def step(self, y: ArrayLike) -> StepRecord:
        y = np.asarray(y, dtype=float)
        coefficients = self.coefficients
        s, n, h = self.tableau.s, self.problem.n, self.h
        base = coefficients.node_exponentials @ y

        def stage_map(k):
            G = _stack(self.problem.g, k)
            return base + h * (self._coupling @ G.ravel()).reshape(s, n)

        result = fixed_point_solve(stage_map, base, self.config)
        G = _stack(self.problem.g, result.stages)
        y_next = coefficients.step_exponential @ y + h * np.einsum(
            "inm,im->n", coefficients.bbar, G
        )
        return StepRecord(
            y_next,
            result.stages,
            result.iterations,
            result.converged,
            result.increment_norm,
            result.reason,
        )


class RKStepper(Stepper):
    """Implicit Runge-Kutta method on f(y) = Ky + g(y).

    Divergence of the stage iteration is recorded rather than raised: the
    step comes back with ``stop_reason`` set to diverged and a NaN state.
    """

    def __init__(
        self,
        problem: VectorFieldProblem,
        tableau: ButcherTableau,
        config: SolverConfig,
        name: str = "",
    ):
        super().__init__(tableau, config, name)
        self.problem = problem
        self._coupling = np.kron(tableau.A, np.eye(problem.n))

    @cached_property
    def first_order(self) -> VectorFieldProblem:
        problem = self.problem
        return VectorFieldProblem(
            K=np.zeros_like(problem.K),
            g=problem.f,
            g_jac=problem.f_jac,
            class_cert=problem.class_cert,
            exact=problem.exact,
            name=problem.name,
        )

    def _diverged(self, y: State, iteration: int) -> StepRecord:
        nan = np.full_like(y, np.nan)
        stages = np.full((self.tableau.s, y.size), np.nan)
        return StepRecord(nan, stages, iteration, False, math.inf, STOP_DIVERGED)

    def step(self, y: ArrayLike) -> StepRecord:
        y = np.asarray(y, dtype=float)
        if not np.all(np.isfinite(y)):
            return self._diverged(y, 0)
        s, n, h = self.tableau.s, self.problem.n, self.h
        base = np.tile(y, (s, 1))

        def stage_map(k):
            F = _stack(self.problem.f, k)
            return base + h * (self._coupling @ F.ravel()).reshape(s, n)

        try:
            result = fixed_point_solve(stage_map, base, self.config)
        except DivergenceError as error:
            logger.debug("%s: %s", self.name, error)
            return self._diverged(y, error.iteration)
        F = _stack(self.problem.f, result.stages)
        y_next = y + h * (self.tableau.b @ F)
        return StepRecord(
            y_next,
            result.stages,
            result.iterations,
            result.converged,
            result.increment_norm,
            result.reason,
        )


class _BlockCache:
    """Memoizes the four n×n blocks of e^{xhK} by x."""

    def __init__(self, evaluate: Callable[[float], tuple[Matrix, ...]]):
        self._evaluate = evaluate
        self._values: dict[float, tuple[Matrix, ...]] = {}

    def __call__(self, x: float) -> tuple[Matrix, ...]:
        x = float(x)
        if x not in self._values:
            self._values[x] = self._evaluate(x)
        return self._values[x]


class _NystromStepper(Stepper):
    """Shared machinery of the steppers that iterate on q-stages only.

    Subclasses provide ``_blocks(x)`` returning (E11, E12, E21, E22) of
    e^{xhK}, and ``_force(q)`` returning the force in the p-equation.
    """

    def __init__(self, tableau: ButcherTableau, config: SolverConfig, n: int, name: str):
        super().__init__(tableau, config, name)
        self.n = n
        self.blocks = _BlockCache(self._blocks)
        t = tableau
        s = t.s
        diff12 = np.empty((s, s, n, n))
        diff22 = np.empty((s, s, n, n))
        for i in range(s):
            for j in range(s):
                _, diff12[i, j], _, diff22[i, j] = self.blocks(t.c[i] - t.c[j])
        self._coupling12 = hadamard_kron(t.A, BlockMatrix(diff12)).to_dense()
        self._coupling22 = hadamard_kron(t.A, BlockMatrix(diff22)).to_dense()
        nodes = [self.blocks(c) for c in t.c]
        self._node_q = np.array([np.hstack([E[0], E[1]]) for E in nodes])
        self._node_p = np.array([np.hstack([E[2], E[3]]) for E in nodes])
        ends = [self.blocks(1.0 - c) for c in t.c]
        self._end12 = np.array([t.b[i] * E[1] for i, E in enumerate(ends)])
        self._end22 = np.array([t.b[i] * E[3] for i, E in enumerate(ends)])
        E11, E12, E21, E22 = self.blocks(1.0)
        self._step = np.block([[E11, E12], [E21, E22]])

    @abstractmethod
    def _blocks(self, x: float) -> tuple[Matrix, Matrix, Matrix, Matrix]: ...

    @abstractmethod
    def _force(self, q: State) -> State: ...

    def step(self, y: ArrayLike) -> StepRecord:
        y = np.asarray(y, dtype=float)
        s, n, h = self.tableau.s, self.n, self.h
        base = self._node_q @ y

        def stage_map(Q):
            G = _stack(self._force, Q)
            return base + h * (self._coupling12 @ G.ravel()).reshape(s, n)

        result = fixed_point_solve(stage_map, base, self.config)
        G = _stack(self._force, result.stages)
        y_next = self._step @ y + h * np.concatenate(
            [
                np.einsum("inm,im->n", self._end12, G),
                np.einsum("inm,im->n", self._end22, G),
            ]
        )
        return StepRecord(
            y_next,
            result.stages,
            result.iterations,
            result.converged,
            result.increment_norm,
            result.reason,
        )

    def full_stages(self, y: ArrayLike, record: StepRecord) -> NDArray[np.float64]:
        y = np.asarray(y, dtype=float)
        s, n, h = self.tableau.s, self.n, self.h
        G = _stack(self._force, record.stages)
        velocities = self._node_p @ y + h * (self._coupling22 @ G.ravel()).reshape(s, n)
        return np.hstack([record.stages, velocities])


class SecondOrderEIStepper(_NystromStepper):
    """The SSEI method written on q'' − Nq' + Ωq = −∇V₁(q).

    The blocks exp^{ij} come from φ-functions of hN when Ω = 0 and from the
    partitioned exponential of K = [[0, I], [−Ω, N]] otherwise.
    """

    def __init__(
        self,
        problem: SecondOrderProblem,
        tableau: ButcherTableau,
        config: SolverConfig,
        name: str = "",
    ):
        self.problem = problem
        self._K = second_order_matrix(problem.N, problem.Omega)
        self._omega_zero = not problem.Omega.any()
        self._commuting = commutes(problem.N, problem.Omega)
        super().__init__(tableau, config, problem.n, name)

    @cached_property
    def first_order(self) -> VectorFieldProblem:
        return self.problem.embedding()

    def _blocks(self, x: float) -> tuple[Matrix, Matrix, Matrix, Matrix]:
        n = self.n
        identity, zero = np.eye(n), np.zeros((n, n))
        if x == 0.0:
            return identity, zero, zero, identity
        xh = x * self.h
        if self._omega_zero:
            phi0, phi1 = phi_all(1, xh * self.problem.N)
            return identity, xh * phi1, zero, phi0
        if self._commuting:
            return second_order_exp_blocks(xh, self.problem.N, self.problem.Omega)
        return exp_blocks(xh, self._K, n)

    def _force(self, q: State) -> State:
        return -self.problem.gradV1(q)


class ERKNStepper(_NystromStepper):
    """Extended Runge-Kutta-Nyström method for q'' + Ωq = g̃(q).

    With V = h²Ω the blocks of e^{xhK} are ϕ₀(x²V), xhϕ₁(x²V),
    −xhΩϕ₁(x²V) and ϕ₀(x²V).
    """

    def __init__(
        self,
        problem: PartitionedProblem,
        tableau: ButcherTableau,
        config: SolverConfig,
        name: str = "",
    ):
        self.problem = problem
        self._V = config.h**2 * problem.Omega
        super().__init__(tableau, config, problem.n, name)

    @cached_property
    def first_order(self) -> VectorFieldProblem:
        return self.problem.embedding()

    def _blocks(self, x: float) -> tuple[Matrix, Matrix, Matrix, Matrix]:
        phi0, phi1 = phi_trig_pair(x * x * self._V)
        xh = x * self.h
        return phi0, xh * phi1, -xh * (self.problem.Omega @ phi1), phi0

    def _force(self, q: State) -> State:
        return self.problem.gtilde(q)


class RKNStepper(ERKNStepper):
    """Runge-Kutta-Nyström method for q'' = g̃(q).

    Raises:
      PreconditionError: If the problem has Ω ≠ 0.
    """

    def __init__(
        self,
        problem: PartitionedProblem,
        tableau: ButcherTableau,
        config: SolverConfig,
        name: str = "",
    ):
        if problem.Omega.any():
            raise PreconditionError("RKN methods need Omega = 0")
        super().__init__(problem, tableau, config, name)


def ssei_step(
    p: VectorFieldProblem, t: ButcherTableau, cfg: SolverConfig, y: ArrayLike
) -> StepRecord:
    return SSEIStepper(p, t, cfg).step(y)


def rk_step(
    p: VectorFieldProblem, t: ButcherTableau, cfg: SolverConfig, y: ArrayLike
) -> StepRecord:
    return RKStepper(p, t, cfg).step(y)


def second_order_ei_step(
    p: SecondOrderProblem, t: ButcherTableau, cfg: SolverConfig, y: ArrayLike
) -> StepRecord:
    return SecondOrderEIStepper(p, t, cfg).step(y)


def erkn_step(
    p: PartitionedProblem, t: ButcherTableau, cfg: SolverConfig, y: ArrayLike
) -> StepRecord:
    return ERKNStepper(p, t, cfg).step(y)


def rkn_step(
    p: PartitionedProblem, t: ButcherTableau, cfg: SolverConfig, y: ArrayLike
) -> StepRecord:
    return RKNStepper(p, t, cfg).step(y)


@dataclass(eq=False)
class Trajectory:
    """States on the grid t_i = i·h with the record of every step."""

    times: NDArray[np.float64]
    states: NDArray[np.float64]
    records: list[StepRecord] = field(default_factory=list)

    @property
    def final(self) -> State:
        return self.states[-1]

    @property
    def nonconverged(self) -> int:
        return sum(not record.converged for record in self.records)

    @property
    def diverged(self) -> int:
        return sum(record.stop_reason == STOP_DIVERGED for record in self.records)

    @property
    def iterations(self) -> int:
        return sum(record.iterations for record in self.records)


def step_count(h: float, t_end: float) -> int:
    """The number of steps of size ``h`` that reach ``t_end``.

    Raises:
      PreconditionError: If ``t_end`` is negative or not a multiple of ``h``.
    """
    if t_end < 0:
        raise PreconditionError(f"End time must be non-negative, got {t_end}")
    steps = round(t_end / h)
    if abs(steps * h - t_end) > 1e-9 * max(1.0, abs(t_end)):
        raise PreconditionError(f"End time {t_end} is not a multiple of h = {h}")
    return steps


def integrate(stepper: Stepper, y0: ArrayLike, t_end: float) -> Trajectory:
    """Apply ``stepper`` until ``t_end``.

    Raises:
      PreconditionError: If ``t_end`` is off the step grid.
      IntegrationError: If a stage iteration diverges; the trajectory up to
        the last accepted step is attached as ``partial``.
    """
    y0 = np.asarray(y0, dtype=float)
    steps = step_count(stepper.h, float(t_end))
    times = np.arange(steps + 1) * stepper.h
    states = np.empty((steps + 1, y0.size))
    states[0] = y0
    records: list[StepRecord] = []
    for i in range(steps):
        try:
            record = stepper.step(states[i])
        except DivergenceError as error:
            logger.error("%s diverged at step %d: %s", stepper.name, i, error)
            partial = Trajectory(times[: i + 1], states[: i + 1].copy(), records)
            raise IntegrationError(f"{stepper.name} diverged", partial, i) from error
        states[i + 1] = record.y_next
        records.append(record)
    trajectory = Trajectory(times, states, records)
    if trajectory.nonconverged:
        logger.warning(
            "%s: %d of %d steps did not converge (%d diverged)",
            stepper.name,
            trajectory.nonconverged,
            steps,
            trajectory.diverged,
        )
    return trajectory
