"""Benchmark problems, their reference solutions and synthetic class fields."""

from collections.abc import Callable
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Final
import logging
import math

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import PreconditionError, ReferenceUnreliableError, UsageError
from .integrators import (
    PartitionedProblem,
    SecondOrderEIStepper,
    SecondOrderProblem,
    SolverConfig,
    SSEIStepper,
    State,
    Stepper,
    VectorFieldProblem,
    integrate,
)
from .tableau import gauss_legendre
from .vpcheck import ClassCertificate

logger = logging.getLogger(__name__)

# Canonical symplectic structure on R².
J2: Final[NDArray[np.float64]] = np.array([[0.0, 1.0], [-1.0, 0.0]])
AGM_MAX_STEPS: Final[int] = 64
VOLUME_STEPS: Final[tuple[Fraction, ...]] = tuple(
    Fraction(1, d) for d in (2, 10, 50, 200)
)


def _error_steps(first: int, last: int) -> tuple[Fraction, ...]:
    return tuple(Fraction(1, 10) / 2**i for i in range(first, last + 1))


@dataclass(frozen=True, eq=False)
class BenchmarkSpec:
    """A named benchmark with its data and default experiment settings.

    Attributes:
      name: Registry name.
      params: Named parameters.
      problem: First-order form y' = Ky + g(y).
      y0: Initial state.
      step_sizes: Step sizes of the volume and flow experiments.
      horizon: End time of the volume and flow experiments.
      error_steps: Step sizes of the error studies.
      error_horizons: End times of the error studies.
      certificate: Vector-field class certificate, if the field has one.
      second_order: The problem as q'' − Nq' + Ωq = −∇V₁(q), if available.
      partitioned: The problem as q'' + Ωq = g̃(q), if available.
      description: One-line summary.
    """

    name: str
    params: dict[str, float]
    problem: VectorFieldProblem
    y0: State
    step_sizes: tuple[Fraction, ...] = VOLUME_STEPS
    horizon: float = 100.0
    error_steps: tuple[Fraction, ...] = field(default_factory=lambda: _error_steps(1, 4))
    error_horizons: tuple[float, ...] = (10.0, 100.0, 1000.0)
    certificate: ClassCertificate | None = None
    second_order: SecondOrderProblem | None = None
    partitioned: PartitionedProblem | None = None
    description: str = ""

    @property
    def exact(self) -> Callable[[float], State] | None:
        return self.problem.exact


def jacobi_elliptic(u: float, m: float) -> tuple[float, float, float]:
    """Jacobi elliptic functions (sn, cn, dn) of argument u and modulus m.

    Uses the descending Landen transformation driven by the
    arithmetic-geometric mean. The modulus enters as m² in the defining
    integral, so dn² + m²sn² = 1.

    Raises:
      PreconditionError: If m is outside [0, 1).
    """
    if not 0.0 <= m < 1.0:
        raise PreconditionError(f"Modulus must lie in [0, 1), got {m}")
    a = [1.0]
    c = [m]
    b = math.sqrt(1.0 - m * m)
    while abs(c[-1]) > np.finfo(float).eps * a[-1] and len(a) < AGM_MAX_STEPS:
        a_prev = a[-1]
        a.append((a_prev + b) / 2)
        c.append((a_prev - b) / 2)
        b = math.sqrt(a_prev * b)
    N = len(a) - 1
    phi = 2**N * a[N] * u
    for n in range(N, 0, -1):
        phi = (phi + math.asin(c[n] / a[n] * math.sin(phi))) / 2
    sn = math.sin(phi)
    cn = math.cos(phi)
    dn = math.sqrt(1.0 - m * m * sn * sn)
    return sn, cn, dn


def duffing(k: float = 0.07, omega: float = 20.0) -> BenchmarkSpec:
    """The Duffing oscillator q'' + (ω² + k²)q = 2k²q³ with y0 = (0, ω).

    The exact solution is q(t) = sn(ωt; k/ω), q'(t) = ω·cn·dn(ωt; k/ω).
    """
    stiffness = omega**2 + k**2
    modulus = k / omega

    def g(y: State) -> State:
        return np.array([0.0, 2 * k**2 * y[0] ** 3])

    def g_jac(y: State) -> NDArray[np.float64]:
        return np.array([[0.0, 0.0], [6 * k**2 * y[0] ** 2, 0.0]])

    def exact(t: float) -> State:
        sn, cn, dn = jacobi_elliptic(omega * t, modulus)
        return np.array([sn, omega * cn * dn])

    certificate = ClassCertificate("H", J2)
    problem = VectorFieldProblem(
        K=np.array([[0.0, 1.0], [-stiffness, 0.0]]),
        g=g,
        g_jac=g_jac,
        class_cert=certificate,
        exact=exact,
        name="duffing",
    )
    partitioned = PartitionedProblem(
        Omega=np.array([[stiffness]]),
        gtilde=lambda q: 2 * k**2 * q**3,
        gtilde_jac=lambda q: np.array([[6 * k**2 * q[0] ** 2]]),
        class_cert=certificate,
        exact=exact,
        name="duffing",
    )
    return BenchmarkSpec(
        name="duffing",
        params={"k": k, "omega": omega},
        problem=problem,
        y0=np.array([0.0, omega]),
        certificate=certificate,
        partitioned=partitioned,
        description="Duffing oscillator with an exact elliptic solution (class H)",
    )


def divergence_free_3d(omega: float = 100.0) -> BenchmarkSpec:
    """A stiff divergence-free field on R³ in class S with P the reversal permutation."""
    K = np.array([[0.0, -omega, 0.0], [omega, 0.0, -omega], [0.0, omega, 0.0]])
    coupling = np.array([[1.0, 0.0, -1.0], [0.0, 0.0, 0.0], [1.0, 0.0, -1.0]])

    def g(y: State) -> State:
        s = math.sin(y[0] - y[2])
        return np.array([s, 0.0, s])

    def g_jac(y: State) -> NDArray[np.float64]:
        return math.cos(y[0] - y[2]) * coupling

    certificate = ClassCertificate("S", np.fliplr(np.eye(3)))
    return BenchmarkSpec(
        name="divfree3d",
        params={"omega": omega},
        problem=VectorFieldProblem(K, g, g_jac, class_cert=certificate, name="divfree3d"),
        y0=np.array([0.5, 0.5, 0.5]),
        step_sizes=tuple(Fraction(1, d) for d in (50, 100, 200, 400)),
        error_steps=_error_steps(2, 5),
        certificate=certificate,
        description="Divergence-free 3-D field with ω = 100 (class S)",
    )


def helmholtz_duffing(
    nu: float = 0.01, A: float = 200.0, B: float = -0.5, eps: float = 1.0
) -> BenchmarkSpec:
    """The damped oscillator q'' + 2νq' + Aq = −Bq² − εq³.

    The damping gives trace K = −2ν, so no step preserves volume; the
    per-step determinant is e^{−2νh} instead.
    """
    problem = SecondOrderProblem(
        N=np.array([[-2 * nu]]),
        Omega=np.array([[A]]),
        gradV1=lambda q: B * q**2 + eps * q**3,
        gradV1_jac=lambda q: np.array([[2 * B * q[0] + 3 * eps * q[0] ** 2]]),
        name="helmholtz",
    )
    return BenchmarkSpec(
        name="helmholtz",
        params={"nu": nu, "A": A, "B": B, "eps": eps},
        problem=problem.embedding(),
        y0=np.array([1.0, 15.199]),
        horizon=200.0,
        error_steps=_error_steps(0, 3),
        second_order=problem,
        description="Damped Helmholtz-Duffing oscillator (volume contracting)",
    )


def _coulomb_gradient(x: State) -> State:
    r = math.hypot(x[0], x[1])
    if r == 0.0:
        raise PreconditionError("The potential is singular at x₁ = x₂ = 0")
    return -np.array([x[0], x[1], 0.0]) / (100 * r**3)


def _coulomb_hessian(x: State) -> NDArray[np.float64]:
    r = math.hypot(x[0], x[1])
    if r == 0.0:
        raise PreconditionError("The potential is singular at x₁ = x₂ = 0")
    H = np.zeros((3, 3))
    xy = np.array([x[0], x[1]])
    H[:2, :2] = -np.eye(2) / (100 * r**3) + 3 * np.outer(xy, xy) / (100 * r**5)
    return H


def charged_particle(b_field: float = 10.0) -> BenchmarkSpec:
    """A charged particle in the potential U = 1/(100r) and the field (0, 0, b).

    The motion x'' = x' × B − ∇U(x) is written with N = [[0, b, 0], [−b, 0, 0],
    [0, 0, 0]] so that Nx' = x' × B. With b = 0 the field is separable and
    has a partitioned form for Nyström methods.

    Raises:
      PreconditionError: When ∇U or its Hessian is evaluated at r = 0.
    """
    N = np.array([[0.0, b_field, 0.0], [-b_field, 0.0, 0.0], [0.0, 0.0, 0.0]])
    identity, zero = np.eye(3), np.zeros((3, 3))
    # Inverse of [[0, I], [−I, N]]; skew because N is.
    certificate = ClassCertificate("H", np.block([[N, -identity], [identity, zero]]))
    problem = SecondOrderProblem(
        N=N,
        Omega=zero,
        gradV1=_coulomb_gradient,
        gradV1_jac=_coulomb_hessian,
        class_cert=certificate,
        name="charged-particle",
    )
    return BenchmarkSpec(
        name="charged-particle",
        params={"b": b_field},
        problem=problem.embedding(),
        y0=np.array([0.7, 1.0, 0.1, 0.9, 0.5, 0.4]),
        error_steps=_error_steps(0, 3),
        certificate=certificate,
        second_order=problem,
        partitioned=problem.to_partitioned() if b_field == 0 else None,
        description="Charged particle in a constant magnetic field (class H)",
    )


def cubic_oscillator() -> BenchmarkSpec:
    """q'' = −q³, the one-dimensional separable Nyström test field."""
    certificate = ClassCertificate("H", J2)
    problem = SecondOrderProblem(
        N=np.zeros((1, 1)),
        Omega=np.zeros((1, 1)),
        gradV1=lambda q: q**3,
        gradV1_jac=lambda q: np.array([[3 * q[0] ** 2]]),
        class_cert=certificate,
        name="cubic",
    )
    return BenchmarkSpec(
        name="cubic",
        params={},
        problem=problem.embedding(),
        y0=np.array([1.0, 0.0]),
        step_sizes=(Fraction(1, 20),),
        horizon=50.0,
        error_horizons=(10.0,),
        certificate=certificate,
        second_order=problem,
        partitioned=problem.to_partitioned(),
        description="Cubic oscillator q'' = −q³ (class H)",
    )


def _canonical(n: int) -> NDArray[np.float64]:
    if n < 2 or n % 2:
        raise PreconditionError(f"Canonical structure needs an even dimension, got {n}")
    d = n // 2
    return np.block([[np.zeros((d, d)), np.eye(d)], [-np.eye(d), np.zeros((d, d))]])


def _symmetric(rng: np.random.Generator, n: int) -> NDArray[np.float64]:
    X = rng.standard_normal((n, n))
    return (X + X.T) / 2


def synthetic_f_infinity(m: int = 2, n: int = 2, seed: int = 0) -> BenchmarkSpec:
    """A block-triangular field f = (u(y₁), v(y₁, y₂)) in class F_inf.

    u(y₁) = J_m(M₁y₁ + α∘y₁³) is Hamiltonian on R^m and
    v = J_n(M₂y₂ + D(y₁)y₂ + B sin y₁) with D(y₁) = diag(γ_k cos(a_kᵀy₁)),
    so ∂v/∂y₂ = J_n·(symmetric) is transpose-anti-similar under J_n.

    Raises:
      PreconditionError: If m or n is odd.
    """
    Jm, Jn = _canonical(m), _canonical(n)
    rng = np.random.default_rng(seed)
    M1, M2 = _symmetric(rng, m), _symmetric(rng, n)
    alpha = rng.uniform(0.1, 0.5, m)
    gamma = rng.uniform(0.1, 0.5, n)
    a = rng.standard_normal((n, m))
    B = rng.standard_normal((n, m)) / 2

    K = np.zeros((m + n, m + n))
    K[:m, :m] = Jm @ M1
    K[m:, m:] = Jn @ M2

    def g(y: State) -> State:
        y1, y2 = y[:m], y[m:]
        d = gamma * np.cos(a @ y1)
        return np.concatenate([Jm @ (alpha * y1**3), Jn @ (d * y2 + B @ np.sin(y1))])

    def g_jac(y: State) -> NDArray[np.float64]:
        y1, y2 = y[:m], y[m:]
        J = np.zeros((m + n, m + n))
        J[:m, :m] = Jm @ np.diag(3 * alpha * y1**2)
        dd = -(gamma * np.sin(a @ y1) * y2)[:, None] * a
        J[m:, :m] = Jn @ (dd + B * np.cos(y1))
        J[m:, m:] = Jn @ np.diag(gamma * np.cos(a @ y1))
        return J

    certificate = ClassCertificate("F_inf", Jn, m=m, inner=ClassCertificate("H", Jm))
    return BenchmarkSpec(
        name="synthetic-finf",
        params={"m": m, "n": n, "seed": seed},
        problem=VectorFieldProblem(K, g, g_jac, class_cert=certificate, name="synthetic-finf"),
        y0=np.full(m + n, 0.5),
        step_sizes=(Fraction(1, 10), Fraction(1, 50)),
        horizon=10.0,
        error_horizons=(10.0,),
        certificate=certificate,
        description="Block-triangular synthetic field (class F_inf)",
    )


def synthetic_affine(n: int = 2, seed: int = 0) -> BenchmarkSpec:
    """The affine field f(y) = J_n S y + d with trace K = 0."""
    Jn = _canonical(n)
    rng = np.random.default_rng(seed)
    d = rng.standard_normal(n)
    certificate = ClassCertificate("H", Jn)
    problem = VectorFieldProblem(
        K=Jn @ _symmetric(rng, n),
        g=lambda y: d.copy(),
        g_jac=lambda y: np.zeros((n, n)),
        class_cert=certificate,
        name="affine",
    )
    return BenchmarkSpec(
        name="affine",
        params={"n": n, "seed": seed},
        problem=problem,
        y0=np.full(n, 0.5),
        step_sizes=(Fraction(1, 10),),
        horizon=10.0,
        error_horizons=(10.0,),
        certificate=certificate,
        description="Affine field Ky + d with trace K = 0",
    )


def js_field() -> BenchmarkSpec:
    """f(y) = J∇H(y) with H = y₁⁴ + y₂², so f′(y) = J·∇²H(y)."""

    def g(y: State) -> State:
        return J2 @ np.array([4 * y[0] ** 3, 2 * y[1]])

    def g_jac(y: State) -> NDArray[np.float64]:
        return J2 @ np.diag([12 * y[0] ** 2, 2.0])

    certificate = ClassCertificate("F_inf", J2)
    return BenchmarkSpec(
        name="js-field",
        params={},
        problem=VectorFieldProblem(
            np.zeros((2, 2)), g, g_jac, class_cert=certificate, name="js-field"
        ),
        y0=np.array([0.5, 0.5]),
        step_sizes=(Fraction(1, 10), Fraction(1, 50)),
        horizon=10.0,
        error_horizons=(10.0,),
        certificate=certificate,
        description="Field with f′ = J·S(y), S symmetric (class F_inf)",
    )


PROBLEMS: Final[dict[str, Callable[[], BenchmarkSpec]]] = {
    "duffing": duffing,
    "divfree3d": divergence_free_3d,
    "helmholtz": helmholtz_duffing,
    "charged-particle": charged_particle,
    "synthetic-finf": synthetic_f_infinity,
    "cubic": cubic_oscillator,
    "affine": synthetic_affine,
    "js-field": js_field,
}


def get_problem(name: str) -> BenchmarkSpec:
    """Look up a benchmark by registry name.

    Raises:
      UsageError: If the name is unknown.
    """
    try:
        return PROBLEMS[name]()
    except KeyError:
        raise UsageError(
            f"Unknown problem {name!r}; choose from {', '.join(PROBLEMS)}"
        ) from None


def relative_global_error(y: ArrayLike, y_ref: ArrayLike) -> float:
    """‖y − y_ref‖₂ / ‖y_ref‖₂; infinite when y is not finite."""
    y = np.asarray(y, dtype=float)
    y_ref = np.asarray(y_ref, dtype=float)
    if not np.all(np.isfinite(y)):
        return math.inf
    return float(np.linalg.norm(y - y_ref) / np.linalg.norm(y_ref))


def _reference_stepper(spec: BenchmarkSpec, h: float) -> Stepper:
    config = SolverConfig(h=h, method="SSEI2")
    tableau = gauss_legendre(2)
    if spec.second_order is not None:
        return SecondOrderEIStepper(spec.second_order, tableau, config, name="reference")
    return SSEIStepper(spec.problem, tableau, config, name="reference")


def reference_solution(
    spec: BenchmarkSpec,
    t_end: float,
    h: float,
    quality: int = 32,
    rtol: float | None = 1e-10,
) -> State:
    """The solution at ``t_end`` to compare runs with step ``h`` against.

    Problems with an exact solution return it. Otherwise the order-4 SSEI
    method is run at h/quality and at h/(2·quality), and the finer result is
    accepted if the two agree.

    Args:
      spec: The benchmark.
      t_end: End time, a multiple of h.
      h: The largest step size the reference will be compared with.
      quality: Refinement factor of the first reference run.
      rtol: Required relative agreement; None skips the check.

    Raises:
      ReferenceUnreliableError: If the refinements disagree.
    """
    if spec.exact is not None:
        return spec.exact(t_end)
    coarse = integrate(_reference_stepper(spec, h / quality), spec.y0, t_end).final
    fine = integrate(_reference_stepper(spec, h / (2 * quality)), spec.y0, t_end).final
    difference = relative_global_error(coarse, fine)
    logger.info(
        "Reference for %s at t = %g: refinements differ by %.3e",
        spec.name,
        t_end,
        difference,
    )
    if rtol is not None and not difference <= rtol:
        raise ReferenceUnreliableError(difference, rtol)
    return fine
