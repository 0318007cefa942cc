"""Volume checks on the discrete flow of a prepared stepper.

The step Jacobian is assembled in closed form from the converged stages,

    Φ = e^{hK} + h b̄ᵀF (I − hĀF)⁻¹ e^{chK},   F = diag(g′(k_1), ..., g′(k_s)),

and its determinant is evaluated as

    |Φ| = |e^{hK}| · |I − h(Ā − e^{(c−1)hK}b̄ᵀ)F| / |I − hĀF|.
"""

from collections.abc import Iterable
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import IO, Final
import csv
import logging
import math
import weakref

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import CertificateError, DimensionError, SingularMatrixError
from .integrators import (
    STOP_DIVERGED,
    Stepper,
    StepRecord,
    Trajectory,
    VectorFieldProblem,
)
from .matfun import (
    BlockMatrix,
    Matrix,
    as_square,
    block_diag,
    det,
    expm,
    hadamard_kron,
    solve_block,
)
from .tableau import exponential_grid

logger = logging.getLogger(__name__)

CLASS_TAGS: Final[tuple[str, ...]] = ("H", "S", "F_inf", "F_2")
CLASS_TOL: Final[float] = 1e-10
MAX_CONDITION: Final[float] = 1e8
CSV_COLUMNS: Final[list[str]] = [
    "step",
    "t",
    "det",
    "abs_det_minus_one",
    "vp_residual",
    "cum_log_drift",
]


@dataclass(frozen=True, eq=False)
class ClassReport:
    """Sampled residuals of the relations a certificate claims.

    Attributes:
      tag: The certified class.
      relations: Relation name to (max, mean) residual.
      samples: Number of sampled states.
      tol: The pass threshold on the max residual.
    """

    tag: str
    relations: dict[str, tuple[float, float]]
    samples: int
    tol: float = CLASS_TOL

    @property
    def max_residual(self) -> float:
        return max((worst for worst, _ in self.relations.values()), default=0.0)

    @property
    def mean_residual(self) -> float:
        means = [mean for _, mean in self.relations.values()]
        return float(np.mean(means)) if means else 0.0

    @property
    def passed(self) -> bool:
        return self.max_residual <= self.tol


@dataclass(frozen=True, eq=False)
class ClassCertificate:
    """A claim that a vector field belongs to one of the classes H, S, F_inf, F_2.

    For H and S, P acts on the whole state. For F_inf and F_2 the state
    splits as (y₁, y₂) with dim y₁ = m; P acts on y₂ and ``inner`` certifies
    the u-block on y₁. With m = 0 the whole field is the v-block.

    Attributes:
      tag: One of H, S, F_inf, F_2.
      P: The similarity matrix.
      m: Size of the y₁ block.
      inner: Certificate of the u-block, required when m > 0.
      report: Residuals attached by ``certify``.
    """

    tag: str
    P: Matrix
    m: int = 0
    inner: "ClassCertificate | None" = None
    report: ClassReport | None = None

    def __post_init__(self):
        if self.tag not in CLASS_TAGS:
            raise CertificateError(f"Unknown class tag {self.tag!r}")
        try:
            P = as_square(self.P, "P")
        except ValueError as error:
            raise CertificateError(str(error)) from error
        if np.linalg.cond(P) > MAX_CONDITION:
            raise CertificateError("P is singular or ill-conditioned")
        object.__setattr__(self, "P", P)
        if self.tag in ("H", "S") and (self.m or self.inner):
            raise CertificateError(f"Class {self.tag} takes no block partition")
        if self.m < 0 or (self.m > 0) != (self.inner is not None):
            raise CertificateError("A y₁ block needs exactly one inner certificate")
        if self.inner is not None and self.inner.dimension != self.m:
            raise CertificateError(
                f"Inner certificate has dimension {self.inner.dimension}, expected {self.m}"
            )

    @cached_property
    def P_inv(self) -> Matrix:
        return np.linalg.inv(self.P)

    @property
    def dimension(self) -> int:
        return self.m + self.P.shape[0]


def _scaled(defect: Matrix, J: Matrix) -> float:
    return float(np.linalg.norm(defect) / (1.0 + np.linalg.norm(J)))


def _transpose_residual(P: Matrix, P_inv: Matrix, J: Matrix) -> float:
    return _scaled(P @ J @ P_inv + J.T, J)


def _similar_residual(P: Matrix, P_inv: Matrix, J: Matrix) -> float:
    return _scaled(P @ J @ P_inv + J, J)


def _relation_residuals(cert: ClassCertificate, J: Matrix, prefix: str) -> dict[str, float]:
    if J.shape[0] != cert.dimension:
        raise CertificateError(
            f"Certificate of dimension {cert.dimension} for a field of dimension {J.shape[0]}"
        )
    match cert.tag:
        case "H":
            return {f"{prefix}H": _transpose_residual(cert.P, cert.P_inv, J)}
        case "S":
            return {f"{prefix}S": _similar_residual(cert.P, cert.P_inv, J)}
    m = cert.m
    residuals = {}
    if cert.inner is not None:
        residuals[f"{prefix}triangular"] = _scaled(J[:m, m:], J)
        residuals |= _relation_residuals(cert.inner, J[:m, :m], f"{prefix}u.")
    J22 = J[m:, m:]
    transpose = _transpose_residual(cert.P, cert.P_inv, J22)
    if cert.tag == "F_inf":
        residuals[f"{prefix}v.H"] = transpose
    else:
        residuals[f"{prefix}v.H|S"] = min(transpose, _similar_residual(cert.P, cert.P_inv, J22))
    return residuals


def verify_class(
    p: VectorFieldProblem,
    cert: ClassCertificate,
    samples: int = 64,
    seed: int = 0,
    box: float = 2.0,
    tol: float = CLASS_TOL,
) -> ClassReport:
    """Evaluate the class relations of ``cert`` for f′ and g′ at sampled states.

    Args:
      p: The vector field.
      cert: The claimed class and similarity matrices.
      samples: Number of states drawn uniformly from [−box, box]^n.
      seed: Seed of the sampler.
      box: Half-width of the sampling box.
      tol: Pass threshold on the max residual.

    Returns:
      Max and mean residual per relation. Residuals are relative to
      1 + ‖J‖_F of the Jacobian block under test.

    Raises:
      CertificateError: If the certificate does not fit the field.
    """
    rng = np.random.default_rng(seed)
    collected: dict[str, list[float]] = {}
    for y in rng.uniform(-box, box, size=(samples, p.n)):
        for label, J in (("f", p.f_jac(y)), ("g", p.g_jac(y))):
            for name, value in _relation_residuals(cert, J, f"{label}:").items():
                collected.setdefault(name, []).append(value)
    relations = {
        name: (float(np.max(values)), float(np.mean(values)))
        for name, values in collected.items()
    }
    report = ClassReport(cert.tag, relations, samples, tol)
    logger.info(
        "Class %s on %s: max residual %.3e (%s)",
        cert.tag,
        p.name or "problem",
        report.max_residual,
        "pass" if report.passed else "fail",
    )
    return report


def certify(
    p: VectorFieldProblem, cert: ClassCertificate, samples: int = 64, seed: int = 0
) -> ClassCertificate:
    """Verify ``cert`` on ``p`` and return it with the report attached.

    Raises:
      CertificateError: If a relation fails.
    """
    report = verify_class(p, cert, samples, seed)
    if not report.passed:
        raise CertificateError(
            f"Class {cert.tag} relation fails with residual {report.max_residual:.3e}"
        )
    return replace(cert, report=report)


def _parse_matrix(text: str) -> Matrix:
    rows = [row.split() for row in text.split(";")]
    try:
        return np.array([[float(x) for x in row] for row in rows])
    except ValueError as error:
        raise CertificateError(f"Malformed matrix {text!r}") from error


def parse_certificate(text: str) -> ClassCertificate:
    """Read a certificate from ``key = value`` lines.

    Keys are ``tag``, ``P`` (rows separated by ``;``), ``m`` and the same
    keys prefixed with ``inner.`` for the u-block.

    Raises:
      CertificateError: If the text is malformed.
    """
    values: dict[str, str] = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise CertificateError(f"Expected key = value, got {line!r}")
        values[key.strip()] = value.strip()
    return _certificate_from(values, "")


def _certificate_from(values: dict[str, str], prefix: str) -> ClassCertificate:
    try:
        tag = values[f"{prefix}tag"]
        P = _parse_matrix(values[f"{prefix}P"])
        m = int(values.get(f"{prefix}m", "0"))
    except KeyError as error:
        raise CertificateError(f"Certificate misses key {error.args[0]!r}") from None
    except ValueError as error:
        raise CertificateError(str(error)) from error
    inner = None
    if f"{prefix}inner.tag" in values:
        inner = _certificate_from(values, f"{prefix}inner.")
    return ClassCertificate(tag, P, m, inner)


def load_certificate(path: str | Path) -> ClassCertificate:
    try:
        text = Path(path).read_text()
    except OSError as error:
        raise CertificateError(f"Cannot read certificate {path}") from error
    return parse_certificate(text)


def e_matrix(h: float, K: ArrayLike, c: ArrayLike) -> BlockMatrix:
    """The grid E(hK) of blocks e^{(c_i−c_j)hK}; diagonal blocks are I."""
    return exponential_grid(h, K, c)


@dataclass(frozen=True, eq=False)
class _StepAlgebra:
    """The state-independent sn×sn matrices of a prepared stepper."""

    abar: Matrix
    abar_transposed: Matrix
    shift: Matrix
    node_stack: Matrix
    bbar: NDArray[np.float64]
    step_exponential: Matrix
    step_det: float


_ALGEBRA: "weakref.WeakKeyDictionary[Stepper, _StepAlgebra]" = weakref.WeakKeyDictionary()


def _algebra(stepper: Stepper) -> _StepAlgebra:
    if (algebra := _ALGEBRA.get(stepper)) is None:
        coefficients = stepper.coefficients
        t, h, K = stepper.tableau, stepper.h, stepper.first_order.K
        s, n = t.s, K.shape[0]
        back = [expm((c - 1.0) * h * K) for c in t.c]
        shift = np.block(
            [[back[i] @ coefficients.bbar[j] for j in range(s)] for i in range(s)]
        )
        algebra = _StepAlgebra(
            abar=coefficients.abar.to_dense(),
            abar_transposed=hadamard_kron(t.A.T, coefficients.differences).to_dense(),
            shift=shift,
            node_stack=coefficients.node_exponentials.reshape(s * n, n),
            bbar=coefficients.bbar,
            step_exponential=coefficients.step_exponential,
            step_det=det(coefficients.step_exponential),
        )
        if not t.is_ssei:
            logger.warning(
                "Tableau %s fails the SSEI gate; the VP condition does not characterize volume",
                t.name,
            )
        _ALGEBRA[stepper] = algebra
    return algebra


def _stage_jacobians(
    stepper: Stepper, y: ArrayLike, record: StepRecord | None
) -> tuple[StepRecord, NDArray[np.float64]]:
    y = np.asarray(y, dtype=float)
    if record is None:
        record = stepper.step(y)
    if not record.converged:
        logger.debug("Jacobian at a step that stopped with %s", record.stop_reason)
    stages = stepper.full_stages(y, record)
    return record, np.array([stepper.first_order.g_jac(k) for k in stages])


def step_jacobian(stepper: Stepper, y: ArrayLike, record: StepRecord | None = None) -> Matrix:
    """The exact Jacobian of the one-step map at ``y``.

    Args:
      stepper: The prepared method.
      y: The state the step starts from.
      record: The step taken from ``y``, if already computed.

    Raises:
      SingularMatrixError: If I − hĀF is singular.
    """
    algebra = _algebra(stepper)
    _, jacobians = _stage_jacobians(stepper, y, record)
    s, n, _ = jacobians.shape
    F = block_diag(jacobians).to_dense()
    X = solve_block(np.eye(s * n) - stepper.h * algebra.abar @ F, algebra.node_stack)
    weighted = np.einsum("iab,ibc,icd->ad", algebra.bbar, jacobians, X.reshape(s, n, n))
    return algebra.step_exponential + stepper.h * weighted


def _volume_ratio(algebra: _StepAlgebra, h: float, F: Matrix) -> float:
    identity = np.eye(F.shape[0])
    denominator = det(identity - h * algebra.abar @ F)
    if denominator == 0.0:
        raise SingularMatrixError("Stage Jacobian system is singular", 0)
    numerator = det(identity - h * (algebra.abar - algebra.shift) @ F)
    return algebra.step_det * numerator / denominator


def _vp_residual(algebra: _StepAlgebra, h: float, F: Matrix) -> float:
    identity = np.eye(F.shape[0])
    lhs = det(identity - h * algebra.abar @ F)
    rhs = algebra.step_det * det(identity + h * algebra.abar_transposed @ F)
    return (lhs - rhs) / max(abs(lhs), abs(rhs), 1.0)


def volume_ratio(stepper: Stepper, y: ArrayLike, record: StepRecord | None = None) -> float:
    """det Φ evaluated as a ratio of sn×sn determinants.

    Raises:
      SingularMatrixError: If I − hĀF is singular.
    """
    _, jacobians = _stage_jacobians(stepper, y, record)
    return _volume_ratio(_algebra(stepper), stepper.h, block_diag(jacobians).to_dense())


def vp_condition_residual(
    stepper: Stepper, y: ArrayLike, record: StepRecord | None = None
) -> float:
    """Scaled defect of |I − h(A⊗I.*E)F| = |e^{hK}|·|I + h(Aᵀ⊗I.*E)F|.

    The condition characterizes volume preservation only for tableaux that
    pass the SSEI gate.

    Returns:
      (LHS − RHS) / max(|LHS|, |RHS|, 1).
    """
    _, jacobians = _stage_jacobians(stepper, y, record)
    return _vp_residual(_algebra(stepper), stepper.h, block_diag(jacobians).to_dense())


def volume_target(stepper: Stepper) -> float:
    """The per-step determinant e^{h·trace K} of a volume-preserving step."""
    return math.exp(stepper.h * float(np.trace(stepper.first_order.K)))


def symplecticity_defect(
    stepper: Stepper,
    y: ArrayLike,
    J: ArrayLike | None = None,
    record: StepRecord | None = None,
) -> float:
    """‖ΦᵀJΦ − J‖_F, with J = [[0, I], [−I, 0]] unless given."""
    Phi = step_jacobian(stepper, y, record)
    if J is None:
        d = Phi.shape[0] // 2
        J = np.block([[np.zeros((d, d)), np.eye(d)], [-np.eye(d), np.zeros((d, d))]])
    J = np.asarray(J, dtype=float)
    if J.shape != Phi.shape:
        raise DimensionError(f"Structure matrix {J.shape} for a {Phi.shape} Jacobian")
    return float(np.linalg.norm(Phi.T @ J @ Phi - J))


def finite_difference_jacobian(stepper: Stepper, y: ArrayLike, eps: float = 1e-6) -> Matrix:
    """Central differences of the one-step map; a cross-check for ``step_jacobian``."""
    y = np.asarray(y, dtype=float)
    columns = []
    for j in range(y.size):
        e = np.zeros_like(y)
        e[j] = eps
        forward = stepper.step(y + e).y_next
        backward = stepper.step(y - e).y_next
        columns.append((forward - backward) / (2 * eps))
    return np.column_stack(columns)


@dataclass(eq=False)
class VolumeReport:
    """Per-step volume data along a trajectory.

    Attributes:
      times: Start time of each step.
      per_step_det: det Φ at each accepted step.
      vp_residual: Scaled VP-condition defect at each step.
      target: The determinant a volume-preserving step attains.
    """

    times: NDArray[np.float64]
    per_step_det: NDArray[np.float64]
    vp_residual: NDArray[np.float64]
    target: float = 1.0
    notes: list[str] = field(default_factory=list)

    @property
    def cumulative_log_drift(self) -> float:
        return float(self.log_drift[-1]) if self.log_drift.size else 0.0

    @property
    def log_drift(self) -> NDArray[np.float64]:
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.cumsum(np.log(np.abs(self.per_step_det)))

    @property
    def max_abs_det_minus_one(self) -> float:
        return _max_abs(self.per_step_det - 1.0)

    @property
    def max_abs_det_minus_target(self) -> float:
        return _max_abs(self.per_step_det - self.target)

    @property
    def max_abs_finite_deviation(self) -> float:
        """max |det − target| over the steps that produced a determinant."""
        return _max_abs(self.per_step_det[~np.isnan(self.per_step_det)] - self.target)

    @property
    def max_abs_vp_residual(self) -> float:
        return _max_abs(self.vp_residual)

    def write_csv(self, stream: IO[str], comments: Iterable[str] = ()) -> None:
        for line in [*comments, *self.notes]:
            stream.write(f"# {line}\n")
        writer = csv.writer(stream, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        drift = self.log_drift
        for i, (t, d, r) in enumerate(zip(self.times, self.per_step_det, self.vp_residual)):
            writer.writerow(
                [i, f"{t:.17g}", f"{d:.17g}", f"{abs(d - 1.0):.17g}", f"{r:.17g}", f"{drift[i]:.17g}"]
            )


def _max_abs(values: NDArray[np.float64]) -> float:
    if not values.size:
        return 0.0
    return float(np.abs(values).max()) if np.all(np.isfinite(values)) else math.inf


def volume_drift(trajectory: Trajectory, stepper: Stepper) -> VolumeReport:
    """Determinants and VP residuals at every accepted step of ``trajectory``.

    Steps whose stage iteration diverged are reported as NaN.

    Raises:
      SingularMatrixError: If a step Jacobian is undefined; the message names
        the step.
    """
    algebra = _algebra(stepper)
    steps = len(trajectory.records)
    dets = np.full(steps, np.nan)
    residuals = np.full(steps, np.nan)
    for i, record in enumerate(trajectory.records):
        if record.stop_reason == STOP_DIVERGED:
            continue
        _, jacobians = _stage_jacobians(stepper, trajectory.states[i], record)
        F = block_diag(jacobians).to_dense()
        try:
            dets[i] = _volume_ratio(algebra, stepper.h, F)
            residuals[i] = _vp_residual(algebra, stepper.h, F)
        except SingularMatrixError as error:
            raise SingularMatrixError(f"Step {i}: {error}", error.pivot) from error
    return VolumeReport(trajectory.times[:steps], dets, residuals, volume_target(stepper))
