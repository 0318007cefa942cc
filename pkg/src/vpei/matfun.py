"""Dense matrix utilities and the matrix functions the integrators need.

All matrices are real ``numpy`` arrays of dtype float64. Nothing in this
module keeps state, so every function is safe to call from several threads.
"""

from dataclasses import dataclass
from typing import Final
import math
import warnings

import numpy as np
import scipy.linalg
from numpy.typing import ArrayLike, NDArray

from .errors import (
    DimensionError,
    MatrixRangeError,
    PreconditionError,
    SingularMatrixError,
)

Matrix = NDArray[np.float64]

COMMUTATION_TOL: Final[float] = 1e-12
# Pade degree 13 is accurate up to this 1-norm without scaling.
PADE13_THETA: Final[float] = 5.371920351148152
MAX_SQUARINGS: Final[int] = 64
TRIG_SERIES_TERMS: Final[int] = 40


def as_square(M: ArrayLike, name: str = "matrix") -> Matrix:
    """Return ``M`` as a finite square float array.

    Raises:
      DimensionError: If ``M`` is not a non-empty square 2-D array.
      MatrixRangeError: If ``M`` has non-finite entries.
    """
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1] or M.shape[0] < 1:
        raise DimensionError(f"{name} must be square, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise MatrixRangeError(f"{name} has non-finite entries")
    return M


@dataclass(frozen=True, eq=False)
class BlockMatrix:
    """A grid of equally sized square blocks.

    Attributes:
      blocks: Array of shape (block_rows, block_cols, block_dim, block_dim).
    """

    blocks: NDArray[np.float64]

    def __post_init__(self):
        shape = np.shape(self.blocks)
        if len(shape) != 4 or shape[2] != shape[3] or 0 in shape:
            raise DimensionError(f"Invalid block grid shape {shape}")

    @property
    def block_rows(self) -> int:
        return self.blocks.shape[0]

    @property
    def block_cols(self) -> int:
        return self.blocks.shape[1]

    @property
    def block_dim(self) -> int:
        return self.blocks.shape[2]

    def __getitem__(self, index):
        return self.blocks[index]

    @classmethod
    def identity(cls, s: int, n: int) -> "BlockMatrix":
        blocks = np.zeros((s, s, n, n))
        for i in range(s):
            blocks[i, i] = np.eye(n)
        return cls(blocks)

    @classmethod
    def from_dense(cls, M: ArrayLike, block_dim: int) -> "BlockMatrix":
        M = np.asarray(M, dtype=float)
        rows, cols = M.shape
        if rows % block_dim or cols % block_dim:
            raise DimensionError(
                f"Shape {M.shape} is not a multiple of block size {block_dim}"
            )
        r, c = rows // block_dim, cols // block_dim
        blocks = M.reshape(r, block_dim, c, block_dim).transpose(0, 2, 1, 3)
        return cls(blocks.copy())

    def to_dense(self) -> Matrix:
        r, c, d, _ = self.blocks.shape
        return self.blocks.transpose(0, 2, 1, 3).reshape(r * d, c * d)

    def transpose(self) -> "BlockMatrix":
        """The transpose of the flat matrix, as a block grid."""
        return BlockMatrix(self.blocks.transpose(1, 0, 3, 2))


def block_diag(blocks: ArrayLike) -> BlockMatrix:
    """Place ``blocks`` (shape (s, n, n)) on the diagonal of an s×s grid."""
    blocks = np.asarray(blocks, dtype=float)
    s, n, _ = blocks.shape
    grid = np.zeros((s, s, n, n))
    for i in range(s):
        grid[i, i] = blocks[i]
    return BlockMatrix(grid)


def hadamard_kron(A: ArrayLike, E: BlockMatrix) -> BlockMatrix:
    """Evaluate (A⊗I) .* E, i.e. scale block (i, j) of ``E`` by a_ij."""
    A = np.asarray(A, dtype=float)
    if A.shape != (E.block_rows, E.block_cols):
        raise DimensionError(
            f"Coefficient shape {A.shape} does not match block grid "
            f"{(E.block_rows, E.block_cols)}"
        )
    return BlockMatrix(A[:, :, None, None] * E.blocks)


def expm(M: ArrayLike) -> Matrix:
    """Matrix exponential by scaling and squaring with a Pade kernel.

    Args:
      M: A square matrix.

    Returns:
      e^M, of the same shape as ``M``.

    Raises:
      DimensionError: If ``M`` is not square.
      MatrixRangeError: If ``M`` is not finite, needs more squarings than
        ``MAX_SQUARINGS`` or the result overflows.
    """
    M = as_square(M)
    if not M.any():
        return np.eye(M.shape[0])
    norm = np.linalg.norm(M, 1)
    squarings = max(0, math.ceil(math.log2(norm / PADE13_THETA)))
    if squarings > MAX_SQUARINGS:
        raise MatrixRangeError(
            f"Matrix norm {norm:.3e} exceeds the scaling budget of expm"
        )
    with np.errstate(over="ignore", invalid="ignore"):
        E = scipy.linalg.expm(M)
    if not np.all(np.isfinite(E)):
        raise MatrixRangeError("Matrix exponential overflowed")
    return E


def phi_all(k: int, M: ArrayLike) -> list[Matrix]:
    """Evaluate φ_0(M), ..., φ_k(M) from one augmented exponential.

    The block matrix [[M, I, 0, ...], [0, 0, I, ...], ..., [0, ..., 0]] of
    size (k+1)n has φ_0(M), ..., φ_k(M) along its first block row after
    exponentiation.

    Raises:
      PreconditionError: If ``k`` is negative.
    """
    if k < 0:
        raise PreconditionError(f"φ-function index must be ≥ 0, got {k}")
    M = as_square(M)
    n = M.shape[0]
    if k == 0:
        return [expm(M)]
    W = np.zeros(((k + 1) * n, (k + 1) * n))
    W[:n, :n] = M
    for i in range(k):
        W[i * n : (i + 1) * n, (i + 1) * n : (i + 2) * n] = np.eye(n)
    E = expm(W)
    return [E[:n, j * n : (j + 1) * n] for j in range(k + 1)]


def phi(k: int, M: ArrayLike) -> Matrix:
    """Evaluate the exponential φ-function φ_k(M).

    φ_0(z) = e^z and φ_k(z) = ∫_0^1 e^{(1-σ)z} σ^{k-1}/(k-1)! dσ for k ≥ 1.
    """
    return phi_all(k, M)[k]


def _trig_series(W: Matrix) -> tuple[Matrix, Matrix]:
    n = W.shape[0]
    pair = []
    for i in (0, 1):
        term = np.eye(n)
        total = term.copy()
        for l in range(1, TRIG_SERIES_TERMS):
            term = -(term @ W) / ((2 * l + i - 1) * (2 * l + i))
            total += term
            if np.abs(term).max() <= np.finfo(float).eps * np.abs(total).max():
                break
        pair.append(total)
    return pair[0], pair[1]


def phi_trig_pair(V: ArrayLike) -> tuple[Matrix, Matrix]:
    """Evaluate (ϕ_0(V), ϕ_1(V)) with ϕ_i(V) = Σ_l (-1)^l V^l / (2l+i)!.

    Large arguments are scaled by 4^-j and recovered with the double-angle
    recursions ϕ_0(4W) = 2ϕ_0(W)² - I and ϕ_1(4W) = ϕ_1(W)ϕ_0(W).
    """
    V = as_square(V)
    norm = np.linalg.norm(V, 1)
    halvings = 0 if norm <= 1.0 else math.ceil(math.log(norm, 4))
    cos_part, sinc_part = _trig_series(V / 4.0**halvings)
    identity = np.eye(V.shape[0])
    for _ in range(halvings):
        cos_part, sinc_part = 2.0 * cos_part @ cos_part - identity, sinc_part @ cos_part
    return cos_part, sinc_part


def phi_trig(i: int, V: ArrayLike) -> Matrix:
    """Evaluate ϕ_i(V) for i ∈ {0, 1}, the matrix cos(√V) and sin(√V)/√V.

    Raises:
      PreconditionError: If ``i`` is neither 0 nor 1.
      DimensionError: If ``V`` is not square.
    """
    if i not in (0, 1):
        raise PreconditionError(f"ϕ index must be 0 or 1, got {i}")
    return phi_trig_pair(V)[i]


def commutes(N: ArrayLike, Omega: ArrayLike, tol: float = COMMUTATION_TOL) -> bool:
    """Whether ‖NΩ - ΩN‖_F ≤ tol·(1 + ‖N‖_F‖Ω‖_F)."""
    N = np.asarray(N, dtype=float)
    Omega = np.asarray(Omega, dtype=float)
    defect = np.linalg.norm(N @ Omega - Omega @ N)
    return bool(defect <= tol * (1.0 + np.linalg.norm(N) * np.linalg.norm(Omega)))


def second_order_matrix(N: ArrayLike, Omega: ArrayLike) -> Matrix:
    """The first-order matrix K = [[0, I], [-Ω, N]] of q'' - Nq' + Ωq = ..."""
    N = as_square(N, "N")
    Omega = as_square(Omega, "Omega")
    if N.shape != Omega.shape:
        raise DimensionError(f"N {N.shape} and Omega {Omega.shape} differ in shape")
    n = N.shape[0]
    K = np.zeros((2 * n, 2 * n))
    K[:n, n:] = np.eye(n)
    K[n:, :n] = -Omega
    K[n:, n:] = N
    return K


def exp_blocks(x: float, K: ArrayLike, n: int) -> tuple[Matrix, Matrix, Matrix, Matrix]:
    """Partition e^{xK} into its four n×n blocks."""
    E = expm(x * np.asarray(K, dtype=float))
    return E[:n, :n], E[:n, n:], E[n:, :n], E[n:, n:]


def second_order_exp_blocks(
    h: float, N: ArrayLike, Omega: ArrayLike
) -> tuple[Matrix, Matrix, Matrix, Matrix]:
    """The blocks (exp¹¹, exp¹², exp²¹, exp²²) of e^{hK}, K = [[0, I], [-Ω, N]].

    The blocks come from the flat 2n×2n exponential, so a singular N² - 4Ω
    needs no special treatment.

    Raises:
      PreconditionError: If N and Ω do not commute. Use ``exp_blocks`` on
        ``second_order_matrix(N, Omega)`` instead.
    """
    K = second_order_matrix(N, Omega)
    if not commutes(N, Omega):
        raise PreconditionError("N and Omega do not commute")
    return exp_blocks(h, K, np.shape(N)[0])


def _lu(M: Matrix) -> tuple[Matrix, NDArray[np.int32]]:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
        return scipy.linalg.lu_factor(M, check_finite=False)


def det(M: ArrayLike) -> float:
    """Determinant by pivoted LU elimination; a singular matrix gives 0."""
    M = as_square(M)
    lu, piv = _lu(M)
    swaps = np.count_nonzero(piv != np.arange(piv.size))
    sign = -1.0 if swaps % 2 else 1.0
    return sign * float(np.prod(np.diag(lu)))


def solve_block(S: BlockMatrix | ArrayLike, rhs: ArrayLike) -> NDArray[np.float64]:
    """Solve S·X = rhs for a block system.

    Args:
      S: The system as a block grid or a flat square matrix.
      rhs: Stacked right-hand sides of shape (s·n,) or (s·n, m).

    Returns:
      X with the shape of ``rhs``.

    Raises:
      DimensionError: If the shapes are inconsistent.
      SingularMatrixError: If elimination meets a vanishing pivot.
    """
    dense = S.to_dense() if isinstance(S, BlockMatrix) else as_square(S)
    rhs = np.asarray(rhs, dtype=float)
    if rhs.shape[0] != dense.shape[0]:
        raise DimensionError(
            f"Right-hand side with {rhs.shape[0]} rows for a "
            f"{dense.shape[0]}×{dense.shape[0]} system"
        )
    lu, piv = _lu(dense)
    pivots = np.abs(np.diag(lu))
    floor = np.finfo(float).eps * dense.shape[0] * np.abs(dense).max()
    if (small := np.flatnonzero(pivots <= floor)).size:
        raise SingularMatrixError("Block system is singular", int(small[0]))
    return scipy.linalg.lu_solve((lu, piv), rhs, check_finite=False)
