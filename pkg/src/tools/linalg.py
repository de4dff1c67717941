"""Dense real linear algebra for adapter construction and rank diagnostics.

Matrices are 2-D float64 numpy arrays. The SVD is a one-sided (Hestenes)
Jacobi iteration with round-robin pair ordering, so every step rotates a
set of disjoint column pairs at once. Results are deterministic: the same
input bits always produce the same factor bits.
"""

import logging
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from utils.errors import InvalidInputError, NumericalError, RangeError

logger = logging.getLogger(__name__)

# Off-diagonal tolerance per row, relative to the column norms of the pair.
JACOBI_TOL = np.finfo(np.float64).eps
MAX_SWEEPS = 80
DEFAULT_RANK_TOL = 1e-12


def as_dense(M, name: str = "matrix") -> np.ndarray:
    """Validate and convert input to a finite 2-D float64 array."""
    arr = np.asarray(M, dtype=np.float64)
    if arr.ndim != 2:
        raise InvalidInputError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise InvalidInputError(f"{name} must have at least one row and column, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite entries")
    return np.ascontiguousarray(arr)


@dataclass(frozen=True)
class SvdFactors:
    """Thin SVD factors: M = U @ diag(sigma) @ V.T.

    U is d x p, V is k x p, sigma is nonincreasing with length p.
    """

    U: np.ndarray
    sigma: np.ndarray
    V: np.ndarray

    def __post_init__(self):
        for arr in (self.U, self.sigma, self.V):
            arr.flags.writeable = False

    @property
    def width(self) -> int:
        return int(self.sigma.shape[0])

    def reconstruct(self) -> np.ndarray:
        return (self.U * self.sigma) @ self.V.T


@dataclass(frozen=True)
class RankMeasures:
    """Effective-rank summary of a matrix."""

    participation_ratio: float
    eps_rank: int
    epsilon: float
    frobenius_norm: float

    def to_dict(self) -> dict:
        return {
            "participation_ratio": self.participation_ratio,
            "eps_rank": self.eps_rank,
            "epsilon": self.epsilon,
            "frobenius_norm": self.frobenius_norm,
        }


def _round_robin_schedule(n: int) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Pairings of n columns such that every pair meets once per sweep."""
    players = list(range(n)) + ([-1] if n % 2 else [])
    m = len(players)
    schedule = []
    for _ in range(m - 1):
        left, right = [], []
        for i in range(m // 2):
            a, b = players[i], players[m - 1 - i]
            if a >= 0 and b >= 0:
                left.append(min(a, b))
                right.append(max(a, b))
        schedule.append((np.array(left, dtype=np.intp), np.array(right, dtype=np.intp)))
        # Keep player 0 fixed, rotate the rest
        players = [players[0], players[-1]] + players[1:-1]
    return schedule


def _jacobi_tall(A: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One-sided Jacobi on a tall matrix (rows >= cols)."""
    m, n = A.shape
    G = A.copy()
    V = np.eye(n)
    if n == 1:
        return G, np.linalg.norm(G, axis=0), V

    schedule = _round_robin_schedule(n)
    tol = JACOBI_TOL * m
    # Columns at or below this squared norm are roundoff and never rotate
    negligible = (tol * np.linalg.norm(A)) ** 2
    for sweep in range(MAX_SWEEPS):
        rotated = False
        for left, right in schedule:
            gp = G[:, left]
            gq = G[:, right]
            alpha = np.einsum("ij,ij->j", gp, gp)
            beta = np.einsum("ij,ij->j", gq, gq)
            gamma = np.einsum("ij,ij->j", gp, gq)

            active = np.abs(gamma) > tol * np.sqrt(alpha * beta)
            active &= (alpha > negligible) & (beta > negligible)
            if not np.any(active):
                continue
            rotated = True

            left_a, right_a = left[active], right[active]
            alpha_a, beta_a, gamma_a = alpha[active], beta[active], gamma[active]
            zeta = (beta_a - alpha_a) / (2.0 * gamma_a)
            # sqrt(1 + zeta^2) written so it cannot overflow for huge |zeta|
            big = np.maximum(np.abs(zeta), 1.0)
            hyp = big * np.sqrt((1.0 / big) ** 2 + (zeta / big) ** 2)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + hyp)
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t

            gp_a = G[:, left_a]
            gq_a = G[:, right_a]
            G[:, left_a] = c * gp_a - s * gq_a
            G[:, right_a] = s * gp_a + c * gq_a

            vp = V[:, left_a]
            vq = V[:, right_a]
            V[:, left_a] = c * vp - s * vq
            V[:, right_a] = s * vp + c * vq

        if not rotated:
            logger.debug(f"Jacobi SVD {m}x{n} converged after {sweep + 1} sweep(s)")
            return G, np.linalg.norm(G, axis=0), V

    raise NumericalError("Jacobi SVD did not converge", rows=m, cols=n)


def _complete_orthonormal(U: np.ndarray, null_cols: np.ndarray) -> np.ndarray:
    """Replace the given columns of U with an orthonormal completion.

    Candidates are the standard basis vectors in order, orthogonalised twice
    against every accepted column.
    """
    U = U.copy()
    d = U.shape[0]
    keep = np.ones(U.shape[1], dtype=bool)
    keep[null_cols] = False
    basis = [U[:, j] for j in np.flatnonzero(keep)]
    candidate = 0
    for col in null_cols:
        while candidate < d:
            e = np.zeros(d)
            e[candidate] = 1.0
            candidate += 1
            for _ in range(2):
                for b in basis:
                    e -= (b @ e) * b
            norm = np.linalg.norm(e)
            if norm > 1e-8:
                e /= norm
                U[:, col] = e
                basis.append(e)
                break
    return U


def _fix_signs(U: np.ndarray, V: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Make the largest-magnitude entry of each U column positive."""
    idx = np.argmax(np.abs(U), axis=0)
    signs = np.where(U[idx, np.arange(U.shape[1])] < 0, -1.0, 1.0)
    return U * signs, V * signs


def svd(W) -> SvdFactors:
    """Full thin SVD with p = min(rows, cols)."""
    A = as_dense(W, "W")
    rows, cols = A.shape
    transposed = rows < cols
    if transposed:
        A = A.T.copy()

    G, sigma, V = _jacobi_tall(A)

    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    G = G[:, order]
    V = V[:, order]

    U = np.zeros_like(G)
    # Same cutoff as the Jacobi negligible-column test
    scale = float(np.linalg.norm(A))
    null = sigma <= scale * JACOBI_TOL * max(A.shape)
    if scale == 0.0:
        null[:] = True
    nonnull = ~null
    U[:, nonnull] = G[:, nonnull] / sigma[nonnull]
    if np.any(null):
        U = _complete_orthonormal(U, np.flatnonzero(null))

    if transposed:
        U, V = V, U

    U, V = _fix_signs(U, V)
    return SvdFactors(
        U=np.ascontiguousarray(U), sigma=np.ascontiguousarray(sigma), V=np.ascontiguousarray(V)
    )


def truncate(f: SvdFactors, offset: int, r: int) -> SvdFactors:
    """Columns offset..offset+r of U and V and the matching sigma window."""
    p = f.width
    if offset < 0 or r < 1 or offset + r > p:
        raise RangeError(
            f"SVD window [{offset}, {offset + r}) out of range for width {p}",
            offset=offset,
            r=r,
            p=p,
        )
    window = slice(offset, offset + r)
    return SvdFactors(
        U=np.ascontiguousarray(f.U[:, window]),
        sigma=np.ascontiguousarray(f.sigma[window]),
        V=np.ascontiguousarray(f.V[:, window]),
    )


def singular_values(M) -> np.ndarray:
    return svd(M).sigma


def frobenius(M) -> float:
    A = as_dense(M)
    return float(np.sqrt(np.sum(A * A)))


def spectral_norm(M) -> float:
    sigma = singular_values(M)
    return float(sigma[0])


def numerical_rank(M, tol: float = DEFAULT_RANK_TOL) -> int:
    """Count of singular values above tol * sigma_1 * max(rows, cols)."""
    if tol <= 0:
        raise RangeError(f"tol must be positive, got {tol}")
    A = as_dense(M)
    sigma = singular_values(A)
    if sigma[0] == 0.0:
        return 0
    return int(np.count_nonzero(sigma > tol * sigma[0] * max(A.shape)))


def rank_measures(M, epsilon: float = 0.01) -> RankMeasures:
    """Participation ratio and epsilon-rank of M."""
    if not 0.0 < epsilon < 1.0:
        raise RangeError(f"epsilon must lie in (0, 1), got {epsilon}")
    A = as_dense(M)
    sigma = singular_values(A)
    fro = frobenius(A)
    if sigma[0] == 0.0:
        return RankMeasures(participation_ratio=0.0, eps_rank=0, epsilon=epsilon, frobenius_norm=fro)

    total = float(np.sum(sigma))
    squares = float(np.sum(sigma * sigma))
    ratio = total * total / squares
    eps_rank = int(np.count_nonzero(sigma > epsilon * sigma[0]))
    return RankMeasures(
        participation_ratio=ratio, eps_rank=eps_rank, epsilon=epsilon, frobenius_norm=fro
    )
