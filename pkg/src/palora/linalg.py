"""Truncated SVD by one-sided Jacobi rotations, plus leverage scores."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ContractError, as_matrix

MAX_SWEEPS = 60
OFF_DIAGONAL_TOL = 1e-12
DEFAULT_ENERGY = 0.90


class ConvergenceError(RuntimeError):
    def __init__(self, residual: float, sweeps: int):
        super().__init__(f"Jacobi SVD did not converge after {sweeps} sweeps (residual {residual:.3e})")
        self.residual = residual
        self.sweeps = sweeps


@dataclass(frozen=True)
class TruncatedSvd:
    P: np.ndarray  # m x k, left singular vectors as columns
    S: np.ndarray  # k singular values, descending
    Q: np.ndarray  # k x n, right singular vectors as rows
    k: int

    def reconstruct(self) -> np.ndarray:
        return (self.P * self.S) @ self.Q


def _complete_basis(U: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Replace columns of ``U`` not flagged ``valid`` with an orthonormal completion."""
    m = U.shape[0]
    basis = [U[:, j] for j in range(U.shape[1]) if valid[j]]
    out = U.copy()
    candidates = iter(np.eye(m))
    for j in np.flatnonzero(~valid):
        while True:
            v = next(candidates).copy()
            for _ in range(2):  # twice is enough for Gram-Schmidt stability
                for b in basis:
                    v -= (b @ v) * b
            nv = np.linalg.norm(v)
            if nv > 1e-8:
                v /= nv
                break
        basis.append(v)
        out[:, j] = v
    return out


def _one_sided_jacobi(a: np.ndarray, max_sweeps: int, tol: float):
    """Orthogonalise the columns of ``a`` (tall or square). Returns (U, sigma, V)."""
    work = a.copy()
    n = work.shape[1]
    V = np.eye(n)
    residual = 0.0
    for sweep in range(max_sweeps):
        rotated = False
        residual = 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                ap, aq = work[:, p], work[:, q]
                alpha = ap @ ap
                beta = aq @ aq
                gamma = ap @ aq
                if alpha == 0.0 or beta == 0.0:
                    continue
                off = abs(gamma) / np.sqrt(alpha * beta)
                residual = max(residual, off)
                if off <= tol:
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.copysign(1.0, zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                new_p = c * ap - s * aq
                work[:, q] = s * ap + c * aq
                work[:, p] = new_p
                vp = V[:, p].copy()
                V[:, p] = c * vp - s * V[:, q]
                V[:, q] = s * vp + c * V[:, q]
        if not rotated:
            break
    else:
        raise ConvergenceError(residual, max_sweeps)

    sigma = np.linalg.norm(work, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma, work, V = sigma[order], work[:, order], V[:, order]
    # columns whose norm is at roundoff level carry no direction
    valid = sigma > sigma[0] * 1e-14 if sigma.size and sigma[0] > 0 else np.zeros(n, dtype=bool)
    U = np.zeros_like(work)
    U[:, valid] = work[:, valid] / sigma[valid]
    sigma = np.where(valid, sigma, 0.0)
    U = _complete_basis(U, valid)
    return U, sigma, V


def full_svd(w) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thin SVD ``w = U diag(s) Vt`` with r = min(m, n), sign-normalised."""
    t = truncated_svd(w, min(as_matrix(w).shape))
    return t.P, t.S, t.Q


def truncated_svd(w, k: int, *, max_sweeps: int = MAX_SWEEPS, tol: float = OFF_DIAGONAL_TOL) -> TruncatedSvd:
    """Top-``k`` SVD of ``w``.

    Jacobi runs on the smaller dimension. Each left singular vector is
    sign-flipped so its largest-magnitude entry is positive (first such entry
    on ties), with the matching right vector flipped alongside.
    """
    w = as_matrix(w)
    m, n = w.shape
    if not 1 <= k <= min(m, n):
        raise ContractError(f"k must be in [1, {min(m, n)}], got {k}")
    if not np.all(np.isfinite(w)):
        raise ContractError("matrix has non-finite entries")
    if m >= n:
        U, s, V = _one_sided_jacobi(w, max_sweeps, tol)
        left, right = U, V
    else:
        U, s, V = _one_sided_jacobi(w.T, max_sweeps, tol)
        left, right = V, U
    left, s, right = left[:, :k], s[:k], right[:, :k]
    pivots = np.argmax(np.abs(left), axis=0)
    signs = np.where(left[pivots, np.arange(k)] < 0, -1.0, 1.0)
    left = left * signs
    right = right * signs
    return TruncatedSvd(P=left, S=s.copy(), Q=right.T.copy(), k=k)


def leverage_scores(svd: TruncatedSvd) -> tuple[np.ndarray, np.ndarray]:
    """Row scores ``||P[i, :]||^2`` and column scores ``||Q[:, j]||^2``."""
    rows = np.sum(svd.P**2, axis=1)
    cols = np.sum(svd.Q**2, axis=0)
    return rows, cols


def choose_rank_k(singular_values, energy: float = DEFAULT_ENERGY) -> int:
    """Smallest k whose leading squared singular values hold ``energy`` of the total."""
    s = np.asarray(singular_values, dtype=np.float64).reshape(-1)
    if s.size == 0:
        raise ContractError("empty spectrum")
    if not 0.0 < energy <= 1.0:
        raise ContractError(f"energy must be in (0, 1], got {energy}")
    mass = np.cumsum(s**2)
    total = mass[-1]
    if total == 0.0:
        return 1
    k = int(np.searchsorted(mass, energy * total, side="left")) + 1
    return min(k, s.size)
