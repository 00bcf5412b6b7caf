"""Small dense SVD via one-sided Jacobi rotations.

The matrices this package decomposes are tiny (a handful of unit-norm rows,
at most a few hundred columns), so a Jacobi scheme is plenty fast, easy to
make bitwise reproducible, and avoids any dependence on the vagaries of a
LAPACK driver.  The inner sweep is JIT-compiled with numba when available;
the pure-Python fallback runs the exact same arithmetic in the same order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, ShapeError

try:
    from numba import njit
except ImportError:  # pragma: no cover - numba is a declared dependency
    njit = None

JACOBI_TOL = 1e-12
JACOBI_MAX_SWEEPS = 60


def _sweep_columns(b, v, tol, max_sweeps):
    """Orthogonalize the columns of ``b`` in place by plane rotations.

    ``v`` accumulates the applied rotations.  Returns the number of sweeps
    performed, or -1 if the normalized off-diagonal mass never fell to
    ``tol`` within ``max_sweeps``.

    Columns whose norm drops below ~1e-14 of the matrix scale are treated
    as zero and skipped: rotating two exactly parallel columns leaves an
    epsilon-sized residue that would otherwise re-correlate forever.
    """
    p = b.shape[0]
    q = b.shape[1]
    fro2 = 0.0
    for i in range(q):
        for k in range(p):
            fro2 += b[k, i] * b[k, i]
    zero2 = fro2 * 1e-28
    for sweep in range(max_sweeps):
        off = 0.0
        for i in range(q - 1):
            for j in range(i + 1, q):
                alpha = 0.0
                beta = 0.0
                gamma = 0.0
                for k in range(p):
                    alpha += b[k, i] * b[k, i]
                    beta += b[k, j] * b[k, j]
                    gamma += b[k, i] * b[k, j]
                if alpha <= zero2 or beta <= zero2:
                    continue
                conv = abs(gamma) / np.sqrt(alpha * beta)
                if conv > off:
                    off = conv
                if conv <= tol:
                    continue
                zeta = (beta - alpha) / (2.0 * gamma)
                if zeta >= 0.0:
                    t = 1.0 / (zeta + np.sqrt(1.0 + zeta * zeta))
                else:
                    t = -1.0 / (-zeta + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                for k in range(p):
                    bi = b[k, i]
                    bj = b[k, j]
                    b[k, i] = c * bi - s * bj
                    b[k, j] = s * bi + c * bj
                for k in range(q):
                    vi = v[k, i]
                    vj = v[k, j]
                    v[k, i] = c * vi - s * vj
                    v[k, j] = s * vi + c * vj
        if off <= tol:
            return sweep + 1
    return -1


_sweep_columns_py = _sweep_columns
if njit is not None:
    _sweep_columns = njit(cache=True)(_sweep_columns)


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD ``a = U @ diag(S) @ V.T``.

    ``S`` is sorted descending and non-negative; ``U`` (m x r) and ``V``
    (n x r) have orthonormal columns, r = min(m, n).
    """

    U: np.ndarray
    S: np.ndarray
    V: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.U * self.S) @ self.V.T


def _max_offdiag(b: np.ndarray) -> float:
    norms = np.sqrt((b * b).sum(axis=0))
    scale = np.outer(norms, norms)
    g = np.abs(b.T @ b)
    np.fill_diagonal(g, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = np.where(scale > 0.0, g / scale, 0.0)
    return float(ratio.max()) if ratio.size else 0.0


def _complete_columns(u: np.ndarray, missing: np.ndarray) -> None:
    """Fill zero columns of ``u`` with an orthonormal completion.

    Candidates are standard basis vectors; for each missing slot the one
    with the largest residual after projecting out the current columns is
    taken (deterministic, stable for the near-axis cases that arise here).
    """
    p = u.shape[0]
    present = [k for k in range(u.shape[1]) if k not in set(missing)]
    basis = list(present)
    for j in missing:
        best_res = None
        best_norm = -1.0
        for cand in range(p):
            r = np.zeros(p)
            r[cand] = 1.0
            for k in basis:
                r -= (u[:, k] @ r) * u[:, k]
            n = float(np.sqrt(r @ r))
            if n > best_norm:
                best_norm = n
                best_res = r / n if n > 0.0 else r
        u[:, j] = best_res
        basis.append(j)


def jacobi_svd(a, tol: float = JACOBI_TOL, max_sweeps: int = JACOBI_MAX_SWEEPS) -> SvdResult:
    """One-sided Jacobi SVD of a 2-D array.

    Deterministic for a fixed input: singular values are sorted descending
    and the first nonzero entry of every column of ``U`` is non-negative.
    Raises :class:`NumericalError` (carrying the residual) if the sweep cap
    is exhausted before convergence.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"svd expects a matrix, got shape {a.shape}")
    if not np.isfinite(a).all():
        raise NumericalError("svd input contains non-finite entries")
    m, n = a.shape
    transposed = m < n
    b = np.ascontiguousarray(a.T if transposed else a).copy()
    q = b.shape[1]
    v = np.eye(q)
    sweeps = _sweep_columns(b, v, tol, max_sweeps)
    if sweeps < 0:
        res = _max_offdiag(b)
        raise NumericalError(
            f"jacobi svd did not converge in {max_sweeps} sweeps "
            f"(max normalized off-diagonal {res:.3e})",
            residual=res,
        )
    norms = np.sqrt((b * b).sum(axis=0))
    # columns the sweep treated as zero become exact zeros (their content is
    # rotation residue, not a meaningful singular direction)
    dead = norms <= np.sqrt((b * b).sum()) * 1e-14
    b[:, dead] = 0.0
    norms[dead] = 0.0
    order = np.argsort(-norms, kind="stable")
    s = norms[order]
    w = b[:, order]
    rot = v[:, order]

    left = np.zeros_like(w)
    nonzero = s > 0.0
    left[:, nonzero] = w[:, nonzero] / s[nonzero]
    missing = np.flatnonzero(~nonzero)
    if missing.size:
        _complete_columns(left, missing)

    if transposed:
        u_out, v_out = rot, left
    else:
        u_out, v_out = left, rot

    # sign convention: first nonzero entry of each U column non-negative
    for j in range(u_out.shape[1]):
        col = u_out[:, j]
        nz = np.flatnonzero(col != 0.0)
        if nz.size and col[nz[0]] < 0.0:
            u_out[:, j] = -col
            v_out[:, j] = -v_out[:, j]

    return SvdResult(U=u_out, S=s, V=v_out)


def nuclear_norm_value(a) -> float:
    """Sum of singular values, as a plain float (no gradient bookkeeping)."""
    return float(jacobi_svd(a).S.sum())
