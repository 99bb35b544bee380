"""Sparse storage helpers, BiCG, Uzawa, sparse LU and M-matrix analysis.

Matrices are ``scipy.sparse.csr_matrix`` in canonical form (sorted, unique
column indices per row).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.io
import scipy.sparse
import scipy.sparse.csgraph
import scipy.sparse.linalg

from .errors import BreakdownError, SingularMatrixError

logger = logging.getLogger(__name__)

DEFAULT_TOL = 1e-10


@dataclass
class SolveReport:
    iterations: int
    final_residual_norm: float
    converged: bool
    method: str = ""


def as_csr(A):
    """Canonical CSR copy (float64, sorted and summed duplicates)."""
    A = scipy.sparse.csr_matrix(A, dtype=float)
    A.sum_duplicates()
    A.sort_indices()
    return A


def _diag_inverse(M, n):
    if M is None:
        return None
    if scipy.sparse.issparse(M):
        d = M.diagonal()
    else:
        d = np.asarray(M, dtype=float)
        if d.ndim == 2:
            d = np.diag(d)
    if d.shape != (n,) or np.any(d == 0):
        raise ValueError("Jacobi preconditioner must be a nonzero diagonal of matching size")
    return 1.0 / d


def bicg_solve(A, b, tol=DEFAULT_TOL, max_iter=None, x0=None, jacobi=None):
    """Biconjugate gradients with optional Jacobi preconditioning.

    Returns ``(x, SolveReport)``.  Reaching ``max_iter`` is reported, not raised.
    A Lanczos breakdown (vanishing bi-orthogonality product with nonzero
    vectors) raises BreakdownError; a search direction in the null space of A
    means the system is singular and ends the iteration as non-converged.
    """
    A = as_csr(A)
    b = np.asarray(b, dtype=float)
    n = A.shape[0]
    if A.shape != (n, n) or b.shape != (n,):
        raise ValueError("bicg_solve needs a square matrix and matching right-hand side")
    max_iter = 10 * n if max_iter is None else int(max_iter)
    dinv = _diag_inverse(jacobi, n)
    At = A.T.tocsr()
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros(n), SolveReport(0, 0.0, True, "bicg")
    r = b - A @ x
    rt = r.copy()
    res = np.linalg.norm(r)
    if res <= tol * bnorm:
        return x, SolveReport(0, res / bnorm, True, "bicg")
    z = r if dinv is None else dinv * r
    zt = rt if dinv is None else dinv * rt
    p, pt = z.copy(), zt.copy()
    rho = rt @ z
    tiny = np.finfo(float).eps
    for it in range(1, max_iter + 1):
        q = A @ p
        qt = At @ pt
        denom = pt @ q
        if abs(denom) <= tiny * np.linalg.norm(pt) * np.linalg.norm(q) or denom == 0.0:
            if np.linalg.norm(q) <= 1e3 * tiny * np.linalg.norm(A.data, np.inf) * np.linalg.norm(p):
                return x, SolveReport(it, res / bnorm, False, "bicg")
            raise BreakdownError(f"BiCG breakdown at iteration {it}: p~.Ap = {denom:.3e}")
        alpha = rho / denom
        x += alpha * p
        r -= alpha * q
        rt -= alpha * qt
        res = np.linalg.norm(r)
        if res <= tol * bnorm:
            return x, SolveReport(it, res / bnorm, True, "bicg")
        z = r if dinv is None else dinv * r
        zt = rt if dinv is None else dinv * rt
        rho_new = rt @ z
        if abs(rho_new) <= tiny * np.linalg.norm(rt) * np.linalg.norm(z):
            raise BreakdownError(f"BiCG breakdown at iteration {it}: r~.r = {rho_new:.3e}")
        beta = rho_new / rho
        rho = rho_new
        p = z + beta * p
        pt = zt + beta * pt
    return x, SolveReport(max_iter, res / bnorm, False, "bicg")


class LUFactor:
    """Sparse LU with a fixed reverse Cuthill-McKee ordering."""

    def __init__(self, A):
        A = as_csr(A)
        n = A.shape[0]
        if A.shape != (n, n):
            raise ValueError("LU needs a square matrix")
        nnz_row = np.diff(A.indptr)
        nnz_col = np.bincount(A.indices, minlength=n)
        absA = abs(A)
        if np.any(nnz_row == 0) or np.any(np.asarray(absA.sum(axis=1)).ravel() == 0):
            raise SingularMatrixError("structurally singular matrix: empty row "
                                      f"{int(np.flatnonzero(np.asarray(absA.sum(axis=1)).ravel() == 0)[0])}")
        if np.any(nnz_col == 0):
            raise SingularMatrixError("structurally singular matrix: empty column")
        pattern = (absA + absA.T).tocsr()
        self.perm = scipy.sparse.csgraph.reverse_cuthill_mckee(pattern, symmetric_mode=True)
        self.iperm = np.empty_like(self.perm)
        self.iperm[self.perm] = np.arange(n)
        Ap = A[self.perm][:, self.perm].tocsc()
        try:
            self._lu = scipy.sparse.linalg.splu(Ap, permc_spec="NATURAL", diag_pivot_thresh=1.0,
                                                options={"SymmetricMode": False})
        except RuntimeError as exc:
            raise SingularMatrixError(f"sparse LU failed: {exc}") from None
        self.n = n
        self.A = A

    def solve(self, b):
        b = np.asarray(b, dtype=float)
        y = self._lu.solve(b[self.perm] if b.ndim == 1 else b[self.perm, :])
        x = y[self.iperm] if b.ndim == 1 else y[self.iperm, :]
        if not np.all(np.isfinite(x)):
            raise SingularMatrixError("sparse LU produced non-finite values (singular matrix)")
        return x


def sparse_lu_solve(A, b):
    """Direct solve; raises SingularMatrixError for (structurally) singular A."""
    lu = LUFactor(A)
    x = lu.solve(b)
    b = np.asarray(b, dtype=float)
    res = np.linalg.norm(lu.A @ x - b, np.inf)
    backward = abs(lu.A).max() * np.linalg.norm(x, np.inf) + np.linalg.norm(b, np.inf)
    if res > 1e-8 * backward:
        raise SingularMatrixError(f"sparse LU residual {res:.3e} indicates a singular matrix")
    return x


def estimate_spectral_radius(apply, n, iterations=30):
    """Power iteration from a fixed start vector (deterministic)."""
    v = np.cos(np.arange(n) * 0.7548776662466927) + 1.5
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iterations):
        w = apply(v)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        lam = float(v @ w)
        v = w / nw
    return abs(lam) if lam != 0 else nw


def uzawa_solve(A, B, f, P=None, rho=None, tol=DEFAULT_TOL, g=None, C=None, B_row=None,
                max_iter=5000, inner=None):
    """Preconditioned Uzawa iteration for [A B^T; B_row -C] [u; p] = [f; g].

    ``B_row`` defaults to ``B`` (symmetric saddle point).  ``P`` is a sparse SPD
    preconditioner for the pressure update (identity when omitted) and ``rho``
    the acceleration parameter.  When omitted, rho minimizes the preconditioned
    residual of the first update (scalar line search), capped at
    1.9/lambda_max of P^{-1}(B_row A^{-1} B^T + C) so the fixed-rho iteration
    stays contractive.
    Returns ``(u, p, SolveReport)``.
    """
    A = as_csr(A)
    B = as_csr(B)
    nu, npres = A.shape[0], B.shape[0]
    Br = B if B_row is None else as_csr(B_row)
    f = np.asarray(f, dtype=float)
    g = np.zeros(npres) if g is None else np.asarray(g, dtype=float)
    lu = inner if inner is not None else LUFactor(A)
    if B.nnz == 0 and (C is None or as_csr(C).nnz == 0):
        return lu.solve(f), np.zeros(npres), SolveReport(1, 0.0, True, "uzawa")
    Cm = None if C is None else as_csr(C)
    Plu = None
    if P is not None:
        Plu = LUFactor(P)
    pinv = (lambda r: r) if Plu is None else Plu.solve
    BT = B.T.tocsr()

    def schur(q):
        out = Br @ lu.solve(BT @ q)
        if Cm is not None:
            out = out + Cm @ q
        return pinv(out)

    p = np.zeros(npres)
    u = lu.solve(f)
    if rho is None:
        rho = _line_search_rho(schur, pinv(Br @ u - g), npres)
    scale = max(np.linalg.norm(Br @ u), np.linalg.norm(g), np.finfo(float).tiny)
    res = np.inf
    for it in range(1, max_iter + 1):
        r = Br @ u - g
        if Cm is not None:
            r = r - Cm @ p
        res = np.linalg.norm(r) / scale
        if res <= tol:
            return u, p, SolveReport(it, res, True, "uzawa")
        p = p + rho * pinv(r)
        u = lu.solve(f - BT @ p)
        if not np.isfinite(res):
            break
    logger.warning("Uzawa did not converge in %d iterations (residual %.3e); consider the direct solver",
                   max_iter, res)
    return u, p, SolveReport(max_iter, float(res), False, "uzawa")


def _line_search_rho(schur, z, n):
    lam = estimate_spectral_radius(schur, n)
    cap = 1.9 / lam if lam > 0 else 1.0
    if not np.any(z):
        return cap
    sz = schur(z)
    denom = sz @ sz
    rho = (z @ sz) / denom if denom > 0 else cap
    return float(min(rho, cap)) if rho > 0 else cap


@dataclass(frozen=True)
class MMatrixWitness:
    kind: str  # 'diagonal', 'entry' or 'column'
    index: tuple
    value: float


def is_m_matrix_column_dominant(A, tol=0.0):
    """Check diag > 0, off-diagonal <= tol and column sums >= -tol.

    Returns ``(flag, witness)``; witness is None when the check passes.
    ``tol`` is absolute and defaults to an exact test.
    """
    A = as_csr(A)
    n = A.shape[0]
    if A.shape != (n, n):
        raise ValueError("matrix must be square")
    d = A.diagonal()
    coo = A.tocoo()
    rows, cols, vals = coo.row, coo.col, coo.data
    order = np.lexsort((cols, rows))
    rows, cols, vals = rows[order], cols[order], vals[order]
    bad_diag = np.flatnonzero(d <= 0)
    off = rows != cols
    bad_off = np.flatnonzero(off & (vals > tol))
    first_entry = None
    if bad_off.size:
        k = bad_off[0]
        first_entry = (int(rows[k]), int(cols[k]), float(vals[k]))
    if bad_diag.size:
        i = int(bad_diag[0])
        if first_entry is None or (i, i) < first_entry[:2]:
            return False, MMatrixWitness("diagonal", (i, i), float(d[i]))
    if first_entry is not None:
        return False, MMatrixWitness("entry", first_entry[:2], first_entry[2])
    colsum = np.asarray(A.sum(axis=0)).ravel()
    bad_col = np.flatnonzero(colsum < -tol)
    if bad_col.size:
        j = int(bad_col[0])
        return False, MMatrixWitness("column", (j,), float(colsum[j]))
    return True, None


def dump_matrix_market(A, path, comment=""):
    scipy.io.mmwrite(str(path), as_csr(A), comment=comment, precision=17)
