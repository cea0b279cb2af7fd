"""Sparse robust-penalty minimization.

An objective is a :class:`TermStack`: a sum of terms ``multiplier * sum_i
weight_i * rho(r_i)`` with residual ``r = A x - b`` for a sparse linear
operator ``A``. ``rho`` is either the smooth L1 approximation
``phi(r) = sqrt(r^2 + eps)`` or the square ``r^2``.

Minimization is iteratively reweighted least squares: each outer iteration
fixes the weights ``1 / phi(r)`` of the robust terms (a majorizer of the true
objective), assembles the normal equations of all terms and solves them with
conjugate gradient preconditioned by a zero-fill incomplete Cholesky factor.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numba
import numpy as np
import scipy.sparse as sp

from .imaging import FlowField

logger = logging.getLogger(__name__)

ROBUST = "robust"
QUADRATIC = "quadratic"


class SolverError(RuntimeError):
    """An inner linear solve failed to reach its tolerance."""


# --------------------------------------------------------------------------
# Linear operators
# --------------------------------------------------------------------------


@dataclass
class LinearOperator:
    """A sparse matrix tagged with the kind of operator it realizes."""

    kind: str
    matrix: sp.csr_matrix

    def __post_init__(self):
        self.matrix = sp.csr_matrix(self.matrix)

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape

    def apply(self, x: np.ndarray) -> np.ndarray:
        return self.matrix @ x

    def adjoint(self, y: np.ndarray) -> np.ndarray:
        return self.matrix.T @ y

    def annihilates_constants(self) -> bool:
        return bool(np.allclose(self.matrix @ np.ones(self.shape[1]), 0.0))


def identity(n: int) -> LinearOperator:
    return LinearOperator("identity", sp.identity(n, format="csr"))


def _difference(h: int, w: int, axis: int) -> sp.csr_matrix:
    n = h * w
    idx = np.arange(n).reshape(h, w)
    if axis == 1:
        src, dst = idx[:, :-1].ravel(), idx[:, 1:].ravel()
    else:
        src, dst = idx[:-1, :].ravel(), idx[1:, :].ravel()
    rows = np.concatenate([src, src])
    cols = np.concatenate([dst, src])
    vals = np.concatenate([np.ones(src.size), -np.ones(src.size)])
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


def grad_x(h: int, w: int) -> LinearOperator:
    """Forward horizontal difference on an ``h x w`` grid; last-column rows are zero."""
    return LinearOperator("grad_x", _difference(h, w, axis=1))


def grad_y(h: int, w: int) -> LinearOperator:
    return LinearOperator("grad_y", _difference(h, w, axis=0))


def frame_select(n_frames: int, frame: int, npix: int) -> LinearOperator:
    """Extract the pixels of one frame from a stacked (frames x pixels) vector."""
    rows = np.arange(npix)
    cols = frame * npix + rows
    m = sp.csr_matrix((np.ones(npix), (rows, cols)), shape=(npix, n_frames * npix))
    return LinearOperator("selection", m)


def mask_select(mask: np.ndarray) -> LinearOperator:
    """One row per ``True`` entry of a flattened mask."""
    mask = np.asarray(mask, dtype=bool).ravel()
    cols = np.flatnonzero(mask)
    m = sp.csr_matrix((np.ones(cols.size), (np.arange(cols.size), cols)), shape=(cols.size, mask.size))
    return LinearOperator("selection", m)


def rounded_flow_targets(flow: FlowField) -> tuple[np.ndarray, np.ndarray]:
    """Source pixel indices and their rounded flow targets, out-of-frame rows dropped."""
    h, w = flow.shape
    ys, xs = np.mgrid[0:h, 0:w]
    tx = np.rint(xs + flow.u).astype(int)
    ty = np.rint(ys + flow.v).astype(int)
    ok = (tx >= 0) & (tx < w) & (ty >= 0) & (ty < h)
    src = (ys * w + xs)[ok]
    dst = (ty * w + tx)[ok]
    return src, dst


def flow_difference(flow: FlowField, frame: int, n_frames: int) -> LinearOperator:
    """Rows ``x[t+1, round(p + flow(p))] - x[t, p]`` for every in-frame target.

    Returns the operator together with the source-pixel index of each row in
    ``op.rows`` so per-pixel weights can be gathered.
    """
    h, w = flow.shape
    npix = h * w
    if not 0 <= frame < n_frames - 1:
        raise ValueError(f"flow from frame {frame} needs a successor among {n_frames} frames")
    src, dst = rounded_flow_targets(flow)
    r = np.arange(src.size)
    rows = np.concatenate([r, r])
    cols = np.concatenate([(frame + 1) * npix + dst, frame * npix + src])
    vals = np.concatenate([np.ones(src.size), -np.ones(src.size)])
    m = sp.csr_matrix((vals, (rows, cols)), shape=(src.size, n_frames * npix))
    op = LinearOperator("flow_difference", m)
    op.rows = src
    return op


def compose(outer: LinearOperator, inner: LinearOperator) -> LinearOperator:
    """``outer @ inner`` (apply ``inner`` first)."""
    if outer.shape[1] != inner.shape[0]:
        raise ValueError(f"cannot compose {outer.shape} with {inner.shape}")
    op = LinearOperator("composition", outer.matrix @ inner.matrix)
    op.parts = (outer.kind, inner.kind)
    return op


# --------------------------------------------------------------------------
# Terms
# --------------------------------------------------------------------------


@dataclass
class RobustTerm:
    op: LinearOperator
    target: np.ndarray
    weight: np.ndarray
    penalty: str = ROBUST
    multiplier: float = 1.0
    name: str = ""

    def __post_init__(self):
        m = self.op.shape[0]
        self.target = np.broadcast_to(np.asarray(self.target, dtype=np.float64).ravel(), (m,)).copy()
        self.weight = np.broadcast_to(np.asarray(self.weight, dtype=np.float64).ravel(), (m,)).copy()
        if self.penalty not in (ROBUST, QUADRATIC):
            raise ValueError(f"unknown penalty {self.penalty!r}")
        if self.multiplier < 0 or np.any(self.weight < 0):
            raise ValueError(f"term {self.name!r}: weights and multiplier must be nonnegative")

    def residual(self, x: np.ndarray) -> np.ndarray:
        return self.op.apply(x) - self.target


@dataclass
class TermStack:
    size: int
    terms: list[RobustTerm] = field(default_factory=list)
    init: np.ndarray | None = None

    def add(self, term: RobustTerm):
        if term.op.shape[1] != self.size:
            raise ValueError(f"term {term.name!r} acts on {term.op.shape[1]} unknowns, stack has {self.size}")
        self.terms.append(term)

    def names(self) -> list[str]:
        return [t.name for t in self.terms]


@dataclass
class SolverConfig:
    irls_iters: int = 30
    eps: float = 1e-4
    pcg_tol: float = 1e-6
    pcg_max_iters: int = 2000
    rel_tol: float = 1e-6
    ic_fill: str = "ic0"  # "ic0", "jacobi" or "none"
    tikhonov: float = 1e-9

    def __post_init__(self):
        if self.eps <= 0 or self.pcg_tol <= 0:
            raise ValueError("eps and pcg_tol must be positive")


def robust_phi(x, eps: float = 1e-4):
    """Smooth L1 penalty ``sqrt(x^2 + eps)``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    return np.sqrt(np.square(x) + eps)


def objective(stack: TermStack, x: np.ndarray, eps: float = 1e-4) -> float:
    total = 0.0
    for t in stack.terms:
        r = t.residual(x)
        rho = robust_phi(r, eps) if t.penalty == ROBUST else r * r
        total += t.multiplier * float(np.dot(t.weight, rho))
    return total


def objective_gradient(stack: TermStack, x: np.ndarray, eps: float = 1e-4) -> np.ndarray:
    g = np.zeros(stack.size)
    for t in stack.terms:
        r = t.residual(x)
        d = r / robust_phi(r, eps) if t.penalty == ROBUST else 2.0 * r
        g += t.multiplier * t.op.adjoint(t.weight * d)
    return g


# --------------------------------------------------------------------------
# Preconditioned conjugate gradient
# --------------------------------------------------------------------------


@dataclass
class PCGInfo:
    iterations: int
    converged: bool
    rel_residual: float


def pcg_solve(A, b, precond=None, tol: float = 1e-6, maxiter: int = 2000, x0=None):
    """Solve ``A x = b`` for symmetric positive (semi)definite ``A``.

    ``A`` is anything supporting ``A @ x``; ``precond`` provides
    ``solve(r)`` approximating ``A^{-1} r``. Stops when
    ``||b - A x|| <= tol * ||b||``. Returns ``(x, PCGInfo)``; failure to
    converge is reported, not raised.
    """
    b = np.asarray(b, dtype=np.float64)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros_like(b), PCGInfo(0, True, 0.0)
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=np.float64)
    r = b - A @ x
    rnorm = np.linalg.norm(r)
    if rnorm <= tol * bnorm:
        return x, PCGInfo(0, True, rnorm / bnorm)
    z = precond.solve(r) if precond is not None else r
    p = z.copy()
    rz = np.dot(r, z)
    for it in range(1, maxiter + 1):
        Ap = A @ p
        pAp = np.dot(p, Ap)
        if pAp <= 0:
            logger.warning("pcg: non-positive curvature %.3e at iteration %d", pAp, it)
            return x, PCGInfo(it, False, rnorm / bnorm)
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        rnorm = np.linalg.norm(r)
        if rnorm <= tol * bnorm:
            return x, PCGInfo(it, True, rnorm / bnorm)
        z = precond.solve(r) if precond is not None else r
        rz_new = np.dot(r, z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x, PCGInfo(maxiter, False, rnorm / bnorm)


@numba.njit(cache=True)
def _ic0_factor(indptr, indices, data):
    n = indptr.size - 1
    for i in range(n):
        start = indptr[i]
        end = indptr[i + 1]
        if end == start or indices[end - 1] != i:
            return False
        for k in range(start, end):
            j = indices[k]
            s = data[k]
            if j < i:
                a = start
                bb = indptr[j]
                bend = indptr[j + 1] - 1
                while a < k and bb < bend:
                    ca = indices[a]
                    cb = indices[bb]
                    if ca == cb:
                        s -= data[a] * data[bb]
                        a += 1
                        bb += 1
                    elif ca < cb:
                        a += 1
                    else:
                        bb += 1
                data[k] = s / data[indptr[j + 1] - 1]
            else:
                for a in range(start, k):
                    s -= data[a] * data[a]
                if not s > 0.0:
                    return False
                data[k] = np.sqrt(s)
    return True


@numba.njit(cache=True)
def _ic0_apply(indptr, indices, data, r):
    n = indptr.size - 1
    y = np.empty(n)
    for i in range(n):
        s = r[i]
        last = indptr[i + 1] - 1
        for k in range(indptr[i], last):
            s -= data[k] * y[indices[k]]
        y[i] = s / data[last]
    for i in range(n - 1, -1, -1):
        last = indptr[i + 1] - 1
        y[i] = y[i] / data[last]
        xi = y[i]
        for k in range(indptr[i], last):
            y[indices[k]] -= data[k] * xi
    return y


class JacobiPreconditioner:
    def __init__(self, A):
        d = np.asarray(sp.csr_matrix(A).diagonal(), dtype=np.float64)
        self.inv_diag = np.where(d > 0, 1.0 / np.where(d > 0, d, 1.0), 1.0)

    def solve(self, r):
        return self.inv_diag * r


class IncompleteCholesky:
    """Zero-fill incomplete Cholesky ``A ~ L L^T`` on the pattern of ``tril(A)``.

    On a non-positive pivot the factorization is abandoned and the
    preconditioner falls back to the diagonal (``self.fallback`` is set).
    """

    def __init__(self, A):
        A = sp.csr_matrix(A, dtype=np.float64)
        if A.shape[0] != A.shape[1]:
            raise ValueError(f"matrix must be square, got {A.shape}")
        L = sp.tril(A, format="csr")
        L.sum_duplicates()
        L.sort_indices()
        self.L = L
        self.fallback = not _ic0_factor(L.indptr.astype(np.int64), L.indices.astype(np.int64), L.data)
        if self.fallback:
            logger.info("incomplete Cholesky broke down; using diagonal preconditioner")
            self._jacobi = JacobiPreconditioner(A)
        else:
            self._indptr = L.indptr.astype(np.int64)
            self._indices = L.indices.astype(np.int64)

    def solve(self, r):
        if self.fallback:
            return self._jacobi.solve(r)
        return _ic0_apply(self._indptr, self._indices, self.L.data, np.asarray(r, dtype=np.float64))


def incomplete_cholesky(A) -> IncompleteCholesky:
    return IncompleteCholesky(A)


def make_preconditioner(A, policy: str = "ic0"):
    if policy == "ic0":
        return IncompleteCholesky(A)
    if policy == "jacobi":
        return JacobiPreconditioner(A)
    if policy == "none":
        return None
    raise ValueError(f"unknown preconditioner policy {policy!r}")


# --------------------------------------------------------------------------
# IRLS
# --------------------------------------------------------------------------


@dataclass
class IRLSResult:
    x: np.ndarray
    trace: list[float]
    pcg_iterations: list[int]
    pcg_residuals: list[float]
    pcg_converged: list[bool]

    @property
    def converged(self) -> bool:
        return not self.pcg_converged or self.pcg_converged[-1]


def normal_equations(stack: TermStack, x: np.ndarray, eps: float):
    """Weighted normal equations of the majorizer at ``x``: ``(sum A^T C A, sum A^T C b)``."""
    n = stack.size
    N = sp.csr_matrix((n, n))
    rhs = np.zeros(n)
    for t in stack.terms:
        if t.multiplier == 0:
            continue
        if t.penalty == ROBUST:
            c = t.multiplier * t.weight / robust_phi(t.residual(x), eps)
        else:
            c = 2.0 * t.multiplier * t.weight
        A = t.op.matrix
        AtC = A.T.multiply(c[None, :]).tocsr()
        N = N + AtC @ A
        rhs += AtC @ t.target
    return N.tocsr(), rhs


def _needs_regularization(stack: TermStack) -> bool:
    for t in stack.terms:
        if t.multiplier > 0 and np.any(t.weight > 0) and not t.op.annihilates_constants():
            return False
    return True


def irls_minimize(stack: TermStack, init=None, cfg: SolverConfig | None = None, log_path=None) -> IRLSResult:
    """Minimize a term stack by IRLS with PCG inner solves.

    ``trace[0]`` is the objective at ``init`` and ``trace[k]`` after outer
    iteration ``k``. Iteration stops after ``cfg.irls_iters`` outer steps or
    when the relative objective decrease falls below ``cfg.rel_tol``.
    """
    cfg = cfg or SolverConfig()
    if not stack.terms:
        raise ValueError("term stack is empty")
    if init is None:
        init = stack.init if stack.init is not None else np.zeros(stack.size)
    x = np.array(init, dtype=np.float64).ravel()
    if x.size != stack.size:
        raise ValueError(f"init has {x.size} entries, stack has {stack.size} unknowns")

    regularize = _needs_regularization(stack)
    if regularize:
        logger.info("no anchoring term in stack; adding Tikhonov %.1e", cfg.tikhonov)
    all_quadratic = all(t.penalty == QUADRATIC for t in stack.terms)
    iters = 1 if all_quadratic else cfg.irls_iters

    f = objective(stack, x, cfg.eps)
    result = IRLSResult(x, [f], [], [], [])
    for it in range(iters):
        N, rhs = normal_equations(stack, x, cfg.eps)
        diag = N.diagonal()
        if regularize or np.any(diag <= 0):
            if not regularize:
                logger.info("singular normal equations (%d empty rows); adding Tikhonov", int(np.sum(diag <= 0)))
            N = (N + cfg.tikhonov * sp.identity(stack.size, format="csr")).tocsr()
        precond = make_preconditioner(N, cfg.ic_fill)
        x_new, info = pcg_solve(N, rhs, precond, cfg.pcg_tol, cfg.pcg_max_iters, x0=x)
        f_new = objective(stack, x_new, cfg.eps)
        result.pcg_iterations.append(info.iterations)
        result.pcg_residuals.append(info.rel_residual)
        result.pcg_converged.append(info.converged)
        if not info.converged:
            logger.warning("irls iteration %d: pcg stopped at residual %.2e", it, info.rel_residual)
        x = x_new
        result.trace.append(f_new)
        logger.debug("irls %d: objective %.9g, pcg %d its", it, f_new, info.iterations)
        if f - f_new <= cfg.rel_tol * abs(f):
            f = f_new
            break
        f = f_new
    result.x = x

    if log_path is not None:
        with open(log_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "objective", "pcg_iters", "residual"])
            w.writerow([0, result.trace[0], 0, ""])
            for k, (obj, its, res) in enumerate(
                zip(result.trace[1:], result.pcg_iterations, result.pcg_residuals), start=1
            ):
                w.writerow([k, obj, its, res])
    return result
