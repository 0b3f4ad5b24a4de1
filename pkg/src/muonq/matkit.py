"""Dense linear-algebra kernels for orthogonalized-momentum optimizers.

Everything here is a pure function of its inputs (plus an explicit RNG for
the two degenerate-input repair rules), computed in float64 regardless of
how the optimizer stores its state. The deliberately boring algorithm
choices (one-sided Jacobi SVD, Householder QR) keep the module free of
LAPACK so the test suite can use ``numpy.linalg`` as an independent oracle.
"""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np

from .errors import NonConvergenceError, ShapeMismatchError, NonFiniteError, ZeroMatrixError

# Quintic Newton-Schulz coefficients, same triple at every iteration.
NS_COEFFS = (3.4445, -4.7750, 2.0315)

# Residual/row norms below this are treated as rank deficiencies and repaired
# with a seeded random direction.
DEGENERACY_EPS = 1e-12

_JACOBI_TOL = 1e-12
_JACOBI_MAX_SWEEPS = 30


def as_matrix(x) -> np.ndarray:
    """Validate and convert ``x`` to a 2-D float64 array.

    Raises ShapeMismatchError for non-2-D or empty input and NonFiniteError
    when any entry is NaN/Inf.
    """
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeMismatchError(f"expected a 2-D matrix, got ndim={a.ndim}")
    if a.size == 0:
        raise ShapeMismatchError(f"empty matrix of shape {a.shape}")
    if not np.isfinite(a).all():
        raise NonFiniteError("matrix contains NaN or Inf")
    return a


def frobenius_norm(m) -> float:
    """sqrt of the sum of squared entries, accumulated in float64."""
    a = as_matrix(m)
    return float(np.sqrt((a * a).sum()))


def _col_norms(a: np.ndarray) -> np.ndarray:
    return np.sqrt((a * a).sum(axis=0))


def svd_thin(m) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thin SVD via one-sided Jacobi on the thin dimension.

    Returns ``(u, sigma, v)`` with ``m = u @ diag(sigma) @ v.T``, sigma
    sorted nonincreasing, and ``u.T @ u == v.T @ v == I`` to 1e-10. Columns
    belonging to zero singular values are filled with arbitrary orthonormal
    directions so the orthogonality contract holds for rank-deficient input.
    """
    a = as_matrix(m)
    if a.shape[0] < a.shape[1]:
        u, sig, v = _jacobi_svd_tall(np.asfortranarray(a.T))
        return v, sig, u
    u, sig, v = _jacobi_svd_tall(np.asfortranarray(a))
    return u, sig, v


def _jacobi_svd_tall(a: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # One-sided (Hestenes) Jacobi: rotate column pairs of the work matrix
    # until all columns are mutually orthogonal. The Gram matrix is cached
    # and rotated alongside, then recomputed at each sweep to kill drift.
    m, n = a.shape
    w = np.array(a, order="F", copy=True)
    v = np.eye(n, order="F")
    converged = False
    for _ in range(_JACOBI_MAX_SWEEPS):
        g = w.T @ w
        rotated = False
        for i in range(n - 1):
            for j in range(i + 1, n):
                gam = g[i, j]
                alpha = g[i, i]
                beta = g[j, j]
                if abs(gam) <= _JACOBI_TOL * math.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gam)
                t = math.copysign(1.0, zeta) / (abs(zeta) + math.hypot(1.0, zeta))
                c = 1.0 / math.hypot(1.0, t)
                s = c * t
                wi = w[:, i].copy()
                wj = w[:, j]
                w[:, i] = c * wi - s * wj
                w[:, j] = s * wi + c * wj
                vi = v[:, i].copy()
                vj = v[:, j]
                v[:, i] = c * vi - s * vj
                v[:, j] = s * vi + c * vj
                # keep the cached Gram consistent: G <- J^T G J
                gi = g[i, :].copy()
                gj = g[j, :]
                g[i, :] = c * gi - s * gj
                g[j, :] = s * gi + c * gj
                g[:, i] = g[i, :]
                g[:, j] = g[j, :]
                g[i, i] = alpha - t * gam
                g[j, j] = beta + t * gam
                g[i, j] = g[j, i] = 0.0
        if not rotated:
            converged = True
            break
    if not converged:
        raise NonConvergenceError(
            f"one-sided Jacobi SVD did not converge in {_JACOBI_MAX_SWEEPS} sweeps"
        )
    sig = _col_norms(w)
    order = np.argsort(-sig, kind="stable")
    sig = sig[order]
    w = w[:, order]
    v = np.ascontiguousarray(v[:, order])
    u = np.zeros((m, n))
    cutoff = sig[0] * 1e-15 if sig[0] > 0 else 0.0
    nz = sig > cutoff
    u[:, nz] = w[:, nz] / sig[nz]
    if not nz.all():
        # Rank-deficient input: fill the dead columns with orthonormal
        # directions so U^T U = I still holds. Gives sigma=0 columns a
        # deterministic, valid basis.
        u[:, ~nz] = 0.0
        u, _ = orth(u)
    return u, sig, v


def polar_exact(m) -> np.ndarray:
    """Orthogonal polar factor ``u @ v.T`` from the thin SVD."""
    a = as_matrix(m)
    if frobenius_norm(a) == 0.0:
        raise ZeroMatrixError("polar factor undefined for the zero matrix")
    u, _, v = svd_thin(a)
    return u @ v.T


def polar_ns(m, iters: int = 5) -> np.ndarray:
    """Approximate polar factor via quintic Newton-Schulz iterations.

    The input is divided by its Frobenius norm first (which also makes the
    result invariant to positive scaling), then ``X <- aX + b(XX^T)X +
    c(XX^T)^2 X`` is applied ``iters`` times with the standard coefficient
    triple. Wide matrices are processed through their transpose; the
    polynomial is evaluated in the equivalent right-Gram form
    ``X(aI + bG + cG^2)``, ``G = X^T X``, which keeps the Gram product at
    the small dimension for tall inputs.
    """
    a = as_matrix(m)
    nrm = frobenius_norm(a)
    if nrm == 0.0:
        raise ZeroMatrixError("Newton-Schulz polar undefined for the zero matrix")
    wide = a.shape[0] < a.shape[1]
    x = (a.T if wide else a) / nrm
    ca, cb, cc = NS_COEFFS
    eye = np.eye(x.shape[1])
    for _ in range(iters):
        g = x.T @ x
        x = x @ (ca * eye + cb * g + cc * (g @ g))
    return x.T if wide else x


def orth(a, rng: np.random.Generator | None = None) -> tuple[np.ndarray, tuple[int, ...]]:
    """Orthonormalize the columns of ``a`` by Householder QR.

    Sign convention: the implicit triangular factor has a nonnegative
    diagonal, so the output is deterministic. A column whose residual norm
    falls below 1e-12 is rank deficient; it is replaced by a seeded random
    unit vector and the factorization restarts, so ``q.T @ q = I`` holds
    even for degenerate input. Returns ``(q, repaired)`` where ``repaired``
    lists the replaced column indices (empty in the regular case).
    """
    mat = as_matrix(a)
    m, k = mat.shape
    if k > m:
        raise ShapeMismatchError(f"orth needs cols <= rows, got {mat.shape}")
    cols = mat.copy()
    repaired: list[int] = []
    for _ in range(k + 1):
        q, bad = _householder_thin_q(cols)
        if bad is None:
            return q, tuple(repaired)
        if rng is None:
            rng = np.random.default_rng(0)
        fresh = rng.standard_normal(m)
        cols[:, bad] = fresh / math.sqrt(fresh @ fresh)
        repaired.append(bad)
    raise NonConvergenceError("orth could not repair rank deficiency")  # pragma: no cover


def _householder_thin_q(a: np.ndarray) -> tuple[np.ndarray | None, int | None]:
    # Thin-Q Householder QR. Returns (q, None) on success or (None, j) at
    # the first column j whose residual norm is below the degeneracy cutoff.
    m, k = a.shape
    r = a.copy()
    reflectors: list[tuple[np.ndarray, float]] = []
    diag = np.empty(k)
    for j in range(k):
        x = r[j:, j]
        normx = math.sqrt(x @ x)
        if normx < DEGENERACY_EPS:
            return None, j
        v = x.copy()
        alpha = -math.copysign(normx, v[0]) if v[0] != 0.0 else -normx
        v[0] -= alpha
        beta = 2.0 / (v @ v)
        r[j:, j:] -= np.outer(beta * v, v @ r[j:, j:])
        diag[j] = alpha
        reflectors.append((v, beta))
    q = np.zeros((m, k))
    q[np.arange(k), np.arange(k)] = 1.0
    for j in range(k - 1, -1, -1):
        v, beta = reflectors[j]
        q[j:, j:] -= np.outer(beta * v, v @ q[j:, j:])
    q *= np.where(diag >= 0.0, 1.0, -1.0)
    return q, None


def row_norm(s, rng: np.random.Generator | None = None) -> np.ndarray:
    """Divide each row by its L2 norm.

    Rows with norm below 1e-12 are replaced by a seeded random unit row so
    the result stays usable as a power-iteration warm start.
    """
    a = as_matrix(s)
    norms = np.sqrt((a * a).sum(axis=1))
    out = np.empty_like(a)
    alive = norms >= DEGENERACY_EPS
    out[alive] = a[alive] / norms[alive, None]
    for i in np.flatnonzero(~alive):
        if rng is None:
            rng = np.random.default_rng(0)
        fresh = rng.standard_normal(a.shape[1])
        out[i] = fresh / math.sqrt(fresh @ fresh)
    return out


class PowerIterResult(NamedTuple):
    u: np.ndarray
    s: np.ndarray
    residual: np.ndarray
    repaired: tuple[int, ...]


def power_iter_update(mbar, s_prev, k: int, rng: np.random.Generator | None = None) -> PowerIterResult:
    """One warm-started power-iteration step of the rank-k decomposition.

    Given the previous right factor ``s_prev`` (k x n), computes::

        V = row_norm(s_prev);  U = orth(mbar @ V.T);  S = U.T @ mbar

    and the residual ``R = mbar - U @ S``. By construction ``U^T U = I``,
    ``mbar = U @ S + R`` to roundoff, and ``U^T R = 0``. ``repaired``
    propagates any rank repairs performed inside ``orth``.
    """
    a = as_matrix(mbar)
    sp = as_matrix(s_prev)
    m, n = a.shape
    if k < 1 or k > min(m, n):
        raise ShapeMismatchError(f"rank k={k} invalid for shape {a.shape}")
    if sp.shape != (k, n):
        raise ShapeMismatchError(f"warm start shape {sp.shape} != ({k}, {n})")
    v = row_norm(sp, rng)
    u, repaired = orth(a @ v.T, rng)
    s = u.T @ a
    r = a - u @ s
    return PowerIterResult(u, s, r, repaired)


def truncated_decompose(mbar, k: int, iters: int = 12,
                        rng: np.random.Generator | None = None) -> PowerIterResult:
    """Rank-k decomposition by iterating ``power_iter_update`` to convergence.

    Convenience for one-shot studies that have no previous step to warm
    start from: starts from a random right factor and refines ``iters``
    times on the fixed input. ``iters=1`` with ``k = min(m, n)`` already
    yields an exact full-rank split (zero residual).
    """
    a = as_matrix(mbar)
    if rng is None:
        rng = np.random.default_rng(0)
    s = rng.standard_normal((k, a.shape[1]))
    result = power_iter_update(a, s, k, rng)
    for _ in range(iters - 1):
        result = power_iter_update(a, result.s, k, rng)
    return result
