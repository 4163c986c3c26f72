"""Dense vector and matrix norms.

Everything downstream (Jacobians, slopes, weight-product bounds) reduces to
the handful of norms in this module.  Only p in {1, 2, inf} is supported:
p=1 and p=inf have closed-form column/row formulas, and p=2 (the spectral
norm) is computed exactly by a symmetric eigensolve of the smaller Gram
matrix.  Classifier Jacobians are n_classes x n_inputs with n_classes ~ 10,
so the Gram matrix is tiny and exactness is cheap.

A hand-written power iteration is kept as an independent cross-check of the
eigensolve path; tests compare the two.
"""

from __future__ import annotations

import math

import numpy as np

#: The supported operator-norm orders.
SUPPORTED_P = (1.0, 2.0, math.inf)

_P_ALIASES = {
    "1": 1.0,
    "2": 2.0,
    "inf": math.inf,
    "infinity": math.inf,
}


class SpectralIterationError(RuntimeError):
    """Power iteration failed to converge; carries the last residual."""

    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual


def as_p(p) -> float:
    """Normalize a norm order given as 1, 2, inf, "1", "2" or "inf".

    Raises ValueError for anything outside {1, 2, inf}; fractional p is
    deliberately unsupported.
    """
    if isinstance(p, str):
        try:
            return _P_ALIASES[p.strip().lower()]
        except KeyError:
            raise ValueError(f"unsupported p: {p!r} (use 1, 2 or inf)") from None
    value = float(p)
    if value not in SUPPORTED_P:
        raise ValueError(f"unsupported p: {p!r} (use 1, 2 or inf)")
    return value


def p_label(p) -> str:
    """Short stable string for a norm order, for file names and reports."""
    value = as_p(p)
    return "inf" if math.isinf(value) else str(int(value))


def _as_vector(x) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ValueError(f"expected a nonempty 1-d vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("vector has non-finite entries")
    return v


def _as_matrix(m) -> np.ndarray:
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2 or a.size == 0:
        raise ValueError(f"expected a nonempty 2-d matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix has non-finite entries")
    return a


def vector_pnorm(x, p) -> float:
    """p-norm of a vector: (sum |x_i|^p)^(1/p), max |x_i| for p=inf."""
    v = _as_vector(x)
    p = as_p(p)
    if p == 1.0:
        return float(np.abs(v).sum())
    if p == 2.0:
        return float(np.sqrt((v * v).sum()))
    return float(np.abs(v).max())


def matrix_opnorm(m, p) -> float:
    """Operator p-norm: max of ||Mv||_p over unit-p-norm vectors v.

    p=1 is the maximum column absolute sum, p=inf the maximum row absolute
    sum, p=2 the largest singular value (via :func:`gram_spectral`).
    """
    a = _as_matrix(m)
    p = as_p(p)
    if p == 1.0:
        return float(np.abs(a).sum(axis=0).max())
    if p == 2.0:
        return gram_spectral(a)
    return float(np.abs(a).sum(axis=1).max())


def frobenius_norm(m) -> float:
    """Square root of the sum of squared entries; upper-bounds the 2-norm."""
    a = _as_matrix(m)
    return float(np.sqrt((a * a).sum()))


def gram_spectral(m) -> float:
    """Largest singular value via an exact symmetric eigensolve.

    Forms the smaller of M M^T and M^T M and returns sqrt of its largest
    eigenvalue.  Exact (to eigensolver precision) regardless of the spectrum,
    unlike power iteration on nearly-degenerate leading singular values.
    """
    a = _as_matrix(m)
    if a.shape[0] <= a.shape[1]:
        gram = a @ a.T
    else:
        gram = a.T @ a
    eigenvalues = np.linalg.eigvalsh(gram)
    return float(np.sqrt(max(float(eigenvalues[-1]), 0.0)))


def power_iteration_spectral(
    m,
    tol: float = 1e-10,
    max_iter: int = 10000,
    seed: int = 0,
) -> float:
    """Largest singular value by power iteration on M^T M.

    Independent cross-check of :func:`gram_spectral`.  Stops when the
    Rayleigh quotient changes by less than ``tol`` relatively; raises
    :class:`SpectralIterationError` if ``max_iter`` is exhausted first.
    """
    a = _as_matrix(m)
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(a.shape[1])
    v /= np.linalg.norm(v)
    rayleigh = 0.0
    for _ in range(max_iter):
        w = a @ v
        new_rayleigh = float(w @ w)  # v^T (M^T M) v for unit v
        if new_rayleigh == 0.0:
            return 0.0
        v = a.T @ w
        norm = np.linalg.norm(v)
        if norm == 0.0:
            return 0.0
        v /= norm
        residual = abs(new_rayleigh - rayleigh) / max(new_rayleigh, 1.0)
        if residual <= tol:
            return float(np.sqrt(new_rayleigh))
        rayleigh = new_rayleigh
    raise SpectralIterationError(
        f"power iteration did not converge in {max_iter} iterations", residual
    )
