"""
Dense real-matrix kernel.

Every other module builds on the helpers here: validated float64 matrices,
products, max-shifted softmax along rows or columns, a cyclic Jacobi
eigensolver for symmetric matrices and singular values obtained from the
smaller Gram matrix.
"""

import logging
import math
from dataclasses import dataclass
from typing import Iterator, List, Tuple

import numpy as np
from scipy.special import softmax

logger = logging.getLogger(__name__)

SYMMETRY_TOLERANCE = 1e-10
JACOBI_TOLERANCE = 1e-12
JACOBI_MAX_SWEEPS = 100


class LabError(Exception):
    """Base class for every error raised by the laboratory"""


class ContractViolationError(LabError, ValueError):
    """A precondition on shapes, values or configuration does not hold"""


class NumericalFailureError(LabError, ArithmeticError):
    """A numerical routine failed to produce a finite or converged result"""

    def __init__(self, message: str, residual: float = float('nan'), sweeps: int = 0):
        super().__init__(message)
        self.residual = residual
        self.sweeps = sweeps


class DegenerateInputError(LabError, ValueError):
    """A metric is undefined on the given input"""


class NonFiniteInputError(ContractViolationError):
    """A matrix argument contains NaN or Inf"""


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


def as_matrix(data, name: str = "matrix") -> np.ndarray:
    """
    Validate ``data`` as a Matrix and return a read-only float64 copy.

    Raises:
        ContractViolationError: not 2-D, empty, or containing NaN/Inf
    """
    try:
        arr = np.array(data, dtype=np.float64, copy=True)
    except (TypeError, ValueError) as e:
        raise ContractViolationError(f"{name}: not a real matrix ({e})") from e
    if arr.ndim != 2:
        raise ContractViolationError(f"{name}: expected 2-D data, got {arr.ndim}-D")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ContractViolationError(f"{name}: empty matrix of shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteInputError(f"{name}: contains non-finite entries")
    return _freeze(arr)


@dataclass(frozen=True)
class Spectrum:
    """Descending list of singular values (non-negative) or eigenvalues (signed)"""
    values: Tuple[float, ...]
    kind: str = "singular"

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        object.__setattr__(self, 'values', vals)
        if self.kind not in ("singular", "eigen"):
            raise ContractViolationError(f"unknown spectrum kind: {self.kind}")
        if any(a < b for a, b in zip(vals, vals[1:])):
            raise ContractViolationError("spectrum values must be sorted descending")
        if self.kind == "singular" and any(v < 0 for v in vals):
            raise ContractViolationError("singular values must be non-negative")

    def __len__(self) -> int:
        return len(self.values)

    def __iter__(self) -> Iterator[float]:
        return iter(self.values)

    def __getitem__(self, index):
        return self.values[index]

    def as_array(self) -> np.ndarray:
        return np.array(self.values, dtype=np.float64)

    def as_list(self) -> List[float]:
        return list(self.values)


def identity(n: int) -> np.ndarray:
    return _freeze(np.eye(n, dtype=np.float64))


def center_projector(n: int) -> np.ndarray:
    """Explicit I - ee^T with e = (1, ..., 1)^T / sqrt(n)"""
    return _freeze(np.eye(n) - np.full((n, n), 1.0 / n))


def random_orthogonal(d: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-distributed d x d orthogonal matrix (QR of a Gaussian, sign-fixed)"""
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return _freeze(q * signs)


def matmul(a, b) -> np.ndarray:
    """Matrix product with shape and finiteness checks"""
    a = as_matrix(a, "left operand")
    b = as_matrix(b, "right operand")
    if a.shape[1] != b.shape[0]:
        raise ContractViolationError(
            f"dimension mismatch: {a.shape[0]}x{a.shape[1]} times {b.shape[0]}x{b.shape[1]}"
        )
    out = a @ b
    if not np.all(np.isfinite(out)):
        raise NumericalFailureError("matrix product overflowed")
    return _freeze(out)


def softmax_rows(m) -> np.ndarray:
    """Row-wise softmax; each row is shifted by its maximum before exponentiation"""
    m = as_matrix(m)
    return _freeze(softmax(m, axis=1))


def softmax_cols(m) -> np.ndarray:
    """Column-wise softmax, defined as the transpose of softmax_rows on the transpose"""
    m = as_matrix(m)
    return _freeze(np.ascontiguousarray(softmax_rows(m.T).T))


def _off_diagonal_norm(a: np.ndarray) -> float:
    off = a - np.diag(np.diag(a))
    return float(np.sqrt(np.sum(off * off)))


def sym_eigen(m, tol: float = JACOBI_TOLERANCE,
              max_sweeps: int = JACOBI_MAX_SWEEPS) -> Tuple[Spectrum, np.ndarray]:
    """
    Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    The input is symmetrized as (M + M^T)/2. Each sweep visits the upper
    triangle in row-major order. Iteration stops once the off-diagonal
    Frobenius norm falls to ``tol`` times max(1, ||M||_F).

    Returns:
        (eigenvalues descending, orthogonal matrix Y whose columns are the
        matching eigenvectors)

    Raises:
        ContractViolationError: non-square or non-symmetric input
        NumericalFailureError: no convergence within ``max_sweeps``
    """
    m = as_matrix(m)
    n, cols = m.shape
    if n != cols:
        raise ContractViolationError(f"sym_eigen needs a square matrix, got {n}x{cols}")
    scale = max(1.0, float(np.max(np.abs(m))))
    asym = float(np.max(np.abs(m - m.T)))
    if asym > SYMMETRY_TOLERANCE * scale:
        raise ContractViolationError(f"matrix is not symmetric (max |M - M^T| = {asym:.3e})")

    a = (m + m.T) / 2.0
    # rows of vt are the eigenvectors; row updates stay contiguous
    vt = np.eye(n)
    threshold = tol * max(1.0, float(np.sqrt(np.sum(a * a))))
    # below this an element cannot keep the off-diagonal norm above threshold
    negligible = threshold / n

    sweeps = 0
    off = _off_diagonal_norm(a)
    while off > threshold:
        if sweeps >= max_sweeps:
            raise NumericalFailureError(
                f"Jacobi eigensolver did not converge after {max_sweeps} sweeps "
                f"(off-diagonal norm {off:.3e})",
                residual=off, sweeps=sweeps,
            )
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = float(a[p, q])
                if abs(apq) <= negligible:
                    continue
                app = float(a[p, p])
                aqq = float(a[q, q])
                theta = (aqq - app) / (2.0 * apq)
                if theta == 0.0:
                    t = 1.0
                else:
                    t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c

                row_p = a[p]
                row_q = a[q]
                new_p = c * row_p - s * row_q
                new_q = s * row_p + c * row_q
                new_p[p] = app - t * apq
                new_q[q] = aqq + t * apq
                new_p[q] = new_q[p] = 0.0
                a[p] = new_p
                a[q] = new_q
                a[:, p] = new_p
                a[:, q] = new_q

                vp = vt[p]
                vq = vt[q]
                new_vp = c * vp - s * vq
                vt[q] = s * vp + c * vq
                vt[p] = new_vp
        sweeps += 1
        off = _off_diagonal_norm(a)

    logger.debug(f"Jacobi converged: n={n}, sweeps={sweeps}, residual={off:.3e}")
    eigvals = np.diag(a).copy()
    order = np.argsort(-eigvals, kind='stable')
    return Spectrum(tuple(eigvals[order]), kind="eigen"), _freeze(np.ascontiguousarray(vt[order].T))


def singular_values(m) -> Spectrum:
    """
    Singular values from the eigenvalues of the smaller Gram matrix.

    Negative round-off eigenvalues are clamped to zero. Length is min(n, d).
    """
    m = as_matrix(m)
    n, d = m.shape
    gram = m @ m.T if n <= d else m.T @ m
    if not np.all(np.isfinite(gram)):
        raise NumericalFailureError("Gram matrix overflowed while computing singular values")
    eigvals, _ = sym_eigen(gram)
    sigma = np.sqrt(np.maximum(eigvals.as_array(), 0.0))
    return Spectrum(tuple(sigma), kind="singular")
