"""Dense linear-algebra primitives shared by every other module.

All matrices are float64 numpy arrays.  The vec/mat convention is
column-major throughout: ``vec`` stacks columns, ``mat`` unstacks them,
and all Kronecker identities in this package are stated for that
convention (``kron(A, B) @ vec(X) == vec(B @ X @ A.T)``).
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

__all__ = [
    "NotPositiveDefiniteError",
    "SymEig",
    "kron",
    "vec",
    "mat",
    "zigzag",
    "kron_apply",
    "sym_eig",
    "inv_sqrt",
    "frobenius_norm",
    "spectrum",
    "svd_dense",
]

EIG_CLAMP_REL = 1e-12


class NotPositiveDefiniteError(ValueError):
    """A routine required a positive-definite matrix and did not get one."""

    def __init__(self, smallest_eigenvalue: float, context: str = ""):
        self.smallest_eigenvalue = float(smallest_eigenvalue)
        msg = (
            "matrix is not positive definite "
            f"(smallest eigenvalue {self.smallest_eigenvalue:.6e})"
        )
        if context:
            msg = f"{context}: {msg}"
        super().__init__(msg)


class SymEig(NamedTuple):
    """Eigendecomposition of a symmetric matrix, eigenvalues descending."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray


def kron(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Kronecker product; block (i, j) of the result is a[i, j] * b."""
    return np.kron(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))


def vec(m: np.ndarray) -> np.ndarray:
    """Stack the columns of a matrix into one vector."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"vec expects a matrix, got ndim={m.ndim}")
    return m.reshape(-1, order="F")


def mat(v: np.ndarray, rows: int, cols: int) -> np.ndarray:
    """Inverse of vec: fold a vector back into a rows-by-cols matrix."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size != rows * cols:
        raise ValueError(f"cannot reshape length-{v.size} vector to {rows}x{cols}")
    return v.reshape((rows, cols), order="F")


def zigzag(m: np.ndarray, d: int, dp: int) -> np.ndarray:
    """Rearrange a uniform-block matrix so Kronecker structure becomes rank structure.

    ``m`` is a (d*dp) x (d*dp) matrix viewed as a d x d grid of dp x dp
    blocks.  Row nu*d + mu of the output (0-based, block-row index mu
    fastest) is vec of block (mu, nu).  Under this map a Kronecker
    product becomes an outer product:

        zigzag(kron(R, S), d, dp) == np.outer(vec(R), vec(S))

    for R of size d x d and S of size dp x dp, so the Frobenius-nearest
    Kronecker factors of m are read off the dominant singular triplet of
    the rearranged matrix.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (d * dp, d * dp):
        raise ValueError(f"expected shape {(d * dp, d * dp)}, got {m.shape}")
    return m.reshape(d, dp, d, dp).transpose(2, 0, 3, 1).reshape(d * d, dp * dp)


def kron_apply(a: np.ndarray, b: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Apply kron(a, b) to vec(x) without forming the product: b @ x @ a.T."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (b.shape[1], a.shape[1]):
        raise ValueError(
            f"operand shape {x.shape} incompatible with factors {a.shape}, {b.shape}"
        )
    return b @ x @ a.T


def sym_eig(m: np.ndarray) -> SymEig:
    """Eigendecomposition of a symmetric matrix with eigenvalues descending."""
    m = np.asarray(m, dtype=np.float64)
    vals, vecs = np.linalg.eigh(m)
    order = np.argsort(vals)[::-1]
    return SymEig(vals[order], vecs[:, order])


def _clamped_eigenvalues(vals: np.ndarray) -> np.ndarray:
    # kill sign noise around zero before any reciprocal is taken
    scale = np.max(np.abs(vals)) if vals.size else 0.0
    out = vals.copy()
    out[np.abs(out) < EIG_CLAMP_REL * scale] = 0.0
    return out


def inv_sqrt(m: np.ndarray, context: str = "") -> np.ndarray:
    """Inverse matrix square root of a symmetric positive-definite matrix."""
    vals, vecs = sym_eig(m)
    vals = _clamped_eigenvalues(vals)
    smallest = float(vals[-1]) if vals.size else 0.0
    if vals.size == 0 or smallest <= 0.0:
        raise NotPositiveDefiniteError(smallest, context=context)
    return (vecs * vals ** -0.5) @ vecs.T


def frobenius_norm(m: np.ndarray) -> float:
    return float(np.linalg.norm(np.asarray(m, dtype=np.float64)))


def spectrum(m: np.ndarray) -> np.ndarray:
    """Eigenvalues of a symmetric matrix, sorted descending."""
    return np.linalg.eigvalsh(np.asarray(m, dtype=np.float64))[::-1]


def svd_dense(m: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thin SVD (U, s, V) with singular values descending; m == U @ diag(s) @ V.T."""
    u, s, vt = np.linalg.svd(np.asarray(m, dtype=np.float64), full_matrices=False)
    return u, s, vt.T
