"""Dense linear algebra and seeded sampling shared by the rest of the package.

Matrices are plain ``numpy.ndarray`` objects of dtype float64.  Every public
routine here refuses non-finite input instead of propagating NaN/inf.
"""

from __future__ import annotations

import io
import os
from typing import Iterable, TextIO

import numpy as np

__all__ = [
    "NonFiniteError",
    "ensure_finite",
    "make_rng",
    "sym_eig",
    "jacobi_eig",
    "svd",
    "sample_with_norm",
    "write_matrix",
    "read_matrix",
    "read_matrices",
    "format_matrix",
]


class NonFiniteError(ValueError):
    """Raised when a matrix contains NaN or infinite entries."""


def ensure_finite(M, name: str = "matrix") -> np.ndarray:
    A = np.asarray(M, dtype=float)
    if not np.all(np.isfinite(A)):
        raise NonFiniteError(f"{name} has non-finite entries")
    return A


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator; the same seed gives the same stream within one build."""
    if seed < 0 or seed >= 2**64:
        raise ValueError("seed must be a 64-bit unsigned integer")
    return np.random.Generator(np.random.PCG64(int(seed)))


def _check_symmetric(M: np.ndarray, tol: float) -> None:
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {M.shape}")
    scale = max(1.0, float(np.max(np.abs(M)))) if M.size else 1.0
    asym = float(np.max(np.abs(M - M.T))) if M.size else 0.0
    if asym > tol * scale:
        raise ValueError(f"matrix is not symmetric (max asymmetry {asym:.3e})")


def sym_eig(M, tol: float = 1e-10, method: str = "lapack"):
    """Eigen-decomposition of a real symmetric matrix.

    Returns ``(w, V)`` with eigenvalues ``w`` ascending and orthonormal
    eigenvectors in the columns of ``V``.  ``method="jacobi"`` selects the
    cyclic Jacobi solver in :func:`jacobi_eig`, which shares no code with the
    default LAPACK path and is meant for cross-checking.
    """
    A = ensure_finite(M)
    _check_symmetric(A, tol)
    A = 0.5 * (A + A.T)
    if method == "lapack":
        w, V = np.linalg.eigh(A)
    elif method == "jacobi":
        w, V = jacobi_eig(A)
    else:
        raise ValueError(f"unknown method {method!r}")
    return w, V


def jacobi_eig(M, max_sweeps: int = 100, tol: float = 1e-15):
    """Cyclic Jacobi eigenvalue iteration for a symmetric matrix.

    Intended for small matrices (n up to a few hundred).  Returned eigenvalues
    are ascending with matching eigenvector columns.
    """
    A = np.array(M, dtype=float)
    n = A.shape[0]
    V = np.eye(n)
    if n == 1:
        return A.diagonal().copy(), V
    scale = np.linalg.norm(A)
    if scale == 0.0:
        return np.zeros(n), V
    for _ in range(max_sweeps):
        off = np.linalg.norm(A - np.diag(A.diagonal()))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                if theta == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                # rotate rows/columns p, q
                ap = A[:, p].copy()
                aq = A[:, q].copy()
                A[:, p] = c * ap - s * aq
                A[:, q] = s * ap + c * aq
                ap = A[p, :].copy()
                aq = A[q, :].copy()
                A[p, :] = c * ap - s * aq
                A[q, :] = s * ap + c * aq
                vp = V[:, p].copy()
                vq = V[:, q].copy()
                V[:, p] = c * vp - s * vq
                V[:, q] = s * vp + c * vq
    w = A.diagonal().copy()
    order = np.argsort(w)
    return w[order], V[:, order]


def svd(A):
    """Singular value decomposition ``A = U @ diag(s) @ V.T``.

    ``s`` is descending and non-negative.  Column signs are fixed so that the
    largest-magnitude entry of each column of ``U`` is positive (the matching
    column of ``V`` absorbs the sign), which makes a non-negative diagonal
    input with descending entries come back with ``U = V = I``.
    """
    M = ensure_finite(A)
    if M.ndim != 2:
        raise ValueError("svd expects a 2-d array")
    U, s, Vt = np.linalg.svd(M)
    V = Vt.T.copy()
    U = U.copy()
    for j in range(min(U.shape[1], V.shape[1])):
        i = int(np.argmax(np.abs(U[:, j])))
        if U[i, j] < 0:
            U[:, j] *= -1.0
            V[:, j] *= -1.0
    return U, s, V


def sample_with_norm(shape, norm: float, rng: np.random.Generator) -> np.ndarray:
    """Draw a uniformly random direction and scale it to the given norm.

    ``shape`` may be an int (vector) or a tuple (matrix, Frobenius norm).
    """
    if norm < 0:
        raise ValueError("norm must be non-negative")
    shape = (shape,) if isinstance(shape, (int, np.integer)) else tuple(shape)
    if int(np.prod(shape)) < 1:
        raise ValueError("dimension must be at least 1")
    if norm == 0:
        return np.zeros(shape)
    g = rng.standard_normal(shape)
    return g * (norm / np.linalg.norm(g))


# --- matrix text format --------------------------------------------------
#
# First line "rows cols", then one whitespace-separated row per line.


def format_matrix(M) -> str:
    A = np.atleast_2d(ensure_finite(M))
    lines = [f"{A.shape[0]} {A.shape[1]}"]
    for row in A:
        lines.append(" ".join(f"{v:.17g}" for v in row))
    return "\n".join(lines) + "\n"


def write_matrix(target, M) -> None:
    text = format_matrix(M)
    if isinstance(target, (str, os.PathLike)):
        with open(target, "w") as fh:
            fh.write(text)
    else:
        target.write(text)


def _iter_tokens(lines: Iterable[str]):
    for line in lines:
        s = line.split("#", 1)[0].strip()
        if s:
            yield s


def read_matrices(source) -> list[np.ndarray]:
    """Read one or more consecutive matrices from a file path or text stream."""
    if isinstance(source, (str, os.PathLike)):
        with open(source) as fh:
            text = fh.read()
    elif isinstance(source, io.TextIOBase) or hasattr(source, "read"):
        text = source.read()
    else:
        raise TypeError("source must be a path or a text stream")
    lines = list(_iter_tokens(text.splitlines()))
    out = []
    i = 0
    while i < len(lines):
        head = lines[i].split()
        if len(head) != 2:
            raise ValueError(f"bad matrix header {lines[i]!r}")
        rows, cols = int(head[0]), int(head[1])
        if rows < 1 or cols < 1:
            raise ValueError("matrix dimensions must be positive")
        body = lines[i + 1 : i + 1 + rows]
        if len(body) != rows:
            raise ValueError("truncated matrix body")
        data = [[float(v) for v in r.split()] for r in body]
        if any(len(r) != cols for r in data):
            raise ValueError("row length does not match header")
        out.append(ensure_finite(np.array(data)))
        i += 1 + rows
    return out


def read_matrix(source: str | os.PathLike | TextIO) -> np.ndarray:
    mats = read_matrices(source)
    if len(mats) != 1:
        raise ValueError(f"expected exactly one matrix, found {len(mats)}")
    return mats[0]
