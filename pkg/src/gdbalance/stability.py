"""Local analysis of the GD map ``psi(u) = u - h grad f(u)``.

Covers the Jacobian ``I - h H``, fixed-point classification, the closed-form
spectra at rank-one fixed points of a diagonal target, Hessian trace formulas,
and the SVD change of variables that turns a general target into a diagonal one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import problems as pb
from .numkit import ensure_finite, svd, sym_eig
from .problems import FactorState

__all__ = [
    "Stability",
    "StabilityReport",
    "RotatedProblem",
    "NotAFixedPoint",
    "gd_jacobian",
    "classify_fixed_point",
    "rank1_diagonal_spectrum",
    "fixed_point_family",
    "hessian_traces",
    "rotate_to_diagonal",
    "empirical_c",
    "REPORT_HEADER",
]

REPORT_HEADER = "lambda_min,lambda_max,classification,manifold_aware,empirical_c"


class NotAFixedPoint(ValueError):
    """The state is not a (numerical) fixed point of the GD map."""


class Stability(str, Enum):
    STABLE = "Stable"
    UNSTABLE = "Unstable"
    MARGINAL = "Marginal"


@dataclass(frozen=True)
class StabilityReport:
    eigenvalues: np.ndarray  # Jacobian eigenvalues, ascending
    classification: Stability
    manifold_aware: Stability
    empirical_c: float

    @property
    def lambda_min(self) -> float:
        return float(self.eigenvalues[0])

    @property
    def lambda_max(self) -> float:
        return float(self.eigenvalues[-1])

    def csv_row(self) -> str:
        return (
            f"{self.lambda_min!r},{self.lambda_max!r},"
            f"{self.classification.value},{self.manifold_aware.value},{self.empirical_c!r}"
        )


@dataclass(frozen=True, eq=False)
class RotatedProblem:
    D: np.ndarray
    U: np.ndarray
    V: np.ndarray
    R0: np.ndarray
    S0: np.ndarray

    @property
    def problem(self) -> pb.GeneralFactorization:
        return pb.GeneralFactorization(self.D, self.R0.shape[1])

    @property
    def init(self) -> FactorState:
        return FactorState(self.R0, self.S0)


def gd_jacobian(p, s: FactorState, h: float) -> np.ndarray:
    """Jacobian ``I - h H`` of one GD step."""
    if h < 0:
        raise ValueError("h must be non-negative")
    H = pb.hessian(p, s)
    return np.eye(H.shape[0]) - h * H


def _require_fixed_point(p, s: FactorState) -> None:
    g = pb.gradient_norm(p, s)
    if not g < 1e-8 * (1.0 + s.norm()):
        raise NotAFixedPoint(f"gradient norm {g:.3e} is too large for a fixed point")


def empirical_c(p, s: FactorState) -> float:
    """``lambda_max(H) / (|X|^2 + |Y|^2)`` at a minimum."""
    _require_fixed_point(p, s)
    return _empirical_c(pb.hessian_eigenvalues(p, s), s)


def _empirical_c(hess_eigs: np.ndarray, s: FactorState) -> float:
    u2 = s.norm() ** 2
    if u2 == 0:
        return math.nan
    return float(hess_eigs[-1]) / u2


def classify_fixed_point(p, s: FactorState, h: float, tol: float = 1e-8) -> StabilityReport:
    """Classify a fixed point by the moduli of the Jacobian eigenvalues.

    The strict label is Stable or Unstable only when every modulus is outside
    the band ``[1 - tol, 1 + tol]``, and Marginal otherwise.  The manifold-aware label
    ignores the eigenvalues that come from the Hessian nullspace (``|lambda_H| <
    1e-8 lambda_max``), which at global minima are the flat homogeneity
    directions; any remaining marginal direction counts as Stable.
    """
    _require_fixed_point(p, s)
    if not h > 0:
        raise ValueError("h must be positive")
    hw, _ = sym_eig(pb.hessian(p, s))
    jw = np.sort(1.0 - h * hw)
    mod = np.abs(jw)

    if np.any(mod > 1 + tol):
        strict = Stability.UNSTABLE
    elif np.all(mod < 1 - tol):
        strict = Stability.STABLE
    else:
        strict = Stability.MARGINAL

    scale = max(float(np.max(np.abs(hw))), 1e-300)
    keep = np.abs(hw) >= 1e-8 * scale
    kept = np.abs(1.0 - h * hw[keep])
    manifold = Stability.UNSTABLE if np.any(kept > 1 + tol) else Stability.STABLE
    return StabilityReport(jw, strict, manifold, _empirical_c(hw, s))


def _diag_entries(D) -> np.ndarray:
    D = ensure_finite(np.atleast_2d(np.asarray(D, dtype=float)), "D")
    if D.shape[0] != D.shape[1]:
        raise ValueError("D must be square")
    dg = D.diagonal().copy()
    if np.any(D - np.diag(dg)) or np.any(dg < 0):
        raise ValueError("D must be diagonal with non-negative entries")
    return dg


def rank1_diagonal_spectrum(x, y, D, h: float) -> np.ndarray:
    """Jacobian eigenvalues at a rank-one fixed point of ``0.5 |D - x y^T|^2``.

    With ``mu^2 = |x|^2 |y|^2`` and ``u^2 = |x|^2 + |y|^2`` each diagonal entry
    ``mu_i`` contributes the two roots of ``l^2 + h u^2 l + h^2 (mu^2 - mu_i^2)``;
    the Jacobian eigenvalues are ``1 + l``.
    """
    dg = _diag_entries(D)
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if x.shape != (dg.size,) or y.shape != (dg.size,):
        raise ValueError("x and y must match the size of D")
    s = FactorState.from_vectors(x, y, layout="col")
    _require_fixed_point(pb.GeneralFactorization(np.diag(dg), 1), s)
    V, W = float(x @ x), float(y @ y)
    u2, mu2 = V + W, V * W
    out = []
    for mi in dg:
        b = h * u2
        c = h * h * (mu2 - mi * mi)
        disc = math.sqrt(max(b * b - 4 * c, 0.0))
        # stable quadratic roots
        q = -0.5 * (b + disc)
        r1 = q
        r2 = c / q if q != 0 else 0.0
        out += [1.0 + r1, 1.0 + r2]
    return np.sort(np.array(out))


def fixed_point_family(D, block_index: int, norm_ratio: float = 1.0) -> FactorState:
    """Rank-one fixed point of ``0.5 |D - x y^T|^2`` supported on one block.

    Blocks are the groups of equal diagonal entries, ordered by first
    appearance and indexed from 0.  All mass goes on the first coordinate of
    the block, with ``|x| = sqrt(mu_i * ratio)`` and ``|y| = sqrt(mu_i / ratio)``.
    """
    dg = _diag_entries(D)
    if not norm_ratio > 0:
        raise ValueError("norm_ratio must be positive")
    values, first = [], []
    for j, v in enumerate(dg):
        if not any(v == w for w in values):
            values.append(v)
            first.append(j)
    if not 0 <= block_index < len(values):
        raise IndexError(f"block_index must be in [0, {len(values)})")
    mu_i = values[block_index]
    if mu_i <= 0:
        raise ValueError("the chosen block has diagonal value 0")
    x = np.zeros(dg.size)
    y = np.zeros(dg.size)
    x[first[block_index]] = math.sqrt(mu_i * norm_ratio)
    y[first[block_index]] = math.sqrt(mu_i / norm_ratio)
    return FactorState.from_vectors(x, y, layout="col")


def hessian_traces(A, s: FactorState):
    """Assembled and closed-form ``Tr(H)`` and ``Tr(H^2)`` for ``0.5 |A - X Y^T|^2``.

    Closed forms, valid at critical points::

        Tr(H)   = n (|X|^2 + |Y|^2)
        Tr(H^2) = 2 |X|^2 |Y|^2 + n (|X^T X|^2 + |Y^T Y|^2) + 2 d |A - X Y^T|^2

    Returns ``(tr, tr2, tr_closed, tr2_closed, critical)``.  The first closed
    form holds everywhere; the second needs ``(A - X Y^T) Y = 0`` and
    ``(A - X Y^T)^T X = 0``, reported in ``critical``.
    """
    A = ensure_finite(np.atleast_2d(A), "A")
    n, d = s.shape
    p = pb.GeneralFactorization(A, d)
    H = pb.hessian(p, s)
    tr = float(np.trace(H))
    tr2 = float(np.sum(H * H))
    X, Y = s.X, s.Y
    fx, fy = float(np.sum(X * X)), float(np.sum(Y * Y))
    E = A - X @ Y.T
    tr_c = n * (fx + fy)
    tr2_c = (
        2.0 * fx * fy
        + n * (float(np.sum((X.T @ X) ** 2)) + float(np.sum((Y.T @ Y) ** 2)))
        + 2.0 * d * float(np.sum(E * E))
    )
    critical = pb.gradient_norm(p, s) < 1e-8 * (1.0 + s.norm())
    return tr, tr2, tr_c, tr2_c, critical


def rotate_to_diagonal(A, s0: FactorState) -> RotatedProblem:
    """SVD change of variables ``X = U R``, ``Y = V S`` with ``A = U D V^T``."""
    A = ensure_finite(np.atleast_2d(A), "A")
    if A.shape[0] != A.shape[1]:
        raise ValueError("A must be square")
    U, sv, V = svd(A)
    D = np.diag(sv)
    return RotatedProblem(D=D, U=U, V=V, R0=U.T @ s0.X, S0=V.T @ s0.Y)
