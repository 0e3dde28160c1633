"""Objective families: losses, gradients, Hessians and global-minimum values.

All five families share one state type, :class:`FactorState`, holding two
``n x d`` factors.  The scalar family uses ``n = 1`` (row vectors ``x, y`` of
length ``d``) and the rank-one isotropic family uses ``d = 1``.

The three *factorization* families all minimise ``0.5 * ||A - X Y^T||_F^2`` for
a fixed square target ``A`` (``[[mu]]`` for the scalar family and ``mu * I``
for the isotropic one), so most routines only need :attr:`target`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .numkit import ensure_finite, svd, sym_eig

__all__ = [
    "FactorState",
    "ScalarFactorization",
    "RankOneIsotropic",
    "GeneralFactorization",
    "MatrixSensing",
    "MatrixCompletion",
    "Problem",
    "is_factorization",
    "residual",
    "loss",
    "gradient",
    "gradient_norm",
    "hessian",
    "hessian_vector_product",
    "hessian_spectrum_closed_form",
    "min_loss",
    "min_loss_is_known",
    "hessian_eigenvalues",
    "UnsupportedFamilyError",
]


class UnsupportedFamilyError(TypeError):
    """The requested operation is not defined for this objective family."""


@dataclass(frozen=True, eq=False)
class FactorState:
    """GD iterate ``(X, Y)``; both factors are ``n x d`` float arrays."""

    X: np.ndarray
    Y: np.ndarray

    def __post_init__(self):
        X = np.array(self.X, dtype=float, ndmin=2)
        Y = np.array(self.Y, dtype=float, ndmin=2)
        if X.shape != Y.shape:
            raise ValueError(f"factor shapes differ: {X.shape} vs {Y.shape}")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)

    @property
    def shape(self) -> tuple[int, int]:
        return self.X.shape

    @property
    def size(self) -> int:
        return 2 * self.X.size

    def flat(self) -> np.ndarray:
        """Column-stacked ``vec(X)`` followed by ``vec(Y)``."""
        return np.concatenate([self.X.ravel(order="F"), self.Y.ravel(order="F")])

    @classmethod
    def from_flat(cls, z, shape: tuple[int, int]) -> "FactorState":
        n, d = shape
        z = np.asarray(z, dtype=float)
        k = n * d
        if z.shape != (2 * k,):
            raise ValueError("flat vector has the wrong length")
        return cls(z[:k].reshape((n, d), order="F"), z[k:].reshape((n, d), order="F"))

    @classmethod
    def from_vectors(cls, x, y, layout: str = "row") -> "FactorState":
        """Build a state from two vectors, as rows (``n=1``) or columns (``d=1``)."""
        x = np.asarray(x, dtype=float).ravel()
        y = np.asarray(y, dtype=float).ravel()
        if layout == "row":
            return cls(x[None, :], y[None, :])
        if layout == "col":
            return cls(x[:, None], y[:, None])
        raise ValueError("layout must be 'row' or 'col'")

    def norm(self) -> float:
        return float(np.sqrt(np.sum(self.X**2) + np.sum(self.Y**2)))


def _positive_mu(mu: float) -> float:
    mu = float(mu)
    if not np.isfinite(mu) or mu <= 0:
        raise ValueError("mu must be a finite positive number")
    return mu


def _positive_count(v, name: str) -> int:
    v = int(v)
    if v < 1:
        raise ValueError(f"{name} must be a positive integer")
    return v


@dataclass(frozen=True)
class ScalarFactorization:
    """``0.5 * (mu - x y^T)^2`` with ``x, y`` of length ``d``."""

    mu: float
    d: int

    def __post_init__(self):
        object.__setattr__(self, "mu", _positive_mu(self.mu))
        object.__setattr__(self, "d", _positive_count(self.d, "d"))

    n = 1

    @property
    def target(self) -> np.ndarray:
        return np.array([[self.mu]])


@dataclass(frozen=True)
class RankOneIsotropic:
    """``0.5 * ||mu I_n - x y^T||_F^2`` with column vectors ``x, y``."""

    mu: float
    n: int

    def __post_init__(self):
        object.__setattr__(self, "mu", _positive_mu(self.mu))
        object.__setattr__(self, "n", _positive_count(self.n, "n"))

    d = 1

    @property
    def target(self) -> np.ndarray:
        return self.mu * np.eye(self.n)


@dataclass(frozen=True, eq=False)
class GeneralFactorization:
    """``0.5 * ||A - X Y^T||_F^2`` for a square ``A`` and rank budget ``d``."""

    A: np.ndarray
    d: int

    def __post_init__(self):
        A = ensure_finite(np.array(self.A, dtype=float, ndmin=2), "A")
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ValueError("A must be square")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "d", _positive_count(self.d, "d"))

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def target(self) -> np.ndarray:
        return self.A


@dataclass(frozen=True, eq=False)
class MatrixSensing:
    """``(1/2m) * sum_i (b_i - <A_i, X Y^T>)^2`` with ``<U, V> = Tr(V^T U)``."""

    sensors: np.ndarray
    b: np.ndarray
    d: int

    def __post_init__(self):
        S = ensure_finite(np.array(self.sensors, dtype=float), "sensors")
        if S.ndim == 2:
            S = S[None]
        if S.ndim != 3 or S.shape[1] != S.shape[2] or S.shape[0] < 1:
            raise ValueError("sensors must be a non-empty stack of square matrices")
        b = ensure_finite(np.array(self.b, dtype=float).ravel(), "b")
        if b.shape[0] != S.shape[0]:
            raise ValueError("sensors and b must have equal length")
        object.__setattr__(self, "sensors", S)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "d", _positive_count(self.d, "d"))

    @property
    def n(self) -> int:
        return self.sensors.shape[1]

    @property
    def m(self) -> int:
        return self.sensors.shape[0]


@dataclass(frozen=True, eq=False)
class MatrixCompletion:
    """``0.5 * ||P_Omega(A - X Y^T)||_F^2`` for a boolean observation mask."""

    A: np.ndarray
    mask: np.ndarray
    d: int
    _weights: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        A = ensure_finite(np.array(self.A, dtype=float, ndmin=2), "A")
        mask = np.array(self.mask, dtype=bool)
        if A.shape[0] != A.shape[1] or mask.shape != A.shape:
            raise ValueError("A must be square and mask must match its shape")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "d", _positive_count(self.d, "d"))
        object.__setattr__(self, "_weights", mask.astype(float))

    @property
    def n(self) -> int:
        return self.A.shape[0]


Problem = Union[
    ScalarFactorization, RankOneIsotropic, GeneralFactorization, MatrixSensing, MatrixCompletion
]

_FACTORIZATION = (ScalarFactorization, RankOneIsotropic, GeneralFactorization)


def is_factorization(p) -> bool:
    return isinstance(p, _FACTORIZATION)


def _check_shape(p, s: FactorState) -> None:
    if s.shape != (p.n, p.d):
        raise ValueError(f"state shape {s.shape} does not match problem ({p.n}, {p.d})")


def _sensing_residuals(p: MatrixSensing, X, Y) -> np.ndarray:
    P = X @ Y.T
    return p.b - np.tensordot(p.sensors, P, axes=([1, 2], [0, 1]))


def residual(p, s: FactorState) -> np.ndarray:
    """Matrix ``R`` with ``grad_X = -R Y`` and ``grad_Y = -R^T X``.

    For the factorization families ``R = A - X Y^T``; completion masks it and
    sensing uses ``(1/m) sum_i r_i A_i``.
    """
    _check_shape(p, s)
    X, Y = s.X, s.Y
    if is_factorization(p):
        return p.target - X @ Y.T
    if isinstance(p, MatrixCompletion):
        return p._weights * (p.A - X @ Y.T)
    if isinstance(p, MatrixSensing):
        r = _sensing_residuals(p, X, Y)
        return np.tensordot(r, p.sensors, axes=1) / p.m
    raise UnsupportedFamilyError(type(p).__name__)


def loss(p, s: FactorState) -> float:
    _check_shape(p, s)
    if isinstance(p, MatrixSensing):
        r = _sensing_residuals(p, s.X, s.Y)
        return float(r @ r) / (2.0 * p.m)
    R = residual(p, s)
    return 0.5 * float(np.sum(R * R))


def gradient(p, s: FactorState) -> tuple[np.ndarray, np.ndarray]:
    R = residual(p, s)
    return -(R @ s.Y), -(R.T @ s.X)


def gradient_norm(p, s: FactorState) -> float:
    gX, gY = gradient(p, s)
    return float(np.sqrt(np.sum(gX**2) + np.sum(gY**2)))


def _require_factorization(p) -> None:
    if not is_factorization(p):
        raise UnsupportedFamilyError(
            f"operation is only defined for factorization families, not {type(p).__name__}"
        )


def hessian(p, s: FactorState) -> np.ndarray:
    """Assembled Hessian in the ``[vec(X); vec(Y)]`` (column-stacked) ordering.

    Block form::

        [[ Y^T Y (x) I_n,      T + I_d (x) E ],
         [ (T + I_d (x) E)^T,  X^T X (x) I_n ]]

    with ``E = X Y^T - A`` and ``T`` the ``d x d`` grid of ``n x n`` blocks whose
    ``(j, b)`` block is ``x_b y_j^T`` (``x_b`` a column of ``X``).
    """
    _require_factorization(p)
    _check_shape(p, s)
    n, d = s.shape
    X, Y = s.X, s.Y
    E = X @ Y.T - p.target
    In = np.eye(n)
    Id = np.eye(d)
    top_left = np.kron(Y.T @ Y, In)
    bottom_right = np.kron(X.T @ X, In)
    # T4[j, a, b, c] = X[a, b] * Y[c, j]; rows (j, a), cols (b, c)
    T = np.einsum("ab,cj->jabc", X, Y).reshape(n * d, n * d)
    off = T + np.kron(Id, E)
    H = np.block([[top_left, off], [off.T, bottom_right]])
    return 0.5 * (H + H.T)


def _data_operator(p, Z: np.ndarray) -> np.ndarray:
    """Hessian of the loss in ``P = X Y^T`` applied to ``Z`` (identity, mask or sensing)."""
    if is_factorization(p):
        return Z
    if isinstance(p, MatrixCompletion):
        return p._weights * Z
    if isinstance(p, MatrixSensing):
        c = np.tensordot(p.sensors, Z, axes=([1, 2], [0, 1]))
        return np.tensordot(c, p.sensors, axes=1) / p.m
    raise UnsupportedFamilyError(type(p).__name__)


def hessian_vector_product(p, s: FactorState, dX, dY) -> tuple[np.ndarray, np.ndarray]:
    """``H @ [vec(dX); vec(dY)]`` returned as a pair of ``n x d`` matrices.

    Works for all five families: with ``L`` the Hessian of the loss in
    ``P = X Y^T`` and ``R`` from :func:`residual`, the product is
    ``(L(dP) Y - R dY, L(dP)^T X - R^T dX)`` where ``dP = dX Y^T + X dY^T``.
    """
    _check_shape(p, s)
    X, Y = s.X, s.Y
    dX = np.asarray(dX, dtype=float)
    dY = np.asarray(dY, dtype=float)
    R = residual(p, s)
    LdP = _data_operator(p, dX @ Y.T + X @ dY.T)
    return LdP @ Y - R @ dY, LdP.T @ X - R.T @ dX


def hessian_spectrum_closed_form(p, s: FactorState) -> np.ndarray:
    """Closed-form Hessian eigenvalues (ascending) for the two vector families.

    Scalar family, with ``e = mu - x.y`` and ``u^2 = |x|^2 + |y|^2``::

        +e, -e                                  (each d-1 times)
        (u^2 +- sqrt(u^4 + 4 e^2 - 8 e x.y)) / 2

    Rank-one isotropic family: the Hessian is ``[[W I, B], [B^T, V I]]`` with
    ``B = 2 x y^T - mu I``, so each squared singular value ``t`` of ``B``
    contributes ``(V + W +- sqrt((V - W)^2 + 4 t)) / 2``.  ``B`` acts as
    ``-mu I`` off ``span{x, y}`` (``t = mu^2``, ``n-2`` times); the remaining
    two values solve ``t^2 - S t + P = 0`` with ``S = 4VW - 4 mu U + 2 mu^2``
    and ``P = mu^2 (mu - 2U)^2``.
    """
    _check_shape(p, s)
    if isinstance(p, ScalarFactorization):
        x, y = s.X[0], s.Y[0]
        mu, d = p.mu, p.d
        xy = float(x @ y)
        e = mu - xy
        u2 = float(x @ x + y @ y)
        disc = max(u2 * u2 + 4 * e * e - 8 * e * xy, 0.0)
        r = np.sqrt(disc)
        vals = [e] * (d - 1) + [-e] * (d - 1) + [0.5 * (u2 + r), 0.5 * (u2 - r)]
        return np.sort(np.array(vals))
    if isinstance(p, RankOneIsotropic):
        x, y = s.X[:, 0], s.Y[:, 0]
        mu, n = p.mu, p.n
        V, W, U = float(x @ x), float(y @ y), float(x @ y)
        if n == 1:
            ts = [(2 * U - mu) ** 2]
        else:
            S = 4 * V * W - 4 * mu * U + 2 * mu * mu
            P = (mu * (mu - 2 * U)) ** 2
            q = np.sqrt(max(S * S - 4 * P, 0.0))
            ts = [0.5 * (S + q), max(0.5 * (S - q), 0.0)] + [mu * mu] * (n - 2)
        vals = []
        for t in ts:
            r = np.sqrt((V - W) ** 2 + 4 * t)
            vals += [0.5 * (V + W + r), 0.5 * (V + W - r)]
        return np.sort(np.array(vals))
    raise UnsupportedFamilyError("closed-form spectrum needs a scalar or rank-one isotropic problem")


def min_loss(p) -> float:
    """Global minimum of the objective.

    Factorization families use the tail energy of the singular values,
    ``0.5 * sum_{i > d} sigma_i(A)^2``.  Sensing and completion have no closed
    form; they report 0 and :func:`min_loss_is_known` returns False.
    """
    if isinstance(p, ScalarFactorization):
        return 0.0
    if isinstance(p, RankOneIsotropic):
        return 0.5 * (p.n - 1) * p.mu**2
    if isinstance(p, GeneralFactorization):
        _, sv, _ = svd(p.A)
        tail = sv[p.d :]
        return 0.5 * float(np.sum(tail**2))
    if isinstance(p, (MatrixSensing, MatrixCompletion)):
        return 0.0
    raise UnsupportedFamilyError(type(p).__name__)


def min_loss_is_known(p) -> bool:
    return is_factorization(p)


def hessian_eigenvalues(p, s: FactorState) -> np.ndarray:
    """Numerical Hessian spectrum via :func:`numkit.sym_eig` (ascending)."""
    w, _ = sym_eig(hessian(p, s))
    return w
