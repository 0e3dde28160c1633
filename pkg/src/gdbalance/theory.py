"""Closed-form learning-rate bounds, per-step quantities and region labels.

Notation follows the scalar and rank-one analyses: for a state ``(x, y)``,
``u^2 = |x|^2 + |y|^2``, ``V = x.x``, ``W = y.y`` and ``U = x.y``.  For matrix
states the same symbols use Frobenius norms and ``U = Tr(X Y^T)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from . import problems as pb
from .numkit import svd
from .problems import FactorState

__all__ = [
    "Diagnostics",
    "BoundReport",
    "Region",
    "scalar_lr_bound",
    "rank1_lr_bound",
    "balancing_bound",
    "s_factor",
    "alignment_factor",
    "misalignment",
    "corollary_balance_check",
    "region_label",
    "diagnostics",
    "rotation_for",
    "DIAGNOSTIC_FIELDS",
]

SQRT7 = math.sqrt(7.0)


@dataclass(frozen=True)
class Diagnostics:
    loss: float
    u_sq: float
    xty: float
    s: float
    V: float
    W: float
    U: float
    cos_align: float
    fro_x: float
    fro_y: float
    gap_fro: float
    balance_sq: float
    # names of fields that are undefined for this family/state and set to NaN
    undefined: frozenset = field(default_factory=frozenset)


DIAGNOSTIC_FIELDS = (
    "loss", "u_sq", "xty", "s", "V", "W", "U",
    "cos_align", "fro_x", "fro_y", "gap_fro", "balance_sq",
)


@dataclass(frozen=True)
class BoundReport:
    h_bound: float
    bound_kind: str  # "scalar" | "rank1" | "user"
    balance_limit_norm_sq: float
    balance_limit_gap_sq: float

    def header_lines(self) -> list[str]:
        return [
            f"# h_bound={self.h_bound!r}",
            f"# bound_kind={self.bound_kind}",
            f"# balance_limit_norm_sq={self.balance_limit_norm_sq!r}",
            f"# balance_limit_gap_sq={self.balance_limit_gap_sq!r}",
        ]


def _check_mu(mu: float) -> None:
    if not mu > 0:
        raise ValueError("mu must be positive")


def scalar_lr_bound(norm_x0: float, norm_y0: float, mu: float, c: float = 1.0) -> float:
    """``min{4 / (u0^2 + 4 c mu), 1 / ((2 + c) mu)}``; ``c = 1`` is the headline bound."""
    _check_mu(mu)
    if c < 1:
        raise ValueError("c must be at least 1")
    u0 = norm_x0**2 + norm_y0**2
    return min(4.0 / (u0 + 4.0 * c * mu), 1.0 / ((2.0 + c) * mu))


def rank1_lr_bound(norm_x0: float, norm_y0: float, mu: float, c: float = SQRT7) -> float:
    """``min{4 / (u0^2 + 4 c mu), 1 / ((sqrt7 + c) mu)}`` with ``c >= sqrt7``."""
    _check_mu(mu)
    if c < SQRT7 - 1e-15:
        raise ValueError("c must be at least sqrt(7)")
    u0 = norm_x0**2 + norm_y0**2
    return min(4.0 / (u0 + 4.0 * c * mu), 1.0 / ((SQRT7 + c) * mu))


def balancing_bound(h: float, mu_sum: float, c: float = 1.0, kind: str = "user") -> BoundReport:
    if not h > 0:
        raise ValueError("h must be positive")
    if not c > 0:
        raise ValueError("c must be positive")
    lim = 2.0 / (c * h)
    return BoundReport(h, kind, lim, lim - 2.0 * mu_sum)


def s_factor(state: FactorState, mu: float, h: float) -> float:
    """Multiplier with ``x+ . y+ - mu = s (x.y - mu)`` for one scalar GD step."""
    if state.shape[0] != 1:
        raise ValueError("s_factor needs a scalar-family state (n = 1)")
    x, y = state.X[0], state.Y[0]
    xy = float(x @ y)
    u2 = float(x @ x + y @ y)
    return 1.0 - h * u2 - h * h * xy * (mu - xy)


def alignment_factor(V: float, W: float, mu: float, h: float) -> float:
    """Contraction ``r`` of ``VW - U^2`` over one rank-one isotropic GD step."""
    if V < 0 or W < 0:
        raise ValueError("V and W must be non-negative")
    l = 1.0 - h * (V + W) + h * h * (V * W - mu * mu)
    return l * l


def misalignment(state: FactorState) -> float:
    """``|x|^2 |y|^2 - (x.y)^2`` computed as ``0.5 * |x y^T - y x^T|_F^2``.

    The antisymmetric form has no cancellation, so it stays accurate when the
    two vectors are nearly parallel.
    """
    x = state.X.ravel()
    y = state.Y.ravel()
    K = np.outer(x, y)
    return 0.5 * float(np.sum((K - K.T) ** 2))


def corollary_balance_check(init: FactorState, final: FactorState, mu: float):
    """Evaluate ``|x - y|^2 < 0.5 |x0 - y0|^2 + 2 mu``; returns ``(holds, lhs, rhs)``."""
    lhs = float(np.sum((final.X - final.Y) ** 2))
    rhs = 0.5 * float(np.sum((init.X - init.Y) ** 2)) + 2.0 * mu
    return lhs < rhs, lhs, rhs


class Region(str, Enum):
    P1_ONE_STEP = "P1-one-step-decrease"
    P1_TWO_STEP = "P1-two-step-decrease"
    P2_BALL = "P2-ball"
    BEYOND = "beyond-4/h"


def region_label(state: FactorState, mu: float, h: float) -> Region:
    if state.shape[0] != 1:
        raise ValueError("region_label needs a scalar-family state (n = 1)")
    x, y = state.X[0], state.Y[0]
    u2 = float(x @ x + y @ y)
    xy = float(x @ y)
    if u2 <= 2.0 / h:
        return Region.P2_BALL
    if u2 >= 4.0 / h:
        return Region.BEYOND
    if xy > mu or xy < -h * mu * u2 / (4.0 - h * u2):
        return Region.P1_ONE_STEP
    return Region.P1_TWO_STEP


def rotation_for(p) -> Optional[tuple[np.ndarray, np.ndarray]]:
    """``(U, V)`` from the SVD of a general target; None for the other families."""
    if isinstance(p, pb.GeneralFactorization):
        U, _, V = svd(p.A)
        return U, V
    return None


def diagnostics(p, s: FactorState, h: float, rotation=None) -> Diagnostics:
    X, Y = s.X, s.Y
    V = float(np.sum(X * X))
    W = float(np.sum(Y * Y))
    U = float(np.sum(X * Y))
    undefined = set()

    if V * W > 0:
        cos = max(-1.0, min(1.0, U / math.sqrt(V * W)))
    else:
        cos = math.nan
        undefined.add("cos_align")

    if isinstance(p, (pb.ScalarFactorization, pb.RankOneIsotropic)):
        s_k = 1.0 - h * (V + W) - h * h * U * (p.mu - U)
    else:
        s_k = math.nan
        undefined.add("s")

    if isinstance(p, pb.GeneralFactorization):
        if rotation is None:
            raise ValueError("general factorization diagnostics need the SVD rotation (U, V)")
        Ua, Va = rotation
        balance = float(np.sum((X - Ua @ (Va.T @ Y)) ** 2))
    elif isinstance(p, (pb.ScalarFactorization, pb.RankOneIsotropic)):
        balance = float(np.sum((X - Y) ** 2))
    else:
        balance = math.nan
        undefined.add("balance_sq")

    fx, fy = math.sqrt(V), math.sqrt(W)
    return Diagnostics(
        loss=pb.loss(p, s),
        u_sq=V + W,
        xty=U,
        s=s_k,
        V=V,
        W=W,
        U=U,
        cos_align=cos,
        fro_x=fx,
        fro_y=fy,
        gap_fro=abs(fx - fy),
        balance_sq=balance,
        undefined=frozenset(undefined),
    )
