"""GD as a discrete-time dynamical system.

:func:`run` iterates the simultaneous update
``X+ = X + h R Y``, ``Y+ = Y + h R^T X`` (``R`` from :func:`problems.residual`)
and stops on convergence, divergence, a certified cycle, or the iteration
budget.  The module also holds the periodic-orbit tools and the first-order
modified equation used for comparison with gradient flow.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from . import problems as pb
from . import theory
from .problems import FactorState
from .theory import Diagnostics

__all__ = [
    "GDConfig",
    "OutcomeKind",
    "Outcome",
    "Trajectory",
    "GDOverflowError",
    "NewtonConvergenceError",
    "OrbitCollapseError",
    "gd_step",
    "run",
    "detect_period",
    "refine_periodic_orbit",
    "iterate_map",
    "detect_phase_transition",
    "modified_equation_rhs",
    "integrate_modified_equation",
    "TRAJECTORY_COLUMNS",
]


class GDOverflowError(FloatingPointError):
    """A GD step produced non-finite values."""


class NewtonConvergenceError(RuntimeError):
    pass


class OrbitCollapseError(RuntimeError):
    """Newton converged, but to an orbit of smaller period than requested."""


@dataclass(frozen=True)
class GDConfig:
    h: float
    max_iters: int = 1_000_000
    grad_tol: float = 1e-10
    diverge_threshold: float = 1e12
    record_stride: int = 1
    seed: int = 0
    max_period: int = 64
    period_tol: float = 1e-9
    keep_states: bool = False

    def __post_init__(self):
        if not self.h > 0:
            raise ValueError("h must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if not self.grad_tol > 0:
            raise ValueError("grad_tol must be positive")
        if not self.diverge_threshold > self.grad_tol:
            raise ValueError("diverge_threshold must exceed grad_tol")
        if self.record_stride < 1:
            raise ValueError("record_stride must be at least 1")
        if self.max_period < 1:
            raise ValueError("max_period must be at least 1")


class OutcomeKind(str, Enum):
    CONVERGED = "Converged"
    DIVERGED = "Diverged"
    PERIODIC = "Periodic"
    MAX_ITERS = "MaxItersReached"


@dataclass(frozen=True)
class Outcome:
    kind: OutcomeKind
    iters: int
    period: Optional[int] = None

    def __post_init__(self):
        if self.kind is OutcomeKind.PERIODIC and (self.period is None or self.period < 1):
            raise ValueError("periodic outcome needs period >= 1")

    @property
    def converged(self) -> bool:
        return self.kind is OutcomeKind.CONVERGED

    def __str__(self) -> str:
        if self.kind is OutcomeKind.PERIODIC:
            return f"Periodic(period={self.period})"
        return self.kind.value


TRAJECTORY_COLUMNS = (
    "iter", "loss", "u_sq", "xty", "s_k", "V", "W", "U",
    "cos_align", "fro_x", "fro_y", "gap_fro",
)


@dataclass
class Trajectory:
    h: float
    records: list[tuple[int, Diagnostics]]
    final: FactorState
    outcome: Outcome
    states: Optional[list[FactorState]] = None
    time_scale: float = field(default=1.0)

    @property
    def iters(self) -> np.ndarray:
        return np.array([k for k, _ in self.records], dtype=int)

    @property
    def times(self) -> np.ndarray:
        return self.iters * self.time_scale

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(d, name) for _, d in self.records], dtype=float)

    @property
    def first(self) -> Diagnostics:
        return self.records[0][1]

    @property
    def last(self) -> Diagnostics:
        return self.records[-1][1]

    def csv_rows(self):
        for k, d in self.records:
            yield [
                k, d.loss, d.u_sq, d.xty, d.s, d.V, d.W, d.U,
                d.cos_align, d.fro_x, d.fro_y, d.gap_fro,
            ]


def gd_step(p, s: FactorState, h: float) -> FactorState:
    """One simultaneous GD update; both factors use the k-th state."""
    if not h > 0:
        raise ValueError("h must be positive")
    with np.errstate(over="ignore", invalid="ignore"):
        R = pb.residual(p, s)
        X = s.X + h * (R @ s.Y)
        Y = s.Y + h * (R.T @ s.X)
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
        raise GDOverflowError("GD step overflowed")
    return FactorState(X, Y)


def run(p, init: FactorState, cfg: GDConfig) -> Trajectory:
    """Iterate GD from ``init`` until one of the stopping rules fires.

    Diagnostics are recorded every ``cfg.record_stride`` iterations and at the
    final iterate.  Cycle detection only starts after ``max_iters // 2``
    iterations and looks for periods ``2..max_period`` (period 1 is left to the
    gradient test).
    """
    h = cfg.h
    rotation = theory.rotation_for(p)
    X, Y = init.X.copy(), init.Y.copy()
    records: list[tuple[int, Diagnostics]] = []
    states: Optional[list[FactorState]] = [] if cfg.keep_states else None
    window = 3 * cfg.max_period
    tail: deque = deque(maxlen=window)
    transient = cfg.max_iters // 2
    thr = cfg.diverge_threshold
    outcome = None
    k = 0
    with np.errstate(over="ignore", invalid="ignore"):
        while True:
            s = FactorState(X, Y)
            R = pb.residual(p, s)
            GX = R @ Y
            GY = R.T @ X
            gnorm = math.sqrt(float(np.sum(GX * GX) + np.sum(GY * GY)))
            u2 = float(np.sum(X * X) + np.sum(Y * Y))
            finite = math.isfinite(gnorm) and math.isfinite(u2)
            if finite:
                f = pb.loss(p, s)
                finite = math.isfinite(f)
            if not finite or u2 > thr or f > thr:
                outcome = Outcome(OutcomeKind.DIVERGED, k)
            elif gnorm < cfg.grad_tol:
                outcome = Outcome(OutcomeKind.CONVERGED, k)
            elif k >= cfg.max_iters:
                outcome = Outcome(OutcomeKind.MAX_ITERS, k)
            elif k >= transient:
                tail.append(s.flat())
                if len(tail) == window and (k - transient) % window == 0:
                    per = detect_period(list(tail), cfg.max_period, cfg.period_tol, min_period=2)
                    if per is not None:
                        outcome = Outcome(OutcomeKind.PERIODIC, k, per)

            if outcome is not None:
                if finite:
                    if not records or records[-1][0] != k:
                        records.append((k, theory.diagnostics(p, s, h, rotation)))
                elif not records:
                    records.append((k, _nan_diagnostics()))
                if states is not None:
                    states.append(s)
                break

            if k % cfg.record_stride == 0:
                records.append((k, theory.diagnostics(p, s, h, rotation)))
            if states is not None:
                states.append(s)
            X = X + h * GX
            Y = Y + h * GY
            k += 1

    final = FactorState(X, Y)
    return Trajectory(h=h, records=records, final=final, outcome=outcome, states=states)


def _nan_diagnostics() -> Diagnostics:
    nan = math.nan
    return Diagnostics(nan, nan, nan, nan, nan, nan, nan, nan, nan, nan, nan, nan,
                       frozenset(theory.DIAGNOSTIC_FIELDS))


def _as_flat_array(states) -> np.ndarray:
    rows = [s.flat() if isinstance(s, FactorState) else np.asarray(s, dtype=float) for s in states]
    return np.vstack(rows)


def detect_period(
    traj_tail: Sequence, max_period: int, tol: float = 1e-9, min_period: int = 1
) -> Optional[int]:
    """Smallest period ``p <= max_period`` repeated across the whole window.

    A period holds when ``|z_{k+p} - z_k| < tol * (1 + |z_k|)`` for every ``k``
    with both points in the window.  ``traj_tail`` holds FactorStates or flat
    vectors and must be at least ``3 * max_period`` long.
    """
    if len(traj_tail) < 3 * max_period:
        raise ValueError("tail window must hold at least 3 * max_period states")
    Z = _as_flat_array(traj_tail)
    scale = 1.0 + np.linalg.norm(Z, axis=1)
    for per in range(max(1, min_period), max_period + 1):
        diff = np.linalg.norm(Z[per:] - Z[:-per], axis=1)
        if np.all(diff < tol * scale[:-per]):
            return per
    return None


def iterate_map(p, z: np.ndarray, shape, h: float, times: int) -> np.ndarray:
    """Apply ``times`` GD steps to a flat state vector."""
    s = FactorState.from_flat(z, shape)
    for _ in range(times):
        s = gd_step(p, s, h)
    return s.flat()


def refine_periodic_orbit(
    p,
    guess: FactorState,
    period: int,
    h: float,
    tol: float = 1e-10,
    max_newton: int = 100,
    distinct_tol: float = 1e-6,
) -> FactorState:
    """Newton's method on ``psi^period(z) - z`` with a central-difference Jacobian.

    Raises :class:`NewtonConvergenceError` if the residual does not drop below
    ``tol`` within ``max_newton`` steps and :class:`OrbitCollapseError` if the
    point repeats after fewer than ``period`` steps.
    """
    if not 1 <= period <= 8:
        raise ValueError("period must be between 1 and 8")
    if guess.size > 16:
        raise ValueError("orbit refinement is meant for low-dimensional states")
    shape = guess.shape
    z = guess.flat()
    m = z.size

    def F(v):
        return iterate_map(p, v, shape, h, period) - v

    try:
        r = F(z)
        for _ in range(max_newton):
            if np.linalg.norm(r) < tol:
                break
            J = np.empty((m, m))
            for j in range(m):
                step = 1e-7 * (1.0 + abs(z[j]))
                e = np.zeros(m)
                e[j] = step
                J[:, j] = (F(z + e) - F(z - e)) / (2 * step)
            dz = np.linalg.lstsq(J, -r, rcond=None)[0]
            z = z + dz
            r = F(z)
            if not np.all(np.isfinite(r)):
                raise NewtonConvergenceError("Newton iterate left the finite range")
        else:
            if np.linalg.norm(r) >= tol:
                raise NewtonConvergenceError(f"no convergence in {max_newton} Newton steps")
    except GDOverflowError as exc:
        raise NewtonConvergenceError("GD map overflowed during Newton refinement") from exc

    out = FactorState.from_flat(z, shape)
    zj = z
    for j in range(1, period):
        zj = iterate_map(p, zj, shape, h, 1)
        if np.linalg.norm(zj - z) < distinct_tol:
            raise OrbitCollapseError(f"orbit has period {j}, not {period}")
    return out


def detect_phase_transition(traj: Trajectory, rtol: float = 1e-12) -> Optional[int]:
    """Start of the longest monotone (non-increasing) suffix of the recorded loss.

    Returns the recorded iteration index, 0 for a fully monotone run, and None
    unless the run converged.  ``rtol`` absorbs round-off jitter when the loss
    settles at a non-zero minimum.
    """
    if not traj.outcome.converged:
        return None
    f = traj.column("loss")
    it = traj.iters
    j = len(f) - 1
    while j > 0 and f[j] <= f[j - 1] + rtol * abs(f[j - 1]):
        j -= 1
    return int(it[j])


def modified_equation_rhs(p, s: FactorState, h: float) -> tuple[np.ndarray, np.ndarray]:
    """First-order modified vector field ``-g - (h/2) H g`` with ``g = grad f``."""
    pb._require_factorization(p)
    gX, gY = pb.gradient(p, s)
    hX, hY = pb.hessian_vector_product(p, s, gX, gY)
    return -gX - 0.5 * h * hX, -gY - 0.5 * h * hY


def integrate_modified_equation(
    p,
    init: FactorState,
    h: float,
    T: float,
    dt: Optional[float] = None,
    record_stride: int = 1,
    grad_tol: float = 1e-10,
    diverge_threshold: float = 1e12,
) -> Trajectory:
    """Classical RK4 integration of :func:`modified_equation_rhs` up to time ``T``.

    The internal step is ``h / ceil(h / dt)`` so that sample ``k`` sits at time
    ``k h``, matching GD iteration ``k``.  ``dt`` may not exceed ``h / 10``; it
    defaults to ``h / 400`` because the field is stiff at unbalanced starts
    (``h lambda_max`` of order one), where ``h / 10`` leaves errors near 1e-2.
    """
    if not T > 0:
        raise ValueError("T must be positive")
    if dt is None:
        dt = h / 400.0
    if not dt > 0:
        raise ValueError("dt must be positive")
    if dt > h / 10.0 * (1 + 1e-12):
        raise ValueError("dt must not exceed h / 10")
    sub = int(math.ceil(h / dt - 1e-9))
    step = h / sub
    n_steps = int(math.ceil(T / h - 1e-9))
    rotation = theory.rotation_for(p)

    pb._require_factorization(p)
    A = p.target
    half = 0.5 * h

    def f(X, Y):
        # same field as modified_equation_rhs, without the per-call wrappers
        R = A - X @ Y.T
        gX = -(R @ Y)
        gY = -(R.T @ X)
        dP = gX @ Y.T + X @ gY.T
        return -gX - half * (dP @ Y - R @ gY), -gY - half * (dP.T @ X - R.T @ gX)

    X, Y = init.X.copy(), init.Y.copy()
    records = [(0, theory.diagnostics(p, init, h, rotation))]
    outcome = None
    for k in range(1, n_steps + 1):
        for _ in range(sub):
            k1x, k1y = f(X, Y)
            k2x, k2y = f(X + 0.5 * step * k1x, Y + 0.5 * step * k1y)
            k3x, k3y = f(X + 0.5 * step * k2x, Y + 0.5 * step * k2y)
            k4x, k4y = f(X + step * k3x, Y + step * k3y)
            X = X + step / 6.0 * (k1x + 2 * k2x + 2 * k3x + k4x)
            Y = Y + step / 6.0 * (k1y + 2 * k2y + 2 * k3y + k4y)
        s = FactorState(X, Y)
        bad = not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y)))
        if bad or s.norm() ** 2 > diverge_threshold:
            outcome = Outcome(OutcomeKind.DIVERGED, k)
            break
        if k % record_stride == 0 or k == n_steps:
            records.append((k, theory.diagnostics(p, s, h, rotation)))
    if outcome is None:
        final = FactorState(X, Y)
        kind = (
            OutcomeKind.CONVERGED
            if pb.gradient_norm(p, final) < grad_tol
            else OutcomeKind.MAX_ITERS
        )
        outcome = Outcome(kind, n_steps)
    return Trajectory(
        h=h, records=records, final=FactorState(X, Y), outcome=outcome, time_scale=h
    )
