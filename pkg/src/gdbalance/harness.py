"""Declarative experiment runner.

An :class:`ExperimentConfig` is a flat set of ``key = value`` pairs.  There are
three experiment kinds:

``sweep``
    GD from one initial state over a list of learning rates.  Writes one
    trajectory CSV per ``h`` (``traj_h0.csv`` is the largest) and ``summary.csv``.
``orbits``
    Random scan plus Newton refinement for periodic orbits of the ``d = 1``
    scalar problem.  Writes ``orbits.csv``.
``modified``
    GD next to the RK4-integrated first-order modified equation over the same
    horizon.  Writes ``traj_gd.csv``, ``traj_modified.csv`` and ``summary.csv``.

Every run also writes ``manifest.txt`` with seeds, bounds and the version.
"""

from __future__ import annotations

import csv
import dataclasses
import datetime as _dt
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Optional

import numpy as np

from . import __version__
from . import engine as eg
from . import problems as pb
from . import theory as th
from .numkit import make_rng, sample_with_norm, sym_eig
from .problems import FactorState

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "SweepRow",
    "SweepSummary",
    "OrbitRecord",
    "ExperimentResult",
    "parse_config",
    "load_config",
    "format_config",
    "builtin_scenario",
    "BUILTIN_SCENARIOS",
    "build_problem",
    "build_init",
    "build_sensing",
    "build_completion",
    "learning_rates",
    "lipschitz_at",
    "run_sweep",
    "orbit_scan",
    "run_experiment",
    "SUMMARY_COLUMNS",
]


class ConfigError(ValueError):
    pass


FAMILIES = ("scalar", "rank1", "general", "sensing", "completion")
KINDS = ("sweep", "orbits", "modified")
H_RULES = ("explicit", "scalar-bound", "rank1-bound", "lipschitz")


@dataclass
class ExperimentConfig:
    scenario: str = "custom"
    kind: str = "sweep"
    # problem
    family: str = "scalar"
    mu: float = 1.0
    n: int = 1
    d: int = 1
    m: int = 10
    rank: int = 2
    observe: float = 1.0
    data_seed: int = 0
    # initial state: explicit flat vectors (row-major n x d) or norms + seed
    init_x: Optional[list[float]] = None
    init_y: Optional[list[float]] = None
    norm_x: float = 1.0
    norm_y: float = 1.0
    init_seed: int = 0
    # learning rates
    h_rule: str = "explicit"
    h_values: list[float] = field(default_factory=list)
    h_c: Optional[float] = None  # constant c in the closed-form bounds
    h_scale: float = 2.0  # lipschitz rule: h0 = h_scale / L0
    fractions: list[float] = field(default_factory=lambda: [1.0])
    # GD settings
    max_iters: int = 1_000_000
    grad_tol: float = 1e-10
    diverge_threshold: float = 1e12
    record_stride: int = 1
    max_period: int = 64
    period_tol: float = 1e-9
    # orbit scans
    scans: int = 500
    scan_box: float = 2.0
    orbit_periods: list[int] = field(default_factory=lambda: [2, 3, 4])
    # bookkeeping
    expect: str = "converge"  # "converge" or "any"
    workers: int = 1
    out: Optional[str] = None
    note: str = ""

    def validate(self) -> "ExperimentConfig":
        if not self.scenario or any(c in self.scenario for c in "/\\ "):
            raise ConfigError("scenario must be a non-empty name without spaces or slashes")
        if self.kind not in KINDS:
            raise ConfigError(f"kind must be one of {KINDS}")
        if self.family not in FAMILIES:
            raise ConfigError(f"family must be one of {FAMILIES}")
        if not self.mu > 0:
            raise ConfigError("mu must be positive")
        for name in ("n", "d", "m", "rank", "max_iters", "record_stride", "max_period",
                     "scans", "workers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if self.family == "completion" and self.rank > self.n:
            raise ConfigError("rank must not exceed n")
        if not 0 < self.observe <= 1:
            raise ConfigError("observe must lie in (0, 1]")
        if self.h_rule not in H_RULES:
            raise ConfigError(f"h_rule must be one of {H_RULES}")
        if self.h_rule == "explicit":
            if not self.h_values:
                raise ConfigError("explicit h_rule needs a non-empty h_values list")
            if any(not h > 0 for h in self.h_values):
                raise ConfigError("learning rates must be positive")
        else:
            if not self.fractions:
                raise ConfigError("fractions must be non-empty")
            if any(not 0 < f <= 1 for f in self.fractions):
                raise ConfigError("fractions must lie in (0, 1]")
        if self.h_rule == "lipschitz" and not self.h_scale > 0:
            raise ConfigError("h_scale must be positive")
        if self.h_c is not None and not self.h_c > 0:
            raise ConfigError("h_c must be positive")
        if self.norm_x < 0 or self.norm_y < 0:
            raise ConfigError("initial norms must be non-negative")
        if (self.init_x is None) != (self.init_y is None):
            raise ConfigError("init_x and init_y must be given together")
        if self.init_x is not None and len(self.init_x) != len(self.init_y):
            raise ConfigError("init_x and init_y must have equal length")
        if self.expect not in ("converge", "any"):
            raise ConfigError("expect must be 'converge' or 'any'")
        if not self.grad_tol > 0 or not self.diverge_threshold > self.grad_tol:
            raise ConfigError("need 0 < grad_tol < diverge_threshold")
        if self.kind == "orbits":
            if self.family != "scalar" or self.d != 1:
                raise ConfigError("orbit scans need the scalar family with d = 1")
            if any(not 1 <= q <= 8 for q in self.orbit_periods):
                raise ConfigError("orbit periods must lie in [1, 8]")
        if self.kind == "modified" and self.family not in ("scalar", "rank1", "general"):
            raise ConfigError("the modified equation needs a factorization family")
        return self


_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}
_INT_FIELDS = {"n", "d", "m", "rank", "data_seed", "init_seed", "max_iters", "record_stride",
               "max_period", "scans", "workers"}
_FLOAT_FIELDS = {"mu", "observe", "norm_x", "norm_y", "h_c", "h_scale", "grad_tol",
                 "diverge_threshold", "period_tol", "scan_box"}
_FLOAT_LISTS = {"init_x", "init_y", "h_values", "fractions"}
_INT_LISTS = {"orbit_periods"}


def _parse_number(text: str) -> float:
    text = text.strip()
    if "/" in text:
        return float(Fraction(text))
    return float(text)


def _parse_int(text: str) -> int:
    v = _parse_number(text)
    if v != int(v):
        raise ValueError(f"{text!r} is not an integer")
    return int(v)


def _set_field(cfg: ExperimentConfig, key: str, raw: str) -> None:
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    raw = raw.strip()
    try:
        if key in _INT_FIELDS:
            val = _parse_int(raw)
        elif key in _FLOAT_FIELDS:
            val = None if raw.lower() == "none" else _parse_number(raw)
        elif key in _FLOAT_LISTS:
            val = [_parse_number(t) for t in raw.replace(",", " ").split()]
        elif key in _INT_LISTS:
            val = [_parse_int(t) for t in raw.replace(",", " ").split()]
        else:
            val = raw
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"bad value for {key!r}: {raw!r}") from exc
    setattr(cfg, key, val)


def parse_config(text: str, base: Optional[ExperimentConfig] = None) -> ExperimentConfig:
    """Parse flat ``key = value`` text; ``#`` starts a comment."""
    cfg = replace(base) if base is not None else ExperimentConfig()
    seen = set()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, val = (t.strip() for t in line.split("=", 1))
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        seen.add(key)
        _set_field(cfg, key, val)
    return cfg.validate()


def apply_overrides(cfg: ExperimentConfig, pairs) -> ExperimentConfig:
    """Apply ``key=value`` strings on top of a config."""
    cfg = replace(cfg)
    for item in pairs:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        _set_field(cfg, k.strip(), v)
    return cfg.validate()


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def format_config(cfg: ExperimentConfig) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if v is None:
            continue
        if isinstance(v, list):
            v = ", ".join(repr(x) for x in v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


# --- builtin scenarios ---------------------------------------------------

SEVENTHS = [1.0, 6 / 7, 5 / 7, 4 / 7, 3 / 7, 2 / 7]
FIFTHS = [1.0, 4 / 5, 3 / 5, 2 / 5]


def _scenario_table() -> dict[str, dict]:
    t: dict[str, dict] = {}
    t["fig1"] = dict(family="scalar", d=10, mu=1.0, norm_x=9.0, norm_y=1.0, init_seed=101,
                     h_rule="scalar-bound", fractions=[1.0, 0.5, 0.2],
                     note="two-phase picture at bound, bound/2 and bound/5")
    t["fig2"] = dict(family="scalar", d=10, mu=1.0, norm_x=18.0, norm_y=0.09, init_seed=202,
                     h_rule="scalar-bound", fractions=[1.0])
    t["fig3"] = dict(family="general", n=6, d=100, norm_x=1.0, norm_y=9.0, data_seed=303,
                     init_seed=304, h_rule="lipschitz", h_scale=3.5,
                     fractions=[1.0, 0.75, 0.5, 0.25], record_stride=10)
    for k, nx in enumerate((9, 19, 99)):
        t[f"appA-scalar-{nx}"] = dict(
            family="scalar", d=10, mu=1.0, norm_x=float(nx), norm_y=1.0, init_seed=410 + k,
            h_rule="scalar-bound", h_c=2.0, fractions=SEVENTHS)
        t[f"appA-general-{nx}"] = dict(
            family="general", n=6, d=100, norm_x=float(nx), norm_y=1.0, data_seed=420 + k,
            init_seed=430 + k, h_rule="lipschitz", h_scale=3.5, fractions=SEVENTHS,
            record_stride=10, expect="any")
    for k, nx in enumerate((9, 19)):
        t[f"appA-under-{nx}"] = dict(
            family="general", n=100, d=3, norm_x=float(nx), norm_y=1.0, data_seed=440 + k,
            init_seed=450 + k, h_rule="lipschitz", h_scale=3.5, fractions=SEVENTHS,
            record_stride=10, expect="any")
    t["appA-sensing"] = dict(family="sensing", n=100, d=6, m=10, norm_x=9.0, norm_y=1.0,
                             data_seed=460, init_seed=461, h_rule="lipschitz", h_scale=3.5,
                             fractions=FIFTHS, record_stride=10, expect="any")
    t["appA-completion"] = dict(family="completion", n=10, d=2, rank=2, observe=0.6,
                                norm_x=9.0, norm_y=1.0, data_seed=471, init_seed=471,
                                h_rule="lipschitz", h_scale=3.5, fractions=FIFTHS,
                                record_stride=10, expect="any")
    t["appB-orbits"] = dict(kind="orbits", family="scalar", d=1, mu=1.0, h_values=[1.9],
                            scans=500, init_seed=500, expect="any")
    t["appC-modified"] = dict(kind="modified", family="scalar", d=1, mu=1.0,
                              init_x=[4.0], init_y=[10.0], h_values=[0.026])
    x0, y0 = 20.0, 0.07
    hb = th.scalar_lr_bound(x0, y0, 1.0)
    t["appE-stability-limit"] = dict(family="scalar", d=1, mu=1.0, init_x=[x0], init_y=[y0],
                                     h_values=[hb, 1.05 * hb], max_iters=100_000,
                                     expect="any",
                                     note="h at the closed-form bound and 5% above it")
    return t


_SCENARIOS = _scenario_table()
BUILTIN_SCENARIOS = tuple(_SCENARIOS)


def builtin_scenario(sid: str) -> ExperimentConfig:
    try:
        spec = _SCENARIOS[sid]
    except KeyError:
        raise ConfigError(f"unknown scenario {sid!r}; known: {', '.join(BUILTIN_SCENARIOS)}") from None
    return ExperimentConfig(scenario=sid, **spec).validate()


# --- problem and state construction --------------------------------------


def build_sensing(n: int, d: int, m: int, seed: int) -> pb.MatrixSensing:
    """Gaussian sensing matrices and targets ``b_i ~ U[0, 1]``."""
    if min(n, d, m) < 1:
        raise ValueError("dimensions must be positive")
    rng = make_rng(seed)
    sensors = rng.standard_normal((m, n, n))
    b = rng.uniform(0.0, 1.0, size=m)
    return pb.MatrixSensing(sensors, b, d)


def build_completion(n: int, d: int, rank: int, observe_fraction: float, seed: int) -> pb.MatrixCompletion:
    """Exact-rank target ``G H^T`` with Gaussian factors and a uniform random mask."""
    if min(n, d, rank) < 1 or rank > n:
        raise ValueError("need positive dims and rank <= n")
    if not 0 < observe_fraction <= 1:
        raise ValueError("observe_fraction must lie in (0, 1]")
    rng = make_rng(seed)
    A = rng.standard_normal((n, rank)) @ rng.standard_normal((n, rank)).T
    k = int(round(observe_fraction * n * n))
    k = max(1, k)
    idx = rng.choice(n * n, size=k, replace=False)
    mask = np.zeros(n * n, dtype=bool)
    mask[idx] = True
    return pb.MatrixCompletion(A, mask.reshape(n, n), d)


def build_problem(cfg: ExperimentConfig):
    if cfg.family == "scalar":
        return pb.ScalarFactorization(cfg.mu, cfg.d)
    if cfg.family == "rank1":
        return pb.RankOneIsotropic(cfg.mu, cfg.n)
    if cfg.family == "general":
        A = make_rng(cfg.data_seed).standard_normal((cfg.n, cfg.n))
        return pb.GeneralFactorization(A, cfg.d)
    if cfg.family == "sensing":
        return build_sensing(cfg.n, cfg.d, cfg.m, cfg.data_seed)
    return build_completion(cfg.n, cfg.d, cfg.rank, cfg.observe, cfg.data_seed)


def build_init(cfg: ExperimentConfig, p) -> FactorState:
    shape = (p.n, p.d)
    if cfg.init_x is not None:
        if len(cfg.init_x) != shape[0] * shape[1]:
            raise ConfigError(f"init vectors need {shape[0] * shape[1]} entries")
        X = np.array(cfg.init_x, dtype=float).reshape(shape)
        Y = np.array(cfg.init_y, dtype=float).reshape(shape)
        return FactorState(X, Y)
    rng = make_rng(cfg.init_seed)
    X = sample_with_norm(shape, cfg.norm_x, rng)
    Y = sample_with_norm(shape, cfg.norm_y, rng)
    return FactorState(X, Y)


def hessian_matrix(p, s: FactorState) -> np.ndarray:
    """Hessian for any family; sensing/completion are assembled from products."""
    if pb.is_factorization(p):
        return pb.hessian(p, s)
    n, d = s.shape
    k = n * d
    H = np.empty((2 * k, 2 * k))
    for j in range(2 * k):
        e = np.zeros(2 * k)
        e[j] = 1.0
        E = FactorState.from_flat(e, (n, d))
        hx, hy = pb.hessian_vector_product(p, s, E.X, E.Y)
        H[:, j] = np.concatenate([hx.ravel(order="F"), hy.ravel(order="F")])
    return 0.5 * (H + H.T)


def lipschitz_at(p, s: FactorState) -> float:
    """Local gradient Lipschitz constant ``|H|_2`` at ``s``."""
    w, _ = sym_eig(hessian_matrix(p, s))
    return float(max(abs(w[0]), abs(w[-1])))


def _mu_sum(p) -> float:
    if isinstance(p, (pb.ScalarFactorization, pb.RankOneIsotropic)):
        return p.mu
    if isinstance(p, pb.GeneralFactorization):
        _, sv, _ = np.linalg.svd(p.A)
        return float(np.sum(sv[: p.d]))
    return math.nan


def learning_rates(cfg: ExperimentConfig, p, init: FactorState) -> tuple[list[float], th.BoundReport]:
    """Learning rates in descending order plus the bound they were derived from."""
    nx = math.sqrt(float(np.sum(init.X**2)))
    ny = math.sqrt(float(np.sum(init.Y**2)))
    mu_sum = _mu_sum(p)
    if cfg.h_rule == "explicit":
        hs = sorted(cfg.h_values, reverse=True)
        h0, kind, c = hs[0], "user", 1.0
    else:
        if cfg.h_rule == "scalar-bound":
            if not isinstance(p, pb.ScalarFactorization):
                raise ConfigError("scalar-bound needs the scalar family")
            c = 1.0 if cfg.h_c is None else cfg.h_c
            h0, kind = th.scalar_lr_bound(nx, ny, p.mu, c), "scalar"
            c = 1.0
        elif cfg.h_rule == "rank1-bound":
            if not isinstance(p, pb.RankOneIsotropic):
                raise ConfigError("rank1-bound needs the rank1 family")
            c = th.SQRT7 if cfg.h_c is None else cfg.h_c
            h0, kind = th.rank1_lr_bound(nx, ny, p.mu, c), "rank1"
            c = 1.0
        else:
            h0, kind, c = cfg.h_scale / lipschitz_at(p, init), "user", 1.0
        hs = sorted((h0 * f for f in cfg.fractions), reverse=True)
    ms = mu_sum if math.isfinite(mu_sum) else 0.0
    return hs, th.balancing_bound(h0, ms, c, kind)


# --- sweeps -------------------------------------------------------------


SUMMARY_COLUMNS = (
    "h", "outcome", "iters", "period", "final_loss", "final_gap_fro", "final_balance_sq",
    "final_u_sq", "phase2_start", "small_h", "norm_bound_ok", "gap_bound_ok", "stability_ok",
)


@dataclass
class SweepRow:
    h: float
    outcome: eg.Outcome
    final_loss: float  # shifted by the global minimum
    final_gap_fro: float
    final_balance_sq: float
    final_u_sq: float
    initial_gap_fro: float
    phase2_start: Optional[int]
    small_h: bool
    norm_bound_ok: Optional[bool]
    gap_bound_ok: Optional[bool]
    stability_ok: Optional[bool]

    def cells(self) -> list:
        def flag(b):
            return "NA" if b is None else str(bool(b)).lower()

        o = self.outcome
        return [
            repr(self.h), o.kind.value, o.iters, "" if o.period is None else o.period,
            repr(self.final_loss), repr(self.final_gap_fro), repr(self.final_balance_sq),
            repr(self.final_u_sq), "" if self.phase2_start is None else self.phase2_start,
            flag(self.small_h), flag(self.norm_bound_ok), flag(self.gap_bound_ok),
            flag(self.stability_ok),
        ]


@dataclass
class SweepSummary:
    scenario: str
    rows: list[SweepRow]
    bound: th.BoundReport
    lipschitz0: float

    def converged(self) -> list[SweepRow]:
        return [r for r in self.rows if r.outcome.converged]


@dataclass
class OrbitRecord:
    period: int
    residual: float
    point: np.ndarray  # canonical cycle point, flat [x..., y...]

    def key(self) -> tuple:
        return tuple(np.round(self.point, 8))


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    summary: Optional[SweepSummary] = None
    trajectories: list[eg.Trajectory] = field(default_factory=list)
    orbits: list[OrbitRecord] = field(default_factory=list)
    files: list[str] = field(default_factory=list)

    def unexpected_divergence(self) -> bool:
        if self.config.expect != "converge":
            return False
        return any(t.outcome.kind is eg.OutcomeKind.DIVERGED for t in self.trajectories)


def _gd_config(cfg: ExperimentConfig, h: float) -> eg.GDConfig:
    return eg.GDConfig(
        h=h, max_iters=cfg.max_iters, grad_tol=cfg.grad_tol,
        diverge_threshold=cfg.diverge_threshold, record_stride=cfg.record_stride,
        seed=cfg.init_seed, max_period=cfg.max_period, period_tol=cfg.period_tol,
    )


def _run_one(args):
    p, init, gcfg = args
    return eg.run(p, init, gcfg)


def _row_for(p, init, traj: eg.Trajectory, bound: th.BoundReport, L0: float) -> SweepRow:
    h = traj.h
    fmin = pb.min_loss(p)
    last = traj.last
    out = traj.outcome
    norm_ok = gap_ok = stab_ok = None
    if out.converged:
        s = traj.final
        u2 = s.norm() ** 2
        if isinstance(p, (pb.ScalarFactorization, pb.RankOneIsotropic)):
            gap_sq = float(np.sum((s.X - s.Y) ** 2))
            norm_ok = u2 <= 2.0 / h + 1e-8
            gap_ok = gap_sq <= 2.0 / h - 2.0 * p.mu + 1e-8
        lmax = float(sym_eig(hessian_matrix(p, s))[0][-1])
        stab_ok = 1.0 - h * lmax >= -1.0 - 1e-6
    init_gap = abs(math.sqrt(float(np.sum(init.X**2))) - math.sqrt(float(np.sum(init.Y**2))))
    return SweepRow(
        h=h,
        outcome=out,
        final_loss=last.loss - fmin,
        final_gap_fro=last.gap_fro,
        final_balance_sq=last.balance_sq,
        final_u_sq=last.u_sq,
        initial_gap_fro=init_gap,
        phase2_start=eg.detect_phase_transition(traj),
        small_h=h < 2.0 / L0,
        norm_bound_ok=norm_ok,
        gap_bound_ok=gap_ok,
        stability_ok=stab_ok,
    )


def run_sweep(cfg: ExperimentConfig, p=None, init: Optional[FactorState] = None):
    """Run the configured sweep; returns ``(summary, trajectories)`` with h descending."""
    cfg.validate()
    if p is None:
        p = build_problem(cfg)
    if init is None:
        init = build_init(cfg, p)
    hs, bound = learning_rates(cfg, p, init)
    L0 = lipschitz_at(p, init)
    jobs = [(p, init, _gd_config(cfg, h)) for h in hs]
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as ex:
            trajs = list(ex.map(_run_one, jobs))
    else:
        trajs = [_run_one(j) for j in jobs]
    rows = [_row_for(p, init, t, bound, L0) for t in trajs]
    return SweepSummary(cfg.scenario, rows, bound, L0), trajs


# --- periodic orbits ----------------------------------------------------


def _canonical_cycle(p, z: np.ndarray, period: int, h: float, shape) -> np.ndarray:
    pts = [z]
    for _ in range(period - 1):
        pts.append(eg.iterate_map(p, pts[-1], shape, h, 1))
    return min(pts, key=lambda v: tuple(np.round(v, 8)))


def orbit_scan(
    mu: float, h: float, scans: int, seed: int, periods=(2, 3, 4),
    box: float = 2.0, warmup: int = 200,
) -> list[OrbitRecord]:
    """Search the ``d = 1`` scalar problem for periodic orbits.

    Each scan draws a point uniformly in ``[-box, box]^2`` and runs ``warmup``
    GD steps; a bounded endpoint (or the raw draw, if GD escapes) seeds Newton
    refinement for each requested period.  Orbits are deduplicated by their
    lexicographically smallest cycle point rounded to 1e-8 and sorted by
    period then coordinates.
    """
    p = pb.ScalarFactorization(mu, 1)
    shape = (1, 1)
    rng = make_rng(seed)
    found: dict[tuple, OrbitRecord] = {}
    for _ in range(scans):
        z = rng.uniform(-box, box, size=2)
        guess = z
        try:
            w = eg.iterate_map(p, z, shape, h, warmup)
            if np.all(np.abs(w) < 1e3):
                guess = w
        except eg.GDOverflowError:
            pass
        for q in periods:
            try:
                st = eg.refine_periodic_orbit(p, FactorState.from_flat(guess, shape), q, h)
            except (eg.NewtonConvergenceError, eg.OrbitCollapseError):
                continue
            zq = st.flat()
            canon = _canonical_cycle(p, zq, q, h, shape)
            res = float(np.linalg.norm(eg.iterate_map(p, canon, shape, h, q) - canon))
            if res >= 1e-10:
                continue
            rec = OrbitRecord(q, res, canon)
            found.setdefault(rec.key(), rec)
    return sorted(found.values(), key=lambda r: (r.period, r.key()))


# --- output ---------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def write_trajectory(path: str, traj: eg.Trajectory, bound: Optional[th.BoundReport] = None) -> None:
    with open(path, "w", newline="") as fh:
        if bound is not None:
            for line in bound.header_lines():
                fh.write(line + "\n")
        fh.write(f"# h={traj.h!r}\n# outcome={traj.outcome}\n")
        fh.write(",".join(eg.TRAJECTORY_COLUMNS) + "\n")
        for row in traj.csv_rows():
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def write_summary(path: str, summary: SweepSummary) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for r in summary.rows:
            w.writerow(r.cells())


def write_orbits(path: str, orbits: list[OrbitRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["period", "residual", "x", "y"])
        for o in orbits:
            w.writerow([o.period, repr(o.residual), repr(float(o.point[0])), repr(float(o.point[1]))])


def _write_manifest(path: str, cfg: ExperimentConfig, extra: dict) -> None:
    stamp = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
    with open(path, "w") as fh:
        fh.write(f"version = {__version__}\n")
        fh.write(f"scenario = {cfg.scenario}\n")
        fh.write(f"data_seed = {cfg.data_seed}\n")
        fh.write(f"init_seed = {cfg.init_seed}\n")
        for k, v in extra.items():
            fh.write(f"{k} = {v}\n")
        fh.write("# config\n")
        for line in format_config(cfg).splitlines():
            fh.write(f"#   {line}\n")
        fh.write(f"timestamp = {stamp}\n")


def _modified_experiment(cfg: ExperimentConfig):
    p = build_problem(cfg)
    init = build_init(cfg, p)
    h = max(cfg.h_values)
    gd = eg.run(p, init, _gd_config(cfg, h))
    T = max(gd.outcome.iters, 1) * h
    me = eg.integrate_modified_equation(p, init, h, T, record_stride=cfg.record_stride)
    return gd, me


def _modified_rows(gd: eg.Trajectory, me: eg.Trajectory) -> list[list]:
    rows = []
    for name, t in (("gd", gd), ("modified", me)):
        s = t.final
        a = np.abs(np.concatenate([s.X.ravel(), s.Y.ravel()]))
        ratio = float(a.max() / a.min()) if a.min() > 0 else math.inf
        rows.append([name, str(t.outcome), t.outcome.iters, repr(t.last.fro_x),
                     repr(t.last.fro_y), repr(t.last.gap_fro), repr(ratio)])
    return rows


def run_experiment(cfg: ExperimentConfig, out_dir: Optional[str] = None) -> ExperimentResult:
    """Run a config and, if ``out_dir`` is given, write its files to ``out_dir/<scenario>``.

    The config is fully validated and the problem built before anything is
    written, so configuration errors leave no partial output.
    """
    cfg.validate()
    out_dir = out_dir if out_dir is not None else cfg.out
    res = ExperimentResult(config=cfg)
    # build once up-front so data errors surface before any I/O
    p = build_problem(cfg)
    extra: dict = {}
    if cfg.kind == "sweep":
        init = build_init(cfg, p)
        summary, trajs = run_sweep(cfg, p, init)
        res.summary, res.trajectories = summary, trajs
        extra["h_values"] = ", ".join(repr(r.h) for r in summary.rows)
        extra["h_bound"] = repr(summary.bound.h_bound)
        extra["bound_kind"] = summary.bound.bound_kind
        extra["lipschitz0"] = repr(summary.lipschitz0)
        extra["min_loss"] = repr(pb.min_loss(p))
    elif cfg.kind == "orbits":
        h = max(cfg.h_values) if cfg.h_values else None
        if h is None:
            raise ConfigError("orbit scans need h_values")
        res.orbits = orbit_scan(cfg.mu, h, cfg.scans, cfg.init_seed, tuple(cfg.orbit_periods),
                                cfg.scan_box)
        extra["h"] = repr(h)
        extra["orbits_found"] = len(res.orbits)
    else:
        gd, me = _modified_experiment(cfg)
        res.trajectories = [gd, me]
        extra["h"] = repr(gd.h)
        extra["horizon"] = repr(gd.outcome.iters * gd.h)

    if out_dir is None:
        return res
    target = os.path.join(out_dir, cfg.scenario)
    os.makedirs(target, exist_ok=True)
    if cfg.kind == "sweep":
        for i, t in enumerate(res.trajectories):
            path = os.path.join(target, f"traj_h{i}.csv")
            write_trajectory(path, t, res.summary.bound)
            res.files.append(path)
        path = os.path.join(target, "summary.csv")
        write_summary(path, res.summary)
        res.files.append(path)
    elif cfg.kind == "orbits":
        path = os.path.join(target, "orbits.csv")
        write_orbits(path, res.orbits)
        res.files.append(path)
    else:
        gd, me = res.trajectories
        for name, t in (("traj_gd.csv", gd), ("traj_modified.csv", me)):
            path = os.path.join(target, name)
            write_trajectory(path, t)
            res.files.append(path)
        path = os.path.join(target, "summary.csv")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["run", "outcome", "iters", "fro_x", "fro_y", "gap_fro", "max_min_ratio"])
            w.writerows(_modified_rows(gd, me))
        res.files.append(path)
    path = os.path.join(target, "manifest.txt")
    _write_manifest(path, cfg, extra)
    res.files.append(path)
    return res
