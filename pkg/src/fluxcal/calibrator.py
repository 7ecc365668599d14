"""Per-loop periodicity optimization, matrix assembly and landscape scans."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from . import coords
from .coords import LoopCalibrationResult, TrialCompensation
from .device import DeviceBackend
from .optimizers import EvaluationHistory, OptimizationAborted, OptimizerConfig, optimize
from .periodicity import (
    HALF_WINDOW,
    PeriodFit,
    PeriodFitError,
    SweepRecord,
    estimate_period,
    score_periodicity,
)

log = logging.getLogger(__name__)

F64 = np.float64

DEFAULT_DELTA = 0.02
SPAN_PERIODS = 2.2
MIN_SWEEP_POINTS = 40
OFF_SWEEP_BIAS = 0.15
FAILED_SCORE = -1.0
#: the period guess is refined only from a sweep at least this periodic
REFINE_MIN_SCORE = 0.9


def choose_off_sweep_biases(
    n: int, swept: int, hints: Mapping[int, float] | None = None, offset: float = OFF_SWEEP_BIAS
) -> dict[int, float]:
    """Fixed trial fluxes for the loops that are not swept.

    Loops default to ``offset`` flux quanta away from the zero-flux symmetry
    point; entries in ``hints`` override the default verbatim.
    """
    hints = dict(hints or {})
    return {j: float(hints.get(j, offset)) for j in range(n) if j != swept}


@dataclass
class SweepPlan:
    """How one loop's trial coordinate is swept."""

    loop: int
    fixed: dict[int, float]
    start: float = 0.0
    period_guess: float = 1.0
    span_periods: float = SPAN_PERIODS
    delta: float = DEFAULT_DELTA
    channels: list[int] | None = None

    def __post_init__(self) -> None:
        if not self.delta > 0:
            raise ValueError("sweep step must be positive")
        if self.n_points < MIN_SWEEP_POINTS:
            raise ValueError(f"sweep has {self.n_points} points; need at least {MIN_SWEEP_POINTS}")

    @classmethod
    def default(cls, n: int, loop: int, hints: Mapping[int, float] | None = None, **kw) -> "SweepPlan":
        return cls(loop, choose_off_sweep_biases(n, loop, hints), **kw)

    @property
    def span(self) -> float:
        return self.span_periods * self.period_guess

    @property
    def n_points(self) -> int:
        return int(round(self.span / self.delta))

    def trial_points(self, n: int, start: float | None = None) -> NDArray[F64]:
        """``(m, n)`` trial fluxes along the sweep starting at ``start``."""
        s0 = self.start if start is None else start
        pts = np.empty((self.n_points, n))
        for j in range(n):
            pts[:, j] = self.fixed.get(j, 0.0)
        pts[:, self.loop] = s0 + self.delta * np.arange(self.n_points)
        return pts

    def to_dict(self) -> dict:
        return {
            "loop": self.loop,
            "fixed": {str(k): v for k, v in self.fixed.items()},
            "start": self.start,
            "period_guess": self.period_guess,
            "span_periods": self.span_periods,
            "delta": self.delta,
            "channels": self.channels,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "SweepPlan":
        return cls(
            loop=int(d["loop"]),
            fixed={int(k): float(v) for k, v in d["fixed"].items()},
            start=float(d["start"]),
            period_guess=float(d["period_guess"]),
            span_periods=float(d["span_periods"]),
            delta=float(d["delta"]),
            channels=d.get("channels"),
        )


@dataclass
class ObjectiveResult:
    """One periodicity measurement: both sweeps, the period fit and ``P``."""

    omega: TrialCompensation
    score: float
    primary: SweepRecord
    shifted: SweepRecord | None
    fit: PeriodFit | None
    failed: bool = False
    error: str | None = None

    @property
    def period(self) -> float | None:
        return None if self.fit is None else self.fit.period(self.primary.delta)


def sweep(
    backend: DeviceBackend,
    C_init: ArrayLike,
    f0_init: ArrayLike,
    omega: TrialCompensation,
    plan: SweepPlan,
    start: float | None = None,
) -> SweepRecord:
    """Step the trial coordinate and read the plan's channels at every point."""
    n = backend.n_loops
    pts = plan.trial_points(n, start)
    volts = coords.voltages_for_trial_flux(C_init, f0_init, omega, pts)
    rows = []
    for V in volts:
        backend.set_voltages(V)
        rows.append(backend.measure(plan.channels))
    chans = tuple(plan.channels) if plan.channels is not None else None
    return SweepRecord(plan.loop, plan.delta, float(pts[0, plan.loop]), np.array(rows).T, chans)


def shifted_start(primary: SweepRecord, fit: PeriodFit) -> float:
    """Start of the confirmation sweep: one fitted period after ``primary``."""
    return primary.start + fit.tau_max * primary.delta


def analyse_sweeps(primary: SweepRecord, shifted: SweepRecord) -> float:
    return score_periodicity(primary, shifted).value


def measure_periodicity_objective(
    backend: DeviceBackend,
    C_init: ArrayLike,
    f0_init: ArrayLike,
    omega: TrialCompensation,
    plan: SweepPlan,
    half_window: int = HALF_WINDOW,
) -> ObjectiveResult:
    """Primary sweep, period fit, confirmation sweep shifted by one period, score.

    A failed period fit yields the sentinel score ``-1`` with ``failed=True``
    so optimizers treat the point as worst-case.
    """
    primary = sweep(backend, C_init, f0_init, omega, plan)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            _, fit = estimate_period(primary, half_window)
    except (PeriodFitError, ValueError) as exc:
        log.debug("period fit failed for loop %d: %s", plan.loop, exc)
        return ObjectiveResult(omega, FAILED_SCORE, primary, None, None, True, str(exc))
    shifted = sweep(backend, C_init, f0_init, omega, plan, shifted_start(primary, fit))
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            p = analyse_sweeps(primary, shifted)
    except ValueError as exc:
        return ObjectiveResult(omega, FAILED_SCORE, primary, shifted, fit, True, str(exc))
    return ObjectiveResult(omega, p, primary, shifted, fit)


@dataclass
class LoopRun:
    """Everything measured while calibrating one loop."""

    result: LoopCalibrationResult | None
    evaluations: list[ObjectiveResult]
    history: EvaluationHistory
    plan: SweepPlan
    error: str | None = None


def calibrate_loop(
    backend: DeviceBackend,
    C_init: ArrayLike,
    f0_init: ArrayLike,
    i: int,
    opt_cfg: OptimizerConfig,
    plan: SweepPlan | None = None,
    hints: Mapping[int, float] | None = None,
    bound: float | None = None,
    clock: Callable[[], float] | None = None,
    on_evaluation: Callable[[ObjectiveResult], None] | None = None,
) -> LoopRun:
    """Maximize periodicity along trial coordinate ``i`` over its ``n - 1`` compensations.

    The period guess starts at ``plan.period_guess`` and is replaced by the
    first fitted period from a sweep scoring at least ``REFINE_MIN_SCORE``.

    Raises:
        OptimizationAborted: if a measurement fails; ``exc.run`` holds the
            partial :class:`LoopRun`.
    """
    n = backend.n_loops
    plan = plan or SweepPlan.default(n, i, hints)
    if plan.loop != i:
        raise ValueError("sweep plan is for a different loop")
    if opt_cfg.dim != n - 1:
        raise ValueError(f"optimizer has {opt_cfg.dim} parameters; loop {i} needs {n - 1}")
    bound = bound if bound is not None else max(max(abs(lo), abs(hi)) for lo, hi in opt_cfg.bounds or [(0, 0.2)])
    evaluations: list[ObjectiveResult] = []
    state = {"plan": plan, "refined": False}

    def objective(x: NDArray[F64]) -> float:
        omega = TrialCompensation.from_vector(i, n, x, bound=max(bound, 1e-12))
        res = measure_periodicity_objective(backend, C_init, f0_init, omega, state["plan"])
        evaluations.append(res)
        if on_evaluation is not None:
            on_evaluation(res)
        if not state["refined"] and not res.failed and res.score >= REFINE_MIN_SCORE:
            p = state["plan"]
            state["plan"] = SweepPlan(p.loop, p.fixed, p.start, res.period, p.span_periods, p.delta, p.channels)
            state["refined"] = True
        return res.score

    try:
        _, history = optimize(objective, opt_cfg, clock)
    except OptimizationAborted as exc:
        exc.run = LoopRun(None, evaluations, exc.history, state["plan"], str(exc))
        raise
    return LoopRun(loop_result(i, n, evaluations, history), evaluations, history, state["plan"])


def loop_result(i: int, n: int, evaluations: list[ObjectiveResult], history: EvaluationHistory) -> LoopCalibrationResult:
    """Best evaluation of a loop's run (first one wins ties)."""
    best = history.best_index
    res = evaluations[best]
    period = res.period
    if period is None or not period > 0:
        # every fit failed: no usable period
        period = math.nan
    return LoopCalibrationResult(
        target_loop=i,
        params=dict(res.omega.params),
        period=period if math.isfinite(period) else 1.0,
        score=res.score,
        history=history.evaluations,
    )


@dataclass
class CalibrationSession:
    """State of a full calibration: inputs, per-loop runs and assembled result."""

    C_init: NDArray[F64]
    f0_init: NDArray[F64]
    opt_cfg: OptimizerConfig
    seed: int
    runs: dict[int, LoopRun] = field(default_factory=dict)
    C_res_prime: NDArray[F64] | None = None
    C_estimate: NDArray[F64] | None = None
    partial: bool = False
    errors: list[str] = field(default_factory=list)

    @property
    def results(self) -> list[LoopCalibrationResult]:
        return [r.result for _, r in sorted(self.runs.items()) if r.result is not None]

    @property
    def complete(self) -> bool:
        n = self.C_init.shape[0]
        return not self.partial and sorted(self.runs) == list(range(n)) and self.C_estimate is not None


#: optimizer settings tuned for the periodicity landscape (see README)
PERIODICITY_BAYES = dict(bound=0.15, n_init=20, n_total=120, length_scale=0.05, prior_mean=-1.0, n_polish=40)
PERIODICITY_SPSA = dict(bound=0.15, n_init=0, n_total=300)


def periodicity_optimizer_config(n: int, seed: int = 0, algorithm: str = "bayes", **overrides) -> OptimizerConfig:
    """Optimizer settings for an ``n``-loop periodicity calibration.

    ``overrides`` replace individual fields; ``bound`` sets a symmetric box.
    """
    base = dict(PERIODICITY_BAYES if algorithm == "bayes" else PERIODICITY_SPSA)
    base.update(overrides)
    bound = base.pop("bound")
    if base.get("n_polish", 0) > base["n_total"] - base["n_init"]:
        base["n_polish"] = max(0, base["n_total"] - base["n_init"]) // 3
    return OptimizerConfig.box(max(n - 1, 0), bound, seed=seed, algorithm=algorithm, **base)


def loop_config(opt_cfg: OptimizerConfig, i: int) -> OptimizerConfig:
    """Per-loop copy of the optimizer settings with a loop-specific seed."""
    d = opt_cfg.to_dict()
    d["seed"] = int(opt_cfg.seed) * 1000 + i
    return OptimizerConfig(**d)


def calibrate_all(
    backend: DeviceBackend,
    C_init: ArrayLike,
    f0_init: ArrayLike,
    opt_cfg: OptimizerConfig,
    hints: Mapping[int, float] | None = None,
    plan_kw: Mapping | None = None,
    loops: Sequence[int] | None = None,
    clock: Callable[[], float] | None = None,
    on_evaluation: Callable[[int, ObjectiveResult], None] | None = None,
) -> CalibrationSession:
    """Calibrate every loop in ascending order, then assemble and update ``C``."""
    C_init = coords.check_invertible(C_init)
    n = C_init.shape[0]
    f0_init = coords.as_vector(f0_init, n)
    session = CalibrationSession(C_init, f0_init, opt_cfg, opt_cfg.seed)
    for i in loops if loops is not None else range(n):
        plan = SweepPlan.default(n, i, hints, **dict(plan_kw or {}))
        cb = (lambda r, i=i: on_evaluation(i, r)) if on_evaluation else None
        try:
            session.runs[i] = calibrate_loop(
                backend, C_init, f0_init, i, loop_config(opt_cfg, i), plan, clock=clock, on_evaluation=cb
            )
        except OptimizationAborted as exc:
            session.runs[i] = exc.run
            session.partial = True
            session.errors.append(f"loop {i}: {exc}")
            return session
    if sorted(session.runs) == list(range(n)):
        session.C_res_prime = coords.assemble_residual_estimate(session.results)
        session.C_estimate = coords.update_estimate(C_init, session.C_res_prime)
    else:
        session.partial = True
    return session


def scan_landscape_1d(
    backend: DeviceBackend,
    C_init: ArrayLike,
    f0_init: ArrayLike,
    i: int,
    j: int,
    values: Sequence[float],
    plan: SweepPlan | None = None,
    hints: Mapping[int, float] | None = None,
    bound: float = 1.0,
    on_evaluation: Callable[[ObjectiveResult], None] | None = None,
) -> list[tuple[float, float, ObjectiveResult | None]]:
    """Score along one compensation parameter with the others held at zero.

    Failed points are recorded with ``nan`` and the scan continues.
    """
    n = backend.n_loops
    plan = plan or SweepPlan.default(n, i, hints)
    out = []
    for v in values:
        params = {k: 0.0 for k in range(n) if k != i}
        params[j] = float(v)
        try:
            res = measure_periodicity_objective(backend, C_init, f0_init, TrialCompensation(i, params, bound), plan)
        except Exception as exc:  # noqa: BLE001 - per-point failures are recorded
            log.warning("landscape point %s failed: %s", v, exc)
            out.append((float(v), math.nan, None))
            continue
        out.append((float(v), res.score, res))
        if on_evaluation is not None:
            on_evaluation(res)
    return out


def scan_landscape_2d(
    backend: DeviceBackend,
    C_init: ArrayLike,
    f0_init: ArrayLike,
    i: int,
    params: tuple[int, int],
    values_a: Sequence[float],
    values_b: Sequence[float],
    plan: SweepPlan | None = None,
    hints: Mapping[int, float] | None = None,
    bound: float = 1.0,
    center: Mapping[int, float] | None = None,
    on_evaluation: Callable[[ObjectiveResult], None] | None = None,
) -> tuple[NDArray[F64], list[ObjectiveResult | None]]:
    """Score on a grid over two compensation parameters (others at ``center`` or 0).

    Returns the ``len(values_a) x len(values_b)`` score matrix (``nan`` where
    a point failed) and the per-point results in row-major order.
    """
    n = backend.n_loops
    plan = plan or SweepPlan.default(n, i, hints)
    ja, jb = params
    grid = np.full((len(values_a), len(values_b)), math.nan)
    results: list[ObjectiveResult | None] = []
    base = {k: 0.0 for k in range(n) if k != i}
    base.update(center or {})
    for r, va in enumerate(values_a):
        for c, vb in enumerate(values_b):
            p = dict(base)
            p[ja] = base[ja] + float(va)
            p[jb] = base[jb] + float(vb)
            try:
                res = measure_periodicity_objective(backend, C_init, f0_init, TrialCompensation(i, p, bound), plan)
            except Exception as exc:  # noqa: BLE001
                log.warning("landscape point (%s, %s) failed: %s", va, vb, exc)
                results.append(None)
                continue
            grid[r, c] = res.score
            results.append(res)
            if on_evaluation is not None:
                on_evaluation(res)
    return grid, results


def local_maxima(grid: ArrayLike) -> list[tuple[int, int]]:
    """Grid points not exceeded by any of their (up to 8) neighbours."""
    g = np.asarray(grid, dtype=F64)
    rows, cols = g.shape
    found = []
    for r in range(rows):
        for c in range(cols):
            nb = g[max(0, r - 1) : r + 2, max(0, c - 1) : c + 2]
            if g[r, c] >= np.nanmax(nb):
                found.append((r, c))
    return found
