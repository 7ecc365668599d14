"""Iterative translation-based crosstalk calibration (the comparison baseline).

Each loop ``i`` owns a readout channel whose transmission shows a
flux-periodic dip. The dip is located along trial coordinate ``i`` while
another coordinate ``j`` is stepped; the dip moves by
``-C_res[i, j] / C_res[i, i]`` per unit of ``j``. Stepping ``j`` over whole
periods and fitting a line plus a few harmonics of ``j``'s period removes
most of the periodic pull that the other circuit elements exert on the dip.

Coordinates are ``f' = C_k V + f0_k``. One iteration measures ``C^(k)'`` and
``f0^(k)'`` with ``f ~ C^(k)' f' + f0^(k)'`` and composes them into the
next coordinates, so after ``n`` iterations from raw voltages the estimate is
``C^(n)' ... C^(1)'``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from . import coords
from .calibrator import DEFAULT_DELTA, OFF_SWEEP_BIAS, choose_off_sweep_biases
from .device import DeviceBackend
from .periodicity import HALF_WINDOW, PeriodFitError, SweepRecord, correlation_curve, fit_period

log = logging.getLogger(__name__)

F64 = np.float64


class TrackingError(RuntimeError):
    """The tracked feature could not be found."""


class NotConvergedWarning(UserWarning):
    pass


@dataclass
class TrackerSettings:
    """Scan geometry for the dip tracker (all lengths in trial-flux units).

    ``step`` defaults to a quarter of the periodicity sweep step.
    """

    step: float = DEFAULT_DELTA / 4
    window: float = 0.08
    period_guess: float = 1.0
    #: relative range searched around ``period_guess``
    period_window: float = 0.3
    points_per_period: int = 12
    periods: int = 2
    #: harmonics of the swept loop's period in the fit; None fits all that
    #: the sampling resolves, which absorbs any exactly periodic pull
    harmonics: int | None = None
    max_recenter: int = 4
    #: fit residual (rms, flux units) above which a track is flagged
    rms_tol: float = 2e-3

    def __post_init__(self) -> None:
        if not self.step > 0 or not self.window > 2 * self.step:
            raise ValueError("tracker window must span several steps")
        if self.points_per_period < 3 or self.periods < 2:
            raise ValueError("need at least 3 points per period over 2 periods")
        if self.points_per_period * self.periods <= self.n_params:
            raise ValueError("too few tracking points for the harmonic fit")

    @property
    def n_harmonics(self) -> int:
        full = (self.points_per_period - 1) // 2
        return full if self.harmonics is None else min(self.harmonics, full)

    @property
    def nyquist(self) -> bool:
        return self.harmonics is None and self.points_per_period % 2 == 0

    @property
    def n_params(self) -> int:
        return 2 + 2 * self.n_harmonics + int(self.nyquist)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class Coordinates:
    """``f' = C V + f0``."""

    C: NDArray[F64]
    f0: NDArray[F64]

    def __post_init__(self) -> None:
        self.C = coords.check_invertible(self.C)
        self.f0 = coords.as_vector(self.f0, self.C.shape[0])

    @classmethod
    def identity(cls, n: int) -> "Coordinates":
        return cls(np.eye(n), np.zeros(n))

    @property
    def n(self) -> int:
        return self.C.shape[0]

    def voltages(self, f_prime: ArrayLike) -> NDArray[F64]:
        return coords.solve(self.C, coords.as_vector(f_prime, self.n) - self.f0)

    def compose(self, C_step: ArrayLike, f0_step: ArrayLike) -> "Coordinates":
        """Coordinates ``C_step f' + f0_step`` expressed in voltages."""
        c = coords.as_matrix(C_step, self.n)
        return Coordinates(c @ self.C, c @ self.f0 + coords.as_vector(f0_step, self.n))


@dataclass
class CouplingEstimate:
    """Dip position of loop ``i`` versus coordinate ``j``.

    ``slope`` is ``d x_i / d v_j``; the coupling ratio is ``-slope``.
    """

    loop: int
    swept: int
    values: NDArray[F64]
    positions: NDArray[F64]
    slope: float
    intercept: float
    rms: float
    low_confidence: bool = False
    notes: list[str] = field(default_factory=list)

    @property
    def ratio(self) -> float:
        return -self.slope


@dataclass
class IterationEstimate:
    index: int
    C_step: NDArray[F64]
    f0_step: NDArray[F64]
    periods: NDArray[F64]
    couplings: dict[tuple[int, int], CouplingEstimate]
    measurements: int = 0
    scans: list[Scan] = field(default_factory=list, repr=False)

    @property
    def max_offdiag(self) -> float:
        off = self.C_step - np.diag(np.diag(self.C_step))
        return float(np.abs(off).max()) if self.C_step.shape[0] > 1 else 0.0

    @property
    def low_confidence(self) -> list[tuple[int, int]]:
        return [k for k, c in self.couplings.items() if c.low_confidence]

    def diagnostics(self) -> dict:
        return {
            "index": self.index,
            "periods": self.periods.tolist(),
            "max_offdiag": self.max_offdiag,
            "measurements": self.measurements,
            "couplings": {
                f"{i},{j}": {"slope": c.slope, "intercept": c.intercept, "rms": c.rms,
                             "low_confidence": c.low_confidence, "notes": list(c.notes)}
                for (i, j), c in sorted(self.couplings.items())
            },
        }


@dataclass
class TranslationResult:
    C_ref: NDArray[F64]
    f0_ref: NDArray[F64]
    iterations: list[IterationEstimate]
    converged: bool

    @property
    def history(self) -> list[float]:
        return [it.max_offdiag for it in self.iterations]


@dataclass
class Scan:
    """One tracker scan: readout ``ys`` of loop ``loop``'s channel at ``xs``.

    ``kind`` is ``"coarse"`` (period search), ``"anchor"`` and ``"repeat"``
    (dip at either end of one period) or ``"track"`` (dip with coordinate
    ``swept`` held at ``value``). Only the scan that produced a position is
    kept, not the re-centring attempts before it.
    """

    kind: str
    loop: int
    xs: NDArray[F64]
    ys: NDArray[F64]
    swept: int = -1
    value: float = float("nan")


class _Probe:
    """Reads one channel at trial coordinates, counting measurements."""

    def __init__(self, backend: DeviceBackend, frame: Coordinates):
        self.backend = backend
        self.frame = frame
        self.count = 0
        self.scans: list[Scan] = []

    def read(self, f_prime: NDArray[F64], channel: int) -> float:
        self.backend.set_voltages(self.frame.voltages(f_prime))
        self.count += 1
        return float(self.backend.measure([channel])[0])

    def sweep(self, base: NDArray[F64], i: int, channel: int, xs: NDArray[F64]) -> NDArray[F64]:
        ys = np.empty(xs.size)
        for k, x in enumerate(xs):
            p = base.copy()
            p[i] = x
            ys[k] = self.read(p, channel)
        return ys


def _parabolic_min(x: NDArray[F64], y: NDArray[F64], k: int) -> float:
    """Vertex of the parabola through the minimum sample and its neighbours."""
    if k == 0 or k == len(x) - 1:
        return float(x[k])
    y0, y1, y2 = y[k - 1], y[k], y[k + 1]
    den = y0 - 2.0 * y1 + y2
    if den <= 0:
        return float(x[k])
    h = x[k + 1] - x[k]
    return float(x[k] + 0.5 * h * (y0 - y2) / den)


def dip_position(xs: ArrayLike, ys: ArrayLike) -> tuple[float, bool]:
    """Sub-step minimum of a scan and whether it sits on the scan edge."""
    xs = np.asarray(xs, dtype=F64)
    ys = np.asarray(ys, dtype=F64)
    k = int(np.argmin(ys))
    if 0 < k < xs.size - 1:
        return _parabolic_min(xs, ys, k), False
    return float(xs[k]), True


def locate_dip(
    probe: _Probe, base: NDArray[F64], i: int, channel: int, center: float,
    settings: TrackerSettings, half_width: float | None = None,
) -> tuple[float, bool, NDArray[F64], NDArray[F64]]:
    """Position of minimum transmission along coordinate ``i`` near ``center``.

    The scan window is re-centred when the minimum sits on its edge. Returns
    ``(position, edge, xs, ys)`` where ``edge`` is true if the last scan
    ``(xs, ys)`` still ended on an edge.

    Raises:
        TrackingError: if the channel does not vary across the window.
    """
    hw = settings.window if half_width is None else half_width
    m = int(round(hw / settings.step))
    for _ in range(settings.max_recenter + 1):
        xs = center + settings.step * np.arange(-m, m + 1)
        ys = probe.sweep(base, i, channel, xs)
        if np.ptp(ys) <= 1e-12 * max(1.0, float(np.abs(ys).max())):
            raise TrackingError(f"channel {channel} is flat along loop {i}")
        pos, edge = dip_position(xs, ys)
        if not edge:
            break
        center = pos
    return pos, edge, xs, ys


def coarse_period(xs: ArrayLike, ys: ArrayLike, settings: TrackerSettings) -> tuple[float, int]:
    """Period from the lag correlation of a long scan, and the index of the
    deepest sample within its first period.

    Raises:
        TrackingError: if the scan shows no period near ``period_guess``.
    """
    xs = np.asarray(xs, dtype=F64)
    ys = np.asarray(ys, dtype=F64)
    lo = (1.0 - settings.period_window) * settings.period_guess / settings.step
    hi = (1.0 + settings.period_window) * settings.period_guess / settings.step
    try:
        rec = SweepRecord(0, settings.step, float(xs[0]), ys)
        curve = correlation_curve(rec, max(1, int(lo) - HALF_WINDOW), int(math.ceil(hi)) + HALF_WINDOW)
        fit = fit_period(curve, HALF_WINDOW, (lo, hi))
    except (PeriodFitError, ValueError) as exc:
        raise TrackingError(f"no periodic response: {exc}") from exc
    coarse = fit.period(settings.step)
    return coarse, int(np.argmin(ys[: int(coarse / settings.step)]))


def measure_period(
    probe: _Probe, base: NDArray[F64], i: int, channel: int, settings: TrackerSettings,
) -> tuple[float, float]:
    """Dip position and the distance to the same dip one period later.

    A coarse period comes from the lag correlation of a channel sweep over
    a little more than two periods; the dip is then located at both ends
    of that period, which keeps a second dip inside the period from being
    mistaken for the repeat.
    """
    span = settings.period_guess * (1.0 + settings.period_window) * 2.2
    xs = base[i] + settings.step * np.arange(int(round(span / settings.step)))
    ys = probe.sweep(base, i, channel, xs)
    probe.scans.append(Scan("coarse", i, xs, ys))
    try:
        coarse, k0 = coarse_period(xs, ys, settings)
    except TrackingError as exc:
        raise TrackingError(f"loop {i}, channel {channel}: {exc}") from exc
    x0, _, sx, sy = locate_dip(probe, base, i, channel, float(xs[k0]), settings)
    probe.scans.append(Scan("anchor", i, sx, sy))
    x1, edge, sx, sy = locate_dip(probe, base, i, channel, x0 + coarse, settings)
    probe.scans.append(Scan("repeat", i, sx, sy))
    if edge:
        raise TrackingError(f"could not find the next period of loop {i}")
    return x0, x1 - x0


def _design(v: NDArray[F64], period: float, settings: TrackerSettings, center: float) -> NDArray[F64]:
    u = v - center
    cols = [np.ones_like(u), u]
    for h in range(1, settings.n_harmonics + 1):
        w = 2.0 * math.pi * h / period
        cols += [np.cos(w * u), np.sin(w * u)]
    if settings.nyquist:
        cols.append(np.cos(math.pi * settings.points_per_period * u / period))
    return np.column_stack(cols)


def tracking_values(start: float, period_j: float, settings: TrackerSettings) -> NDArray[F64]:
    """Values of the stepped coordinate: whole periods from ``start``."""
    n_pts = settings.points_per_period * settings.periods
    return start + period_j * np.arange(n_pts) / settings.points_per_period


def fit_coupling(
    i: int, j: int, values: ArrayLike, positions: ArrayLike, period_j: float, center: float,
    settings: TrackerSettings, edges: Sequence[bool] | None = None,
) -> CouplingEstimate:
    """Line plus harmonics of ``period_j`` through the tracked dip positions."""
    values = np.asarray(values, dtype=F64)
    positions = np.asarray(positions, dtype=F64)
    notes = [f"window edge at v={v:.4f}" for v, e in zip(values, edges or ()) if e]
    A = _design(values, period_j, settings, center)
    coef, *_ = np.linalg.lstsq(A, positions, rcond=None)
    rms = float(np.sqrt(np.mean((A @ coef - positions) ** 2)))
    low = bool(notes) or rms > settings.rms_tol
    if rms > settings.rms_tol:
        notes.append(f"fit rms {rms:.2e}")
    return CouplingEstimate(i, j, values, positions, float(coef[1]), float(coef[0]), rms, low, notes)


def estimate_coupling(
    probe: _Probe, base: NDArray[F64], i: int, j: int, channel: int, start: float,
    period_j: float, settings: TrackerSettings,
) -> CouplingEstimate:
    """Track loop ``i``'s dip while coordinate ``j`` steps over whole periods.

    The positions are fitted with a line plus harmonics of ``period_j``; the
    line's slope is the estimate.
    """
    values = tracking_values(base[j], period_j, settings)
    positions = np.empty(values.size)
    edges = []
    guess = start
    for k, v in enumerate(values):
        p = base.copy()
        p[j] = v
        x, edge, sx, sy = locate_dip(probe, p, i, channel, guess, settings)
        probe.scans.append(Scan("track", i, sx, sy, j, float(v)))
        edges.append(edge)
        positions[k] = x
        # linear extrapolation from the last two points
        guess = x if k == 0 else 2.0 * x - positions[k - 1]
    return fit_coupling(i, j, values, positions, period_j, base[j], settings, edges)


def operating_points(n: int, hints: Mapping[int, float] | None = None) -> list[NDArray[F64]]:
    """Trial-coordinate base point used while loop ``i``'s dip is measured."""
    out = []
    for i in range(n):
        b = np.zeros(n)
        for j, v in choose_off_sweep_biases(n, i, hints, OFF_SWEEP_BIAS).items():
            b[j] = v
        out.append(b)
    return out


def assemble_step(
    periods: ArrayLike, anchors: ArrayLike, couplings: Mapping[tuple[int, int], CouplingEstimate],
    bases: Sequence[NDArray[F64]], feature_flux: Mapping[int, float] | None = None,
) -> tuple[NDArray[F64], NDArray[F64]]:
    """``(C_step, f0_step)`` from measured periods, dip anchors and slopes.

    Row ``i``: the diagonal is the inverse of the dip's period, the
    off-diagonals are ``-slope * C[i, i]``. The offset puts the dip at
    ``feature_flux[i]`` (default 0) at the operating point, up to a whole
    flux quantum.
    """
    periods = np.asarray(periods, dtype=F64)
    anchors = np.asarray(anchors, dtype=F64)
    feature_flux = dict(feature_flux or {})
    n = periods.size
    C_step = np.diag(1.0 / periods)
    x_op = np.empty(n)
    for i in range(n):
        at_op = []
        for j in range(n):
            if j != i:
                C_step[i, j] = -couplings[(i, j)].slope * C_step[i, i]
                at_op.append(couplings[(i, j)].intercept)
        x_op[i] = float(np.mean(at_op)) if at_op else anchors[i]
    f0_step = np.empty(n)
    for i in range(n):
        others = sum(C_step[i, j] * bases[i][j] for j in range(n) if j != i)
        f0_step[i] = feature_flux.get(i, 0.0) - C_step[i, i] * x_op[i] - others
    # the dip repeats every flux quantum; take the offset nearest zero
    f0_step -= np.round(f0_step)
    return C_step, f0_step


def run_iteration(
    backend: DeviceBackend,
    frame: Coordinates,
    tracking: Mapping[int, int],
    feature_flux: Mapping[int, float] | None = None,
    hints: Mapping[int, float] | None = None,
    settings: TrackerSettings | None = None,
    index: int = 1,
) -> IterationEstimate:
    """Measure ``C^(k)'`` and ``f0^(k)'`` in the coordinates ``frame``.

    See :func:`assemble_step` for how the measurements combine. The scans
    behind every position are kept in ``IterationEstimate.scans``.

    Raises:
        TrackingError: if any loop has no tracking channel or its dip is lost.
    """
    settings = settings or TrackerSettings()
    n = frame.n
    missing = [i for i in range(n) if i not in tracking]
    if missing:
        raise TrackingError(f"no tracking channel assigned to loops {missing}")
    probe = _Probe(backend, frame)
    bases = operating_points(n, hints)
    periods = np.empty(n)
    anchors = np.empty(n)
    for i in range(n):
        anchors[i], periods[i] = measure_period(probe, bases[i], i, tracking[i], settings)
    couplings: dict[tuple[int, int], CouplingEstimate] = {}
    for i in range(n):
        for j in range(n):
            if j != i:
                couplings[(i, j)] = estimate_coupling(
                    probe, bases[i], i, j, tracking[i], anchors[i], periods[j], settings)
    C_step, f0_step = assemble_step(periods, anchors, couplings, bases, feature_flux)
    coords.check_invertible(C_step)
    return IterationEstimate(index, C_step, f0_step, periods, couplings, probe.count, probe.scans)


def recompute_iteration(
    scans: Sequence[Scan], n: int, settings: TrackerSettings,
    feature_flux: Mapping[int, float] | None = None, hints: Mapping[int, float] | None = None,
) -> tuple[NDArray[F64], NDArray[F64], NDArray[F64]]:
    """``(C_step, f0_step, periods)`` rebuilt from the recorded scans alone.

    Raises:
        ValueError: if a scan needed for the estimate is missing.
    """
    by_kind: dict[tuple[str, int], list[Scan]] = {}
    for s in scans:
        by_kind.setdefault((s.kind, s.loop), []).append(s)

    def one(kind: str, i: int) -> Scan:
        found = by_kind.get((kind, i), [])
        if len(found) != 1:
            raise ValueError(f"expected one {kind} scan for loop {i}, found {len(found)}")
        return found[0]

    bases = operating_points(n, hints)
    anchors = np.empty(n)
    periods = np.empty(n)
    for i in range(n):
        anchors[i], _ = dip_position(one("anchor", i).xs, one("anchor", i).ys)
        x1, _ = dip_position(one("repeat", i).xs, one("repeat", i).ys)
        periods[i] = x1 - anchors[i]
    couplings = {}
    for i in range(n):
        tracks = by_kind.get(("track", i), [])
        for j in range(n):
            if j == i:
                continue
            mine = [s for s in tracks if s.swept == j]
            if len(mine) != settings.points_per_period * settings.periods:
                raise ValueError(f"track of loop {i} versus {j} has {len(mine)} scans")
            dips = [dip_position(s.xs, s.ys) for s in mine]
            couplings[(i, j)] = fit_coupling(
                i, j, [s.value for s in mine], [d[0] for d in dips], periods[j], bases[i][j],
                settings, [d[1] for d in dips])
    C_step, f0_step = assemble_step(periods, anchors, couplings, bases, feature_flux)
    return C_step, f0_step, periods


def compose_product(steps: Sequence[ArrayLike]) -> NDArray[F64]:
    """``C^(n)' ... C^(1)'`` for ``steps = [C^(1)', ..., C^(n)']``."""
    if not steps:
        raise ValueError("need at least one iteration")
    out = coords.as_matrix(steps[0])
    for s in steps[1:]:
        out = coords.as_matrix(s) @ out
    return out


def run_until_converged(
    backend: DeviceBackend,
    tracking: Mapping[int, int],
    max_iters: int = 4,
    tol: float = 3e-3,
    start: Coordinates | None = None,
    feature_flux: Mapping[int, float] | None = None,
    hints: Mapping[int, float] | None = None,
    settings: TrackerSettings | None = None,
    min_iters: int = 1,
    on_iteration: Callable[[IterationEstimate, Coordinates], None] | None = None,
) -> TranslationResult:
    """Iterate until every off-diagonal of ``C^(k)'`` is below ``tol``.

    Starting from raw voltages (the default) the returned ``C_ref`` is the
    product of the per-iteration estimates. ``min_iters`` forces a fixed
    number of iterations even when the tolerance is met earlier.
    ``on_iteration`` receives each estimate and the coordinates it produced.
    """
    if max_iters < 1:
        raise ValueError("max_iters must be at least 1")
    frame = start or Coordinates.identity(backend.n_loops)
    iterations: list[IterationEstimate] = []
    converged = False
    for k in range(1, max_iters + 1):
        it = run_iteration(backend, frame, tracking, feature_flux, hints, settings, index=k)
        iterations.append(it)
        frame = frame.compose(it.C_step, it.f0_step)
        if on_iteration is not None:
            on_iteration(it, frame)
        log.info("translation iteration %d: max off-diagonal %.3e", k, it.max_offdiag)
        converged = it.max_offdiag < tol
        if converged and k >= min_iters:
            break
    if not converged:
        log.warning("translation calibration did not reach tol %.1e in %d iterations", tol, max_iters)
    return TranslationResult(frame.C, frame.f0, iterations, converged)
