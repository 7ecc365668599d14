"""Periodicity objective computed from multi-channel flux sweeps.

A sweep is an ``L x m`` block of readout values taken at ``m`` equally spaced
values of one trial coordinate. Channels are normalized to zero mean and unit
sum of squares, the pooled lag correlation is computed over a range of integer
lags, an absolute-value-linear peak model locates the (non-integer) period,
and a second sweep shifted by that period is correlated with the first to
give the score ``P``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.typing import ArrayLike, NDArray

F64 = np.float64

MIN_POINTS = 8
MIN_OVERLAP = 4
HALF_WINDOW = 5
#: kink-grid spacing in lag units (i.e. delta / 100 in flux units)
KINK_RESOLUTION = 0.01
SEARCH_FRACTION = (0.25, 0.75)

# channels whose spread is below this (relative to their magnitude) count as constant
_CONSTANT_RTOL = 1e-12


class PeriodFitError(RuntimeError):
    """The correlation curve does not support a period fit."""


class ConstantChannelWarning(UserWarning):
    pass


class ZeroVarianceWarning(UserWarning):
    pass


@dataclass(frozen=True)
class SweepRecord:
    """Readout block ``values[l, s]`` from a sweep of trial coordinate ``loop``."""

    loop: int
    delta: float
    start: float
    values: NDArray[F64]
    channels: tuple[int, ...] | None = None

    def __post_init__(self) -> None:
        v = np.array(self.values, dtype=F64, copy=True)
        if v.ndim == 1:
            v = v[None, :]
        if v.ndim != 2:
            raise ValueError(f"values must be 2-D (channels x points), got {v.shape}")
        if v.shape[1] < MIN_POINTS:
            raise ValueError(f"need at least {MIN_POINTS} sweep points, got {v.shape[1]}")
        if not self.delta > 0:
            raise ValueError(f"step must be positive, got {self.delta}")
        if np.isnan(v).any():
            raise ValueError("sweep contains NaN")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        chans = tuple(range(v.shape[0])) if self.channels is None else tuple(self.channels)
        if len(chans) != v.shape[0]:
            raise ValueError("channel labels do not match the number of rows")
        object.__setattr__(self, "channels", chans)

    @property
    def n_channels(self) -> int:
        return self.values.shape[0]

    @property
    def n_points(self) -> int:
        return self.values.shape[1]

    @property
    def f_prime(self) -> NDArray[F64]:
        return self.start + self.delta * np.arange(self.n_points)


@dataclass(frozen=True)
class CorrelationCurve:
    lags: NDArray[np.int64]
    values: NDArray[F64]


@dataclass(frozen=True)
class PeriodFit:
    """Absolute-value-linear model ``rho_max + slope * |t - tau_max|``.

    ``tau_max`` is in lag (step) units; ``window`` is the inclusive lag range
    the model was fitted over.
    """

    rho_max: float
    slope: float
    tau_max: float
    window: tuple[int, int]
    residual: float = 0.0

    def period(self, delta: float) -> float:
        return self.tau_max * delta


@dataclass(frozen=True)
class PeriodicityScore:
    value: float
    original: SweepRecord = field(repr=False)
    shifted: SweepRecord = field(repr=False)


def _constant_rows(v: NDArray[F64]) -> NDArray[np.bool_]:
    dev = v - v.mean(axis=1, keepdims=True)
    spread = np.sqrt((dev**2).sum(axis=1))
    scale = np.abs(v).max(axis=1) * math.sqrt(v.shape[1])
    return spread <= _CONSTANT_RTOL * np.maximum(scale, 1.0)


def _normalize_rows(v: NDArray[F64]) -> NDArray[F64]:
    dev = v - v.mean(axis=1, keepdims=True)
    return dev / np.sqrt((dev**2).sum(axis=1, keepdims=True))


def normalize_channels(record: SweepRecord) -> SweepRecord:
    """Zero-mean, unit-sum-of-squares channels; constant channels are dropped."""
    const = _constant_rows(record.values)
    if const.all():
        raise ValueError("every channel in the sweep is constant")
    if const.any():
        dropped = [c for c, k in zip(record.channels, const) if k]
        warnings.warn(f"dropping constant channels {dropped}", ConstantChannelWarning, stacklevel=2)
    keep = ~const
    chans = tuple(c for c, k in zip(record.channels, keep) if k)
    return replace(record, values=_normalize_rows(record.values[keep]), channels=chans)


def _pooled_lag_correlation(x: NDArray[F64], t: int) -> float:
    m = x.shape[1]
    a = x[:, : m - t]
    b = x[:, t:]
    a = a - a.mean(axis=1, keepdims=True)
    b = b - b.mean(axis=1, keepdims=True)
    den = math.sqrt(float((a * a).sum()) * float((b * b).sum()))
    if den == 0.0:
        warnings.warn(f"zero pooled variance at lag {t}", ZeroVarianceWarning, stacklevel=3)
        return 0.0
    return float((a * b).sum()) / den


def _check_lag(m: int, t: int) -> None:
    if not 1 <= t <= m - MIN_OVERLAP:
        raise ValueError(f"lag {t} needs 1 <= t <= {m - MIN_OVERLAP} for {m} points")


def correlation_at_lag(record: SweepRecord, t: int) -> float:
    """Pooled Pearson correlation between the sweep and its ``t``-step translation.

    Means are taken per channel over the overlap, the sums run over channels
    and overlap points together.
    """
    _check_lag(record.n_points, t)
    x = normalize_channels(record).values
    return min(1.0, max(-1.0, _pooled_lag_correlation(x, int(t))))


def correlation_curve(record: SweepRecord, t_min: int, t_max: int) -> CorrelationCurve:
    if t_max < t_min:
        raise ValueError(f"empty lag range [{t_min}, {t_max}]")
    _check_lag(record.n_points, t_min)
    _check_lag(record.n_points, t_max)
    x = normalize_channels(record).values
    lags = np.arange(t_min, t_max + 1)
    vals = np.array([_pooled_lag_correlation(x, int(t)) for t in lags])
    return CorrelationCurve(lags, np.clip(vals, -1.0, 1.0))


def _abs_linear_scan(
    t: NDArray[F64], y: NDArray[F64], candidates: NDArray[F64]
) -> tuple[NDArray[F64], NDArray[F64], NDArray[F64]]:
    """Least-squares ``(rho_max, slope)`` and residual for each kink candidate."""
    u = np.abs(t[None, :] - candidates[:, None])
    n = t.size
    su, sy = u.sum(axis=1), y.sum()
    suu, suy = (u * u).sum(axis=1), (u * y[None, :]).sum(axis=1)
    det = n * suu - su * su
    with np.errstate(divide="ignore", invalid="ignore"):
        slope = (n * suy - su * sy) / det
        rho = (sy - slope * su) / n
    # a non-negative slope is not a peak; fall back to the flat model there
    flat = ~(slope <= 0.0) | ~np.isfinite(slope)
    slope = np.where(flat, 0.0, slope)
    rho = np.where(flat, sy / n, rho)
    resid = ((y[None, :] - rho[:, None] - slope[:, None] * u) ** 2).sum(axis=1)
    return rho, slope, resid


def fit_period(
    curve: CorrelationCurve,
    half_window: int = HALF_WINDOW,
    search: tuple[float, float] | None = None,
    resolution: float = KINK_RESOLUTION,
) -> PeriodFit:
    """Fit the absolute-value-linear peak model around the curve maximum.

    Args:
        curve: correlation versus integer lag.
        half_window: number of lags on each side of the discrete maximum used
            in the fit; near the curve ends both sides shrink together so the
            window stays centred.
        search: inclusive lag interval in which the discrete maximum is
            sought (defaults to the whole curve).
        resolution: spacing of the kink-position grid in lag units.

    Raises:
        PeriodFitError: if fewer than two lags are available on either side
            of the maximum, or the curve is flat.
    """
    lags = np.asarray(curve.lags)
    vals = np.asarray(curve.values, dtype=F64)
    mask = np.ones(lags.size, dtype=bool)
    if search is not None:
        mask = (lags >= search[0]) & (lags <= search[1])
    if not mask.any():
        raise PeriodFitError("no lags inside the search interval")
    idx = np.flatnonzero(mask)
    k = int(idx[np.argmax(vals[idx])])
    # keep the window centred: shrink both sides to what the shorter one has
    w = min(half_window, k, lags.size - 1 - k)
    if w < 2:
        raise PeriodFitError(f"maximum at lag {lags[k]} is too close to the curve edge")
    lo, hi = k - w, k + w
    t = lags[lo : hi + 1].astype(F64)
    y = vals[lo : hi + 1]
    if np.ptp(y) == 0.0:
        raise PeriodFitError("correlation curve is flat around its maximum")
    steps = int(round(1.0 / resolution))
    # candidates on an exact decimal lattice: lag + j * resolution
    cand = (np.arange(int(t[0]) * steps, int(t[-1]) * steps + 1) / steps).astype(F64)
    rho, slope, resid = _abs_linear_scan(t, y, cand)
    best = int(np.argmin(resid))
    return PeriodFit(
        rho_max=float(min(1.0, rho[best])),
        slope=float(slope[best]),
        tau_max=float(cand[best]),
        window=(int(t[0]), int(t[-1])),
        residual=float(resid[best]),
    )


def search_lags(m: int, half_window: int = HALF_WINDOW) -> tuple[tuple[int, int], tuple[float, float]]:
    """Lag range to evaluate and the argmax search interval for an ``m``-point sweep."""
    lo_f, hi_f = SEARCH_FRACTION[0] * m, SEARCH_FRACTION[1] * m
    t_min = max(1, math.ceil(lo_f) - half_window)
    t_max = min(m - MIN_OVERLAP, math.floor(hi_f) + half_window)
    return (t_min, t_max), (lo_f, hi_f)


def estimate_period(record: SweepRecord, half_window: int = HALF_WINDOW) -> tuple[CorrelationCurve, PeriodFit]:
    """Correlation curve plus period fit with the default lag search window."""
    (t_min, t_max), search = search_lags(record.n_points, half_window)
    curve = correlation_curve(record, t_min, t_max)
    return curve, fit_period(curve, half_window, search)


def score_periodicity(original: SweepRecord, shifted: SweepRecord) -> PeriodicityScore:
    """Pooled correlation between a sweep and its copy shifted by one period.

    Both records are normalized per channel over their full length; a channel
    that is constant in either record is dropped from both.
    """
    if original.values.shape != shifted.values.shape:
        raise ValueError(f"shape mismatch {original.values.shape} vs {shifted.values.shape}")
    if not math.isclose(original.delta, shifted.delta, rel_tol=1e-12):
        raise ValueError("records use different steps")
    const = _constant_rows(original.values) | _constant_rows(shifted.values)
    if const.all():
        raise ValueError("no channel varies in both records")
    if const.any():
        dropped = [c for c, k in zip(original.channels, const) if k]
        warnings.warn(f"dropping constant channels {dropped}", ConstantChannelWarning, stacklevel=2)
    a = _normalize_rows(original.values[~const])
    b = _normalize_rows(shifted.values[~const])
    # both blocks have unit sum of squares per channel and zero channel means
    p = float((a * b).sum()) / math.sqrt(float((a * a).sum()) * float((b * b).sum()))
    return PeriodicityScore(min(1.0, max(-1.0, p)), original, shifted)
