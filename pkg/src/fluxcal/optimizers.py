"""Bounded black-box maximizers: Gaussian-process Bayesian optimization and SPSA.

Both share :func:`optimize`, which calls an objective ``f(x) -> float`` at
most ``cfg.n_total`` times and returns the best evaluated point together with
the full :class:`EvaluationHistory`.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Literal, Sequence

import numpy as np
import scipy.linalg
import scipy.optimize
from numpy.typing import ArrayLike, NDArray
from scipy.special import ndtr

F64 = np.float64

Objective = Callable[[NDArray[F64]], float]


class OptimizationAborted(RuntimeError):
    """The objective raised; ``history`` holds every evaluation that completed."""

    def __init__(self, message: str, history: "EvaluationHistory"):
        super().__init__(message)
        self.history = history


@dataclass
class OptimizerConfig:
    """Settings shared by both optimizers.

    ``bounds`` holds one ``(low, high)`` pair per parameter. The GP and SPSA
    fields are only read by the matching algorithm.
    """

    bounds: list[tuple[float, float]]
    n_init: int = 20
    n_total: int = 80
    seed: int = 0
    algorithm: Literal["bayes", "spsa"] = "bayes"
    # Gaussian process
    length_scale: float = 0.02
    signal_std: float = 0.5
    noise_std: float = 0.01
    prior_mean: float = 0.0
    n_candidates: int = 1024
    # extra EI candidates drawn around the incumbent (0 disables)
    n_local_candidates: int = 0
    local_scale: float = 0.01
    # Nelder-Mead refinement from the GP incumbent, taken from the budget tail
    n_polish: int = 0
    polish_step: float = 0.004
    # SPSA gains
    spsa_a: float = 0.05
    spsa_c: float = 0.02
    spsa_A: float = 10.0
    spsa_alpha: float = 0.602
    spsa_gamma: float = 0.101
    #: SPSA starts uniformly within +-this range (0 starts at the origin)
    spsa_init_range: float = 0.0

    def __post_init__(self) -> None:
        self.bounds = [(float(lo), float(hi)) for lo, hi in self.bounds]
        for lo, hi in self.bounds:
            if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
                raise ValueError(f"invalid bound ({lo}, {hi})")
        if self.n_total < 1:
            raise ValueError("budget must allow at least one evaluation")
        if not 0 <= self.n_init <= self.n_total:
            raise ValueError("need 0 <= n_init <= n_total")
        if not 0 <= self.n_polish <= self.n_total - self.n_init:
            raise ValueError("need 0 <= n_polish <= n_total - n_init")
        if self.n_candidates < 1 or self.n_local_candidates < 0:
            raise ValueError("candidate counts must be positive")
        if self.algorithm not in ("bayes", "spsa"):
            raise ValueError(f"unknown algorithm {self.algorithm!r}")

    @classmethod
    def box(cls, dim: int, bound: float = 0.2, **kw) -> "OptimizerConfig":
        return cls(bounds=[(-bound, bound)] * dim, **kw)

    @property
    def dim(self) -> int:
        return len(self.bounds)

    def lower(self) -> NDArray[F64]:
        return np.array([b[0] for b in self.bounds], dtype=F64)

    def upper(self) -> NDArray[F64]:
        return np.array([b[1] for b in self.bounds], dtype=F64)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bounds"] = [list(b) for b in self.bounds]
        return d


@dataclass
class Evaluation:
    step: int
    params: list[float]
    value: float
    timestamp: float | None = None


@dataclass
class EvaluationHistory:
    evaluations: list[Evaluation] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.evaluations)

    def __iter__(self):
        return iter(self.evaluations)

    def append(self, params: ArrayLike, value: float, timestamp: float | None = None) -> Evaluation:
        ev = Evaluation(len(self.evaluations), [float(x) for x in np.ravel(params)], float(value), timestamp)
        self.evaluations.append(ev)
        return ev

    @property
    def best_index(self) -> int:
        if not self.evaluations:
            raise ValueError("empty history")
        # first occurrence wins ties
        return int(np.argmax([e.value for e in self.evaluations]))

    @property
    def best(self) -> Evaluation:
        return self.evaluations[self.best_index]

    def best_so_far(self) -> list[float]:
        return list(np.maximum.accumulate([e.value for e in self.evaluations]))

    def inputs(self) -> NDArray[F64]:
        return np.array([e.params for e in self.evaluations], dtype=F64)

    def values(self) -> NDArray[F64]:
        return np.array([e.value for e in self.evaluations], dtype=F64)

    def to_jsonl(self) -> str:
        return "".join(
            json.dumps({"step": e.step, "params": e.params, "value": e.value, "timestamp": e.timestamp})
            + "\n"
            for e in self.evaluations
        )

    @classmethod
    def from_jsonl(cls, text: str) -> "EvaluationHistory":
        h = cls()
        for line in text.splitlines():
            if line.strip():
                d = json.loads(line)
                h.evaluations.append(Evaluation(d["step"], d["params"], d["value"], d.get("timestamp")))
        return h


class GpModel:
    """GP regression with a squared-exponential kernel and fixed hyperparameters."""

    def __init__(
        self,
        length_scale: float | Sequence[float] = 0.02,
        signal_std: float = 0.5,
        noise_std: float = 0.01,
        prior_mean: float = 0.0,
    ):
        self.length_scale = np.atleast_1d(np.asarray(length_scale, dtype=F64))
        self.signal_var = float(signal_std) ** 2
        self.noise_var = float(noise_std) ** 2
        self.prior_mean = float(prior_mean)
        self.X: NDArray[F64] | None = None
        self.y: NDArray[F64] | None = None
        self._chol = None
        self._alpha = None

    def kernel(self, a: NDArray[F64], b: NDArray[F64]) -> NDArray[F64]:
        a = np.atleast_2d(a) / self.length_scale
        b = np.atleast_2d(b) / self.length_scale
        d2 = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
        return self.signal_var * np.exp(-0.5 * np.maximum(d2, 0.0))

    def fit(self, X: ArrayLike, y: ArrayLike) -> "GpModel":
        X = np.atleast_2d(np.asarray(X, dtype=F64))
        y = np.asarray(y, dtype=F64).reshape(-1)
        if X.shape[0] != y.size or y.size == 0:
            raise ValueError("need at least one training point with matching targets")
        k = self.kernel(X, X) + self.noise_var * np.eye(len(y))
        try:
            chol = scipy.linalg.cho_factor(k, lower=True)
        except np.linalg.LinAlgError:
            try:
                chol = scipy.linalg.cho_factor(k + 1e-8 * np.eye(len(y)), lower=True)
            except np.linalg.LinAlgError as exc:
                raise np.linalg.LinAlgError("kernel matrix is not positive definite") from exc
        self.X, self.y, self._chol = X, y, chol
        self._alpha = scipy.linalg.cho_solve(chol, y - self.prior_mean)
        return self

    def posterior(self, x: ArrayLike) -> tuple[NDArray[F64], NDArray[F64]]:
        """Posterior mean and (latent) variance at one or many query points."""
        if self.X is None:
            raise RuntimeError("model has not been fitted")
        xq = np.atleast_2d(np.asarray(x, dtype=F64))
        ks = self.kernel(xq, self.X)
        mean = self.prior_mean + ks @ self._alpha
        v = scipy.linalg.solve_triangular(self._chol[0], ks.T, lower=True)
        var = np.maximum(self.signal_var - (v * v).sum(0), 0.0)
        return mean, var


def gp_posterior(model: GpModel, x: ArrayLike) -> tuple[float, float]:
    mean, var = model.posterior(np.atleast_2d(x))
    return float(mean[0]), float(var[0])


def expected_improvement(mean: ArrayLike, variance: ArrayLike, best_so_far: float) -> NDArray[F64] | float:
    """Expected improvement over ``best_so_far`` for a maximization problem."""
    mu = np.asarray(mean, dtype=F64)
    sd = np.sqrt(np.maximum(np.asarray(variance, dtype=F64), 0.0))
    gain = mu - best_so_far
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        z = np.where(sd > 0, gain / np.where(sd > 0, sd, 1.0), 0.0)
        ei = gain * ndtr(z) + sd * np.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)
    ei = np.where(sd > 0, np.maximum(ei, 0.0), np.maximum(gain, 0.0))
    return float(ei) if ei.ndim == 0 else ei


def propose_next(
    model: GpModel,
    history: EvaluationHistory,
    bounds: Sequence[tuple[float, float]],
    rng: np.random.Generator,
    n_candidates: int = 1024,
    n_local: int = 0,
    local_scale: float = 0.01,
) -> NDArray[F64]:
    """EI maximizer over random candidates (first index wins ties).

    ``n_candidates`` points are uniform in the box. ``n_local`` more are
    Gaussian perturbations of the best evaluated point with standard
    deviation ``local_scale``, clipped into the box; they let the search
    resolve the peak more finely than the uniform grid spacing allows.
    """
    lo = np.array([b[0] for b in bounds], dtype=F64)
    hi = np.array([b[1] for b in bounds], dtype=F64)
    cand = lo + (hi - lo) * rng.random((n_candidates, lo.size))
    if n_local > 0:
        best = np.asarray(history.best.params, dtype=F64)
        local = np.clip(best + local_scale * rng.standard_normal((n_local, lo.size)), lo, hi)
        cand = np.vstack([cand, local])
    mean, var = model.posterior(cand)
    ei = expected_improvement(mean, var, float(history.values().max()))
    return cand[int(np.argmax(ei))]


@dataclass
class SpsaState:
    x: NDArray[F64]
    k: int = 0
    a: float = 0.05
    c: float = 0.02
    A: float = 10.0
    alpha: float = 0.602
    gamma: float = 0.101

    def __post_init__(self) -> None:
        self.x = np.asarray(self.x, dtype=F64).copy()
        if not (self.a > 0 and self.c > 0):
            raise ValueError("SPSA gains a and c must be positive")

    def gains(self) -> tuple[float, float]:
        return (
            self.a / (self.k + 1 + self.A) ** self.alpha,
            self.c / (self.k + 1) ** self.gamma,
        )


def spsa_gradient(
    objective: Objective, x: NDArray[F64], ck: float, delta: NDArray[F64],
    lower: NDArray[F64] | None = None, upper: NDArray[F64] | None = None,
) -> tuple[NDArray[F64], tuple[NDArray[F64], float], tuple[NDArray[F64], float]]:
    """Two-sided simultaneous-perturbation gradient estimate.

    Perturbed points are clipped into the box; the divisor uses the actual
    per-coordinate separation, which equals ``2 * ck * delta`` when no
    clipping happens.
    """
    xp, xm = x + ck * delta, x - ck * delta
    if lower is not None:
        xp, xm = np.clip(xp, lower, upper), np.clip(xm, lower, upper)
    yp, ym = float(objective(xp)), float(objective(xm))
    sep = xp - xm
    with np.errstate(divide="ignore", invalid="ignore"):
        g = np.where(sep != 0, (yp - ym) / sep, 0.0)
    return g, (xp, yp), (xm, ym)


def spsa_step(
    state: SpsaState, objective: Objective, rng: np.random.Generator,
    lower: NDArray[F64] | None = None, upper: NDArray[F64] | None = None,
) -> SpsaState:
    """One ascent step; returns the new state (the input is not modified)."""
    ak, ck = state.gains()
    delta = rng.choice(np.array([-1.0, 1.0]), size=state.x.size)
    g, _, _ = spsa_gradient(objective, state.x, ck, delta, lower, upper)
    x = state.x + ak * g
    if lower is not None:
        x = np.clip(x, lower, upper)
    return SpsaState(x, state.k + 1, state.a, state.c, state.A, state.alpha, state.gamma)


def _recording(objective: Objective, history: EvaluationHistory, budget: int,
               clock: Callable[[], float] | None) -> Objective:
    def f(x: NDArray[F64]) -> float:
        if len(history) >= budget:
            raise _BudgetExhausted
        try:
            y = float(objective(np.asarray(x, dtype=F64)))
        except Exception as exc:  # noqa: BLE001 - surfaced with the partial history
            raise OptimizationAborted(f"objective failed at step {len(history)}: {exc}", history) from exc
        if not math.isfinite(y):
            raise OptimizationAborted(f"objective returned {y} at step {len(history)}", history)
        history.append(x, y, clock() if clock else None)
        return y

    return f


class _BudgetExhausted(Exception):
    pass


def _optimize_bayes(f: Objective, cfg: OptimizerConfig, history: EvaluationHistory) -> None:
    lo, hi = cfg.lower(), cfg.upper()
    rng = np.random.default_rng(cfg.seed)
    for x in lo + (hi - lo) * rng.random((cfg.n_init, cfg.dim)):
        f(x)
    if not history:
        f(lo + (hi - lo) * rng.random(cfg.dim))
    while len(history) < cfg.n_total - cfg.n_polish:
        model = GpModel(cfg.length_scale, cfg.signal_std, cfg.noise_std, cfg.prior_mean)
        model.fit(history.inputs(), history.values())
        step_rng = np.random.default_rng([cfg.seed, len(history)])
        f(propose_next(model, history, cfg.bounds, step_rng, cfg.n_candidates,
                       cfg.n_local_candidates, cfg.local_scale))
    if cfg.n_polish:
        _polish(f, cfg, history)


def _polish(f: Objective, cfg: OptimizerConfig, history: EvaluationHistory) -> None:
    """Bounded Nelder-Mead ascent from the best point so far."""
    lo, hi = cfg.lower(), cfg.upper()
    x0 = np.asarray(history.best.params, dtype=F64)
    simplex = [x0] + [np.clip(x0 + cfg.polish_step * e, lo, hi) for e in np.eye(cfg.dim)]
    # the simplex may collapse at a bound; step inwards instead
    for k, e in enumerate(np.eye(cfg.dim)):
        if np.array_equal(simplex[k + 1], x0):
            simplex[k + 1] = np.clip(x0 - cfg.polish_step * e, lo, hi)
    scipy.optimize.minimize(
        lambda x: -f(x), x0, method="Nelder-Mead", bounds=list(zip(lo, hi)),
        options={"initial_simplex": np.array(simplex), "maxfev": cfg.n_polish,
                 "xatol": 1e-6, "fatol": 1e-9},
    )


def _optimize_spsa(f: Objective, cfg: OptimizerConfig, history: EvaluationHistory) -> None:
    lo, hi = cfg.lower(), cfg.upper()
    rng = np.random.default_rng(cfg.seed)
    r = cfg.spsa_init_range
    x0 = np.clip(rng.uniform(-r, r, cfg.dim), lo, hi)
    state = SpsaState(x0, 0, cfg.spsa_a, cfg.spsa_c, cfg.spsa_A, cfg.spsa_alpha, cfg.spsa_gamma)
    while True:
        # the iterate itself is evaluated so the history holds the trajectory
        f(state.x)
        state = spsa_step(state, f, rng, lo, hi)


def optimize(
    objective: Objective, cfg: OptimizerConfig, clock: Callable[[], float] | None = None,
) -> tuple[NDArray[F64], EvaluationHistory]:
    """Maximize ``objective`` within ``cfg.bounds`` using at most ``cfg.n_total`` calls.

    Returns the best evaluated point and the history. Zero-dimensional
    problems evaluate the objective once at the empty point.

    Raises:
        OptimizationAborted: if the objective raises or returns a non-finite
            value; the exception carries the partial history.
    """
    history = EvaluationHistory()
    f = _recording(objective, history, cfg.n_total, clock)
    try:
        if cfg.dim == 0:
            f(np.zeros(0))
        elif cfg.algorithm == "bayes":
            _optimize_bayes(f, cfg, history)
        else:
            _optimize_spsa(f, cfg, history)
    except _BudgetExhausted:
        pass
    best = history.best
    return np.array(best.params, dtype=F64), history


def within_bounds(points: Iterable[ArrayLike], bounds: Sequence[tuple[float, float]]) -> bool:
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    return all(np.all((np.asarray(p) >= lo) & (np.asarray(p) <= hi)) for p in points)
