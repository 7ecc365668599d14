"""Linear algebra relating voltages, control coordinates and residual crosstalk.

Conventions used throughout the package:

* ``C`` maps voltages to reduced fluxes, ``f = C @ V + f0`` (flux quanta).
* An estimate ``(C_init, f0_init)`` defines control coordinates
  ``f_init = C_init @ V + f0_init``.
* A trial compensation for loop ``i`` is a column of off-diagonal entries
  ``Omega[j, i]`` that shears the control coordinates into trial coordinates
  ``f' = (I - O') @ C_init @ V + f0_init``.

Matrices are plain ``numpy`` arrays; the helpers here validate shapes and
conditioning and provide the JSON form shared by sessions and the CLI.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import scipy.linalg
from numpy.typing import ArrayLike, NDArray

F64 = np.float64

#: matrices whose reciprocal condition number falls below this are rejected
RCOND_MIN = 1e-10

#: default box bound on each compensation parameter
OMEGA_BOUND = 0.2


class SingularMatrixError(np.linalg.LinAlgError):
    """Raised when a matrix that must be inverted is numerically singular."""


def as_matrix(a: ArrayLike, n: int | None = None) -> NDArray[F64]:
    m = np.asarray(a, dtype=F64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {m.shape}")
    if n is not None and m.shape[0] != n:
        raise ValueError(f"expected a {n}x{n} matrix, got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix has non-finite entries")
    return m


def as_vector(v: ArrayLike, n: int | None = None) -> NDArray[F64]:
    x = np.asarray(v, dtype=F64).reshape(-1)
    if n is not None and x.shape[0] != n:
        raise ValueError(f"expected a vector of length {n}, got {x.shape[0]}")
    return x


def lu_factor(a: ArrayLike) -> tuple[NDArray[F64], NDArray[np.int32]]:
    """LU-factor ``a`` with partial pivoting, rejecting ill-conditioned input.

    Raises:
        SingularMatrixError: if the reciprocal 1-norm condition number is
            below ``RCOND_MIN``.
    """
    m = as_matrix(a)
    norm = np.linalg.norm(m, 1)
    if norm == 0.0:
        raise SingularMatrixError("zero matrix")
    lu, piv = scipy.linalg.lu_factor(m, check_finite=False)
    if np.any(np.diag(lu) == 0.0):
        raise SingularMatrixError("matrix is exactly singular")
    # 1-norm of the inverse, exact for the small matrices handled here
    inv = scipy.linalg.lu_solve((lu, piv), np.eye(m.shape[0]), check_finite=False)
    rcond = 1.0 / (norm * np.linalg.norm(inv, 1))
    if not np.isfinite(rcond) or rcond < RCOND_MIN:
        raise SingularMatrixError(f"matrix is numerically singular (rcond={rcond:.3g})")
    return lu, piv


def solve(a: ArrayLike, b: ArrayLike) -> NDArray[F64]:
    """Solve ``a @ x = b`` via LU; ``b`` may be a vector or a matrix."""
    return scipy.linalg.lu_solve(lu_factor(a), np.asarray(b, dtype=F64), check_finite=False)


def inverse(a: ArrayLike) -> NDArray[F64]:
    m = as_matrix(a)
    return solve(m, np.eye(m.shape[0]))


def check_invertible(a: ArrayLike) -> NDArray[F64]:
    m = as_matrix(a)
    lu_factor(m)
    return m


def matrix_to_json(a: ArrayLike) -> dict:
    m = as_matrix(a)
    return {"n": int(m.shape[0]), "entries": [float(x) for x in m.reshape(-1)]}


def matrix_from_json(obj: Mapping) -> NDArray[F64]:
    n = int(obj["n"])
    entries = np.asarray(obj["entries"], dtype=F64)
    if entries.shape != (n * n,):
        raise ValueError(f"matrix JSON declares n={n} but has {entries.size} entries")
    return entries.reshape(n, n)


@dataclass(frozen=True)
class TrialCompensation:
    """Compensation parameters ``Omega[j, i]`` for calibrating loop ``i``.

    Attributes:
        target_loop: index ``i`` of the swept control coordinate.
        params: mapping ``j -> Omega[j, i]`` for every ``j != i``.
        bound: box bound on each parameter (inclusive).
    """

    target_loop: int
    params: Mapping[int, float]
    bound: float = OMEGA_BOUND

    def __post_init__(self) -> None:
        params = {int(j): float(v) for j, v in dict(self.params).items()}
        if self.target_loop in params:
            raise ValueError("a loop cannot compensate itself")
        for j, v in params.items():
            if j < 0:
                raise ValueError(f"negative loop index {j}")
            if not np.isfinite(v) or abs(v) > self.bound:
                raise ValueError(f"Omega[{j},{self.target_loop}]={v} outside +/-{self.bound}")
        object.__setattr__(self, "params", dict(sorted(params.items())))

    @classmethod
    def from_vector(
        cls, target_loop: int, n: int, values: Sequence[float], bound: float = OMEGA_BOUND
    ) -> "TrialCompensation":
        """Build from the ``n - 1`` values ordered by ascending ``j != i``."""
        others = [j for j in range(n) if j != target_loop]
        values = list(values)
        if len(values) != len(others):
            raise ValueError(f"expected {len(others)} parameters, got {len(values)}")
        return cls(target_loop, dict(zip(others, values)), bound)

    @classmethod
    def zero(cls, target_loop: int, n: int, bound: float = OMEGA_BOUND) -> "TrialCompensation":
        return cls.from_vector(target_loop, n, [0.0] * (n - 1), bound)

    def vector(self) -> NDArray[F64]:
        return np.array([self.params[j] for j in sorted(self.params)], dtype=F64)

    def check(self, n: int) -> None:
        expected = set(range(n)) - {self.target_loop}
        if not 0 <= self.target_loop < n or set(self.params) != expected:
            raise ValueError(
                f"compensation for loop {self.target_loop} must cover exactly {sorted(expected)}"
            )

    def matrix(self, n: int) -> NDArray[F64]:
        """Expand to the compensation matrix ``O'`` (nonzero only in column ``i``)."""
        self.check(n)
        o = np.zeros((n, n), dtype=F64)
        for j, v in self.params.items():
            o[j, self.target_loop] = v
        return o


@dataclass
class LoopCalibrationResult:
    """Outcome of the periodicity optimization for one control coordinate.

    ``period`` is in units of the trial coordinate ``f'_i``.
    """

    target_loop: int
    params: dict[int, float]
    period: float
    score: float
    history: list = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.period > 0:
            raise ValueError(f"period must be positive, got {self.period}")
        if not -1.0 <= self.score <= 1.0:
            raise ValueError(f"score must lie in [-1, 1], got {self.score}")


def apply_flux_map(C: ArrayLike, f0: ArrayLike, V: ArrayLike) -> NDArray[F64]:
    """Return the loop fluxes ``C @ V + f0``."""
    c = as_matrix(C)
    n = c.shape[0]
    return c @ as_vector(V, n) + as_vector(f0, n)


def trial_matrix(C_init: ArrayLike, omega: TrialCompensation) -> NDArray[F64]:
    c = as_matrix(C_init)
    n = c.shape[0]
    return (np.eye(n) - omega.matrix(n)) @ c


def trial_flux(
    C_init: ArrayLike, f0_init: ArrayLike, omega: TrialCompensation, V: ArrayLike
) -> NDArray[F64]:
    """Forward map from voltages to trial coordinates ``f'``."""
    a = trial_matrix(C_init, omega)
    return a @ as_vector(V, a.shape[0]) + as_vector(f0_init, a.shape[0])


def voltages_for_trial_flux(
    C_init: ArrayLike, f0_init: ArrayLike, omega: TrialCompensation, f_prime: ArrayLike
) -> NDArray[F64]:
    """Voltages that realize the trial coordinates ``f_prime``.

    ``f_prime`` may also be an ``(m, n)`` array of points, in which case an
    ``(m, n)`` array of voltages is returned (one factorization, many solves).
    """
    a = trial_matrix(C_init, omega)
    n = a.shape[0]
    f0 = as_vector(f0_init, n)
    fp = np.asarray(f_prime, dtype=F64)
    if fp.ndim == 1:
        return solve(a, as_vector(fp, n) - f0)
    if fp.ndim != 2 or fp.shape[1] != n:
        raise ValueError(f"expected trial fluxes of shape (m, {n}), got {fp.shape}")
    return solve(a, (fp - f0).T).T


def optimum_compensation(C_res: ArrayLike, i: int, bound: float = np.inf) -> TrialCompensation:
    """Compensation that decouples control coordinate ``i`` from every other loop.

    ``Omega[j, i] = inv(C_res)[j, i] / inv(C_res)[i, i]``. The result is
    invariant under rescaling of ``C_res``.
    """
    inv = inverse(C_res)
    n = inv.shape[0]
    if not 0 <= i < n:
        raise IndexError(f"loop index {i} out of range for n={n}")
    d = inv[i, i]
    if d == 0.0:
        raise ZeroDivisionError(f"inverse residual has zero diagonal at {i}")
    return TrialCompensation(i, {j: inv[j, i] / d for j in range(n) if j != i}, bound)


def assemble_residual_estimate(results: Sequence[LoopCalibrationResult]) -> NDArray[F64]:
    """Residual crosstalk estimate from one calibration result per loop.

    Column ``i`` of ``A = inv(C_res')`` is ``T_i`` on the diagonal and
    ``Omega'[j, i] * T_i`` off it.
    """
    n = len(results)
    by_loop = {r.target_loop: r for r in results}
    if sorted(by_loop) != list(range(n)):
        raise ValueError("need exactly one result per loop")
    a = np.zeros((n, n), dtype=F64)
    for i, r in by_loop.items():
        if not r.period > 0:
            raise ValueError(f"non-positive period for loop {i}")
        if set(r.params) != set(range(n)) - {i}:
            raise ValueError(f"result for loop {i} has parameters for {sorted(r.params)}")
        a[i, i] = r.period
        for j, v in r.params.items():
            a[j, i] = v * r.period
    return inverse(a)


def residual_of(
    C_true: ArrayLike, f0_true: ArrayLike, C_init: ArrayLike, f0_init: ArrayLike
) -> tuple[NDArray[F64], NDArray[F64]]:
    """Residual crosstalk and offsets of an estimate relative to the truth."""
    c = as_matrix(C_true)
    n = c.shape[0]
    ci = as_matrix(C_init, n)
    # C_res = C @ inv(C_init)  <=>  C_init.T @ C_res.T = C.T
    c_res = solve(ci.T, c.T).T
    f0_res = as_vector(f0_true, n) - c_res @ as_vector(f0_init, n)
    return c_res, f0_res


def compensation_distance(a: TrialCompensation, b: TrialCompensation) -> float:
    """Sum of squared parameter differences (deliberately no square root)."""
    if a.target_loop != b.target_loop:
        raise ValueError(f"loops differ: {a.target_loop} vs {b.target_loop}")
    if set(a.params) != set(b.params):
        raise ValueError("compensations cover different loops")
    return float(sum((a.params[j] - b.params[j]) ** 2 for j in a.params))


def update_estimate(C_init: ArrayLike, C_res_prime: ArrayLike) -> NDArray[F64]:
    """Fold a residual estimate into the crosstalk estimate: ``C_res' @ C_init``."""
    ci = as_matrix(C_init)
    cr = as_matrix(C_res_prime, ci.shape[0])
    return cr @ ci


def trial_offsets(
    C_true: ArrayLike, f0_true: ArrayLike, C_init: ArrayLike, f0_init: ArrayLike,
    omega: TrialCompensation,
) -> tuple[NDArray[F64], NDArray[F64]]:
    """True flux map in trial coordinates, ``f = G @ f' + f0'`` (simulation only).

    Returns ``(G, f0')`` with ``G = C_res @ (I + O')``; ``O' @ O' = 0`` so
    ``I + O'`` is the exact inverse of the trial shear.
    """
    c_res, _ = residual_of(C_true, f0_true, C_init, f0_init)
    n = c_res.shape[0]
    g = c_res @ (np.eye(n) + omega.matrix(n))
    f0p = as_vector(f0_true, n) - g @ as_vector(f0_init, n)
    return g, f0p
