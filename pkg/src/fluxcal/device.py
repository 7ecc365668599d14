"""Simulated flux-biased circuit used as a calibration test double.

The device holds a ground-truth crosstalk matrix and offsets, a set of
two-level elements (QFPs or flux qubits) each biased by a Z and an X loop,
and readout resonators probed at fixed frequencies. Every readout channel is
the transmission magnitude of one resonator at one probe frequency.

Fluxes seen by the circuit are ``f = C @ V + f0`` plus an optional linear
drift per measurement. Elements load each other inductively:
``f_eff = f + kappa @ pol`` where ``pol`` holds the polarization of each
element's Z loop and the normalized circulating current of each tunable
resonator loop. The loading is resolved by a fixed number of Jacobi passes so
the readout stays an exact, periodic function of the bare fluxes.

All magnitudes are normalized stand-ins; nothing here is fitted to a
particular chip.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Mapping, Protocol, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .coords import as_matrix, as_vector, check_invertible, inverse, matrix_from_json

F64 = np.float64

LOOP_KINDS = ("qfp-z", "qfp-x", "resonator", "qubit-z", "qubit-x")
PRESETS = ("paper-3loop", "paper-5loop")


class DeviceBackend(Protocol):
    """What the calibrator needs from a device: set biases, then read channels."""

    n_loops: int
    n_channels: int

    def set_voltages(self, V: ArrayLike) -> None: ...

    def measure(self, channels: Sequence[int] | None = None) -> NDArray[F64]: ...


@dataclass(frozen=True)
class QfpParams:
    """Two-level element parameters (energies in units of ``I_p * Phi0``)."""

    ip: float = 1.0
    delta_max: float = 0.1
    hysteresis: bool = False
    delta_latch: float = 0.02

    def __post_init__(self) -> None:
        if not self.delta_max > 0:
            raise ValueError("delta_max must be positive")
        if not self.delta_latch < self.delta_max:
            raise ValueError("delta_latch must be below delta_max")


@dataclass(frozen=True)
class ElementSpec:
    name: str
    z: int
    x: int
    params: QfpParams = QfpParams()


@dataclass(frozen=True)
class ResonatorParams:
    """``omega_r = omega_base + amp * cos(2 pi f_eff)`` with notch-type transmission."""

    omega_base: float
    amp: float = 0.0
    kappa_tot: float = 1.0
    kappa_c: float = 0.8
    probes: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        if not self.kappa_tot > 0:
            raise ValueError("kappa_tot must be positive")
        if not 0 < self.kappa_c <= self.kappa_tot:
            raise ValueError("need 0 < kappa_c <= kappa_tot")
        object.__setattr__(self, "probes", tuple(float(p) for p in self.probes))


@dataclass(frozen=True)
class ResonatorSpec:
    """A readout resonator.

    Attributes:
        loop: flux loop tuning the resonator, or ``None`` for a fixed one.
        dispersive: frequency shift per unit polarization of named elements.
        loading: frequency shift per unit normalized tunneling ``Delta / Delta_max``
            of named elements (the element's X-dependent inductance).
        current: circulating-current amplitude the loop presents to
            ``kappa`` (as ``current * sin(2 pi f_eff)``); 0 disables it.
    """

    name: str
    params: ResonatorParams
    loop: int | None = None
    dispersive: Mapping[str, float] = field(default_factory=dict)
    current: float = 0.0
    loading: Mapping[str, float] = field(default_factory=dict)


@dataclass
class DeviceConfig:
    """Ground truth and physics of a simulated device."""

    name: str
    loop_names: list[str]
    loop_kinds: list[str]
    C: NDArray[F64]
    f0: NDArray[F64]
    elements: list[ElementSpec] = field(default_factory=list)
    resonators: list[ResonatorSpec] = field(default_factory=list)
    kappa: NDArray[F64] | None = None
    noise: float = 0.0
    drift: NDArray[F64] | float = 0.0
    seed: int = 0
    jacobi_passes: int = 3
    #: loop -> channel index used by feature tracking
    tracking: dict[int, int] = field(default_factory=dict)
    #: loop -> true flux at which the tracked feature sits (sets offsets)
    feature_flux: dict[int, float] = field(default_factory=dict)
    #: channels read during periodicity sweeps (None reads all)
    sweep_channels: list[int] | None = None
    #: loop -> fixed off-sweep trial flux
    bias_hints: dict[int, float] = field(default_factory=dict)
    notes: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.C = check_invertible(as_matrix(self.C))
        n = self.C.shape[0]
        self.f0 = as_vector(self.f0, n)
        if len(self.loop_names) != n or len(self.loop_kinds) != n:
            raise ValueError("one name and kind per loop required")
        for k in self.loop_kinds:
            if k not in LOOP_KINDS:
                raise ValueError(f"unknown loop kind {k!r}")
        self.kappa = np.zeros((n, n)) if self.kappa is None else as_matrix(self.kappa, n)
        if self.noise < 0:
            raise ValueError("noise must be non-negative")
        self.drift = np.broadcast_to(np.asarray(self.drift, dtype=F64), (n,)).copy()
        names = {e.name for e in self.elements}
        for r in self.resonators:
            if r.loop is not None and not 0 <= r.loop < n:
                raise ValueError(f"resonator {r.name} references loop {r.loop}")
            for e in [*r.dispersive, *r.loading]:
                if e not in names:
                    raise ValueError(f"resonator {r.name} couples to unknown element {e}")
        n_ch = sum(len(r.params.probes) for r in self.resonators)
        for c in [*(self.sweep_channels or []), *self.tracking.values()]:
            if not 0 <= c < n_ch:
                raise ValueError(f"channel {c} does not exist ({n_ch} channels)")
        for e in self.elements:
            if not (0 <= e.z < n and 0 <= e.x < n):
                raise ValueError(f"element {e.name} references a missing loop")

    @property
    def n(self) -> int:
        return self.C.shape[0]

    @property
    def channel_names(self) -> list[str]:
        return [f"{r.name}@{p:g}" for r in self.resonators for p in r.params.probes]

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "DeviceConfig":
        if "C" in d:
            C = _matrix(d["C"])
        elif "M" in d and "R" in d:
            # C = M R^-1 with R the diagonal of source resistances
            C = _matrix(d["M"]) @ np.diag(1.0 / np.asarray(d["R"], dtype=F64))
        else:
            raise ValueError("device config needs either C or both M and R")
        loops = d["loops"]
        elements = [
            ElementSpec(e["name"], int(e["z"]), int(e["x"]), QfpParams(**e.get("params", {})))
            for e in d.get("elements", [])
        ]
        resonators = [
            ResonatorSpec(
                r["name"],
                ResonatorParams(**r["params"]),
                r.get("loop"),
                dict(r.get("dispersive", {})),
                float(r.get("current", 0.0)),
                dict(r.get("loading", {})),
            )
            for r in d.get("resonators", [])
        ]
        return cls(
            name=d.get("name", "custom"),
            loop_names=[lp["name"] for lp in loops],
            loop_kinds=[lp["kind"] for lp in loops],
            C=C,
            f0=d.get("f0", [0.0] * len(loops)),
            elements=elements,
            resonators=resonators,
            kappa=_matrix(d["kappa"]) if "kappa" in d else None,
            noise=float(d.get("noise", 0.0)),
            drift=d.get("drift", 0.0),
            seed=int(d.get("seed", 0)),
            jacobi_passes=int(d.get("jacobi_passes", 3)),
            tracking={int(k): int(v) for k, v in d.get("tracking", {}).items()},
            sweep_channels=[int(c) for c in d["sweep_channels"]] if d.get("sweep_channels") is not None else None,
            feature_flux={int(k): float(v) for k, v in d.get("feature_flux", {}).items()},
            bias_hints={int(k): float(v) for k, v in d.get("bias_hints", {}).items()},
            notes=dict(d.get("notes", {})),
        )

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "loops": [{"name": a, "kind": b} for a, b in zip(self.loop_names, self.loop_kinds)],
            "C": {"n": self.n, "entries": self.C.reshape(-1).tolist()},
            "f0": self.f0.tolist(),
            "elements": [
                {"name": e.name, "z": e.z, "x": e.x, "params": e.params.__dict__.copy()}
                for e in self.elements
            ],
            "resonators": [
                {
                    "name": r.name,
                    "loop": r.loop,
                    "params": {**r.params.__dict__, "probes": list(r.params.probes)},
                    "dispersive": dict(r.dispersive),
                    "current": r.current,
                    "loading": dict(r.loading),
                }
                for r in self.resonators
            ],
            "kappa": {"n": self.n, "entries": self.kappa.reshape(-1).tolist()},
            "noise": self.noise,
            "drift": self.drift.tolist(),
            "seed": self.seed,
            "jacobi_passes": self.jacobi_passes,
            "tracking": {str(k): v for k, v in self.tracking.items()},
            "sweep_channels": None if self.sweep_channels is None else list(self.sweep_channels),
            "feature_flux": {str(k): v for k, v in self.feature_flux.items()},
            "bias_hints": {str(k): v for k, v in self.bias_hints.items()},
            "notes": dict(self.notes),
        }

    @classmethod
    def from_json(cls, path: str | Path) -> "DeviceConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    @classmethod
    def preset(cls, name: str, **overrides: Any) -> "DeviceConfig":
        if name not in PRESETS:
            raise KeyError(f"unknown preset {name!r}; available: {', '.join(PRESETS)}")
        text = resources.files("fluxcal.presets").joinpath(f"{name}.json").read_text()
        d = json.loads(text)
        d.update(overrides)
        return cls.from_dict(d)


def _matrix(obj: Any) -> NDArray[F64]:
    if isinstance(obj, Mapping):
        return matrix_from_json(obj)
    return as_matrix(obj)


def symmetry_point(f_x: float) -> float:
    """Z bias (mod 1) at which the element's two persistent-current states are degenerate.

    Locally the symmetry point moves by half the X flux. The extra drift needed
    to make the element 1-periodic in ``f_x`` is packed around integer X flux,
    where tunneling is largest, so the sheared coordinates hold the bias fixed
    wherever latching can occur.
    """
    return 0.5 - f_x - math.sin(2.0 * math.pi * f_x) / (4.0 * math.pi)


def energy_bias(f_z: float, f_x: float, params: QfpParams) -> float:
    """Periodic bias ``I_p * sin(2 pi (f_z - f_sym)) / (2 pi)``; slope ``I_p`` at degeneracy."""
    return params.ip * math.sin(2.0 * math.pi * (f_z - symmetry_point(f_x))) / (2.0 * math.pi)


def tunneling(f_x: float, params: QfpParams) -> float:
    return params.delta_max * abs(math.cos(math.pi * f_x))


def qfp_ground_state(
    f_z: float, f_x: float, params: QfpParams = QfpParams(), latch_state: float | None = None
) -> tuple[float, float | None]:
    """Ground-state ``<sigma_z>`` of ``H = -eps sigma_z - (Delta / 2) sigma_x``.

    ``eps`` is :func:`energy_bias`, equal to ``I_p * (f_z - f_z_sym)`` to first
    order and smooth across both degeneracy points of a flux period. With
    hysteresis enabled and ``Delta < delta_latch`` the sign is held at
    ``latch_state``; otherwise the latch follows the equilibrium sign.

    Returns:
        ``(polarization, new_latch_state)``.
    """
    eps = energy_bias(f_z, f_x, params)
    half_gap = 0.5 * tunneling(f_x, params)
    norm = math.hypot(eps, half_gap)
    pol = eps / norm if norm > 0 else 0.0
    if params.hysteresis and latch_state is not None and 2.0 * half_gap < params.delta_latch:
        return math.copysign(abs(pol), latch_state), latch_state
    if pol != 0.0:
        return pol, math.copysign(1.0, pol)
    return pol, latch_state


def effective_fluxes(f: ArrayLike, kappa: ArrayLike, pol: ArrayLike) -> NDArray[F64]:
    """``f + kappa @ pol``: fluxes including inductive loading by other elements."""
    return np.asarray(f, dtype=F64) + np.asarray(kappa, dtype=F64) @ np.asarray(pol, dtype=F64)


def resonator_response(
    f_eff: float | ArrayLike, omega_p: float | ArrayLike, params: ResonatorParams, shift: float = 0.0
) -> NDArray[F64] | float:
    """Notch transmission ``|S21|`` of a flux-tunable resonator at probe ``omega_p``."""
    omega_r = params.omega_base + shift + params.amp * np.cos(2.0 * np.pi * np.asarray(f_eff, dtype=F64))
    s21 = 1.0 - (0.5 * params.kappa_c) / (1j * (np.asarray(omega_p, dtype=F64) - omega_r) + 0.5 * params.kappa_tot)
    out = np.abs(s21)
    return float(out) if out.ndim == 0 else out


def tilde_coordinates(f_z: float, f_x: float) -> tuple[float, float]:
    """Sheared element coordinates that hold the Z bias fixed while X is swept."""
    return f_z + 0.5 * f_x, f_x


def from_tilde_coordinates(ft_z: float, ft_x: float) -> tuple[float, float]:
    return ft_z - 0.5 * ft_x, ft_x


class SimulatedDevice:
    """Stateful simulated backend (latched polarizations, drift, noise).

    Access must be sequential: measurement order changes latch and drift state.
    """

    def __init__(self, config: DeviceConfig):
        self.config = config
        self.n_loops = config.n
        self._elem_idx = {e.name: k for k, e in enumerate(config.elements)}
        self._channels: list[tuple[int, float]] = [
            (ri, p) for ri, r in enumerate(config.resonators) for p in r.params.probes
        ]
        self.n_channels = len(self._channels)
        self.reset()

    def reset(self) -> None:
        """Clear latches, drift and the noise stream; voltages return to zero."""
        self._latch: list[float | None] = [None] * len(self.config.elements)
        self._count = 0
        self._rng = np.random.default_rng(self.config.seed)
        self._V = np.zeros(self.n_loops)

    @property
    def measurement_count(self) -> int:
        return self._count

    @property
    def voltages(self) -> NDArray[F64]:
        return self._V.copy()

    def set_voltages(self, V: ArrayLike) -> None:
        self._V = as_vector(V, self.n_loops).copy()

    def true_fluxes(self, V: ArrayLike | None = None) -> NDArray[F64]:
        V = self._V if V is None else as_vector(V, self.n_loops)
        return self.config.C @ V + self.config.f0 + self.config.drift * self._count

    def _loop_sources(self, f_eff: NDArray[F64], latch: list[float | None]) -> tuple[NDArray[F64], list]:
        cfg = self.config
        src = np.zeros(self.n_loops)
        states = []
        for k, e in enumerate(cfg.elements):
            pol, new = qfp_ground_state(f_eff[e.z], f_eff[e.x], e.params, latch[k])
            src[e.z] += pol
            states.append((pol, new))
        for r in cfg.resonators:
            if r.loop is not None and r.current:
                src[r.loop] += r.current * math.sin(2.0 * math.pi * f_eff[r.loop])
        return src, states

    def circuit_state(self, f: ArrayLike, latch: list[float | None] | None = None):
        """Resolve inductive loading at bare fluxes ``f``.

        Returns ``(f_eff, polarizations, new_latches)`` without touching the
        device state.
        """
        cfg = self.config
        latch = list(self._latch) if latch is None else list(latch)
        f = np.asarray(f, dtype=F64)
        src = np.zeros(self.n_loops)
        for _ in range(max(cfg.jacobi_passes, 0)):
            src, _ = self._loop_sources(effective_fluxes(f, cfg.kappa, src), latch)
        f_eff = effective_fluxes(f, cfg.kappa, src)
        _, states = self._loop_sources(f_eff, latch)
        return f_eff, [s[0] for s in states], [s[1] for s in states]

    def readout_at(self, f: ArrayLike, latch: list[float | None] | None = None) -> tuple[NDArray[F64], list]:
        """Noiseless readout of every channel at bare fluxes ``f`` (pure)."""
        f_eff, pols, new_latch = self.circuit_state(f, latch)
        out = np.empty(self.n_channels)
        c = 0
        for r in self.config.resonators:
            shift = sum(chi * pols[self._elem_idx[e]] for e, chi in r.dispersive.items())
            for name, eta in r.loading.items():
                el = self.config.elements[self._elem_idx[name]]
                shift += eta * tunneling(f_eff[el.x], el.params) / el.params.delta_max
            fe = f_eff[r.loop] if r.loop is not None else 0.0
            probes = np.asarray(r.params.probes)
            out[c : c + probes.size] = resonator_response(fe, probes, r.params, shift)
            c += probes.size
        return out, new_latch

    def measure(self, channels: Sequence[int] | None = None) -> NDArray[F64]:
        idx = list(range(self.n_channels)) if channels is None else list(channels)
        for ch in idx:
            if not 0 <= ch < self.n_channels:
                raise IndexError(f"unknown channel {ch}")
        values, self._latch = self.readout_at(self.true_fluxes())
        self._count += 1
        if self.config.noise > 0:
            values = values + self._rng.normal(0.0, self.config.noise, values.size)
        return values[idx]

    def ground_truth(self) -> tuple[NDArray[F64], NDArray[F64]]:
        return self.config.C.copy(), self.config.f0.copy()


def perturb_estimate(C: ArrayLike, rel: float, rng: np.random.Generator) -> NDArray[F64]:
    """Copy of ``C`` with off-diagonals shifted by up to ``rel`` of their row's diagonal."""
    c = as_matrix(C).copy()
    n = c.shape[0]
    for i in range(n):
        for j in range(n):
            if i != j:
                c[i, j] += rel * rng.uniform(-1.0, 1.0) * c[i, i]
    return c


def initial_estimate(
    config: DeviceConfig, seed: int, rel: float = 0.1, offset: float = 0.05,
) -> tuple[NDArray[F64], NDArray[F64]]:
    """Seeded imperfect starting point ``(C_init, f0_init)`` for a simulated device.

    Off-diagonals are perturbed as in :func:`perturb_estimate`; offsets are
    shifted uniformly by up to ``offset``.
    """
    rng = np.random.default_rng(seed)
    C_init = perturb_estimate(config.C, rel, rng)
    f0_init = config.f0 + rng.uniform(-offset, offset, config.n)
    return C_init, f0_init


def estimate_error(C_true: ArrayLike, C_est: ArrayLike) -> NDArray[F64]:
    """``C_true @ inv(C_est) - I``, the deviation reported for a calibration."""
    c = as_matrix(C_true)
    return c @ inverse(C_est) - np.eye(c.shape[0])
