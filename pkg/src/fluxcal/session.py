"""Session directories: persisted raw sweeps, results, and the replay audit.

Layout (``schema_version`` 1)::

    session.json        configuration, per-loop results, matrices
    history.jsonl       one line per objective evaluation (or tracker iteration)
    sweeps/NNN.csv      raw periodicity sweeps, one row per sweep point
    sweeps/translation_KK.csv   tracker scans of iteration KK
    landscape/*.csv     P on a compensation grid

Every float in a table is written with 17 significant digits and every float
in JSON with its shortest round-trip form, so :func:`replay` can recompute
each stored number from the raw sweeps and demand exact equality.
"""

from __future__ import annotations

import csv
import json
import math
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from . import coords
from .calibrator import (
    FAILED_SCORE,
    CalibrationSession,
    ObjectiveResult,
    SweepPlan,
    calibrate_all,
    loop_result,
    scan_landscape_1d,
    scan_landscape_2d,
    shifted_start,
)
from .coords import TrialCompensation
from .device import DeviceConfig, SimulatedDevice, estimate_error, initial_estimate
from .optimizers import EvaluationHistory, OptimizerConfig
from .periodicity import HALF_WINDOW, PeriodFitError, SweepRecord, estimate_period, score_periodicity
from .translation import (
    Coordinates,
    IterationEstimate,
    Scan,
    TrackerSettings,
    TranslationResult,
    recompute_iteration,
    run_until_converged,
)

F64 = np.float64

SCHEMA_VERSION = 1
SESSION_FILE = "session.json"
HISTORY_FILE = "history.jsonl"


def fmt(x: float) -> str:
    """17-significant-digit text that parses back to the same double."""
    x = float(x)
    return "nan" if math.isnan(x) else f"{x:.17g}"


def write_table(path: Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])


def read_table(path: Path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path} is empty")
    return rows[0], rows[1:]


def _matrix_json(a: ArrayLike | None) -> dict | None:
    return None if a is None else coords.matrix_to_json(a)


def _matrix(obj: Mapping | None) -> NDArray[F64] | None:
    return None if obj is None else coords.matrix_from_json(obj)


def deviation_summary(C_true: ArrayLike, C_est: ArrayLike) -> dict:
    E = estimate_error(C_true, C_est)
    off = E - np.diag(np.diag(E))
    return {
        "E": coords.matrix_to_json(E),
        "max_abs": float(np.abs(E).max()),
        "max_abs_offdiag": float(np.abs(off).max()),
    }


def _dump(path: Path, obj: Any) -> None:
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(obj, indent=1, allow_nan=True))
    os.replace(tmp, path)


def unique_dir(root: Path, name: str) -> Path:
    """``root/name``, or ``root/name-2``, ... if that already holds files."""
    path = root / name
    k = 2
    while path.exists() and any(path.iterdir()):
        path = root / f"{name}-{k}"
        k += 1
    return path


class SessionWriter:
    """Persists a session incrementally so a failed run keeps its artifacts."""

    def __init__(self, path: str | Path, method: str, meta: Mapping[str, Any]):
        self.path = Path(path)
        (self.path / "sweeps").mkdir(parents=True, exist_ok=True)
        self.data: dict[str, Any] = {"schema_version": SCHEMA_VERSION, "method": method, **meta}
        self.data.setdefault("sweeps", {})
        self.data.setdefault("errors", [])
        self._steps: dict[tuple[str, int], int] = {}
        (self.path / HISTORY_FILE).write_text("")
        self.save()

    def save(self) -> None:
        _dump(self.path / SESSION_FILE, self.data)

    def _history(self, entry: Mapping) -> None:
        with open(self.path / HISTORY_FILE, "a") as fh:
            fh.write(json.dumps(entry) + "\n")

    def write_sweep(self, rec: SweepRecord, **info: Any) -> str:
        name = f"sweeps/{len(self.data['sweeps']):03d}.csv"
        header = ["f_prime"] + [f"ch{c}" for c in rec.channels]
        write_table(self.path / name, header,
                    ([x, *col] for x, col in zip(rec.f_prime.tolist(), rec.values.T.tolist())))
        self.data["sweeps"][name] = {
            "loop": rec.loop, "delta": rec.delta, "start": rec.start,
            "channels": list(rec.channels), "n_points": rec.n_points, **info,
        }
        return name

    def record(self, loop: int, res: ObjectiveResult, context: str = "optimizer") -> None:
        """Store both sweeps of one evaluation and append its history line."""
        step = self._steps.get((context, loop), 0)
        self._steps[(context, loop)] = step + 1
        omega = {str(j): v for j, v in res.omega.params.items()}
        tag = {"context": context, "step": step, "omega": omega}
        primary = self.write_sweep(res.primary, role="primary", **tag)
        shifted = None if res.shifted is None else self.write_sweep(res.shifted, role="shifted", **tag)
        self._history({
            "context": context, "loop": loop, "step": step, "omega": omega, "value": res.score,
            "failed": res.failed, "error": res.error, "period": res.period,
            "primary": primary, "shifted": shifted, "timestamp": None,
        })

    def write_scans(self, index: int, scans: Sequence[Scan]) -> str:
        name = f"sweeps/translation_{index:02d}.csv"
        rows = []
        for k, s in enumerate(scans):
            for x, y in zip(s.xs.tolist(), s.ys.tolist()):
                rows.append([k, s.kind, s.loop, s.swept, float(s.value), x, y])
        write_table(self.path / name, ["scan", "kind", "loop", "swept", "value", "x", "y"], rows)
        return name

    def record_iteration(self, it: IterationEstimate, frame: Coordinates) -> None:
        scans = self.write_scans(it.index, it.scans)
        entry = {
            "index": it.index,
            "C_step": coords.matrix_to_json(it.C_step),
            "f0_step": it.f0_step.tolist(),
            "periods": it.periods.tolist(),
            "max_offdiag": it.max_offdiag,
            "measurements": it.measurements,
            "C": coords.matrix_to_json(frame.C),
            "f0": frame.f0.tolist(),
            "scans": scans,
            "diagnostics": it.diagnostics(),
        }
        self.data.setdefault("iterations", []).append(entry)
        self._history({"context": "translation", "iteration": it.index, "max_offdiag": it.max_offdiag,
                       "periods": it.periods.tolist(), "scans": scans, "timestamp": None})
        self.save()


# -- running sessions ---------------------------------------------------------


@dataclass
class InitialEstimate:
    """Where a calibration's starting coordinates came from.

    ``source`` is ``"perturbed"`` (seeded perturbation of a simulated
    device's truth), ``"session"`` (the result of another session) or
    ``"given"`` (supplied directly, not re-derivable).
    """

    C: NDArray[F64]
    f0: NDArray[F64]
    source: str = "given"
    info: dict = field(default_factory=dict)

    @classmethod
    def perturbed(cls, config: DeviceConfig, seed: int, rel: float = 0.1, offset: float = 0.05) -> "InitialEstimate":
        C, f0 = initial_estimate(config, seed, rel, offset)
        return cls(C, f0, "perturbed", {"seed": seed, "rel": rel, "offset": offset})

    @classmethod
    def from_session(cls, path: str | Path) -> "InitialEstimate":
        """Final coordinates of a stored session (translation or periodicity)."""
        path = Path(path)
        d = load_session(path)
        C, f0 = final_coordinates(d)
        if C is None:
            raise ValueError(f"session {path} has no final estimate")
        return cls(C, f0, "session", {"path": str(path.resolve())})

    def to_dict(self) -> dict:
        return {"source": self.source, **self.info, "C": coords.matrix_to_json(self.C), "f0": self.f0.tolist()}


def load_session(path: str | Path) -> dict:
    d = json.loads((Path(path) / SESSION_FILE).read_text())
    if d.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported session schema {d.get('schema_version')!r}")
    return d


def final_coordinates(d: Mapping) -> tuple[NDArray[F64] | None, NDArray[F64] | None]:
    if d["method"] == "translation":
        return _matrix(d.get("C_ref")), (None if d.get("f0_ref") is None else np.asarray(d["f0_ref"], dtype=F64))
    if d["method"] == "periodicity":
        # offsets are not re-estimated by the periodicity method
        return _matrix(d.get("C_estimate")), np.asarray(d["initial"]["f0"], dtype=F64)
    return None, None


def _device_meta(config: DeviceConfig) -> dict:
    return {"device": config.to_dict()}


def run_periodicity(
    path: str | Path,
    config: DeviceConfig,
    init: InitialEstimate,
    opt_cfg: OptimizerConfig,
    plan_kw: Mapping | None = None,
    loops: Sequence[int] | None = None,
    backend=None,
) -> tuple[CalibrationSession, Path]:
    """Calibrate by periodicity, persisting every sweep as it is taken.

    ``plan_kw`` defaults to reading the device's ``sweep_channels``.
    """
    backend = backend or SimulatedDevice(config)
    plan_kw = dict({"channels": config.sweep_channels} if plan_kw is None else plan_kw)
    w = SessionWriter(path, "periodicity", {
        **_device_meta(config), "seed": opt_cfg.seed, "initial": init.to_dict(),
        "optimizer": opt_cfg.to_dict(), "plan_kw": plan_kw, "loops": {},
    })
    session = None
    try:
        session = calibrate_all(backend, init.C, init.f0, opt_cfg, config.bias_hints, plan_kw,
                                loops, on_evaluation=w.record)
    except Exception as exc:
        w.data["partial"] = True
        w.data["errors"].append(f"{type(exc).__name__}: {exc}")
        w.save()
        raise
    for i, run in sorted(session.runs.items()):
        entry: dict[str, Any] = {"plan": run.plan.to_dict(), "n_evaluations": len(run.evaluations),
                                 "error": run.error, "complete": run.result is not None}
        if run.result is not None:
            r = run.result
            entry.update(params={str(j): v for j, v in r.params.items()}, period=r.period,
                         score=r.score, best_step=run.history.best_index)
        w.data["loops"][str(i)] = entry
    w.data["partial"] = session.partial
    w.data["errors"] += session.errors
    w.data["C_res_prime"] = _matrix_json(session.C_res_prime)
    w.data["C_estimate"] = _matrix_json(session.C_estimate)
    w.data["deviation"] = None if session.C_estimate is None else deviation_summary(config.C, session.C_estimate)
    w.data["measurements"] = getattr(backend, "measurement_count", None)
    w.save()
    return session, w.path


def run_translation(
    path: str | Path,
    config: DeviceConfig,
    max_iters: int = 4,
    tol: float = 3e-3,
    min_iters: int = 1,
    settings: TrackerSettings | None = None,
    backend=None,
) -> tuple[TranslationResult, Path]:
    """Iterative translation calibration from raw voltages, persisting every scan."""
    backend = backend or SimulatedDevice(config)
    settings = settings or TrackerSettings()
    w = SessionWriter(path, "translation", {
        **_device_meta(config), "seed": None, "settings": settings.to_dict(),
        "max_iters": max_iters, "tol": tol, "min_iters": min_iters,
    })
    try:
        res = run_until_converged(backend, config.tracking, max_iters, tol, None, config.feature_flux,
                                  config.bias_hints, settings, min_iters, on_iteration=w.record_iteration)
    except Exception as exc:
        w.data["partial"] = True
        w.data["errors"].append(f"{type(exc).__name__}: {exc}")
        w.save()
        raise
    w.data.update(
        partial=False, converged=res.converged, C_ref=coords.matrix_to_json(res.C_ref),
        f0_ref=res.f0_ref.tolist(), history=res.history,
        deviation=deviation_summary(config.C, res.C_ref),
        measurements=getattr(backend, "measurement_count", None),
    )
    w.save()
    return res, w.path


def run_landscape(
    path: str | Path,
    config: DeviceConfig,
    init: InitialEstimate,
    loop: int,
    params: Sequence[int],
    grids: Sequence[Sequence[float]],
    center: Mapping[int, float] | None = None,
    plan_kw: Mapping | None = None,
    backend=None,
) -> tuple[NDArray[F64], Path]:
    """Score P on a 1-D or 2-D grid of compensation values.

    Grid values are offsets added to ``center`` (zero by default). The table
    lands in ``landscape/loop{loop}_{1d|2d}.csv`` with the absolute
    compensation values of each point.
    """
    backend = backend or SimulatedDevice(config)
    n = config.n
    plan_kw = dict({"channels": config.sweep_channels} if plan_kw is None else plan_kw)
    if len(params) not in (1, 2) or len(grids) != len(params):
        raise ValueError("need one grid per scanned parameter (1 or 2)")
    if loop in params or not all(0 <= j < n for j in params) or not 0 <= loop < n:
        raise ValueError(f"invalid loop {loop} / parameters {list(params)}")
    base = {k: 0.0 for k in range(n) if k != loop}
    base.update({int(k): float(v) for k, v in (center or {}).items()})
    plan = SweepPlan.default(n, loop, config.bias_hints, **plan_kw)
    name = f"loop{loop}_{len(params)}d.csv"
    w = SessionWriter(path, "landscape", {
        **_device_meta(config), "seed": None, "initial": init.to_dict(), "plan": plan.to_dict(),
        "loop": loop, "params": list(params), "grids": [list(map(float, g)) for g in grids],
        "center": {str(k): v for k, v in base.items()}, "table": f"landscape/{name}",
    })
    (w.path / "landscape").mkdir(exist_ok=True)
    record = lambda r: w.record(loop, r, "landscape")  # noqa: E731
    bound = max(abs(v) for v in base.values()) + max(abs(float(v)) for g in grids for v in g) + 1.0
    header = [f"omega_{j}_{loop}" for j in params] + ["P"]
    if len(params) == 1:
        j = params[0]
        if any(base[k] != 0.0 for k in base):
            # the 1-D scan holds the others at zero; route through the grid scan instead
            grid, _ = scan_landscape_2d(backend, init.C, init.f0, loop, (j, j), [0.0], list(grids[0]),
                                        plan, bound=bound, center=base, on_evaluation=record)
            scores = grid[0]
        else:
            out = scan_landscape_1d(backend, init.C, init.f0, loop, j, list(grids[0]), plan,
                                    bound=bound, on_evaluation=record)
            scores = np.array([p for _, p, _ in out])
        rows = [[base[j] + float(v), float(p)] for v, p in zip(grids[0], scores)]
    else:
        ja, jb = params
        grid, _ = scan_landscape_2d(backend, init.C, init.f0, loop, (ja, jb), list(grids[0]), list(grids[1]),
                                    plan, bound=bound, center=base, on_evaluation=record)
        scores = grid
        rows = [[base[ja] + float(va), base[jb] + float(vb), float(grid[r, c])]
                for r, va in enumerate(grids[0]) for c, vb in enumerate(grids[1])]
    write_table(w.path / "landscape" / name, header, rows)
    w.data["partial"] = False
    w.data["measurements"] = getattr(backend, "measurement_count", None)
    w.save()
    return np.asarray(scores), w.path


# -- replay -------------------------------------------------------------------


class Mismatch(AssertionError):
    """A stored number differs from its recomputation."""

    def __init__(self, where: str, stored: Any, recomputed: Any):
        super().__init__(f"{where}: stored {stored!r}, recomputed {recomputed!r}")
        self.where = where
        self.stored = stored
        self.recomputed = recomputed


@dataclass
class ReplayReport:
    path: Path
    method: str
    checked: int = 0
    skipped_loops: list[int] = field(default_factory=list)
    mismatch: Mismatch | None = None

    @property
    def ok(self) -> bool:
        return self.mismatch is None

    def summary(self) -> str:
        if self.ok:
            extra = f"; skipped incomplete loops {self.skipped_loops}" if self.skipped_loops else ""
            return f"replay ok: {self.checked} values recomputed in {self.path}{extra}"
        return f"replay FAILED at {self.mismatch}"


def _same(a: Any, b: Any) -> bool:
    if isinstance(a, float) and isinstance(b, float):
        return a == b or (math.isnan(a) and math.isnan(b))
    return a == b


class _Checker:
    def __init__(self, report: ReplayReport):
        self.report = report

    def eq(self, where: str, stored: Any, recomputed: Any) -> None:
        if isinstance(stored, (list, tuple)) or isinstance(recomputed, (list, tuple)):
            s, r = list(stored or []), list(recomputed or [])
            if len(s) != len(r):
                raise Mismatch(where, stored, recomputed)
            for k, (a, b) in enumerate(zip(s, r)):
                self.eq(f"{where}[{k}]", a, b)
            return
        if stored is None or recomputed is None:
            if stored is not recomputed:
                raise Mismatch(where, stored, recomputed)
        elif not _same(float(stored), float(recomputed)):
            raise Mismatch(where, stored, recomputed)
        self.report.checked += 1

    def matrix(self, where: str, stored: Mapping | None, recomputed: ArrayLike | None) -> None:
        if stored is None or recomputed is None:
            self.eq(where, stored, recomputed)
            return
        self.eq(where, stored["entries"], np.asarray(recomputed, dtype=F64).reshape(-1).tolist())


def read_sweep(root: Path, name: str, meta: Mapping) -> SweepRecord:
    """Rebuild a sweep from its CSV, checking the stored ``f_prime`` column."""
    header, rows = read_table(root / name)
    chans = [int(h[2:]) for h in header[1:]]
    if chans != list(meta["channels"]):
        raise Mismatch(f"{name} header", meta["channels"], chans)
    values = np.array([[float(x) for x in row[1:]] for row in rows], dtype=F64).T
    rec = SweepRecord(int(meta["loop"]), float(meta["delta"]), float(meta["start"]), values, tuple(chans))
    for k, (row, x) in enumerate(zip(rows, rec.f_prime.tolist())):
        if not _same(float(row[0]), x):
            raise Mismatch(f"{name} row {k + 1} f_prime", float(row[0]), x)
    if rec.n_points != meta["n_points"]:
        raise Mismatch(f"{name} point count", meta["n_points"], rec.n_points)
    return rec


def _quiet_period(rec: SweepRecord):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return estimate_period(rec, HALF_WINDOW)[1]


def replay_evaluation(root: Path, d: Mapping, h: Mapping, ck: _Checker) -> ObjectiveResult:
    """Recompute one evaluation (period, shifted start, P) from its sweeps."""
    where = f"{h['primary']} (loop {h['loop']}, {h['context']} step {h['step']})"
    primary = read_sweep(root, h["primary"], d["sweeps"][h["primary"]])
    omega = TrialCompensation(int(h["loop"]), {int(j): v for j, v in h["omega"].items()}, math.inf)
    try:
        fit = _quiet_period(primary)
    except (PeriodFitError, ValueError) as exc:
        ck.eq(f"{where} shifted sweep", h["shifted"], None)
        ck.eq(f"{where} P", h["value"], FAILED_SCORE)
        return ObjectiveResult(omega, FAILED_SCORE, primary, None, None, True, str(exc))
    ck.eq(f"{where} period", h["period"], fit.period(primary.delta))
    if h["shifted"] is None:
        raise Mismatch(f"{where} shifted sweep", None, "a shifted sweep")
    smeta = d["sweeps"][h["shifted"]]
    ck.eq(f"{h['shifted']} start", smeta["start"], shifted_start(primary, fit))
    shifted = read_sweep(root, h["shifted"], smeta)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            p = score_periodicity(primary, shifted).value
    except ValueError as exc:
        ck.eq(f"{where} P", h["value"], FAILED_SCORE)
        return ObjectiveResult(omega, FAILED_SCORE, primary, shifted, fit, True, str(exc))
    ck.eq(f"{where} with {h['shifted']}: P", h["value"], p)
    return ObjectiveResult(omega, p, primary, shifted, fit)


def _history(root: Path) -> list[dict]:
    return [json.loads(line) for line in (root / HISTORY_FILE).read_text().splitlines() if line.strip()]


def _replay_initial(d: Mapping, ck: _Checker) -> tuple[NDArray[F64], NDArray[F64]]:
    init = d["initial"]
    C, f0 = coords.matrix_from_json(init["C"]), np.asarray(init["f0"], dtype=F64)
    if init["source"] == "perturbed":
        rc, rf = initial_estimate(DeviceConfig.from_dict(d["device"]), init["seed"], init["rel"], init["offset"])
        ck.matrix("initial C", init["C"], rc)
        ck.eq("initial f0", init["f0"], rf.tolist())
    elif init["source"] == "session":
        sc, sf = final_coordinates(load_session(init["path"]))
        ck.matrix("initial C", init["C"], sc)
        ck.eq("initial f0", init["f0"], None if sf is None else sf.tolist())
    return C, f0


def _replay_periodicity(root: Path, d: Mapping, ck: _Checker) -> None:
    _replay_initial(d, ck)
    n = DeviceConfig.from_dict(d["device"]).n
    history = [h for h in _history(root) if h["context"] == "optimizer"]
    results = []
    for key, entry in sorted(d["loops"].items(), key=lambda kv: int(kv[0])):
        i = int(key)
        if not entry["complete"]:
            ck.report.skipped_loops.append(i)
            continue
        mine = [h for h in history if h["loop"] == i]
        ck.eq(f"loop {i} evaluation count", entry["n_evaluations"], len(mine))
        evals = [replay_evaluation(root, d, h, ck) for h in mine]
        hist = EvaluationHistory()
        for h, ev in zip(mine, evals):
            hist.append(ev.omega.vector(), ev.score, h.get("timestamp"))
        r = loop_result(i, n, evals, hist)
        ck.eq(f"loop {i} best step", entry["best_step"], hist.best_index)
        ck.eq(f"loop {i} period", entry["period"], r.period)
        ck.eq(f"loop {i} P", entry["score"], r.score)
        ck.eq(f"loop {i} omega", [entry["params"][str(j)] for j in sorted(r.params)],
              [r.params[j] for j in sorted(r.params)])
        results.append(r)
    if len(results) == n:
        C_init = coords.matrix_from_json(d["initial"]["C"])
        c_res = coords.assemble_residual_estimate(results)
        ck.matrix("C_res_prime", d["C_res_prime"], c_res)
        c_est = coords.update_estimate(C_init, c_res)
        ck.matrix("C_estimate", d["C_estimate"], c_est)
        _replay_deviation(d, c_est, ck)
    else:
        ck.matrix("C_estimate", d.get("C_estimate"), None)


def _replay_deviation(d: Mapping, C_est: ArrayLike, ck: _Checker) -> None:
    stored = d.get("deviation")
    if stored is None:
        raise Mismatch("deviation", None, "a deviation summary")
    dev = deviation_summary(DeviceConfig.from_dict(d["device"]).C, C_est)
    ck.matrix("deviation E", stored["E"], coords.matrix_from_json(dev["E"]))
    ck.eq("deviation max_abs", stored["max_abs"], dev["max_abs"])
    ck.eq("deviation max_abs_offdiag", stored["max_abs_offdiag"], dev["max_abs_offdiag"])


def read_scans(root: Path, name: str) -> list[Scan]:
    _, rows = read_table(root / name)
    grouped: dict[int, list[list[str]]] = {}
    for row in rows:
        grouped.setdefault(int(row[0]), []).append(row)
    scans = []
    for k in sorted(grouped):
        g = grouped[k]
        xs = np.array([float(r[5]) for r in g], dtype=F64)
        ys = np.array([float(r[6]) for r in g], dtype=F64)
        scans.append(Scan(g[0][1], int(g[0][2]), xs, ys, int(g[0][3]), float(g[0][4])))
    return scans


def _replay_translation(root: Path, d: Mapping, ck: _Checker) -> None:
    config = DeviceConfig.from_dict(d["device"])
    settings = TrackerSettings(**d["settings"])
    frame = Coordinates.identity(config.n)
    for it in d.get("iterations", []):
        k = it["index"]
        C_step, f0_step, periods = recompute_iteration(
            read_scans(root, it["scans"]), config.n, settings, config.feature_flux, config.bias_hints)
        ck.eq(f"iteration {k} periods", it["periods"], periods.tolist())
        ck.matrix(f"iteration {k} C_step", it["C_step"], C_step)
        ck.eq(f"iteration {k} f0_step", it["f0_step"], f0_step.tolist())
        off = C_step - np.diag(np.diag(C_step))
        ck.eq(f"iteration {k} max_offdiag", it["max_offdiag"], float(np.abs(off).max()) if config.n > 1 else 0.0)
        frame = frame.compose(C_step, f0_step)
        ck.matrix(f"iteration {k} C", it["C"], frame.C)
        ck.eq(f"iteration {k} f0", it["f0"], frame.f0.tolist())
    if not d.get("partial"):
        ck.matrix("C_ref", d["C_ref"], frame.C)
        ck.eq("f0_ref", d["f0_ref"], frame.f0.tolist())
        _replay_deviation(d, frame.C, ck)


def _replay_landscape(root: Path, d: Mapping, ck: _Checker) -> None:
    _replay_initial(d, ck)
    history = [h for h in _history(root) if h["context"] == "landscape"]
    _, rows = read_table(root / d["table"])
    params = d["params"]
    it = iter(history)
    for k, row in enumerate(rows):
        p = float(row[-1])
        if math.isnan(p):
            continue
        h = next(it, None)
        if h is None:
            raise Mismatch(f"{d['table']} row {k + 1}", p, "no recorded evaluation")
        omega = [float(v) for v in row[: len(params)]]
        ck.eq(f"{d['table']} row {k + 1} omega", omega, [h["omega"][str(j)] for j in params])
        ev = replay_evaluation(root, d, h, ck)
        ck.eq(f"{d['table']} row {k + 1} P", p, ev.score)
    if next(it, None) is not None:
        raise Mismatch(d["table"], "fewer rows", "more recorded evaluations")


def replay(path: str | Path) -> ReplayReport:
    """Recompute every stored result of a session from its raw sweeps.

    The report's ``mismatch`` names the first value that differs. Missing
    or malformed files count as mismatches too.
    """
    root = Path(path)
    report = ReplayReport(root, "?")
    ck = _Checker(report)
    try:
        d = load_session(root)
        report.method = d["method"]
        handler = {"periodicity": _replay_periodicity, "translation": _replay_translation,
                   "landscape": _replay_landscape}.get(d["method"])
        if handler is None:
            raise Mismatch("method", d["method"], "periodicity, translation or landscape")
        handler(root, d, ck)
    except Mismatch as exc:
        report.mismatch = exc
    except (OSError, ValueError, KeyError, IndexError, TypeError) as exc:
        report.mismatch = Mismatch(f"session files ({type(exc).__name__})", str(exc), "a readable session")
    return report
