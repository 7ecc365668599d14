from __future__ import annotations

import json
import shutil
from pathlib import Path

import numpy as np
import pytest

from fluxcal import cli
from fluxcal.calibrator import periodicity_optimizer_config
from fluxcal.device import PRESETS, SimulatedDevice
from fluxcal.session import (
    InitialEstimate,
    fmt,
    load_session,
    read_table,
    replay,
    run_periodicity,
    run_translation,
    unique_dir,
)

pytestmark = pytest.mark.usefixtures("quiet")

SMALL = ["--budget", "8", "--n-init", "4"]


def run_cli(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def full_session(tmp_path_factory):
    root = tmp_path_factory.mktemp("full")
    assert cli.main(["calibrate", "--seed", "7", "--out", str(root)]) == 0
    return root / "periodicity-paper-3loop-s7"


def tree(path: Path) -> dict[str, bytes]:
    return {str(p.relative_to(path)): p.read_bytes() for p in sorted(path.rglob("*")) if p.is_file()}


# -- calibrate ---------------------------------------------------------------


def test_full_calibration_reaches_target(full_session):
    d = load_session(full_session)
    assert d["schema_version"] == 1 and not d["partial"]
    assert d["deviation"]["max_abs"] < 3e-3
    assert all(loop["n_evaluations"] == 120 for loop in d["loops"].values())


def test_calibrate_prints_summary(tmp_path, capsys):
    code, out, _ = run_cli(capsys, "calibrate", "--seed", "1", "--out", tmp_path, *SMALL)
    assert code == 0
    assert "C estimate:" in out and "deviation" in out
    assert out.count("(8 evaluations)") == 3


def test_unknown_preset_lists_choices(tmp_path, capsys):
    code, _, err = run_cli(capsys, "calibrate", "--preset", "bogus", "--out", tmp_path)
    assert code == 2
    assert all(name in err for name in PRESETS)
    assert not any(tmp_path.iterdir())


@pytest.mark.parametrize("argv", [
    [],
    ["calibrate", "--method", "magic"],
    ["calibrate", "--budget", "3", "--n-init", "5"],
    ["calibrate", "--iterations", "0", "--method", "translation"],
    ["landscape", "--params", "1"],
    ["landscape", "--params", "0", "--grid=-0.1:0.1:3"],
    ["landscape", "--params", "1", "2", "--grid=-0.1:0.1:3"],
    ["landscape", "--params", "1", "--grid", "a:b:c"],
])
def test_usage_errors_exit_2(tmp_path, capsys, argv):
    try:
        code = cli.main([*argv, "--out", str(tmp_path)] if argv else argv)
    except SystemExit as exc:
        code = exc.code
    capsys.readouterr()
    assert code == 2


def test_method_both_prints_comparison(tmp_path, capsys):
    code, out, _ = run_cli(capsys, "calibrate", "--method", "both", "--seed", "2", "--out", tmp_path, *SMALL)
    assert code == 0
    assert "comparison" in out
    table = out.split("comparison", 1)[1].splitlines()[2:]
    rows = [line.split() for line in table if line.strip()]
    assert [r[0] for r in rows] == ["periodicity", "translation"]
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["periodicity-paper-3loop-s2", "translation-paper-3loop"]
    for name in names:
        assert replay(tmp_path / name).ok


def test_out_env_and_flag_precedence(tmp_path, capsys, monkeypatch):
    env, flag = tmp_path / "env", tmp_path / "flag"
    monkeypatch.setenv("FLUXCAL_OUT", str(env))
    assert run_cli(capsys, "calibrate", "--seed", "3", *SMALL)[0] == 0
    assert (env / "periodicity-paper-3loop-s3" / "session.json").exists()
    assert run_cli(capsys, "calibrate", "--seed", "3", "--out", flag, *SMALL)[0] == 0
    assert (flag / "periodicity-paper-3loop-s3" / "session.json").exists()
    # a second run never overwrites the first
    assert run_cli(capsys, "calibrate", "--seed", "3", *SMALL)[0] == 0
    assert (env / "periodicity-paper-3loop-s3-2").is_dir()


def test_sessions_are_byte_identical(tmp_path, capsys):
    for sub in ("a", "b"):
        assert run_cli(capsys, "calibrate", "--seed", "4", "--out", tmp_path / sub, *SMALL)[0] == 0
    a = tree(tmp_path / "a" / "periodicity-paper-3loop-s4")
    b = tree(tmp_path / "b" / "periodicity-paper-3loop-s4")
    assert a.keys() == b.keys() and a == b


def test_init_from_session(tmp_path, capsys, full_session):
    code, _, _ = run_cli(capsys, "calibrate", "--init-from", full_session, "--out", tmp_path, *SMALL)
    assert code == 0
    d = load_session(next(tmp_path.iterdir()))
    assert d["initial"]["source"] == "session"
    code, _, err = run_cli(capsys, "calibrate", "--init-from", tmp_path / "missing", "--out", tmp_path)
    assert code == 2 and "cannot start from" in err


# -- landscape ---------------------------------------------------------------


def test_landscape_1d_table(tmp_path, capsys):
    code, out, _ = run_cli(capsys, "landscape", "--params", "1", "--grid=-0.1:0.1:21", "--center", "optimum",
                           "--out", tmp_path)
    assert code == 0
    path = next(tmp_path.iterdir())
    header, rows = read_table(path / "landscape" / "loop0_1d.csv")
    assert header == ["omega_1_0", "P"] and len(rows) == 21
    d = load_session(path)
    center = d["center"]["1"]
    best = max(rows, key=lambda r: float(r[1]))
    assert abs(float(best[0]) - center) <= 0.01 + 1e-12
    assert replay(path).ok


def test_landscape_2d_table(tmp_path, capsys):
    code, _, _ = run_cli(capsys, "landscape", "--loop", "0", "--params", "1", "2", "--grid=-0.1:0.1:11",
                         "--grid=-0.1:0.1:11", "--center", "optimum", "--out", tmp_path)
    assert code == 0
    path = next(tmp_path.iterdir())
    header, rows = read_table(path / "landscape" / "loop0_2d.csv")
    assert header == ["omega_1_0", "omega_2_0", "P"] and len(rows) == 121
    values = np.array([[float(v) for v in r] for r in rows])
    assert np.all(np.abs(values[:, 2]) <= 1.0)
    d = load_session(path)
    best = values[np.argmax(values[:, 2]), :2]
    np.testing.assert_allclose(best, [d["center"]["1"], d["center"]["2"]], atol=0.02 + 1e-12)


# -- replay ------------------------------------------------------------------


def test_replay_fresh_session(full_session, capsys):
    code, out, _ = run_cli(capsys, "replay", full_session)
    assert code == 0 and out.startswith("replay ok")


def test_replay_detects_tampered_sweep(full_session, tmp_path, capsys):
    copy = tmp_path / "s"
    shutil.copytree(full_session, copy)
    sweep = copy / "sweeps" / "000.csv"
    lines = sweep.read_text().splitlines()
    cells = lines[5].split(",")
    cells[1] = fmt(float(cells[1]) + 1e-3)
    lines[5] = ",".join(cells)
    sweep.write_text("\n".join(lines) + "\n")
    code, out, _ = run_cli(capsys, "replay", copy)
    assert code == 1
    assert out.startswith("replay FAILED") and "sweeps/000.csv" in out


def test_replay_detects_tampered_result(full_session, tmp_path):
    copy = tmp_path / "s"
    shutil.copytree(full_session, copy)
    d = json.loads((copy / "session.json").read_text())
    d["loops"]["1"]["period"] += 1e-15
    (copy / "session.json").write_text(json.dumps(d))
    report = replay(copy)
    assert not report.ok and "period" in report.mismatch.where


def test_replay_missing_files(tmp_path, full_session):
    assert not replay(tmp_path).ok
    copy = tmp_path / "s"
    shutil.copytree(full_session, copy)
    (copy / "sweeps" / "010.csv").unlink()
    assert not replay(copy).ok


def test_partial_session_replays_completed_loops(tmp_path, preset3):
    class Failing(SimulatedDevice):
        def measure(self, channels=None):
            if self.measurement_count >= 4000:
                raise RuntimeError("device lost")
            return super().measure(channels)

    init = InitialEstimate.perturbed(preset3, 1)
    opt = periodicity_optimizer_config(3, seed=1, n_init=5, n_total=15)
    path = tmp_path / "partial"
    _, path = run_periodicity(path, preset3, init, opt, backend=Failing(preset3))
    d = load_session(path)
    assert d["partial"] and d["C_estimate"] is None
    incomplete = [int(k) for k, v in d["loops"].items() if not v["complete"]]
    assert incomplete
    report = replay(path)
    assert report.ok and report.skipped_loops == incomplete and report.checked > 0


def test_translation_session_replays(tmp_path, preset3):
    res, path = run_translation(tmp_path / "t", preset3, max_iters=2)
    d = load_session(path)
    assert len(d["iterations"]) == len(res.iterations)
    assert (path / "sweeps" / "translation_01.csv").exists()
    assert replay(path).ok


def test_unique_dir(tmp_path):
    assert unique_dir(tmp_path, "x") == tmp_path / "x"
    (tmp_path / "x").mkdir()
    assert unique_dir(tmp_path, "x") == tmp_path / "x"
    (tmp_path / "x" / "f").write_text("")
    assert unique_dir(tmp_path, "x") == tmp_path / "x-2"


def test_fmt_round_trips():
    for x in (0.1, 1 / 3, -2.5e-300, 1e300):
        assert float(fmt(x)) == x
    assert fmt(float("nan")) == "nan"
