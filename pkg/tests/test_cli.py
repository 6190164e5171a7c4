import csv
import json
import subprocess
import sys

import pytest

from ergoflow.cli import run


def _cfg(tmp_path, data, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(data))
    return str(p)


def _run(tmp_path, *argv, out="out.csv"):
    path = tmp_path / out
    status = run([*argv, "--out", str(path), "--quiet"])
    side = path if path.suffix == ".json" else path.with_name(path.name + ".json")
    return status, path, json.loads(side.read_text())


def test_analyze_ou(tmp_path):
    status, out, side = _run(tmp_path, "analyze")
    assert status == 0 and side["exit_status"] == 0
    assert side["results"]["lambda"] == pytest.approx(1.7724539, abs=1e-7)
    assert side["versions"]["spec"] == "1"
    assert {"config_echo", "versions", "timings"} <= set(side)
    assert side["config_echo"]["dt"] == 1e-3 and side["config_echo"]["model"] == "ou"
    with open(out) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["x", "psi2", "log_psi2", "s", "pi_cdf", "pi_pdf", "sharp_scale"]
    # 17 significant digits round-trip
    assert float(rows[8193][0]) == 0.0
    assert len(rows) == 16386


def test_analyze_rejects_zero_drift(tmp_path):
    cfg = _cfg(tmp_path, {"model": {"sigma": "1", "m": "0"}})
    status, _, side = _run(tmp_path, "analyze", "--config", cfg)
    assert status == 2
    assert "Λ diverges" in side["results"]["reason"]


@pytest.mark.parametrize(
    "data, path",
    [
        ({"dt": "fast"}, "config.dt"),
        ({"dt": -1}, "config.dt"),
        ({"n_grid": 1001}, "config.n_grid"),
        ({"model": {"kind": "ou", "params": {"beta": "x"}}}, "config.model.params.beta"),
        ({"model": {"sigma": "1"}}, "config.model"),
        ({"bogus": 1}, "config.bogus"),
        ({"params": {"x0": "a"}}, "config.params.x0"),
    ],
)
def test_config_errors_name_the_field(tmp_path, data, path):
    cfg = _cfg(tmp_path, data)
    status, _, side = _run(tmp_path, "simulate", "--config", cfg)
    assert status == 2
    assert side["results"]["error"].startswith(path)


def test_invalid_json(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{")
    status, _, side = _run(tmp_path, "analyze", "--config", str(p))
    assert status == 2 and "invalid JSON" in side["results"]["error"]


def test_expression_error_is_a_validation_failure(tmp_path):
    cfg = _cfg(tmp_path, {"model": {"sigma": "1", "m": "-x +* 2"}})
    status, _, side = _run(tmp_path, "analyze", "--config", cfg)
    assert status == 2


def test_off_grid_time(tmp_path):
    status, _, side = _run(tmp_path, "simulate", "--t", "0.0005")
    assert status == 2 and "not a multiple" in side["results"]["error"]


def test_unknown_command():
    with pytest.raises(SystemExit) as info:
        run(["frobnicate"])
    assert info.value.code == 2


def test_nonconvergence_exit_code(tmp_path):
    status, _, side = _run(tmp_path, "sample-invariant", "--n", "5", "--t", "1")
    assert status == 3
    assert side["results"]["diagnostics"]["unconverged"] > 0


def test_seed_override_is_echoed(tmp_path):
    _, _, side = _run(tmp_path, "dump-noise", "--seed", "42", "--count", "3")
    assert side["config_echo"]["seed"] == 42


def test_dump_noise_format(tmp_path):
    _, out, _ = _run(tmp_path, "dump-noise", "--count", "4")
    rows = list(csv.reader(open(out)))
    assert rows[0] == ["index", "side", "increment"]
    assert [r[1] for r in rows[1:]] == ["+"] * 4 + ["-"] * 4


def test_simulate_format(tmp_path):
    _, out, side = _run(tmp_path, "simulate", "--t", "0.05", "--paths", "2")
    rows = list(csv.reader(open(out)))
    assert rows[0] == ["path_id", "t", "member_id", "x", "log_jac", "status"]
    assert len(rows) == 1 + 2 * 6 * 3
    assert side["results"]["paths"] == 2


COMMANDS = [
    ("analyze",),
    ("simulate", "--t", "0.2", "--paths", "2"),
    ("focusing", "--t", "20", "--paths", "2"),
    ("gamma", "--method", "quadrature"),
    ("exit-prob", "--n", "100", "--x0=-0.5,0,0.5"),
    ("sample-invariant", "--n", "6"),
    ("attractor",),
    ("gap",),
    ("spde-residual", "--t", "0.1"),
    ("oracle-check", "--seeds", "10"),
    ("dump-noise", "--count", "10"),
]


@pytest.mark.parametrize("argv", COMMANDS, ids=[c[0] for c in COMMANDS])
def test_rerun_is_byte_identical(tmp_path, argv):
    out = "a.json" if argv[0] in ("gamma", "gap") else "a.csv"
    _run(tmp_path, *argv, out=out)
    first = {p.name: p.read_bytes() for p in tmp_path.iterdir()}
    _run(tmp_path, *argv, out=out)
    second = {p.name: p.read_bytes() for p in tmp_path.iterdir()}
    assert first == second


def test_worker_count_does_not_change_results(tmp_path, monkeypatch):
    cfg = _cfg(tmp_path, {"params": {"T_schedule": [12, 16]}})
    argv = ("sample-invariant", "--n", "520", "--config", cfg)
    outputs = []
    for w in ("1", "2"):
        monkeypatch.setenv("ERGOFLOW_WORKERS", w)
        d = tmp_path / w
        d.mkdir()
        status, out, _ = _run(d, *argv)
        assert status == 0
        outputs.append((out.read_bytes(), (d / "out.csv.json").read_bytes()))
    assert outputs[0] == outputs[1]


def test_console_script_entry_point(tmp_path):
    out = tmp_path / "n.csv"
    proc = subprocess.run(
        [sys.executable, "-m", "ergoflow", "dump-noise", "--count", "2", "--out", str(out), "--quiet"],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0
    assert out.exists()
