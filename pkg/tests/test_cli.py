import csv
import io
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from cablegff import __version__
from cablegff.cli import COMMANDS, run


def parse_csv(text):
    lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(io.StringIO("\n".join(lines))))


def header(text):
    meta = {}
    for ln in text.splitlines():
        if ln.startswith("# "):
            k, _, v = ln[2:].partition("=")
            meta[k] = v
    return meta


def test_help_and_version(capsys):
    assert run(["--help"]) == 0
    assert "crossing" in capsys.readouterr().out
    assert run(["--version"]) == 0
    assert __version__ in capsys.readouterr().out
    for name in COMMANDS:
        assert run([name, "--help"]) == 0
    capsys.readouterr()


def test_config_errors_exit_1(capsys, tmp_path):
    assert run([]) == 1
    assert run(["no-such-command"]) == 1
    assert run(["crossing", "--reps", "x"]) == 1
    assert run(["crossing", "--reps", "0"]) == 1
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"bogus": 1}))
    assert run(["crossing", "--config", str(cfg)]) == 1
    cfg.write_text("not json")
    assert run(["crossing", "--config", str(cfg)]) == 1
    assert run(["crossing", "--config", str(tmp_path / "missing.json")]) == 1
    assert run(["first-passage", "--b", "-1"]) == 1
    capsys.readouterr()


def test_green_dump(tmp_path, capsys):
    path = tmp_path / "g.csv"
    assert run(["green", "--d", "3", "--n", "2", "--dump", str(path)]) == 0
    row = parse_csv(capsys.readouterr().out)[0]
    assert row["symmetric"] == "True" and float(row["min_eigenvalue"]) > 0
    entries = list(csv.DictReader(io.StringIO(path.read_text())))
    M = np.zeros((125, 125))
    for e in entries:
        M[int(e["row"]), int(e["col"])] = float(e["value"])
    assert len(entries) == 125 * 125
    assert np.array_equal(M, M.T) and np.linalg.eigvalsh(M).min() > 0
    assert not [p for p in os.listdir(tmp_path) if p.endswith(".tmp")]


def test_crossing_row_and_echo(capsys):
    assert run(["crossing", "--d", "3", "--n", "3", "--h", "0", "--reps", "2000", "--seed", "7"]) == 0
    out = capsys.readouterr().out
    meta = header(out)
    assert meta["version"] == __version__ and meta["seed"] == "7"
    rows = parse_csv(out)
    assert len(rows) == 1
    assert list(rows[0])[:11] == ["experiment", "d", "N", "h", "reps", "seed", "p_hat", "stderr", "ci_lo",
                                  "ci_hi", "acceptance_rate"]
    r = rows[0]
    assert float(r["ci_lo"]) <= float(r["p_hat"]) <= float(r["ci_hi"])
    echo = json.loads(meta["config"])
    assert echo["command"] == "crossing" and echo["reps"] == 2000 and echo["enclosure"] == 1.5


def test_config_precedence_and_replay(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"m": 0.5, "b": 2.0, "T": 1.0, "seed": 3}))
    assert run(["first-passage", "--config", str(cfg), "--b", "1.0", "--format", "json"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["config"]["m"] == 0.5  # from the file
    assert doc["config"]["b"] == 1.0  # flag beats file
    assert doc["config"]["steps"] == 10_000  # default
    assert doc["seed"] == 3
    # replaying the echoed configuration reproduces the output exactly
    echo = dict(doc["config"])
    echo.pop("command")
    replay = tmp_path / "replay.json"
    replay.write_text(json.dumps(echo))
    assert run(["first-passage", "--config", str(replay), "--format", "json"]) == 0
    assert json.loads(capsys.readouterr().out) == doc


def test_first_passage_value(capsys):
    assert run(["first-passage", "--format", "json"]) == 0
    row = json.loads(capsys.readouterr().out)["rows"][0]
    assert abs(row["probability"] - 0.31731050786291404) < 1e-12


def test_output_file_is_written_atomically(tmp_path, capsys):
    out = tmp_path / "k.json"
    out.write_text("old")
    assert run(["villain-kernel-check", "--format", "json", "--out", str(out)]) == 0
    assert capsys.readouterr().out == ""
    doc = json.loads(out.read_text())
    assert doc["rows"]
    assert sorted(os.listdir(tmp_path)) == ["k.json"]


def test_failed_run_leaves_previous_output(tmp_path, capsys):
    out = tmp_path / "r.csv"
    out.write_text("previous")
    assert run(["crossing", "--reps", "0", "--out", str(out)]) == 1
    assert out.read_text() == "previous"
    capsys.readouterr()


def test_flagged_estimate_exits_2(capsys):
    code = run(["iic-scan", "--d", "2", "--n", "4", "--radii", "2,3", "--h", "1e6", "--reps", "100"])
    assert code == 2
    rows = parse_csv(capsys.readouterr().out)
    assert all(r["flagged"] == "True" for r in rows)


def test_same_seed_same_output(capsys):
    args = ["bridge-check", "--reps", "5000", "--steps", "256", "--seed", "11", "--format", "json"]
    assert run(args) == 0
    a = capsys.readouterr().out
    assert run(args) == 0
    assert capsys.readouterr().out == a


def test_module_entry_point(tmp_path):
    env = dict(os.environ, CABLEGFF_WORKERS="1")
    proc = subprocess.run([sys.executable, "-m", "cablegff", "qv-check", "--format", "json"],
                          capture_output=True, text=True, env=env, cwd=tmp_path, timeout=300)
    assert proc.returncode == 0, proc.stderr
    assert json.loads(proc.stdout)["rows"]


@pytest.mark.parametrize("argv", [
    ["harmonic", "--d", "2", "--n", "3"],
    ["gff-cov-check", "--reps", "2000"],
    ["qv-check"],
    ["villain-sample", "--n", "3", "--sweeps", "5"],
    ["epsilon-i", "--d", "2", "--n", "5", "--r-in", "2", "--r-out", "4", "--reps", "200"],
    ["iic-height-scan", "--d", "2", "--n", "4", "--schedule", "0.2,0", "--reps", "300"],
    ["chem-distance", "--d", "2", "--n", "8", "--reps", "200", "--h", "-0.3"],
    ["crossing-scaling", "--d", "2", "--Ns", "2,3,4", "--reps", "300"],
    ["tau-bounds", "--d", "2", "--K", "6", "--N", "2", "--reps", "200"],
    ["villain-ratio", "--n", "3", "--reps", "4", "--sweeps", "20", "--burn-in", "5"],
    ["villain-iic-scan", "--sizes", "3", "--alphas", "1.5", "--reps", "4", "--sweeps", "20", "--burn-in", "5"],
    ["qm-scan", "--reps", "300", "--heights", "0"],
    ["acceptance", "--quick", "--only", "5,6,13"],
])
def test_subcommands_smoke(argv, capsys):
    assert run(argv) == 0
    assert parse_csv(capsys.readouterr().out)
