import csv
import json
import subprocess
import sys
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from wideflow.cli import EXIT_INVALID, EXIT_OK, OUTPUT_ENV, main
from wideflow.config import (ConfigError, DataConfig, GeometryConfig, PhysicsConfig, RunConfig,
                             SolverConfig, emit_config, parse_config)
from wideflow.trajectory_io import read_trajectory

SMALL = """\
geometry.nx = 8
geometry.ny = 4
solver.T_obs = 0.5
solver.eps_ladder = 0.4, 0.2
solver.kappa = 100
solver.korn_starts = 2
"""

ZERO = SMALL + "data.inlet = zero\n"

BAD_FLUX = """\
geometry.nx = 8
geometry.ny = 6
geometry.layout = two_outlets
data.fluxes = 0.3, 0.3
"""


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


def read_rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


# ----------------------------------------------------------- config

def test_minimal_config_defaults():
    cfg = parse_config("geometry.nx = 4\nphysics.r = 2.5\n")
    assert cfg.solver.eps_ladder == (0.4, 0.2, 0.1)
    assert cfg.solver.kappa == 1e4
    assert cfg.solver.grad_tol == 1e-6
    assert cfg.solver.time_step == 0.025


def test_r_below_two_rejected():
    with pytest.raises(ConfigError, match="r >= 2"):
        parse_config("physics.r = 1.5\n")


def test_unknown_key_and_section():
    with pytest.raises(ConfigError) as exc:
        parse_config("solver.tolerance = 1\nfoo.bar = 2\n")
    msgs = exc.value.errors
    assert any("line 1" in m and "unknown key" in m for m in msgs)
    assert any("line 2" in m and "unknown section" in m for m in msgs)


def test_duplicate_and_malformed_lines():
    with pytest.raises(ConfigError) as exc:
        parse_config("geometry.nx = 4\ngeometry.nx = 5\nnonsense\ngeometry.ny = abc\n")
    assert len(exc.value.errors) == 3


def test_comments_and_blank_lines():
    cfg = parse_config("# header\n\ngeometry.nx = 6  # cells\n")
    assert cfg.geometry.nx == 6


@given(st.integers(2, 40), st.integers(3, 20), st.floats(0.5, 5.0),
       st.sampled_from(["single", "two_outlets"]), st.floats(2.0, 3.9),
       st.lists(st.floats(0.01, 1.0), min_size=1, max_size=4, unique=True),
       st.booleans(), st.sampled_from(["rotational", "standard"]))
def test_round_trip(nx, ny, length, layout, r, ladder, reference, form):
    cfg = RunConfig(geometry=GeometryConfig(nx=nx, ny=ny, length=length, layout=layout),
                    physics=PhysicsConfig(r=r, form=form),
                    solver=SolverConfig(eps_ladder=tuple(sorted(ladder, reverse=True)),
                                        reference=reference),
                    data=DataConfig())
    again = parse_config(emit_config(cfg))
    assert again == cfg
    assert emit_config(again) == emit_config(cfg)


def test_round_trip_fluxes_and_forcing():
    cfg = replace(RunConfig(), geometry=GeometryConfig(layout="two_outlets"),
                  data=DataConfig(fluxes=(0.25, 2 / 3 - 0.25)),
                  physics=PhysicsConfig(forcing="constant:0.5,-0.1"))
    again = parse_config(emit_config(cfg))
    assert again == cfg
    assert again.physics.forcing_vector() == (0.5, -0.1)


# ----------------------------------------------------------- CLI

def test_cli_zero_data(tmp_path):
    cfg = write(tmp_path, "zero.cfg", ZERO)
    out = tmp_path / "out"
    assert main(["-q", "run", str(cfg), "--output", str(out)]) == EXIT_OK
    traj, _, meta = read_trajectory(out / "trajectory_wide_1.csv")
    assert np.all(traj.values == 0.0)
    ref, _, _ = read_trajectory(out / "trajectory_reference.csv")
    assert np.all(ref.values == 0.0)
    for row in read_rows(out / "energy.csv"):
        assert float(row["value"]) == 0.0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["status"] == "ok"
    assert meta["eps"] == 0.2


def test_cli_flux_mismatch(tmp_path, capsys):
    cfg = write(tmp_path, "bad.cfg", BAD_FLUX)
    out = tmp_path / "out"
    code = main(["-q", "run", str(cfg), "--output", str(out)])
    assert code == EXIT_INVALID
    err = capsys.readouterr().err
    assert "net boundary flux mismatch" in err
    rec = json.loads((out / "failure.json").read_text())
    assert rec["exit_code"] == EXIT_INVALID


def test_cli_bad_r(tmp_path, capsys):
    cfg = write(tmp_path, "r.cfg", "physics.r = 1.5\n")
    assert main(["validate", str(cfg)]) == EXIT_INVALID
    assert "r >= 2" in capsys.readouterr().err


def test_cli_missing_file(tmp_path):
    assert main(["-q", "validate", str(tmp_path / "nope.cfg")]) == EXIT_INVALID


def test_cli_validate(tmp_path, capsys):
    cfg = write(tmp_path, "v.cfg", SMALL)
    assert main(["validate", str(cfg)]) == EXIT_OK
    res = json.loads(capsys.readouterr().out)
    assert "flags" in json.dumps(res)


def test_cli_deterministic(tmp_path):
    cfg = write(tmp_path, "s.cfg", SMALL)
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["-q", "run", str(cfg), "--output", str(a)]) == EXIT_OK
    assert main(["-q", "run", str(cfg), "--output", str(b)]) == EXIT_OK
    names = sorted(p.name for p in a.iterdir())
    assert names == sorted(p.name for p in b.iterdir())
    for n in names:
        if n.endswith(".csv"):
            assert (a / n).read_bytes() == (b / n).read_bytes(), n
    rows = read_rows(a / "eps_distance.csv")
    assert [float(r["eps"]) for r in rows] == [0.4, 0.2]
    assert all(r["status"] == "converged" for r in rows)


def test_cli_output_precedence(tmp_path, monkeypatch):
    cfg = write(tmp_path, "z.cfg", ZERO + f"output.directory = {tmp_path / 'from_cfg'}\n")
    monkeypatch.setenv(OUTPUT_ENV, str(tmp_path / "from_env"))
    assert main(["-q", "run", str(cfg)]) == EXIT_OK
    assert (tmp_path / "from_env" / "summary.json").exists()
    assert not (tmp_path / "from_cfg").exists()
    assert main(["-q", "run", str(cfg), "--output", str(tmp_path / "flag")]) == EXIT_OK
    assert (tmp_path / "flag" / "summary.json").exists()


def test_cli_compare_and_diagnose(tmp_path, capsys):
    cfg = write(tmp_path, "s.cfg", SMALL)
    out = tmp_path / "o"
    assert main(["-q", "run", str(cfg), "--output", str(out)]) == EXIT_OK
    capsys.readouterr()
    a, b = out / "trajectory_wide_0.csv", out / "trajectory_wide_1.csv"
    assert main(["-q", "compare", str(a), str(a)]) == EXIT_OK
    res = json.loads(capsys.readouterr().out)
    assert res["l2_distance"] == 0.0
    assert main(["-q", "compare", str(a), str(b)]) == EXIT_OK
    res = json.loads(capsys.readouterr().out)
    rows = read_rows(out / "eps_distance.csv")
    # same grid, same window rules: the compare distance covers [0, T_obs]
    assert res["l2_distance"] > 0.0
    assert float(rows[1]["distance_to_previous"]) <= res["l2_distance"] * (1 + 1e-12)
    d = tmp_path / "diag"
    assert main(["-q", "diagnose", str(b), str(cfg), "--output", str(d)]) == EXIT_OK
    res = json.loads(capsys.readouterr().out)
    assert res["max_abs_mean_error"] <= 1e-12
    assert (d / "diagnose_energy.csv").exists() and (d / "diagnose_boundary.csv").exists()


def test_console_script(tmp_path):
    cfg = write(tmp_path, "bad.cfg", BAD_FLUX)
    proc = subprocess.run([sys.executable, "-m", "wideflow.cli", "-q", "run", str(cfg),
                           "--output", str(tmp_path / "o")], capture_output=True, text=True)
    assert proc.returncode == EXIT_INVALID
    assert "net boundary flux mismatch" in proc.stderr
