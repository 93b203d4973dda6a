"""Command-line interface and SVG rendering."""
import json

import numpy as np
import pytest

from swarmshape import cli
from swarmshape.render import MODE_COLORS, TraceError, read_trace, render_svg


def _write_cfg(tmp_path, text):
    p = tmp_path / "scenario.cfg"
    p.write_text(text)
    return str(p)


SMALL_SHAPE = """
scenario = shape
n_robots = 6
shape = dart
max_time = 1.0
init_radius = 4.0
"""


def test_shape_command_runs_and_prints_summary(tmp_path, capsys):
    cfg = _write_cfg(tmp_path, SMALL_SHAPE)
    rc = cli.main(["shape", "--config", cfg, "--seed", "3",
                   "--out", str(tmp_path / "out")])
    assert rc == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["scenario"] == "shape"
    assert (tmp_path / "out" / "trace.csv").exists()


def test_out_dir_env_fallback(tmp_path, capsys, monkeypatch):
    cfg = _write_cfg(tmp_path, SMALL_SHAPE)
    monkeypatch.setenv("SWARM_RELLOC_OUT", str(tmp_path / "envout"))
    assert cli.main(["shape", "--config", cfg, "--seed", "1"]) == 0
    assert (tmp_path / "envout" / "summary.json").exists()


def test_max_time_override(tmp_path, capsys):
    cfg = _write_cfg(tmp_path, SMALL_SHAPE)
    rc = cli.main(["shape", "--config", cfg, "--seed", "1",
                   "--max-time", "0.5", "--out", str(tmp_path / "o")])
    assert rc == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["stop_time"] <= 0.5 + 1e-9


def test_bad_config_exits_2(tmp_path, capsys):
    cfg = _write_cfg(tmp_path, "scenario = shape\nn_robots = -4\n")
    assert cli.main(["shape", "--config", cfg]) == 2
    assert "error:" in capsys.readouterr().err


def test_missing_config_file_exits_2(tmp_path, capsys):
    assert cli.main(["shape", "--config", str(tmp_path / "nope.cfg")]) == 2


def test_check_theorems_all_pass(capsys):
    rc = cli.main(["check-theorems", "--seed", "0"])
    out = capsys.readouterr().out.strip().splitlines()
    assert rc == 0
    assert len(out) == 3
    assert all(line.startswith("PASS") for line in out)


def test_check_contraction_zero_violations():
    ok, detail = cli.check_contraction(seed=7, trials=20)
    assert ok, detail


def test_check_conditioning_near_one():
    ok, detail = cli.check_conditioning()
    assert ok, detail


def test_check_agreement_inside_bound():
    ok, detail = cli.check_agreement(seed=5)
    assert ok, detail


def test_stat_batch_aggregate(tmp_path, capsys):
    cfg = _write_cfg(tmp_path, SMALL_SHAPE)
    rc = cli.main(["stat-batch", "--config", cfg, "--runs", "2",
                   "--seed", "3", "--out", str(tmp_path / "batch")])
    assert rc == 0
    agg = json.loads((tmp_path / "batch" / "aggregate.json").read_text())
    assert agg["runs"] == 2
    assert set(agg["metrics"]) == {"coverage", "entering", "uniformity"}
    assert (tmp_path / "batch" / "run000" / "trace.csv").exists()
    assert (tmp_path / "batch" / "run001" / "trace.csv").exists()


def test_docking_cli_noiseless(tmp_path, capsys):
    rc = cli.main(["docking", "--seed", "0", "--out", str(tmp_path / "d")])
    assert rc == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["tracking_errors"][0] < 0.02


# ----------------------------------------------------------------------
# rendering


def test_read_trace_roundtrip(tmp_path):
    p = tmp_path / "trace.csv"
    p.write_text("t,id,mode,px,py,vx,vy\n"
                 "0.0,0,idle,0.0,0.0,0,0\n"
                 "0.0,1,forming,1.0,2.0,0,0\n"
                 "0.1,1,forming,1.1,2.0,0,0\n")
    tracks = read_trace(str(p))
    assert set(tracks) == {0, 1}
    assert len(tracks[1]) == 2
    assert tracks[1][1]["t"] == pytest.approx(0.1)
    assert tracks[1][1]["x"] == pytest.approx(1.1)


def test_read_trace_missing_columns(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("t,id,px\n0.0,0,1.0\n")
    with pytest.raises(TraceError):
        read_trace(str(p))


def test_read_trace_empty(tmp_path):
    p = tmp_path / "empty.csv"
    p.write_text("")
    with pytest.raises(TraceError):
        read_trace(str(p))


def test_render_svg_structure(tmp_path):
    tracks = {0: [{"t": 0.0, "mode": "idle", "x": 0.0, "y": 0.0}],
              1: [{"t": 0.0, "mode": "agreeing", "x": 1.0, "y": 1.0},
                  {"t": 0.1, "mode": "forming", "x": 2.0, "y": 1.5}]}
    svg = render_svg(tracks)
    assert "<svg" in svg
    assert svg.rstrip().endswith("</svg>")
    assert "polyline" in svg
    assert MODE_COLORS["forming"] in svg


def test_render_cli_from_run(tmp_path, capsys):
    cfg = _write_cfg(tmp_path, SMALL_SHAPE)
    assert cli.main(["shape", "--config", cfg, "--seed", "2",
                     "--out", str(tmp_path / "r")]) == 0
    capsys.readouterr()
    rc = cli.main(["render", str(tmp_path / "r" / "trace.csv"),
                   "--shape", "dart", "--n-robots", "6"])
    assert rc == 0
    svg = (tmp_path / "r" / "trace.svg").read_text()
    assert "<svg" in svg and "rect" in svg


def test_render_missing_trace_exits_2(tmp_path, capsys):
    assert cli.main(["render", str(tmp_path / "none.csv")]) == 2
