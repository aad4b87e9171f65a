from __future__ import annotations

import csv
import json

import numpy as np
import pytest

from bcidagger.cli import PRESETS, ConfigError, main, parse_config
from bcidagger.harness import ExperimentConfig
from bcidagger.rates import StreamConfig


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_preset_values():
    spec = parse_config(preset="cursor_fig2")
    c = spec.config
    assert (c.n_neurons, c.T_max, c.n_repeats, c.K) == (10, 200, 100, 50)
    arm = parse_config(preset="arm_fig4").config
    assert (arm.n_neurons, arm.d_dof, arm.T_max, arm.n_repeats, arm.encoder_mode) == (75, 26, 150, 50, "rectified")
    assert arm.K >= 30


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_every_preset_is_valid(name):
    spec = parse_config(preset=name)
    assert isinstance(spec.config, (ExperimentConfig, StreamConfig))


def test_file_with_override(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# baseline\npreset=cursor_fig2  # figure 2\nK=5\n\nalgo = ogd\n")
    spec = parse_config(path, overrides=["eta0=0.002"])
    assert spec.config.K == 5 and spec.config.algo == "ogd" and spec.config.eta0 == 0.002
    assert spec.config.n_neurons == 10


def test_overrides_apply_last(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("K=5\n")
    assert parse_config(path, overrides=["K=7"]).config.K == 7


@pytest.mark.parametrize("text, where", [
    ("snr=-1\n", ":1"),
    ("K=3\nfoo=1\n", ":2"),
    ("K=3\nK=three\n", ":2"),
    ("K 3\n", ":1"),
    ("preset=nope\n", "unknown preset"),
])
def test_config_errors_exit_2(tmp_path, capsys, text, where):
    path = tmp_path / "bad.cfg"
    path.write_text(text)
    with pytest.raises(ConfigError, match=where):
        parse_config(path)
    assert main(["--config", str(path), "--out", str(tmp_path / "o")]) == 2
    assert where in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_missing_config_file(tmp_path):
    assert main(["--config", str(tmp_path / "none.cfg")]) == 2


def test_tuple_and_optional_values():
    spec = parse_config(overrides=["betas=1,0.5,0", "reg=none", "action_noise=0.02", "continue_from_end=true"])
    c = spec.config
    assert c.betas == (1.0, 0.5, 0.0) and c.reg is None and c.action_noise == 0.02 and c.continue_from_end


def test_full_cursor_preset_row_count_and_determinism(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["--preset", "cursor_fig2", "--out", str(a)]) == 0
    assert main(["--preset", "cursor_fig2", "--out", str(b)]) == 0
    rows = read_rows(a / "metrics.csv")
    assert len(rows) == 100 * 50
    assert list(rows[0]) == ["repeat", "k", "algorithm", "sse", "mse", "steps", "acquired", "regret", "gamma_k"]
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
    assert (a / "summary.csv").read_bytes() == (b / "summary.csv").read_bytes()
    manifest = json.loads((a / "manifest.json").read_text())
    assert manifest["config"]["n_repeats"] == 100 and manifest["seed"] == 0 and manifest["failed_repeats"] == []


def test_flags_and_outputs(tmp_path):
    out = tmp_path / "o"
    code = main(["--preset", "arm_correlation_fig5", "--repeats", "1", "--seed", "3", "--algo", "rls",
                 "--set", "K=2", "--set", "calibration_samples=50", "--trace", "--out", str(out)])
    assert code == 0
    rows = read_rows(out / "metrics.csv")
    assert len(rows) == 2 and rows[0]["algorithm"] == "rls"
    corr = read_rows(out / "correlation.csv")
    assert {int(r["dof"]) for r in corr} == set(range(26))
    # never-moved finger joints are reported as undefined, not NaN
    assert any(r["r"] == "" for r in corr)
    trace = read_rows(out / "traces" / "repeat_0000.csv")
    assert {"repeat", "k", "t", "p0", "v25", "oracle0", "decoded0", "executed0"} <= set(trace[0])
    assert json.loads((out / "manifest.json").read_text())["config"]["base_seed"] == 3


def test_sweep_outputs(tmp_path):
    out = tmp_path / "o"
    assert main(["--preset", "cursor_mismatch_fig7", "--repeats", "3", "--set", "K=4", "--out", str(out)]) == 0
    rows = read_rows(out / "sweep.csv")
    assert [float(r["noise_fraction"]) for r in rows] == [0.0, 0.25, 0.5, 1.0]
    assert len(read_rows(out / "noise_0.5" / "metrics.csv")) == 12


def test_rates_output_fit(tmp_path):
    out = tmp_path / "o"
    assert main(["--preset", "regret_rates_table1", "--set", "log2_k_max=7", "--repeats", "2",
                 "--out", str(out)]) == 0
    rows = read_rows(out / "rates.csv")
    ftl = [r for r in rows if r["algorithm"] == "ftl"]
    logk = np.log([float(r["K"]) for r in ftl])
    y = np.array([float(r["mean_regret"]) for r in ftl])
    slope, intercept = np.polyfit(logk, y, 1)
    assert float(ftl[0]["slope_logK"]) == pytest.approx(slope, rel=1e-9)
    assert float(ftl[0]["intercept_logK"]) == pytest.approx(intercept, rel=1e-9)
    assert main(["--preset", "regret_rates_table1", "--trace", "--out", str(out)]) == 2


def test_failed_repeat_exits_3(tmp_path, capsys):
    out = tmp_path / "o"
    assert main(["--preset", "cursor_fig2", "--repeats", "3", "--set", "K=3", "--set", "reg=0",
                 "--out", str(out)]) == 3
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["failed_repeats"]
    assert "failed" in capsys.readouterr().err


def test_io_failure_leaves_nothing(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["--preset", "cursor_fig2", "--repeats", "1", "--set", "K=1",
                 "--out", str(blocker / "out")]) == 3
    assert sorted(p.name for p in tmp_path.iterdir()) == ["file"]
