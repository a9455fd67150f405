import csv

import pytest

from roadfl.cli import main

from conftest import write_tiny_scenario


def run_cli(*args):
    return main([str(a) for a in args])


def test_run_writes_outputs(tmp_path):
    cfg = write_tiny_scenario(tmp_path / "cfg")
    out = tmp_path / "out"
    assert run_cli("run", "--config", cfg, "--seed", 3, "--out", out) == 0
    assert (out / "rounds.csv").exists()
    assert (out / "report.json").exists()
    assert (out / "rmse.pdf").exists()
    with open(out / "rounds.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["round", "volunteers", "selected", "received", "status",
                       "rmse_kmh"]
    assert len(rows) == 1 + 3  # header + three rounds


def test_run_twice_byte_identical_csvs(tmp_path):
    cfg = write_tiny_scenario(tmp_path / "cfg")
    out1, out2 = tmp_path / "a", tmp_path / "b"
    run_cli("run", "--config", cfg, "--seed", 5, "--out", out1)
    run_cli("run", "--config", cfg, "--seed", 5, "--out", out2)
    assert (out1 / "rounds.csv").read_bytes() == (out2 / "rounds.csv").read_bytes()
    assert (out1 / "report.json").read_bytes() == (out2 / "report.json").read_bytes()


def test_run_with_trajectories_and_attack_log(tmp_path):
    cfg = write_tiny_scenario(tmp_path / "cfg", attack_mode="single")
    out = tmp_path / "out"
    run_cli("run", "--config", cfg, "--seed", 3, "--out", out, "--trajectories")
    assert (out / "attack_log.csv").exists()
    with open(out / "trajectories.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["time", "vehicle", "link", "position_m", "speed_mps"]
    assert len(rows) > 10
    with open(out / "attack_log.csv") as fh:
        arows = list(csv.reader(fh))
    assert arows[0] == ["round", "mode", "identities_emitted", "selected_count"]


def test_run_with_centralized_baseline(tmp_path):
    cfg = write_tiny_scenario(tmp_path / "cfg")
    out = tmp_path / "out"
    run_cli("run", "--config", cfg, "--seed", 3, "--out", out, "--centralized")
    with open(out / "centralized.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["epoch", "rmse_kmh"]
    assert len(rows) > 1


def test_unwritable_out_dir_fails_before_simulation(tmp_path):
    cfg = write_tiny_scenario(tmp_path / "cfg")
    with pytest.raises(SystemExit, match="not writable"):
        run_cli("run", "--config", cfg, "--out", "/proc/nope")


def test_compare_cli(tmp_path):
    cfg = write_tiny_scenario(tmp_path / "cfg")
    a, b = tmp_path / "a", tmp_path / "b"
    run_cli("run", "--config", cfg, "--seed", 5, "--out", a)
    run_cli("run", "--config", cfg, "--seed", 5, "--out", b)
    out = tmp_path / "cmp"
    assert run_cli("compare", a, b, "--out", out) == 0
    assert (out / "comparison.csv").exists()
    assert (out / "comparison.pdf").exists()
    with open(out / "comparison.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0][0] == "scenario"
    assert float(rows[1][2]) == 0.0  # same run: zero delta


def test_sweep_cli(tmp_path):
    cfg = write_tiny_scenario(tmp_path / "cfg")
    out = tmp_path / "sweep"
    assert run_cli("sweep", "--config", cfg, "--seeds", "0..2", "--out", out) == 0
    assert (out / "sweep_summary.csv").exists()
    assert (out / "sweep.pdf").exists()
    for seed in (0, 1, 2):
        assert (out / f"seed_{seed}" / "rounds.csv").exists()
    with open(out / "sweep_summary.csv") as fh:
        rows = list(csv.reader(fh))
    assert len(rows) == 4


def test_seed_range_parsing():
    from roadfl.cli import _parse_seed_range
    assert _parse_seed_range("3..6") == [3, 4, 5, 6]
    assert _parse_seed_range("4") == [4]
    with pytest.raises(Exception):
        _parse_seed_range("9..2")


def test_run_save_model_checkpoint(tmp_path):
    from roadfl.learner import load_model
    cfg = write_tiny_scenario(tmp_path / "cfg")
    out = tmp_path / "out"
    run_cli("run", "--config", cfg, "--seed", 3, "--out", out, "--save-model")
    model = load_model(out / "model.json")
    assert model.layout.hidden == (4,)
    assert model.values.size == model.layout.n_params
