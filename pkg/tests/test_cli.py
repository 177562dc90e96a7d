import csv
import json
import subprocess
import sys

import numpy as np
import pytest
import tomli

from cbpl import cli
from cbpl.data_gen import load_dataset, save_dataset, synth_prices
from cbpl.game import GameTrace, load_policy
from cbpl.market_sim import ConstraintSpec, save_prices
from cbpl.rollout import crp_fn, simulate

SMALL = """
seed = 4
[market]
n_stocks = 3
n_days = 200
price_seed = 2
drift = [0.01, 0.005, 0.0]
vol = [0.08, 0.05, 0.03]
box_low = 0.05
[behavior]
concentration = 1.0
[dataset]
episodes = 20
horizon = 3
[fqi]
iterations = 2
gamma = 0.5
hidden_sizes = [8]
epochs = 3
restarts = 2
steps = 20
[fqe]
iterations = 2
gamma = 0.5
hidden_sizes = [8]
epochs = 3
[game]
max_iterations = 2
bound = 2.0
eta = 5.0
omega = 0.0001
[report]
rollout_episodes = 40
"""


def run(argv, capsys):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def small(tmp_path_factory):
    """Config, dataset and training artifacts for the small setup, built once."""
    root = tmp_path_factory.mktemp("cli")
    conf = root / "small.toml"
    conf.write_text(SMALL, encoding="utf-8")
    assert cli.main(["gen-data", "--config", str(conf), "--out", str(root / "data.bin")]) == 0
    assert cli.main(["train", "--config", str(conf), "--data", str(root / "data.bin"),
                     "--out", str(root / "run")]) == 0
    return root, conf


def test_gen_data_echoes_config_and_writes_sidecar(tmp_path, capsys, small):
    _, conf = small
    code, out, err = run(["gen-data", "--config", conf, "--out", tmp_path / "d.bin"], capsys)
    assert code == 0
    echoed = tomli.loads(out)
    assert echoed["seed"] == 4 and echoed["dataset"]["episodes"] == 20
    assert echoed["fqi"]["cost_sign"] == -1.0  # defaults are echoed too
    assert "wrote 60 transitions" in err
    side = json.loads((tmp_path / "d.bin.json").read_text())
    assert side["seed"] == 4 and side["config"] == echoed
    assert len(load_dataset(tmp_path / "d.bin")) == 60


def test_gen_data_deterministic_and_seed_override(tmp_path, capsys, small):
    root, conf = small
    run(["gen-data", "--config", conf, "--out", tmp_path / "a.bin"], capsys)
    assert (tmp_path / "a.bin").read_bytes() == (root / "data.bin").read_bytes()
    run(["gen-data", "--config", conf, "--out", tmp_path / "b.bin", "--seed", 5], capsys)
    assert (tmp_path / "b.bin").read_bytes() != (root / "data.bin").read_bytes()
    assert json.loads((tmp_path / "b.bin.json").read_text())["seed"] == 5


@pytest.mark.parametrize("episodes,horizon,size", [(257, 4, 1028), (514, 4, 2056)])
def test_gen_data_sizes(tmp_path, capsys, episodes, horizon, size):
    conf = tmp_path / "c.toml"
    conf.write_text(f"[market]\nbox_low = 0.05\n[dataset]\nepisodes = {episodes}\nhorizon = {horizon}\n")
    assert run(["gen-data", "--config", conf, "--out", tmp_path / "d.bin"], capsys)[0] == 0
    assert len(load_dataset(tmp_path / "d.bin")) == size


def test_gen_data_ten_stocks(tmp_path, capsys):
    conf = tmp_path / "c.toml"
    conf.write_text("[market]\nn_stocks = 10\nbox_low = 0.02\nbox_high = 0.3\n[dataset]\nepisodes = 10\nhorizon = 4\n")
    assert run(["gen-data", "--config", conf, "--out", tmp_path / "d.bin"], capsys)[0] == 0
    d = load_dataset(tmp_path / "d.bin")
    assert d.n_stocks == 10 and d.a.shape == (40, 11) and d.x.shape == (40, 55)


def test_gen_data_from_price_file(tmp_path, capsys):
    save_prices(synth_prices(2, 60, seed=1, vol=0.02), tmp_path / "p.csv")
    conf = tmp_path / "c.toml"
    conf.write_text("[market]\nprice_file = \"p.csv\"\nn_stocks = 2\nbox_low = 0.0\n"
                    "[dataset]\nepisodes = 3\nhorizon = 2\n")
    assert run(["gen-data", "--config", conf, "--out", tmp_path / "d.bin"], capsys)[0] == 0
    conf.write_text("[market]\nprice_file = \"p.csv\"\nn_stocks = 3\nbox_low = 0.0\n")
    code, _, err = run(["gen-data", "--config", conf, "--out", tmp_path / "e.bin"], capsys)
    assert code == 1 and "n_stocks is 3" in err


def test_train_artifacts(small):
    root, _ = small
    run_dir = root / "run"
    for name in ("policy.bin", "trace.csv", "resolved_config.toml", "timing.csv"):
        assert (run_dir / name).exists()
    trace = GameTrace.load(run_dir / "trace.csv")
    assert 1 <= len(trace) <= 2 and np.isfinite(trace.records[-1].g_hat[0])
    assert all(r.seconds == 0.0 for r in trace.records)
    assert len(load_policy(run_dir / "policy.bin").components) == len(trace)
    assert tomli.loads((run_dir / "resolved_config.toml").read_text())["seed"] == 4


def test_train_huge_omega_single_iteration(tmp_path, capsys, small):
    root, _ = small
    conf = tmp_path / "c.toml"
    conf.write_text(SMALL.replace("omega = 0.0001", "omega = 1e9"))
    code, _, _ = run(["train", "--config", conf, "--data", root / "data.bin", "--out", tmp_path / "run"], capsys)
    assert code == 0
    assert len(GameTrace.load(tmp_path / "run" / "trace.csv")) == 1
    assert len(load_policy(tmp_path / "run" / "policy.bin").components) == 1
    assert (tmp_path / "run" / "resolved_config.toml").exists()


def test_train_does_not_touch_inputs(tmp_path, capsys, small):
    root, conf = small
    before = (root / "data.bin").read_bytes(), conf.read_text()
    run(["train", "--config", conf, "--data", root / "data.bin", "--out", tmp_path / "r"], capsys)
    assert ((root / "data.bin").read_bytes(), conf.read_text()) == before
    assert (tmp_path / "r" / "policy.bin").read_bytes() == (root / "run" / "policy.bin").read_bytes()


def test_evaluate_rows(tmp_path, capsys, small):
    root, conf = small
    code, out, _ = run(["evaluate", "--config", conf, "--policy", root / "run" / "policy.bin",
                        "--data", root / "data.bin", "--out", tmp_path / "rep.csv"], capsys)
    assert code == 0
    rows = list(csv.reader((tmp_path / "rep.csv").read_text().splitlines()))
    assert rows[0] == ["method", "signal", "value", "diagnostics"]
    assert len(rows) - 1 == 3 * (1 + 1)
    assert [r[0] for r in rows[1:]] == ["FQE", "FQE", "IS", "IS", "DR", "DR"]
    assert [r[1] for r in rows[1:3]] == ["r", "g1"]
    assert all(np.isfinite(float(r[2])) for r in rows[1:])
    assert (tmp_path / "rep.csv").read_text() in out


def test_evaluate_rejects_unknown_method(tmp_path, capsys, small):
    root, conf = small
    code, _, err = run(["evaluate", "--config", conf, "--policy", root / "run" / "policy.bin",
                        "--data", root / "data.bin", "--out", tmp_path / "r.csv", "--method", "FQE,WDR"], capsys)
    assert code == 1
    assert err.count("\n") == 1 and "valid methods: FQE, IS, DR" in err


def test_evaluate_missing_density_is_explicit(tmp_path, capsys, small):
    root, conf = small
    d = load_dataset(root / "data.bin")
    d.behavior_log_density[:] = np.nan
    save_dataset(d, tmp_path / "nodens.bin")
    code, _, err = run(["evaluate", "--config", conf, "--policy", root / "run" / "policy.bin",
                        "--data", tmp_path / "nodens.bin", "--out", tmp_path / "r.csv", "--method", "IS"], capsys)
    assert code == 1 and "density" in err and err.startswith("error: evaluate: OpeError")


def test_report_files(tmp_path, capsys, small):
    root, conf = small
    code, _, _ = run(["report", "--config", conf, "--trace", root / "run" / "trace.csv",
                      "--policy", root / "run" / "policy.bin", "--out", tmp_path / "rep"], capsys)
    assert code == 0
    n = len(GameTrace.load(root / "run" / "trace.csv"))
    obj = list(csv.DictReader((tmp_path / "rep" / "objective.csv").open()))
    con = list(csv.DictReader((tmp_path / "rep" / "constraint.csv").open()))
    assert len(obj) == n and len(con) == n
    assert set(obj[0]) >= {"t", "R_hat", "crp_return", "behavior_return", "learned_return"}
    assert float(con[0]["tau_1"]) == 0.05
    for name in ("objective.svg", "constraint.svg"):
        text = (tmp_path / "rep" / name).read_text()
        assert text.lstrip().startswith("<?xml") and "<svg" in text
    raw = (tmp_path / "rep" / "objective.csv").read_bytes()
    assert b"\r" not in raw


def test_report_crp_baseline_is_uniform_rollout(tmp_path, capsys, small):
    root, conf = small
    run(["report", "--config", conf, "--trace", root / "run" / "trace.csv", "--out", tmp_path / "rep"], capsys)
    obj = list(csv.DictReader((tmp_path / "rep" / "objective.csv").open()))
    cfg = tomli.loads(SMALL)
    series = synth_prices(3, 200, 2, cfg["market"]["drift"], cfg["market"]["vol"])
    spec = ConstraintSpec(box_low=0.05)
    expect = simulate(series, crp_fn(3), 40, 3, spec, seed=4).mean_log_return
    assert float(obj[0]["crp_return"]) == pytest.approx(expect, rel=1e-12)
    assert "learned_return" not in obj[0]


def test_report_deterministic(tmp_path, capsys, small):
    root, conf = small
    for name in ("a", "b"):
        run(["report", "--config", conf, "--trace", root / "run" / "trace.csv",
             "--policy", root / "run" / "policy.bin", "--out", tmp_path / name], capsys)
    for f in ("objective.csv", "constraint.csv", "objective.svg", "constraint.svg"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_report_malformed_trace(tmp_path, capsys, small):
    root, conf = small
    lines = (root / "run" / "trace.csv").read_text().splitlines()
    lines.append("3,0.5")
    (tmp_path / "bad.csv").write_text("\n".join(lines) + "\n")
    code, _, err = run(["report", "--config", conf, "--trace", tmp_path / "bad.csv", "--out", tmp_path / "o"], capsys)
    assert code == 1 and f"line {len(lines)}" in err and err.count("\n") == 1


def test_bad_config_single_line_error(tmp_path, capsys):
    conf = tmp_path / "c.toml"
    conf.write_text("[fqi]\nwarp = 9\n")
    code, out, err = run(["gen-data", "--config", conf, "--out", tmp_path / "d.bin"], capsys)
    assert code == 1 and out == ""
    assert err.count("\n") == 1 and err.startswith("error: gen-data: ConfigError: [fqi] unknown key 'warp'")
    assert not (tmp_path / "d.bin").exists()


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "cbpl", "train", "--config", str(tmp_path / "none.toml"),
                           "--data", "x", "--out", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode != 0
    assert proc.stderr.strip().count("\n") == 0 and "not found" in proc.stderr
