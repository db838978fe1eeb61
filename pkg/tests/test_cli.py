import json
from pathlib import Path

import pytest

from weakflow.cli import main
from weakflow.config import ConfigError, parse_config, parse_config_text
from weakflow.experiments import run_experiment
from weakflow.results import write_results

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

SMALL = """
[experiment]
kind = weak_velocity
master_seed = 7

[state]
type = spreading
t = 0.5

[protocol]
sigma = 10
tau = 0.05
n_runs = 3000

[estimator]
n_min = 50

[checks]
enabled = censored_fraction, pointer_mean
"""


def test_defaults_filled():
    cfg = parse_config_text("[experiment]\nkind = weak_velocity\n")
    assert cfg.get("dynamics", "dt") == 1e-3
    assert cfg.get("estimator", "delta") == 4 * cfg.grid.dx
    assert cfg.get("protocol", "rho_min") == 1e-8
    assert cfg.master_seed == 1234


def test_negative_tau_named():
    with pytest.raises(ConfigError) as info:
        parse_config_text("[experiment]\nkind = weak_velocity\n[protocol]\ntau = -0.1\n")
    assert any("tau" in v and "> 0" in v for v in info.value.violations)


def test_unknown_key_suggestion():
    with pytest.raises(ConfigError) as info:
        parse_config_text("[experiment]\nkind = weak_velocity\n[protocol]\nsigmma = 3\n")
    assert "did you mean 'sigma'" in str(info.value)


def test_all_violations_collected():
    text = "[experiment]\nkind = nope\n[grid]\nn = 1000\n[protocol]\ntau = 0\nn_runs = -1\n"
    with pytest.raises(ConfigError) as info:
        parse_config_text(text)
    assert len(info.value.violations) >= 4


def test_physics_precondition():
    text = "[experiment]\nkind = weak_velocity\n[state]\nx0 = 15\ns0 = 3\n"
    with pytest.raises(ConfigError) as info:
        parse_config_text(text)
    assert "edge" in str(info.value)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        parse_config(tmp_path / "absent.cfg")


@pytest.mark.parametrize("path", sorted(CONFIGS.glob("*.cfg")), ids=lambda p: p.stem)
def test_shipped_configs_parse(path):
    assert parse_config(path).kind


def test_run_writes_bundle_and_is_reproducible(tmp_path):
    cfg = parse_config_text(SMALL, "small.cfg")
    b1 = run_experiment(cfg)
    paths = write_results(b1, tmp_path / "a")
    names = {p.name for p in paths}
    assert {"estimates.csv", "summary.json", "config_echo.cfg"} <= names
    header = (tmp_path / "a" / "estimates.csv").read_text().splitlines()[0].split(",")
    assert header[:9] == ["bin_center", "n", "mean_Y", "stderr_Y", "v_hat", "stderr_v",
                          "v_bohmian_ref", "v_law_ref", "reliable_flag"]
    assert header[-1] == "config_hash"
    summary = json.loads((tmp_path / "a" / "summary.json").read_text())
    assert {"check_id", "measured", "tolerance", "pass"} <= set(summary["checks"][0])
    # a fresh parse of the echoed config reproduces the tables byte for byte
    again = parse_config(tmp_path / "a" / "config_echo.cfg")
    assert again.config_hash == cfg.config_hash
    write_results(run_experiment(again), tmp_path / "b")
    for name in ("estimates.csv",):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_empty_bins_kept(tmp_path):
    b = run_experiment(parse_config_text(SMALL, "small.cfg"))
    rows = b.tables["estimates"].rows
    assert any(r[1] == 0 for r in rows)


def test_sweep_rows(tmp_path):
    text = SMALL.replace("kind = weak_velocity", "kind = sweep").replace(
        "enabled = censored_fraction, pointer_mean", "enabled = sigma_independence")
    text += "\n[sweep]\nsigmas = 5, 10\ntaus = 0.05\ndeltas = 0.15625, 0.3125\n"
    b = run_experiment(parse_config_text(text, "sw.cfg"))
    write_results(b, tmp_path)
    lines = (tmp_path / "sweep.csv").read_text().splitlines()
    assert lines[0].startswith("sigma,tau,delta,bin_center")
    assert {ln.split(",")[0] for ln in lines[1:]} == {"5.0", "10.0"}
    assert {ln.split(",")[2] for ln in lines[1:]} == {"0.15625", "0.3125"}


def test_cli_exit_codes(tmp_path, capsys):
    good = tmp_path / "small.cfg"
    good.write_text(SMALL)
    assert main(["validate", str(good)]) == 0
    assert main(["run", str(good), "--out", str(tmp_path / "o"), "--seed", "9"]) == 0
    assert "PASS" in capsys.readouterr().out
    bad = tmp_path / "bad.cfg"
    bad.write_text(SMALL.replace("tau = 0.05", "tau = -0.1"))
    assert main(["run", str(bad)]) == 2
    failing = tmp_path / "fail.cfg"
    failing.write_text(SMALL + "max_censored = 0.0\n")
    assert main(["run", str(failing), "--out", str(tmp_path / "f")]) == 1
    assert main(["sweep", str(good)]) == 2


def test_cli_oracle(capsys):
    assert main(["oracle", "variant-center-velocity"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert abs(out["v0"] - 0.5013256549262001) < 1e-12
    assert main(["oracle"]) == 0
    assert main(["oracle", "nope"]) == 2
