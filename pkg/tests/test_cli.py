import argparse
import json

import pytest

from irs_vlp.__main__ import ENV_DEFAULTS, EXIT_CONFIG, EXIT_OK, EXIT_USAGE, dispatch, main
from irs_vlp.config.scenario import invalidate_cache
from irs_vlp.utils.manifest import read_manifest

SMALL_RUN = {
    "profile": "desk",
    "experiment": {"k_values": [0.0, 0.5], "sigma2_values": [1e-17], "trials": 2, "seed": 3},
    "estimator": {"grid_resolution": 0.5},
}


@pytest.fixture(autouse=True)
def clean_environment(monkeypatch):
    for name in ENV_DEFAULTS.values():
        monkeypatch.delenv(name, raising=False)
    invalidate_cache()
    yield
    invalidate_cache()


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "small.json"
    path.write_text(json.dumps(SMALL_RUN))
    return path


def _json_output(capsys):
    return json.loads(capsys.readouterr().out)


def test_validate_defaults(capsys):
    assert main(["validate"]) == EXIT_OK
    result = _json_output(capsys)
    assert result["valid"] is True
    assert result["irs_elements"] == 196
    assert result["profile"] == "desk"


@pytest.mark.parametrize("profile", ["paper", "full"])
def test_validate_paper_profile(profile, capsys):
    assert main(["validate", "--profile", profile]) == EXIT_OK
    result = _json_output(capsys)
    assert result["irs_elements"] == 1764
    assert result["profile"] == "paper"


def test_validate_bad_json(tmp_path, capsys):
    path = tmp_path / "broken.json"
    path.write_text('{"noise": {"variance": }}')
    assert main(["validate", "--config", str(path)]) == EXIT_CONFIG
    assert "line 1" in capsys.readouterr().err


def test_validate_zero_noise(tmp_path, capsys):
    path = tmp_path / "quiet.yaml"
    path.write_text("noise:\n  variance: 0.0\n")
    assert main(["validate", "--config", str(path)]) == EXIT_CONFIG
    assert "noise variance" in capsys.readouterr().err


def test_invalid_seed_environment(monkeypatch, capsys):
    monkeypatch.setenv("IRS_VLP_SEED", "abc")
    assert main(["validate"]) == EXIT_CONFIG
    assert "IRS_VLP_SEED" in capsys.readouterr().err


def test_config_from_environment(monkeypatch, small_config, capsys):
    monkeypatch.setenv("IRS_VLP_CONFIG", str(small_config))
    assert main(["validate"]) == EXIT_OK
    from_env = _json_output(capsys)["scene_hash"]
    invalidate_cache()
    monkeypatch.delenv("IRS_VLP_CONFIG")
    assert main(["validate", "--config", str(small_config)]) == EXIT_OK
    assert _json_output(capsys)["scene_hash"] == from_env


def test_unknown_subcommand():
    assert dispatch("bogus", argparse.Namespace()) == EXIT_USAGE


def test_parser_rejects_unknown_subcommand():
    with pytest.raises(SystemExit) as exc_info:
        main(["bogus"])
    assert exc_info.value.code == EXIT_USAGE


def test_channel_without_mismatch(capsys):
    assert main(["channel", "--position", "0.5", "0.5", "0.85"]) == EXIT_OK
    result = _json_output(capsys)
    assert result["position"] == [0.5, 0.5, 0.85]
    assert len(result["assumed"]["gains"]) == 4
    assert result["assumed"]["mean_powers"] == result["true"]["mean_powers"]
    assert all(g["los_blocked"] for g in result["true"]["gains"])
    assert "per_element_gains" not in result["true"]["gains"][0]


def test_channel_per_element(capsys):
    assert main(["channel", "--k", "0.3", "--elements"]) == EXIT_OK
    result = _json_output(capsys)
    assert len(result["true"]["gains"][0]["per_element_gains"]) == 196
    assert len(result["true_walls"]) == 4


def test_derivcheck_passes(capsys):
    assert main(["derivcheck", "--samples", "3"]) == EXIT_OK
    result = _json_output(capsys)
    assert result["samples"] == 3
    assert result["gradient_ok"] and result["hessian_ok"]


@pytest.mark.slow
def test_derivcheck_hundred_samples(capsys):
    assert main(["derivcheck", "--samples", "100"]) == EXIT_OK
    result = _json_output(capsys)
    assert result["samples"] == 100
    assert result["gradient_ok"] and result["hessian_ok"]


def test_estimate_writes_outputs(small_config, tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["estimate", "--config", str(small_config), "--k", "0.5", "--out", str(out)]) == EXIT_OK
    result = _json_output(capsys)
    assert result["mml"]["model"] == "mismatched"
    assert result["ml"]["model"] == "matched"
    assert (out / "estimate_seed3.json").exists()
    manifest = read_manifest(out / "estimate_seed3.manifest.json")
    assert manifest.subcommand == "estimate"
    assert manifest.seed == 3


def test_bounds_without_mismatch(small_config, capsys):
    assert main(["bounds", "--config", str(small_config), "--k", "0"]) == EXIT_OK
    report = _json_output(capsys)["report"]
    assert report["bias_norm"] < 1e-6
    assert report["rmse"]["mcrb"] == pytest.approx(report["rmse"]["crb"], rel=1e-4)


def test_rmse_vs_k_outputs(small_config, tmp_path, capsys):
    out = tmp_path / "serial"
    assert main(["rmse-vs-k", "--config", str(small_config), "--out", str(out)]) == EXIT_OK
    printed = capsys.readouterr().out.split()
    csv_path = out / "rmse-vs-k_seed3.csv"
    assert str(csv_path.resolve()) in printed
    lines = csv_path.read_text().splitlines()
    assert lines[0] == "k,sigma2,inv_sigma2_db,series,value_m,trials,seed"
    assert len(lines) == 1 + 2 * 2
    manifest = read_manifest(out / "rmse-vs-k_seed3.manifest.json")
    assert manifest.argv[0] == "rmse-vs-k"
    assert len(manifest.outputs) == 2


def test_rmse_vs_k_thread_count_does_not_change_bytes(small_config, tmp_path):
    serial, parallel = tmp_path / "serial", tmp_path / "parallel"
    assert main(["rmse-vs-k", "--config", str(small_config), "--out", str(serial)]) == EXIT_OK
    assert main(["rmse-vs-k", "--config", str(small_config), "--out", str(parallel), "--threads", "3"]) == EXIT_OK
    name = "rmse-vs-k_seed3.csv"
    assert (serial / name).read_bytes() == (parallel / name).read_bytes()


def test_rmse_vs_noise_needs_fixed_mode(small_config, capsys):
    args = ["rmse-vs-noise", "--config", str(small_config), "--figure", "2", "--trials", "1"]
    assert main(args) == EXIT_CONFIG
    assert "fixed-seeded" in capsys.readouterr().err


def test_rmse_vs_noise_outputs(small_config, tmp_path, capsys):
    out = tmp_path / "noise"
    args = [
        "rmse-vs-noise", "--config", str(small_config), "--profile", "desk", "--k", "1",
        "--sigma2", "1e-17", "1e-19", "--trials", "2", "--out", str(out),
    ]
    assert main(args) == EXIT_OK
    printed = capsys.readouterr().out.split()
    csv_path = out / "rmse-vs-noise_seed3.csv"
    assert str(csv_path.resolve()) in printed
    lines = csv_path.read_text().splitlines()
    assert len(lines) == 1 + 2 * 7
    series = {line.split(",")[3] for line in lines[1:]}
    assert series == {"mml", "ml", "mcrb", "lb", "crb", "bias", "random_guess"}
    result = json.loads((out / "rmse-vs-noise_seed3.json").read_text())
    assert [point["sigma2"] for point in result["points"]] == [1e-17, 1e-19]
    assert all("bounds" in point for point in result["points"])
    assert read_manifest(out / "rmse-vs-noise_seed3.manifest.json").subcommand == "rmse-vs-noise"
