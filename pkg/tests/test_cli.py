import logging
import os

import numpy as np
import pytest

from dstt.cli import FORECAST_HEADER, read_forecast_csv, run_command, write_forecast_csv
from dstt.config import PROFILES, load_config
from dstt.data import sample_path
from dstt.errors import ConfigError
from dstt.evaluate import TEST_PROFILE
from dstt.model import AblationVariant, DsttConfig
from dstt.uncertainty import ForecastDistribution

from helpers import T0

SAMPLE = str(sample_path())

SUBCOMMANDS = ("fetch", "ingest", "train", "predict", "evaluate", "ablate", "cv", "synth")


def _write(path, text):
    path.write_text(text)
    return str(path)


# ------------------------------------------------------------------------- config


def test_empty_file_gives_defaults(tmp_path):
    run = load_config(_write(tmp_path / "c.json", ""))
    assert run.model == DsttConfig() and run.K == 100 and run.w == 1 and run.horizons == [1, 2, 3, 4, 5, 6]


def test_no_file_gives_defaults():
    assert load_config().model == DsttConfig()


def test_flag_beats_file(tmp_path):
    path = _write(tmp_path / "c.json", '{"lr": 1e-3, "epochs": 9}')
    run = load_config(path, {"learning_rate": 1e-4})
    assert run.model.learning_rate == 1e-4 and run.model.epochs == 9
    assert load_config(path).model.learning_rate == 1e-3


def test_file_beats_profile(tmp_path):
    run = load_config(_write(tmp_path / "c.json", '{"profile": "test", "epochs": 3}'))
    assert run.model.epochs == 3 and run.model.lstm_units == TEST_PROFILE["lstm_units"]
    assert PROFILES["test"]["sequence_length"] == 256


def test_unknown_key_is_named(tmp_path):
    with pytest.raises(ConfigError, match="learning_rte") as exc:
        load_config(_write(tmp_path / "c.json", '{"learning_rte": 0.1}'))
    assert exc.value.field == "learning_rte"


def test_malformed_json_has_location(tmp_path):
    with pytest.raises(ConfigError, match="line 2 column"):
        load_config(_write(tmp_path / "c.json", '{"epochs": 3,\n  "lr" 1e-3}'))


def test_set_values_are_parsed():
    run = load_config(None, {"variant": "cl", "seeds": "[1, 2]", "heteroscedastic": "false"})
    assert run.model.variant is AblationVariant.CL and run.seeds == [1, 2] and run.model.heteroscedastic is False


def test_seed_flag_reaches_model():
    assert load_config(None, {"seed": 7}).model.seed == 7


@pytest.mark.parametrize("bad", [{"w": 0}, {"w": 7}, {"K": 1}, {"z": 0}, {"folds": 1}, {"profile": "huge"}])
def test_invalid_run_values(bad):
    with pytest.raises(ConfigError):
        load_config(None, bad)


# -------------------------------------------------------------------- exit codes


@pytest.mark.parametrize("cmd", SUBCOMMANDS)
def test_help_exits_zero_without_side_effects(cmd, tmp_path, capsys, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert run_command([cmd, "--help"]) == 0
    assert "usage" in capsys.readouterr().out
    assert os.listdir(tmp_path) == []


def test_top_level_help():
    assert run_command(["--help"]) == 0


def test_unknown_flag_and_subcommand(capsys):
    assert run_command(["train", "--bogus"]) == 1
    assert "usage" in capsys.readouterr().err
    assert run_command(["frobnicate"]) == 1
    assert run_command([]) == 1


def test_validation_error_exits_one(tmp_path):
    assert run_command(["train", "--data", SAMPLE, "--w", "9", "--out", str(tmp_path / "m")]) == 1
    assert run_command(["train", "--data", SAMPLE, "--set", "learning_rte=1", "--out", str(tmp_path / "m")]) == 1
    bad = _write(tmp_path / "bad.dat", "not a table\n")
    assert run_command(["ingest", "--data", bad, "--format", "omni"]) == 1


def test_runtime_error_exits_two(tmp_path):
    assert run_command(["predict", "--model", str(tmp_path / "missing.ckpt"), "--data", SAMPLE,
                        "--out", str(tmp_path / "f.csv")]) == 2
    blocked = tmp_path / "no_such_dir" / "out.csv"
    assert run_command(["synth", "--count", "10", "--out", str(blocked)]) == 2


def test_effective_config_is_logged(tmp_path, capsys):
    assert run_command(["synth", "--count", "5", "--seed", "4", "--out", str(tmp_path / "s.csv")]) == 0
    line = next(x for x in capsys.readouterr().err.splitlines() if "effective config" in x)
    assert '"seed": 4' in line and '"command": "synth"' in line


# ------------------------------------------------------------------ forecast csv


def _dist(m, seed=0):
    rng = np.random.default_rng(seed)
    ale, epi = rng.uniform(0, 50, m), rng.uniform(0, 5, m)
    return ForecastDistribution(rng.normal(-20, 30, m) / 3, ale, epi, ale + epi,
                                T0 + np.arange(m) * np.timedelta64(1, "h"), rng.normal(-20, 30, m) / 7)


def test_forecast_csv_round_trip(tmp_path):
    d = _dist(50)
    path = tmp_path / "f.csv"
    assert write_forecast_csv(d, path, 2.0) == 50
    cols = read_forecast_csv(path)
    for key, arr in (("mean", d.mean), ("aleatoric_var", d.aleatoric), ("epistemic_var", d.epistemic),
                     ("total_var", d.total), ("observed", d.observed)):
        assert np.array_equal(cols[key], arr)
    np.testing.assert_array_equal(cols["lower"], d.mean - 2 * np.sqrt(d.total))
    assert cols["timestamp"][0] == "2015-03-01T00:00:00Z"


def test_forecast_csv_row_count(tmp_path):
    path = tmp_path / "f.csv"
    write_forecast_csv(_dist(1104), path)
    lines = path.read_text().splitlines()
    assert len(lines) == 1105 and lines[0] == ",".join(FORECAST_HEADER)


def test_forecast_csv_empty_stream(tmp_path, caplog):
    path = tmp_path / "f.csv"
    with caplog.at_level(logging.WARNING, logger="dstt"):
        assert write_forecast_csv([], path) == 0
    assert path.read_text().splitlines() == [",".join(FORECAST_HEADER)]
    assert any("empty" in r.message for r in caplog.records)


def test_evaluate_perfect_predictions(tmp_path, capsys):
    d = _dist(30)
    d.observed = d.mean.copy()
    path = tmp_path / "f.csv"
    write_forecast_csv(d, path)
    report = tmp_path / "r.csv"
    assert run_command(["evaluate", "--pred", str(path), "--out", str(report)]) == 0
    out = capsys.readouterr().out
    assert "rmse=0.0 " in out and "r2=1.0" in out
    assert report.read_text().splitlines()[1] == "DSTT,,,,30,0.0,1.0"


def test_evaluate_rejects_foreign_csv(tmp_path):
    assert run_command(["evaluate", "--pred", _write(tmp_path / "x.csv", "a,b\n1,2\n")]) == 1


# -------------------------------------------------------------------- end to end


def test_train_predict_evaluate_smoke(tmp_path):
    ckpt, fc = str(tmp_path / "model.ckpt"), str(tmp_path / "forecast.csv")
    assert run_command(["train", "--data", SAMPLE, "--profile", "test", "--w", "4", "--epochs", "2",
                        "--seed", "7", "--out", ckpt, "--log-level", "WARNING"]) == 0
    loss = (tmp_path / "model.ckpt.loss.csv").read_text().splitlines()
    assert loss[0] == "epoch,mse,kl,kl_weight,nll,total" and len(loss) == 3
    assert run_command(["predict", "--model", ckpt, "--data", SAMPLE, "--K", "5", "--subset", "test",
                        "--out", fc, "--log-level", "WARNING"]) == 0
    cols = read_forecast_csv(fc)
    assert len(cols["mean"]) > 300
    assert np.all(cols["total_var"] >= cols["aleatoric_var"]) and np.all(cols["lower"] <= cols["upper"])
    assert run_command(["evaluate", "--pred", fc, "--w", "4", "--out", str(tmp_path / "r.csv")]) == 0


def test_ingest_and_label(tmp_path):
    out = tmp_path / "clean.csv"
    assert run_command(["ingest", "--data", SAMPLE, "--out", str(out)]) == 0
    lab = tmp_path / "lab.csv"
    assert run_command(["ingest", "--data", str(out), "--label", "--w", "3", "--out", str(lab)]) == 0
    assert len(lab.read_text().splitlines()) == len(out.read_text().splitlines()) - 2 * 3


def test_fetch_uses_environment(tmp_path, monkeypatch):
    src = tmp_path / "omni2_2021.dat"
    src.write_bytes(open(SAMPLE, "rb").read())
    monkeypatch.setenv("DSTT_OMNI_URL", src.as_uri().replace("2021", "{year}"))
    monkeypatch.setenv("DSTT_CACHE_DIR", str(tmp_path / "cache"))
    out = tmp_path / "got.dat"
    assert run_command(["fetch", "--start", "2021-06-01", "--end", "2021-06-03", "--out", str(out)]) == 0
    assert out.stat().st_size > 0
