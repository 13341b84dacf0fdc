"""Tests for the command-line interface"""

import json
import logging
from unittest.mock import MagicMock, patch

import pytest

from dv_mobility import cli
from dv_mobility.errors import DegenerateInputError


@pytest.fixture(autouse=True)
def reset_logger():
    """Remove the stderr handler installed by ``main``."""
    yield
    package_logger = logging.getLogger("dv_mobility")
    for handler in list(package_logger.handlers):
        if getattr(handler, "_dv_mobility_cli", False):
            package_logger.removeHandler(handler)
    package_logger.setLevel(logging.NOTSET)


@pytest.fixture()
def scenario(tmp_path):
    path = tmp_path / "scenario.json"
    path.write_text(json.dumps({"seed": 1, "rows": 8, "cols": 8}))
    return path


@pytest.fixture()
def city(scenario, tmp_path):
    """Directory holding a generated synthetic city."""
    out = tmp_path / "city"
    code = cli.main(
        ["synth", "--config", str(scenario), "--seed", "3", "--out", str(out)]
    )
    assert code == cli.EXIT_OK
    return out


def test_version(capsys):
    with pytest.raises(SystemExit) as excinfo:
        cli.main(["--version"])
    assert excinfo.value.code == 0
    assert "dv-mobility" in capsys.readouterr().out


def test_unknown_command():
    with pytest.raises(SystemExit) as excinfo:
        cli.main(["calibrate"])
    assert excinfo.value.code == cli.EXIT_USAGE


def test_missing_required_option():
    with pytest.raises(SystemExit) as excinfo:
        cli.main(["cv", "--seed", "0"])
    assert excinfo.value.code == cli.EXIT_USAGE


def test_synth_needs_out():
    assert cli.main(["synth", "--preset", "paper-like"]) == (
        cli.EXIT_VALIDATION
    )


def test_synth_paper_like_preset(tmp_path):
    out = tmp_path / "city"
    args = ["synth", "--preset", "paper-like", "--seed", "1"]
    assert cli.main(args + ["--out", str(out)]) == cli.EXIT_OK
    truth = json.loads((out / "ground_truth.json").read_text())
    assert truth["seed"] == 1
    assert "liquor_store_vr" in truth["names"]


def test_missing_input_file(tmp_path):
    """Assert a missing input file gives the file system exit code"""
    code = cli.main(
        [
            "derive",
            "--seed",
            "0",
            "--data",
            str(tmp_path / "nowhere"),
            "--out",
            str(tmp_path / "out"),
        ]
    )
    assert code == cli.EXIT_IO


def test_missing_seed(city, tmp_path):
    code = cli.main(
        ["derive", "--data", str(city), "--out", str(tmp_path / "out")]
    )
    assert code == cli.EXIT_VALIDATION


def test_numerical_error_exit_code(tmp_path):
    command = MagicMock(side_effect=DegenerateInputError("constant"))
    with patch.dict("dv_mobility.cli.COMMANDS", {"derive": command}):
        code = cli.main(
            ["derive", "--seed", "0", "--out", str(tmp_path / "out")]
        )
    assert code == cli.EXIT_NUMERICAL
    command.assert_called_once()


def test_synth_writes_files(city):
    names = {p.name for p in city.iterdir()}
    assert {
        "cbgs.geojson",
        "pois.csv",
        "visits.csv",
        "incidents.csv",
        "ground_truth.json",
        "synth_config.json",
    } <= names
    assert json.loads((city / "synth_config.json").read_text())["seed"] == 3


def test_derive_is_reproducible(city, tmp_path):
    """Assert deriving twice gives byte-identical rate tables"""
    outputs = []
    for name in ("first", "second"):
        out = tmp_path / name
        args = ["derive", "--seed", "0", "--data", str(city)]
        assert cli.main(args + ["--out", str(out)]) == cli.EXIT_OK
        outputs.append((out / "rates.csv").read_bytes())
        resolved = json.loads((out / "resolved_config.json").read_text())
        assert resolved["seed"] == 0
        truth = resolved["inputs"]["ground_truth"]
        assert truth.endswith("ground_truth.json")
    assert outputs[0] == outputs[1]
    assert outputs[0].startswith(b"cbg_id,dv_rate,")


def test_ingest_check(city, tmp_path):
    out = tmp_path / "check"
    args = ["ingest-check", "--seed", "0", "--data", str(city), "--out"]
    assert cli.main(args + [str(out)]) == cli.EXIT_OK
    report = json.loads((out / "ingest_report.json").read_text())
    assert report["cbgs"]["accepted"] == 64
    assert report["cbgs"]["rejected"] == 0
    assert report["dangling_visits"] == 0
    assert set(report["outlet_pois"]) == {
        "brewery",
        "drinking_place",
        "liquor_store",
        "winery",
    }
    dv_filter = report["dv_filter"]
    assert dv_filter["n_kept"] < dv_filter["n_input"]
    assert report["ground_truth_sha256"]


def test_fit_ols(city, tmp_path):
    out = tmp_path / "ols"
    args = ["fit-ols", "--seed", "0", "--data", str(city), "--n-perm", "9"]
    assert cli.main(args + ["--out", str(out)]) == cli.EXIT_OK
    summary = json.loads((out / "ols_summary.json").read_text())
    assert summary["condition"] == "test"
    assert summary["residual_moran"]["n_perm"] == 9
    assert (out / "ols_fit.csv").exists()


@pytest.mark.integration_test
def test_experiment_and_export(city, tmp_path):
    """Assert a saved bundle re-exports to identical files"""
    config = tmp_path / "config.json"
    config.write_text(
        json.dumps(
            {
                "seed": 2,
                "rf": {"n_tree": 5},
                "weights": {"n_perm": 9},
                "cv": {"k": 3},
            }
        )
    )
    out = tmp_path / "experiment"
    args = ["experiment", "--config", str(config), "--data", str(city)]
    args += ["--models", "ols", "rf", "--out", str(out)]
    assert cli.main(args) == cli.EXIT_OK
    comparison = json.loads((out / "comparison.json").read_text())
    assert set(comparison["models"]) == {"ols", "rf"}
    assert comparison["seed"] == 2
    assert comparison["ground_truth_sha256"]

    again = tmp_path / "export"
    args = ["export", "--seed", "2", "--bundle", str(out / "bundle.json")]
    assert cli.main(args + ["--out", str(again)]) == cli.EXIT_OK
    for name in ("comparison.json", "rates.csv", "residuals.geojson"):
        assert (again / name).read_bytes() == (out / name).read_bytes()


def test_setup_logger_replaces_handler():
    cli.setup_logger("DEBUG")
    package_logger = cli.setup_logger("INFO")
    handlers = [
        h
        for h in package_logger.handlers
        if getattr(h, "_dv_mobility_cli", False)
    ]
    assert len(handlers) == 1
    assert package_logger.level == logging.INFO
    package_logger.removeHandler(handlers[0])
