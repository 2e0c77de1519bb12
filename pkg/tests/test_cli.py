import json
import subprocess
import sys

import numpy as np
import pytest

from dvgp import fixtures
from dvgp.cli import ConfigError, ParseError, RunConfig, ingest_csv, main


def write(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def read_metrics(path, drop=("elapsed_ms",)):
    rows = [json.loads(line) for line in path.read_text().splitlines()]
    return [{k: v for k, v in r.items() if k not in drop} for r in rows]


# ---- ingestion ----------------------------------------------------------------------

def test_outputs_only_csv(tmp_path):
    d = ingest_csv(write(tmp_path, "y_0,y_1\n1,2\n3,4\n5,6\n"))
    assert (d.n, d.d, d.is_regression) == (3, 2, False)


def test_regression_csv(tmp_path):
    d = ingest_csv(write(tmp_path, "x_0,y_0\n0.5,1\n1.5,2\n"))
    assert d.is_regression
    np.testing.assert_array_equal(d.X, [[0.5], [1.5]])


@pytest.mark.parametrize("text, where", [
    ("y_0,y_1\n1,2\n3\n", ":3:"),
    ("y_0\n1\nabc\n", ":3:"),
    ("x_0\n1\n", ":1:"),
    ("y_0,z\n1,2\n", ":1:"),
])
def test_parse_errors_name_the_line(tmp_path, text, where):
    with pytest.raises(ParseError, match=where):
        ingest_csv(write(tmp_path, text))


def test_empty_and_header_only_files(tmp_path):
    with pytest.raises(ParseError):
        ingest_csv(write(tmp_path, ""))
    with pytest.raises(ParseError):
        ingest_csv(write(tmp_path, "y_0\n"))


def test_bundled_fixtures_match_their_generators():
    for name, data in fixtures.generate_all().items():
        loaded = ingest_csv(fixtures.bundled_path(name))
        np.testing.assert_array_equal(loaded.Y, data.Y)
        if data.X is not None:
            np.testing.assert_array_equal(loaded.X, data.X)


def test_config_validation():
    with pytest.raises(ConfigError):
        RunConfig("fit", failure_rate=1.5).validate()
    with pytest.raises(ConfigError):
        RunConfig("fit", mode="svm").validate()
    with pytest.raises(ConfigError):
        RunConfig("fit", m=0).validate()
    with pytest.raises(ConfigError):
        RunConfig("failure-sweep", rates=[0.0, -0.1]).validate()


# ---- subcommands -------------------------------------------------------------------

def test_fit_writes_metrics_summary_and_model(tmp_path):
    out = tmp_path / "run"
    code = main(["fit", "--data", "gplvm", "--m", "6", "--workers", "3", "--max-iters", "25",
                 "--out", str(out)])
    assert code == 0
    rows = read_metrics(out / "metrics.jsonl", drop=())
    assert rows and all(set(r) == {"iter", "elbo", "grad_norm", "alive_workers", "elapsed_ms"}
                        for r in rows)
    assert [r["iter"] for r in rows] == list(range(1, len(rows) + 1))
    summary = json.loads((out / "summary.json").read_text())
    assert summary["status"] == "ok" and summary["result"]["elbo"] >= summary["result"][
        "initial_elbo"]
    assert (out / "model.npz").exists()


def test_same_seed_gives_identical_metrics(tmp_path):
    args = ["fit", "--data", "gplvm", "--m", "5", "--workers", "4", "--failure-rate", "0.1",
            "--seed", "3", "--max-iters", "30"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    assert read_metrics(tmp_path / "a" / "metrics.jsonl") == read_metrics(
        tmp_path / "b" / "metrics.jsonl")
    assert (tmp_path / "a" / "metrics.jsonl").read_text().count("\n") > 0


def test_sgpr_mode_on_regression_csv(tmp_path):
    code = main(["fit", "--mode", "sgpr", "--data", "sine", "--m", "6", "--max-iters", "20",
                 "--out", str(tmp_path)])
    assert code == 0


def test_sgpr_mode_needs_inputs(tmp_path, capsys):
    code = main(["fit", "--mode", "sgpr", "--data", "gplvm", "--out", str(tmp_path)])
    assert code == 2
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "ConfigError"


def test_errors_are_json_with_nonzero_exit(tmp_path, capsys):
    assert main(["fit", "--data", str(tmp_path / "missing.csv"), "--out", str(tmp_path)]) == 2
    assert json.loads(capsys.readouterr().err)["error"] == "ConfigError"
    bad = write(tmp_path, "y_0,y_1\n1,2\n3\n")
    assert main(["fit", "--data", str(bad), "--out", str(tmp_path)]) == 2
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "ParseError" and ":3:" in err["message"]
    assert main(["fit", "--data", "gplvm", "--q", "9", "--out", str(tmp_path / "q")]) == 1
    assert json.loads(capsys.readouterr().err)["error"] == "ContractError"
    summary = json.loads((tmp_path / "q" / "summary.json").read_text())
    assert summary["status"] == "error"


def test_gradcheck_on_bundled_fixture(tmp_path, capsys):
    code = main(["gradcheck", "--data", "gplvm", "--instances", "10", "--m", "5",
                 "--out", str(tmp_path)])
    assert code == 0
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["result"]["max_relative_error"] < 1e-5
    assert "max relative error" in capsys.readouterr().out


def test_failure_sweep_writes_traces(tmp_path):
    code = main(["failure-sweep", "--data", "gplvm", "--m", "5", "--workers", "4",
                 "--rates", "0,0.5", "--seeds", "2", "--max-iters", "15", "--out", str(tmp_path)])
    assert code == 0
    traces = sorted(p.name for p in (tmp_path / "traces").iterdir())
    assert traces == ["rate0.5_seed0.jsonl", "rate0.5_seed1.jsonl", "rate0_seed0.jsonl",
                      "rate0_seed1.jsonl"]
    rows = read_metrics(tmp_path / "metrics.jsonl")
    assert {(r["rate"], r["seed"]) for r in rows} == {(0.0, 0), (0.0, 1), (0.5, 0), (0.5, 1)}
    result = json.loads((tmp_path / "summary.json").read_text())["result"]
    assert set(result["median_final_elbo"]) == {"0", "0.5"}


def test_ard_report(tmp_path, capsys):
    code = main(["ard-report", "--q", "3", "--m", "8", "--max-iters", "150",
                 "--out", str(tmp_path)])
    assert code == 0
    out = capsys.readouterr().out
    assert out.count("dim ") == 3
    result = json.loads((tmp_path / "summary.json").read_text())["result"]
    w = np.array(result["ard_weights"])
    assert result["sorted_dims"] == list(np.argsort(w)[::-1])


def test_console_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "dvgp.cli", "--version"], capture_output=True,
                         text=True)
    assert out.returncode == 0 and out.stdout.startswith("dvgp ")
