import csv
import json

import pytest

from toc_align import cli, experiment
from toc_align.errors import DivergenceError, ValidationError

SMALL = ["--set", "task.samples_per_class=60", "--set", "train.epochs=5"]


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def default_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert cli.main(["run", "--out", str(out)]) == 0
    return out


def test_default_run_row_count_and_schema(default_run):
    rows = read_csv(default_run / "results.csv")
    # 2 encoders x 2 decoders x 5 estimators x 2 SNRs x 1 trial
    assert len(rows) == 40
    assert list(rows[0]) == experiment.CSV_COLUMNS
    manifest = json.loads((default_run / "manifest.json").read_text())
    assert {r["config_hash"] for r in rows} == {manifest["config_hash"]}
    assert manifest["seeds"]["systems"] == {"toc1": 1, "toc2": 2}


def test_diagonal_dominates_unaligned_off_diagonal(default_run):
    rows = read_csv(default_run / "results.csv")
    for snr in ("6.0", "18.0"):
        cells = [r for r in rows if r["snr_db"] == snr and r["estimator"] == "none"]
        diag = min(float(r["accuracy"]) for r in cells if r["encoder_id"] == r["decoder_id"])
        off = max(float(r["accuracy"]) for r in cells if r["encoder_id"] != r["decoder_id"])
        assert diag - off >= 0.5


def test_rerun_is_bit_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    args = SMALL + ["--set", "snr_db=[10]"]
    assert cli.main(["run", "--out", str(a), *args, "--jobs", "2"]) == 0
    assert cli.main(["run", "--out", str(b), *args]) == 0
    assert (a / "results.csv").read_bytes() == (b / "results.csv").read_bytes()


def test_relative_systems_use_on_device_cells(tmp_path):
    systems = json.dumps([{"id": "r1", "mode": "relative", "seed": 1}, {"id": "r2", "mode": "relative", "seed": 2}])
    assert cli.main(["run", "--out", str(tmp_path), *SMALL, "--set", f"systems={systems}", "--set", "snr_db=[18]"]) == 0
    rows = read_csv(tmp_path / "results.csv")
    assert len(rows) == 4 and {r["estimator"] for r in rows} == {"on-device"}
    assert {r["n_tau"] for r in rows} == {"32"}


def test_validate_config_reports_every_problem(tmp_path, capsys):
    bad = dict(experiment.DEFAULT_CONFIG, snr_db=[], systems=[{"id": "a"}, {"id": "a"}])
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(bad))
    assert cli.main(["validate-config", str(path)]) == 1
    err = capsys.readouterr().err
    assert "snr_db" in err and "duplicate" in err
    assert cli.main(["validate-config"]) == 0
    assert "hash" in capsys.readouterr().out
    with pytest.raises(ValidationError):
        experiment.validate_config({"task": {}})


def test_invalid_config_writes_nothing(tmp_path):
    out = tmp_path / "none"
    assert cli.main(["run", "--out", str(out), "--set", "estimators=[\"kalman\"]"]) == 1
    assert not out.exists()


def test_bench_records_and_repetition_guard(tmp_path, capsys):
    assert cli.main(["bench", "--out", str(tmp_path), "--set", "bench.repetitions=99"]) == 1
    assert "repetitions" in capsys.readouterr().err
    assert cli.main(["bench", "--out", str(tmp_path), "--set", 'bench.operations=["ls","mmse","on-device"]',
                     "--set", "bench.n_tau=[50,100]"]) == 0
    rows = read_csv(tmp_path / "bench.csv")
    assert len(rows) == 6 and all(r["row_kind"] == "bench" for r in rows)
    records = json.loads((tmp_path / "bench.json").read_text())["records"]
    assert all("numpy" in r["environment"] for r in records)


def test_check_bounds_counts_and_noiseless_row(tmp_path):
    assert cli.main(["check-bounds", "--out", str(tmp_path), *SMALL, "--set", "bounds.trials=3",
                     "--set", "bounds.snr_db=[null, 6]", "--set", "bounds.draws=4"]) == 0
    rows = read_csv(tmp_path / "bounds.csv")
    assert len(rows) == 6
    noiseless = [r for r in rows if r["snr_db"] == ""]
    assert len(noiseless) == 3 and all(float(r["rhs"]) == 0.0 for r in noiseless)
    assert all(float(r["slack"]) >= -1e-9 for r in rows)


def test_check_bounds_violation_exit_code(tmp_path, monkeypatch):
    real = experiment.check_prop1_bound

    def broken(*args, **kwargs):
        rep = real(*args, **kwargs)
        rep.slack = -1.0
        return rep

    monkeypatch.setattr(experiment, "check_prop1_bound", broken)
    assert cli.main(["check-bounds", "--out", str(tmp_path), *SMALL, "--set", "bounds.trials=1",
                     "--set", "bounds.snr_db=[6]"]) == 3


def test_numerical_failure_exit_code(tmp_path, monkeypatch):
    def diverge(*args, **kwargs):
        raise DivergenceError("loss increased", [1.0, 2.0])

    monkeypatch.setattr(experiment, "run", diverge)
    assert cli.main(["run", "--out", str(tmp_path)]) == 2


def test_output_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(experiment.OUTPUT_ENV, str(tmp_path / "env"))
    assert experiment.output_dir({}) == tmp_path / "env"
    assert experiment.output_dir({}, tmp_path / "flag") == tmp_path / "flag"


def test_set_dotted_and_schema(capsys):
    cfg = experiment.set_dotted({"a": {"b": 1}}, "a.c", 2)
    assert cfg == {"a": {"b": 1, "c": 2}}
    assert cli.main(["schema"]) == 0
    assert json.loads(capsys.readouterr().out)["title"] == "toc-align experiment config"
    assert experiment.config_hash(experiment.validate_config(experiment.DEFAULT_CONFIG)) == \
        experiment.config_hash(experiment.validate_config(json.loads(json.dumps(experiment.DEFAULT_CONFIG))))
