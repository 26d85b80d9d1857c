import json
import time

import pytest

from metric_ensemble import cli


def _run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture
def data(tmp_path):
    assert _run("synth", "--output", tmp_path / "data", "--identities", 40, "--dims", 8, 8, 8) == 0
    return tmp_path / "data" / "manifest.txt"


def test_quickstart_end_to_end(tmp_path, data, capsys):
    start = time.perf_counter()
    assert _run("train", "--manifest", data, "--repeats", 2, "--output", tmp_path / "b") == 0
    assert _run("evaluate", tmp_path / "b") == 0
    assert time.perf_counter() - start < 60
    out = capsys.readouterr().out
    assert "bundle written" in out and out.rstrip().splitlines()[-1].startswith("mrr")


def test_config_file_with_flag_override(tmp_path, data):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"manifest": str(data), "repeats": 5, "nu": 10.0}))
    assert _run("train", "--config", cfg, "--repeats", 1, "--output", tmp_path / "b") == 0
    saved = json.loads((tmp_path / "b" / "config.json").read_text())
    assert saved["repeats"] == 1 and saved["nu"] == 10.0


def test_exit_codes(tmp_path, data, capsys):
    assert _run("train", "--repeats", 1) == cli.EXIT_CONFIG
    assert _run("train", "--manifest", tmp_path / "none.txt") == cli.EXIT_DATA
    assert _run("train", "--manifest", data, "--repeats", 1, "--nu", 100, "--max-iterations", 1,
                "--output", tmp_path / "x") == cli.EXIT_CONVERGENCE
    assert _run("sweep", "--manifest", data, "--repeats", 1, "--nu", 100, "--axis", "k", "--values", "0,2",
                "--output", tmp_path / "s") == cli.EXIT_PARTIAL
    err = capsys.readouterr().err
    assert "stage 'ensemble', repeat 0" in err


def test_sweep_table(tmp_path, data, capsys):
    assert _run("sweep", "--manifest", data, "--repeats", 2, "--nu", 100, "--axis", "k", "--values", "2,5",
                "--output", tmp_path / "s") == 0
    lines = (tmp_path / "s" / "sweep.tsv").read_text().splitlines()
    assert lines[0].split("\t")[:3] == ["k", "status", "rank1_mean"]
    assert [line.split("\t")[0] for line in lines[1:]] == ["2", "5"]


def test_spectrum(tmp_path, data):
    out = tmp_path / "spec.tsv"
    assert _run("spectrum", "--manifest", data, "--channel", "ch1", "--output", out) == 0
    rows = out.read_text().splitlines()
    assert rows[0] == "channel\tindex\teigenvalue\tcumulative_fraction"
    assert len(rows) == 1 + 80
    values = [float(r.split("\t")[2]) for r in rows[1:]]
    assert values == sorted(values, reverse=True)
    assert _run("spectrum", "--manifest", data, "--channel", "nope") == cli.EXIT_CONFIG
    assert _run("spectrum", "--manifest", data, "--limit", 10) == cli.EXIT_CONFIG
