import csv
import io
import json
import subprocess
import sys

import pytest
import yaml

from partswap import checks, harness
from partswap.cli import main

from test_harness import tiny


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    cfg = tmp / "tiny.yaml"
    cfg.write_text(yaml.safe_dump(tiny(tmp)), encoding="utf-8")
    return tmp, cfg


def test_run_subcommand(tiny_run, capsys):
    tmp, cfg = tiny_run
    code = main(["run", str(cfg), "--seeds", "0,1", "--output-dir", str(tmp / "r1")])
    out = capsys.readouterr().out
    assert code == 0, out
    assert "progressive" in out and "median accuracy" in out
    rep = json.loads((tmp / "r1" / "report.json").read_text(encoding="utf-8"))
    assert rep["seeds"] == [0, 1]


def test_run_exit_code_on_flag(tiny_run, tmp_path, capsys):
    tmp, _ = tiny_run
    cfg = tmp_path / "strict.yaml"
    cfg.write_text(yaml.safe_dump(tiny(tmp_path, min_guide_accuracy=1.01)), encoding="utf-8")
    assert main(["run", str(cfg)]) == 1
    assert "flag:" in capsys.readouterr().out


def test_bad_config_exits_2(tmp_path, capsys):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text("name: x\nseeds: []\n", encoding="utf-8")
    assert main(["run", str(cfg)]) == 2
    assert "error:" in capsys.readouterr().err
    assert main(["run", str(tmp_path / "missing.yaml")]) == 2


def test_compare_subcommand(tiny_run, tmp_path, capsys):
    tmp, cfg = tiny_run
    main(["run", str(cfg), "--seeds", "0", "--output-dir", str(tmp / "a")])
    main(["run", str(cfg), "--seeds", "0", "--output-dir", str(tmp / "b")])
    capsys.readouterr()
    out_csv = tmp_path / "cmp.csv"
    assert main(["compare", str(tmp / "a" / "report.json"), str(tmp / "b" / "report.json"), "--csv", str(out_csv)]) == 0
    text = capsys.readouterr().out
    assert text.splitlines()[0].split()[:3] == ["rank", "report", "variant"]
    rows = list(csv.DictReader(io.StringIO(out_csv.read_text(encoding="utf-8"))))
    assert len(rows) == 4 and set(rows[0]) == set(harness.Comparison.columns)


def test_compare_needs_two(tiny_run, capsys):
    tmp, cfg = tiny_run
    main(["run", str(cfg), "--output-dir", str(tmp / "c")])
    assert main(["compare", str(tmp / "c" / "report.json")]) == 2


def test_gramstats_subcommand(tiny_run, tmp_path, capsys):
    tmp, cfg = tiny_run
    main(["run", str(cfg), "--output-dir", str(tmp / "g")])
    capsys.readouterr()
    ck = tmp / "g" / "checkpoints" / "seed0_progressive"
    out = tmp_path / "gram.csv"
    assert main(["gramstats", str(ck), str(cfg), "--bins", "7", "--batch", "20", "--out", str(out)]) == 0
    rows = list(csv.reader(io.StringIO(out.read_text(encoding="utf-8"))))
    assert rows[0] == ["slot", "bin_left", "bin_right", "count", "is_diagonal"]
    slots = {r[0] for r in rows[1:]}
    assert slots == {"1", "2"}
    # per slot: 7 off-diagonal + 7 diagonal bins; the 12-row val split caps the batch
    off = [int(r[3]) for r in rows[1:] if r[0] == "1" and r[4] == "0"]
    diag = [int(r[3]) for r in rows[1:] if r[0] == "1" and r[4] == "1"]
    assert len(off) == 7 and sum(off) == 12 * 11 and sum(diag) == 12
    assert main(["gramstats", str(ck), str(cfg), "--bins", "7", "--batch", "20"]) == 0
    assert capsys.readouterr().out == out.read_text(encoding="utf-8")


def test_metric_check_exit_code_matches_suite(capsys):
    results = checks.metric_suite()
    code = main(["metric-check"])
    out = capsys.readouterr().out
    assert code == (0 if all(r.passed for r in results) else 1)
    assert out.count("PASS") + out.count("FAIL") == len(results)


def test_gradcheck_subcommand(capsys):
    assert main(["gradcheck"]) == 0
    assert capsys.readouterr().out.strip().endswith("3/3 passed")


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "partswap", "--help"], capture_output=True, text=True)
    assert r.returncode == 0
    for cmd in ("run", "compare", "metric-check", "gramstats", "gradcheck"):
        assert cmd in r.stdout
