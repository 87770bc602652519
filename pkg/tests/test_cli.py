import json
import subprocess
import sys

import pytest

from bloomjoin import bench
from bloomjoin.cli import main
from bloomjoin.costmodel import BloomTimeModelEps, JoinTimeModel, model_total, models_to_json

from oracles import bisection_optimum


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def usage_error(capsys, *argv):
    with pytest.raises(SystemExit) as info:
        main(list(argv))
    capsys.readouterr()
    return info.value.code


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["gen", "--scale", "0.001", "--out", str(out)]) == 0
    return out


class TestGen:
    def test_row_counts(self, dataset):
        lines = (dataset / "orders.csv").read_text().splitlines()
        assert lines[0] == "key,attribute2,attribute4"
        assert len(lines) - 1 == 1500
        n_items = len((dataset / "lineitem.csv").read_text().splitlines()) - 1
        assert 1500 <= n_items <= 10500

    def test_missing_out(self, capsys):
        assert usage_error(capsys, "gen", "--scale", "0.001") == 2

    def test_bad_scale(self, capsys, tmp_path):
        assert usage_error(capsys, "gen", "--scale", "-1", "--out", str(tmp_path)) == 2

    def test_deterministic(self, dataset, tmp_path, capsys):
        code, out, _ = run(capsys, "gen", "--scale", "0.001", "--out", str(tmp_path))
        assert code == 0 and json.loads(out)["orders_rows"] == 1500
        for name in ("orders.csv", "lineitem.csv"):
            assert (tmp_path / name).read_bytes() == (dataset / name).read_bytes()

    def test_seed_flag(self, dataset, tmp_path, capsys):
        run(capsys, "--seed", "7", "gen", "--scale", "0.001", "--out", str(tmp_path))
        assert (tmp_path / "lineitem.csv").read_bytes() != (dataset / "lineitem.csv").read_bytes()


class TestRun:
    def _run(self, capsys, dataset, *extra):
        code, out, err = run(capsys, "--threads", "1", "run", "--big", str(dataset / "lineitem.csv"),
                             "--small", str(dataset / "orders.csv"), *extra)
        assert code == 0, err
        return json.loads(out)

    def test_epsilon_out_of_range(self, capsys, dataset):
        assert usage_error(capsys, "run", "--big", "x", "--small", "y", "--epsilon", "1.5") == 2

    def test_cascade_matches_shuffle(self, capsys, dataset):
        a = self._run(capsys, dataset, "--algorithm", "cascade", "--sel-small", "0.2")
        b = self._run(capsys, dataset, "--algorithm", "shuffle", "--sel-small", "0.2")
        c = self._run(capsys, dataset, "--algorithm", "broadcast", "--sel-small", "0.2")
        assert a["result_rows"] == b["result_rows"] == c["result_rows"] > 0

    def test_default_partitions(self, capsys, dataset):
        doc = self._run(capsys, dataset, "--epsilon", "0.05")
        assert doc["partitions"] == 200 and doc["shuffle_partitions"] == 200
        for key in ("t_count", "t_bloom_build", "t_broadcast", "t_filter_join", "bytes_broadcast",
                    "filtered_kept", "filtered_dropped", "result_rows"):
            assert key in doc

    def test_result_file(self, capsys, dataset, tmp_path):
        doc = self._run(capsys, dataset, "--result", str(tmp_path / "res.csv"))
        lines = (tmp_path / "res.csv").read_text().splitlines()
        assert lines[0] == "key,attribute1,attribute2"
        assert len(lines) - 1 == doc["result_rows"]

    def test_missing_file(self, capsys, tmp_path):
        code, out, err = run(capsys, "run", "--big", str(tmp_path / "nope.csv"),
                             "--small", str(tmp_path / "nope2.csv"))
        assert code == 1 and out == "" and "error" in err

    def test_parse_error(self, capsys, dataset, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("key,linenumber,attribute1,attribute3\n1,1,x,3\n")
        code, _, err = run(capsys, "run", "--big", str(bad), "--small", str(dataset / "orders.csv"))
        assert code == 1 and ":2:" in err

    def test_capacity_error(self, capsys, dataset):
        code, _, err = run(capsys, "run", "--big", str(dataset / "lineitem.csv"),
                           "--small", str(dataset / "orders.csv"), "--algorithm", "broadcast",
                           "--broadcast-max-rows", "10")
        assert code == 1 and "cascade" in err


class TestSweepFitOptimize:
    def test_sweep_single_row(self, capsys, tmp_path):
        code, out, _ = run(capsys, "--threads", "1", "--output-dir", str(tmp_path), "sweep",
                           "--scale", "0.0005", "--epsilons", "0.1", "--reps", "1")
        assert code == 0 and json.loads(out)["rows"] == 1
        assert len(bench.load_results(tmp_path / "results.csv")) == 1

    def test_sweep_bad_epsilon_list(self, capsys):
        assert usage_error(capsys, "sweep", "--epsilons", "0.1,abc") == 2
        assert usage_error(capsys, "sweep", "--baselines", "nested") == 2

    def test_fit_three_levels(self, capsys, tmp_path):
        run(capsys, "--threads", "1", "--output-dir", str(tmp_path), "sweep", "--scale", "0.0005",
            "--epsilons", "0.1,0.2,0.3", "--reps", "1")
        code, out, err = run(capsys, "fit", "--results", str(tmp_path / "results.csv"))
        assert code == 1 and out == ""
        assert "4 distinct epsilon levels" in err

    def test_fit_and_report(self, capsys, tmp_path):
        run(capsys, "--threads", "1", "--output-dir", str(tmp_path), "sweep", "--scale", "0.0005",
            "--epsilons", "0.001,0.01,0.05,0.1,0.3", "--reps", "1")
        code, out, _ = run(capsys, "--output-dir", str(tmp_path / "fit"), "fit",
                           "--results", str(tmp_path / "results.csv"))
        assert code == 0
        doc = json.loads(out)
        assert json.loads((tmp_path / "fit" / "model.json").read_text()) == doc
        code, out, _ = run(capsys, "--output-dir", str(tmp_path / "rep"), "report",
                           "--results", str(tmp_path / "results.csv"))
        assert code == 0
        assert len(bench.load_plotdata(tmp_path / "rep" / "plotdata.csv")) == 200 + 5

    def test_optimize_newton_fixture(self, capsys, tmp_path):
        bloom, join = BloomTimeModelEps(0.0, 1.0), JoinTimeModel(0.0, 0.0, 10.0, 1.0)
        (tmp_path / "model.json").write_text(json.dumps(models_to_json(None, bloom, join)))
        code, out, _ = run(capsys, "optimize", "--model", str(tmp_path / "model.json"))
        doc = json.loads(out)
        oracle = bisection_optimum(1.0, 0.0, 10.0, 1.0, lambda e: model_total(e, bloom, join))
        assert code == 0
        assert abs(doc["epsilon_star"] - oracle) <= 1e-6
        assert doc["method"] == "newton"
        assert doc["residual"] <= 1e-9

    def test_optimize_missing_model(self, capsys, tmp_path):
        code, _, err = run(capsys, "optimize", "--model", str(tmp_path / "none.json"))
        assert code == 1 and err


def test_no_subcommand(capsys):
    assert usage_error(capsys) == 2


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "bloomjoin", "run", "--epsilon", "0"],
                          capture_output=True, text=True)
    assert proc.returncode == 2 and proc.stdout == "" and "epsilon" in proc.stderr


def test_threads_env(monkeypatch, capsys, dataset):
    monkeypatch.setenv("BLOOMJOIN_THREADS", "3")
    code, out, _ = run(capsys, "run", "--big", str(dataset / "lineitem.csv"),
                       "--small", str(dataset / "orders.csv"))
    assert code == 0 and json.loads(out)["threads"] == 3
