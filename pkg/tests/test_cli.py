import csv

import numpy as np
import pytest

from graphfm import cli
from graphfm.data_io import load_report, save_matrix
from graphfm.graphs import save_edge_list
from graphfm.synth import SyntheticSpec, make_instance

SMALL = ["--m", "40", "--n", "50", "--k", "8", "--rank", "4", "--density", "0.3",
         "--max-iters", "3000"]


@pytest.fixture
def synthetic_files(tmp_path):
    inst = make_instance(SyntheticSpec(m=40, n=50, rank=4, density=0.3, seed=1), k=8)
    paths = {name: tmp_path / name for name in
             ("values", "train", "test", "rows.txt", "cols.txt")}
    save_matrix(inst.truth, paths["values"], binary=True)
    save_matrix(inst.observed.mask.astype(float), paths["train"])
    save_matrix(inst.test_mask.astype(float), paths["test"])
    save_edge_list(inst.row_graph, paths["rows.txt"])
    save_edge_list(inst.col_graph, paths["cols.txt"])
    return inst, paths


def _complete_args(paths, report, *extra):
    return ["complete", "--matrix", str(paths["values"]), "--train-mask", str(paths["train"]),
            "--test-mask", str(paths["test"]), "--row-graph", str(paths["rows.txt"]),
            "--col-graph", str(paths["cols.txt"]), "--k", "8", "--max-iters", "3000",
            "--report", str(report), *extra]


def test_complete_on_containers(synthetic_files, tmp_path, capsys):
    _, paths = synthetic_files
    report = tmp_path / "rep.txt"
    recon = tmp_path / "recon.bin"
    assert cli.main(_complete_args(paths, report, "--mu", "0",
                                   "--save-reconstruction", str(recon))) == 0
    rep = load_report(report)
    assert rep.label == "ours_fm"
    assert rep.metrics["test_rmse"] < 1e-3
    assert "created" in rep.meta
    capsys.readouterr()
    assert cli.main(["eval", "--reconstruction", str(recon), "--truth", str(paths["values"]),
                     "--mask", str(paths["test"])]) == 0
    assert float(capsys.readouterr().out) == pytest.approx(rep.metrics["test_rmse"], rel=1e-12)


def test_identical_configs_give_identical_payloads(synthetic_files, tmp_path):
    _, paths = synthetic_files
    a, b = tmp_path / "a.txt", tmp_path / "b.txt"
    assert cli.main(_complete_args(paths, a)) == 0
    assert cli.main(_complete_args(paths, b)) == 0
    ra, rb = load_report(a), load_report(b)
    assert ra.label == "ours"
    assert ra.payload().replace(str(a), "") == rb.payload().replace(str(b), "")


def test_complete_knn_graphs_with_config_file(synthetic_files, tmp_path):
    _, paths = synthetic_files
    conf = tmp_path / "run.conf"
    conf.write_text(f"# completion run\nmatrix = {paths['values']}\ntrain_mask = {paths['train']}\n"
                    f"test_mask = {paths['test']}\nk = 6\nknn_k = 5\nmax_iters = 200\n")
    report = tmp_path / "rep.txt"
    assert cli.main(["complete", "--config", str(conf), "--k", "5",
                     "--report", str(report)]) == 0
    rep = load_report(report)
    assert rep.config["k"] == 5 and rep.config["knn_k"] == 5


def test_missing_dataset_exit_code(tmp_path):
    report = tmp_path / "r.txt"
    assert cli.main(["complete", "--movielens", str(tmp_path / "none"),
                     "--report", str(report)]) == cli.EXIT_DATA
    assert not report.exists()


def test_config_errors(tmp_path):
    conf = tmp_path / "bad.conf"
    conf.write_text("not_a_key = 3\n")
    assert cli.main(["eval", "--config", str(conf)]) == cli.EXIT_CONFIG
    assert cli.main(["eval", "--config", str(tmp_path / "missing.conf")]) == cli.EXIT_CONFIG
    assert cli.main(["bench-synth", "--mu", "abc"]) == cli.EXIT_CONFIG
    assert cli.main(["bench-synth", "--axis", "bogus"]) == cli.EXIT_CONFIG
    assert cli.main(["bench-synth", "--mu", "-1", "--values", "5", "--seeds", "0"]) == cli.EXIT_CONFIG
    assert cli.main(["eval"]) == cli.EXIT_CONFIG
    with pytest.raises(SystemExit) as err:
        cli.main(["complete", "--no-such-flag", "1"])
    assert err.value.code == 2


def test_help_lists_every_key(capsys):
    for name, params in cli.COMMANDS.items():
        with pytest.raises(SystemExit):
            cli.main([name, "--help"])
        text = " ".join(capsys.readouterr().out.split())
        for p in params:
            assert "--" + p.name.replace("_", "-") in text
            assert f"(default: {cli._fmt_default(p.default)})" in text


def test_bench_single_cell(tmp_path):
    out = tmp_path / "sweep.csv"
    assert cli.main(["bench-synth", "--axis", "rank", "--values", "4", "--seeds", "0",
                     "--out", str(out), *SMALL]) == 0
    rows = list(csv.DictReader(out.open()))
    assert len(rows) == 2
    assert [r["method"] for r in rows] == ["ours", "ours_fm"]
    assert list(rows[0]) == cli.SWEEP_COLUMNS
    assert all(float(r["test_rmse"]) < 1e-2 for r in rows)
    summary = list(csv.DictReader(out.with_name("sweep.summary.csv").open()))
    assert len(summary) == 2


def test_eval_examples(tmp_path, capsys):
    X = np.arange(6.0).reshape(2, 3)
    save_matrix(X, tmp_path / "x")
    save_matrix(np.ones((2, 3)), tmp_path / "s")
    save_matrix(np.ones((3, 2)), tmp_path / "wrong")
    assert cli.main(["eval", "--reconstruction", str(tmp_path / "x"), "--truth",
                     str(tmp_path / "x"), "--mask", str(tmp_path / "s")]) == 0
    assert float(capsys.readouterr().out) == 0.0
    assert cli.main(["eval", "--reconstruction", str(tmp_path / "x"), "--truth",
                     str(tmp_path / "x"), "--mask", str(tmp_path / "wrong")]) == cli.EXIT_DATA


def _blob_files(tmp_path, seed=0, per=30):
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((3, 20)) * 4
    X = np.vstack([c + rng.standard_normal((per, 20)) for c in centers])
    y = np.repeat(np.arange(3), per)
    np.savetxt(tmp_path / "d.csv", X, delimiter=",")
    (tmp_path / "l.txt").write_text("\n".join(map(str, y)) + "\n")
    return tmp_path / "d.csv", tmp_path / "l.txt"


def test_reduce_blobs(tmp_path):
    data, labels = _blob_files(tmp_path)
    report = tmp_path / "r.txt"
    assert cli.main(["reduce", "--data", str(data), "--labels", str(labels), "--k", "10",
                     "--knn-k", "8", "--report", str(report)]) == 0
    m = load_report(report).metrics
    assert m["purity_max"] >= 0.95
    assert 0.0 <= m["knn_accuracy"] <= 1.0


def test_reduce_label_mismatch(tmp_path):
    data, labels = _blob_files(tmp_path)
    labels.write_text("0\n1\n")
    assert cli.main(["reduce", "--data", str(data), "--labels", str(labels),
                     "--report", str(tmp_path / "r.txt")]) == cli.EXIT_DATA
