import json
import logging

import numpy as np
import pytest

from nestedep.cli import main
from nestedep.data import (IngestError, Standardizer, bayesian_bootstrap, ingest, read_table,
                           standardize_split, stratified_folds)
from nestedep.experiments import cv_run, evaluate_node, grid_argmax, grid_sweep, parse_grid
from nestedep.kernel import Hyperparams, LabeledDataset
from nestedep.models import Settings, fit, select_hyperparams


def write_csv(path, X, labels, header=None):
    header = header or [f"x{j}" for j in range(X.shape[1])] + ["label"]
    lines = [",".join(header)]
    lines += [",".join([repr(float(v)) for v in row] + [str(lab)]) for row, lab in zip(X, labels)]
    path.write_text("\n".join(lines) + "\n")
    return path


def clusters(seed=0, n_per=10, sep=4.0, names=("a", "b", "c")):
    rng = np.random.default_rng(seed)
    y = np.repeat(np.arange(3), n_per)
    X = rng.normal(size=(3 * n_per, 2)) * 0.5 + sep * np.stack([y == 1, y == 2], 1)
    return X, [names[k] for k in y]


def read_jsonl(text):
    return [json.loads(line) for line in text.splitlines()]


# --- ingestion ----------------------------------------------------------------

def test_three_row_standardisation(tmp_path, caplog):
    p = tmp_path / "toy.csv"
    p.write_text("u,v,w,cls\n1,10,5,b\n2,10,7,a\n3,10,12,b\n")
    with caplog.at_level(logging.WARNING):
        data, std, table = ingest(p, "cls")
    # u: mean 2, population sd sqrt(2/3); w: mean 8, sd sqrt(26/3)
    s = np.sqrt(2 / 3)
    np.testing.assert_allclose(data.X[:, 0], [-1 / s, 0.0, 1 / s], rtol=1e-15)
    np.testing.assert_array_equal(data.X[:, 1], [0.0, 0.0, 0.0])
    np.testing.assert_allclose(data.X[:, 2], np.array([-3, -1, 4]) / np.sqrt(26 / 3), rtol=1e-15)
    assert "constant" in caplog.text
    assert table.classes == ["b", "a"] and list(data.y) == [0, 1, 0]
    assert table.columns == ["u", "v", "w"]


def test_first_appearance_label_order(tmp_path):
    X, labels = clusters(n_per=2, names=("c", "a", "b"))
    table = read_table(write_csv(tmp_path / "d.csv", X, labels), "label")
    assert table.classes == ["c", "a", "b"]


def test_missing_values_listed(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("x,y\n1,a\n,b\n3,\n4,a\nNA,b\n")
    with pytest.raises(IngestError, match=r"\[2, 3, 5\]"):
        read_table(p, "y")


def test_single_class_rejected(tmp_path):
    p = tmp_path / "s.csv"
    p.write_text("x,y\n1,a\n2,a\n")
    with pytest.raises(IngestError, match="two classes"):
        read_table(p, "y")


def test_bad_inputs(tmp_path):
    p = tmp_path / "b.csv"
    p.write_text("x,y\n1,a\nfoo,b\n")
    with pytest.raises(IngestError, match="non-numeric"):
        read_table(p, "y")
    with pytest.raises(IngestError, match="no column"):
        read_table(p, "label")
    q = tmp_path / "t.csv"
    q.write_text("x,y\n1,a\n2,z\n")
    with pytest.raises(IngestError, match="not seen"):
        read_table(q, "y", classes=["a", "b"])


def test_standardizer_roundtrip():
    X = np.random.default_rng(1).normal(size=(6, 3))
    std = Standardizer.fit(X)
    back = Standardizer.from_dict(json.loads(json.dumps(std.as_dict())))
    np.testing.assert_array_equal(back.transform(X), std.transform(X))


def test_split_uses_training_statistics_only():
    X, _ = clusters(2)
    y = np.repeat(np.arange(3), 10)
    data = LabeledDataset(X, y, 3)
    tr, te, std = standardize_split(data.subset(np.arange(20)), data.subset(np.arange(20, 30)))
    np.testing.assert_allclose(std.mean, X[:20].mean(0))
    np.testing.assert_allclose(te.X, (X[20:] - X[:20].mean(0)) / X[:20].std(0))


def test_stratified_folds_balanced():
    y = np.repeat(np.arange(3), [10, 7, 5])
    folds = stratified_folds(y, 5, seed=3)
    for k in range(3):
        counts = np.bincount(folds[y == k], minlength=5)
        assert counts.max() - counts.min() <= 1
    assert np.array_equal(folds, stratified_folds(y, 5, seed=3))
    with pytest.raises(ValueError):
        stratified_folds(y, 1, 0)


def test_bootstrap_interval_and_constant_mean():
    vals = np.random.default_rng(4).normal(size=40)
    m, lo, hi = bayesian_bootstrap(vals, seed=0)
    assert lo <= m <= hi
    assert m == pytest.approx(vals.mean(), abs=1e-14)
    const = np.full(17, np.log(1 / 3))
    assert bayesian_bootstrap(const)[0] == np.log(1 / 3)


# --- experiments ----------------------------------------------------------------

def test_cv_uniform_baseline_exact_and_separable_accuracy():
    X, _ = clusters(5)
    data = LabeledDataset(X, np.repeat(np.arange(3), 10), 3, ["a", "b", "c"])
    rep = cv_run(data, 3, ["ep"], seed=1)
    summ = {r["method"]: r for r in rep.records if r["record"] == "summary"}
    assert summ["uniform"]["mlpd"] == np.log(1 / 3)
    assert summ["ep"]["accuracy"] == 1.0
    for r in summ.values():
        assert 0.0 <= r["accuracy"] <= 1.0
        lo, hi = r["mlpd_interval"]
        assert lo <= r["mlpd"] <= hi
    assert any(r["record"] == "difference" and r["reference"] == "ep" for r in rep.records)


def test_test_labels_do_not_leak_into_hyperparameters():
    X, _ = clusters(6, sep=2.0)
    y = np.repeat(np.arange(3), 10)
    folds = stratified_folds(y, 3, seed=0)
    train_idx = np.flatnonzero(folds != 0)
    data = LabeledDataset(X, y, 3)
    y_perm = y.copy()
    test_idx = np.flatnonzero(folds == 0)
    y_perm[test_idx] = np.random.default_rng(0).permutation(y[test_idx])
    permuted = LabeledDataset(X, y_perm, 3)
    thetas = []
    for d in (data, permuted):
        tr, _, _ = standardize_split(d.subset(train_idx), d.subset(test_idx))
        thetas.append(select_hyperparams("la", tr)[0].to_vector())
    assert thetas[0].tobytes() == thetas[1].tobytes()


def grid_data():
    X, _ = clusters(7, sep=2.0)
    y = np.repeat(np.arange(3), 10)
    d = LabeledDataset(X, y, 3)
    tr, te, _ = standardize_split(d.subset(np.arange(0, 30, 2)), d.subset(np.arange(1, 30, 2)))
    return tr, te


def test_single_node_grid_equals_direct_evaluation():
    tr, te = grid_data()
    rep = grid_sweep(tr, te, [0.2], [1.5], ["ep"])
    row = rep.tables["grid"]["rows"][0]
    ev, mlpd, acc, _, _ = evaluate_node("ep", tr, te, Hyperparams(1.5, [0.2]), Settings())
    assert row[3] == ev and row[4] == mlpd and row[5] == acc


def test_grid_warm_start_is_speed_only():
    tr, te = grid_data()
    ls, s2 = np.linspace(-0.5, 0.5, 3), np.linspace(0.0, 2.0, 3)
    settings = Settings(tol=1e-9, max_outer=2000)
    warm = grid_sweep(tr, te, ls, s2, ["ep"], settings).tables["grid"]["rows"]
    cold = grid_sweep(tr, te, ls, s2, ["ep"], settings, warm_start=False).tables["grid"]["rows"]
    for a, b in zip(warm, cold):
        assert a[1:3] == b[1:3]
        assert abs(a[3] - b[3]) < 1e-6 and abs(a[4] - b[4]) < 1e-6


def test_grid_argmax_coordinates():
    rows = [["ep", l, s, -abs(l - 1) - abs(s - 2), 0, 0, 1, 0] for l in (0, 1, 2) for s in (0, 1, 2, 3)]
    assert grid_argmax(rows, 3) == (1, 2)
    with pytest.raises(ValueError):
        parse_grid("1:2")


def test_fit_rejects_unknown_method():
    tr, _ = grid_data()
    with pytest.raises(ValueError):
        fit("vb", tr, Hyperparams(0.0))


# --- command line ------------------------------------------------------------------

@pytest.fixture
def csv(tmp_path):
    X, labels = clusters(8)
    return write_csv(tmp_path / "train.csv", X, labels)


def test_ingest_check_reports_classes(csv, capsys):
    assert main(["ingest-check", "--data", str(csv), "--labels", "label"]) == 0
    recs = read_jsonl(capsys.readouterr().out)
    assert recs[0]["classes"] == ["a", "b", "c"] and recs[0]["class_counts"] == [10, 10, 10]


def test_train_then_predict(csv, tmp_path, capsys):
    out = tmp_path / "model"
    args = ["--data", str(csv), "--labels", "label", "--theta", "2.0,0.5"]
    assert main(["train", *args, "--method", "ep", "--out", str(out)]) == 0
    saved = json.loads((out / "model.json").read_text())
    assert saved["classes"] == ["a", "b", "c"] and saved["method"] == "ep"
    assert main(["predict", "--data", str(csv), "--labels", "label", "--model", str(out / "model.json")]) == 0
    recs = read_jsonl(capsys.readouterr().out)
    metrics = next(r for r in recs if r["record"] == "metrics")
    assert metrics["accuracy"] == 1.0


def test_partial_exit_code(csv, capsys):
    code = main(["train", "--data", str(csv), "--labels", "label", "--theta", "2.0,0.5",
                 "--method", "ep", "--max-outer", "1"])
    assert code == 2
    assert read_jsonl(capsys.readouterr().out)[-1] == {"partial": True, "record": "status"}


def test_error_exit_code(tmp_path, capsys):
    assert main(["ingest-check", "--data", str(tmp_path / "nope.csv"), "--labels", "y"]) == 1
    assert "error" in capsys.readouterr().err


def test_negative_grid_range_parses(csv, tmp_path):
    out = tmp_path / "g"
    code = main(["grid", "--data", str(csv), "--labels", "label", "--grid", "-1:0:2,0:1:2", "--out", str(out)])
    assert code == 0
    lines = (out / "grid.csv").read_text().splitlines()
    assert lines[0] == "method,log_lengthscale,log_magnitude,log_evidence,mlpd,accuracy,converged,flagged"
    assert len(lines) == 5


def test_train_takes_one_method(csv):
    with pytest.raises(SystemExit):
        main(["train", "--data", str(csv), "--labels", "label", "--method", "ep,la"])
