import csv
import functools
import io

import numpy as np
import pytest

from bifsmn import cli
from bifsmn.fsmn import init_model
from bifsmn.io import load_model, save_features, save_model
from bifsmn.trainer import run_toy, toy_dataset


def run(*argv):
    out, err = io.StringIO(), io.StringIO()
    code = cli.main(list(argv), out, err)
    return code, out.getvalue(), err.getvalue()


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    d = tmp_path_factory.mktemp("toy")
    code, out, err = run("train-toy", "--seed", "0", "--steps", "800", "--out", str(d))
    assert code == 0, err
    return d


def _parse_infer(text):
    lines = dict(line.split(" ", 1) for line in text.strip().splitlines())
    return int(lines["class"]), [float(v) for v in lines["probs"].split()], float(lines["flops"])


def test_infer_on_training_examples(trained, tmp_path):
    data = toy_dataset(0, 4, 2000)
    model = str(trained / "model.bfsm")
    hits = 0
    for i in range(10):
        save_features(data.X_train[i], tmp_path / "x.bftr")
        code, out, err = run("infer", "--model", model, "--input", str(tmp_path / "x.bftr"))
        assert code == 0 and err == ""
        label, probs, _ = _parse_infer(out)
        assert sum(probs) == pytest.approx(1.0, abs=1e-5)
        assert out.splitlines()[2].startswith("mflops ")
        hits += label == data.y_train[i]
    assert hits >= 9


def test_infer_flops_decrease_with_delta(trained, tmp_path):
    save_features(toy_dataset(0, 4, 20).X_train[0], tmp_path / "x.bftr")
    flops = []
    for d in ("1", "2"):
        code, out, _ = run("infer", "--model", str(trained / "model.bfsm"), "--input", str(tmp_path / "x.bftr"), "--delta", d)
        assert code == 0
        flops.append(_parse_infer(out)[2])
    assert flops[1] < flops[0]


def test_infer_rejects_delta_outside_set(trained, tmp_path):
    save_features(np.zeros((16, 16), np.float32), tmp_path / "x.bftr")
    code, out, err = run("infer", "--model", str(trained / "model.bfsm"), "--input", str(tmp_path / "x.bftr"), "--delta", "4")
    assert code != 0 and out == ""
    assert err.startswith("error:config:")


def test_infer_malformed_features(trained, tmp_path):
    (tmp_path / "bad.bftr").write_bytes(b"BFTR\x02\x00\x00\x00")
    code, out, err = run("infer", "--model", str(trained / "model.bfsm"), "--input", str(tmp_path / "bad.bftr"))
    assert code != 0 and out == ""
    assert err.startswith("error:load:") and err.count("\n") == 1


def test_missing_file_and_bad_flags(tmp_path):
    code, out, err = run("infer", "--model", str(tmp_path / "none"), "--input", "x")
    assert code != 0 and err.startswith("error:io:")
    code, _, err = run("infer")
    assert code != 0 and err.startswith("error:usage:")
    code, _, err = run("frobnicate")
    assert err.startswith("error:usage:")


def test_train_toy_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("train-toy", "--seed", "3", "--steps", "10", "--gamma", "0.01", "--out", str(a))[0] == 0
    assert run("train-toy", "--seed", "3", "--steps", "10", "--gamma", "0.01", "--out", str(b))[0] == 0
    assert (a / "train_log.csv").read_bytes() == (b / "train_log.csv").read_bytes()
    assert (a / "model.bfsm").read_bytes() == (b / "model.bfsm").read_bytes()
    rows = list(csv.DictReader(open(a / "train_log.csv")))
    assert len(rows) == 20 and float(rows[-1]["dist"]) > 0

    c = tmp_path / "c"
    assert run("train-toy", "--seed", "3", "--steps", "10", "--gamma", "0", "--out", str(c))[0] == 0
    last = lambda p: list(csv.DictReader(open(p / "train_log.csv")))[-1]
    assert last(c)["total"] != last(a)["total"]


def test_train_toy_divergence_keeps_partial_log(tmp_path, monkeypatch):
    monkeypatch.setattr(cli, "run_toy", functools.partial(run_toy, learning_rate=1e38))
    with np.errstate(all="ignore"):
        code, _, err = run("train-toy", "--steps", "50", "--gamma", "0", "--out", str(tmp_path))
    assert code != 0 and err.startswith("error:divergence:")
    lines = (tmp_path / "train_log.csv").read_text().splitlines()
    assert lines[0] == "step,delta,ce,dist,total,test_acc"
    assert not (tmp_path / "model.bfsm").exists()


def test_bench_table():
    code, out, err = run("bench", "--sizes", "8x130x5,16x64x16", "--backends", "reference,blocked", "--repeat", "1")
    assert code == 0, err
    rows = list(csv.reader(io.StringIO(out)))
    assert rows[0] == ["m", "n", "k", "backend", "median_s", "speedup_vs_naive"]
    assert len(rows) == 1 + 2 * 3
    assert {r[3] for r in rows[1:]} == {"naive-fp", "reference", "blocked"}
    for r in rows[1:]:
        assert float(r[4]) >= 0 and float(r[5]) > 0
    code, out9, _ = run("bench", "--sizes", "8x130x5", "--repeat", "9", "--repeat-parallel")
    assert code == 0 and len(out9.splitlines()) == 4


@pytest.mark.parametrize("argv", [
    ("bench", "--backends", "reference,gpu"),
    ("bench", "--backends", ""),
    ("bench", "--sizes", "8x8"),
])
def test_bench_usage_errors(argv):
    code, out, err = run(*argv)
    assert code != 0 and out == "" and err.startswith("error:usage:")


def test_bench_simd_reports_config_error():
    code, _, err = run("bench", "--sizes", "4x4x4", "--backends", "simd", "--repeat", "1")
    assert code != 0 and err.startswith("error:config:")


def _constant_state_model(path):
    m = init_model(4, 2, n_blocks=3, hidden_dim=6, proj_dim=4, binarized=False, delta_set=(1,))
    m.front_W[:] = 0
    m.front_b[:] = 0.5
    for blk in m.blocks:
        for w in (blk.V, blk.U, blk.lookback, blk.lookahead):
            w[:] = 0
        blk.b[:] = 0.3
    save_model(m, path)


def test_diagnose_constant_states(tmp_path):
    _constant_state_model(tmp_path / "m.bfsm")
    save_features(np.full((8, 4), 2.0, np.float32), tmp_path / "x.bftr")
    code, out, err = run("wavelet-diagnose", "--model", str(tmp_path / "m.bfsm"), "--input", str(tmp_path / "x.bftr"))
    assert code == 0, err
    rows = list(csv.DictReader(io.StringIO(out)))
    assert list(rows[0]) == ["layer", "kind", "p_high", "p_low"]
    real = [r for r in rows if r["kind"] == "real"]
    assert len(real) == 3
    assert all(float(r["p_high"]) == 0.0 and float(r["p_low"]) == 1.0 for r in real)


def test_diagnose_layer_filter_and_range(trained, tmp_path):
    save_features(toy_dataset(0, 4, 20).X_train[0], tmp_path / "x.bftr")
    args = ("wavelet-diagnose", "--model", str(trained / "model.bfsm"), "--input", str(tmp_path / "x.bftr"))
    code, out, _ = run(*args, "--layer", "2")
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(out)))
    assert [(r["layer"], r["kind"]) for r in rows] == [("2", "real"), ("2", "binarized")]
    assert run(*args, "--layer", "9")[2].startswith("error:usage:")


def test_diagnose_binarized_has_more_high_frequency(trained, tmp_path):
    t = np.arange(16)[:, None] / 16
    f = np.arange(16)[None, :] / 16
    save_features((np.cos(2 * np.pi * (t + f))).astype(np.float32), tmp_path / "x.bftr")
    code, out, _ = run("wavelet-diagnose", "--model", str(trained / "model.bfsm"), "--input", str(tmp_path / "x.bftr"))
    rows = list(csv.DictReader(io.StringIO(out)))
    mean = lambda kind: np.mean([float(r["p_high"]) for r in rows if r["kind"] == kind])
    assert mean("binarized") >= mean("real")


def test_cli_outputs_repeatable(trained, tmp_path):
    save_features(toy_dataset(1, 4, 20).X_test[0], tmp_path / "x.bftr")
    args = ("infer", "--model", str(trained / "model.bfsm"), "--input", str(tmp_path / "x.bftr"), "--delta", "2")
    assert run(*args) == run(*args)
    assert load_model(trained / "model.bfsm").delta_set == (1, 2)
