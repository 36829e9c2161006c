import csv
import re
import subprocess
import sys
import time

import pytest

from needleforge import data as dt
from needleforge import models as md
from needleforge.cli import main


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def dataset(workdir):
    path = workdir / "d.octf"
    assert main(["simulate", "--duration", "4", "--ts", "6", "--seed", "1", "--out", str(path)]) == 0
    return path


@pytest.fixture(scope="module")
def trained(workdir, dataset):
    paths = {}
    for arch in ("cnn1d", "gru"):
        out = workdir / f"{arch}.nfm"
        assert main(["train", "--data", str(dataset), "--arch", arch, "--epochs", "2", "--out", str(out)]) == 0
        paths[arch] = out
    return paths


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_simulate_reports_counts(workdir, capsys):
    out = workdir / "s10.octf"
    assert main(["simulate", "--duration", "10", "--ts", "1", "--out", str(out)]) == 0
    n = int(re.search(r"(\d+) windows", capsys.readouterr().out).group(1))
    assert abs(n - 500 * 10) <= 10
    ds = dt.load_dataset(out)
    assert ds.t_s == 1 and ds.profile["seed"] == 0


def test_simulate_is_deterministic(workdir, dataset):
    again = workdir / "d2.octf"
    main(["simulate", "--duration", "4", "--ts", "6", "--seed", "1", "--out", str(again)])
    assert again.read_bytes() == dataset.read_bytes()


def test_train_writes_history(trained):
    hist = rows(trained["gru"].with_name("gru.nfm.history.csv"))
    assert hist[0] == ["epoch", "loss", "val_mae", "lr", "seconds"] and len(hist) == 3
    m = md.load(trained["gru"])
    assert m.metadata["train"]["seed"] == 0 and m.spec.t_s == 6


def test_cnn1d_smoke_is_fast(workdir):
    path = workdir / "k.octf"
    main(["simulate", "--duration", "2.2", "--ts", "1", "--out", str(path)])
    assert len(dt.load_dataset(path)) >= 1000
    t0 = time.perf_counter()
    assert main(["train", "--data", str(path), "--arch", "cnn1d", "--epochs", "2", "--out", str(workdir / "k.nfm")]) == 0
    assert time.perf_counter() - t0 < 60


def test_compare_outputs(workdir, dataset, trained, capsys):
    out = workdir / "report.csv"
    code = main(["compare", "--data", str(dataset), "--reps", "3", "--out", str(out),
                 str(trained["cnn1d"]), str(trained["gru"])])
    assert code == 0
    table = rows(out)
    assert table[0][:6] == ["model", "mae_mean", "mae_std", "rmae_mean", "rmae_std", "cc"]
    assert len(table) == 3
    names = [r[0] for r in table[1:]]
    p = {(names[i], table[0][6 + j][5:]): table[1 + i][6 + j] for i in range(2) for j in range(2)}
    assert p[(names[0], names[0])] == "n/a" and p[(names[0], names[1])] == p[(names[1], names[0])]
    text = capsys.readouterr().out
    for r in table[1:]:
        assert r[0] in text and f"{float(r[1]):.2f}" in text and f"{float(r[5]):.4f}" in text
    assert len(rows(workdir / "report.timing.csv")) == 3
    assert (workdir / "report.json").exists() and (workdir / "report.boxplot.csv").exists()


def test_predict_rows(workdir, dataset, trained):
    out = workdir / "pred.csv"
    assert main(["predict", "--data", str(dataset), "--model", str(trained["gru"]), "--out", str(out)]) == 0
    n_test = int((dt.load_dataset(dataset).tags == "test").sum())
    table = rows(out)
    assert table[0] == ["target", "prediction"] and len(table) == n_test + 1


def test_bench_reps(trained, capsys):
    assert main(["bench", "--model", str(trained["gru"]), "--reps", "7"]) == 0
    assert "over 7 passes" in capsys.readouterr().out


def test_evaluate(dataset, trained, capsys):
    assert main(["evaluate", "--data", str(dataset), "--model", str(trained["gru"])]) == 0
    assert "MAE" in capsys.readouterr().out


def test_sweep_degenerate(workdir):
    out = workdir / "sweep.csv"
    code = main(["sweep", "--duration", "3", "--ts-values", "1", "--arch", "cnn1d", "--epochs", "1",
                 "--out", str(out)])
    assert code == 0
    table = rows(out)
    assert table[0] == ["t_s", "arch", "val_mae", "train_seconds", "seed"] and table[1][:2] == ["1", "cnn1d"]


def test_exit_codes(workdir, dataset, trained, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--bogus"])
    assert exc.value.code == 2
    broken = workdir / "broken.octf"
    broken.write_bytes(dataset.read_bytes()[:100])
    assert main(["evaluate", "--data", str(broken), "--model", str(trained["gru"])]) == 3
    other = workdir / "other.octf"
    main(["simulate", "--duration", "2", "--ts", "4", "--out", str(other)])
    assert main(["compare", "--data", str(other), "--reps", "2", "--out", str(workdir / "x.csv"),
                 str(trained["gru"])]) == 4
    assert "does not match" in capsys.readouterr().err
    assert main(["simulate", "--duration", "2", "--out", str(workdir / "missing" / "x.octf")]) == 4
    assert main(["simulate", "--profile", "granite", "--duration", "2", "--out", str(other)]) == 4


def test_custom_profile_json(workdir):
    prof = workdir / "custom.json"
    import dataclasses
    import json

    fields = dataclasses.asdict(dt.PROFILES["soft"])
    fields.pop("name")
    prof.write_text(json.dumps(fields))
    out = workdir / "c.octf"
    assert main(["simulate", "--profile", str(prof), "--duration", "2", "--ts", "2", "--out", str(out)]) == 0
    assert dt.load_dataset(out).profile["profile"]["name"] == "custom"


def test_serve_answers_hello(trained):
    from needleforge import serve as sv

    proc = subprocess.Popen([sys.executable, "-m", "needleforge.cli", "serve", "--model", str(trained["gru"]),
                             "--addr", "127.0.0.1:0"], stdout=subprocess.PIPE, text=True)
    try:
        line = proc.stdout.readline()
        port = int(line.rsplit(":", 1)[1])
        t0 = time.perf_counter()
        with sv.Client(("127.0.0.1", port), timeout=1.0) as c:
            assert c.hello()["kind"] == "gru"
        assert time.perf_counter() - t0 < 1.0
    finally:
        proc.terminate()
        proc.wait(10)


def test_pipeline_is_byte_reproducible(tmp_path):
    outputs = []
    for run in ("a", "b"):
        d = tmp_path / run
        d.mkdir()
        main(["simulate", "--duration", "3", "--ts", "4", "--seed", "7", "--out", str(d / "d.octf")])
        main(["train", "--data", str(d / "d.octf"), "--arch", "convgru_cnn_plus", "--epochs", "1", "--seed", "7",
              "--out", str(d / "m.nfm")])
        main(["compare", "--data", str(d / "d.octf"), "--reps", "2", "--out", str(d / "r.csv"), str(d / "m.nfm")])
        outputs.append([(d / name).read_bytes() for name in ("d.octf", "m.nfm", "r.csv")])
    assert outputs[0] == outputs[1]
