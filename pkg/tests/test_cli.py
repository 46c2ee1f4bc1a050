import json

import pandas as pd
import pytest

from quaddyn import cli
from quaddyn import data as dp
from quaddyn import evaluate as ev
from quaddyn import models as mz
from quaddyn import train as tr


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds") / "data"
    code = cli.main(["gen-data", "--traj-kind", "mixed", "--n-traj", "4", "--duration", "3",
                     "--split", "2", "1", "1", "--seed", "1", "--out", str(out)])
    assert code == 0
    return out


TRAIN_SMALL = ["--preset", "desk", "--iterations", "8", "--batch-size", "16",
               "--warmup-iters", "2", "--eval-interval", "4", "--val-windows", "4",
               "--val-horizon", "20"]


def test_gen_data_single_file(tmp_path, capsys):
    out = tmp_path / "ellipse.csv"
    assert cli.main(["gen-data", "--traj-kind", "ellipse", "--duration", "30", "--seed", "0",
                     "--out", str(out)]) == 0
    frame = pd.read_csv(out)
    assert len(frame) == 3000
    assert list(frame.columns) == dp.COLUMNS
    assert "3000 samples" in capsys.readouterr().out


def test_gen_data_directory_has_splits(dataset):
    parts = dp.read_split_manifest(dataset / "splits.txt")
    assert [len(parts[k]) for k in ("train", "val", "test")] == [2, 1, 1]
    assert sorted(p.stem for p in dataset.glob("*.csv")) == sorted(sum(parts.values(), []))


def test_existing_output_needs_force(tmp_path, capsys):
    out = tmp_path / "a.csv"
    args = ["gen-data", "--duration", "1", "--out", str(out)]
    assert cli.main(args) == 0
    assert cli.main(args) == 2
    assert "--force" in capsys.readouterr().err
    assert cli.main(args + ["--force"]) == 0


def test_train_and_eval_end_to_end(dataset, tmp_path, capsys):
    run = tmp_path / "run"
    code = cli.main(["train", "--data", str(dataset), "--arch", "tcn", "--H", "20", "--U", "10",
                     "--head", "decoupled", *TRAIN_SMALL, "--run-dir", str(run)])
    assert code == 0
    assert {p.name for p in run.iterdir()} == {"config.txt", "checkpoint", "train_log.csv",
                                               "manifest.json"}
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["command"] == "train"
    assert manifest["config"]["history"] == 20 and manifest["config"]["unroll"] == 10
    model = mz.load_checkpoint(run / "checkpoint")
    assert manifest["params_sha256"] == mz.params_hash(model)
    assert set(manifest["datasets"]) == {"train", "val"}
    log = pd.read_csv(run / "train_log.csv")
    assert list(log.columns) == tr.LOG_COLUMNS and len(log) == 8

    out = tmp_path / "eval"
    assert cli.main(["eval", "--checkpoint", str(run), "--data", str(dataset),
                     "--horizon", "30", "--run-dir", str(out)]) == 0
    printed = capsys.readouterr().out
    assert "(m/s)^2" in printed and "rad" in printed
    report = pd.read_csv(out / "report.csv")
    assert list(report.columns) == ev.REPORT_COLUMNS
    assert (report["horizon"] == 30).all()
    curve = pd.read_csv(out / "curve.csv")
    assert list(curve.columns) == ev.CURVE_COLUMNS and len(curve) == 30
    summary = json.loads((out / "summary.json").read_text())
    assert set(summary) == set(ev.METRICS)
    assert summary["delta_z"] == pytest.approx(report["delta_z"].mean(), rel=1e-12)


def test_eval_rerun_reproduces_metrics(dataset, tmp_path):
    run = tmp_path / "run"
    cli.main(["train", "--data", str(dataset), "--arch", "mlp", "--H", "2", *TRAIN_SMALL,
              "--run-dir", str(run)])
    for name in ("e1", "e2"):
        cli.main(["eval", "--checkpoint", str(run / "checkpoint"), "--data", str(dataset),
                  "--horizon", "20", "--run-dir", str(tmp_path / name)])
    assert (tmp_path / "e1" / "report.csv").read_bytes() == (tmp_path / "e2" / "report.csv").read_bytes()


def test_unroll_beyond_ten_needs_opt_in(dataset, tmp_path, capsys):
    args = ["train", "--data", str(dataset), "--arch", "mlp", "--H", "1", "--U", "12",
            *TRAIN_SMALL, "--run-dir", str(tmp_path / "r")]
    assert cli.main(args) == 2
    err = capsys.readouterr().err
    assert "unstable" in err and "--allow-unstable" in err
    assert cli.main(args + ["--allow-unstable"]) == 0


def test_help_lists_units(capsys):
    with pytest.raises(SystemExit):
        cli.main(["train", "--help"])
    text = capsys.readouterr().out
    for snippet in ("[samples at 100 Hz]", "[iterations]", "(default: 512)", "(default: auto)"):
        assert snippet in text


def test_config_file_precedence(dataset, tmp_path):
    conf = tmp_path / "c.txt"
    conf.write_text("# desk settings\niterations = 6\nbatch-size = 8\nlr_peak = 0.002\n")
    run = tmp_path / "run"
    assert cli.main(["train", "--data", str(dataset), "--config", str(conf), "--arch", "mlp",
                     "--H", "1", "--preset", "desk", "--warmup-iters", "1", "--eval-interval", "3",
                     "--val-horizon", "10", "--lr-peak", "0.001", "--run-dir", str(run)]) == 0
    cfg = json.loads((run / "manifest.json").read_text())["config"]
    assert (cfg["iterations"], cfg["batch_size"], cfg["lr_peak"]) == (6, 8, 0.001)
    assert cfg["weight_decay"] == 1e-4
    conf.write_text("iterationz = 6\n")
    assert cli.main(["train", "--data", str(dataset), "--config", str(conf),
                     "--run-dir", str(tmp_path / "bad")]) == 2


def test_ingest_missing_input_points_to_download(tmp_path, capsys):
    assert cli.main(["ingest", "--input", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 2
    assert "downloaded" in capsys.readouterr().err


def test_ingest_directory(dataset, tmp_path):
    out = tmp_path / "ing"
    assert cli.main(["ingest", "--input", str(dataset), "--split", "2", "1", "1",
                     "--out", str(out)]) == 0
    assert len(list(out.glob("*.csv"))) == 4
    assert (out / "splits.txt").is_file()


def test_ablate_writes_table(dataset, tmp_path):
    run = tmp_path / "abl"
    assert cli.main(["ablate", "--data", str(dataset), "--archs", "mlp,tcn", "--H", "1,3",
                     "--U", "1", "--seeds", "0,1", "--horizon", "10", "--stride", "50",
                     "--iterations", "3", "--batch-size", "8", "--warmup-iters", "0",
                     "--run-dir", str(run)]) == 0
    table = pd.read_csv(run / "ablation.csv")
    assert len(table) == 4
    blank = table[(table["arch"] == "tcn") & (table["history"] == 1)]
    assert blank["delta_v"].isna().all()
    assert "delta_q_seed1" in table.columns
    assert "-" in (run / "ablation.txt").read_text()


def test_bench_inference(tmp_path):
    out = tmp_path / "bench.csv"
    assert cli.main(["bench-inference", "--archs", "mlp,gru", "--history", "4", "--preset", "desk",
                     "--repeats", "3", "--out", str(out)]) == 0
    frame = pd.read_csv(out)
    assert list(frame["arch"]) == ["mlp", "gru"]
