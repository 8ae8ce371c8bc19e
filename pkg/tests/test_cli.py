import json
import re

import numpy as np
import pytest

from wsseg import cli
from wsseg.core import TrainConfig
from wsseg.data_io import load_dataset, load_logits
from wsseg.encoder import EncoderParams

FAST = ["--encoder-dims", "8,8,16,16", "--epochs-stage1", "2", "--epochs-stage2", "2"]


def run(capsys, *argv):
    code = cli.run([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out.strip(), err


@pytest.fixture
def data(tmp_path, capsys):
    d = tmp_path / "data"
    code, out, _ = run(capsys, "gen", "--shapes", 4, "--points", 64, "--seed", 7, "--out", d)
    assert code == 0 and out == str(d)
    return d


def test_gen_writes_clouds_and_manifest(data):
    clouds = load_dataset(data)
    assert len(clouds) == 4 and all(c.n == 64 and c.num_classes == 3 for c in clouds)
    assert (data / "manifest.txt").exists()


def test_gen_is_reproducible(tmp_path, capsys, data):
    other = tmp_path / "again"
    run(capsys, "gen", "--shapes", 4, "--points", 64, "--seed", 7, "--out", other)
    for a, b in zip(sorted(data.iterdir()), sorted(other.iterdir())):
        assert a.read_bytes() == b.read_bytes()


def test_train_run_directory(tmp_path, capsys, data):
    out = tmp_path / "run"
    code, printed, _ = run(capsys, "train", "--data", data, "--scheme", "1pt", "--method", "ours",
                           *FAST, "--out", out)
    assert code == 0 and printed == str(out)
    names = (out / "manifest.txt").read_text().split()
    assert names == ["config.txt", "losses.csv", "checkpoint.txt", "metrics.json"]
    assert all((out / n).exists() for n in names)
    metrics = json.loads((out / "metrics.json").read_text())
    assert 0 <= metrics["samp_avg"] <= 1
    assert len((out / "losses.csv").read_text().splitlines()) == 5
    assert EncoderParams.load(out / "checkpoint.txt").layer_shapes()[0] == (3, 8)


def test_config_file_and_override(tmp_path, capsys, data):
    cfg = tmp_path / "cfg.txt"
    cfg.write_text("lr = 0.05\nk = 5\nepochs_stage1 = 1\nepochs_stage2 = 1\n")
    out = tmp_path / "run"
    code, _, _ = run(capsys, "train", "--data", data, "--config", cfg, "--k", 6,
                     "--encoder-dims", "8,8,16,16", "--seed", 3, "--out", out)
    assert code == 0
    text = (out / "config.txt").read_text()
    snap, _ = cli.split_config_text(text)
    c = TrainConfig.from_text(snap)
    assert (c.lr, c.k, c.seed, c.epochs_stage1) == (0.05, 6, 3, 1)


def test_rerun_reproduces_bytes(tmp_path, capsys, data):
    outs = [tmp_path / "a", tmp_path / "b"]
    for o, t in zip(outs, (1, 3)):
        run(capsys, "train", "--data", data, "--method", "ours", "--lr", "0.05", *FAST,
            "--threads", t, "--out", o)
    for name in ("checkpoint.txt", "metrics.json", "losses.csv", "config.txt"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()


def test_eval_and_propagate(tmp_path, capsys, data):
    run(capsys, "train", "--data", data, *FAST, "--out", tmp_path / "run")
    ck = tmp_path / "run" / "checkpoint.txt"
    code, printed, _ = run(capsys, "eval", "--checkpoint", ck, "--data", data, "--propagate",
                           "--out", tmp_path / "ev")
    assert code == 0 and printed.endswith("metrics.json")
    assert len(list((tmp_path / "ev" / "predictions").iterdir())) == 4
    cloud = sorted(p for p in data.iterdir() if p.name != "manifest.txt")[0]
    code, printed, _ = run(capsys, "propagate", "--cloud", cloud, "--checkpoint", ck,
                           "--out", tmp_path / "pr")
    assert code == 0
    assert load_logits(printed).shape == (64, 3)
    solver = json.loads((tmp_path / "pr" / "solver.json").read_text())
    assert solver["method"] == "cg" and solver["residual"] <= 1e-8


@pytest.mark.parametrize("method", ["kmeans", "ncut"])
def test_baseline_command(tmp_path, capsys, data, method):
    code, printed, _ = run(capsys, "baseline", "--data", data, "--method", method, "--out", tmp_path / "b")
    assert code == 0
    assert 0 < json.loads(open(printed).read())["samp_avg"] <= 1


def test_gradstudy_command(tmp_path, capsys, data):
    out = tmp_path / "g"
    code, printed, _ = run(capsys, "gradstudy", "--data", data, "--grid", "4,16,64,256",
                           "--draws", 5, "--out", out)
    assert code == 0
    lines = printed.splitlines()
    assert lines[0].startswith("slope ") and lines[-1] == str(out / "gradstudy.csv")
    rows = (out / "gradstudy.csv").read_text().splitlines()
    assert rows[0] == "n,variance" and len(rows) == 5
    assert float(rows[-1].split(",")[1]) == 0.0
    assert np.isfinite(json.loads((out / "fit.json").read_text())["slope"])


def test_budget_and_sweep_commands(tmp_path, capsys, data):
    code, printed, _ = run(capsys, "budget", "--data", data, "--budget", 0.5,
                           "--splits", "0.5:1.0,1.0:0.5", *FAST, "--out", tmp_path / "bu")
    assert code == 0 and len(open(printed).read().splitlines()) == 3
    code, printed, _ = run(capsys, "sweep", "--data", data, "--fractions", "0.1,1.0", *FAST,
                           "--out", tmp_path / "sw")
    assert code == 0 and open(printed).read().startswith("fraction,cat_avg,samp_avg")


# ---------------------------------------------------------------- failures

def test_unknown_flag_is_input_error(capsys, tmp_path):
    code, _, err = run(capsys, "gen", "--bogus", 1, "--out", tmp_path / "x")
    assert code == 1 and err.startswith("error:")
    code, _, err = run(capsys, "nosuchcommand")
    assert code == 1


def test_bad_values_are_input_errors(capsys, tmp_path, data):
    assert run(capsys, "train", "--data", tmp_path / "missing", "--out", tmp_path / "o")[0] == 1
    assert run(capsys, "train", "--data", data, "--k", "zero", "--out", tmp_path / "o")[0] == 1
    assert run(capsys, "budget", "--data", data, "--splits", "0.5:0.5", "--out", tmp_path / "o")[0] == 1
    assert run(capsys, "gen", "--threads", 0, "--out", tmp_path / "o")[0] == 1


def test_nonempty_out_rejected(capsys, tmp_path, data):
    code, _, err = run(capsys, "gen", "--shapes", 2, "--points", 32, "--out", data)
    assert code == 1 and "not empty" in err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_runtime_error(capsys, tmp_path, data):
    code, _, err = run(capsys, "train", "--data", data, "--scheme", "full", "--lr", "1e300",
                       *FAST, "--out", tmp_path / "o")
    assert code == 2 and err.startswith("error: non-finite loss")


def test_help_lists_config_defaults(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.run(["train", "--help"])
    assert exc.value.code == 0
    text = " ".join(capsys.readouterr().out.split())
    for flag, default in [("--k", "10"), ("--eta", "1000.0"), ("--gamma", "1.0"),
                          ("--lambda-mil", "1.0"), ("--lambda-sia", "1.0"),
                          ("--lambda-smo", "1.0"), ("--lr", "0.001"), ("--seed", "0")]:
        assert re.search(rf"{flag} \S+ \(default: {re.escape(default)}\)", text), flag


@pytest.mark.parametrize("command", ["gen", "train", "eval", "propagate", "baseline",
                                     "gradstudy", "budget", "sweep"])
def test_every_command_has_help(capsys, command):
    with pytest.raises(SystemExit):
        cli.run([command, "--help"])
    assert "--out" in capsys.readouterr().out
