import csv
import hashlib

import pytest

from prefixtune.cli import main
from prefixtune.config import ConfigError, ExperimentConfig
from prefixtune.data import load_dataset
from prefixtune.model import ModelConfig, init_parameters, save_model

FAST = ["--set", "train_size=6", "--set", "test_size=4", "--set", "epochs=1", "--set", "batch_size=3",
        "--set", "max_decode_len=5", "--set", "beam_size=2", "--set", "learning_rate=0.01"]


@pytest.fixture(scope="module")
def model_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("m") / "model.pfxf"
    save_model(path, init_parameters(ModelConfig(1, 16, 2, 32, 200, 128), seed=0))
    return str(path)


def rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_config_round_trip_and_comments(tmp_path):
    cfg = ExperimentConfig().with_updates(seed=4, learning_rate="1e-3", reparam="false", lengths="1,2")
    assert ExperimentConfig.loads(cfg.dumps()) == cfg
    assert cfg.int_list("lengths") == [1, 2] and cfg.reparam is False
    text = "# comment\nseed = 9  # trailing\n\nstrategy = adapter\n"
    assert ExperimentConfig.loads(text) == ExperimentConfig(seed=9, strategy="adapter")


def test_config_rejects_bad_input():
    with pytest.raises(ConfigError, match="unknown"):
        ExperimentConfig.loads("learning_rte = 0.1")
    with pytest.raises(ConfigError, match="line 1"):
        ExperimentConfig.loads("seed 3")
    with pytest.raises(ConfigError):
        ExperimentConfig().with_updates(seed="three")
    with pytest.raises(ConfigError):
        ExperimentConfig(dtype="float16")


def test_config_defaults():
    c = ExperimentConfig()
    assert (c.prefix_len, c.epochs, c.batch_size, c.learning_rate, c.beam_size) == (10, 10, 5, 5e-5, 5)
    assert c.lengths == "1,5,10,20,40" and c.sizes == "50,100,200,500" and c.init_train_size == 100


def test_unknown_set_key_exits_nonzero(tmp_path, model_path, capsys):
    assert main(["train", "--model", model_path, "--out", str(tmp_path), "--set", "bogus=1"]) == 2
    assert "unknown config keys" in capsys.readouterr().err


def test_missing_checkpoint_exits_nonzero(tmp_path, capsys):
    assert main(["train", "--model", str(tmp_path / "nope.pfxf"), "--out", str(tmp_path)]) == 2
    assert "not found" in capsys.readouterr().err


def test_eval_identical_predictions_scores_one(tmp_path, capsys):
    data = tmp_path / "test.jsonl"
    assert main(["make-data", "--n", "8", "--file", str(data)]) == 0
    preds = tmp_path / "preds.txt"
    preds.write_text("".join(" ".join(e.target) + "\n" for e in load_dataset(data)))
    assert main(["eval", "--data", str(data), "--predictions", str(preds), "--out", str(tmp_path / "ev")]) == 0
    (r,) = rows(tmp_path / "ev" / "metrics.csv")
    assert float(r["bleu"]) == 1.0 and float(r["exact_match"]) == 1.0 and r["count"] == "8"
    preds.write_text("just one line\n")
    assert main(["eval", "--data", str(data), "--predictions", str(preds), "--out", str(tmp_path / "ev")]) == 2


def test_train_then_eval_is_reproducible(tmp_path, model_path):
    data = tmp_path / "train.jsonl"
    main(["make-data", "--n", "6", "--file", str(data)])
    digest = hashlib.sha256(data.read_bytes()).hexdigest()
    out = tmp_path / "run"
    args = ["train", "--model", model_path, "--strategy", "prefix", "--prefix-len", "3", "--train-data", str(data),
            "--out", str(out)] + FAST
    assert main(args) == 0
    assert hashlib.sha256(data.read_bytes()).hexdigest() == digest
    assert {p.name for p in out.iterdir()} >= {"config.txt", "runlog.jsonl", "prefix.pfxp", "summary.csv"}
    assert ExperimentConfig.load(out / "config.txt").prefix_len == 3
    first = out / "prefix.pfxp"
    blob = first.read_bytes()
    assert main(["train", "--model", model_path, "--config", str(out / "config.txt"), "--train-data", str(data),
                 "--out", str(out)]) == 0
    assert first.read_bytes() == blob
    csvs = []
    for k in range(2):
        ev = tmp_path / f"ev{k}"
        assert main(["eval", "--model", model_path, "--prefix", str(first), "--out", str(ev)] + FAST) == 0
        csvs.append((ev / "metrics.csv").read_text())
    assert csvs[0] == csvs[1]


@pytest.mark.parametrize("strategy", ["adapter", "finetune", "embedding", "infix"])
def test_train_other_strategies(tmp_path, model_path, strategy):
    out = tmp_path / strategy
    assert main(["train", "--model", model_path, "--strategy", strategy, "--prefix-len", "2", "--out", str(out)]
                + FAST) == 0
    ckpt = out / ("prefix.pfxp" if strategy in ("embedding", "infix") else "model.pfxf")
    assert ckpt.exists()
    flag = "--prefix" if ckpt.suffix == ".pfxp" else "--model"
    args = ["eval", "--model", model_path, flag, str(ckpt), "--out", str(tmp_path / "ev")] + FAST
    if flag == "--model":
        args = ["eval", "--model", str(ckpt), "--out", str(tmp_path / "ev")] + FAST
    assert main(args) == 0


def test_grid_subcommands(tmp_path, model_path):
    out = tmp_path / "sweep"
    assert main(["sweep-prefix-length", "--model", model_path, "--lengths", "1,2", "--out", str(out)] + FAST) == 0
    sweep = rows(out / "sweep.csv")
    assert [r["prefix_len"] for r in sweep] == ["1", "2"] and {"dev_bleu", "test_bleu"} <= set(sweep[0])
    again = tmp_path / "again"
    assert main(["sweep-prefix-length", "--model", model_path, "--config", str(out / "config.txt"),
                 "--out", str(again)]) == 0
    assert (again / "sweep.csv").read_text() == (out / "sweep.csv").read_text()

    out = tmp_path / "low"
    assert main(["lowdata", "--model", model_path, "--sizes", "3", "--strategies", "prefix,finetune",
                 "--set", "n_subsets=2", "--set", "n_seeds=2", "--out", str(out)] + FAST) == 0
    low = rows(out / "lowdata.csv")
    assert sum(r["strategy"] == "prefix-10" for r in low) == 4 and sum(r["strategy"] == "finetune" for r in low) == 4
    assert [r["strategy"] for r in low][-1] == "frozen"

    out = tmp_path / "abl"
    assert main(["ablate", "--model", model_path, "--out", str(out)] + FAST) == 0
    assert [r["variant"] for r in rows(out / "ablate.csv")] == ["prefix", "emb-1", "emb-10", "emb-20", "infix-1",
                                                               "infix-10", "infix-20"]
    out = tmp_path / "init"
    assert main(["init-study", "--model", model_path, "--set", "init_train_size=4", "--out", str(out)] + FAST) == 0
    assert [r["init"] for r in rows(out / "init_study.csv")] == ["random", "relevant", "irrelevant"]

    out = tmp_path / "ext"
    assert main(["extrapolate", "--model", model_path, "--strategies", "prefix", "--out", str(out)] + FAST) == 0
    assert [r["strategy"] for r in rows(out / "extrapolate.csv")] == ["frozen", "prefix-10"]


def test_serve_batch(tmp_path, model_path, capsys):
    prefixes = []
    for k, n in enumerate((2, 4)):
        out = tmp_path / f"p{k}"
        main(["train", "--model", model_path, "--prefix-len", str(n), "--seed", str(k), "--out", str(out)] + FAST)
        prefixes += ["--prefix", f"task{k}={out / 'prefix.pfxp'}"]
    req = tmp_path / "req.tsv"
    req.write_text("task0\tname : name1 | area : area2\ntask9\tname : name1\ntask1\tname : name3\n"
                   "task0\tunknownword\n")
    capsys.readouterr()
    assert main(["serve-batch", "--model", model_path, "--requests", str(req), "--max-len", "4"] + prefixes) == 0
    lines = capsys.readouterr().out.splitlines()
    assert [line.split("\t")[0] for line in lines] == ["task0", "task9", "task1", "task0"]
    assert "ERROR" in lines[1] and "ERROR" in lines[3] and "ERROR" not in lines[0] + lines[2]
    assert all(len(line.split("\t")[1].split()) <= 4 for line in (lines[0], lines[2]))


def test_module_entry_point_runs():
    import subprocess
    import sys
    r = subprocess.run([sys.executable, "-m", "prefixtune", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "serve-batch" in r.stdout
