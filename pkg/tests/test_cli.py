import hashlib
import subprocess
import sys

import numpy as np
import pytest

from blockprune.cli import main
from blockprune.config import ConfigError, parse_config_text, resolve
from blockprune.data import write_cifar10_binary

FAST = ["--set", "synth_per_class=24", "--set", "epochs=2"]


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    assert main(["train", "--out", str(out), *FAST]) == 0
    return out


def test_train_writes_artifacts(trained):
    for name in ("model.ckpt", "model.netspec", "train_report.csv", "manifest.txt"):
        assert (trained / name).is_file()
    assert len((trained / "train_report.csv").read_text().splitlines()) == 3
    manifest = (trained / "manifest.txt").read_text()
    assert "config.seed = 0" in manifest
    assert f"sha256.model.ckpt = {sha(trained / 'model.ckpt')}" in manifest


def test_train_same_seed_same_hash(trained, tmp_path):
    assert main(["train", "--out", str(tmp_path), *FAST]) == 0
    assert sha(tmp_path / "model.ckpt") == sha(trained / "model.ckpt")


def test_train_missing_dataset_key(tmp_path, capsys):
    code = main(["train", "--out", str(tmp_path), "--set", "data=cifar10"])
    assert code == 2
    assert "cifar10_train" in capsys.readouterr().err


def test_train_missing_dataset_file(tmp_path, capsys):
    code = main(["train", "--out", str(tmp_path), "--set", "data=cifar10", "--set", f"cifar10_train={tmp_path}/nope.bin"])
    assert code == 2
    assert "cifar10_train" in capsys.readouterr().err


@pytest.mark.parametrize("size", [6000, 3072])
def test_malformed_cifar_exits_2(tmp_path, capsys, size):
    (tmp_path / "bad.bin").write_bytes(bytes(size))
    code = main(["train", "--out", str(tmp_path), "--set", "data=cifar10", "--set", f"cifar10_train={tmp_path / 'bad.bin'}"])
    assert code == 2
    assert f"length {size} bytes" in capsys.readouterr().err


def test_corrupt_cifar_label_exits_3(tmp_path, capsys):
    (tmp_path / "bad.bin").write_bytes(bytes([11]) + bytes(3072))
    code = main(["train", "--out", str(tmp_path), "--set", "data=cifar10", "--set", f"cifar10_train={tmp_path / 'bad.bin'}"])
    assert code == 3
    assert "record 0" in capsys.readouterr().err


def test_train_on_cifar_files(tmp_path):
    rng = np.random.default_rng(0)
    write_cifar10_binary(tmp_path / "a.bin", rng.integers(0, 256, (20, 3, 32, 32)), rng.integers(0, 10, 20))
    write_cifar10_binary(tmp_path / "v.bin", rng.integers(0, 256, (6, 3, 32, 32)), rng.integers(0, 10, 6))
    args = ["train", "--out", str(tmp_path / "o"), "--set", "data=cifar10", "--set", "model=resnet20"]
    args += ["--set", f"cifar10_train={tmp_path / 'a.bin'}", "--set", f"cifar10_val={tmp_path / 'v.bin'}", "--set", "epochs=1"]
    assert main(args) == 0


def prune_args(trained, out, *extra):
    return ["prune", "--set", f"checkpoint={trained / 'model.ckpt'}", "--out", str(out), *FAST, *extra]


def test_prune_greedy_k3(trained, tmp_path, capsys):
    assert main(prune_args(trained, tmp_path, "--method", "greedy", "--k", "3")) == 0
    rows = (tmp_path / "trajectory.csv").read_text().splitlines()
    assert len(rows) == 1 + 4
    for j in (1, 2, 3):
        assert (tmp_path / f"importance_step{j}.csv").is_file()
        assert (tmp_path / f"greedy_step{j}.ckpt").is_file() and (tmp_path / f"greedy_step{j}.netspec").is_file()
    assert "greedy: removed" in capsys.readouterr().out


def test_pruned_checkpoint_benches(trained, tmp_path, capsys):
    assert main(prune_args(trained, tmp_path / "p", "--method", "sequential", "--k", "2")) == 0
    ckpt = tmp_path / "p" / "sequential_step2.ckpt"
    assert main(["bench", "--set", f"checkpoint={ckpt}", "--set", "model=", "--runs", "5", "--out", str(tmp_path / "b")]) == 0
    assert "flops=" in capsys.readouterr().out


def test_sequential_order_independent_of_seed(trained, tmp_path):
    orders = []
    for seed in ("0", "7"):
        out = tmp_path / seed
        assert main(prune_args(trained, out, "--method", "sequential", "--k", "3", "--set", f"split_seed={seed}")) == 0
        orders.append([line.split(",")[1] for line in (out / "trajectory.csv").read_text().splitlines()[2:]])
    assert orders[0] == orders[1] == ["10", "9", "7"]


def test_prune_brute(trained, tmp_path):
    assert main(prune_args(trained, tmp_path, "--method", "brute", "--k", "2")) == 0
    assert len((tmp_path / "brute_force.csv").read_text().splitlines()) == 1 + 1 + 6 + 15
    assert len((tmp_path / "brute_best.csv").read_text().splitlines()) == 1 + 3


def test_brute_on_resnet56_refused(tmp_path, capsys):
    code = main(["prune", "--method", "brute", "--set", "model=resnet56", "--out", str(tmp_path)])
    assert code == 2
    assert "2^24" in capsys.readouterr().err


@pytest.mark.parametrize("extra,msg", [(["--k", "7"], "'k'"), (["--set", "finetune=maybe"], "finetune"), (["--set", "bogus=1"], "bogus")])
def test_prune_bad_config(trained, tmp_path, capsys, extra, msg):
    assert main(prune_args(trained, tmp_path, *extra)) == 2
    assert msg in capsys.readouterr().err


def test_bench_runs(trained, tmp_path, capsys):
    assert main(["bench", "--set", f"checkpoint={trained / 'model.ckpt'}", "--runs", "10", "--out", str(tmp_path)]) == 0
    text = (tmp_path / "latency.txt").read_text()
    assert "runs=10\n" in text and "warmup=50\n" in text
    assert capsys.readouterr().out == text


def test_bench_default_runs(trained, tmp_path):
    assert main(["bench", "--set", f"checkpoint={trained / 'model.ckpt'}", "--out", str(tmp_path)]) == 0
    assert "runs=1000\n" in (tmp_path / "latency.txt").read_text()


def test_bench_missing_checkpoint(tmp_path, capsys):
    assert main(["bench", "--set", f"checkpoint={tmp_path}/missing.ckpt", "--out", str(tmp_path)]) == 2
    assert "checkpoint" in capsys.readouterr().err


def test_bench_garbage_checkpoint(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"not a checkpoint")
    assert main(["bench", "--set", f"checkpoint={tmp_path / 'x.ckpt'}", "--out", str(tmp_path)]) == 2


def test_config_file_and_override(trained, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"# sequential run\ncheckpoint = {trained / 'model.ckpt'}\nmethod = sequential\nk = 1\nsynth_per_class = 24\n")
    assert main(["prune", "--config", str(cfg), "--k", "2", "--out", str(tmp_path / "o")]) == 0
    assert len((tmp_path / "o" / "trajectory.csv").read_text().splitlines()) == 1 + 3
    assert "config.k = 2" in (tmp_path / "o" / "manifest.txt").read_text()


def test_config_parsing_errors(tmp_path):
    with pytest.raises(ConfigError, match="unknown key"):
        parse_config_text("mdoel = desk\n")
    with pytest.raises(ConfigError, match="key = value"):
        parse_config_text("just words\n")
    with pytest.raises(ConfigError, match="not found"):
        resolve(str(tmp_path / "none.cfg"), {})
    assert main(["train", "--config", str(tmp_path / "none.cfg")]) == 2


def test_usage_errors(capsys):
    assert main([]) == 2
    assert main(["prune", "--method", "magic"]) == 2
    assert main(["train", "--set", "novalue"]) == 2


def test_console_script_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "blockprune.cli", "prune", "--method", "brute", "--set", "model=resnet56", "--out", str(tmp_path)],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 2 and proc.stdout == "" and "brute force" in proc.stderr


def test_bad_training_override_is_usage_error(tmp_path, capsys):
    assert main(["train", "--out", str(tmp_path), "--set", "epochs=0"]) == 2
    assert "epochs" in capsys.readouterr().err
