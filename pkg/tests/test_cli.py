import os

import pytest

from dynprune import compiler
from dynprune.cli import main
from dynprune.model import Model

SMALL = "n_train = 256\nn_val = 128\nn_test = 128\nbatch_size = 64\nfinetune_epochs = 1\n"


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "small.txt"
    path.write_text(SMALL)
    return str(path)


def run(*argv):
    return main([str(a) for a in argv])


def test_config_error_exit_code(tmp_path, cfg_file, synthetic_mnist):
    assert run("run", "--config", cfg_file, "--beta", "2", "--data-dir", synthetic_mnist, "--out", tmp_path) == 2
    bad = tmp_path / "bad.txt"
    bad.write_text("what = 1\n")
    assert run("train", "--config", bad, "--data-dir", synthetic_mnist) == 2


def test_data_error_exit_code(tmp_path, cfg_file):
    assert run("run", "--config", cfg_file, "--data-dir", tmp_path / "none", "--out", tmp_path / "o") == 3


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exit_code(tmp_path, cfg_file, synthetic_mnist):
    code = run("train", "--config", cfg_file, "--epochs", 1, "--lr", "1e300", "--data-dir", synthetic_mnist,
               "--out", tmp_path)
    assert code == 4


def test_subcommands_end_to_end(tmp_path, cfg_file, synthetic_mnist, capsys):
    out = tmp_path / "out"
    common = ["--config", cfg_file, "--data-dir", synthetic_mnist, "--epochs", 1, "--seed", 5]
    assert run("train", *common, "--out", out / "pre") == 0
    assert isinstance(compiler.load(str(out / "pre" / "dense.dspc")), Model)

    assert run("group-learn", *common, "--init", out / "pre" / "dense.dspc", "--out", out / "gl") == 0
    assert os.path.exists(out / "gl" / "groups.json")

    assert run("prune", *common, "--model", out / "gl" / "dense.dspc", "--beta", 0.3, "--out", out / "pr") == 0
    assert run("prune", *common, "--model", out / "gl" / "dense.dspc", "--pruner", "channel", "--out", out / "ch") == 0
    assert "[conv4] conv" in (out / "pr" / "structure.txt").read_text()

    assert run("finetune", *common, "--model", out / "pr" / "pruned.dspc", "--out", out / "ft") == 0
    assert run("eval", *common, "--model", out / "ft" / "finetuned.dspc") == 0
    assert "test accuracy" in capsys.readouterr().out

    assert run("inspect", "--model", out / "pr" / "pruned.dspc") == 0
    assert "beta = 0.3" in capsys.readouterr().out

    assert run("brute-force", *common, "--model", out / "gl" / "dense.dspc", "--rates", "0.25,0.5", "--out", out / "bf") == 0
    summary = (out / "bf" / "brute_force_summary.csv").read_text()
    assert "learned" in summary and "average" in summary
    assert len((out / "bf" / "brute_force.csv").read_text().splitlines()) == 1 + 2 * 128


def test_run_prints_summary(tmp_path, cfg_file, synthetic_mnist, capsys):
    assert run("run", "--config", cfg_file, "--epochs", 1, "--data-dir", synthetic_mnist, "--out", tmp_path) == 0
    assert "FLOPs" in capsys.readouterr().out
    assert (tmp_path / "summary.kv").exists()


def test_bad_rates(tmp_path, cfg_file, synthetic_mnist):
    assert run("run", "--config", cfg_file, "--epochs", 1, "--data-dir", synthetic_mnist, "--out", tmp_path) == 0
    assert run("brute-force", "--config", cfg_file, "--data-dir", synthetic_mnist, "--model", tmp_path / "dense.dspc",
               "--rates", "a,b", "--out", tmp_path) == 2
