import numpy as np
import pytest

from rdrsr.cli import main
from rdrsr.data import SyntheticSpec, synth_generate, write_interactions


@pytest.fixture
def dataset(tmp_path):
    synth = synth_generate(SyntheticSpec(n_users=30, n_interests=2, items_per_interest=12, seq_len=7,
                                         active_counts=(1, 2)))
    path = tmp_path / "log.txt"
    write_interactions(synth.log, path)
    return path


TINY = ["--set", "d=8", "--set", "t=4", "--set", "o=5", "--set", "min_user=1", "--set", "min_item=1",
        "--eval-mode", "sampled", "--epochs", "1"]


def test_grad_check_passes(capsys):
    assert main(["grad-check", "--seed", "7"]) == 0
    assert "PASS" in capsys.readouterr().out


def test_missing_dataset_is_an_error(tmp_path, capsys):
    assert main(["train", "--dataset", str(tmp_path / "nope.txt"), "--format", "uit"]) == 2
    assert "not found" in capsys.readouterr().err
    assert main(["train"]) == 2


def test_bad_override_is_an_error(capsys):
    assert main(["train", "--set", "bogus=1"]) == 2
    assert "unknown key" in capsys.readouterr().err


def test_train_then_evaluate(dataset, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", "--dataset", str(dataset), "--format", "uit", "--out", str(out), *TINY]) == 0
    assert (out / "checkpoint.npz").exists() and (out / "metrics.jsonl").exists()
    capsys.readouterr()
    args = ["evaluate", "--checkpoint", str(out / "checkpoint.npz"), "--eval-mode", "sampled"]
    assert main(args) == 0
    first = capsys.readouterr().out
    assert main(args) == 0
    assert capsys.readouterr().out == first
    assert "HR" in first and "NDCG" in first


def test_synth_generate_only(tmp_path):
    assert main(["synth", "--users", "20", "--generate-only", "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "synthetic.txt").read_text().splitlines()
    labels = (tmp_path / "synthetic.labels").read_text().splitlines()
    assert len(lines) == 20 * 20 and len(labels) == len(lines)
    assert np.unique([ln.split()[0] for ln in lines]).size == 20
