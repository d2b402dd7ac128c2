import os

import numpy as np
import pytest

from minicnn.cli import main
from minicnn.dataio import load_dataset

TINY = [
    "--set", "model.spec=tiny", "--set", "train.synthetic_classes=3", "--set", "train.synthetic_size=6",
    "--set", "train.synthetic_per_class=6", "--set", "train.synthetic_test_per_class=2",
    "--set", "train.epochs=2", "--set", "train.batch_size=6", "--set", "train.top_k=2", "--quiet",
]


@pytest.fixture(autouse=True)
def _isolated(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.setattr(os, "environ", dict(os.environ))


def _files(root):
    return sorted(str(p.relative_to(root)) for p in root.rglob("*") if p.is_file())


def test_train_is_deterministic_and_stays_in_out(tmp_path):
    assert main(["train", "--out", "a", "--seed", "7", *TINY]) == 0
    assert main(["train", "--out", "b", "--seed", "7", *TINY]) == 0
    assert _files(tmp_path) == ["a/config.ini", "a/metrics.csv", "a/model.cnnb",
                                "b/config.ini", "b/metrics.csv", "b/model.cnnb"]
    for name in ("metrics.csv", "model.cnnb"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert "seed = 7" in (tmp_path / "a/config.ini").read_text()


def test_config_echo_reproduces_run(tmp_path):
    assert main(["train", "--out", "a", "--seed", "3", *TINY]) == 0
    assert main(["train", "--out", "b", "--config", "a/config.ini", "--quiet"]) == 0
    assert (tmp_path / "a/model.cnnb").read_bytes() == (tmp_path / "b/model.cnnb").read_bytes()


def test_eval_modes_and_hash_check(tmp_path, capsys):
    assert main(["train", "--out", "m", *TINY]) == 0
    capsys.readouterr()
    ck = ["--checkpoint", "m/model.cnnb"]
    assert main(["eval", "--out", "m", "--format", "csv", *ck, *TINY]) == 0
    assert capsys.readouterr().out.startswith("mode,k,loss,top1,topk\nsingle-crop,2,")
    assert main(["eval", "--out", "m", "--mode", "ten-crop", *ck, *TINY]) == 0
    assert (tmp_path / "m/eval-ten-crop.txt").exists()
    assert main(["eval", "--out", "m", *ck, *TINY, "--set", "model.spec=desk_cnn"]) == 3
    assert main(["eval", "--out", "m", *TINY]) == 2


def test_extract(tmp_path):
    assert main(["train", "--out", "m", *TINY]) == 0
    ck = ["--checkpoint", "m/model.cnnb"]
    assert main(["extract", "--out", "m", "--tap", "r2", "--rule", "gap", "--maps", "r1", *ck, *TINY]) == 0
    rows = (tmp_path / "m/features.csv").read_text().splitlines()
    assert rows[0] == "label,f0,f1,f2,f3" and len(rows) == 7
    assert len(list((tmp_path / "m/maps").glob("r1_c*.ppm"))) == 3


def test_exit_codes(tmp_path, capsys):
    (tmp_path / "bad.spec").write_text("name x\ninput 1x4x4\nnode a bogus from=input\n")
    assert main(["analyze", "bad.spec"]) == 2
    assert "line 3" in capsys.readouterr().err
    assert main(["train", *TINY, "--set", "train.images=none.idx", "--set", "train.labels=none.idx"]) == 3
    assert main(["train", *TINY, "--set", "train.speed=1"]) == 2
    assert main(["train", *TINY, "--set", "train.batch_size=500"]) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exit(tmp_path):
    (tmp_path / "lin.spec").write_text(
        "name lin\ninput 1x6x6\nnode fc dense out=3 from=input\nnode prob softmax from=fc\noutput prob\n"
    )
    assert main(["train", *TINY, "--set", "model.spec=lin.spec", "--set", "train.lr=1e200"]) == 4


def test_analyze(capsys):
    assert main(["analyze", "alexnet"]) == 0
    assert "62,378,344" in capsys.readouterr().out
    assert main(["analyze", "--stack-ratio", "64"]) == 0
    assert "81%" in capsys.readouterr().out


def test_gradcheck(capsys):
    assert main(["gradcheck", "--quiet"]) == 0
    assert "PASS" in capsys.readouterr().out


def test_gen_data_and_augment_preview(tmp_path):
    assert main(["gen-data", "--out", "d", "--classes", "3", "--n", "4", "--size", "10", "--quiet"]) == 0
    ds = load_dataset(tmp_path / "d/images.idx", tmp_path / "d/labels.idx")
    assert ds.images.shape == (12, 1, 10, 10)
    assert np.bincount(ds.labels).tolist() == [4, 4, 4]
    assert main(["augment-preview", "--out", "p", "--quiet"]) == 0
    names = {p.name for p in (tmp_path / "p/preview").iterdir()}
    assert len(names) == 14 and "original.ppm" in names


@pytest.mark.slow
def test_transfer_reuses_codebook(tmp_path, capsys):
    small = ["--set", "transfer.source_per_class=10", "--set", "transfer.target_per_class=6",
             "--set", "transfer.source_epochs=1", "--set", "svm.folds=3", "--set", "svm.c_grid=1",
             "--no-finetune", "--format", "csv"]
    assert main(["transfer", "--out", "t", *small]) == 0
    first = (tmp_path / "t/transfer.csv").read_text()
    assert first.splitlines()[0] == "method,accuracy,std,sensitivity,specificity,f1"
    assert main(["transfer", "--out", "t", *small]) == 0
    assert "step 1 skipped" in capsys.readouterr().err
    assert (tmp_path / "t/transfer.csv").read_text() == first
