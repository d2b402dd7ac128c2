import pytest

from minicnn.config import SCHEMA, RunConfig, load_config, parse_config
from minicnn.errors import ConfigError


def test_defaults():
    cfg = RunConfig()
    assert cfg["train", "lr"] == 0.001
    assert cfg["transfer", "taps"] == ("pool5", "r6", "r7")
    assert cfg["svm", "c_grid"] == (0.1, 1.0, 10.0, 100.0)
    assert cfg["model", "checkpoint"] is None


def test_parse_types():
    cfg = parse_config(
        "[train]\nlr = 0.05\nlr_multipliers = fc8.*:10, c1.*:0.5\n"
        "[augment]\nflip = yes\n[transfer]\nsource_classes = 1 2, 3\n"
    )
    assert cfg["train", "lr"] == 0.05
    assert cfg["train", "lr_multipliers"] == (("fc8.*", 10.0), ("c1.*", 0.5))
    assert cfg["augment", "flip"] is True
    assert cfg["transfer", "source_classes"] == (1, 2, 3)


def test_round_trip():
    cfg = parse_config("[train]\nlr = 0.1\nlr_multipliers = a:2\n[model]\ncheckpoint = x.cnnb\n")
    again = parse_config(cfg.to_text())
    assert again.values == cfg.values
    assert set(again.values) == set(SCHEMA)


@pytest.mark.parametrize(
    "text,match",
    [
        ("[nope]\na = 1\n", "unknown section"),
        ("[train]\nlrr = 1\n", "unknown key"),
        ("[train]\nlr = fast\n", "bad value"),
        ("[augment]\nflip = maybe\n", "bad value"),
        ("[train]\nlr_multipliers = fc8\n", "bad value"),
        ("lr = 1\n", "section"),
    ],
)
def test_errors(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_config(text)


def test_overrides(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text("[train]\nepochs = 3\n")
    cfg = load_config(path, ["train.epochs=7", "svm.folds = 4"])
    assert cfg["train", "epochs"] == 7 and cfg["svm", "folds"] == 4
    with pytest.raises(ConfigError, match="section.key=value"):
        load_config(None, ["epochs=3"])
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "missing.ini")
