"""Run configuration: INI-style ``key = value`` text with fixed sections.

Every key has a typed default; unknown sections or keys are errors. The
resolved configuration (defaults filled in, overrides applied) renders back
to text that parses to the same values.
"""
from __future__ import annotations

import configparser
from pathlib import Path

from .errors import ConfigError


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.replace(",", " ").split())


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.replace(",", " ").split())


def _words(text: str) -> tuple[str, ...]:
    return tuple(t for t in text.replace(",", " ").split())


def _multipliers(text: str) -> tuple[tuple[str, float], ...]:
    """``pattern:factor`` pairs separated by commas or spaces."""
    out = []
    for item in _words(text):
        pattern, _, factor = item.rpartition(":")
        if not pattern:
            raise ValueError(f"expected pattern:factor, got {item!r}")
        out.append((pattern, float(factor)))
    return tuple(out)


def _opt_str(text: str):
    return text.strip() or None


def _render(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return ", ".join(f"{p}:{f!r}" for p, f in value)
        return ", ".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


# section -> key -> (parser, default)
SCHEMA: dict[str, dict[str, tuple]] = {
    "model": {
        "spec": (str, "desk_cnn"),
        "checkpoint": (_opt_str, None),
        "init": (str, "scaled"),
        "init_std": (float, 0.01),
    },
    "train": {
        "images": (_opt_str, None),
        "labels": (_opt_str, None),
        "test_images": (_opt_str, None),
        "test_labels": (_opt_str, None),
        "synthetic_classes": (int, 10),
        "synthetic_per_class": (int, 100),
        "synthetic_test_per_class": (int, 50),
        "synthetic_size": (int, 28),
        "seed": (int, 0),
        "batch_size": (int, 64),
        "lr": (float, 0.001),
        "momentum": (float, 0.9),
        "weight_decay": (float, 0.0005),
        "epochs": (int, 10),
        "lr_multipliers": (_multipliers, ()),
        "top_k": (int, 5),
        "eval_mode": (str, "single-crop"),
    },
    "augment": {
        "crop": (int, 0),
        "flip": (_bool, False),
        "pca": (_bool, False),
        "pca_sigma": (float, 0.1),
        "jitter_min": (int, 0),
        "jitter_max": (int, 0),
    },
    "transfer": {
        "spec": (str, "desk_codebook"),
        "source_classes": (_ints, (0, 1, 2, 3, 4)),
        "target_classes": (_ints, (5, 6, 7, 8, 9)),
        "positives": (_ints, (5, 6)),
        "source_per_class": (int, 300),
        "target_per_class": (int, 50),
        "taps": (_words, ("pool5", "r6", "r7")),
        "source_epochs": (int, 15),
        "source_lr": (float, 0.01),
        "source_batch_size": (int, 32),
        "finetune_epochs": (int, 30),
        "finetune_lr": (float, 0.001),
        "finetune_batch_size": (int, 16),
        "replace": (_words, ("fc6", "fc7", "fc8")),
        "lr_multiplier": (float, 10.0),
    },
    "svm": {
        "folds": (int, 5),
        "stratified": (_bool, True),
        "c_grid": (_floats, (0.1, 1.0, 10.0, 100.0)),
        "gamma_grid": (_floats, ()),
    },
}


class RunConfig:
    """Resolved configuration values, addressed as ``cfg["train", "lr"]``."""

    def __init__(self, values: dict[str, dict] | None = None):
        self.values = {s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()}
        for section, keys in (values or {}).items():
            for key, value in keys.items():
                self.values[section][key] = value

    def __getitem__(self, item):
        section, key = item
        return self.values[section][key]

    def set(self, section: str, key: str, text: str, source: str = "override"):
        """Parse ``text`` with the key's parser and store it."""
        if section not in SCHEMA:
            raise ConfigError(f"{source}: unknown section [{section}]; expected one of {sorted(SCHEMA)}")
        if key not in SCHEMA[section]:
            raise ConfigError(
                f"{source}: unknown key {key!r} in [{section}]; expected one of {sorted(SCHEMA[section])}"
            )
        parser = SCHEMA[section][key][0]
        try:
            self.values[section][key] = parser(text)
        except ValueError as exc:
            raise ConfigError(f"{source}: bad value for {section}.{key}: {exc}") from None

    def to_text(self) -> str:
        out = []
        for section, keys in self.values.items():
            out.append(f"[{section}]")
            out += [f"{k} = {_render(v)}" for k, v in keys.items()]
            out.append("")
        return "\n".join(out)

    def save(self, path):
        Path(path).write_text(self.to_text(), encoding="utf-8")


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=None, strict=True)
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    cfg = RunConfig()
    for section in parser.sections():
        for key, value in parser.items(section):
            cfg.set(section, key, value, source)
    return cfg


def load_config(path=None, overrides=()) -> RunConfig:
    """Read ``path`` (defaults only if None), then apply ``section.key=value`` overrides."""
    if path is None:
        cfg = RunConfig()
    else:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        cfg = parse_config(text, str(path))
    for item in overrides:
        lhs, sep, value = item.partition("=")
        section, dot, key = lhs.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        cfg.set(section, key, value.strip(), "--set")
    return cfg
