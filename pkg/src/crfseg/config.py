"""Flat `key = value` run configuration with dotted section names.

Experiments carry ~20 knobs, so runs are driven by a config file that
is diffable and echoed verbatim into the output directory.  Unknown
keys and malformed values are rejected with their line number.
"""

from dataclasses import dataclass

from .errors import FormatError, InvalidArgumentError
from .networks import Architecture
from .pipeline import TrainConfig


def _parse_bool(text):
    lowered = text.strip().lower()
    if lowered in ("true", "yes", "1"):
        return True
    if lowered in ("false", "no", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_int_tuple(text):
    return tuple(int(part.strip()) for part in text.split(",") if part.strip())


def _parse_str_tuple(text):
    return tuple(part.strip() for part in text.split(",") if part.strip())


# key -> (converter, default)
SCHEMA = {
    "seed": (int, 0),
    "out_dir": (str, "runs/out"),
    "data.manifest": (str, ""),
    "data.classes": (int, 3),
    "data.class_names": (_parse_str_tuple, ("background", "skin", "hair")),
    "model.in_channels": (int, 3),
    "model.widths": (_parse_int_tuple, (8, 16, 32)),
    "model.shared_blocks": (int, 2),
    "model.pairwise_widths": (_parse_int_tuple, (16, 16)),
    "model.kernel": (int, 3),
    "crf.lambda": (float, 1.0),
    "solver.tolerance": (float, 1e-8),
    "solver.max_sweeps": (int, 500),
    "superpixels.regions": (int, 256),
    "superpixels.compactness": (float, 10.0),
    "train.learning_rate": (float, 0.01),
    "train.momentum": (float, 0.9),
    "train.epochs": (int, 50),
    "train.batch_size": (int, 1),
    "train.lr_decay": (float, 0.5),
    "train.lr_decay_every": (int, 20),
    "train.pairwise": (_parse_bool, True),
    "pooling.averaged_backward": (_parse_bool, True),
}


@dataclass
class RunConfig:
    values: dict

    def __getitem__(self, key):
        return self.values[key]

    def override(self, key, value):
        if key not in SCHEMA:
            raise InvalidArgumentError(f"unknown config key '{key}'")
        self.values[key] = value

    def architecture(self):
        return Architecture(
            in_channels=self["model.in_channels"],
            widths=self["model.widths"],
            n_classes=self["data.classes"],
            shared_blocks=self["model.shared_blocks"],
            pairwise_widths=self["model.pairwise_widths"],
            kernel=self["model.kernel"],
        )

    def train_config(self):
        return TrainConfig(
            arch=self.architecture(),
            learning_rate=self["train.learning_rate"],
            momentum=self["train.momentum"],
            epochs=self["train.epochs"],
            batch_size=self["train.batch_size"],
            lam=self["crf.lambda"],
            superpixel_regions=self["superpixels.regions"],
            superpixel_compactness=self["superpixels.compactness"],
            seed=self["seed"],
            lr_decay=self["train.lr_decay"],
            lr_decay_every=self["train.lr_decay_every"],
            solver_tolerance=self["solver.tolerance"],
            solver_max_sweeps=self["solver.max_sweeps"],
            pairwise=self["train.pairwise"],
            averaged_pool_backward=self["pooling.averaged_backward"],
        )

    def echo(self):
        """Canonical text form (every key, schema order)."""
        lines = []
        for key in SCHEMA:
            value = self.values[key]
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"


def default_config():
    return RunConfig({key: default for key, (_, default) in SCHEMA.items()})


def parse_config(text, path=None) -> RunConfig:
    config = default_config()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"line {lineno}: expected 'key = value'", path=path)
        key = key.strip()
        value = value.strip()
        if key not in SCHEMA:
            raise FormatError(f"line {lineno}: unknown key '{key}'", path=path)
        converter, _ = SCHEMA[key]
        try:
            config.values[key] = converter(value)
        except ValueError as exc:
            raise FormatError(f"line {lineno}: bad value for '{key}': {exc}", path=path)
    return config


def load_config(path) -> RunConfig:
    try:
        with open(path) as f:
            text = f.read()
    except OSError as exc:
        raise FormatError(f"cannot read config: {exc}", path=path) from exc
    return parse_config(text, path=path)
