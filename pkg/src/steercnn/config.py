"""Run configuration: flat ``section.key = value`` text.

Lines starting with ``#`` (and anything after `` #``) are comments. Every key
must appear in ``SCHEMA``; relative paths are resolved against the directory
of the config file when it is loaded.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

from .basis import FrequencySpec
from .model import ConfigError, ModelConfig, analytic_param_count, match_width


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.replace(" ", "").split(",") if t)


def _spec(text: str) -> FrequencySpec:
    return FrequencySpec.parse(text)


def _opt_int(text: str):
    return None if text.strip().lower() in ("", "none") else int(text)


_PATH = "path"
_OPT_PATH = "optional path"

# key -> (parser, default)
SCHEMA: dict[str, tuple] = {
    "model.n": (int, 8),
    "model.family": (str, "steerable"),
    "model.width": (float, 0.25),
    "model.budget_target": (_opt_int, None),
    "model.stem": (int, 16),
    "model.growth1": (int, 14),
    "model.growth2": (int, 6),
    "model.block_out": (int, 16),
    "model.head_hidden": (_ints, (64, 32)),
    "model.block_units": (_ints, (3, 4, 5, 6)),
    "model.sigma": (float, 0.6),
    "model.spec7": (_spec, FrequencySpec.default(7)),
    "model.spec5": (_spec, FrequencySpec.default(5)),
    "model.seed": (int, 0),
    "train.epochs": (int, 10),
    "train.batch_size": (int, 32),
    "train.lr": (float, 1e-3),
    "train.lr_decay": (float, 0.1),
    "train.lr_decay_at": (float, 0.75),
    "train.seed": (int, 0),
    "data.train_images": (_PATH, "data/train-images-idx3-ubyte"),
    "data.train_labels": (_PATH, "data/train-labels-idx1-ubyte"),
    "data.test_images": (_PATH, "data/t10k-images-idx3-ubyte"),
    "data.test_labels": (_PATH, "data/t10k-labels-idx1-ubyte"),
    "data.train_size": (int, 10000),
    "data.test_size": (int, 1500),
    "data.rotate": (_bool, True),
    "data.input_size": (int, 16),
    "data.seed": (int, 0),
    "output.dir": (_PATH, "runs/default"),
    "output.metrics": (str, "metrics.csv"),
    "output.wall_clock": (_bool, True),
    "report.baseline_config": (_OPT_PATH, None),
    "report.baseline_checkpoint": (_OPT_PATH, None),
    "report.baseline_seed": (int, 1),
}


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)
    source: str | None = None

    def __getitem__(self, key: str):
        return self.values[key]

    @property
    def model(self) -> ModelConfig:
        v = self.values
        try:
            cfg = ModelConfig(
                n=v["model.n"], family=v["model.family"], width=v["model.width"],
                stem=v["model.stem"], growth1=v["model.growth1"], growth2=v["model.growth2"],
                block_out=v["model.block_out"], head_hidden=v["model.head_hidden"],
                block_units=v["model.block_units"], sigma=v["model.sigma"],
                spec7=v["model.spec7"], spec5=v["model.spec5"])
        except ValueError as e:
            raise ConfigError(str(e)) from None
        if v["model.budget_target"] is not None:
            cfg = match_width(cfg, v["model.budget_target"])
        return cfg

    @property
    def metrics_path(self) -> str:
        return os.path.join(self["output.dir"], self["output.metrics"])

    def with_overrides(self, **kv) -> "RunConfig":
        vals = dict(self.values)
        for k, val in kv.items():
            key = k.replace("__", ".")
            if key not in SCHEMA:
                raise ConfigError(f"unknown config key {key!r}")
            vals[key] = val
        return replace(self, values=vals)

    def describe(self) -> str:
        cfg = self.model
        return (f"{cfg.family} n={cfg.n} width={cfg.width:g} "
                f"params={analytic_param_count(cfg)}")


def defaults() -> RunConfig:
    return RunConfig({k: d for k, (_, d) in SCHEMA.items()})


def parse_config(text: str, base_dir: str = ".", source: str | None = None) -> RunConfig:
    values = {k: d for k, (_, d) in SCHEMA.items()}
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split(" #")[0].strip() if not raw.lstrip().startswith("#") else ""
        if not line:
            continue
        where = f"{source or '<config>'}:{lineno}"
        if "=" not in line:
            raise ConfigError(f"{where}: expected 'key = value', got {raw.strip()!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{where}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"{where}: duplicate key {key!r}")
        seen.add(key)
        parser = SCHEMA[key][0]
        if parser in (_PATH, _OPT_PATH):
            if parser == _OPT_PATH and val.lower() in ("", "none"):
                values[key] = None
                continue
            values[key] = os.path.normpath(os.path.join(base_dir, os.path.expanduser(val)))
            continue
        try:
            values[key] = parser(val)
        except ValueError as e:
            raise ConfigError(f"{where}: bad value for {key}: {e}") from None
    for key, (parser, _) in SCHEMA.items():
        # defaults are relative to the config file too
        if parser == _PATH and key not in seen:
            values[key] = os.path.normpath(os.path.join(base_dir, values[key]))
    rc = RunConfig(values, source)
    _validate(rc)
    return rc


def _validate(rc: RunConfig) -> None:
    checks = [
        ("train.epochs", rc["train.epochs"] >= 0, "must be >= 0"),
        ("train.batch_size", rc["train.batch_size"] >= 1, "must be >= 1"),
        ("train.lr", rc["train.lr"] > 0, "must be > 0"),
        ("data.train_size", rc["data.train_size"] >= 1, "must be >= 1"),
        ("data.test_size", rc["data.test_size"] >= 1, "must be >= 1"),
        ("data.input_size", rc["data.input_size"] >= 1, "must be >= 1"),
    ]
    for key, ok, msg in checks:
        if not ok:
            raise ConfigError(f"{key} {msg}")
    cfg = rc.model  # raises ConfigError on inconsistent model settings
    if rc["data.input_size"] % cfg.downsample:
        raise ConfigError(f"data.input_size {rc['data.input_size']} not divisible by {cfg.downsample}")


def load_config(path: str) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    return parse_config(text, os.path.dirname(os.path.abspath(path)), path)
