"""Run configuration: sectioned INI files, overrides and seed substreams.

Precedence, lowest to highest: built-in defaults, the ``--config`` file,
``--set section.key=value`` overrides, then dedicated flags such as ``--seed``.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
import zlib
from dataclasses import dataclass, field, fields

import numpy as np

from .decoder import DecoderConfig
from .scene import SceneConfig
from .training import LossConfig, OptimizerConfig


class ConfigError(ValueError):
    pass


@dataclass
class PartitionConfig:
    cell_low: float = 1.0
    cell_high: float = 0.25


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 0.05
    poly_power: float = 0.9
    steps: int = 2000
    batch_size: int = 2
    checkpoint_every: int = 500

    def optimizer(self) -> OptimizerConfig:
        return OptimizerConfig(lr=self.lr, weight_decay=self.weight_decay, poly_power=self.poly_power, total_steps=self.steps)


@dataclass
class EvalConfig:
    k: int = 16
    thresholds: tuple = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


@dataclass
class ModelConfig:
    n_queries: int = 32
    d_sem: int = 58
    blocks: int = 6
    heads: int = 8
    tau: float = 0.5
    ffn_hidden: int = 128
    d_backbone: int = 32
    encoder_hidden: int = 64
    scales: str = "multi"
    use_regularizer: bool = True
    use_box_loss: bool = True
    use_box_score: bool = True


SECTIONS = {
    "scene": SceneConfig,
    "partition": PartitionConfig,
    "model": ModelConfig,
    "loss": LossConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
}


@dataclass
class RunConfig:
    seed: int = 0
    scene: SceneConfig = field(default_factory=SceneConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def decoder(self) -> DecoderConfig:
        return DecoderConfig(n_classes=self.scene.n_classes, **dataclasses.asdict(self.model))

    def model_dict(self) -> dict:
        """What a checkpoint is bound to: the full decoder config."""
        return self.decoder().to_dict()

    def substream(self, name: str) -> int:
        """Independent integer seed for a named consumer (``data``, ``init``, ``train``)."""
        seq = np.random.SeedSequence([self.seed, zlib.crc32(name.encode())])
        return int(seq.generate_state(1)[0])

    def validate(self) -> "RunConfig":
        try:
            self.scene.validate()
            self.decoder().validate()
        except ValueError as err:
            raise ConfigError(str(err)) from err
        if self.train.steps < 0 or self.train.batch_size < 1 or self.train.checkpoint_every < 1:
            raise ConfigError("train: steps >= 0, batch_size >= 1 and checkpoint_every >= 1 are required")
        if self.eval.k < 1:
            raise ConfigError("eval: k must be at least 1")
        return self

    # ------------------------------------------------------------ INI I/O

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp["run"] = {"seed": str(self.seed)}
        for section in SECTIONS:
            block = getattr(self, section)
            cp[section] = {f.name: _format(getattr(block, f.name)) for f in fields(block)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def set(self, section: str, key: str, raw: str) -> None:
        if section == "run":
            if key != "seed":
                raise ConfigError(f"unknown key run.{key}")
            self.seed = _parse(raw, int, "run.seed")
            return
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        block = getattr(self, section)
        known = {f.name: f for f in fields(block)}
        if key not in known:
            raise ConfigError(f"unknown key {section}.{key}")
        current = getattr(block, key)
        setattr(block, key, _parse(raw, type(current), f"{section}.{key}", current))


def _format(value) -> str:
    if isinstance(value, (tuple, list)):
        return ", ".join(_format(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def _parse(raw: str, kind, where: str, current=None):
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind in (tuple, list):
            elem = type(current[0]) if current else float
            return tuple(elem(v) for v in raw.split(",") if v.strip())
        return kind(raw)
    except ValueError as err:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {kind.__name__}") from err


def from_ini(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text)
    except configparser.Error as err:
        raise ConfigError(f"malformed config file: {err}") from err
    for section in cp.sections():
        for key, raw in cp[section].items():
            cfg.set(section, key, raw)
    return cfg


def load(path=None, overrides=(), seed: int | None = None) -> RunConfig:
    """Build a validated config from defaults, an optional file, overrides and a seed flag."""
    cfg = RunConfig()
    if path is not None:
        try:
            text = open(path, encoding="utf-8").read()
        except OSError as err:
            raise ConfigError(f"cannot read config file {path}: {err.strerror}") from err
        cfg = from_ini(text, cfg)
    for item in overrides:
        lhs, sep, raw = item.partition("=")
        section, dot, key = lhs.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        cfg.set(section, key, raw)
    if seed is not None:
        cfg.seed = seed
    return cfg.validate()
