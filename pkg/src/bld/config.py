"""Run configuration: an INI file with sections mirroring the training
hyperparameter table, validated strictly (unknown sections/keys rejected).

The default config path comes from the BLD_CONFIG environment variable
when no explicit path is given.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field, fields

from .distill import LossWeights, TrainConfig

__all__ = ["RunConfig", "ConfigError", "load_config", "ENV_CONFIG_VAR"]

ENV_CONFIG_VAR = "BLD_CONFIG"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # [paths]
    vocab: str = ""
    merges: str = ""
    teacher_vocab: str = ""
    teacher_merges: str = ""
    teacher: str = "uniform"
    corpus: str = ""
    val_corpus: str = ""
    shards: str = ""
    checkpoint: str = ""
    reports: str = "reports"
    # [beam]
    k: int = 10
    epsilon: float = 0.01
    query_batch: int = 256
    # [loss]
    lambda_kl: float = 0.1
    lambda_byte: float = 1.0
    lambda_token: float = 1.0
    # [optimizer]
    lr: float = 2e-5
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.95
    clip_norm: float = 1.0
    # [schedule]
    scheduler: str = "cosine"
    warmup_steps: int = 100
    # [training]
    epochs: int = 5
    steps: int | None = None
    batch_size: int = 8
    max_seq_len: int = 128
    seed: int = 0
    workers: int = 4
    n_shards: int = 4
    # [byte_head]
    byte_slots: int = 10
    byte_vocab: int = 260
    pretrain_byte_head: bool = False
    # [model]
    d_model: int = 64
    n_layers: int = 2
    # [lora]
    freeze: tuple[str, ...] = field(default_factory=tuple)

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_kl, self.lambda_byte, self.lambda_token)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            steps=self.steps,
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            weight_decay=self.weight_decay,
            betas=(self.beta1, self.beta2),
            clip_norm=self.clip_norm,
            warmup_steps=self.warmup_steps,
            weights=self.loss_weights(),
            freeze=self.freeze,
            seed=self.seed,
        )


_SECTIONS: dict[str, tuple[str, ...]] = {
    "paths": (
        "vocab", "merges", "teacher_vocab", "teacher_merges", "teacher",
        "corpus", "val_corpus", "shards", "checkpoint", "reports",
    ),
    "beam": ("k", "epsilon", "query_batch"),
    "loss": ("lambda_kl", "lambda_byte", "lambda_token"),
    "optimizer": ("lr", "weight_decay", "beta1", "beta2", "clip_norm"),
    "schedule": ("scheduler", "warmup_steps"),
    "training": ("epochs", "steps", "batch_size", "max_seq_len", "seed", "workers", "n_shards"),
    "byte_head": ("byte_slots", "byte_vocab", "pretrain_byte_head"),
    "model": ("d_model", "n_layers"),
    "lora": ("freeze",),
}


def load_config(path: str | None = None) -> RunConfig:
    """Load and validate a RunConfig; missing path yields the defaults."""
    if path is None:
        path = os.environ.get(ENV_CONFIG_VAR)
    cfg = RunConfig()
    if path is None:
        return cfg
    if not os.path.exists(path):
        raise ConfigError(f"config file {path} does not exist")
    parser = configparser.ConfigParser()
    parser.read(path)
    types = {f.name: f.type for f in fields(RunConfig)}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in _SECTIONS[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            current = getattr(cfg, key)
            if key == "freeze":
                value = tuple(p for p in raw.replace(",", " ").split() if p)
            elif key == "steps":
                value = None if raw.lower() in ("", "none") else int(raw)
            elif isinstance(current, bool):
                value = raw.lower() in ("1", "true", "yes", "on")
            elif isinstance(current, int):
                value = int(raw)
            elif isinstance(current, float):
                value = float(raw)
            else:
                value = raw
            setattr(cfg, key, value)
    return cfg
