"""Line-oriented run-configuration files.

Parse rules (bit-exact): UTF-8 text; blank lines and lines whose first
non-space character is '#' are ignored; every other line must read
`section.key = value` where the split happens at the first '='; keys and
values are stripped of surrounding whitespace; booleans are the literals
`true` / `false`; integers parse with int(), reals with float(); enum values
are lowercase names. A repeated, unknown, or type-invalid key raises
ConfigError with its line number; a missing required key raises ConfigError
naming the key.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError
from .net import ModelConfig
from .optim import MSignConfig, TARGET_CHOICES
from .tasks import TASK_CHOICES

ALIGN_METRIC_CHOICES = ("auto", "on", "off")

# Alignment metrics need (T*d)^2 Jacobians; "auto" enables them only here.
ALIGN_AUTO_BUDGET = 512


def _parse_bool(raw: str) -> bool:
    if raw == "true":
        return True
    if raw == "false":
        return False
    raise ValueError(f"expected true/false, got {raw!r}")


def _parse_enum(choices):
    def parse(raw: str) -> str:
        if raw not in choices:
            raise ValueError(f"expected one of {choices}, got {raw!r}")
        return raw

    return parse


# key -> (parser, required, default)
_SCHEMA = {
    "model.n_layers": (int, True, None),
    "model.d_model": (int, True, None),
    "model.n_heads": (int, True, None),
    "model.d_ff": (int, True, None),
    "model.seq_len": (int, True, None),
    "model.vocab": (int, True, None),
    "model.activation": (_parse_enum(("gelu", "silu")), False, "gelu"),
    "model.init_std": (float, True, None),
    "model.wo_downscale": (_parse_bool, False, True),
    "model.zero_query_init": (_parse_bool, False, True),
    "model.norm": (_parse_enum(("layernorm", "rmsnorm")), False, "layernorm"),
    "data.task": (_parse_enum(TASK_CHOICES), True, None),
    "data.seed": (int, True, None),
    "data.vocab": (int, False, None),
    "data.seq_len": (int, False, None),
    "train.base_lr": (float, True, None),
    "train.warmup": (int, True, None),
    "train.total_steps": (int, True, None),
    "train.batch_sequences": (int, False, 1),
    "train.clip_norm": (float, False, 1.0),
    "train.metrics_every": (int, False, 10),
    "train.alignment_metric": (_parse_enum(ALIGN_METRIC_CHOICES), False, "auto"),
    "train.srank_metric": (_parse_bool, False, True),
    "train.divergence_mult": (float, False, 1000.0),
    "train.patience": (int, False, 3),
    "msign.period": (int, False, 100),
    "msign.targets": (_parse_enum(TARGET_CHOICES), False, "none"),
    "msign.rank_tol": (float, False, 1e-12),
    "msign.include_embeddings": (_parse_bool, False, False),
    "run.out_dir": (str, True, None),
}


@dataclass
class RunConfig:
    model: ModelConfig
    task: str
    seed: int
    data_vocab: int
    data_seq_len: int
    base_lr: float
    warmup: int
    total_steps: int
    batch_sequences: int
    clip_norm: float
    metrics_every: int
    alignment_metric: str
    srank_metric: bool
    divergence_mult: float
    patience: int
    msign: MSignConfig
    out_dir: str

    def alignment_enabled(self) -> bool:
        if self.alignment_metric == "on":
            return True
        if self.alignment_metric == "off":
            return False
        return self.model.d_model * self.data_seq_len <= ALIGN_AUTO_BUDGET


def parse_config_text(text: str) -> RunConfig:
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'section.key = value', got {raw!r}", line=lineno)
        key, _, raw_value = line.partition("=")
        key = key.strip()
        raw_value = raw_value.strip()
        if key not in _SCHEMA:
            raise ConfigError(f"unknown key {key!r}", line=lineno)
        if key in values:
            raise ConfigError(f"repeated key {key!r}", line=lineno)
        parser = _SCHEMA[key][0]
        try:
            values[key] = parser(raw_value)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}", line=lineno) from None
    for key, (_, required, default) in _SCHEMA.items():
        if key not in values:
            if required:
                raise ConfigError(f"missing required key {key!r}")
            values[key] = default
    return _build(values)


def _build(values: dict) -> RunConfig:
    try:
        model = ModelConfig(
            n_layers=values["model.n_layers"],
            d_model=values["model.d_model"],
            n_heads=values["model.n_heads"],
            d_ff=values["model.d_ff"],
            seq_len=values["model.seq_len"],
            vocab=values["model.vocab"],
            activation=values["model.activation"],
            init_std=values["model.init_std"],
            wo_downscale=values["model.wo_downscale"],
            zero_query_init=values["model.zero_query_init"],
            norm=values["model.norm"],
        )
        msign = MSignConfig(
            period=values["msign.period"],
            targets=values["msign.targets"],
            rank_tol=values["msign.rank_tol"],
            include_embeddings=values["msign.include_embeddings"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    data_vocab = values["data.vocab"] if values["data.vocab"] is not None else model.vocab
    data_seq_len = values["data.seq_len"] if values["data.seq_len"] is not None else model.seq_len
    cfg = RunConfig(
        model=model,
        task=values["data.task"],
        seed=values["data.seed"],
        data_vocab=data_vocab,
        data_seq_len=data_seq_len,
        base_lr=values["train.base_lr"],
        warmup=values["train.warmup"],
        total_steps=values["train.total_steps"],
        batch_sequences=values["train.batch_sequences"],
        clip_norm=values["train.clip_norm"],
        metrics_every=values["train.metrics_every"],
        alignment_metric=values["train.alignment_metric"],
        srank_metric=values["train.srank_metric"],
        divergence_mult=values["train.divergence_mult"],
        patience=values["train.patience"],
        msign=msign,
        out_dir=values["run.out_dir"],
    )
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    if cfg.total_steps <= cfg.warmup:
        raise ConfigError("train.total_steps must exceed train.warmup")
    if cfg.warmup < 0:
        raise ConfigError("train.warmup must be non-negative")
    if cfg.batch_sequences < 1:
        raise ConfigError("train.batch_sequences must be at least 1")
    if cfg.metrics_every < 1:
        raise ConfigError("train.metrics_every must be at least 1")
    if cfg.base_lr <= 0.0:
        raise ConfigError("train.base_lr must be positive")
    if cfg.clip_norm <= 0.0:
        raise ConfigError("train.clip_norm must be positive")
    if cfg.patience < 1:
        raise ConfigError("train.patience must be at least 1")
    if cfg.divergence_mult <= 0.0:
        raise ConfigError("train.divergence_mult must be positive")
    if not 2 <= cfg.data_seq_len <= cfg.model.seq_len:
        raise ConfigError("data.seq_len must lie in [2, model.seq_len]")
    if not 1 <= cfg.data_vocab <= cfg.model.vocab:
        raise ConfigError("data.vocab must lie in [1, model.vocab]")


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text(encoding="utf-8"))
