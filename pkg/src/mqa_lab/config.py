"""Configuration dataclasses and strict dict/JSON plumbing.

Configs are frozen dataclasses; loading from a dict rejects unknown keys so a
typo in a config file or a --set override fails loudly instead of silently
doing nothing.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

from .exceptions import ConfigError

MODES = ("encoder_decoder", "decoder_only")
ATTENTION_KINDS = ("multi_head", "multi_query")
TASKS = ("copy", "reverse")
STRATEGIES = ("greedy", "beam")


@dataclass(frozen=True)
class ModelConfig:
    """Desk-scale transformer: pre-norm blocks, tied embeddings, bias-free
    feed-forward layers (so width alone sets the feed-forward parameter
    count), learned positions.

    Attention kind is chosen per site; dec_self_window, when set, makes
    decoder self-attention local to that many trailing positions.
    """

    mode: str = "encoder_decoder"
    layers: int = 2
    d_model: int = 64
    d_ff: int = 256
    heads: int = 4
    d_k: int = 16
    d_v: int = 16
    vocab_size: int = 32
    max_len: int = 64
    enc_self_kind: str = "multi_head"
    dec_self_kind: str = "multi_head"
    cross_kind: str = "multi_head"
    dec_self_window: int | None = None
    init_seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        for name in ("layers", "d_model", "d_ff", "heads", "d_k", "d_v",
                     "vocab_size", "max_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be >= 2 (one id is reserved)")
        for name in ("enc_self_kind", "dec_self_kind", "cross_kind"):
            if getattr(self, name) not in ATTENTION_KINDS:
                raise ConfigError(f"{name} must be one of {ATTENTION_KINDS}")
        if self.dec_self_window is not None and self.dec_self_window < 1:
            raise ConfigError("dec_self_window must be >= 1 when set")

    @property
    def has_encoder(self) -> bool:
        return self.mode == "encoder_decoder"

    def attention_sites(self) -> tuple[tuple[str, str], ...]:
        """Active (site name, kind) pairs, each occurring `layers` times."""
        if self.has_encoder:
            return (("enc_self", self.enc_self_kind),
                    ("dec_self", self.dec_self_kind),
                    ("cross", self.cross_kind))
        return (("dec_self", self.dec_self_kind),)

    @property
    def ff_layers(self) -> int:
        """Feed-forward layers in the whole model."""
        return self.layers * (2 if self.has_encoder else 1)

    def with_attention_kind(self, kind: str) -> "ModelConfig":
        """Same model with every attention site switched to `kind`."""
        return dataclasses.replace(self, enc_self_kind=kind,
                                   dec_self_kind=kind, cross_kind=kind)


@dataclass(frozen=True)
class OptimizerSettings:
    """Adam with the inverse-square-root warmup schedule:
    lr(t) = lr_scale * d_model**-0.5 * min(t**-0.5, t * warmup_steps**-1.5).
    """

    lr_scale: float = 1.0
    warmup_steps: int = 400
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9

    def __post_init__(self):
        if self.warmup_steps < 1:
            raise ConfigError("warmup_steps must be >= 1")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("betas must lie in [0, 1)")
        if self.lr_scale <= 0 or self.eps <= 0:
            raise ConfigError("lr_scale and eps must be positive")


@dataclass(frozen=True)
class TaskSpec:
    """Synthetic sequence task: emit the source copied or reversed.

    Token id 0 is reserved as the start/separator symbol; content tokens are
    drawn uniformly from [1, vocab_size).
    """

    name: str = "copy"
    length: int = 12
    batch_size: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.name not in TASKS:
            raise ConfigError(f"unknown task {self.name!r}")
        if self.length < 1 or self.batch_size < 1:
            raise ConfigError("length and batch_size must be >= 1")


@dataclass(frozen=True)
class DecodeConfig:
    strategy: str = "greedy"
    beam_size: int = 1
    length_alpha: float = 0.0
    max_steps: int = 32
    eos_id: int | None = None
    cache_policy: str = "growing"

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if self.beam_size < 1:
            raise ConfigError("beam_size must be >= 1")
        if self.strategy == "greedy" and self.beam_size != 1:
            raise ConfigError("greedy decoding is beam_size 1")
        if self.length_alpha < 0:
            raise ConfigError("length_alpha must be >= 0")
        if self.max_steps < 1:
            raise ConfigError("max_steps must be >= 1")
        if self.cache_policy not in ("growing", "padded"):
            raise ConfigError(f"unknown cache_policy {self.cache_policy!r}")


def dataclass_from_dict(cls, data):
    """Build a config dataclass from a plain dict, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError(f"{cls.__name__} config must be an object, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} key(s): {', '.join(unknown)}")
    return cls(**data)


def dataclass_to_dict(obj) -> dict:
    return dataclasses.asdict(obj)


def parse_override_value(text: str):
    """--set values are JSON literals when they parse, bare strings otherwise."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(config: dict, assignment: str) -> None:
    """Apply one 'dotted.key=value' override to a nested config dict."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    path, _, raw = assignment.partition("=")
    keys = path.strip().split(".")
    if not all(keys):
        raise ConfigError(f"override {assignment!r} has an empty key component")
    node = config
    for part in keys[:-1]:
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"override path {path!r}: no such section {part!r}")
        node = node[part]
    if not isinstance(node, dict):
        raise ConfigError(f"override path {path!r} does not address a config object")
    node[keys[-1]] = parse_override_value(raw)
