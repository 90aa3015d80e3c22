"""Experiment configuration: flat key=value files, presets, env overrides.

Config files hold one `key=value` pair per line; `#` starts a comment. An
empty file means all defaults (training defaults: lr 3e-5, batch size 1,
LoRA rank 16 / alpha 32 / dropout 0.05). OBFT_PRECISION=f32|f64 in the
environment overrides the configured precision.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, fields, replace

from .errors import ConfigError
from .model import LoraConfig, ModelConfig
from .numerics import Precision

# Dimension presets. "toy" is the acceptance workhorse; the gpt2-* entries are
# used only for closed-form parameter accounting (no weights are allocated).
PRESETS = {
    "toy": dict(n_layer=4, n_head=4, d_model=128, d_ff=512, vocab_size=256, context_len=128),
    "tiny": dict(n_layer=1, n_head=1, d_model=8, d_ff=32, vocab_size=32, context_len=32),
    "gpt2-small": dict(n_layer=12, n_head=12, d_model=768, d_ff=3072, vocab_size=50257, context_len=1024),
    "gpt2-medium": dict(n_layer=24, n_head=16, d_model=1024, d_ff=4096, vocab_size=50257, context_len=1024),
    "gpt2-large": dict(n_layer=36, n_head=20, d_model=1280, d_ff=5120, vocab_size=50257, context_len=1024),
    "gpt2-xl": dict(n_layer=48, n_head=25, d_model=1600, d_ff=6400, vocab_size=50257, context_len=1024),
}

_LIST_FIELDS = {"kappas", "seeds"}
_INT_FIELDS = {"n_layer", "n_head", "d_model", "d_ff", "vocab_size", "context_len",
               "seq_len", "steps", "batch_size", "lora_rank", "repetitions"}
_FLOAT_FIELDS = {"lr", "lora_alpha", "lora_dropout", "kappa"}
_BOOL_FIELDS = {"include_raw", "assert_monotone", "two_process"}


@dataclass(frozen=True)
class ExperimentConfig:
    preset: str = "toy"
    n_layer: int | None = None
    n_head: int | None = None
    d_model: int | None = None
    d_ff: int | None = None
    vocab_size: int | None = None
    context_len: int | None = None
    precision: str = "f32"
    key_policy: str = "shared"
    key_kind: str = "orthogonal"
    kappa: float | None = None
    kappas: tuple = (1.0, 8.0, 32.0, 128.0, 160.0)
    include_raw: bool = True
    seeds: tuple = (0,)
    seq_len: int = 64
    steps: int = 200
    lr: float = 3e-5
    batch_size: int = 1
    lora_rank: int = 16
    lora_alpha: float = 32.0
    lora_dropout: float = 0.05
    repetitions: int = 5
    assert_monotone: bool = False
    two_process: bool = False
    corpus: str | None = None
    out: str | None = None

    def model_config(self) -> ModelConfig:
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r} (have {sorted(PRESETS)})")
        dims = dict(PRESETS[self.preset])
        for name in ("n_layer", "n_head", "d_model", "d_ff", "vocab_size", "context_len"):
            override = getattr(self, name)
            if override is not None:
                dims[name] = override
        return ModelConfig(precision=Precision.parse(self.precision), **dims)

    def lora_config(self) -> LoraConfig:
        return LoraConfig(rank=self.lora_rank, alpha=self.lora_alpha, dropout=self.lora_dropout)

    def digest(self) -> str:
        """Stable fingerprint of everything that affects results (out path excluded)."""
        parts = []
        for f in sorted(fields(self), key=lambda f: f.name):
            if f.name == "out":
                continue
            parts.append(f"{f.name}={getattr(self, f.name)!r}")
        return hashlib.sha256("\n".join(parts).encode()).hexdigest()[:12]


def _parse_value(key: str, raw: str):
    raw = raw.strip()
    if raw.lower() in ("none", ""):
        return None
    if key in _LIST_FIELDS:
        items = [x.strip() for x in raw.split(",") if x.strip()]
        if key == "seeds":
            return tuple(int(x) for x in items)
        return tuple(float(x) for x in items)
    if key in _INT_FIELDS:
        return int(raw)
    if key in _FLOAT_FIELDS:
        return float(raw)
    if key in _BOOL_FIELDS:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    return raw


def load_config(path: str | None = None) -> ExperimentConfig:
    """Parse a flat key=value file (empty/missing path: all defaults)."""
    values = {}
    if path is not None:
        known = {f.name for f in fields(ExperimentConfig)}
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                stripped = line.split("#", 1)[0].strip()
                if not stripped:
                    continue
                if "=" not in stripped:
                    raise ConfigError(f"{path}:{lineno}: expected key=value, got {line.rstrip()!r}")
                key, raw = stripped.split("=", 1)
                key = key.strip()
                if key not in known:
                    raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
                try:
                    values[key] = _parse_value(key, raw)
                except ValueError as exc:
                    raise ConfigError(f"{path}:{lineno}: {exc}") from exc
    cfg = ExperimentConfig(**values)
    env_precision = os.environ.get("OBFT_PRECISION")
    if env_precision:
        cfg = replace(cfg, precision=Precision.parse(env_precision).value)
    return cfg
