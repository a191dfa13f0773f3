"""Flat `key = value` configuration files for the pipeline and trainers.

UTF-8, one assignment per line, `#` comments allowed. Every key is declared
in REGISTRY with its type and default; unknown keys are an error.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    """Raised on malformed config files or unknown keys."""


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"cannot parse boolean from {text!r}")


# key -> (type constructor, default); the documented key list
REGISTRY: dict[str, tuple[Any, Any]] = {
    # synthetic corpus
    "seed": (int, 7),
    "n_entities": (int, 250),
    "n_attrs": (int, 5),
    "n_fillers": (int, 100),
    "heldout_fraction": (float, 0.25),
    "filler_len_min": (int, 40),
    "filler_len_max": (int, 100),
    "eval_fillers": (int, 6),
    "replica_groups": (int, 400),      # -1: generator default (half the facts)
    "replicas_per_group": (int, 4),
    # chunking / windows
    "target_len": (int, 64),       # s
    "input_len": (int, 448),       # n
    "window_len": (int, 512),      # w
    "stride": (int, 64),
    # model
    "d_model": (int, 64),
    "n_heads": (int, 4),
    "n_enc_layers": (int, 2),
    "n_dec_layers": (int, 2),
    "d_ff": (int, 256),
    "k_contexts": (int, 2),
    # retrieval
    "bm25_k1": (float, 1.2),
    "bm25_b": (float, 0.75),
    "overlap_threshold": (int, 8),
    "mine_candidates": (int, 8),
    "embed_dim": (int, 32),
    "embed_d_model": (int, 64),
    # LM training
    "lm_steps": (int, 5000),
    "lm_batch": (int, 16),
    "lm_rate": (float, 1e-3),
    "lm_warmup": (int, 200),
    "lm_sqrt_decay": (_bool, True),
    "lm_tail_steps": (int, 0),
    "lm_tail_rate": (float, 2e-4),
    "lm_optimizer": (str, "adam"),
    "lm_weight_decay": (float, 0.0),
    "lm_clip_norm": (float, 1.0),
    "eval_every": (int, 500),
    "warm_start_fraction": (float, 0.1),
    "warm_start_steps": (int, 0),
    # utility
    "utility_min_count": (int, 50),
    # retriever training
    "retriever_steps": (int, 300),
    "retriever_batch": (int, 16),
    "retriever_rate": (float, 1e-3),
    # QA
    "qa_steps": (int, 2000),
    "qa_batch": (int, 16),
    "qa_rate": (float, 1e-3),
    "qa_ctx_len": (int, 64),
    "qa_k_contexts": (int, 4),
    "qa_eval_every": (int, 100),
    "qa_pool": (int, 8),
    "qa_decode_len": (int, 8),
    # bench
    "bench_queries": (int, 20),
    "bench_k": (int, 2),
    # execution
    "deterministic": (_bool, True),
}


@dataclass
class Config:
    values: dict[str, Any]

    def __getattr__(self, key: str) -> Any:
        try:
            return self.values[key]
        except KeyError:
            raise AttributeError(key)

    def get(self, key: str) -> Any:
        if key not in REGISTRY:
            raise ConfigError(f"unknown config key {key!r}")
        return self.values[key]

    def override(self, **kwargs) -> "Config":
        merged = dict(self.values)
        for key, value in kwargs.items():
            if key not in REGISTRY:
                raise ConfigError(f"unknown config key {key!r}")
            merged[key] = REGISTRY[key][0](value) if not isinstance(value, bool) else value
        return Config(values=merged)


def default_config() -> Config:
    return Config(values={k: d for k, (_, d) in REGISTRY.items()})


def load_config(path: str | Path) -> Config:
    """Parse a flat key = value file against the registry."""
    values = {k: d for k, (_, d) in REGISTRY.items()}
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value, got {raw.rstrip()!r}")
            key, _, text = line.partition("=")
            key = key.strip()
            if key not in REGISTRY:
                raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
            ctor = REGISTRY[key][0]
            try:
                values[key] = ctor(text.strip())
            except ConfigError:
                raise
            except Exception as exc:
                raise ConfigError(f"{path}:{lineno}: bad value for {key}: {exc}")
    return Config(values=values)


def save_config(config: Config, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for key in sorted(config.values):
            f.write(f"{key} = {config.values[key]}\n")
