"""Experiment configuration: strict INI parsing and RunConfig assembly.

A config file is sectioned key/value text. Parsing is strict: unknown
sections or keys are rejected with the offending line, every key has a typed
default, and the fully resolved mapping is echoed into every output file so
any artifact can be traced back to its exact inputs.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .clustering import Topology
from .errors import ConfigError
from .metrics import PartitionSpec
from .model import ModelConfig
from .protocol import RunConfig, TRAINING_MODES
from .seeding import derive_seed


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_int_list(text: str) -> tuple[int, ...]:
    text = text.strip()
    return tuple(int(p) for p in text.split(",") if p.strip()) if text else ()


def _parse_float_list(text: str) -> tuple[float, ...]:
    text = text.strip()
    return tuple(float(p) for p in text.split(",") if p.strip()) if text else ()


def _parse_opt_int(text: str) -> int | None:
    return int(text) if text.strip() else None


# section -> key -> (parser, default)
SCHEMA: dict[str, dict[str, tuple[Callable[[str], Any], Any]]] = {
    "run": {
        "seed": (int, 0),
        "out_dir": (str, "out"),
    },
    "model": {
        "vocab_size": (int, 64),
        "seq_len": (int, 16),
        "hidden_dim": (int, 32),
        "n_blocks": (int, 3),
        "n_heads": (int, 4),
        "lora_rank": (int, 4),
        "split": (_parse_int_list, (1, 1, 1)),
        "n_classes": (int, 4),
        "dtype": (str, "float64"),
    },
    "data": {
        "n_samples": (int, 3000),
        "n_eval": (int, 512),
        "alpha": (float, 0.1),
        "n_poisoned": (int, 4),
        "poisoned_ids": (_parse_int_list, ()),   # overrides n_poisoned when set
        "flip_fraction": (float, 1.0),
    },
    "topology": {
        "latency_min_ms": (float, 20.0),
        "latency_max_ms": (float, 400.0),
        "max_latency_ms": (float, 200.0),
        "bandwidth_bytes_per_s": (float, 6.25e6),
        "latency_csv": (str, ""),                # explicit N x K matrix, optional
    },
    "clustering": {
        "gamma": (float, 0.0),                   # 0: auto (1 / median divergence)
        "w_min": (float, 0.08),
        "n_clusters": (_parse_opt_int, None),
        "max_clusters": (int, 4),
        "normalized_trust": (_parse_bool, True),
        "trust_divergence_weight": (float, 0.25),
        "normalize_coherence": (_parse_bool, True),
        "probe_count": (int, 16),
        "warmup_steps": (int, 320),
        "refingerprint_every": (int, 0),
    },
    "protocol": {
        "n_clients": (int, 20),
        "n_edges": (int, 4),
        "rounds_per_global": (int, 2),
        "lr": (float, 0.25),
        "batch_size": (int, 8),
        "max_global_rounds": (int, 30),
        "conv_threshold": (float, 1e-4),
        "aggregate_head": (_parse_bool, True),
        "fedavg_subset_fraction": (float, 0.5),
        "log_gradients": (_parse_bool, False),
    },
    "codec": {
        "mode": (str, "direct"),
        "sketch_rows": (int, 2),
        "sketch_buckets": (int, 16),
        "subspace_rank": (int, 8),
        "compress_gradients": (_parse_bool, True),
    },
    "comm": {
        "bytes_per_value": (float, 4.0),
    },
    "privacy": {
        "rho_grid": (_parse_float_list, (1.0, 2.0, 4.0, 8.0)),
        "ranks": (_parse_int_list, (8, 16)),
        "n_sequences": (int, 64),
        "sketch_rows": (int, 2),
    },
}


@dataclass
class ExperimentConfig:
    """Resolved configuration: every known key with its final value."""

    values: dict[str, dict[str, Any]]
    path: str

    def get(self, section: str, key: str) -> Any:
        return self.values[section][key]

    def echo(self) -> dict[str, dict[str, Any]]:
        """JSON-safe copy embedded in output files."""
        out: dict[str, dict[str, Any]] = {}
        for sec, keys in sorted(self.values.items()):
            out[sec] = {}
            for key, value in sorted(keys.items()):
                out[sec][key] = list(value) if isinstance(value, tuple) else value
        return out


def _line_of(text: str, section: str, key: str | None) -> int:
    """Best-effort line number of a section header or key for error messages."""
    in_section = False
    for i, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if stripped.startswith("[") and stripped.endswith("]"):
            if key is None and stripped == f"[{section}]":
                return i
            in_section = stripped == f"[{section}]"
        elif in_section and key is not None:
            name = stripped.split("=", 1)[0].split(":", 1)[0].strip()
            if name == key:
                return i
    return 0


def load_config(path: str | Path) -> ExperimentConfig:
    """Parse and validate; unknown sections/keys and bad values are fatal."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text()
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc

    values: dict[str, dict[str, Any]] = {
        sec: {key: default for key, (_, default) in keys.items()}
        for sec, keys in SCHEMA.items()
    }
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(
                f"{path}:{_line_of(text, section, None)}: unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(
                    f"{path}:{_line_of(text, section, key)}: unknown key "
                    f"{key!r} in [{section}]")
            parse, _ = SCHEMA[section][key]
            try:
                values[section][key] = parse(raw)
            except (ValueError, TypeError) as exc:
                raise ConfigError(
                    f"{path}:{_line_of(text, section, key)}: bad value for "
                    f"[{section}] {key}: {exc}") from exc
    return ExperimentConfig(values=values, path=str(path))


def build_model_config(cfg: ExperimentConfig) -> ModelConfig:
    m = cfg.values["model"]
    return ModelConfig(vocab_size=m["vocab_size"], seq_len=m["seq_len"],
                       hidden_dim=m["hidden_dim"], n_blocks=m["n_blocks"],
                       n_heads=m["n_heads"], lora_rank=m["lora_rank"],
                       split=tuple(m["split"]), n_classes=m["n_classes"],
                       dtype=m["dtype"])


def build_topology(cfg: ExperimentConfig, seed: int) -> Topology:
    t = cfg.values["topology"]
    n = cfg.get("protocol", "n_clients")
    k = cfg.get("protocol", "n_edges")
    if t["latency_csv"]:
        latency = np.loadtxt(t["latency_csv"], delimiter=",", ndmin=2)
        if latency.shape != (n, k):
            raise ConfigError(
                f"latency_csv is {latency.shape}, expected ({n}, {k})")
    else:
        rng = np.random.default_rng(derive_seed("topology", seed))
        latency = rng.uniform(t["latency_min_ms"], t["latency_max_ms"], size=(n, k))
    return Topology(latency_ms=latency, max_latency_ms=t["max_latency_ms"],
                    bandwidth_bytes_per_s=t["bandwidth_bytes_per_s"])


def build_partition_spec(cfg: ExperimentConfig, seed: int) -> PartitionSpec:
    d = cfg.values["data"]
    n = cfg.get("protocol", "n_clients")
    if d["poisoned_ids"]:
        poisoned = frozenset(int(p) for p in d["poisoned_ids"])
    else:
        rng = np.random.default_rng(derive_seed("poison-pick", seed))
        count = min(int(d["n_poisoned"]), n)
        poisoned = frozenset(rng.choice(n, size=count, replace=False).tolist())
    return PartitionSpec(alpha=d["alpha"], poisoned=poisoned,
                         flip_fraction=d["flip_fraction"],
                         seed=derive_seed("partition", seed))


def build_run_config(cfg: ExperimentConfig, seed: int | None = None) -> RunConfig:
    if seed is None:
        seed = cfg.get("run", "seed")
    p = cfg.values["protocol"]
    c = cfg.values["clustering"]
    co = cfg.values["codec"]
    if co["mode"] not in TRAINING_MODES:
        raise ConfigError(f"[codec] mode must be one of {TRAINING_MODES}, "
                          f"got {co['mode']!r}")
    return RunConfig(
        model=build_model_config(cfg),
        n_clients=p["n_clients"], n_edges=p["n_edges"],
        topology=build_topology(cfg, seed),
        partition=build_partition_spec(cfg, seed),
        n_samples=cfg.get("data", "n_samples"), n_eval=cfg.get("data", "n_eval"),
        rounds_per_global=p["rounds_per_global"], lr=p["lr"],
        batch_size=p["batch_size"], max_global_rounds=p["max_global_rounds"],
        conv_threshold=p["conv_threshold"], warmup_steps=c["warmup_steps"],
        probe_count=c["probe_count"], refingerprint_every=c["refingerprint_every"],
        gamma=c["gamma"] if c["gamma"] > 0 else None, w_min=c["w_min"],
        n_clusters=c["n_clusters"], max_clusters=c["max_clusters"],
        normalized_trust=c["normalized_trust"],
        trust_divergence_weight=c["trust_divergence_weight"],
        normalize_coherence=c["normalize_coherence"],
        codec_mode=co["mode"],
        sketch_rows=co["sketch_rows"], sketch_buckets=co["sketch_buckets"],
        subspace_rank=co["subspace_rank"],
        compress_gradients=co["compress_gradients"],
        aggregate_head=p["aggregate_head"],
        bytes_per_value=cfg.get("comm", "bytes_per_value"),
        fedavg_subset_fraction=p["fedavg_subset_fraction"],
        log_gradients=p["log_gradients"], seed=seed)
