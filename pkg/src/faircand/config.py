"""Run configuration: defaults, INI files, and flag overrides.

Config files use flat ``key = value`` pairs in one section per pipeline
stage. Precedence is explicit: built-in defaults, then the file, then
command-line flags, so defaults never drift silently.
"""
from __future__ import annotations

import configparser
import dataclasses
import json
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .corpus import SyntheticSpec
from .io import atomic_write_text


@dataclass
class RunConfig:
    # [data]
    dataset: str = ""
    synthetic: bool = True
    synth_queries: int = 2000
    synth_items_per_group: int = 25
    synth_probs_adv: str = "linear:0.95:0.15"
    synth_probs_disadv: str = "linear:0.75:0.05"
    group_feature: int = 135
    # [split]
    train_fraction: float = 0.01
    sim_fraction: float = 0.69
    test_fraction: float = 0.30
    seed: int = 0
    # [model]
    model_kind: str = "auto"
    score_feature: int = 1
    learning_rate: float = 0.1
    iterations: int = 1000
    l2: float = 1e-4
    # [corruption]
    epsilon_disadv: float = 0.0
    corrupt_group: str = "disadv"
    beta_a: float = 1.0
    beta_b: float = 10.0
    # [log]
    m: int = 100_000
    t_max: int = 50
    # [select]
    lam: float = 100.0
    alpha: float = 0.1
    rule: str = "monotone"
    target_total: float = 5.0
    targets: str = ""
    # [experiment]
    sweep: str = "m"
    sweep_values: str = "1000,10000,100000"
    replications: int = 50
    methods: str = "all"
    threads: int = 1

    def resolved(self) -> dict:
        """JSON-ready snapshot of every resolved value."""
        return dataclasses.asdict(self)

    def synth_spec(self) -> SyntheticSpec:
        return SyntheticSpec(
            probabilities={
                "adv": _parse_probs(self.synth_probs_adv, self.synth_items_per_group),
                "disadv": _parse_probs(self.synth_probs_disadv, self.synth_items_per_group),
            },
            n_queries=self.synth_queries,
            score_feature=self.score_feature,
        )

    def split_fractions(self) -> tuple[float, float, float]:
        return (self.train_fraction, self.sim_fraction, self.test_fraction)

    def explicit_targets(self) -> dict[str, float] | None:
        if not self.targets:
            return None
        out: dict[str, float] = {}
        for part in self.targets.split(","):
            name, _, value = part.partition("=")
            if not value:
                raise ValueError(f"bad targets entry {part!r}; expected group=value")
            out[name.strip()] = float(value)
        return out

    def method_list(self) -> tuple[str, ...]:
        from .evaluation import METHOD_NAMES

        if self.methods.strip() in ("", "all"):
            return METHOD_NAMES
        return tuple(s.strip() for s in self.methods.split(",") if s.strip())


_SECTIONS = {
    "data": (
        "dataset", "synthetic", "synth_queries", "synth_items_per_group",
        "synth_probs_adv", "synth_probs_disadv", "group_feature",
    ),
    "split": ("train_fraction", "sim_fraction", "test_fraction", "seed"),
    "model": ("model_kind", "score_feature", "learning_rate", "iterations", "l2"),
    "corruption": ("epsilon_disadv", "corrupt_group", "beta_a", "beta_b"),
    "log": ("m", "t_max"),
    "select": ("lam", "alpha", "rule", "target_total", "targets"),
    "experiment": ("sweep", "sweep_values", "replications", "methods", "threads"),
}

_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _parse_probs(text: str, count: int) -> tuple[float, ...]:
    """Either ``linear:<start>:<end>`` over ``count`` slots or an explicit
    comma-separated list."""
    text = text.strip()
    if text.startswith("linear:"):
        _, start, end = text.split(":")
        return tuple(float(v) for v in np.linspace(float(start), float(end), count))
    return tuple(float(v) for v in text.split(","))


def _coerce(name: str, raw: str):
    kind = _FIELD_TYPES[name]
    if kind == "bool":
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw


def load_config(path) -> RunConfig:
    """Built-in defaults overlaid with the file's values."""
    parser = configparser.ConfigParser()
    with open(path, "r", encoding="utf-8") as fh:
        parser.read_file(fh)
    config = RunConfig()
    for section, keys in _SECTIONS.items():
        if not parser.has_section(section):
            continue
        for key in parser.options(section):
            if key not in keys:
                raise ValueError(f"unknown key {key!r} in section [{section}] of {path}")
            setattr(config, key, _coerce(key, parser.get(section, key)))
    return config


def apply_overrides(config: RunConfig, overrides: dict) -> RunConfig:
    """Flag values (already typed) win over file values."""
    out = dataclasses.replace(config)
    for key, value in overrides.items():
        if value is None:
            continue
        if key not in _FIELD_TYPES:
            raise ValueError(f"unknown config field {key!r}")
        setattr(out, key, value)
    return out


def save_snapshot(config: RunConfig, path) -> None:
    """Write the resolved config back out as a re-runnable INI file."""
    parser = configparser.ConfigParser()
    for section, keys in _SECTIONS.items():
        parser.add_section(section)
        for key in keys:
            parser.set(section, key, str(getattr(config, key)))
    from io import StringIO

    buf = StringIO()
    parser.write(buf)
    atomic_write_text(path, buf.getvalue())


def config_json(config: RunConfig) -> str:
    return json.dumps(config.resolved(), sort_keys=True)
