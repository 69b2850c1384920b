"""Run configuration: one JSON document, validated up front, hashed,
and echoed verbatim into every artifact.

Two profiles bundle sensible defaults: "desk" (d=32, capped outer steps,
CI-friendly) and "full" (d=128, the full-scale settings). Flags win over
the config file; both funnel through :func:`apply_overrides`.

The *core hash* covers everything that determines the trained model and
its evaluation data (seed, data, model, meta, train_mode, train_fraction)
and deliberately excludes workflow fields like the output directory or the
experiment name, so a train artifact and its matching eval runs share the
hash.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .data import SplitSpec, SyntheticWorldSpec
from .meta import MetaConfig
from .params import ModelConfig

PROFILES = {
    "desk": {"model.dim": 32, "meta.max_outer_steps": 2000},
    "full": {"model.dim": 128, "meta.max_outer_steps": 20000},
}


@dataclass
class DataConfig:
    source: str = "synthetic"          # synthetic | movielens | tsv
    path: str | None = None
    time_range: tuple[int, int] | None = None
    eval_negatives: int = 100
    synthetic: SyntheticWorldSpec = field(default_factory=SyntheticWorldSpec)
    split: SplitSpec = field(default_factory=SplitSpec)

    def validate(self):
        if self.source not in ("synthetic", "movielens", "tsv"):
            raise ValueError(f"unknown data source {self.source!r}")
        if self.source != "synthetic" and not self.path:
            raise ValueError(f"data source {self.source!r} needs a path")
        if self.eval_negatives < 1:
            raise ValueError("eval_negatives must be >= 1")


@dataclass
class RunConfig:
    seed: int = 7
    profile: str = "desk"
    scenario: str = "cold"             # cold | warm
    train_mode: str = "meta"           # meta | joint
    train_fraction: float = 1.0
    out_dir: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    meta: MetaConfig = field(default_factory=MetaConfig)

    def validate(self):
        if self.profile not in PROFILES:
            raise ValueError(f"unknown profile {self.profile!r}")
        if self.scenario not in ("cold", "warm"):
            raise ValueError(f"unknown scenario {self.scenario!r}")
        if self.train_mode not in ("meta", "joint"):
            raise ValueError(f"unknown train mode {self.train_mode!r}")
        if not (0.0 < self.train_fraction <= 1.0):
            raise ValueError("train_fraction must lie in (0, 1]")
        self.data.validate()
        self.model.validate()
        self.meta.validate()

    # ------------------------------------------------------- serialization

    def to_dict(self) -> dict:
        raw = asdict(self)
        return raw

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @staticmethod
    def from_dict(raw: dict) -> "RunConfig":
        raw = dict(raw)
        data = dict(raw.pop("data", {}))
        synthetic = data.pop("synthetic", {})
        split = data.pop("split", {})
        if "count_range" in split:
            split["count_range"] = tuple(split["count_range"])
        if data.get("time_range") is not None:
            data["time_range"] = tuple(data["time_range"])
        config = RunConfig(
            data=DataConfig(synthetic=SyntheticWorldSpec(**synthetic),
                            split=SplitSpec(**split), **data),
            model=ModelConfig(**raw.pop("model", {})),
            meta=MetaConfig(**raw.pop("meta", {})),
            **raw,
        )
        return config

    @staticmethod
    def load(path) -> "RunConfig":
        with Path(path).open("r", encoding="utf-8") as fh:
            return RunConfig.from_dict(json.load(fh))

    # --------------------------------------------------------------- hashes

    def core_hash(self) -> str:
        """Hash of the reproducibility core (model + data + training)."""
        raw = self.to_dict()
        core = {key: raw[key] for key in
                ("seed", "train_mode", "train_fraction", "data", "model",
                 "meta")}
        blob = json.dumps(core, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def resolve_config(file_dict=None, overrides=None) -> RunConfig:
    """Layer the configuration sources: defaults < profile < file < flags.

    The profile fills model.dim and the outer-step cap only when the file
    and the flags stay silent about them. The result is validated.
    """
    file_dict = dict(file_dict or {})
    overrides = dict(overrides or {})
    profile = overrides.get("profile", file_dict.get("profile", "desk"))
    if profile not in PROFILES:
        raise ValueError(f"unknown profile {profile!r}")
    merged = asdict(RunConfig())
    merged["profile"] = profile
    for dotted, value in PROFILES[profile].items():
        section, name = dotted.split(".")
        merged[section][name] = value
    _deep_update(merged, file_dict)
    apply_overrides(merged, overrides)
    config = RunConfig.from_dict(merged)
    config.validate()
    return config


def _deep_update(base: dict, extra: dict):
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _deep_update(base[key], value)
        else:
            base[key] = value


def apply_overrides(merged: dict, overrides: dict) -> dict:
    """Apply ``section.key=value`` overrides onto the merged config dict."""
    for dotted, value in overrides.items():
        target = merged
        parts = dotted.split(".")
        for part in parts[:-1]:
            if part not in target or not isinstance(target[part], dict):
                raise ValueError(f"unknown config key {dotted!r}")
            target = target[part]
        name = parts[-1]
        if name not in target:
            raise ValueError(f"unknown config key {dotted!r}")
        target[name] = _coerce(value, target[name])
    return merged


def _coerce(value, current):
    if not isinstance(value, str):
        return value
    if isinstance(current, bool):
        return value.lower() in ("1", "true", "yes", "on")
    if isinstance(current, int):
        return int(value)
    if isinstance(current, float):
        return float(value)
    if isinstance(current, str):
        return value
    try:  # None or structured field: take the JSON reading when it parses
        return json.loads(value)
    except json.JSONDecodeError:
        return value
