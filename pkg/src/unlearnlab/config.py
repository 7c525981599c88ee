"""Experiment configuration: one JSON file with a section per module.

The config fully determines a run. Command-line overrides use
``section.key=value`` pairs (kebab-case accepted for key names); a canonical
serialization is hashed for provenance and copied into every output
directory.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from unlearnlab.anchor import AnchorConfig
from unlearnlab.data import BenchmarkConfig
from unlearnlab.errors import ConfigError
from unlearnlab.model import BaseTrainConfig, ModelGeometry
from unlearnlab.unlearn import UnlearnConfig

OUTPUT_ROOT_ENV = "UNLEARNLAB_OUTPUT"


@dataclass
class MetricsSettings:
    max_ppl_images: int = 60


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_dir: str | None = None
    data: BenchmarkConfig = field(default_factory=BenchmarkConfig)
    geometry: ModelGeometry = field(default_factory=ModelGeometry)
    base_train: BaseTrainConfig = field(default_factory=BaseTrainConfig)
    unlearn: UnlearnConfig = field(default_factory=UnlearnConfig)
    metrics: MetricsSettings = field(default_factory=MetricsSettings)

    def resolve_output_dir(self) -> Path:
        if self.output_dir:
            return Path(self.output_dir)
        return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


_SECTION_TYPES = {
    "data": BenchmarkConfig,
    "geometry": ModelGeometry,
    "base_train": BaseTrainConfig,
    "unlearn": UnlearnConfig,
    "anchor": AnchorConfig,       # alias for unlearn.anchor
    "metrics": MetricsSettings,
}


def _coerce(value, typ):
    # JSON gives lists; several config fields are tuples.
    if isinstance(value, list):
        return tuple(value)
    return value


def _build_section(cls, section: dict, where: str):
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in section.items():
        name = key.replace("-", "_")
        if name not in known:
            raise ConfigError(f"unknown key '{key}' in section '{where}'")
        if name == "anchor" and isinstance(value, dict):
            kwargs[name] = _build_section(AnchorConfig, value, f"{where}.anchor")
        else:
            kwargs[name] = _coerce(value, known[name].type)
    return cls(**kwargs)


def config_from_dict(doc: dict) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a JSON object")
    cfg = ExperimentConfig()
    anchor_section = None
    for key, value in doc.items():
        name = key.replace("-", "_")
        if name == "seed":
            cfg.seed = int(value)
        elif name == "output_dir":
            cfg.output_dir = value
        elif name == "anchor":
            anchor_section = value
        elif name in _SECTION_TYPES:
            if not isinstance(value, dict):
                raise ConfigError(f"section '{key}' must be an object")
            setattr(cfg, name, _build_section(_SECTION_TYPES[name], value, name))
        else:
            raise ConfigError(f"unknown config section '{key}'")
    if anchor_section is not None:
        cfg.unlearn.anchor = _build_section(AnchorConfig, anchor_section,
                                            "anchor")
    # Propagate the run seed into sections that default to it.
    if "seed" in doc:
        if "data" not in doc or "seed" not in doc["data"]:
            cfg.data.seed = cfg.seed
        if "base_train" not in doc or "seed" not in doc["base_train"]:
            cfg.base_train.seed = cfg.seed
        if "unlearn" not in doc or "seed" not in doc["unlearn"]:
            cfg.unlearn.seed = cfg.seed
    return cfg


def load_config(path=None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"malformed config file {path}: {e}") from e
    return config_from_dict(doc)


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(cfg: ExperimentConfig, pairs) -> ExperimentConfig:
    """Apply ``section.key=value`` overrides (kebab-case keys accepted)."""
    for pair in pairs or ():
        if "=" not in pair:
            raise ConfigError(f"override '{pair}' must be key=value")
        dotted, raw = pair.split("=", 1)
        parts = [p.replace("-", "_") for p in dotted.split(".")]
        value = _coerce(_parse_value(raw), None)
        obj = cfg
        trail = []
        for p in parts[:-1]:
            if not hasattr(obj, p):
                raise ConfigError(f"unknown config path '{dotted}'")
            obj = getattr(obj, p)
            trail.append(p)
        leaf = parts[-1]
        if not dataclasses.is_dataclass(obj) or \
                leaf not in {f.name for f in fields(obj)}:
            raise ConfigError(f"unknown config path '{dotted}'")
        setattr(obj, leaf, value)
    return cfg


def to_canonical_dict(cfg: ExperimentConfig) -> dict:
    """Plain nested dict of everything that determines results.

    ``output_dir`` is where results land, not what they are, so it is
    excluded — the same experiment written to two directories hashes (and
    serializes) identically.
    """
    def plain(obj):
        if dataclasses.is_dataclass(obj):
            return {f.name: plain(getattr(obj, f.name)) for f in fields(obj)}
        if isinstance(obj, tuple):
            return [plain(v) for v in obj]
        return obj
    doc = plain(cfg)
    doc.pop("output_dir", None)
    return doc


def config_hash(cfg: ExperimentConfig) -> str:
    blob = json.dumps(to_canonical_dict(cfg), sort_keys=True,
                      separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def write_provenance(cfg: ExperimentConfig, out_dir) -> str:
    """Copy the exact config (canonical JSON) into the output directory."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    digest = config_hash(cfg)
    doc = to_canonical_dict(cfg)
    doc["_config_hash"] = digest
    with open(out / "config.json", "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return digest
