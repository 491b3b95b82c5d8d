"""Run configuration: one JSON document drives every command.

Unknown keys are rejected, missing keys get documented defaults, and every
command echoes its fully resolved configuration into the output directory,
so a run is reproducible from the echoed file alone.
"""

import json
from dataclasses import dataclass, replace
from pathlib import Path

from . import serde
from .errors import ConfigError
from .metrics import EvalConfig
from .synthgen import PhantomSpec
from .trainer import TrainConfig

RUN_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class RunConfig:
    schema_version: int = RUN_SCHEMA_VERSION
    output_dir: str = "runs/default"
    threads: int = 1
    phantom: PhantomSpec = PhantomSpec()
    train: TrainConfig = TrainConfig()
    eval: EvalConfig = EvalConfig()


def load_run_config(path=None) -> RunConfig:
    """Parse a JSON config file (or defaults when ``path`` is None)."""
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    cfg = serde.from_doc(RunConfig, doc)
    if cfg.schema_version != RUN_SCHEMA_VERSION:
        raise ConfigError(
            f"{path}: schema_version {cfg.schema_version} unsupported "
            f"(expected {RUN_SCHEMA_VERSION})")
    if cfg.threads < 1:
        raise ConfigError(f"threads must be >= 1, got {cfg.threads}")
    return cfg


def apply_overrides(cfg: RunConfig, **sections) -> RunConfig:
    """Replace individual fields, e.g. apply_overrides(cfg, train={"seed": 3})."""
    updates = {}
    for section, fields in sections.items():
        if not fields:
            continue
        if section in ("output_dir", "threads"):
            updates[section] = fields
            continue
        current = getattr(cfg, section)
        updates[section] = replace(current, **fields)
    return replace(cfg, **updates)


def echo_config(cfg: RunConfig, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "config.resolved.json"
    path.write_text(json.dumps(serde.to_doc(cfg), indent=2, sort_keys=True))
    return path
