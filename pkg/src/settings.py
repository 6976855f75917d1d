import json
import os
from dataclasses import dataclass, fields
from pathlib import Path

from dotenv import load_dotenv

from app.models import (DataSection, EvalSection, ModelSection, RunConfig, SynthConfig, TrainConfig,
                        VarlabSection)
from src.errors import ConfigError


@dataclass(frozen=True)
class Settings:
    out_dir: Path
    data_dir: Path
    log_level: str
    log_every: int


def get_settings():
    """
    Loads environment variables (from .env when present) and returns process-level settings.
    Nothing here is secret; these are the knobs an operator changes between machines.
    """
    load_dotenv()
    OUT_DIR = os.environ.get('FUSIONLAB_OUT_DIR', 'runs')
    DATA_DIR = os.environ.get('FUSIONLAB_DATA_DIR', 'data')
    LOG_LEVEL = os.environ.get('FUSIONLAB_LOG_LEVEL', 'INFO').upper()
    LOG_EVERY = os.environ.get('FUSIONLAB_LOG_EVERY', '50')
    try:
        log_every = int(LOG_EVERY)
    except ValueError:
        raise ConfigError('FUSIONLAB_LOG_EVERY', f"not an integer: {LOG_EVERY!r}") from None
    return Settings(Path(OUT_DIR), Path(DATA_DIR), LOG_LEVEL, log_every)


_SECTIONS = {
    'synth': SynthConfig,
    'data': DataSection,
    'model': ModelSection,
    'train': TrainConfig,
    'eval': EvalSection,
    'varlab': VarlabSection,
}


def _build_section(cls, raw, path):
    if not isinstance(raw, dict):
        raise ConfigError(path, "must be a JSON object")
    known = {f.name for f in fields(cls)}
    for key in raw:
        if key not in known:
            raise ConfigError(f"{path}.{key}", "unknown key")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as e:
        raise ConfigError(path, str(e)) from None


def parse_run_config(raw, seed_override=None, log_every_default=None):
    """
    Build a RunConfig from a decoded JSON document; unknown keys are rejected with their key path.
    log_every_default (usually FUSIONLAB_LOG_EVERY) applies when train.log_every is not given.
    """
    if not isinstance(raw, dict):
        raise ConfigError('', "config must be a JSON object")
    for key in raw:
        if key != 'seed' and key not in _SECTIONS:
            raise ConfigError(key, "unknown key")
    seed = seed_override if seed_override is not None else raw.get('seed')
    if seed is None:
        raise ConfigError('seed', "is mandatory")
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError('seed', "must be an integer")

    sections = {}
    for name, cls in _SECTIONS.items():
        if name in raw and raw[name] is not None:
            sections[name] = _build_section(cls, raw[name], name)
    config = RunConfig(seed=seed, **sections)

    # The top-level seed drives every seeded component unless a section pins its own.
    if config.synth is not None:
        if 'seed' not in (raw.get('synth') or {}) or seed_override is not None:
            config.synth.seed = seed
        try:
            config.synth.validate()
        except ConfigError as e:
            raise ConfigError(f"synth.{e.key_path}", e.detail) from None
    if 'seed' not in (raw.get('train') or {}) or seed_override is not None:
        config.train.seed = seed
    if log_every_default is not None and 'log_every' not in (raw.get('train') or {}):
        config.train.log_every = log_every_default
    config.train.validate()
    return config


def load_run_config(path, seed_override=None, log_every_default=None):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError('', f"{path} is not valid JSON: {e}") from None
    return parse_run_config(raw, seed_override, log_every_default)


def echo_config(config, out_dir, name='config.json'):
    """Write the effective config next to a run's outputs, for provenance."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    target = out_dir / name
    target.write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    return target
