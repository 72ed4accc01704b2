"""Flat `key=value` experiment configs with dotted sections.

    solver=pinnpm
    benchmark.tag=BKW2D
    train.flow.trunk=128,4

Files are read with python-dotenv, so comments, quoting and `export`
prefixes behave as in a `.env` file. A config is layered over an optional
preset, then validated as an ExperimentConfig.
"""
import logging
import os
import re
from typing import Any, Dict, List, Optional, Tuple

from dotenv import dotenv_values
from pydantic import ValidationError

from landau.config import PRESETS_DIR
from landau.errors import ConfigError
from landau.models import ExperimentConfig

logger = logging.getLogger(__name__)

PRESET_SUFFIX = ".cfg"

# Long-form names accepted for the full-scale presets
PRESET_ALIASES = {
    f"{stem}-paper": f"{stem}-full"
    for stem in ("bkw2d", "bkw3d", "gm3d", "rosenbluth3d", "anisotropic2d", "truncated2d")
}
_KEY_LINE = re.compile(r"^\s*(?:export\s+)?([^=#\s]+)\s*(?:=|$)")

# key -> (source file, line number)
Origins = Dict[str, Tuple[str, int]]


def list_presets() -> List[str]:
    return sorted(name[: -len(PRESET_SUFFIX)] for name in os.listdir(PRESETS_DIR) if name.endswith(PRESET_SUFFIX))


def preset_path(name: str) -> str:
    path = os.path.join(PRESETS_DIR, PRESET_ALIASES.get(name, name) + PRESET_SUFFIX)
    if not os.path.isfile(path):
        raise ConfigError(f"unknown preset '{name}'", [f"available presets: {', '.join(list_presets())}"])
    return path


def read_flat(path: str) -> Tuple[Dict[str, str], Origins]:
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    values = dotenv_values(path)
    origins: Origins = {}
    with open(path) as f:
        for number, line in enumerate(f, start=1):
            match = _KEY_LINE.match(line)
            if match:
                origins[match.group(1)] = (path, number)
    missing = [key for key, value in values.items() if value is None]
    if missing:
        raise ConfigError(
            f"invalid config {path}",
            [f"line {origins.get(key, (path, 0))[1]}: {key}: expected key=value" for key in missing],
        )
    return dict(values), origins


def _nest(flat: Dict[str, str], origins: Origins) -> Dict[str, Any]:
    tree: Dict[str, Any] = {}
    problems = []
    for key, value in flat.items():
        parts = key.split(".")
        node = tree
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                problems.append(_diagnostic(key, "conflicts with a scalar key", origins))
                break
            node = child
        else:
            if isinstance(node.get(parts[-1]), dict):
                problems.append(_diagnostic(key, "conflicts with a section", origins))
            else:
                node[parts[-1]] = value
    if problems:
        raise ConfigError("invalid config", problems)
    return tree


def _diagnostic(key: str, message: str, origins: Origins) -> str:
    found = origins.get(key)
    if found is None and key:
        # Errors on a section point at its first key
        found = next((origins[k] for k in origins if k.startswith(key + ".")), None)
    if found is None:
        return f"{key or 'config'}: {message}"
    return f"line {found[1]}: {key}: {message} ({os.path.basename(found[0])})"


def validate_flat(flat: Dict[str, str], origins: Optional[Origins] = None) -> ExperimentConfig:
    origins = origins or {}
    tree = _nest(flat, origins)
    try:
        return ExperimentConfig.model_validate(tree)
    except ValidationError as e:
        diagnostics = []
        for err in e.errors():
            key = ".".join(str(p) for p in err["loc"] if not isinstance(p, int))
            diagnostics.append(_diagnostic(key, err["msg"], origins))
        raise ConfigError("invalid config", diagnostics) from e


def load_config(
    path: Optional[str] = None,
    preset: Optional[str] = None,
    overrides: Optional[Dict[str, str]] = None,
) -> ExperimentConfig:
    """Preset, then file, then explicit overrides; later layers win key by key."""
    flat: Dict[str, str] = {}
    origins: Origins = {}
    if preset:
        values, where = read_flat(preset_path(preset))
        flat.update(values)
        origins.update(where)
    if path:
        values, where = read_flat(path)
        flat.update(values)
        origins.update(where)
    for key, value in (overrides or {}).items():
        flat[key] = value
        origins[key] = ("command line", 0)
    config = validate_flat(flat, origins)
    logger.debug("loaded config (%d keys) preset=%s file=%s", len(flat), preset, path)
    return config


def flatten(config: ExperimentConfig) -> Dict[str, str]:
    """Dotted-key view of the validated model; parsing it back gives an equal model."""
    out: Dict[str, str] = {}

    def walk(prefix: str, node: Any) -> None:
        if isinstance(node, dict):
            for key, value in node.items():
                walk(f"{prefix}.{key}" if prefix else key, value)
        elif node is None:
            return
        elif isinstance(node, bool):
            out[prefix] = "true" if node else "false"
        elif isinstance(node, float):
            out[prefix] = repr(node)
        else:
            out[prefix] = str(node)

    walk("", config.model_dump(mode="json"))
    return out


def dump_config(config: ExperimentConfig) -> str:
    return "".join(f"{key}={value}\n" for key, value in flatten(config).items())


def write_config(path: str, config: ExperimentConfig) -> None:
    with open(path, "w") as f:
        f.write(dump_config(config))
