"""Run configuration: JSON files with command-specific sections.

Unknown sections or keys are rejected. Path-valued keys resolve relative to
the config file's directory, and every command echoes its fully resolved
section (defaults filled in, paths absolute) into the run directory.
"""

from __future__ import annotations

import json
from pathlib import Path

from .errors import ConfigError

# section -> key -> default (None means required when the command runs)
SECTION_DEFAULTS: dict[str, dict] = {
    "corpus": {
        "n_per_combo": 3,
        "seed": 0,
    },
    "base-train": {
        "corpus_manifest": None,
        "steps": 3000,
        "batch": 8,
        "learning_rate": 2e-3,
        "ema_decay": 0.995,
        "val_fraction": 0.1,
        "seed": 0,
        "model": {},
    },
    "tune": {
        "checkpoint": None,
        "corpus_manifest": None,
        "reference": 0,
        "attribute": "shape",
        "steps": 1000,
        "learning_rate": 1e-3,
        "grad_accumulation": 2,
        "mode": "hypernet",
        "seed": 42,
    },
    "sample": {
        "checkpoint": None,
        "artifact": "",
        "prompt": None,
        "lam": 1.0,
        "steps": 50,
        "method": "ddim",
        "seed": 0,
        "batch": 4,
    },
    "sweep": {
        "checkpoint": None,
        "artifact": None,
        "corpus_manifest": "",
        "prompt": "",
        "lambdas": [0.0, 0.25, 0.5, 1.0],
        "seeds": [0, 1, 2, 3, 4],
        "steps": 25,
        "batch": 2,
    },
    "dichotomy": {
        "checkpoint": None,
        "corpus_manifest": None,
        "n_references": 3,
        "seeds": [0, 1, 2, 3, 4],
        "steps": 300,
        "learning_rate": 1e-3,
        "grad_accumulation": 2,
        "seed": 42,
    },
    "ablation": {
        "checkpoint": None,
        "corpus_manifest": None,
        "n_references": 3,
        "attribute": "appearance",
        "seeds": [0, 1],
        "steps": 300,
        "learning_rate": 1e-3,
        "grad_accumulation": 2,
        "seed": 42,
    },
    "eval": {
        "corpus_manifest": None,
        "images_dir": None,
        "reference": 0,
        "prompt": "",
    },
}

_PATH_KEYS = {"corpus_manifest", "checkpoint", "artifact", "images_dir"}

_MODEL_KEYS = {"res", "patch", "channels", "d_text", "time_dim", "T",
               "beta_start", "beta_end", "seed"}


def load_config(path: Path | None, section: str) -> dict:
    """Read one command section with defaults filled in and paths resolved."""
    if section not in SECTION_DEFAULTS:
        raise ConfigError(f"unknown command section {section!r}")
    raw = {}
    base_dir = Path.cwd()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        base_dir = path.parent.resolve()
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
        unknown_sections = set(doc) - set(SECTION_DEFAULTS)
        if unknown_sections:
            raise ConfigError(f"unknown config sections: {sorted(unknown_sections)}")
        raw = doc.get(section, {})
    defaults = SECTION_DEFAULTS[section]
    unknown = set(raw) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
    resolved = {**defaults, **raw}
    if section == "base-train":
        bad = set(resolved["model"]) - _MODEL_KEYS
        if bad:
            raise ConfigError(f"unknown keys in [base-train].model: {sorted(bad)}")
    for key, value in resolved.items():
        if key in _PATH_KEYS and value:
            resolved[key] = str((base_dir / value).resolve())
    return resolved


def require(cfg: dict, key: str, section: str):
    if cfg.get(key) in (None, ""):
        raise ConfigError(f"[{section}].{key} is required (set it in the config file)")
    return cfg[key]


def echo_config(section: str, resolved: dict, out_dir: Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "config.echo.json"
    path.write_text(json.dumps({section: resolved}, indent=1, default=str))
    return path
