"""Checkpoint container: named float64 arrays + a JSON manifest.

A checkpoint is `<stem>.npz` (arrays) next to `<stem>.json` (topology,
schedule, vocabulary, version, content fingerprint). Loading rebuilds the
model skeleton from the manifest and verifies both array names/shapes and
the fingerprint, failing loudly on any disagreement.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import text as text_mod
from .errors import ConfigError, FingerprintMismatch
from .unet import ModelConfig, UNetModel, build_model, fingerprint_arrays

FORMAT_VERSION = 1


def save_checkpoint(model: UNetModel, stem: Path) -> Path:
    """Write <stem>.npz + <stem>.json; returns the manifest path."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    arrays = {name: t.data for name, t in model.params.items()}
    np.savez(stem.with_suffix(".npz"), **arrays)
    manifest = {
        "version": FORMAT_VERSION,
        "kind": "base-checkpoint",
        "topology": model.cfg.to_dict(),
        "schedule": {"T": model.cfg.T, "beta_start": model.cfg.beta_start,
                     "beta_end": model.cfg.beta_end},
        "vocab": list(text_mod.TOKENS),
        "fingerprint": fingerprint_arrays(arrays),
    }
    path = stem.with_suffix(".json")
    path.write_text(json.dumps(manifest, indent=1))
    return path


def load_checkpoint(stem: Path) -> UNetModel:
    stem = Path(stem)
    manifest_path = stem.with_suffix(".json")
    npz_path = stem.with_suffix(".npz")
    if not manifest_path.exists() or not npz_path.exists():
        raise ConfigError(f"checkpoint not found at {stem}(.json/.npz)")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("version") != FORMAT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {manifest.get('version')}")
    if manifest.get("vocab") != list(text_mod.TOKENS):
        raise ConfigError("checkpoint vocabulary does not match this build")
    cfg = ModelConfig.from_dict(manifest["topology"])
    skeleton = build_model(cfg)
    with np.load(npz_path) as data:
        arrays = {k: data[k] for k in data.files}
    expected = {k: t.data.shape for k, t in skeleton.params.items()}
    got = {k: v.shape for k, v in arrays.items()}
    if expected != got:
        missing = sorted(set(expected) - set(got))
        extra = sorted(set(got) - set(expected))
        shapes = sorted(k for k in expected.keys() & got.keys() if expected[k] != got[k])
        raise ConfigError(
            f"checkpoint arrays disagree with topology: missing={missing} "
            f"extra={extra} shape-mismatch={shapes}")
    if fingerprint_arrays(arrays) != manifest["fingerprint"]:
        raise FingerprintMismatch(f"checkpoint content does not match its fingerprint: {stem}")
    for name, arr in arrays.items():
        skeleton.params[name] = ad.Tensor(arr.astype(np.float64))
    return skeleton
