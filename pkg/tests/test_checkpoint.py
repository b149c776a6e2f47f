"""Checkpoint save/load verification."""

import json

import numpy as np
import pytest

from attrdiff.checkpoint import load_checkpoint, save_checkpoint
from attrdiff.errors import ConfigError, FingerprintMismatch
from attrdiff.unet import build_model

from conftest import tiny_model_config


def test_roundtrip_preserves_everything(tmp_path):
    model = build_model(tiny_model_config())
    stem = tmp_path / "ck"
    save_checkpoint(model, stem)
    loaded = load_checkpoint(stem)
    assert loaded.cfg == model.cfg
    assert loaded.fingerprint() == model.fingerprint()
    for k in model.params:
        assert np.array_equal(loaded.params[k].data, model.params[k].data)
    assert [s.id for s in loaded.sites] == [s.id for s in model.sites]


def test_missing_checkpoint_is_config_error(tmp_path):
    with pytest.raises(ConfigError):
        load_checkpoint(tmp_path / "absent")


def test_tampered_arrays_fail_loudly(tmp_path):
    model = build_model(tiny_model_config())
    stem = tmp_path / "ck"
    save_checkpoint(model, stem)
    arrays = dict(np.load(stem.with_suffix(".npz")))
    removed = sorted(arrays)[0]
    del arrays[removed]
    np.savez(stem.with_suffix(".npz"), **arrays)
    with pytest.raises(ConfigError, match="missing"):
        load_checkpoint(stem)


def test_corrupted_content_fails_fingerprint(tmp_path):
    model = build_model(tiny_model_config())
    stem = tmp_path / "ck"
    save_checkpoint(model, stem)
    arrays = dict(np.load(stem.with_suffix(".npz")))
    arrays["conv_in.w"] = arrays["conv_in.w"] + 1e-3
    np.savez(stem.with_suffix(".npz"), **arrays)
    with pytest.raises(FingerprintMismatch):
        load_checkpoint(stem)


def test_manifest_vocab_guard(tmp_path):
    model = build_model(tiny_model_config())
    stem = tmp_path / "ck"
    save_checkpoint(model, stem)
    manifest = json.loads(stem.with_suffix(".json").read_text())
    manifest["vocab"] = manifest["vocab"][:-1]
    stem.with_suffix(".json").write_text(json.dumps(manifest))
    with pytest.raises(ConfigError, match="vocabulary"):
        load_checkpoint(stem)
