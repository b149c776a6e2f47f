"""Shared fixtures: a small corpus, a tiny model for contract tests, and the
session-trained base model + classifier used by the acceptance suite.

Set ATTRDIFF_TEST_CACHE to a directory to reuse the trained base model across
pytest sessions (useful during development; leave unset for a clean run).
"""

import os
from pathlib import Path

import numpy as np
import pytest

from attrdiff import corpus as corpus_mod
from attrdiff.checkpoint import load_checkpoint, save_checkpoint
from attrdiff.metrics import AttributeClassifier, FeatureExtractor, train_classifier
from attrdiff.pretrain import PretrainConfig, train_base
from attrdiff.unet import ModelConfig, build_model

BASE_SEED = 0
BASE_STEPS = 3000


def tiny_model_config(**overrides) -> ModelConfig:
    cfg = dict(res=16, patch=2, channels=(6, 8), d_text=8, time_dim=8,
               T=10, beta_start=0.02, beta_end=0.4, seed=3)
    cfg.update(overrides)
    return ModelConfig(**cfg)


@pytest.fixture(scope="session")
def small_corpus():
    return corpus_mod.generate_corpus(2, seed=0)


@pytest.fixture(scope="session")
def full_corpus():
    return corpus_mod.generate_corpus(3, seed=0)


@pytest.fixture(scope="session")
def classifier(full_corpus):
    return train_classifier(full_corpus)


@pytest.fixture(scope="session")
def feature_extractor():
    return FeatureExtractor()


@pytest.fixture()
def tiny_model():
    return build_model(tiny_model_config())


@pytest.fixture(scope="session")
def tiny_corpus():
    return corpus_mod.generate_corpus(1, seed=0, res=16)


@pytest.fixture(scope="session")
def tiny_trained_model(tiny_corpus):
    """A briefly trained tiny model: attention out-projections are nonzero, so
    gradients reach Q/K/V site weights (they cannot on a fresh zero-init model)."""
    cfg = PretrainConfig(steps=60, batch=4, seed=1, model=tiny_model_config())
    model, _ = train_base(tiny_corpus, cfg)
    return model


@pytest.fixture(scope="session")
def tiny_corpus_image():
    spec = corpus_mod.AttributeSpec("circle", "solid-red", "flat")
    return corpus_mod.generate_sample(spec, seed=5, res=16)


@pytest.fixture(scope="session")
def base_model(full_corpus, tmp_path_factory):
    """The session-trained base model (expensive; trained once, maybe cached)."""
    cache_dir = os.environ.get("ATTRDIFF_TEST_CACHE")
    stem = None
    if cache_dir:
        stem = Path(cache_dir) / f"base_s{BASE_SEED}_n{BASE_STEPS}"
        if stem.with_suffix(".npz").exists():
            return load_checkpoint(stem)
    cfg = PretrainConfig(steps=BASE_STEPS, batch=8, seed=BASE_SEED)
    model, history = train_base(full_corpus, cfg)
    assert history["trained_val_loss"] < history["untrained_val_loss"]
    if stem is not None:
        stem.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(model, stem)
    return model
