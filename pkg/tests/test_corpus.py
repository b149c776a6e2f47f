"""Corpus generation, mask extraction, and manifest round trips."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from attrdiff import corpus
from attrdiff.corpus import (AttributeSpec, BACKGROUND, extract_mask, generate_corpus,
                             generate_sample, load_corpus, save_corpus, shape_mask)
from attrdiff.errors import ConfigError, EmptyMaskWarning


def test_determinism_bit_identical():
    spec = AttributeSpec("circle", "solid-red", "flat")
    a = generate_sample(spec, 7)
    b = generate_sample(spec, 7)
    assert np.array_equal(a.pixels, b.pixels)
    assert np.array_equal(a.mask, b.mask)


def test_circle_mask_area_matches_disk():
    # radius 10 disk on the 32x32 canvas
    area = shape_mask("circle").sum()
    assert abs(area - np.pi * 100) / (np.pi * 100) < 0.05


def test_mask_equals_nonbackground_pixels_everywhere():
    for combo in corpus.all_combos():
        im = generate_sample(combo, 3)
        assert np.array_equal(extract_mask(im.pixels), im.mask), combo.as_tuple()


def test_foreground_fraction_in_range():
    for combo in corpus.all_combos():
        frac = generate_sample(combo, 11).mask.mean()
        assert 0.2 <= frac <= 0.8, (combo.as_tuple(), frac)


def test_unknown_enum_rejected():
    with pytest.raises(ConfigError):
        AttributeSpec("blob", "solid-red", "flat")
    with pytest.raises(ConfigError):
        AttributeSpec("circle", "plaid", "flat")
    with pytest.raises(ConfigError):
        AttributeSpec("circle", "solid-red", "cubist")
    with pytest.raises(ConfigError):
        generate_sample(AttributeSpec("circle", "solid-red", "flat"), seed=-1)


def test_appearance_change_leaves_mask_unchanged():
    for appearance in corpus.APPEARANCES:
        im = generate_sample(AttributeSpec("star", appearance, "flat"), 9)
        ref = generate_sample(AttributeSpec("star", "solid-red", "flat"), 9)
        assert np.array_equal(im.mask, ref.mask)


def test_style_change_leaves_mask_unchanged():
    for style in corpus.STYLES:
        im = generate_sample(AttributeSpec("cross", "checker", style), 4)
        ref = generate_sample(AttributeSpec("cross", "checker", "flat"), 4)
        assert np.array_equal(im.mask, ref.mask)


def test_extract_mask_uniform_background_warns_empty():
    bg = np.tile(BACKGROUND, (32, 32, 1))
    with pytest.warns(EmptyMaskWarning):
        mask = extract_mask(bg)
    assert mask.sum() == 0


def test_extract_mask_counts_altered_pixels_exactly():
    rng = np.random.default_rng(0)
    img = np.tile(BACKGROUND, (32, 32, 1))
    flat = rng.choice(32 * 32, size=13, replace=False)
    for p in flat:
        img[p // 32, p % 32] = [0.9, 0.1, 0.2]
    # brute-force oracle: compare every pixel to the background
    expected = np.zeros((32, 32))
    for y in range(32):
        for x in range(32):
            if np.abs(img[y, x] - BACKGROUND).max() > 1e-3:
                expected[y, x] = 1
    got = extract_mask(img)
    assert got.sum() == 13
    assert np.array_equal(got, expected)


@settings(max_examples=20, deadline=None)
@given(st.sampled_from(corpus.SHAPES), st.sampled_from(corpus.APPEARANCES),
       st.sampled_from(corpus.STYLES), st.integers(min_value=0, max_value=10 ** 6))
def test_extract_equals_generated_mask_property(shape, appearance, style, seed):
    im = generate_sample(AttributeSpec(shape, appearance, style), seed)
    assert np.array_equal(extract_mask(im.pixels), im.mask)


def test_corpus_size_covers_product_of_enums():
    c = generate_corpus(1, 0)
    assert len(c.images) == 5 * 6 * 3


def test_corpus_manifest_determinism_and_split(tmp_path):
    c1 = generate_corpus(1, 5)
    c2 = generate_corpus(1, 5)
    assert [i.labels for i in c1.images] == [i.labels for i in c2.images]
    assert c1.held_out_combos == c2.held_out_combos
    held = {c.as_tuple() for c in c1.held_out_combos}
    train_combos = {im.labels.as_tuple() for im in c1.split("train")}
    assert held.isdisjoint(train_combos)
    assert len(held) == 6
    with pytest.raises(ConfigError):
        generate_corpus(0, 0)


def test_corpus_png_roundtrip_bit_exact(tmp_path):
    c = generate_corpus(1, 0)
    manifest = save_corpus(c, tmp_path)
    loaded = load_corpus(manifest)
    assert len(loaded.images) == len(c.images)
    for a, b in zip(c.images, loaded.images):
        assert np.array_equal(a.pixels, b.pixels)
        assert np.array_equal(a.mask, b.mask)
        assert a.labels == b.labels


def test_load_corpus_missing_manifest_names_path(tmp_path):
    missing = tmp_path / "nope" / "manifest.json"
    with pytest.raises(ConfigError, match="manifest"):
        load_corpus(missing)
