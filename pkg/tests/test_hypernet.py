"""Hypernetwork offset prediction, partition selection, and artifact IO."""

import numpy as np
import pytest

from attrdiff import autodiff as ad
from attrdiff.errors import ConfigError, FingerprintMismatch, NumericError
from attrdiff.hypernet import (OffsetHyperNet, TunedArtifact, apply_offsets, init_hypernets,
                               load_artifact, predict_offset, save_artifact, select_partition)
from attrdiff.unet import UNetModel, build_model

from conftest import tiny_model_config


@pytest.fixture(scope="module")
def model():
    return build_model(tiny_model_config())


def test_partition_selection(model):
    enc = select_partition("shape", model)
    dec = select_partition("appearance", model)
    sty = select_partition("style", model)
    assert all(s.partition == "encoder" for s in enc)
    assert all(s.partition == "decoder" for s in dec)
    assert [s.id for s in sty] == [s.id for s in dec]
    assert not any(s.partition == "bottleneck" for s in enc + dec)
    assert {s.role for s in enc} == {"Q", "K", "V"}
    with pytest.raises(ConfigError):
        select_partition("texture", model)
    empty = UNetModel(cfg=model.cfg, params={}, sites=[])
    with pytest.raises(ConfigError):
        select_partition("shape", empty)


def test_fresh_init_predicts_zero_offsets(model):
    hypers = init_hypernets(select_partition("shape", model), seed=1)
    for h in hypers.values():
        dw = predict_offset(h)
        assert dw.shape == (h.dim_r, h.dim_c)
        assert np.all(dw.data == 0.0)


def test_offset_shape_contract(model):
    sites = select_partition("appearance", model)
    hypers = init_hypernets(sites, seed=0)
    for s in sites:
        assert predict_offset(hypers[s.id]).shape == (s.dim_r, s.dim_c)


def test_init_determinism(model):
    sites = select_partition("shape", model)
    a = init_hypernets(sites, seed=7)
    b = init_hypernets(sites, seed=7)
    for sid in a:
        for key in OffsetHyperNet.PARAM_KEYS:
            assert np.array_equal(a[sid].params[key].data, b[sid].params[key].data)


def test_duplicate_and_empty_site_lists_rejected(model):
    sites = select_partition("shape", model)
    with pytest.raises(ConfigError):
        init_hypernets(sites + sites[:1], seed=0)
    with pytest.raises(ConfigError):
        init_hypernets([], seed=0)


def test_hand_outer_product_oracle():
    h = OffsetHyperNet(site_id="t", dim_r=2, dim_c=3, params={
        "cons": ad.Tensor(np.array(1.0)),
        "row_w": ad.Tensor(np.zeros(2)),
        "row_b": ad.Tensor(np.array([1.0, 2.0])),
        "col_w": ad.Tensor(np.zeros(3)),
        "col_b": ad.Tensor(np.array([3.0, 0.0, 1.0])),
        "row_t": ad.Tensor(np.eye(2)),
        "col_t": ad.Tensor(np.eye(3)),
    })
    np.testing.assert_allclose(predict_offset(h).data, [[3.0, 0.0, 1.0], [6.0, 0.0, 2.0]])


def test_trained_state_stays_rank_one(model):
    rng = np.random.default_rng(3)
    sites = select_partition("shape", model)
    hypers = init_hypernets(sites, seed=3)
    for h in hypers.values():  # simulate an arbitrary trained state
        h.params["row_w"].data[:] = rng.standard_normal(h.dim_r)
        h.params["row_b"].data[:] = rng.standard_normal(h.dim_r)
        h.params["cons"].data += rng.standard_normal() * 0.5
        h.params["row_t"].data += 0.1 * rng.standard_normal((h.dim_r, h.dim_r))
        h.params["col_t"].data += 0.1 * rng.standard_normal((h.dim_c, h.dim_c))
        sv = np.linalg.svd(predict_offset(h).data, compute_uv=False)
        assert sv[1] / sv[0] < 1e-6


def test_nonfinite_parameters_rejected():
    h = OffsetHyperNet(site_id="t", dim_r=2, dim_c=2, params={
        "cons": ad.Tensor(np.array(np.nan)),
        "row_w": ad.Tensor(np.zeros(2)),
        "row_b": ad.Tensor(np.zeros(2)),
        "col_w": ad.Tensor(np.zeros(2)),
        "col_b": ad.Tensor(np.zeros(2)),
        "row_t": ad.Tensor(np.eye(2)),
        "col_t": ad.Tensor(np.eye(2)),
    })
    with pytest.raises(NumericError):
        predict_offset(h)


def test_apply_offsets_contract():
    w = np.eye(2)
    dw = np.ones((2, 2))
    np.testing.assert_array_equal(apply_offsets(w, dw, 0.0), w)
    np.testing.assert_allclose(apply_offsets(w, dw, 0.5), [[1.5, 0.5], [0.5, 1.5]])
    # linearity: apply(w,dw,a) + apply(0,dw,b) == apply(w,dw,a+b)
    a, b = 0.3, 1.1
    np.testing.assert_allclose(apply_offsets(w, dw, a) + apply_offsets(np.zeros((2, 2)), dw, b),
                               apply_offsets(w, dw, a + b))
    assert np.array_equal(w, np.eye(2))  # never mutated
    with pytest.raises(ValueError):
        apply_offsets(np.eye(2), np.ones((3, 2)), 1.0)
    with pytest.raises(NumericError):
        apply_offsets(w, dw, np.inf)


def test_artifact_roundtrip_and_fingerprint_gate(model, tmp_path):
    sites = select_partition("shape", model)
    hypers = init_hypernets(sites, seed=2)
    hypers[sites[0].id].params["row_b"].data[:] = 0.25
    art = TunedArtifact(
        attribute="shape", mode="hypernet", partition="encoder",
        class_name="circle", placeholder_token="*m",
        placeholder_base=np.zeros(model.cfg.d_text),
        placeholder_tuned=np.ones(model.cfg.d_text),
        base_fingerprint=model.fingerprint(),
        site_dims={s.id: (s.dim_r, s.dim_c) for s in sites},
        hypernets=hypers,
        reference_pixels=np.zeros((16, 16, 3)),
        reference_mask=np.zeros((16, 16), dtype=np.uint8),
        config={"steps": 0},
        loss_trace=np.array([1.0, 0.5]),
    )
    stem = tmp_path / "artifact"
    save_artifact(art, stem)
    loaded = load_artifact(stem)
    assert loaded.attribute == "shape"
    assert loaded.mode == "hypernet"
    for sid in art.hypernets:
        for key in OffsetHyperNet.PARAM_KEYS:
            assert np.array_equal(loaded.hypernets[sid].params[key].data,
                                  art.hypernets[sid].params[key].data)
    loaded.verify_base(model)
    other = build_model(tiny_model_config(seed=99))
    with pytest.raises(FingerprintMismatch):
        loaded.verify_base(other)
    # lambda gating of the placeholder row
    np.testing.assert_allclose(loaded.placeholder_row(0.0), art.placeholder_base)
    np.testing.assert_allclose(loaded.placeholder_row(1.0), art.placeholder_tuned)
    np.testing.assert_allclose(loaded.placeholder_row(0.25), 0.25 * np.ones(model.cfg.d_text) * 1.0
                               + 0.0)
