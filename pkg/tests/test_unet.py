"""Denoising network contracts: offset application, purity, loss, gradients."""

import numpy as np
import pytest

from attrdiff import autodiff as ad
from attrdiff.errors import NumericError
from attrdiff.hypernet import OffsetBundle
from attrdiff.text import prompt_template
from attrdiff.unet import (UNetModel, build_model, denoising_loss, denoising_loss_graph,
                           forward, predict_noise)

from conftest import tiny_model_config


@pytest.fixture(scope="module")
def model():
    return build_model(tiny_model_config())


@pytest.fixture(scope="module")
def cond(model):
    return model.encode_prompt(prompt_template("circle", "appearance", "solid-red"))


def _random_bundle(model, partition="encoder", scale=0.05, seed=0):
    rng = np.random.default_rng(seed)
    deltas = {s.id: scale * rng.standard_normal((s.dim_r, s.dim_c))
              for s in model.partition_sites(partition)}
    return OffsetBundle(deltas=deltas, partition=partition)


def test_output_shape_and_purity(model, cond):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((model.cfg.res, model.cfg.res, 3))
    before = model.fingerprint()
    out = predict_noise(model, x, 3, cond)
    assert out.shape == x.shape
    bundle = _random_bundle(model)
    predict_noise(model, x, 3, cond, offsets=bundle, lam=0.7)
    assert model.fingerprint() == before


def test_lambda_zero_equals_no_offsets(model, cond):
    rng = np.random.default_rng(1)
    x = rng.standard_normal((model.cfg.res, model.cfg.res, 3))
    bundle = _random_bundle(model, seed=5)
    base = predict_noise(model, x, 2, cond)
    with_off = predict_noise(model, x, 2, cond, offsets=bundle, lam=0.0)
    assert np.max(np.abs(base - with_off)) < 1e-12


def test_lambda_one_matches_weight_substitution_oracle(model, cond):
    rng = np.random.default_rng(2)
    x = rng.standard_normal((model.cfg.res, model.cfg.res, 3))
    bundle = _random_bundle(model, seed=7)
    via_offsets = predict_noise(model, x, 4, cond, offsets=bundle, lam=1.0)
    # oracle: bake dw into a copied parameter store
    baked = UNetModel(cfg=model.cfg,
                      params={k: ad.Tensor(t.data.copy()) for k, t in model.params.items()},
                      sites=model.sites, schedule=model.schedule)
    for sid, dw in bundle.deltas.items():
        name = model.site_by_id(sid).param_name
        baked.params[name] = ad.Tensor(baked.params[name].data + dw)
    via_substitution = predict_noise(baked, x, 4, cond)
    assert np.max(np.abs(via_offsets - via_substitution)) < 1e-10


def test_nan_input_rejected(model, cond):
    x = np.full((model.cfg.res, model.cfg.res, 3), np.nan)
    with pytest.raises(NumericError):
        predict_noise(model, x, 1, cond)


def test_unknown_site_id_rejected(model, cond):
    x = np.zeros((model.cfg.res, model.cfg.res, 3))
    bundle = OffsetBundle(deltas={"nope.q": np.zeros((6, 6))}, partition="encoder")
    with pytest.raises(KeyError):
        predict_noise(model, x, 1, cond, offsets=bundle, lam=1.0)


def test_loss_zero_when_model_would_return_eps(model, cond):
    # force a zero prediction by zeroing the final conv, then loss(eps=0) == 0
    zeroed = UNetModel(cfg=model.cfg,
                       params={k: ad.Tensor(t.data.copy()) for k, t in model.params.items()},
                       sites=model.sites, schedule=model.schedule)
    zeroed.params["conv_out.w"] = ad.Tensor(np.zeros_like(zeroed.params["conv_out.w"].data))
    zeroed.params["conv_out.b"] = ad.Tensor(np.zeros_like(zeroed.params["conv_out.b"].data))
    x0 = np.random.default_rng(3).standard_normal((model.cfg.res, model.cfg.res, 3))
    eps = np.zeros_like(x0)
    assert denoising_loss(zeroed, x0, 2, eps, cond) == pytest.approx(0.0, abs=1e-18)


def test_loss_one_for_unit_error(model, cond):
    # prediction == eps + 1 everywhere -> mean squared error is exactly 1
    x0 = np.random.default_rng(4).standard_normal((model.cfg.res, model.cfg.res, 3))
    eps = np.random.default_rng(5).standard_normal(x0.shape)
    pred = predict_noise(model, x0, 1, cond)  # any prediction
    # compute the loss definition directly against a shifted prediction
    loss = float(np.mean((eps - (eps + 1.0)) ** 2))
    assert loss == pytest.approx(1.0)
    # and the module's reduction agrees with the same formula applied to its output
    from attrdiff.schedule import add_noise
    x_t = add_noise(x0, 1, eps, model.schedule)
    got = denoising_loss(model, x0, 1, eps, cond)
    want = float(np.mean((eps - predict_noise(model, x_t, 1, cond)) ** 2))
    assert got == pytest.approx(want, rel=1e-12)


def test_full_parameter_gradients_match_finite_differences(cond):
    """Backprop through the whole network vs central differences (tiny model)."""
    model = build_model(tiny_model_config(seed=9))
    rng = np.random.default_rng(6)
    x0 = rng.standard_normal((model.cfg.res, model.cfg.res, 3)) * 0.3
    eps = rng.standard_normal(x0.shape)
    emb = cond.embeddings[None]

    # analytic gradients for a few representative parameter tensors
    names = ["conv_in.w", "enc1.self.q.w", "mid.cross.k.w", "dec1.res.temb.w",
             "out.ln.g", "time.w1"]
    for n in names:
        model.params[n].requires_grad = True
    loss = denoising_loss_graph(model, x0, 3, eps, ad.Tensor(emb))
    loss.backward()

    def loss_at() -> float:
        return denoising_loss(model, x0, 3, eps, cond)

    rng_pick = np.random.default_rng(7)
    for n in names:
        t = model.params[n]
        flat = t.data.ravel()
        picks = rng_pick.choice(flat.size, size=min(5, flat.size), replace=False)
        for i in picks:
            orig = flat[i]
            flat[i] = orig + 1e-4
            hi = loss_at()
            flat[i] = orig - 1e-4
            lo = loss_at()
            flat[i] = orig
            numeric = (hi - lo) / 2e-4
            analytic = t.grad.ravel()[i]
            denom = max(abs(numeric), abs(analytic), 1e-6)
            assert abs(numeric - analytic) / denom < 1e-3, (n, i, numeric, analytic)
        t.requires_grad = False
        t.grad = None
