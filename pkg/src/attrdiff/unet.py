"""Compact conditional denoising U-Net with self- and cross-attention.

Two resolution levels plus a bottleneck, one self-attention and one
cross-attention block per level, NHWC layout, float64 throughout. Every
attention Q/K/V projection is an addressable site tagged encoder /
bottleneck / decoder; effective weights can be overridden per call, which is
how weight offsets are applied without ever mutating the base store.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import text as text_mod
from .errors import NumericError
from .schedule import (DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_T, NoiseSchedule,
                       add_noise, make_schedule)

ENCODER = "encoder"
BOTTLENECK = "bottleneck"
DECODER = "decoder"


@dataclass(frozen=True)
class AttentionSite:
    """One addressable attention weight matrix (used as y = x @ w)."""

    id: str
    partition: str          # encoder | bottleneck | decoder
    role: str               # Q | K | V
    kind: str               # self | cross
    dim_r: int
    dim_c: int

    @property
    def param_name(self) -> str:
        return f"{self.id}.w"


@dataclass
class ModelConfig:
    res: int = 32
    patch: int = 2          # lossless space-to-depth factor applied at the stem
    channels: tuple[int, int] = (32, 64)
    d_text: int = 64
    time_dim: int = 64
    T: int = DEFAULT_T
    beta_start: float = DEFAULT_BETA_START
    beta_end: float = DEFAULT_BETA_END
    seed: int = 0

    def to_dict(self) -> dict:
        return {"res": self.res, "patch": self.patch, "channels": list(self.channels),
                "d_text": self.d_text, "time_dim": self.time_dim, "T": self.T,
                "beta_start": self.beta_start, "beta_end": self.beta_end, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["channels"] = tuple(d["channels"])
        return cls(**d)


@dataclass
class UNetModel:
    cfg: ModelConfig
    params: dict[str, ad.Tensor]
    sites: list[AttentionSite]
    schedule: NoiseSchedule = field(default=None)

    def __post_init__(self):
        if self.schedule is None:
            self.schedule = make_schedule(self.cfg.T, self.cfg.beta_start, self.cfg.beta_end)

    def site_by_id(self, site_id: str) -> AttentionSite:
        for s in self.sites:
            if s.id == site_id:
                return s
        raise KeyError(f"unknown attention site id {site_id!r}")

    def partition_sites(self, partition: str) -> list[AttentionSite]:
        return [s for s in self.sites if s.partition == partition]

    def embedding_table(self) -> np.ndarray:
        return self.params["text.embed"].data

    def encode_prompt(self, prompt: str) -> text_mod.PromptEncoding:
        return text_mod.encode_prompt(prompt, self.embedding_table())

    def fingerprint(self) -> str:
        return fingerprint_arrays({k: t.data for k, t in self.params.items()})


def fingerprint_arrays(arrays: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(str(arr.dtype).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


# -- construction ---------------------------------------------------------------

def _attention_param_specs(block: str, c: int, d_text: int, kind: str):
    kv_in = c if kind == "self" else d_text
    # out projection starts at zero so the block is the identity at init;
    # cross-attention normalizes its context tokens with a dedicated LN
    specs = [
        (f"{block}.ln.g", (c,), "ones"),
        (f"{block}.ln.b", (c,), "zeros"),
        (f"{block}.q.w", (c, c), "init"),
        (f"{block}.k.w", (kv_in, c), "init"),
        (f"{block}.v.w", (kv_in, c), "init"),
        (f"{block}.out.w", (c, c), "zeros"),
        (f"{block}.out.b", (c,), "zeros"),
    ]
    if kind == "cross":
        specs += [
            (f"{block}.ctx.g", (d_text,), "ones"),
            (f"{block}.ctx.b", (d_text,), "zeros"),
        ]
    return specs


def _resblock_param_specs(block: str, c: int, time_dim: int):
    # final conv starts at zero so the block is the identity at init
    return [
        (f"{block}.ln1.g", (c,), "ones"),
        (f"{block}.ln1.b", (c,), "zeros"),
        (f"{block}.conv1.w", (3, 3, c, c), "init"),
        (f"{block}.conv1.b", (c,), "zeros"),
        (f"{block}.temb.w", (time_dim, c), "init"),
        (f"{block}.temb.b", (c,), "zeros"),
        (f"{block}.ln2.g", (c,), "ones"),
        (f"{block}.ln2.b", (c,), "zeros"),
        (f"{block}.conv2.w", (3, 3, c, c), "zeros"),
        (f"{block}.conv2.b", (c,), "zeros"),
    ]


def _level_blocks(cfg: ModelConfig):
    c1, c2 = cfg.channels
    # (block prefix, channels, partition, has attention)
    return [
        ("enc1", c1, ENCODER),
        ("enc2", c2, ENCODER),
        ("mid", c2, BOTTLENECK),
        ("dec2", c2, DECODER),
        ("dec1", c1, DECODER),
    ]


def build_model(cfg: ModelConfig | None = None) -> UNetModel:
    """Create a randomly initialized model (seeded, deterministic)."""
    cfg = cfg or ModelConfig()
    rng = np.random.default_rng(cfg.seed)
    c1, c2 = cfg.channels
    td = cfg.time_dim
    c_in = 3 * cfg.patch * cfg.patch
    specs: list[tuple[str, tuple, str]] = [
        ("text.embed", (text_mod.VOCAB_SIZE, cfg.d_text), "embed"),
        ("time.w1", (td, td), "init"),
        ("time.b1", (td,), "zeros"),
        ("time.w2", (td, td), "init"),
        ("time.b2", (td,), "zeros"),
        ("conv_in.w", (3, 3, c_in, c1), "init"),
        ("conv_in.b", (c1,), "zeros"),
        ("down1.w", (3, 3, c1, c2), "init"),
        ("down1.b", (c2,), "zeros"),
        ("down2.w", (3, 3, c2, c2), "init"),
        ("down2.b", (c2,), "zeros"),
        ("up2.w", (3, 3, c2, c2), "init"),
        ("up2.b", (c2,), "zeros"),
        ("skip2.w", (2 * c2, c2), "init"),
        ("skip2.b", (c2,), "zeros"),
        ("up1.w", (3, 3, c2, c1), "init"),
        ("up1.b", (c1,), "zeros"),
        ("skip1.w", (2 * c1, c1), "init"),
        ("skip1.b", (c1,), "zeros"),
        ("out.ln.g", (c1,), "ones"),
        ("out.ln.b", (c1,), "zeros"),
        ("conv_out.w", (3, 3, c1, c_in), "zeros"),
        ("conv_out.b", (c_in,), "zeros"),
    ]
    sites: list[AttentionSite] = []
    for block, c, partition in _level_blocks(cfg):
        specs += _resblock_param_specs(f"{block}.res", c, td)
        if block == "mid":
            specs += _resblock_param_specs(f"{block}.res2", c, td)
        for kind in ("self", "cross"):
            prefix = f"{block}.{kind}"
            specs += _attention_param_specs(prefix, c, cfg.d_text, kind)
            kv_in = c if kind == "self" else cfg.d_text
            for role, dim_r in (("Q", c), ("K", kv_in), ("V", kv_in)):
                sites.append(AttentionSite(
                    id=f"{prefix}.{role.lower()}", partition=partition, role=role,
                    kind=kind, dim_r=dim_r, dim_c=c))
    params: dict[str, ad.Tensor] = {}
    for name, shape, init in specs:
        if init == "zeros":
            data = np.zeros(shape)
        elif init == "ones":
            data = np.ones(shape)
        elif init == "embed":
            data = rng.standard_normal(shape)
        else:
            fan_in = int(np.prod(shape[:-1]))
            data = rng.standard_normal(shape) * np.sqrt(1.0 / max(fan_in, 1))
        params[name] = ad.Tensor(data)
    return UNetModel(cfg=cfg, params=params, sites=sites)


# -- forward pass -----------------------------------------------------------------

_layer_norm = ad.layer_norm
_conv3x3 = ad.conv3x3


def _resblock(x, temb, p, prefix):
    h = _layer_norm(x, p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"])
    h = _conv3x3(ad.silu(h), p[f"{prefix}.conv1.w"], p[f"{prefix}.conv1.b"])
    shift = temb @ p[f"{prefix}.temb.w"] + p[f"{prefix}.temb.b"]
    h = h + ad.reshape(shift, (shift.shape[0], 1, 1, shift.shape[1]))
    h = _layer_norm(h, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"])
    h = _conv3x3(ad.silu(h), p[f"{prefix}.conv2.w"], p[f"{prefix}.conv2.b"])
    return x + h


def _attention(x, context, p, prefix, site_weights):
    """Scaled dot-product attention block; context=None means self-attention."""
    n, h, w, c = x.shape
    normed = _layer_norm(x, p[f"{prefix}.ln.g"], p[f"{prefix}.ln.b"])
    tokens = ad.reshape(normed, (n, h * w, c))
    if context is None:
        source = tokens
    else:
        source = _layer_norm(context, p[f"{prefix}.ctx.g"], p[f"{prefix}.ctx.b"])

    def weight(role):
        sid = f"{prefix}.{role}"
        return site_weights.get(sid, p[f"{sid}.w"])

    q = tokens @ weight("q")
    k = source @ weight("k")
    v = source @ weight("v")
    scores = (q @ ad.transpose(k, (0, 2, 1))) * (1.0 / np.sqrt(c))
    attn = ad.softmax(scores, axis=-1)
    out = (attn @ v) @ p[f"{prefix}.out.w"] + p[f"{prefix}.out.b"]
    return x + ad.reshape(out, (n, h, w, c))


def _space_to_depth(x: ad.Tensor, p: int) -> ad.Tensor:
    if p == 1:
        return x
    n, h, w, c = x.shape
    x = ad.reshape(x, (n, h // p, p, w // p, p, c))
    x = ad.transpose(x, (0, 1, 3, 2, 4, 5))
    return ad.reshape(x, (n, h // p, w // p, p * p * c))


def _depth_to_space(x: ad.Tensor, p: int) -> ad.Tensor:
    if p == 1:
        return x
    n, h, w, c = x.shape
    c_out = c // (p * p)
    x = ad.reshape(x, (n, h, w, p, p, c_out))
    x = ad.transpose(x, (0, 1, 3, 2, 4, 5))
    return ad.reshape(x, (n, h * p, w * p, c_out))


def _time_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    angles = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def forward(model: UNetModel, x_t, t, cond, site_weights: dict[str, ad.Tensor] | None = None):
    """Noise prediction as an autodiff graph.

    cond: (N, L, d_text) Tensor or ndarray of prompt embeddings.
    site_weights: optional effective Q/K/V weights keyed by site id; sites not
    listed fall back to the base store. The base store is never written.
    """
    p = model.params
    site_weights = site_weights or {}
    x = x_t if isinstance(x_t, ad.Tensor) else ad.Tensor(x_t)
    cond = cond if isinstance(cond, ad.Tensor) else ad.Tensor(cond)
    if cond.ndim == 2:
        cond = ad.reshape(cond, (1,) + cond.shape)

    temb = ad.Tensor(_time_embedding(t, model.cfg.time_dim))
    temb = ad.silu(temb @ p["time.w1"] + p["time.b1"]) @ p["time.w2"] + p["time.b2"]

    x = _space_to_depth(x, model.cfg.patch)
    h1 = _conv3x3(x, p["conv_in.w"], p["conv_in.b"])
    h1 = _resblock(h1, temb, p, "enc1.res")
    h1 = _attention(h1, None, p, "enc1.self", site_weights)
    h1 = _attention(h1, cond, p, "enc1.cross", site_weights)

    h2 = _conv3x3(h1, p["down1.w"], p["down1.b"], stride=2)
    h2 = _resblock(h2, temb, p, "enc2.res")
    h2 = _attention(h2, None, p, "enc2.self", site_weights)
    h2 = _attention(h2, cond, p, "enc2.cross", site_weights)

    m = _conv3x3(h2, p["down2.w"], p["down2.b"], stride=2)
    m = _resblock(m, temb, p, "mid.res")
    m = _attention(m, None, p, "mid.self", site_weights)
    m = _attention(m, cond, p, "mid.cross", site_weights)
    m = _resblock(m, temb, p, "mid.res2")

    u2 = _conv3x3(ad.upsample2x(m), p["up2.w"], p["up2.b"])
    u2 = ad.concat([u2, h2], axis=-1) @ p["skip2.w"] + p["skip2.b"]
    u2 = _resblock(u2, temb, p, "dec2.res")
    u2 = _attention(u2, None, p, "dec2.self", site_weights)
    u2 = _attention(u2, cond, p, "dec2.cross", site_weights)

    u1 = _conv3x3(ad.upsample2x(u2), p["up1.w"], p["up1.b"])
    u1 = ad.concat([u1, h1], axis=-1) @ p["skip1.w"] + p["skip1.b"]
    u1 = _resblock(u1, temb, p, "dec1.res")
    u1 = _attention(u1, None, p, "dec1.self", site_weights)
    u1 = _attention(u1, cond, p, "dec1.cross", site_weights)

    out = _layer_norm(u1, p["out.ln.g"], p["out.ln.b"])
    out = _conv3x3(ad.silu(out), p["conv_out.w"], p["conv_out.b"])
    return _depth_to_space(out, model.cfg.patch)


def _effective_site_weights(model: UNetModel, offsets, lam: float) -> dict[str, ad.Tensor]:
    """w + lam * dw for every site in the offset bundle (base never mutated)."""
    weights: dict[str, ad.Tensor] = {}
    if offsets is None:
        return weights
    for site_id, dw in offsets.deltas.items():
        site = model.site_by_id(site_id)  # raises KeyError on unknown ids
        base = model.params[site.param_name]
        if isinstance(dw, ad.Tensor):
            weights[site_id] = base + dw * float(lam)
        else:
            if dw.shape != base.data.shape:
                raise ValueError(
                    f"offset shape {dw.shape} does not match site {site_id} "
                    f"weight shape {base.data.shape}")
            weights[site_id] = ad.Tensor(base.data + float(lam) * dw)
    return weights


def predict_noise(model: UNetModel, x_t: np.ndarray, t, cond, offsets=None,
                  lam: float = 1.0) -> np.ndarray:
    """Predicted noise for x_t (ndarray in, ndarray out; no graph is kept)."""
    x_t = np.asarray(x_t, dtype=np.float64)
    if not np.isfinite(x_t).all():
        raise NumericError("x_t contains non-finite values")
    single = x_t.ndim == 3
    if single:
        x_t = x_t[None]
    emb = cond.embeddings if hasattr(cond, "embeddings") else cond
    with ad.no_grad():
        weights = _effective_site_weights(model, offsets, lam)
        out = forward(model, x_t, t, emb, weights).data
    return out[0] if single else out


def denoising_loss(model: UNetModel, x0: np.ndarray, t, eps: np.ndarray, cond,
                   offsets=None, lam: float = 1.0) -> float:
    """Mean squared error between eps and the model's prediction (scalar)."""
    x_t = add_noise(np.asarray(x0, dtype=np.float64), int(t), eps, model.schedule)
    pred = predict_noise(model, x_t, t, cond, offsets, lam)
    return float(np.mean((np.asarray(eps, dtype=np.float64) - pred) ** 2))


def denoising_loss_graph(model: UNetModel, x0: np.ndarray, t: int, eps: np.ndarray,
                         cond, site_weights: dict[str, ad.Tensor] | None = None) -> ad.Tensor:
    """Differentiable loss for training; cond may carry trainable rows."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    x_t = add_noise(x0, int(t), eps, model.schedule)
    if x_t.ndim == 3:
        x_t = x_t[None]
        eps = eps[None]
    pred = forward(model, x_t, t, cond, site_weights)
    err = ad.Tensor(eps) - pred
    return (err * err).mean()
