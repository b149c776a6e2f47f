"""Base-model pretraining on the toy corpus.

The base model is the stand-in for a pretrained text-to-image backbone: it is
trained once on the corpus train split with fully descriptive captions (class
name in the subject slot, the matching factor word in the attribute slot) and
then frozen. An EMA of the weights is kept and becomes the final model.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .corpus import Corpus, CorpusImage
from .errors import NumericError
from .schedule import add_noise
from .text import position_codes, prompt_template, tokenize
from .unet import ModelConfig, UNetModel, build_model, forward

_TEMPLATES = ("shape", "appearance", "style")


@dataclass
class PretrainConfig:
    steps: int = 3000
    batch: int = 8
    learning_rate: float = 2e-3
    lr_final_fraction: float = 0.1   # cosine decay floor as a fraction of the peak
    ema_decay: float = 0.995
    t_bias: float = 0.7              # sample t = T*u^t_bias; <1 favors high noise,
                                     # where prompt-conditional structure is learned
    seed: int = 0
    val_fraction: float = 0.1
    model: ModelConfig = None

    def __post_init__(self):
        if self.model is None:
            self.model = ModelConfig()

    def to_dict(self) -> dict:
        return {"steps": self.steps, "batch": self.batch,
                "learning_rate": self.learning_rate,
                "lr_final_fraction": self.lr_final_fraction,
                "ema_decay": self.ema_decay, "t_bias": self.t_bias,
                "seed": self.seed, "val_fraction": self.val_fraction,
                "model": self.model.to_dict()}


def caption_for(image: CorpusImage, which: str) -> str:
    value = {"shape": image.labels.shape, "appearance": image.labels.appearance,
             "style": image.labels.style}[which]
    return prompt_template(image.labels.shape, which, value)


def _prompt_ids(image: CorpusImage, which: str) -> np.ndarray:
    return np.array(tokenize(caption_for(image, which)), dtype=np.int64)


def _to_model_domain(pixels: np.ndarray) -> np.ndarray:
    return 2.0 * pixels - 1.0


def validation_loss(model: UNetModel, images: list[CorpusImage], seed: int = 123) -> float:
    """Deterministic denoising loss over a fixed set of (t, eps, caption) draws."""
    rng = np.random.default_rng(seed)
    losses = []
    with ad.no_grad():
        for image in images:
            which = _TEMPLATES[int(rng.integers(len(_TEMPLATES)))]
            ids = _prompt_ids(image, which)
            emb = model.embedding_table()[ids] + position_codes(len(ids), model.cfg.d_text)
            t = int(rng.integers(model.schedule.T))
            x0 = _to_model_domain(image.pixels)
            eps = rng.standard_normal(x0.shape)
            x_t = add_noise(x0, t, eps, model.schedule)
            pred = forward(model, x_t[None], t, emb[None]).data[0]
            losses.append(float(np.mean((eps - pred) ** 2)))
    return float(np.mean(losses))


def train_base(corpus: Corpus, cfg: PretrainConfig | None = None,
               progress: bool = False) -> tuple[UNetModel, dict]:
    """Train the base model; returns (model with EMA weights, history)."""
    cfg = cfg or PretrainConfig()
    model = build_model(cfg.model)
    rng = np.random.default_rng(cfg.seed)

    train_images = corpus.split("train")
    n_val = max(1, int(len(train_images) * cfg.val_fraction))
    order = rng.permutation(len(train_images))
    val_images = [train_images[i] for i in order[:n_val]]
    fit_images = [train_images[i] for i in order[n_val:]]

    for t in model.params.values():
        t.requires_grad = True
    optimizer = ad.Adam(model.params, lr=cfg.learning_rate)
    ema = {k: t.data.copy() for k, t in model.params.items()}

    untrained_val = validation_loss(model, val_images)
    losses = np.zeros(cfg.steps)
    codes = position_codes(7, cfg.model.d_text)

    for step in range(cfg.steps):
        frac = step / max(cfg.steps - 1, 1)
        floor = cfg.lr_final_fraction
        optimizer.lr = cfg.learning_rate * (floor + (1 - floor)
                                            * 0.5 * (1 + np.cos(np.pi * frac)))
        idx = rng.integers(0, len(fit_images), size=cfg.batch)
        whichs = rng.integers(0, len(_TEMPLATES), size=cfg.batch)
        ts = np.minimum((model.schedule.T * rng.random(cfg.batch) ** cfg.t_bias).astype(int),
                        model.schedule.T - 1)
        x0 = np.stack([_to_model_domain(fit_images[i].pixels) for i in idx])
        eps = rng.standard_normal(x0.shape)
        sq = np.sqrt(model.schedule.alpha_bar[ts])[:, None, None, None]
        sq1 = np.sqrt(1.0 - model.schedule.alpha_bar[ts])[:, None, None, None]
        x_t = sq * x0 + sq1 * eps
        ids = np.stack([_prompt_ids(fit_images[i], _TEMPLATES[w])
                        for i, w in zip(idx, whichs)])
        cond = ad.gather_rows(model.params["text.embed"], ids) + ad.Tensor(codes[None])
        pred = forward(model, x_t, ts, cond)
        err = ad.Tensor(eps) - pred
        loss = (err * err).mean()
        if not np.isfinite(loss.data):
            raise NumericError(f"non-finite training loss at step {step}")
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        for k, t in model.params.items():
            ema[k] += (1.0 - cfg.ema_decay) * (t.data - ema[k])
        losses[step] = loss.item()
        if progress and (step + 1) % 200 == 0:
            print(f"  step {step + 1}/{cfg.steps}  loss {losses[max(0, step - 99):step + 1].mean():.4f}")

    for k, t in model.params.items():
        t.data = ema[k]
        t.requires_grad = False
        t.grad = None
    trained_val = validation_loss(model, val_images)
    history = {"loss": losses, "untrained_val_loss": untrained_val,
               "trained_val_loss": trained_val, "config": cfg.to_dict()}
    return model, history
