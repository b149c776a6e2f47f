"""Train the base text-conditional denoiser on the corpus and sample from it.

This is the stand-in for a pretrained text-to-image backbone: train once,
freeze, reuse. Expect roughly half an hour on a laptop CPU at the default
budget; pass --quick for a fast (lower quality) run.

Run:  python demos/02_train_base_model.py [--quick]
"""

import sys
import time
from pathlib import Path

from attrdiff.checkpoint import save_checkpoint
from attrdiff.corpus import generate_corpus
from attrdiff.pretrain import PretrainConfig, train_base
from attrdiff.sampler import SampleRequest, sample
from attrdiff.corpus import save_image_png
from attrdiff.text import prompt_template

quick = "--quick" in sys.argv
out = Path("demo_out/base")
out.mkdir(parents=True, exist_ok=True)

corpus = generate_corpus(n_per_combo=3, seed=0)
cfg = PretrainConfig(steps=600 if quick else 6000, batch=8, seed=0)
print(f"training for {cfg.steps} steps (batch {cfg.batch})...")
t0 = time.time()
model, history = train_base(corpus, cfg, progress=True)
print(f"done in {time.time() - t0:.0f}s; validation loss "
      f"{history['untrained_val_loss']:.3f} -> {history['trained_val_loss']:.3f}")

save_checkpoint(model, out / "checkpoint")
print(f"checkpoint -> {out / 'checkpoint.npz'}")

# prompt-conditional samples from the frozen base
for shape in ("circle", "cross", "triangle"):
    prompt = prompt_template(shape, "appearance", "solid-green")
    images = sample(model, None, SampleRequest(prompt=prompt, steps=50, seed=1, batch=2))
    for i, im in enumerate(images):
        save_image_png(im, out / f"{shape}_{i}.png")
print(f"samples -> {out}")
