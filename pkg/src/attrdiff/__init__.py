"""attrdiff: one-shot attribute customization of a toy conditional diffusion model.

A compact, CPU-friendly pipeline: procedural shape/appearance/style corpus,
a small conditional denoising U-Net with self/cross attention, per-site
hypernetworks that predict rank-1 attention weight offsets, a one-shot tuner,
DDPM/DDIM samplers with an intensity knob, and attribute-level metrics.
"""

__version__ = "0.1.0"
