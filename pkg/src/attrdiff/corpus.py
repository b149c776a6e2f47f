"""Procedural attribute-factored image corpus.

Every image is a (shape, appearance, style) triple rendered on a reserved
mid-gray background, with the foreground mask known exactly by construction.
Shapes fix the geometry, appearance programs color the interior, style
programs modulate how the interior is drawn (flat fill, bright rim over a
dimmed fill, stipple dots over a dimmed fill).

All colors live on the 8-bit grid (k/255) so PNG round-trips are bit-exact.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from itertools import product
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import binary_erosion

from .errors import ConfigError, EmptyMaskWarning

RESOLUTION = 32
BACKGROUND = np.array([128, 128, 128], dtype=np.float64) / 255.0
MASK_TOLERANCE = 1e-3

SHAPES = ("circle", "square", "triangle", "star", "cross")
APPEARANCES = ("solid-red", "solid-blue", "solid-green", "stripes", "checker", "dots")
STYLES = ("flat", "outline", "stippled")

_SOLID_COLORS = {
    "solid-red": (217, 31, 31),
    "solid-blue": (38, 64, 230),
    "solid-green": (31, 191, 51),
}
_STRIPE_COLORS = ((230, 204, 38), (51, 38, 153))
_CHECKER_COLORS = ((217, 77, 26), (26, 153, 166))
_DOT_COLORS = ((191, 38, 140), (242, 230, 89))

_OUTLINE_DIM = 0.45
_STIPPLE_DIM = 0.35


@dataclass(frozen=True)
class AttributeSpec:
    """A point in the shape x appearance x style factor grid."""

    shape: str
    appearance: str
    style: str

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ConfigError(f"unknown shape {self.shape!r}; expected one of {SHAPES}")
        if self.appearance not in APPEARANCES:
            raise ConfigError(
                f"unknown appearance {self.appearance!r}; expected one of {APPEARANCES}")
        if self.style not in STYLES:
            raise ConfigError(f"unknown style {self.style!r}; expected one of {STYLES}")

    def as_tuple(self) -> tuple[str, str, str]:
        return (self.shape, self.appearance, self.style)


@dataclass
class CorpusImage:
    pixels: np.ndarray  # (H, W, 3) float64 in [0, 1]
    mask: np.ndarray    # (H, W) uint8, 1 = foreground
    labels: AttributeSpec
    seed: int


# -- geometry -------------------------------------------------------------------

def _grid(res: int):
    yy, xx = np.mgrid[0:res, 0:res].astype(np.float64)
    c = (res - 1) / 2.0
    return yy - c, xx - c


def _in_triangle(py, px, a, b, c) -> np.ndarray:
    def cross(o, q, y, x):
        return (q[1] - o[1]) * (y - o[0]) - (q[0] - o[0]) * (x - o[1])

    d1 = cross(a, b, py, px)
    d2 = cross(b, c, py, px)
    d3 = cross(c, a, py, px)
    neg = (d1 < 0) | (d2 < 0) | (d3 < 0)
    pos = (d1 > 0) | (d2 > 0) | (d3 > 0)
    return ~(neg & pos)


def _star_mask(dy, dx, r_out=14.0, r_in=7.0) -> np.ndarray:
    # 5 spikes + inner pentagon, apex pointing up (negative y)
    angles_out = -np.pi / 2 + np.arange(5) * 2 * np.pi / 5
    angles_in = angles_out + np.pi / 5
    outer = [(r_out * np.sin(a), r_out * np.cos(a)) for a in angles_out]
    inner = [(r_in * np.sin(a), r_in * np.cos(a)) for a in angles_in]
    mask = np.zeros(dy.shape, dtype=bool)
    for i in range(5):
        mask |= _in_triangle(dy, dx, outer[i], inner[i], inner[(i - 1) % 5])
    # convex inner pentagon through the inner vertices; half-plane orientation
    # is fixed by requiring the center to be inside
    pent = np.ones(dy.shape, dtype=bool)
    for i in range(5):
        o = inner[i]
        q = inner[(i + 1) % 5]
        edge = (q[1] - o[1]) * (dy - o[0]) - (q[0] - o[0]) * (dx - o[1])
        center_side = (q[1] - o[1]) * (0.0 - o[0]) - (q[0] - o[0]) * (0.0 - o[1])
        pent &= (edge * np.sign(center_side)) >= 0
    return mask | pent


def shape_mask(shape: str, res: int = RESOLUTION) -> np.ndarray:
    """Binary geometry for a shape, centered on the canvas.

    Sizes are deliberately staggered so that masks of different shapes overlap
    weakly (pairwise IoU well below 0.6), which keeps shape metrics sharp.
    """
    dy, dx = _grid(res)
    s = res / 32.0  # geometry scales with canvas size
    if shape == "circle":
        m = dy * dy + dx * dx <= (8.2 * s) ** 2
    elif shape == "square":
        m = (np.abs(dy) <= 11.0 * s) & (np.abs(dx) <= 11.0 * s)
    elif shape == "triangle":
        apex = (-13.0 * s, 0.0)
        left = (12.0 * s, -14.0 * s)
        right = (12.0 * s, 14.0 * s)
        m = _in_triangle(dy, dx, apex, left, right)
    elif shape == "star":
        m = _star_mask(dy, dx, r_out=14.0 * s, r_in=7.0 * s)
    elif shape == "cross":
        m = ((np.abs(dy) <= 5.5 * s) & (np.abs(dx) <= 14.0 * s)) | \
            ((np.abs(dx) <= 5.5 * s) & (np.abs(dy) <= 14.0 * s))
    else:
        raise ConfigError(f"unknown shape {shape!r}")
    return m


# -- appearance / style programs ---------------------------------------------------

def _color(rgb) -> np.ndarray:
    return np.array(rgb, dtype=np.float64) / 255.0


def _appearance_field(appearance: str, res: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:res, 0:res]
    field = np.zeros((res, res, 3), dtype=np.float64)
    # draw the per-image pattern offsets in a fixed order for determinism
    stripe_phase = int(rng.integers(0, 4))
    checker_off = rng.integers(0, 3, size=2)
    dot_off = rng.integers(0, 4, size=2)
    if appearance in _SOLID_COLORS:
        field[:] = _color(_SOLID_COLORS[appearance])
    elif appearance == "stripes":
        a, b = (_color(c) for c in _STRIPE_COLORS)
        band = ((yy + stripe_phase) // 2) % 2 == 0
        field[band] = a
        field[~band] = b
    elif appearance == "checker":
        a, b = (_color(c) for c in _CHECKER_COLORS)
        cell = (((yy + checker_off[0]) // 3) + ((xx + checker_off[1]) // 3)) % 2 == 0
        field[cell] = a
        field[~cell] = b
    elif appearance == "dots":
        base, dot = (_color(c) for c in _DOT_COLORS)
        blocks = (((yy + dot_off[0]) % 4) < 2) & (((xx + dot_off[1]) % 4) < 2)
        field[:] = base
        field[blocks] = dot
    else:
        raise ConfigError(f"unknown appearance {appearance!r}")
    return field


def _apply_style(style: str, field: np.ndarray, geom: np.ndarray,
                 rng: np.random.Generator) -> np.ndarray:
    stipple_off = rng.integers(0, 3, size=2)
    if style == "flat":
        return field
    if style == "outline":
        interior = binary_erosion(geom, iterations=2)
        out = field * _OUTLINE_DIM
        rim = geom & ~interior
        out[rim] = field[rim]
        return out
    if style == "stippled":
        res = geom.shape[0]
        yy, xx = np.mgrid[0:res, 0:res]
        dots = (((yy + stipple_off[0]) % 3) == 0) & (((xx + stipple_off[1]) % 3) == 0)
        out = field * _STIPPLE_DIM
        out[dots] = field[dots]
        return out
    raise ConfigError(f"unknown style {style!r}")


# -- public operations --------------------------------------------------------------

def generate_sample(spec: AttributeSpec, seed: int, res: int = RESOLUTION) -> CorpusImage:
    """Render one image deterministically from (spec, seed)."""
    if not isinstance(spec, AttributeSpec):
        spec = AttributeSpec(*spec)
    if seed < 0:
        raise ConfigError(f"seed must be >= 0, got {seed}")
    rng = np.random.default_rng(seed)
    geom = shape_mask(spec.shape, res)
    field = _appearance_field(spec.appearance, res, rng)
    styled = _apply_style(spec.style, field, geom, rng)
    pixels = np.empty((res, res, 3), dtype=np.float64)
    pixels[:] = BACKGROUND
    pixels[geom] = styled[geom]
    # snap to the 8-bit grid so PNG storage is lossless
    pixels = np.round(pixels * 255.0) / 255.0
    return CorpusImage(pixels=pixels, mask=geom.astype(np.uint8), labels=spec, seed=seed)


def extract_mask(pixels: np.ndarray, tolerance: float = MASK_TOLERANCE) -> np.ndarray:
    """Foreground = pixels that differ from the reserved background color.

    Emits EmptyMaskWarning (and returns an all-zero mask) if nothing differs.
    """
    pixels = np.asarray(pixels, dtype=np.float64)
    diff = np.abs(pixels - BACKGROUND).max(axis=-1)
    mask = (diff > tolerance).astype(np.uint8)
    if not mask.any():
        warnings.warn("no foreground pixels found", EmptyMaskWarning, stacklevel=2)
    return mask


def all_combos() -> list[AttributeSpec]:
    return [AttributeSpec(s, a, st) for s, a, st in product(SHAPES, APPEARANCES, STYLES)]


def _pick_held_out(seed: int) -> list[AttributeSpec]:
    """6 combos reserved for one-shot references: 3 flat (distinct shapes and
    appearances, for the encoder/decoder experiment) plus 3 non-flat."""
    rng = np.random.default_rng(seed + 0x5EED)
    combos = all_combos()
    order = rng.permutation(len(combos))
    flat, rest = [], []
    for idx in order:
        c = combos[idx]
        if c.style == "flat" and len(flat) < 3:
            if all(c.shape != o.shape and c.appearance != o.appearance for o in flat):
                flat.append(c)
        elif c.style != "flat" and len(rest) < 3:
            if all(c.shape != o.shape for o in rest):
                rest.append(c)
        if len(flat) == 3 and len(rest) == 3:
            break
    return flat + rest


@dataclass
class Corpus:
    images: list[CorpusImage]
    held_out_combos: list[AttributeSpec]
    n_per_combo: int
    seed: int
    resolution: int = RESOLUTION

    def split(self, name: str) -> list[CorpusImage]:
        held = {c.as_tuple() for c in self.held_out_combos}
        if name == "train":
            return [im for im in self.images if im.labels.as_tuple() not in held]
        if name == "heldout":
            return [im for im in self.images if im.labels.as_tuple() in held]
        raise ConfigError(f"unknown split {name!r}")


def generate_corpus(n_per_combo: int, seed: int, res: int = RESOLUTION) -> Corpus:
    """Render every combo n_per_combo times; mark held-out reference combos."""
    if n_per_combo < 1:
        raise ConfigError(f"n_per_combo must be >= 1, got {n_per_combo}")
    held = _pick_held_out(seed)
    images = []
    for ci, combo in enumerate(all_combos()):
        for rep in range(n_per_combo):
            img_seed = seed + 7919 * (ci * n_per_combo + rep)
            images.append(generate_sample(combo, img_seed, res))
    return Corpus(images=images, held_out_combos=held, n_per_combo=n_per_combo,
                  seed=seed, resolution=res)


# -- storage --------------------------------------------------------------------------

def save_image_png(pixels: np.ndarray, path: Path):
    arr = np.round(np.asarray(pixels) * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def load_image_png(path: Path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64)
    return arr / 255.0


def save_corpus(corpus: Corpus, out_dir: Path) -> Path:
    """Write PNGs plus a JSON manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    held = {c.as_tuple() for c in corpus.held_out_combos}
    entries = []
    for i, im in enumerate(corpus.images):
        name = f"{i:04d}_{im.labels.shape}_{im.labels.appearance}_{im.labels.style}.png"
        save_image_png(im.pixels, img_dir / name)
        entries.append({
            "shape": im.labels.shape,
            "appearance": im.labels.appearance,
            "style": im.labels.style,
            "seed": im.seed,
            "path": f"images/{name}",
            "split": "heldout" if im.labels.as_tuple() in held else "train",
        })
    manifest = {
        "version": 1,
        "resolution": corpus.resolution,
        "background": [128, 128, 128],
        "n_per_combo": corpus.n_per_combo,
        "seed": corpus.seed,
        "held_out_combos": [list(c.as_tuple()) for c in corpus.held_out_combos],
        "images": entries,
    }
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=1))
    return manifest_path


def load_corpus(manifest_path: Path) -> Corpus:
    """Rebuild a Corpus from a manifest; masks are re-derived exactly."""
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise ConfigError(f"corpus manifest not found: {manifest_path}")
    meta = json.loads(manifest_path.read_text())
    base = manifest_path.parent
    images = []
    for e in meta["images"]:
        pixels = load_image_png(base / e["path"])
        spec = AttributeSpec(e["shape"], e["appearance"], e["style"])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", EmptyMaskWarning)
            mask = extract_mask(pixels)
        images.append(CorpusImage(pixels=pixels, mask=mask, labels=spec, seed=e["seed"]))
    held = [AttributeSpec(*c) for c in meta["held_out_combos"]]
    return Corpus(images=images, held_out_combos=held,
                  n_per_combo=meta["n_per_combo"], seed=meta["seed"],
                  resolution=meta["resolution"])
