"""Per-site hypernetworks that predict rank-1 attention weight offsets.

Each hypernetwork owns four linear layers: two factor layers map a learnable
scalar constant to a row vector and a column vector, whose outer product is
then passed through learnable row and column transforms (square matrices,
identity at init). The result is an offset with the exact shape of its target
attention matrix and numerical rank <= 1. The row factor layer starts at zero
so every predicted offset is exactly the zero matrix at initialization.

The tuned-attribute artifact format (arrays + JSON manifest) also lives here.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, FingerprintMismatch, NumericError
from .unet import AttentionSite, DECODER, ENCODER, UNetModel

ARTIFACT_VERSION = 1

ATTRIBUTE_PARTITION = {"shape": ENCODER, "appearance": DECODER, "style": DECODER}


def select_partition(attribute: str, model: UNetModel) -> list[AttentionSite]:
    """Attention sites targeted when tuning a given attribute.

    Shape customization targets the encoder half, appearance and style the
    decoder half; bottleneck sites are never targeted.
    """
    if attribute not in ATTRIBUTE_PARTITION:
        raise ConfigError(f"unknown attribute {attribute!r}; expected shape/appearance/style")
    partition = ATTRIBUTE_PARTITION[attribute]
    sites = model.partition_sites(partition)
    if not sites:
        raise ConfigError(f"model has no attention sites in the {partition} partition")
    return sites


@dataclass
class OffsetHyperNet:
    """Four linear layers mapping a learnable constant to a (dim_r, dim_c) offset."""

    site_id: str
    dim_r: int
    dim_c: int
    params: dict[str, ad.Tensor] = field(default_factory=dict)

    PARAM_KEYS = ("cons", "row_w", "row_b", "col_w", "col_b", "row_t", "col_t")

    @classmethod
    def create(cls, site: AttentionSite, rng: np.random.Generator) -> "OffsetHyperNet":
        r, c = site.dim_r, site.dim_c
        params = {
            "cons": ad.Tensor(np.array(1.0)),
            # row factor layer starts at zero => dw == 0 at init; the column
            # factor is seeded so gradients can flow into the row factor
            "row_w": ad.Tensor(np.zeros(r)),
            "row_b": ad.Tensor(np.zeros(r)),
            "col_w": ad.Tensor(np.zeros(c)),
            "col_b": ad.Tensor(rng.standard_normal(c) / np.sqrt(c)),
            "row_t": ad.Tensor(np.eye(r)),
            "col_t": ad.Tensor(np.eye(c)),
        }
        return cls(site_id=site.id, dim_r=r, dim_c=c, params=params)


def init_hypernets(sites: list[AttentionSite], seed: int) -> dict[str, OffsetHyperNet]:
    """One hypernetwork per site; deterministic for a given (sites, seed)."""
    if not sites:
        raise ConfigError("cannot initialize hypernetworks for an empty site list")
    ids = [s.id for s in sites]
    if len(set(ids)) != len(ids):
        raise ConfigError(f"duplicate site ids in {ids}")
    rng = np.random.default_rng(seed)
    return {s.id: OffsetHyperNet.create(s, rng) for s in sites}


def predict_offset(h: OffsetHyperNet) -> ad.Tensor:
    """dw = row_t @ (a b^T) @ col_t^T with a, b the factor-layer outputs."""
    p = h.params
    for key in OffsetHyperNet.PARAM_KEYS:
        if not np.isfinite(p[key].data).all():
            raise NumericError(f"hypernetwork {h.site_id} parameter {key} is not finite")
    a = p["row_w"] * p["cons"] + p["row_b"]
    b = p["col_w"] * p["cons"] + p["col_b"]
    return (p["row_t"] @ ad.outer(a, b)) @ ad.transpose(p["col_t"], (1, 0))


def apply_offsets(w: np.ndarray, dw: np.ndarray, lam: float) -> np.ndarray:
    """Effective weight w + lam * dw; w is never mutated."""
    w = np.asarray(w)
    dw = np.asarray(dw)
    if w.shape != dw.shape:
        raise ValueError(f"weight shape {w.shape} != offset shape {dw.shape}")
    if not np.isfinite(lam):
        raise NumericError(f"lambda must be finite, got {lam}")
    return w + lam * dw


@dataclass
class OffsetBundle:
    """Materialized offsets for one partition (what the sampler consumes)."""

    deltas: dict[str, np.ndarray]
    partition: str
    lambda_train: float = 1.0


# -- tuned-attribute artifact ------------------------------------------------------


@dataclass
class TunedArtifact:
    """Everything a sampler needs to apply a one-shot customization."""

    attribute: str
    mode: str                      # hypernet | direct
    partition: str
    class_name: str
    placeholder_token: str
    placeholder_base: np.ndarray   # base embedding row of the placeholder
    placeholder_tuned: np.ndarray  # trained row (lambda-gated at inference)
    base_fingerprint: str
    site_dims: dict[str, tuple[int, int]]
    hypernets: dict[str, OffsetHyperNet] | None = None
    dense_deltas: dict[str, np.ndarray] | None = None
    reference_pixels: np.ndarray | None = None
    reference_mask: np.ndarray | None = None
    config: dict | None = None
    loss_trace: np.ndarray | None = None

    def offset_bundle(self) -> OffsetBundle:
        with ad.no_grad():
            if self.mode == "hypernet":
                deltas = {sid: predict_offset(h).data for sid, h in self.hypernets.items()}
            else:
                deltas = {sid: dw.copy() for sid, dw in self.dense_deltas.items()}
        return OffsetBundle(deltas=deltas, partition=self.partition)

    def placeholder_row(self, lam: float) -> np.ndarray:
        """Placeholder embedding at intensity lam (lam=0 recovers the base row)."""
        return self.placeholder_base + lam * (self.placeholder_tuned - self.placeholder_base)

    def verify_base(self, model: UNetModel):
        fp = model.fingerprint()
        if fp != self.base_fingerprint:
            raise FingerprintMismatch(
                f"artifact was tuned against base {self.base_fingerprint[:12]}..., "
                f"but the loaded model fingerprints as {fp[:12]}...")


def save_artifact(artifact: TunedArtifact, stem: Path) -> Path:
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    arrays: dict[str, np.ndarray] = {
        "placeholder/base": artifact.placeholder_base,
        "placeholder/tuned": artifact.placeholder_tuned,
    }
    if artifact.reference_pixels is not None:
        arrays["reference/pixels"] = artifact.reference_pixels
        arrays["reference/mask"] = artifact.reference_mask
    if artifact.loss_trace is not None:
        arrays["loss_trace"] = artifact.loss_trace
    if artifact.mode == "hypernet":
        for sid, h in artifact.hypernets.items():
            for key in OffsetHyperNet.PARAM_KEYS:
                arrays[f"hyper/{sid}/{key}"] = h.params[key].data
    else:
        for sid, dw in artifact.dense_deltas.items():
            arrays[f"delta/{sid}"] = dw
    np.savez(stem.with_suffix(".npz"), **arrays)
    manifest = {
        "version": ARTIFACT_VERSION,
        "kind": "tuned-attribute-artifact",
        "attribute": artifact.attribute,
        "mode": artifact.mode,
        "partition": artifact.partition,
        "class_name": artifact.class_name,
        "placeholder_token": artifact.placeholder_token,
        "base_fingerprint": artifact.base_fingerprint,
        "site_dims": {sid: list(dims) for sid, dims in artifact.site_dims.items()},
        "config": artifact.config,
    }
    path = stem.with_suffix(".json")
    path.write_text(json.dumps(manifest, indent=1))
    return path


def load_artifact(stem: Path) -> TunedArtifact:
    stem = Path(stem)
    manifest_path = stem.with_suffix(".json")
    if not manifest_path.exists():
        raise ConfigError(f"artifact not found at {stem}(.json/.npz)")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("version") != ARTIFACT_VERSION:
        raise ConfigError(f"unsupported artifact version {manifest.get('version')}")
    with np.load(stem.with_suffix(".npz")) as data:
        arrays = {k: data[k] for k in data.files}
    site_dims = {sid: tuple(d) for sid, d in manifest["site_dims"].items()}
    hypernets = None
    dense = None
    if manifest["mode"] == "hypernet":
        hypernets = {}
        for sid, (r, c) in site_dims.items():
            params = {}
            for key in OffsetHyperNet.PARAM_KEYS:
                name = f"hyper/{sid}/{key}"
                if name not in arrays:
                    raise ConfigError(f"artifact is missing array {name}")
                params[key] = ad.Tensor(arrays[name])
            hypernets[sid] = OffsetHyperNet(site_id=sid, dim_r=r, dim_c=c, params=params)
    else:
        dense = {sid: arrays[f"delta/{sid}"] for sid in site_dims}
    return TunedArtifact(
        attribute=manifest["attribute"],
        mode=manifest["mode"],
        partition=manifest["partition"],
        class_name=manifest["class_name"],
        placeholder_token=manifest["placeholder_token"],
        placeholder_base=arrays["placeholder/base"],
        placeholder_tuned=arrays["placeholder/tuned"],
        base_fingerprint=manifest["base_fingerprint"],
        site_dims=site_dims,
        hypernets=hypernets,
        dense_deltas=dense,
        reference_pixels=arrays.get("reference/pixels"),
        reference_mask=arrays.get("reference/mask"),
        config=manifest.get("config"),
        loss_trace=arrays.get("loss_trace"),
    )
