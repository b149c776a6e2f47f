"""Attribute-level evaluation: IoU, Gram distance, embedding similarity,
and prompt alignment via a small frozen classifier.

The feature extractor is a fixed 3-stage conv pyramid whose weights are
generated from a recorded seed and never trained, so scores are identical
across runs and machines. The prompt-alignment classifier uses deviation
features that are exactly zero on a pure-background image and linear heads
without bias, so an empty canvas scores exactly uniform class probabilities.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import (APPEARANCES, BACKGROUND, MASK_TOLERANCE, SHAPES, STYLES, Corpus,
                     generate_sample)
from .errors import ConfigError, NumericError, VocabularyError
from .text import tokenize, TOKENS

FEATURE_SEED = 1377


# -- frozen feature pyramid -----------------------------------------------------


@dataclass
class FeatureExtractor:
    """Fixed random conv pyramid: 3 stages of 3x3 conv + ReLU, 2x pooling between."""

    seed: int = FEATURE_SEED
    stage_channels: tuple[int, ...] = (8, 16, 32)
    weights: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        if not self.weights:
            rng = np.random.default_rng(self.seed)
            c_in = 3
            for c_out in self.stage_channels:
                w = rng.standard_normal((3, 3, c_in, c_out)) * np.sqrt(2.0 / (9 * c_in))
                b = np.zeros(c_out)
                self.weights.append((w, b))
                c_in = c_out

    def stages(self, image: np.ndarray) -> list[np.ndarray]:
        """Stage outputs (after conv+ReLU, before pooling), each (H_i, W_i, C_i)."""
        x = np.asarray(image, dtype=np.float64) - BACKGROUND
        outs = []
        for i, (w, b) in enumerate(self.weights):
            x = _conv3x3_same(x, w) + b
            x = np.maximum(x, 0.0)
            outs.append(x)
            if i < len(self.weights) - 1:
                h, wd, c = x.shape
                x = x.reshape(h // 2, 2, wd // 2, 2, c).mean(axis=(1, 3))
        return outs

    def pooled(self, image: np.ndarray) -> np.ndarray:
        """Globally average-pooled final-stage features."""
        return self.stages(image)[-1].mean(axis=(0, 1))


def _conv3x3_same(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    h, wd, _ = x.shape
    xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    out = np.zeros((h, wd, w.shape[3]))
    for dy in range(3):
        for dx in range(3):
            out += xp[dy:dy + h, dx:dx + wd, :] @ w[dy, dx]
    return out


# -- mask / style / embedding metrics ----------------------------------------------


def iou(mask_a: np.ndarray, mask_b: np.ndarray) -> float:
    """Intersection over union of binary masks; 1.0 when both are empty."""
    a = np.asarray(mask_a).astype(bool)
    b = np.asarray(mask_b).astype(bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def gram_matrix(features: np.ndarray) -> np.ndarray:
    """G = F F^T / (C*H*W) for a (H, W, C) feature map."""
    h, w, c = features.shape
    f = features.reshape(h * w, c).T
    return (f @ f.T) / (c * h * w)


def gram_distance(image_a: np.ndarray, image_b: np.ndarray,
                  fx: FeatureExtractor) -> float:
    """Sum over stages of squared Frobenius distance between Gram matrices."""
    a = np.asarray(image_a)
    b = np.asarray(image_b)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    total = 0.0
    for fa, fb in zip(fx.stages(a), fx.stages(b)):
        diff = gram_matrix(fa) - gram_matrix(fb)
        total += float(np.sum(diff * diff))
    return total


def embed_similarity(image_a: np.ndarray, image_b: np.ndarray,
                     fx: FeatureExtractor) -> float:
    """Cosine similarity of pooled final-stage features."""
    va = fx.pooled(image_a)
    vb = fx.pooled(image_b)
    na, nb = np.linalg.norm(va), np.linalg.norm(vb)
    if na == 0.0 or nb == 0.0:
        raise NumericError("similarity undefined for zero-norm pooled features")
    return float(np.dot(va, vb) / (na * nb))


# -- prompt-alignment classifier ------------------------------------------------------


def classifier_features(image: np.ndarray) -> np.ndarray:
    """Deviation features: exactly zero on a pure-background canvas."""
    x = np.asarray(image, dtype=np.float64)
    res = x.shape[0]
    block = res // 8
    dev = x - BACKGROUND
    occupied = (np.abs(dev).max(axis=-1) > MASK_TOLERANCE).astype(np.float64)
    occ = occupied.reshape(8, block, 8, block).mean(axis=(1, 3))
    color = dev.reshape(8, block, 8, block, 3).mean(axis=(1, 3))
    # brightness-invariant color direction per block, zeroed where empty
    norm = np.linalg.norm(color, axis=-1, keepdims=True)
    chroma = color / np.maximum(norm, 1e-9) * occ[..., None]
    gy = np.abs(np.diff(x, axis=0)).mean(axis=(0, 1))
    gx = np.abs(np.diff(x, axis=1)).mean(axis=(0, 1))
    return np.concatenate([occ.ravel(), color.ravel(), chroma.ravel(), gy, gx])


_HEADS = {"shape": SHAPES, "appearance": APPEARANCES, "style": STYLES}


@dataclass
class AttributeClassifier:
    """Frozen multi-head softmax classifier over (shape, appearance, style).

    Linear heads without bias on deviation features; trained once with
    deterministic full-batch gradient descent and then frozen.
    """

    weights: dict[str, np.ndarray]
    meta: dict

    def probabilities(self, image: np.ndarray) -> dict[str, np.ndarray]:
        f = classifier_features(image)
        out = {}
        for head, w in self.weights.items():
            logits = f @ w
            logits -= logits.max()
            e = np.exp(logits)
            out[head] = e / e.sum()
        return out

    def label_probability(self, image: np.ndarray, head: str, label: str) -> float:
        idx = _HEADS[head].index(label)
        return float(self.probabilities(image)[head][idx])

    def save(self, stem: Path) -> Path:
        stem = Path(stem)
        np.savez(stem.with_suffix(".npz"), **{f"head/{k}": w for k, w in self.weights.items()})
        path = stem.with_suffix(".json")
        path.write_text(json.dumps(self.meta, indent=1))
        return path

    @classmethod
    def load(cls, stem: Path) -> "AttributeClassifier":
        stem = Path(stem)
        if not stem.with_suffix(".npz").exists():
            raise ConfigError(f"classifier checkpoint not found at {stem}.npz")
        with np.load(stem.with_suffix(".npz")) as data:
            weights = {k.split("/", 1)[1]: data[k] for k in data.files}
        meta = json.loads(stem.with_suffix(".json").read_text())
        return cls(weights=weights, meta=meta)


def train_classifier(corpus: Corpus, iters: int = 400, lr: float = 2.0,
                     weight_decay: float = 1e-4) -> AttributeClassifier:
    """One-time training pass on the corpus train split (deterministic)."""
    train = corpus.split("train")
    feats = np.stack([classifier_features(im.pixels) for im in train])
    weights = {}
    accuracies = {}
    for head, labels in _HEADS.items():
        y = np.array([labels.index(getattr(im.labels, head)) for im in train])
        w = np.zeros((feats.shape[1], len(labels)))
        onehot = np.eye(len(labels))[y]
        for _ in range(iters):
            logits = feats @ w
            logits -= logits.max(axis=1, keepdims=True)
            p = np.exp(logits)
            p /= p.sum(axis=1, keepdims=True)
            grad = feats.T @ (p - onehot) / len(y) + weight_decay * w
            w -= lr * grad
        weights[head] = w
        accuracies[head] = float((np.argmax(feats @ w, axis=1) == y).mean())
    # validation on freshly rendered images the classifier never saw
    val_acc = {}
    for head, labels in _HEADS.items():
        hits, total = 0, 0
        for im in train[:: max(1, len(train) // 60)]:
            fresh = generate_sample(im.labels, im.seed + 104729)
            probs = AttributeClassifier(weights, {}).probabilities(fresh.pixels)
            hits += int(labels[np.argmax(probs[head])] == getattr(im.labels, head))
            total += 1
        val_acc[head] = hits / total
    meta = {"kind": "attribute-classifier", "iters": iters, "lr": lr,
            "weight_decay": weight_decay, "train_accuracy": accuracies,
            "validation_accuracy": val_acc}
    return AttributeClassifier(weights=weights, meta=meta)


def text_alignment(image: np.ndarray, prompt: str, clf: AttributeClassifier) -> float:
    """Probability mass the classifier puts on the prompt's named targets.

    Named targets are the concrete class/attribute words appearing in the
    prompt (placeholders are not classifier labels). With several named
    targets the score is the product of their head probabilities.
    """
    ids = tokenize(prompt)
    probs = None
    score = 1.0
    named = 0
    for tok_id in ids:
        tok = TOKENS[tok_id]
        for head, labels in _HEADS.items():
            if tok in labels:
                if probs is None:
                    probs = clf.probabilities(image)
                score *= float(probs[head][labels.index(tok)])
                named += 1
    if named == 0:
        raise ConfigError(f"prompt {prompt!r} names no classifier target")
    return score


# -- report -------------------------------------------------------------------------


_METRIC_RANGES = {
    "iou": (0.0, 1.0),
    "gram_distance": (0.0, np.inf),
    "embed_similarity": (-1.0, 1.0),
    "text_alignment": (0.0, 1.0),
}


@dataclass
class MetricsReport:
    rows: list[dict]
    aggregates: dict[str, dict[str, float]]
    metadata: dict

    @classmethod
    def from_rows(cls, rows: list[dict], metadata: dict | None = None) -> "MetricsReport":
        for row in rows:
            for key, (lo, hi) in _METRIC_RANGES.items():
                if key in row and row[key] is not None:
                    if not (lo <= row[key] <= hi):
                        raise ValueError(f"{key}={row[key]} outside [{lo}, {hi}]")
        keys = sorted({k for row in rows for k, v in row.items()
                       if isinstance(v, (int, float)) and k in _METRIC_RANGES})
        aggregates = {}
        for key in keys:
            vals = np.array([row[key] for row in rows if row.get(key) is not None])
            aggregates[key] = {"mean": float(vals.mean()), "std": float(vals.std())}
        return cls(rows=rows, aggregates=aggregates, metadata=metadata or {})

    def to_json(self) -> str:
        return json.dumps({"rows": self.rows, "aggregates": self.aggregates,
                           "metadata": self.metadata}, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        d = json.loads(text)
        return cls(rows=d["rows"], aggregates=d["aggregates"], metadata=d["metadata"])
