"""Scripted experiments: the encoder/decoder dichotomy suite across several
references, and the hypernet-vs-direct tuning ablation.

Both produce MetricsReports whose metadata carries the aggregate means the
acceptance checks read off directly.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .corpus import Corpus, CorpusImage
from .errors import ConfigError
from .metrics import AttributeClassifier, FeatureExtractor, MetricsReport, text_alignment
from .sampler import SampleRequest, alignment_metric, sample
from .text import PLACEHOLDERS, prompt_template
from .tuner import (DICHOTOMY_BATCH, DICHOTOMY_SAMPLE_STEPS, TuningConfig, make_reference,
                    run_dichotomy_experiment, transfer_class, tune)
from .unet import UNetModel


def pick_references(corpus: Corpus, n: int, style: str | None = "flat") -> list[CorpusImage]:
    """Held-out reference images, one per held-out combo (optionally one style)."""
    seen = set()
    refs = []
    for im in corpus.split("heldout"):
        combo = im.labels.as_tuple()
        if combo in seen:
            continue
        if style is not None and im.labels.style != style:
            continue
        seen.add(combo)
        refs.append(im)
        if len(refs) == n:
            return refs
    if len(refs) < n:
        raise ConfigError(
            f"corpus has only {len(refs)} held-out references matching style={style!r}; "
            f"asked for {n}")
    return refs


def dichotomy_suite(base: UNetModel, corpus: Corpus, n_references: int = 3,
                    seeds=(0, 1, 2, 3, 4), tuning: TuningConfig | None = None,
                    fx: FeatureExtractor | None = None) -> MetricsReport:
    """Pooled encoder/decoder dichotomy over several held-out references."""
    fx = fx or FeatureExtractor()
    refs = pick_references(corpus, n_references)
    rows = []
    per_reference = []
    for ref in refs:
        report = run_dichotomy_experiment(base, ref, seeds, tuning, fx)
        for r in report.rows:
            rows.append({**r, "reference": "/".join(ref.labels.as_tuple())})
        per_reference.append(report.metadata)
    pooled = MetricsReport.from_rows(rows, {"experiment": "dichotomy-suite",
                                            "seeds": [int(s) for s in seeds],
                                            "per_reference": per_reference})
    for variant in ("encoder", "decoder"):
        sub = [r for r in rows if r["variant"] == variant]
        pooled.metadata[f"{variant}_mean_iou"] = float(np.mean([r["iou"] for r in sub]))
        pooled.metadata[f"{variant}_mean_gram"] = float(
            np.mean([r["gram_distance"] for r in sub]))
    return pooled


ABLATION_TUNING = TuningConfig(steps=300)


def run_ablation_experiment(base: UNetModel, reference: CorpusImage, seeds,
                            clf: AttributeClassifier,
                            attribute: str = "appearance",
                            tuning: TuningConfig | None = None,
                            fx: FeatureExtractor | None = None) -> MetricsReport:
    """Hypernet-driven vs direct fine-tuning at a matched step budget.

    Reports, per (mode, seed): the attribute-alignment metric of transfer
    generations, their prompt alignment, and the drop relative to the base
    model's prompt alignment on the same request.
    """
    fx = fx or FeatureExtractor()
    tuning = tuning or ABLATION_TUNING
    novel = transfer_class(reference.mask)
    prompt = prompt_template(novel, attribute, PLACEHOLDERS[attribute])
    rows = []
    traces = {}
    for seed in seeds:
        req = SampleRequest(prompt=prompt, lam=1.0, steps=DICHOTOMY_SAMPLE_STEPS,
                            method="ddim", seed=int(seed), batch=DICHOTOMY_BATCH)
        base_images = sample(base, None, req)
        base_align = float(np.mean([text_alignment(im, prompt, clf) for im in base_images]))
        for mode in ("hypernet", "direct"):
            cfg = replace(tuning, seed=int(seed), mode=mode)
            artifact = tune(base, make_reference(reference, attribute), cfg, fx)
            traces[f"{mode}/seed{seed}"] = artifact.loss_trace
            images = sample(base, artifact, req)
            aligns, texts = [], []
            for img in images:
                _, _, align = alignment_metric(artifact, img, fx)
                aligns.append(align)
                texts.append(text_alignment(img, prompt, clf))
            rows.append({
                "mode": mode,
                "seed": int(seed),
                "attribute_alignment": float(np.mean(aligns)),
                "text_alignment": float(np.mean(texts)),
                "base_text_alignment": base_align,
                "text_alignment_drop": base_align - float(np.mean(texts)),
            })
    meta = {"experiment": "ablation", "reference": list(reference.labels.as_tuple()),
            "attribute": attribute, "novel_class": novel, "prompt": prompt,
            "seeds": [int(s) for s in seeds], "tuning": tuning.to_dict()}
    report = MetricsReport.from_rows(rows, meta)
    for mode in ("hypernet", "direct"):
        sub = [r for r in rows if r["mode"] == mode]
        report.metadata[f"{mode}_mean_alignment"] = float(
            np.mean([r["attribute_alignment"] for r in sub]))
        report.metadata[f"{mode}_mean_text_drop"] = float(
            np.mean([r["text_alignment_drop"] for r in sub]))
    report.metadata["loss_traces"] = {k: v.tolist() for k, v in traces.items()}
    return report
