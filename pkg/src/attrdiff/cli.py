"""Operator CLI: corpus, base-train, tune, sample, sweep, dichotomy, ablation, eval.

Every command writes a self-contained run directory: the fully resolved
config echo, outputs (checkpoints, artifacts, images, reports), and static
plots. Exit codes: 0 success, 2 config error, 3 fingerprint mismatch,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import warnings
from pathlib import Path

import numpy as np

from . import experiments
from .checkpoint import load_checkpoint, save_checkpoint
from .config import echo_config, load_config, require
from .corpus import (AttributeSpec, extract_mask, generate_corpus, load_corpus,
                     load_image_png, save_corpus, save_image_png)
from .errors import ConfigError, EmptyMaskWarning, FingerprintMismatch, NumericError
from .hypernet import load_artifact, save_artifact
from .metrics import (AttributeClassifier, FeatureExtractor, MetricsReport, embed_similarity,
                      gram_distance, iou, text_alignment, train_classifier)
from .pretrain import PretrainConfig, train_base
from .sampler import SampleRequest, lambda_sweep, sample, sweep_rank_correlation
from .text import PLACEHOLDERS, prompt_template
from .tuner import ReferenceSample, TuningConfig, transfer_class, tune
from .unet import ModelConfig


def _prepare_out(out: Path, force: bool) -> Path:
    out = Path(out)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise ConfigError(
                f"run directory {out} already has contents; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_csv(path: Path, rows: list[dict]):
    if not rows:
        path.write_text("")
        return
    keys = list(rows[0].keys())
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=keys)
        writer.writeheader()
        writer.writerows(rows)


def _save_grid(images, path: Path, titles=None, cols=None):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    n = len(images)
    cols = cols or min(n, 8)
    rows = (n + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(1.6 * cols, 1.8 * rows), squeeze=False)
    for i in range(rows * cols):
        ax = axes[i // cols][i % cols]
        ax.axis("off")
        if i < n:
            ax.imshow(np.clip(images[i], 0, 1))
            if titles:
                ax.set_title(titles[i], fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _plot_series(path: Path, series: dict[str, tuple], xlabel: str, ylabel: str):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.2))
    for label, (xs, ys) in series.items():
        ax.plot(xs, ys, marker="o", markersize=3, label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if len(series) > 1:
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _resolve_reference(corpus, spec):
    """Reference image from a held-out index or an explicit combo triple."""
    held = experiments.pick_references(corpus, n=len(corpus.held_out_combos), style=None)
    if isinstance(spec, int):
        if not 0 <= spec < len(held):
            raise ConfigError(f"reference index {spec} out of range 0..{len(held) - 1}")
        return held[spec]
    combo = AttributeSpec(*spec)
    for im in corpus.images:
        if im.labels == combo:
            return im
    raise ConfigError(f"no corpus image with combo {combo.as_tuple()}")


def _load_classifier_near(manifest_path: str) -> AttributeClassifier:
    stem = Path(manifest_path).parent / "classifier"
    return AttributeClassifier.load(stem)


# -- commands -------------------------------------------------------------------


def cmd_corpus(args, out: Path):
    cfg = load_config(args.config, "corpus")
    if args.seed is not None:
        cfg["seed"] = args.seed
    corpus = generate_corpus(cfg["n_per_combo"], cfg["seed"])
    manifest = save_corpus(corpus, out)
    clf = train_classifier(corpus)
    clf.save(out / "classifier")
    echo_config("corpus", cfg, out)
    print(f"corpus: {len(corpus.images)} images -> {manifest}")
    print(f"classifier validation accuracy: {clf.meta['validation_accuracy']}")


def cmd_base_train(args, out: Path):
    cfg = load_config(args.config, "base-train")
    if args.seed is not None:
        cfg["seed"] = args.seed
    corpus = load_corpus(require(cfg, "corpus_manifest", "base-train"))
    model_cfg = ModelConfig.from_dict({**ModelConfig().to_dict(), **cfg["model"]})
    pre = PretrainConfig(steps=cfg["steps"], batch=cfg["batch"],
                         learning_rate=cfg["learning_rate"], ema_decay=cfg["ema_decay"],
                         seed=cfg["seed"], val_fraction=cfg["val_fraction"], model=model_cfg)
    model, history = train_base(corpus, pre, progress=True)
    save_checkpoint(model, out / "checkpoint")
    _write_csv(out / "loss_trace.csv",
               [{"step": i, "loss": float(v)} for i, v in enumerate(history["loss"])])
    (out / "history.json").write_text(json.dumps(
        {k: v for k, v in history.items() if k != "loss"}, indent=1))
    _plot_series(out / "loss.png",
                 {"train": (np.arange(len(history["loss"])), history["loss"])},
                 "step", "denoising loss")
    echo_config("base-train", cfg, out)
    print(f"validation loss: untrained {history['untrained_val_loss']:.4f} "
          f"-> trained {history['trained_val_loss']:.4f}")
    print(f"checkpoint fingerprint: {model.fingerprint()[:16]}...")


def cmd_tune(args, out: Path):
    cfg = load_config(args.config, "tune")
    if args.seed is not None:
        cfg["seed"] = args.seed
    model = load_checkpoint(require(cfg, "checkpoint", "tune"))
    corpus = load_corpus(require(cfg, "corpus_manifest", "tune"))
    reference = _resolve_reference(corpus, cfg["reference"])
    sample_ref = ReferenceSample(image=reference, class_name=reference.labels.shape,
                                 attribute=cfg["attribute"])
    tcfg = TuningConfig(steps=cfg["steps"], learning_rate=cfg["learning_rate"],
                        grad_accumulation=cfg["grad_accumulation"], seed=cfg["seed"],
                        mode=cfg["mode"])
    artifact = tune(model, sample_ref, tcfg)
    save_artifact(artifact, out / "artifact")
    _write_csv(out / "loss_trace.csv",
               [{"step": i, "loss": float(v)} for i, v in enumerate(artifact.loss_trace)])
    _plot_series(out / "loss.png",
                 {"tune": (np.arange(len(artifact.loss_trace)), artifact.loss_trace)},
                 "step", "denoising loss")
    echo_config("tune", cfg, out)
    print(f"tuned {cfg['attribute']} ({cfg['mode']}) on {reference.labels.as_tuple()}; "
          f"artifact -> {out / 'artifact.npz'}")


def cmd_sample(args, out: Path):
    cfg = load_config(args.config, "sample")
    if args.seed is not None:
        cfg["seed"] = args.seed
    model = load_checkpoint(require(cfg, "checkpoint", "sample"))
    artifact = load_artifact(cfg["artifact"]) if cfg["artifact"] else None
    req = SampleRequest(prompt=require(cfg, "prompt", "sample"), lam=cfg["lam"],
                        steps=cfg["steps"], method=cfg["method"], seed=cfg["seed"],
                        batch=cfg["batch"])
    images = sample(model, artifact, req)
    img_dir = out / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    for i, im in enumerate(images):
        save_image_png(im, img_dir / f"{i:03d}.png")
    _save_grid(images, out / "grid.png",
               titles=[f"seed {req.seed} #{i}" for i in range(len(images))])
    echo_config("sample", cfg, out)
    print(f"{len(images)} images -> {img_dir}")


def cmd_sweep(args, out: Path):
    cfg = load_config(args.config, "sweep")
    model = load_checkpoint(require(cfg, "checkpoint", "sweep"))
    artifact = load_artifact(require(cfg, "artifact", "sweep"))
    prompt = cfg["prompt"]
    if not prompt:
        novel = transfer_class(artifact.reference_mask)
        prompt = prompt_template(novel, artifact.attribute,
                                 PLACEHOLDERS[artifact.attribute])
    clf = _load_classifier_near(cfg["corpus_manifest"]) if cfg["corpus_manifest"] else None
    report = lambda_sweep(model, artifact, prompt, cfg["lambdas"], cfg["seeds"],
                          steps=cfg["steps"], batch=cfg["batch"], clf=clf)
    rho = sweep_rank_correlation(report)
    report.metadata["rank_correlation"] = rho
    (out / "report.json").write_text(report.to_json())
    _write_csv(out / "sweep.csv", report.rows)
    lams = sorted({r["lambda"] for r in report.rows})
    means = [np.mean([r["alignment"] for r in report.rows if r["lambda"] == l])
             for l in lams]
    _plot_series(out / "alignment.png", {"alignment": (lams, means)},
                 "lambda", "attribute alignment")
    grid_images, titles = [], []
    for lam in lams:
        req = SampleRequest(prompt=prompt, lam=float(lam), steps=cfg["steps"],
                            method="ddim", seed=int(cfg["seeds"][0]), batch=1)
        grid_images.append(sample(model, artifact, req)[0])
        titles.append(f"lam={lam}")
    _save_grid(grid_images, out / "grid.png", titles=titles, cols=len(lams))
    echo_config("sweep", cfg, out)
    print(f"rank correlation(lambda, alignment) = {rho:.3f} over {len(cfg['seeds'])} seeds")


def cmd_dichotomy(args, out: Path):
    cfg = load_config(args.config, "dichotomy")
    model = load_checkpoint(require(cfg, "checkpoint", "dichotomy"))
    corpus = load_corpus(require(cfg, "corpus_manifest", "dichotomy"))
    tuning = TuningConfig(steps=cfg["steps"], learning_rate=cfg["learning_rate"],
                          grad_accumulation=cfg["grad_accumulation"], seed=cfg["seed"])
    report = experiments.dichotomy_suite(model, corpus, cfg["n_references"],
                                         cfg["seeds"], tuning)
    (out / "report.json").write_text(report.to_json())
    _write_csv(out / "rows.csv", report.rows)
    m = report.metadata
    _plot_series(out / "dichotomy.png", {
        "encoder": ([0, 1], [m["encoder_mean_iou"], m["encoder_mean_gram"]]),
        "decoder": ([0, 1], [m["decoder_mean_iou"], m["decoder_mean_gram"]]),
    }, "metric (0=IoU, 1=Gram)", "value")
    echo_config("dichotomy", cfg, out)
    print(f"shape IoU:  encoder {m['encoder_mean_iou']:.3f} vs decoder {m['decoder_mean_iou']:.3f}")
    print(f"gram dist:  encoder {m['encoder_mean_gram']:.4f} vs decoder {m['decoder_mean_gram']:.4f}")


def cmd_ablation(args, out: Path):
    cfg = load_config(args.config, "ablation")
    model = load_checkpoint(require(cfg, "checkpoint", "ablation"))
    corpus = load_corpus(require(cfg, "corpus_manifest", "ablation"))
    clf = _load_classifier_near(cfg["corpus_manifest"])
    tuning = TuningConfig(steps=cfg["steps"], learning_rate=cfg["learning_rate"],
                          grad_accumulation=cfg["grad_accumulation"], seed=cfg["seed"])
    refs = experiments.pick_references(corpus, cfg["n_references"])
    combined = []
    for i, ref in enumerate(refs):
        report = experiments.run_ablation_experiment(
            model, ref, cfg["seeds"], clf, cfg["attribute"], tuning)
        (out / f"report_ref{i}.json").write_text(report.to_json())
        traces = report.metadata.pop("loss_traces")
        _plot_series(out / f"loss_ref{i}.png",
                     {k: (np.arange(len(v)), v) for k, v in traces.items()},
                     "step", "denoising loss")
        combined.append({"reference": "/".join(ref.labels.as_tuple()),
                         **{k: v for k, v in report.metadata.items()
                            if k.endswith(("alignment", "drop"))}})
        print(f"ref {ref.labels.as_tuple()}: "
              f"alignment hypernet {report.metadata['hypernet_mean_alignment']:.4f} "
              f"vs direct {report.metadata['direct_mean_alignment']:.4f}; "
              f"text drop hypernet {report.metadata['hypernet_mean_text_drop']:.3f} "
              f"vs direct {report.metadata['direct_mean_text_drop']:.3f}")
    _write_csv(out / "summary.csv", combined)
    echo_config("ablation", cfg, out)


def cmd_eval(args, out: Path):
    cfg = load_config(args.config, "eval")
    corpus = load_corpus(require(cfg, "corpus_manifest", "eval"))
    clf = _load_classifier_near(cfg["corpus_manifest"])
    reference = _resolve_reference(corpus, cfg["reference"])
    fx = FeatureExtractor()
    images_dir = Path(require(cfg, "images_dir", "eval"))
    paths = sorted(images_dir.glob("*.png"))
    if not paths:
        raise ConfigError(f"no .png images found in {images_dir}")
    rows = []
    for p in paths:
        img = load_image_png(p)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", EmptyMaskWarning)
            mask = extract_mask(img)
        row = {
            "image": p.name,
            "iou": iou(mask, reference.mask),
            "gram_distance": gram_distance(img, reference.pixels, fx),
            "embed_similarity": embed_similarity(img, reference.pixels, fx),
        }
        if cfg["prompt"]:
            row["text_alignment"] = text_alignment(img, cfg["prompt"], clf)
        rows.append(row)
    report = MetricsReport.from_rows(rows, {"experiment": "eval",
                                            "reference": list(reference.labels.as_tuple()),
                                            "images_dir": str(images_dir)})
    (out / "report.json").write_text(report.to_json())
    _write_csv(out / "rows.csv", rows)
    echo_config("eval", cfg, out)
    print(json.dumps(report.aggregates, indent=1))


COMMANDS = {
    "corpus": cmd_corpus,
    "base-train": cmd_base_train,
    "tune": cmd_tune,
    "sample": cmd_sample,
    "sweep": cmd_sweep,
    "dichotomy": cmd_dichotomy,
    "ablation": cmd_ablation,
    "eval": cmd_eval,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="attrdiff",
        description="One-shot attribute customization on a toy diffusion model.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, default=None,
                       help="JSON config file (defaults are used when omitted)")
        p.add_argument("--out", type=Path, default=None, help="run directory")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--force", action="store_true",
                       help="allow writing into a non-empty run directory")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        out = _prepare_out(args.out or Path("runs") / args.command, args.force)
        COMMANDS[args.command](args, out)
        return 0
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except FingerprintMismatch as e:
        print(f"fingerprint mismatch: {e}", file=sys.stderr)
        return 3
    except (NumericError, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
