"""Config validation and CLI pipeline (small budgets, exit-code contracts)."""

import json
from pathlib import Path

import numpy as np
import pytest

from attrdiff.cli import main
from attrdiff.config import echo_config, load_config
from attrdiff.errors import ConfigError


def test_unknown_section_and_keys_rejected(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"corpus": {"n_per_combo": 1}, "mystery": {}}))
    with pytest.raises(ConfigError, match="mystery"):
        load_config(cfg, "corpus")
    cfg.write_text(json.dumps({"corpus": {"n_per_combo": 1, "colour": 3}}))
    with pytest.raises(ConfigError, match="colour"):
        load_config(cfg, "corpus")


def test_paths_resolve_relative_to_config_file(tmp_path):
    sub = tmp_path / "sub"
    sub.mkdir()
    cfg = sub / "c.json"
    cfg.write_text(json.dumps({"base-train": {"corpus_manifest": "data/manifest.json"}}))
    resolved = load_config(cfg, "base-train")
    assert resolved["corpus_manifest"] == str((sub / "data/manifest.json").resolve())


def test_defaults_used_without_config_file():
    resolved = load_config(None, "sweep")
    assert resolved["lambdas"] == [0.0, 0.25, 0.5, 1.0]


def test_echo_written(tmp_path):
    path = echo_config("corpus", {"n_per_combo": 1, "seed": 0}, tmp_path)
    assert json.loads(path.read_text()) == {"corpus": {"n_per_combo": 1, "seed": 0}}


def test_invalid_json_is_config_error(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text("{not json")
    with pytest.raises(ConfigError, match="JSON"):
        load_config(cfg, "corpus")


@pytest.mark.slow
def test_cli_pipeline_and_exit_codes(tmp_path):
    work = tmp_path
    cfg_path = work / "run.json"

    # corpus
    corpus_out = work / "corpus_run"
    cfg_path.write_text(json.dumps({"corpus": {"n_per_combo": 1, "seed": 0}}))
    assert main(["corpus", "--config", str(cfg_path), "--out", str(corpus_out)]) == 0
    manifest = corpus_out / "manifest.json"
    assert manifest.exists()
    assert (corpus_out / "classifier.npz").exists()
    assert (corpus_out / "config.echo.json").exists()

    # refuses to overwrite without --force
    assert main(["corpus", "--config", str(cfg_path), "--out", str(corpus_out)]) == 2
    assert main(["corpus", "--config", str(cfg_path), "--out", str(corpus_out),
                 "--force"]) == 0

    # missing corpus manifest -> actionable config error (exit 2)
    cfg_path.write_text(json.dumps({
        "base-train": {"corpus_manifest": "absent/manifest.json", "steps": 1}}))
    assert main(["base-train", "--config", str(cfg_path), "--out", str(work / "bt0")]) == 2

    # base-train, tiny budget
    base_out = work / "base_run"
    cfg_path.write_text(json.dumps({
        "base-train": {"corpus_manifest": str(manifest), "steps": 20, "batch": 2,
                       "model": {"channels": [8, 12], "d_text": 16, "time_dim": 16,
                                 "T": 20}}}))
    assert main(["base-train", "--config", str(cfg_path), "--out", str(base_out)]) == 0
    checkpoint = base_out / "checkpoint"
    assert checkpoint.with_suffix(".npz").exists()
    assert (base_out / "loss_trace.csv").exists()

    # identical config + seed reproduces the checkpoint fingerprint
    base_out2 = work / "base_run2"
    assert main(["base-train", "--config", str(cfg_path), "--out", str(base_out2)]) == 0
    fp1 = json.loads((base_out / "checkpoint.json").read_text())["fingerprint"]
    fp2 = json.loads((base_out2 / "checkpoint.json").read_text())["fingerprint"]
    assert fp1 == fp2

    # tune
    tune_out = work / "tune_run"
    cfg_path.write_text(json.dumps({
        "tune": {"checkpoint": str(checkpoint), "corpus_manifest": str(manifest),
                 "reference": 0, "attribute": "shape", "steps": 3}}))
    assert main(["tune", "--config", str(cfg_path), "--out", str(tune_out)]) == 0
    artifact = tune_out / "artifact"
    assert artifact.with_suffix(".npz").exists()
    trace_rows = (tune_out / "loss_trace.csv").read_text().strip().splitlines()
    assert len(trace_rows) == 1 + 3  # header + one row per step

    # sample with the artifact
    sample_out = work / "sample_run"
    cfg_path.write_text(json.dumps({
        "sample": {"checkpoint": str(checkpoint), "artifact": str(artifact),
                   "prompt": "a circle in the shape of *m", "steps": 4, "batch": 2}}))
    assert main(["sample", "--config", str(cfg_path), "--out", str(sample_out)]) == 0
    assert len(list((sample_out / "images").glob("*.png"))) == 2

    # fingerprint mismatch: sample the artifact against a different base (exit 3)
    base3 = work / "base_run3"
    cfg_path.write_text(json.dumps({
        "base-train": {"corpus_manifest": str(manifest), "steps": 20, "batch": 2,
                       "seed": 9,
                       "model": {"channels": [8, 12], "d_text": 16, "time_dim": 16,
                                 "T": 20}}}))
    assert main(["base-train", "--config", str(cfg_path), "--out", str(base3)]) == 0
    cfg_path.write_text(json.dumps({
        "sample": {"checkpoint": str(base3 / "checkpoint"), "artifact": str(artifact),
                   "prompt": "a circle in the shape of *m", "steps": 4}}))
    assert main(["sample", "--config", str(cfg_path), "--out", str(work / "s2")]) == 3

    # sweep with lambdas=[0] reproduces base metrics (row alignment finite, file outputs)
    sweep_out = work / "sweep_run"
    cfg_path.write_text(json.dumps({
        "sweep": {"checkpoint": str(checkpoint), "artifact": str(artifact),
                  "corpus_manifest": str(manifest),
                  "lambdas": [0.0, 1.0], "seeds": [0], "steps": 4, "batch": 1}}))
    assert main(["sweep", "--config", str(cfg_path), "--out", str(sweep_out)]) == 0
    report = json.loads((sweep_out / "report.json").read_text())
    assert len(report["rows"]) == 2
    assert (sweep_out / "grid.png").exists()

    # eval over the sampled images
    eval_out = work / "eval_run"
    cfg_path.write_text(json.dumps({
        "eval": {"corpus_manifest": str(manifest), "reference": 0,
                 "images_dir": str(sample_out / "images"),
                 "prompt": "a circle in the shape of *m"}}))
    assert main(["eval", "--config", str(cfg_path), "--out", str(eval_out)]) == 0
    rows = json.loads((eval_out / "report.json").read_text())["rows"]
    assert len(rows) == 2
    for row in rows:
        assert 0.0 <= row["iou"] <= 1.0
        assert row["gram_distance"] >= 0.0
