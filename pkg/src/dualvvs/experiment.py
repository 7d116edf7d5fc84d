"""Glue between a config file and the library: datasets, training runs, evaluation reports."""

from __future__ import annotations

import json
import math
import shutil
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .brainsim import CVSpec, score_model
from .config import SYNTH_REGION_LAYERS, BrainConfig, DataConfig, ExperimentConfig
from .data import (
    REGIONS,
    DataError,
    ImageSet,
    load_image_dir,
    load_neural_recording,
    load_stl10,
    resolve_data_path,
    synth_image_set,
    synth_neural_recording,
)
from .model import BackboneConfig, DualTaskModel, HeadConfig, file_digest, load_checkpoint
from .probes import extract_features, fit_linear_probe, ic_accuracy, rpp_accuracy
from .trainer import train

CONFIG_NAME = "config.json"
REPORT_NAME = "eval_report.json"
SWEEP_CSV_SCHEMA = 1
METRICS = ("ic", "rpp", "brainsim")


@dataclass
class Datasets:
    pretrain: ImageSet
    probe_train: ImageSet
    probe_test: ImageSet


def load_datasets(data: DataConfig, input_size: int) -> Datasets:
    """Pretraining images plus the labelled probe splits described by ``data``."""
    if data.source == "synthetic":
        train_set = synth_image_set(data.synth_seed, data.synth_train_count, data.synth_classes, input_size)
        test_set = synth_image_set(data.synth_seed + 1, data.synth_test_count, data.synth_classes, input_size)
        return Datasets(train_set, train_set, test_set)
    root = resolve_data_path(data.path)
    if not root.exists():
        raise DataError(f"dataset path {root} does not exist (set DUALVVS_DATA or use an absolute path)")
    if data.source == "stl10":
        return Datasets(load_stl10(root, data.pretrain_split), load_stl10(root, "train"), load_stl10(root, "test"))
    train_set = load_image_dir(root / "train", size=input_size)
    return Datasets(train_set, train_set, load_image_dir(root / "test", size=input_size))


def synthetic_recordings(brain: BrainConfig, regions) -> dict:
    """Recordings generated from a fixed random network: deeper regions read out deeper layers."""
    generator = DualTaskModel(BackboneConfig("tiny_conv", 64, 32), HeadConfig(), seed=brain.synth_seed)
    stimuli = synth_image_set(brain.synth_seed + 1000, brain.synth_stimuli, 4, 32, name="synthetic-stimuli")
    layers = sorted({SYNTH_REGION_LAYERS[r] for r in regions})
    acts = generator.record_activations(stimuli, layers)
    out = {}
    for i, region in enumerate(regions):
        out[region] = synth_neural_recording(
            acts[SYNTH_REGION_LAYERS[region]], brain.synth_neurons, brain.synth_noise_sd,
            brain.synth_repetitions, brain.synth_seed + i, region=region, stimuli=stimuli,
        )
    return out


def load_recordings(brain: BrainConfig) -> dict:
    """Region -> recording, in canonical region order."""
    regions = [r for r in REGIONS if r in brain.regions]
    synthetic = [r for r in regions if brain.regions[r] == "synthetic"]
    out = synthetic_recordings(brain, synthetic) if synthetic else {}
    for region in regions:
        if region in out:
            continue
        rec = load_neural_recording(resolve_data_path(brain.regions[region]))
        if rec.region != region:
            raise DataError(f"{brain.regions[region]} holds {rec.region} responses, configured as {region}")
        if rec.stimuli is None:
            raise DataError(f"{brain.regions[region]} has no stimulus images")
        out[region] = rec
    return {r: out[r] for r in regions}


def recording_id(brain: BrainConfig, region: str) -> str:
    source = brain.regions[region]
    if source == "synthetic":
        return f"synthetic/{region}/seed{brain.synth_seed}"
    return str(resolve_data_path(source))


# -- runs ---------------------------------------------------------------------------


def prepare_run_dir(run_dir, force: bool = False) -> Path:
    run_dir = Path(run_dir)
    if run_dir.exists() and any(run_dir.iterdir()):
        if not force:
            raise FileExistsError(f"run directory {run_dir} is not empty (pass --force to overwrite)")
        shutil.rmtree(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir


def run_training(cfg: ExperimentConfig, run_dir, datasets: Optional[Datasets] = None,
                 force: bool = False, progress: bool = False):
    """Train into ``run_dir``; the resolved config is written first."""
    run_dir = prepare_run_dir(run_dir, force)
    cfg.save(run_dir / CONFIG_NAME)
    if datasets is None:
        datasets = load_datasets(cfg.data, cfg.train.backbone.input_size)
    return train(cfg.train, datasets.pretrain, run_dir=run_dir, progress=progress)


def latest_checkpoint(run_dir) -> Path:
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise FileNotFoundError(f"run directory {run_dir} does not exist")
    found = sorted((run_dir / "checkpoints").glob("epoch_*.pt"))
    if not found:
        raise FileNotFoundError(f"no checkpoints in {run_dir / 'checkpoints'}")
    return found[-1]


def evaluate_run(run_dir, which=METRICS, datasets: Optional[Datasets] = None,
                 recordings: Optional[dict] = None) -> dict:
    """Score the last checkpoint of a run; writes and returns the JSON report."""
    which = list(which)
    bad = [w for w in which if w not in METRICS]
    if bad:
        raise ValueError(f"unknown metrics {bad}; choose from {list(METRICS)}")
    run_dir = Path(run_dir)
    ckpt = latest_checkpoint(run_dir)
    cfg = ExperimentConfig.load(run_dir / CONFIG_NAME)
    model, meta = load_checkpoint(ckpt)
    model.freeze()
    base = {
        "run_dir": str(run_dir),
        "checkpoint": str(ckpt),
        "checkpoint_sha256": file_digest(ckpt),
        "epoch": meta["epoch"],
        "seed": cfg.train.seed,
        "alpha": cfg.train.alpha,
        "package_version": __version__,
    }
    report = {"provenance": base}
    if ("ic" in which or "rpp" in which) and datasets is None:
        datasets = load_datasets(cfg.data, cfg.train.backbone.input_size)
    if "ic" in which:
        train_x = extract_features(model, datasets.probe_train)
        test_x = extract_features(model, datasets.probe_test)
        if datasets.probe_train.labels is None or datasets.probe_test.labels is None:
            raise DataError("image classification needs labelled probe splits")
        probe = fit_linear_probe(train_x, datasets.probe_train.labels, l2=cfg.probe.l2,
                                 n_classes=datasets.probe_train.n_classes, max_iter=cfg.probe.max_iter,
                                 trained_on=datasets.probe_train.name)
        report["ic"] = {
            "accuracy": ic_accuracy(probe, test_x, datasets.probe_test.labels),
            "probe_converged": probe.converged,
            "provenance": {**base, "dataset": datasets.probe_test.name, "probe_train": datasets.probe_train.name,
                           "l2": cfg.probe.l2},
        }
    if "rpp" in which:
        rng = np.random.default_rng(cfg.probe.rpp_seed)
        report["rpp"] = {
            "accuracy": rpp_accuracy(model, datasets.probe_test, rng,
                                     resize_blocks=cfg.train.resize_rp_blocks,
                                     samples_per_image=cfg.probe.rpp_samples_per_image),
            "provenance": {**base, "dataset": datasets.probe_test.name, "rng_seed": cfg.probe.rpp_seed},
        }
    if "brainsim" in which:
        if not cfg.brain.regions:
            raise DataError("brainsim requested but no neural recordings are configured")
        if recordings is None:
            recordings = load_recordings(cfg.brain)
        cv = CVSpec(cfg.brain.n_splits, cfg.brain.train_fraction, cfg.brain.cv_seed)
        out = {}
        for region, rec in recordings.items():
            rep = score_model(model, rec, cfg.brain.layers, cv, cfg.brain.n_components, cfg.brain.max_features)
            rep.provenance.update({**base, "dataset": recording_id(cfg.brain, region)})
            out[region] = rep.to_dict()
        report["brainsim"] = out
    (run_dir / REPORT_NAME).write_text(json.dumps(report, indent=2))
    return report


# -- sweeps ---------------------------------------------------------------------------


def sweep_columns(regions=REGIONS) -> list:
    cols = ["alpha", "ic", "rpp"]
    for r in regions:
        cols += [r, f"{r}_spread"]
    return cols + ["seed", "run_dir", "checkpoint_sha256", "status", "schema"]


def _fmt(x) -> str:
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x:.6f}"


def sweep_row(alpha: float, seed: int, run_dir, report: Optional[dict], error: Optional[str] = None,
              regions=REGIONS) -> dict:
    row = {c: "" for c in sweep_columns(regions)}
    row.update({"alpha": repr(float(alpha)), "seed": str(seed), "run_dir": str(run_dir),
                "schema": str(SWEEP_CSV_SCHEMA)})
    if error is not None:
        row["status"] = f"failed: {error}"
        return row
    row["status"] = "ok"
    row["checkpoint_sha256"] = report["provenance"]["checkpoint_sha256"]
    for key in ("ic", "rpp"):
        if key in report:
            row[key] = _fmt(report[key]["accuracy"])
    for region, rep in report.get("brainsim", {}).items():
        row[region] = _fmt(rep["model_score"]["center"])
        row[f"{region}_spread"] = _fmt(rep["model_score"]["spread"])
    return row


def alpha_dir_name(alpha: float) -> str:
    return f"alpha_{float(alpha):.6g}"
