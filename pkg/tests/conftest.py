"""Session fixtures for the acceptance suite.

Trained reference models are by far the most expensive artifacts any test
needs, so they are built once per session here and shared: the training
quality, ablation trend, and signature analysis checks all read from the
same runs.
"""

import dataclasses
import time
from pathlib import Path

import numpy as np
import pytest

REFERENCE_INI = Path(__file__).resolve().parent.parent / "reference" / "reference.ini"
REFERENCE_CSV = REFERENCE_INI.with_name("reference_metrics.csv")

TRAINING_SEEDS = (0, 1, 2)
ABLATION_SEEDS = (0, 1, 2, 3, 4)
ABLATION_MODES = ("mlfn", "nofusion", "resnext")
ABLATION_ITERATIONS = 600


def load_reference_run():
    """The committed run configuration that fixes the training thresholds."""
    from mlfn.cli import RunConfig, load_config_file
    run = RunConfig()
    for key, value in load_config_file(REFERENCE_INI).items():
        setattr(run, key, value)
    return run


def train_once(run, *, seed: int, mode: str | None = None,
               iterations: int | None = None):
    """Train one model per the run config and score it on the test split.

    Returns a dict with the model, the dataset and split, the raw-pixel
    baseline, and the trained CMC(1)/mAP, so callers can reuse any part.
    """
    from mlfn.cli import model_config, train_config
    from mlfn.data import generate_dataset, split_gallery_probe
    from mlfn.evaluate import (evaluate_features, extract_features,
                               raw_pixel_feature_set)
    from mlfn.model import init_params
    from mlfn.train import run_training

    run = dataclasses.replace(run, seed=seed)
    if mode is not None:
        run = dataclasses.replace(run, mode=mode)
    if iterations is not None:
        run = dataclasses.replace(run, iterations=iterations)

    dataset = generate_dataset(seed=seed)
    train_idx = dataset.train_indices()
    images = dataset.images[train_idx]
    labels = np.searchsorted(dataset.train_ids, dataset.ids[train_idx])

    gallery, probe = split_gallery_probe(dataset, seed=seed)
    baseline = evaluate_features(raw_pixel_feature_set(probe),
                                 raw_pixel_feature_set(gallery), ranks=(1,))

    model = init_params(model_config(run, n_classes=len(dataset.train_ids)),
                        seed=run.seed)
    started = time.monotonic()
    rows = run_training(model, images, labels, train_config(run))
    seconds = time.monotonic() - started

    report = evaluate_features(extract_features(model, probe),
                               extract_features(model, gallery), ranks=(1,))
    return {
        "seed": seed,
        "mode": run.mode,
        "model": model,
        "dataset": dataset,
        "gallery": gallery,
        "probe": probe,
        "baseline_cmc1": float(baseline.cmc_values[0]),
        "cmc1": float(report.cmc_values[0]),
        "map": report.mean_ap,
        "train_acc": rows[-1]["train_acc"],
        "iterations": rows[-1]["iteration"],
        "rows": rows,
        "seconds": seconds,
    }


@pytest.fixture(scope="session")
def reference_runs():
    """Three seeded training runs with the committed reference config."""
    run = load_reference_run()
    return [train_once(run, seed=seed) for seed in TRAINING_SEEDS]


@pytest.fixture(scope="session")
def ablation_runs():
    """Mode comparison runs: same data, seeds, and schedule for every mode."""
    run = load_reference_run()
    results = {mode: [] for mode in ABLATION_MODES}
    for seed in ABLATION_SEEDS:
        for mode in ABLATION_MODES:
            results[mode].append(train_once(
                run, seed=seed, mode=mode, iterations=ABLATION_ITERATIONS))
    return results
