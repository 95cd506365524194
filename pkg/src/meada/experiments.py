"""Evaluation helpers and the single-source shift benchmark (ERM vs ADA vs ME-ADA)."""
from __future__ import annotations

import logging
import time

import numpy as np

from .data import ImageDataset, ShiftSpec, apply_shift, mnist_sample, split, to_rgb32
from .models import Model, ModelSpec, forward, prediction_entropy_rows
from .trainer import AdvConfig, run_me_ada

log = logging.getLogger(__name__)

DEFAULT_SHIFTS = ("tint", "invert", "noise-background")


def evaluate(model, ds: ImageDataset) -> dict:
    """Accuracy and mean prediction entropy of a (mean) model on a dataset."""
    if hasattr(model, "mean_model"):
        model = model.mean_model()
    probs = forward(model, ds.images)[2]
    return {
        "domain": ds.name,
        "accuracy": float(np.mean(probs.argmax(axis=1) == ds.labels)),
        "N": int(len(ds)),
        "entropy_mean": float(prediction_entropy_rows(probs).mean()),
    }


def shift_suite(test: ImageDataset, kinds=DEFAULT_SHIFTS, severity: int = 3, seed: int = 0):
    return [apply_shift(test, ShiftSpec(k, severity, seed)) for k in kinds]


def mnist_benchmark_split(n_train: int = 2000, n_test: int = 1000, seed: int = 0):
    """Stratified train/test subsets of the bundled MNIST sample, resized to 32x32 RGB."""
    full = mnist_sample()
    n = len(full)
    train, _, test = split(full, (n_train / n, 1 - (n_train + n_test) / n, n_test / n), seed=seed)
    return to_rgb32(train), to_rgb32(test)


def method_configs(base: AdvConfig) -> dict[str, AdvConfig]:
    """ERM gets the same number of optimizer steps as the adversarial runs."""
    return {
        "erm": base.replace(K=0, final_steps=base.total_steps),
        "ada": base.replace(beta=0.0),
        "me-ada": base,
    }


def shift_benchmark(train: ImageDataset, test: ImageDataset, spec: ModelSpec, base: AdvConfig,
                    seeds=(0, 1, 2, 3, 4), methods=("erm", "ada", "me-ada"), kinds=DEFAULT_SHIFTS,
                    severity: int = 3) -> dict:
    """Train each method per seed and report accuracy on the shifted test domains."""
    domains = shift_suite(test, kinds, severity)
    cfgs = method_configs(base)
    results = {m: [] for m in methods}
    for seed in seeds:
        for m in methods:
            cfg = cfgs[m].replace(seed=seed)
            t0 = time.perf_counter()
            model, _, _ = run_me_ada(train, ModelSpec.from_dict({**spec.to_dict(), "seed": seed}), cfg)
            evals = [evaluate(model, d) for d in domains]
            row = {
                "seed": seed,
                "clean": evaluate(model, test)["accuracy"],
                "per_domain": {d.name: e["accuracy"] for d, e in zip(domains, evals)},
                "mean_shift_accuracy": float(np.mean([e["accuracy"] for e in evals])),
                "seconds": time.perf_counter() - t0,
            }
            log.info("%s %s", m, row)
            results[m].append(row)
    summary = {m: float(np.mean([r["mean_shift_accuracy"] for r in rs])) for m, rs in results.items()}
    return {"runs": results, "summary": summary}


def train_default(train: ImageDataset, spec: ModelSpec | None = None, cfg: AdvConfig | None = None) -> Model:
    spec = spec or ModelSpec(input_shape=train.shape, n_classes=int(train.labels.max()) + 1)
    return run_me_ada(train, spec, cfg or AdvConfig())[0]
