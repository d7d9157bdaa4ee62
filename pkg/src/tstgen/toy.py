"""Seeded synthetic corpora for tests, demos and the acceptance suite."""

from __future__ import annotations

import math

import numpy as np

from .datapipe import GCUT_SCHEMA, Schema, SeriesRecord


def tiny_model_config(input_dim: int = 5, **overrides):
    from .model import ModelConfig

    base = dict(input_dim=input_dim, d_model=8, n_heads=2, n_blocks=2, d_ff=8,
                dropout_p=0.0, max_window=64)
    base.update(overrides)
    return ModelConfig(**base)


def ar1_corpus(n: int = 16, n_features: int = 3, min_len: int = 5, max_len: int = 20,
               phi: float = 0.8, noise: float = 0.3, seed: int = 0,
               length_from_start: bool = False) -> list[SeriesRecord]:
    """Independent AR(1) channels: x_t = phi * x_{t-1} + noise * e_t.

    With ``length_from_start`` the length is a monotone function of the first
    channel's starting value instead of an independent draw.
    """
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n):
        start = rng.normal(size=n_features)
        T = int(rng.integers(min_len, max_len + 1))
        if length_from_start:
            u = 0.5 * (1 + math.erf(start[0] / math.sqrt(2)))
            T = min_len + int(round((max_len - min_len) * u))
        x = np.empty((T, n_features))
        x[0] = start
        for t in range(1, T):
            x[t] = phi * x[t - 1] + noise * rng.normal(size=n_features)
        records.append(SeriesRecord(f"ar{i}", x))
    return records


def length_rule_corpus(n: int = 64, seed: int = 0) -> list[SeriesRecord]:
    """Length = 5 + round(10 * x0) where x0 is the first feature's starting value.

    Feature 0 stays at x0; feature 1 is a phase-shifted sinusoid keyed on x0.
    """
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n):
        x0 = float(rng.uniform(0.0, 1.0))
        T = length_rule(x0)
        t = np.arange(T)
        x = np.column_stack([np.full(T, x0), 0.5 + 0.4 * np.sin(0.6 * t + 2 * np.pi * x0)])
        records.append(SeriesRecord(f"len{i}", x))
    return records


def length_rule(x0: float) -> int:
    return 5 + int(round(10 * x0))


# loadings of three features on one shared latent factor
CORRELATED_LOADINGS = np.array([1.0, 0.7, -0.8])


def correlated_corpus(n: int = 64, length: int = 16, noise: float = 0.15, phi: float = 0.9,
                      seed: int = 0) -> list[SeriesRecord]:
    """Three features driven by a shared AR(1) latent plus independent noise."""
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n):
        z = np.empty(length)
        z[0] = rng.normal()
        for t in range(1, length):
            z[t] = phi * z[t - 1] + np.sqrt(1 - phi * phi) * rng.normal()
        x = z[:, None] * CORRELATED_LOADINGS[None, :] + noise * rng.normal(size=(length, 3))
        records.append(SeriesRecord(f"corr{i}", x))
    return records


CLASS_VOCAB = GCUT_SCHEMA.attributes["end_event_type"]


def classification_schema(n_features: int = 3) -> Schema:
    return Schema(n_features=n_features, attributes={"end_event_type": list(CLASS_VOCAB)},
                  name="toy-gcut")


def classification_corpus(n_per_class: int = 25, n_features: int = 3, min_len: int = 6,
                          max_len: int = 14, separation: float = 3.0, noise: float = 0.5,
                          seed: int = 0) -> list[SeriesRecord]:
    """Four end-event classes with distinct per-feature mean levels."""
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(len(CLASS_VOCAB), n_features)) * separation
    records = []
    for c, label in enumerate(CLASS_VOCAB):
        for j in range(n_per_class):
            T = int(rng.integers(min_len, max_len + 1))
            level = centers[c] + 0.3 * rng.normal(size=n_features)
            x = level[None, :] + noise * rng.normal(size=(T, n_features))
            records.append(SeriesRecord(f"{label.lower()}{j}", x, {"end_event_type": label}))
    order = rng.permutation(len(records))
    return [records[i] for i in order]


def regression_corpus(n: int = 60, length: int = 60, seed: int = 0) -> list[SeriesRecord]:
    """Single-feature noisy sinusoids of random frequency and phase (WWT-shaped, shortened)."""
    rng = np.random.default_rng(seed)
    records = []
    t = np.arange(length)
    for i in range(n):
        f = rng.uniform(0.05, 0.3)
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.5, 2.0)
        x = 10 + amp * np.sin(f * t + phase) + 0.05 * rng.normal(size=length)
        records.append(SeriesRecord(f"page{i}", x[:, None]))
    return records


def write_classification_demo(out_dir, n_per_class: int = 25, seed: int = 0) -> dict:
    """Write a toy GCUT-shaped dataset, its schema and a small run config; return the paths."""
    import json
    from pathlib import Path

    from .datapipe import write_records

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset, schema, config = out / "dataset.jsonl", out / "schema.json", out / "train_config.json"
    write_records(dataset, classification_corpus(n_per_class, seed=seed))
    classification_schema().save(schema)
    config.write_text(json.dumps({
        "seed": seed,
        "out_dir": "run",
        "data": {"dataset": "dataset.jsonl", "schema": "schema.json"},
        "model": {"d_model": 16, "n_heads": 2, "n_blocks": 2, "d_ff": 32, "max_window": 32},
        "train": {"epochs": 20, "batch_size": 16, "learning_rate": 1e-3, "window": 32},
        "generation": {"seed_len": 2, "max_len": 32, "n": 100},
        "downstream": {"task": "classification", "proportions": [0.0, 0.5, 1.0]},
    }, indent=2) + "\n")
    return {"dataset": dataset, "schema": schema, "config": config}


if __name__ == "__main__":
    import sys

    paths = write_classification_demo(sys.argv[1] if len(sys.argv) > 1 else "toy_demo")
    print("\n".join(f"{k}: {v}" for k, v in paths.items()))
