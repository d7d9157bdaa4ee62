"""Seeded autoregressive decoding with generation-flag halting."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from .datapipe import (FLAG_COLUMNS, NormalizerStats, SeriesRecord, append_generation_flags,
                       normalize)
from .errors import ConfigError, DataError
from .model import ModelConfig, ModelParams, forward
from .numerics import no_grad

# maps a normalized, flagged prefix [T, F_in] to next-step predictions [T, F_in]
Predictor = Callable[[np.ndarray], np.ndarray]


@dataclass
class GenerationConfig:
    seed_len: int = 2
    max_len: int = 400
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.seed_len < self.max_len:
            raise ConfigError(f"need 1 <= seed_len < max_len, got {self.seed_len}, {self.max_len}")

    def to_dict(self) -> dict:
        return asdict(self)


class TransformerPredictor:
    """Wraps trained parameters as a :data:`Predictor` (infer mode, dropout off)."""

    def __init__(self, params: ModelParams, config: ModelConfig):
        self.params = params
        self.config = config

    def __call__(self, prefix: np.ndarray) -> np.ndarray:
        return self.predict_batch(prefix[None])[0]

    def predict_batch(self, prefixes: np.ndarray) -> np.ndarray:
        with no_grad():
            return forward(self.params, self.config, prefixes, mode="infer").data


def stop_decision(flag_pair) -> bool:
    """Stop iff the end flag strictly exceeds the continue flag; ties continue."""
    cont, end = flag_pair
    return bool(end > cont)


@dataclass
class SyntheticRecord(SeriesRecord):
    seed_id: str | None = None
    checkpoint_id: str | None = None

    def to_json(self) -> dict:
        out = super().to_json()
        out["provenance"] = {"seed_id": self.seed_id, "checkpoint": self.checkpoint_id}
        return out


def generate_one(model: Predictor, seed_rows: np.ndarray,
                 config: GenerationConfig) -> tuple[np.ndarray, int]:
    """Greedy decoding from ``seed_rows``; returns (sequence, length incl. seed).

    Each step re-encodes the whole prefix and appends the prediction at the
    last position. Decoding halts once the appended row says stop, or at
    ``config.max_len``.
    """
    seq = np.array(seed_rows, dtype=np.float64)
    if seq.ndim != 2 or seq.shape[0] != config.seed_len:
        raise ConfigError(f"seed must have shape [{config.seed_len}, F_in], got {seq.shape}")
    rows = [r for r in seq]
    while len(rows) < config.max_len:
        nxt = np.asarray(model(np.stack(rows)))[-1].astype(np.float64)
        rows.append(nxt)
        if stop_decision(nxt[-FLAG_COLUMNS:]):
            break
    out = np.stack(rows)
    return out, out.shape[0]


def generate_batch(model: TransformerPredictor, seeds: np.ndarray,
                   config: GenerationConfig) -> list[np.ndarray]:
    """Decode several seeds in lockstep; same result as :func:`generate_one` per seed.

    Causal masking makes each sequence's prediction at its last position
    independent of anything after it, so finished sequences just ride along.
    """
    seeds = np.asarray(seeds, dtype=np.float64)
    n = seeds.shape[0]
    buf = np.zeros((n, config.max_len, seeds.shape[2]))
    buf[:, :config.seed_len] = seeds
    lengths = np.full(n, config.seed_len)
    active = np.ones(n, dtype=bool)
    T = config.seed_len
    while active.any() and T < config.max_len:
        idx = np.flatnonzero(active)
        pred = model.predict_batch(buf[idx, :T].astype(np.float32))[:, -1].astype(np.float64)
        buf[idx, T] = pred
        lengths[idx] = T + 1
        for j, i in enumerate(idx):
            if stop_decision(pred[j, -FLAG_COLUMNS:]):
                active[i] = False
        T += 1
    return [buf[i, :lengths[i]].copy() for i in range(n)]


def seed_rows_for(record: SeriesRecord, stats: NormalizerStats, seed_len: int) -> np.ndarray:
    flagged = append_generation_flags(normalize(record, stats))
    return flagged.measurements[:seed_len]


def matches(record: SeriesRecord, class_filter: dict[str, str] | None) -> bool:
    return not class_filter or all(record.metadata.get(k) == v for k, v in class_filter.items())


def generate_dataset(model: Predictor, real: Sequence[SeriesRecord], stats: NormalizerStats,
                     n: int, config: GenerationConfig, class_filter: dict[str, str] | None = None,
                     checkpoint_id: str | None = None, id_prefix: str = "syn") -> list[SyntheticRecord]:
    """Class-conditional synthesis: seeds drawn uniformly with replacement from matching reals.

    Outputs are denormalized, flag-free, and inherit metadata from their seed record.
    Real records shorter than ``seed_len`` cannot seed and are skipped.
    """
    pool = [r for r in real if matches(r, class_filter) and r.length >= config.seed_len]
    if not pool:
        raise DataError(f"no real record of length >= {config.seed_len} matches {class_filter}")
    rng = np.random.default_rng(config.seed)
    picks = rng.integers(0, len(pool), size=n)
    seeds = np.stack([seed_rows_for(pool[i], stats, config.seed_len) for i in picks]) if n else None

    if n == 0:
        sequences = []
    elif isinstance(model, TransformerPredictor):
        sequences = generate_batch(model, seeds, config)
    else:
        sequences = [generate_one(model, s, config)[0] for s in seeds]

    lo, hi = stats.target_range
    out = []
    for k, (i, seq) in enumerate(zip(picks, sequences)):
        src = pool[i]
        values = seq[:, :-FLAG_COLUMNS]
        if src.length == config.seed_len:
            # the seed already holds the whole real sequence
            values = values[:config.seed_len]
        measurements = stats.inverse(np.clip(values, lo, hi))
        out.append(SyntheticRecord(id=f"{id_prefix}{k}", measurements=measurements,
                                   metadata=dict(src.metadata), seed_id=src.id,
                                   checkpoint_id=checkpoint_id))
    return out


def write_synthetic(path, records: Sequence[SyntheticRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json()) + "\n")
