"""Dataset ingestion and the preprocessing chain feeding the transformer.

The order is: ingest -> split_real -> fit_normalizer (train side only) ->
normalize -> append_generation_flags -> window_split -> make_batches.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, DataError

FLAG_COLUMNS = 2


@dataclass
class Schema:
    """Declares the measurement width and the categorical attribute vocabularies."""

    n_features: int
    attributes: dict[str, list[str]] = field(default_factory=dict)
    feature_names: list[str] | None = None
    name: str = "dataset"

    @classmethod
    def load(cls, path) -> "Schema":
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        try:
            schema = cls(n_features=int(raw["n_features"]),
                         attributes={k: list(v) for k, v in raw.get("attributes", {}).items()},
                         feature_names=raw.get("feature_names"),
                         name=raw.get("name", "dataset"))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{path}: malformed schema ({exc})") from None
        if schema.n_features < 1:
            raise DataError(f"{path}: n_features must be positive")
        return schema

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    def to_dict(self) -> dict:
        out = {"name": self.name, "n_features": self.n_features, "attributes": self.attributes}
        if self.feature_names is not None:
            out["feature_names"] = self.feature_names
        return out


GCUT_SCHEMA = Schema(
    n_features=9,
    attributes={"end_event_type": ["FAIL", "FINISH", "KILL", "EVICT"]},
    feature_names=["cpu_rate", "canonical_memory_usage", "assigned_memory_usage",
                   "unmapped_page_cache", "total_page_cache", "maximum_memory_usage",
                   "local_disk_space_usage", "maximum_cpu_rate", "sampled_cpu_usage"],
    name="gcut",
)

WWT_SCHEMA = Schema(
    n_features=1,
    attributes={"domain": [], "access_type": [], "agent_type": []},
    feature_names=["views"],
    name="wwt",
)


@dataclass
class SeriesRecord:
    id: str
    measurements: np.ndarray
    metadata: dict[str, str] = field(default_factory=dict)
    source_id: str | None = None

    def __post_init__(self):
        self.measurements = np.asarray(self.measurements, dtype=np.float64)
        if self.measurements.ndim != 2 or self.measurements.shape[0] < 1:
            raise DataError(f"record {self.id!r}: measurements must be a non-empty T x F matrix")

    @property
    def length(self) -> int:
        return self.measurements.shape[0]

    @property
    def n_features(self) -> int:
        return self.measurements.shape[1]

    def replace(self, measurements=None, **changes) -> "SeriesRecord":
        if measurements is not None:
            changes["measurements"] = measurements
        changes.setdefault("metadata", dict(self.metadata))
        return dataclasses.replace(self, **changes)

    def to_json(self) -> dict:
        return {"id": self.id, "measurements": self.measurements.tolist(), "metadata": self.metadata}


def _parse_record(obj, schema: Schema, where: str) -> SeriesRecord:
    if not isinstance(obj, dict) or "measurements" not in obj:
        raise DataError(f"{where}: expected an object with 'measurements'")
    rows = obj["measurements"]
    if not isinstance(rows, list) or not rows:
        raise DataError(f"{where}: empty measurement list")
    for t, row in enumerate(rows):
        if not isinstance(row, list) or len(row) != schema.n_features:
            got = len(row) if isinstance(row, list) else type(row).__name__
            raise DataError(f"{where}: timestep {t} has {got} values, expected {schema.n_features}")
    try:
        values = np.array(rows, dtype=np.float64)
    except (TypeError, ValueError):
        raise DataError(f"{where}: non-numeric measurement") from None
    if not np.isfinite(values).all():
        raise DataError(f"{where}: non-finite measurement")
    metadata = obj.get("metadata", {}) or {}
    if not isinstance(metadata, dict):
        raise DataError(f"{where}: metadata must be a string map")
    for key, value in metadata.items():
        vocab = schema.attributes.get(key)
        if vocab is None:
            raise DataError(f"{where}: unknown attribute {key!r}")
        if vocab and value not in vocab:
            raise DataError(f"{where}: value {value!r} not in vocabulary of {key!r} {vocab}")
    return SeriesRecord(id=str(obj.get("id", where)), measurements=values,
                        metadata={str(k): str(v) for k, v in metadata.items()})


def ingest(path, schema: Schema) -> list[SeriesRecord]:
    """Read a line-delimited JSON dataset, validating every record against ``schema``."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            where = f"{path}:{lineno}"
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{where}: invalid JSON ({exc.msg})") from None
            records.append(_parse_record(obj, schema, where))
    return records


def write_records(path, records: Sequence[SeriesRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json()) + "\n")


# ---------------------------------------------------------------------------
# normalization

@dataclass
class NormalizerStats:
    mins: np.ndarray
    maxs: np.ndarray
    target_range: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        self.mins = np.asarray(self.mins, dtype=np.float64)
        self.maxs = np.asarray(self.maxs, dtype=np.float64)
        self.target_range = (float(self.target_range[0]), float(self.target_range[1]))
        if self.target_range not in ((0.0, 1.0), (-1.0, 1.0)):
            raise ConfigError(f"target range must be (0, 1) or (-1, 1), got {self.target_range}")
        if (self.mins > self.maxs).any():
            raise DataError("normalizer has min > max")

    @property
    def n_features(self) -> int:
        return self.mins.size

    def save(self, path) -> None:
        lo, hi = self.target_range
        lines = [f"# range {lo!r} {hi!r}"]
        lines += [f"{a!r}\t{b!r}" for a, b in zip(self.mins.tolist(), self.maxs.tolist())]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "NormalizerStats":
        target, mins, maxs = (0.0, 1.0), [], []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if line.startswith("# range"):
                target = tuple(float(v) for v in line.split()[2:4])
            elif line.strip():
                a, b = line.split("\t")
                mins.append(float(a))
                maxs.append(float(b))
        return cls(np.array(mins), np.array(maxs), target)

    def to_dict(self) -> dict:
        return {"mins": self.mins.tolist(), "maxs": self.maxs.tolist(),
                "target_range": list(self.target_range)}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizerStats":
        return cls(np.array(d["mins"]), np.array(d["maxs"]), tuple(d["target_range"]))

    def transform(self, values: np.ndarray) -> np.ndarray:
        lo, hi = self.target_range
        span = self.maxs - self.mins
        const = span == 0
        unit = (values - self.mins) / np.where(const, 1.0, span)
        unit = np.where(const, 0.5, unit)
        return lo + unit * (hi - lo)

    def inverse(self, values: np.ndarray) -> np.ndarray:
        lo, hi = self.target_range
        unit = (np.asarray(values, dtype=np.float64) - lo) / (hi - lo)
        span = self.maxs - self.mins
        return np.where(span == 0, self.mins, self.mins + unit * span)


def fit_normalizer(train: Sequence[SeriesRecord], target_range=(0.0, 1.0)) -> NormalizerStats:
    if not train:
        raise DataError("cannot fit a normalizer on an empty training set")
    stacked = np.concatenate([r.measurements for r in train], axis=0)
    return NormalizerStats(stacked.min(axis=0), stacked.max(axis=0), target_range)


def normalize(record: SeriesRecord, stats: NormalizerStats) -> SeriesRecord:
    return record.replace(measurements=stats.transform(record.measurements))


def denormalize(record: SeriesRecord, stats: NormalizerStats) -> SeriesRecord:
    return record.replace(measurements=stats.inverse(record.measurements))


# ---------------------------------------------------------------------------
# flags and windows

def generation_flags(length: int) -> np.ndarray:
    """(continue, end) pairs: [1, 0] everywhere except [0, 1] on the last row."""
    flags = np.zeros((length, FLAG_COLUMNS))
    flags[:-1, 0] = 1.0
    flags[-1, 1] = 1.0
    return flags


def append_generation_flags(record: SeriesRecord) -> SeriesRecord:
    return record.replace(measurements=np.hstack([record.measurements, generation_flags(record.length)]))


def strip_generation_flags(record: SeriesRecord) -> SeriesRecord:
    return record.replace(measurements=record.measurements[:, :-FLAG_COLUMNS])


def window_split(record: SeriesRecord, window: int = 400, flagged: bool = False) -> list[SeriesRecord]:
    """Cut into consecutive non-overlapping chunks of at most ``window`` steps.

    A trailing chunk shorter than 2 steps is dropped. With ``flagged`` the
    last two columns are generation flags; when the tail is dropped, the
    final kept row is re-marked as the end so each record still ends once.
    """
    if window < 2:
        raise ConfigError(f"window must be >= 2, got {window}")
    parts = [record.measurements[s:s + window] for s in range(0, record.length, window)]
    dropped = len(parts) > 1 and parts[-1].shape[0] < 2
    if dropped:
        parts.pop()
    if len(parts) == 1 and not dropped:
        return [record.replace(measurements=parts[0].copy())]
    parent = record.source_id or record.id
    chunks = [record.replace(measurements=p.copy(), id=f"{record.id}#w{k}", source_id=parent)
              for k, p in enumerate(parts)]
    if flagged and dropped:
        chunks[-1].measurements[-1, -FLAG_COLUMNS:] = [0.0, 1.0]
    return chunks


def prepare_records(records: Sequence[SeriesRecord], stats: NormalizerStats,
                    window: int = 400) -> list[SeriesRecord]:
    """normalize -> flag -> window, the model-ready form of a real dataset."""
    out = []
    for rec in records:
        out.extend(window_split(append_generation_flags(normalize(rec, stats)), window, flagged=True))
    return out


# ---------------------------------------------------------------------------
# batches

@dataclass
class Batch:
    inputs: np.ndarray
    targets: np.ndarray
    loss_mask: np.ndarray
    lengths: np.ndarray
    ids: list[str] = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.inputs.shape[0]


def collate(records: Sequence[SeriesRecord], dtype=np.float32) -> Batch:
    lengths = np.array([r.length for r in records], dtype=np.int64)
    T = int(lengths.max())
    F = records[0].n_features
    inputs = np.zeros((len(records), T, F), dtype=dtype)
    targets = np.zeros_like(inputs)
    for b, rec in enumerate(records):
        if rec.n_features != F:
            raise DataError("records in one batch must share the feature count")
        inputs[b, :rec.length] = rec.measurements
        targets[b, :rec.length - 1] = rec.measurements[1:]
    loss_mask = np.arange(T)[None, :] < (lengths[:, None] - 1)
    return Batch(inputs, targets, loss_mask, lengths, [r.id for r in records])


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Shuffle order as a pure function of (seed, epoch)."""
    return np.random.default_rng([seed, epoch]).permutation(n)


def make_batches(records: Sequence[SeriesRecord], batch_size: int = 64, seed: int = 0,
                 epoch: int = 0, shuffle: bool = True, dtype=np.float32) -> Iterator[Batch]:
    if batch_size < 1:
        raise ConfigError("batch_size must be positive")
    order = epoch_order(len(records), seed, epoch) if shuffle else np.arange(len(records))
    for start in range(0, len(order), batch_size):
        yield collate([records[i] for i in order[start:start + batch_size]], dtype=dtype)


def split_real(records: Sequence[SeriesRecord], ratio: float = 0.5,
               seed: int = 0) -> tuple[list[SeriesRecord], list[SeriesRecord]]:
    """Record-level train/test split, deterministic given ``seed``; input order kept per side."""
    if not 0 < ratio < 1:
        raise ConfigError(f"split ratio must lie in (0, 1), got {ratio}")
    n = len(records)
    n_train = math.floor(ratio * n + 1e-9)
    if n >= 2:
        n_train = min(max(n_train, 1), n - 1)
    perm = np.random.default_rng(seed).permutation(n)
    chosen = set(perm[:n_train].tolist())
    train = [r for i, r in enumerate(records) if i in chosen]
    test = [r for i, r in enumerate(records) if i not in chosen]
    return train, test
