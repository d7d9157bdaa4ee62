"""Single-file run configuration: one JSON key/value tree per experiment."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .evaluation import DownstreamConfig
from .generation import GenerationConfig
from .model import ModelConfig
from .training import TrainConfig

DATA_KEYS = {"dataset", "schema", "train", "test", "synthetic", "split_ratio", "normalize_range"}
GENERATION_KEYS = {"seed_len", "max_len", "n", "class_filter", "checkpoint"}
DOWNSTREAM_KEYS = ({f.name for f in fields(DownstreamConfig)} - {"family", "mix_proportion", "seed"}
                   | {"families", "proportions"})
TOP_KEYS = {"seed", "out_dir", "data", "model", "train", "generation", "downstream"}
PATH_KEYS = ("dataset", "schema", "train", "test", "synthetic")

DEFAULT_PROPORTIONS = [0.0, 0.1, 0.3, 0.5, 1.0]


def _check_keys(section: str, given: dict, allowed: set) -> None:
    unknown = set(given) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in {section}: {sorted(unknown)}")


def _names(cls) -> set:
    return {f.name for f in fields(cls)}


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    data: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    generation: dict = field(default_factory=dict)
    downstream: dict = field(default_factory=dict)
    source: str | None = None

    @classmethod
    def from_dict(cls, raw: dict, base_dir: Path | None = None) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config root must be an object")
        _check_keys("config", raw, TOP_KEYS)
        raw = copy.deepcopy(raw)
        sections = {k: raw.get(k) or {} for k in ("data", "model", "train", "generation", "downstream")}
        for name, sec in sections.items():
            if not isinstance(sec, dict):
                raise ConfigError(f"section {name!r} must be an object")
        _check_keys("data", sections["data"], DATA_KEYS)
        _check_keys("model", sections["model"], _names(ModelConfig))
        _check_keys("train", sections["train"], _names(TrainConfig) - {"seed"})
        _check_keys("generation", sections["generation"], GENERATION_KEYS)
        _check_keys("downstream", sections["downstream"], DOWNSTREAM_KEYS)
        if base_dir is not None:
            for key in PATH_KEYS:
                value = sections["data"].get(key)
                if value:
                    sections["data"][key] = str((base_dir / value).resolve()) \
                        if not Path(value).is_absolute() else value
            ck = sections["generation"].get("checkpoint")
            if ck and not Path(ck).is_absolute():
                sections["generation"]["checkpoint"] = str((base_dir / ck).resolve())
        try:
            seed = int(raw.get("seed", 0))
        except (TypeError, ValueError):
            raise ConfigError("seed must be an integer") from None
        return cls(seed=seed, out_dir=str(raw.get("out_dir", "runs/default")), **sections)

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc.msg})") from None
        cfg = cls.from_dict(raw, base_dir=path.parent)
        cfg.source = str(path)
        return cfg

    def to_dict(self) -> dict:
        return {"seed": self.seed, "out_dir": self.out_dir, "data": self.data, "model": self.model,
                "train": self.train, "generation": self.generation, "downstream": self.downstream}

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def override(self, dotted: str, value) -> None:
        """Set a scalar key such as ``train.epochs`` (validated on use)."""
        parts = dotted.split(".")
        if len(parts) == 1:
            if parts[0] not in ("seed", "out_dir"):
                raise ConfigError(f"cannot override {dotted!r}")
            setattr(self, parts[0], int(value) if parts[0] == "seed" else str(value))
            return
        section, key = parts[0], ".".join(parts[1:])
        raw = self.to_dict()
        if section not in raw or not isinstance(raw[section], dict):
            raise ConfigError(f"unknown section {section!r}")
        getattr(self, section)[key] = value
        RunConfig.from_dict(self.to_dict())

    # typed views -----------------------------------------------------------

    def model_config(self, input_dim: int | None = None) -> ModelConfig:
        kw = dict(self.model)
        if input_dim is not None:
            if "input_dim" in kw and kw["input_dim"] != input_dim:
                raise ConfigError(f"model.input_dim={kw['input_dim']} but the data needs {input_dim} "
                                  "(measurements + 2 flags)")
            kw["input_dim"] = input_dim
        return _build(ModelConfig, kw)

    def train_config(self) -> TrainConfig:
        return _build(TrainConfig, dict(self.train, seed=self.seed))

    def generation_config(self, max_len_cap: int | None = None) -> GenerationConfig:
        kw = {k: v for k, v in self.generation.items() if k in ("seed_len", "max_len")}
        if max_len_cap is not None:
            kw.setdefault("max_len", max_len_cap)
        return _build(GenerationConfig, dict(kw, seed=self.seed))

    def downstream_configs(self) -> list[DownstreamConfig]:
        ds = dict(self.downstream)
        task = ds.get("task", "classification")
        default_families = ["mlp-1"] if task == "classification" else ["mlp-1", "mlp-5", "linear", "kernel-ridge"]
        families = ds.pop("families", default_families)
        proportions = ds.pop("proportions", DEFAULT_PROPORTIONS)
        return [_build(DownstreamConfig, dict(ds, family=f, mix_proportion=float(p), seed=self.seed))
                for f in families for p in proportions]


def _build(cls, kw: dict):
    try:
        return cls(**kw)
    except TypeError as exc:
        raise ConfigError(f"{cls.__name__}: {exc}") from None
