"""Masked MSE, Adam, the teacher-forced training loop and checkpoint I/O."""

from __future__ import annotations

import dataclasses
import io
import json
import logging
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .datapipe import NormalizerStats, SeriesRecord, make_batches
from .errors import (CheckpointCorruptError, CheckpointFormatError, CheckpointVersionError,
                     ConfigError, DataError, DegenerateInputError)
from .model import ModelConfig, ModelParams, build_masks, forward
from .numerics import Tensor

log = logging.getLogger(__name__)

MAGIC = b"TSTCKPT\0"
FORMAT_VERSION = 1


@dataclass
class TrainConfig:
    epochs: int = 400
    batch_size: int = 64
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    window: int = 400
    dropout: float = 0.1
    seed: int = 0
    checkpoint_every: int = 0
    grad_clip: float | None = None

    def __post_init__(self):
        for key in ("epochs", "batch_size", "learning_rate", "eps", "window"):
            if getattr(self, key) <= 0:
                raise ConfigError(f"{key} must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError("grad_clip must be positive when set")

    def to_dict(self) -> dict:
        return asdict(self)


def masked_mse(pred: Tensor, target, loss_mask) -> Tensor:
    """Mean squared error over the (valid position x feature) elements only.

    Values at masked-out positions never enter the result, not even as 0 * x.
    """
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=pred.dtype)
    loss_mask = np.asarray(loss_mask, dtype=bool)
    if pred.shape != target.shape or loss_mask.shape != pred.shape[:-1]:
        raise ConfigError(f"masked_mse shapes disagree: {pred.shape}, {target.shape}, {loss_mask.shape}")
    count = int(loss_mask.sum()) * pred.shape[-1]
    if count == 0:
        raise DegenerateInputError("loss mask selects no positions")
    sel = loss_mask[..., None]
    diff = np.where(sel, pred.data - target, 0).astype(pred.dtype)
    value = np.asarray((diff * diff).sum() / count, dtype=pred.dtype)
    factor = pred.dtype.type(2.0 / count)
    return nx._make(value, (pred,), lambda g: (g * factor * diff,))


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "OptimizerState":
        return cls({k: np.zeros_like(p.data) for k, p in params.items()},
                   {k: np.zeros_like(p.data) for k, p in params.items()}, 0)


def adam_step(params: ModelParams, grads: dict[str, np.ndarray], state: OptimizerState,
              config: TrainConfig) -> tuple[ModelParams, OptimizerState]:
    """One bias-corrected Adam update, applied in place to ``params`` and ``state``."""
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ConfigError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        p.data -= (config.learning_rate * m_hat / (np.sqrt(v_hat) + config.eps)).astype(p.dtype)
    return params, state


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    total = float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values())))
    if total <= max_norm:
        return grads
    factor = max_norm / total
    return {k: (g * factor).astype(g.dtype) for k, g in grads.items()}


@dataclass
class TrainResult:
    params: ModelParams
    opt_state: OptimizerState
    loss_log: list[float]
    step_losses: list[float]
    best_loss: float


def batch_loss(params: ModelParams, config: ModelConfig, batch, mode: str = "train",
               rng: np.random.Generator | None = None) -> Tensor:
    mask = build_masks(batch.lengths, batch.inputs.shape[1])
    pred = forward(params, config, batch.inputs, mask, mode=mode, rng=rng)
    return masked_mse(pred, batch.targets, batch.loss_mask)


def train(params: ModelParams, model_config: ModelConfig, records: Sequence[SeriesRecord],
          config: TrainConfig, *, opt_state: OptimizerState | None = None, start_epoch: int = 0,
          loss_log: Sequence[float] = (), checkpoint_dir=None,
          normalizer: NormalizerStats | None = None,
          on_epoch: Callable[[int, float], None] | None = None) -> TrainResult:
    """Teacher-forced training; ``records`` must already be normalized, flagged and windowed.

    Dropout masks are drawn from an rng keyed on (seed, epoch, batch index), so
    resuming from a checkpoint at epoch k reproduces an uninterrupted run.
    """
    if config.window > model_config.max_window:
        raise ConfigError(f"window {config.window} exceeds model max_window {model_config.max_window}")
    if not records:
        raise DataError("no training records after windowing")
    too_long = [r.id for r in records if r.length > config.window]
    if too_long:
        raise ConfigError(f"records longer than the window: {too_long[:3]}")
    run_config = dataclasses.replace(model_config, dropout_p=config.dropout)
    state = opt_state if opt_state is not None else OptimizerState.zeros_like(params)
    losses = list(loss_log)
    step_losses: list[float] = []
    best = min(losses) if losses else float("inf")

    for epoch in range(start_epoch, config.epochs):
        total, count = 0.0, 0
        for b, batch in enumerate(make_batches(records, config.batch_size, config.seed, epoch)):
            rng = np.random.default_rng([config.seed, epoch, b])
            for p in params.values():
                p.zero_grad()
            loss = batch_loss(params, run_config, batch, "train", rng)
            nx.backward(loss)
            grads = {k: p.grad for k, p in params.items() if p.grad is not None}
            if config.grad_clip is not None:
                grads = clip_gradients(grads, config.grad_clip)
            adam_step(params, grads, state, config)
            n = int(batch.loss_mask.sum()) * batch.inputs.shape[-1]
            total += loss.item() * n
            count += n
            step_losses.append(loss.item())
        epoch_loss = total / count
        losses.append(epoch_loss)
        log.debug("epoch %d loss %.6g", epoch, epoch_loss)
        if on_epoch is not None:
            on_epoch(epoch, epoch_loss)
        if checkpoint_dir is not None:
            last_epoch = epoch + 1 == config.epochs
            due = config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0
            ckpt = Checkpoint(model_config, config, params, state, normalizer, epoch + 1,
                              {"loss_log": losses})
            if epoch_loss < best:
                save_checkpoint(Path(checkpoint_dir) / "checkpoint_best.bin", ckpt)
            if due or last_epoch:
                save_checkpoint(Path(checkpoint_dir) / "checkpoint_last.bin", ckpt)
        best = min(best, epoch_loss)
    for p in params.values():
        p.zero_grad()
    return TrainResult(params, state, losses, step_losses, best)


def write_loss_log(path, losses: Sequence[float]) -> None:
    Path(path).write_text("".join(f"{i}\t{v!r}\n" for i, v in enumerate(losses)), encoding="utf-8")


def read_loss_log(path) -> list[float]:
    return [float(line.split("\t")[1]) for line in Path(path).read_text().splitlines() if line]


# ---------------------------------------------------------------------------
# checkpoints

@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig
    params: ModelParams
    opt_state: OptimizerState
    normalizer: NormalizerStats | None = None
    epoch: int = 0
    extra: dict = field(default_factory=dict)


def _write_tensors(buf, tensors: dict[str, np.ndarray]) -> None:
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)) + raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    header = {
        "model": ckpt.model_config.to_dict(),
        "train": ckpt.train_config.to_dict(),
        "normalizer": ckpt.normalizer.to_dict() if ckpt.normalizer is not None else None,
        "optimizer_step": ckpt.opt_state.t,
        "extra": ckpt.extra,
    }
    text = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    buf.write(struct.pack("<Q", len(text)) + text)
    _write_tensors(buf, {k: p.data for k, p in ckpt.params.items()})
    opt = {f"m/{k}": v for k, v in ckpt.opt_state.m.items()}
    opt.update({f"v/{k}": v for k, v in ckpt.opt_state.v.items()})
    _write_tensors(buf, opt)
    buf.write(struct.pack("<Q", ckpt.epoch))
    return buf.getvalue()


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Atomic write: temp file in the same directory, then rename."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(ckpt))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointCorruptError(f"checkpoint truncated at byte {self.pos} (needed {n} more)")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def tensors(self) -> dict[str, np.ndarray]:
        (count,) = self.unpack("<I")
        out = {}
        for _ in range(count):
            (n,) = self.unpack("<H")
            name = self.take(n).decode("utf-8")
            (rank,) = self.unpack("<B")
            dims = self.unpack(f"<{rank}Q")
            size = int(np.prod(dims, dtype=np.int64))
            out[name] = np.frombuffer(self.take(4 * size), dtype="<f4").reshape(dims).astype(np.float32)
        return out


def decode_checkpoint(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if len(data) < len(MAGIC) or r.take(len(MAGIC)) != MAGIC:
        raise CheckpointFormatError("not a tstgen checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, expected {FORMAT_VERSION}")
    (n,) = r.unpack("<Q")
    try:
        header = json.loads(r.take(n).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CheckpointCorruptError("checkpoint config text is unreadable") from None
    params = {k: Tensor(v, requires_grad=True, name=k) for k, v in r.tensors().items()}
    opt = r.tensors()
    (epoch,) = r.unpack("<Q")
    if r.pos != len(data):
        raise CheckpointCorruptError("trailing bytes after checkpoint payload")
    state = OptimizerState({k[2:]: v for k, v in opt.items() if k.startswith("m/")},
                           {k[2:]: v for k, v in opt.items() if k.startswith("v/")},
                           int(header["optimizer_step"]))
    norm = header.get("normalizer")
    return Checkpoint(ModelConfig(**header["model"]), TrainConfig(**header["train"]), params, state,
                      NormalizerStats.from_dict(norm) if norm else None, epoch, header.get("extra", {}))


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())
