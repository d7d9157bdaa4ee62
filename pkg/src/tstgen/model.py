"""Causal transformer over real-valued sequences.

Layout: a linear input projection plus sinusoidal positional encoding, a
stack of post-norm encoder blocks under a combined causal + key-padding mask,
and a linear head squashed by sigmoid or tanh. Parameters live in a flat,
ordered ``dict[str, Tensor]``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Dict

import numpy as np

from . import numerics as nx
from .errors import ConfigError, DataError, WindowError
from .numerics import Tensor

ModelParams = Dict[str, Tensor]

LN_EPS = 1e-5


@dataclass
class ModelConfig:
    input_dim: int = 11
    d_model: int = 512
    n_heads: int = 8
    n_blocks: int = 8
    d_ff: int = 512
    dropout_p: float = 0.1
    max_window: int = 400
    output_activation: str = "sigmoid"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for key in ("input_dim", "d_model", "n_heads", "max_window"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be positive")
        if self.n_blocks < 0 or self.d_ff < 1:
            raise ConfigError("n_blocks must be >= 0 and d_ff >= 1")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.d_model % 2:
            raise ConfigError("d_model must be even for the sinusoidal encoding")
        if not 0 <= self.dropout_p < 1:
            raise ConfigError("dropout_p must lie in [0, 1)")
        if self.output_activation not in ("sigmoid", "tanh"):
            raise ConfigError(f"unknown output activation {self.output_activation!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def gcut_reference(cls) -> "ModelConfig":
        """9 measurements + 2 generation flags, 8x8 heads/blocks at width 512."""
        return cls(input_dim=11, d_model=512, n_heads=8, n_blocks=8, d_ff=512,
                   dropout_p=0.1, max_window=400, output_activation="sigmoid")


def count_parameters(config: ModelConfig) -> int:
    """Closed-form scalar parameter count (biases on every linear layer)."""
    d, f, F = config.d_model, config.d_ff, config.input_dim
    per_block = 4 * (d * d + d) + (d * f + f) + (f * d + d) + 4 * d
    return config.n_blocks * per_block + (F * d + d) + (d * F + F)


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f, F = config.d_model, config.d_ff, config.input_dim
    shapes: dict[str, tuple[int, ...]] = {"input.weight": (F, d), "input.bias": (d,)}
    for layer in range(config.n_blocks):
        p = f"blocks.{layer}."
        for proj in ("q", "k", "v", "o"):
            shapes[p + f"attn.{proj}.weight"] = (d, d)
            shapes[p + f"attn.{proj}.bias"] = (d,)
        shapes[p + "ln1.gain"] = (d,)
        shapes[p + "ln1.bias"] = (d,)
        shapes[p + "ff1.weight"] = (d, f)
        shapes[p + "ff1.bias"] = (f,)
        shapes[p + "ff2.weight"] = (f, d)
        shapes[p + "ff2.bias"] = (d,)
        shapes[p + "ln2.gain"] = (d,)
        shapes[p + "ln2.bias"] = (d,)
    shapes["output.weight"] = (d, F)
    shapes["output.bias"] = (F,)
    return shapes


def init_params(config: ModelConfig, seed: int = 0, dtype=np.float32) -> ModelParams:
    """Glorot-uniform weights, zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(seed)
    params: ModelParams = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".weight"):
            bound = math.sqrt(6.0 / (shape[0] + shape[1]))
            data = rng.uniform(-bound, bound, size=shape)
        elif name.endswith(".gain"):
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data.astype(dtype), requires_grad=True, name=name)
    return params


def cast_params(params: ModelParams, dtype) -> ModelParams:
    return {k: v.astype(dtype) for k, v in params.items()}


def positional_encoding(length: int, width: int) -> np.ndarray:
    if width % 2:
        raise ConfigError(f"positional encoding width must be even, got {width}")
    pos = np.arange(length, dtype=np.float64)[:, None]
    freq = 10000.0 ** (np.arange(0, width, 2, dtype=np.float64) / width)
    pe = np.empty((length, width))
    pe[:, 0::2] = np.sin(pos / freq)
    pe[:, 1::2] = np.cos(pos / freq)
    return pe


@dataclass
class AttentionMask:
    """``causal[q, k]`` is True where query q may read key k; ``key_padding[b, k]``
    is True where key k of sequence b is filler."""

    causal: np.ndarray
    key_padding: np.ndarray

    def forbidden(self) -> np.ndarray:
        """Boolean ``[B, 1, T, T]``: True where a (query, key) pair is disallowed."""
        return ~self.causal[None, None, :, :] | self.key_padding[:, None, None, :]

    def allowed(self) -> np.ndarray:
        return ~self.forbidden()[:, 0]


def build_masks(lengths, T: int) -> AttentionMask:
    lengths = np.asarray(lengths, dtype=np.int64)
    if lengths.ndim != 1 or ((lengths < 1) | (lengths > T)).any():
        raise DataError(f"every length must lie in [1, {T}], got {lengths.tolist()}")
    causal = np.tril(np.ones((T, T), dtype=bool))
    key_padding = np.arange(T)[None, :] >= lengths[:, None]
    return AttentionMask(causal, key_padding)


def _linear(x: Tensor, params: ModelParams, name: str) -> Tensor:
    return nx.add(nx.matmul(x, params[name + ".weight"]), params[name + ".bias"])


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    B, T, d = x.shape
    return nx.transpose(nx.reshape(x, (B, T, n_heads, d // n_heads)), (0, 2, 1, 3))


def multi_head_attention(x: Tensor, params: ModelParams, prefix: str, n_heads: int,
                         forbidden: np.ndarray) -> Tensor:
    B, T, d = x.shape
    q = _split_heads(_linear(x, params, prefix + "q"), n_heads)
    k = _split_heads(_linear(x, params, prefix + "k"), n_heads)
    v = _split_heads(_linear(x, params, prefix + "v"), n_heads)
    scores = nx.scale(nx.matmul(q, nx.swap_last(k)), 1.0 / math.sqrt(d // n_heads))
    weights = nx.masked_softmax(scores, forbidden)
    heads = nx.matmul(weights, v)
    merged = nx.reshape(nx.transpose(heads, (0, 2, 1, 3)), (B, T, d))
    return _linear(merged, params, prefix + "o")


def encoder_block(x: Tensor, params: ModelParams, layer: int, config: ModelConfig,
                  forbidden: np.ndarray, training: bool = False,
                  rng: np.random.Generator | None = None) -> Tensor:
    p = f"blocks.{layer}."
    attn = multi_head_attention(x, params, p + "attn.", config.n_heads, forbidden)
    attn = nx.dropout(attn, config.dropout_p, rng, training)
    a = nx.layer_norm(nx.add(x, attn), params[p + "ln1.gain"], params[p + "ln1.bias"], LN_EPS)
    ff = _linear(nx.relu(_linear(a, params, p + "ff1")), params, p + "ff2")
    ff = nx.dropout(ff, config.dropout_p, rng, training)
    return nx.layer_norm(nx.add(a, ff), params[p + "ln2.gain"], params[p + "ln2.bias"], LN_EPS)


def forward(params: ModelParams, config: ModelConfig, inputs, mask: AttentionMask | None = None,
            mode: str = "infer", rng: np.random.Generator | None = None) -> Tensor:
    """Next-step predictions ``[B, T, F_in]`` for inputs ``[B, T, F_in]``.

    ``mask`` defaults to causal-only with no padding. ``mode='train'`` turns
    dropout on and requires ``rng``.
    """
    if mode not in ("train", "infer"):
        raise ConfigError(f"mode must be 'train' or 'infer', got {mode!r}")
    dtype = params["input.weight"].dtype
    x = inputs if isinstance(inputs, Tensor) else Tensor(np.asarray(inputs, dtype=dtype))
    if x.ndim != 3 or x.shape[-1] != config.input_dim:
        raise ConfigError(f"expected inputs [B, T, {config.input_dim}], got {x.shape}")
    B, T, _ = x.shape
    if T > config.max_window:
        raise WindowError(f"sequence length {T} exceeds max_window {config.max_window}")
    if mask is None:
        mask = build_masks([T] * B, T)
    training = mode == "train"
    forbidden = mask.forbidden()

    pe = Tensor(positional_encoding(T, config.d_model).astype(dtype))
    h = nx.add(_linear(x, params, "input"), pe)
    h = nx.dropout(h, config.dropout_p, rng, training)
    for layer in range(config.n_blocks):
        h = encoder_block(h, params, layer, config, forbidden, training, rng)
    out = _linear(h, params, "output")
    return nx.sigmoid(out) if config.output_activation == "sigmoid" else nx.tanh(out)
