"""Finite-difference gradient suite and the parameter-count oracle."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import numerics as nx
from .model import (ModelConfig, build_masks, count_parameters, encoder_block, forward,
                    init_params, multi_head_attention)
from .numerics import GradCheckReport, Tensor
from .training import masked_mse

GCUT_PARAMETER_COUNT = 12_635_659
TOLERANCE = 1e-4


def tiny_config(input_dim: int = 3) -> ModelConfig:
    return ModelConfig(input_dim=input_dim, d_model=8, n_heads=2, n_blocks=2, d_ff=8,
                       dropout_p=0.0, max_window=16)


def _weights(shape, seed=99) -> Tensor:
    # fixed random projection so sum(w * out) exercises every output element
    return Tensor(np.random.default_rng(seed).uniform(-1, 1, shape))


def _project(out: Tensor) -> Tensor:
    return nx.sum_all(nx.mul(out, _weights(out.shape)))


def op_checks(seed: int = 0) -> list[GradCheckReport]:
    rng = np.random.default_rng(seed)

    def u(*shape):
        return rng.uniform(-2, 2, shape)

    def away_from_zero(*shape):
        x = u(*shape)
        return np.where(np.abs(x) < 0.1, np.sign(x + 1e-12) * 0.1 + x, x)

    reports = [
        nx.grad_check(lambda a, b: _project(nx.matmul(a, b)), [u(4, 5), u(5, 3)], TOLERANCE, name="matmul"),
        nx.grad_check(lambda a, b: _project(nx.matmul(a, b)), [u(2, 3, 4), u(2, 4, 2)], TOLERANCE,
                      name="matmul (batched)"),
        nx.grad_check(lambda z: _project(nx.masked_softmax(z)), [u(3, 6)], TOLERANCE,
                      name="masked_softmax (unmasked)"),
        nx.grad_check(lambda z: _project(nx.masked_softmax(z, np.array([False, False, True, False, True, True]))),
                      [u(3, 6)], TOLERANCE, name="masked_softmax (masked)"),
        nx.grad_check(lambda x, g, b: _project(nx.layer_norm(x, g, b, 1e-5)), [u(2, 8), u(8), u(8)],
                      TOLERANCE, name="layer_norm"),
        nx.grad_check(lambda x: _project(nx.relu(x)), [away_from_zero(3, 4)], TOLERANCE, name="relu"),
        nx.grad_check(lambda x: _project(nx.sigmoid(x)), [u(3, 4)], TOLERANCE, name="sigmoid"),
        nx.grad_check(lambda x: _project(nx.tanh(x)), [u(3, 4)], TOLERANCE, name="tanh"),
        nx.grad_check(lambda x, y: _project(nx.add(x, y)), [u(3, 4), u(4)], TOLERANCE, name="add"),
        nx.grad_check(lambda x, y: _project(nx.mul(x, y)), [u(3, 4), u(3, 4)], TOLERANCE, name="mul"),
        nx.grad_check(lambda x: _project(nx.dropout(x, 0.3, np.random.default_rng(5))), [u(3, 4)],
                      TOLERANCE, name="dropout"),
        nx.grad_check(lambda x: _project(nx.log_softmax(x)), [u(3, 5)], TOLERANCE, name="log_softmax"),
    ]
    mask = np.array([[True, True, False], [True, False, False]])
    target = u(2, 3, 2)
    reports.append(nx.grad_check(lambda p: masked_mse(p, target, mask), [u(2, 3, 2)], TOLERANCE,
                                 name="masked_mse"))
    return reports


def model_checks(seed: int = 0) -> list[GradCheckReport]:
    """Attention, encoder block and full-model gradients on the tiny config (B=2, T=5)."""
    cfg = tiny_config()
    params = init_params(cfg, seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 1)
    # perturb biases and gains away from their init values so every term is exercised
    for name, p in params.items():
        if not name.endswith(".weight"):
            p.data = p.data + rng.uniform(-0.2, 0.2, p.shape)
    names = list(params)
    arrays = [params[n].data for n in names]
    mask = build_masks([5, 3], 5)
    forbidden = mask.forbidden()
    x = rng.uniform(-2, 2, (2, 5, cfg.input_dim))
    h = rng.uniform(-2, 2, (2, 5, cfg.d_model))

    def rebuild(ts):
        return dict(zip(names, ts))

    def full(*ts):
        return _project(forward(rebuild(ts[:-1]), cfg, ts[-1], mask, mode="infer"))

    def attention(*ts):
        return _project(multi_head_attention(ts[-1], rebuild(ts[:-1]), "blocks.0.attn.",
                                             cfg.n_heads, forbidden))

    def block(*ts):
        return _project(encoder_block(ts[-1], rebuild(ts[:-1]), 0, cfg, forbidden))

    def model_loss(*ts):
        pred = forward(rebuild(ts[:-1]), cfg, ts[-1], mask, mode="infer")
        targets = np.roll(x, -1, axis=1)
        loss_mask = np.arange(5)[None, :] < np.array([[4], [2]])
        return masked_mse(pred, targets, loss_mask)

    return [
        nx.grad_check(attention, arrays + [h], TOLERANCE, name="multi_head_attention"),
        nx.grad_check(block, arrays + [h], TOLERANCE, name="encoder_block"),
        nx.grad_check(full, arrays + [x], TOLERANCE, name="full model (tiny)"),
        nx.grad_check(model_loss, arrays + [x], TOLERANCE, name="full model masked MSE (tiny)"),
    ]


@dataclass
class CountCheck:
    name: str
    expected: int
    actual: int

    @property
    def passed(self) -> bool:
        return self.expected == self.actual

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: {self.actual:,} (expected {self.expected:,})"


def count_check(count_fn: Callable[[ModelConfig], int] = count_parameters) -> CountCheck:
    return CountCheck("parameter count (GCUT reference)", GCUT_PARAMETER_COUNT,
                      count_fn(ModelConfig.gcut_reference()))


def run_all(count_fn: Callable[[ModelConfig], int] = count_parameters) -> list:
    return [count_check(count_fn)] + op_checks() + model_checks()
