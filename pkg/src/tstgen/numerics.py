"""Dense tensors with hand-written reverse-mode differentiation.

Every operation here returns a new :class:`Tensor`. When any input requires a
gradient the result remembers its parents and a backward rule, and is appended
to the active :class:`GradTape` (if one is open). :func:`backward` replays
either that tape or a topological order derived from the loss.

Model arithmetic runs in float32; :func:`grad_check` re-runs everything in
float64 and compares against central differences.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, ShapeError

MASK_VALUE = -1e9

_TAPES: list["GradTape"] = []
_GRAD_ENABLED = [True]


class Tensor:
    """A row-major real array participating in a differentiation graph."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def astype(self, dtype) -> "Tensor":
        """Detached copy in another precision, keeping the requires_grad flag."""
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return scale(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)


class GradTape:
    """Ordered record of the operations executed while the tape is active."""

    def __init__(self):
        self.records: list[Tensor] = []

    def __enter__(self) -> "GradTape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.records)


@contextlib.contextmanager
def no_grad():
    """Disable graph construction (used for inference and decoding)."""
    prev = _GRAD_ENABLED[0]
    _GRAD_ENABLED[0] = False
    try:
        yield
    finally:
        _GRAD_ENABLED[0] = prev


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float32
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap an op result, attaching the backward rule when a parent needs it.

    ``backward`` maps the upstream gradient to a tuple with one entry per
    parent (``None`` where no gradient flows).
    """
    needs = _GRAD_ENABLED[0] and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
        if _TAPES:
            _TAPES[-1].records.append(out)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _binary_shapes(a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise

def add(x, y) -> Tensor:
    x, y = _pair(x, y)
    _binary_shapes(x, y)

    def backward(g):
        return _unbroadcast(g, x.shape), _unbroadcast(g, y.shape)

    return _make(x.data + y.data, (x, y), backward)


def sub(x, y) -> Tensor:
    x, y = _pair(x, y)
    _binary_shapes(x, y)

    def backward(g):
        return _unbroadcast(g, x.shape), _unbroadcast(-g, y.shape)

    return _make(x.data - y.data, (x, y), backward)


def mul(x, y) -> Tensor:
    x, y = _pair(x, y)
    _binary_shapes(x, y)

    def backward(g):
        return _unbroadcast(g * y.data, x.shape), _unbroadcast(g * x.data, y.shape)

    return _make(x.data * y.data, (x, y), backward)


def _pair(x, y) -> tuple[Tensor, Tensor]:
    if isinstance(x, Tensor):
        return x, as_tensor(y, like=x)
    y = as_tensor(y)
    return as_tensor(x, like=y), y


def scale(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)
    return _make(x.data * c, (x,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    keep = x.data > 0
    return _make(np.where(keep, x.data, 0).astype(x.dtype), (x,), lambda g: (g * keep,))


def _below_one(dtype):
    return np.nextafter(dtype.type(1), dtype.type(0))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    z = x.data
    e = np.exp(-np.abs(z))
    s = np.where(z >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype)
    # keep the range open so a bounded head never emits exactly 0 or 1
    s = np.clip(s, np.finfo(x.dtype).tiny, _below_one(x.dtype))
    return _make(s, (x,), lambda g: (g * s * (1 - s),))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    t = np.clip(t, -_below_one(x.dtype), _below_one(x.dtype))
    return _make(t, (x,), lambda g: (g * (1 - t * t),))


def dropout(x: Tensor, p: float, rng: np.random.Generator | None = None,
            training: bool = True) -> Tensor:
    """Inverted dropout; the identity when ``training`` is false or ``p == 0``."""
    if not 0 <= p < 1:
        raise ContractError(f"dropout rate must lie in [0, 1), got {p}")
    if not training or p == 0:
        return x
    if rng is None:
        raise ContractError("training-mode dropout needs an rng")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1 - p)
    return _make(x.data * keep, (x,), lambda g: (g * keep,))


def pointwise(kind: str, x, y=None, *, p: float = 0.0, rng=None, training: bool = True) -> Tensor:
    """Dispatch one of the elementwise kinds by name."""
    if kind in ("add", "mul", "sub"):
        if y is None:
            raise ContractError(f"{kind} needs two operands")
        return {"add": add, "mul": mul, "sub": sub}[kind](x, y)
    unary = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh}
    if kind in unary:
        return unary[kind](as_tensor(x))
    if kind == "dropout":
        return dropout(as_tensor(x), p, rng, training)
    raise ContractError(f"unknown pointwise kind {kind!r}")


# ---------------------------------------------------------------------------
# shape

def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def swap_last(x: Tensor) -> Tensor:
    axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    return transpose(x, axes)


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _make(np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                 lambda g: (np.broadcast_to(g, shape).astype(x.dtype),))


def mean_all(x: Tensor) -> Tensor:
    return scale(sum_all(x), 1.0 / x.data.size)


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``[.., m, k] @ [.., k, n]``.

    The right operand may also be a plain 2-D matrix shared across the batch
    (weights applied to ``[B, T, d]`` activations).
    """
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}")
    shared = b.ndim == 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"batch dimensions differ: {a.shape} vs {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if shared:
            k, n = b.shape
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _make(a.data @ b.data, (a, b), backward)


def masked_softmax(logits: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis; ``mask`` is True where a position is forbidden.

    Forbidden positions get an additive -1e9. Rows with every position
    forbidden come out uniform.
    """
    z = logits.data
    full = None
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        try:
            mask = np.broadcast_to(mask, z.shape)
        except ValueError:
            raise ShapeError(f"mask {mask.shape} does not broadcast to {z.shape}") from None
        z = z + np.where(mask, z.dtype.type(MASK_VALUE), z.dtype.type(0))
        full = mask.all(axis=-1, keepdims=True)
        if full.any():
            z = np.where(full, z.dtype.type(0), z)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = (e / e.sum(axis=-1, keepdims=True)).astype(logits.dtype)

    def backward(g):
        gz = s * (g - (g * s).sum(axis=-1, keepdims=True))
        if full is not None and full.any():
            gz = np.where(full, 0, gz).astype(s.dtype)
        return (gz,)

    return _make(s, (logits,), backward)


def log_softmax(logits: Tensor) -> Tensor:
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    soft = np.exp(out)
    return _make(out.astype(logits.dtype), (logits,),
                 lambda g: (g - soft * g.sum(axis=-1, keepdims=True),))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm affine params must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + x.dtype.type(eps))
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        gx_hat = g * gain.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(out.astype(x.dtype), (x, gain, bias), backward)


# ---------------------------------------------------------------------------
# backward pass

def _topological(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen or node.is_leaf:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and not p.is_leaf and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, tape: GradTape | None = None) -> dict[Tensor, np.ndarray]:
    """Populate ``.grad`` on every requires_grad leaf reachable from ``loss``.

    Gradients accumulate into existing ``.grad`` buffers, so calling twice
    without resetting doubles them. Returns a map leaf -> gradient of this call.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    if loss.is_leaf:
        order = []
    elif tape is not None:
        if not any(r is loss for r in reversed(tape.records)):
            raise ContractError("loss was not recorded on the given tape")
        order = tape.records
    else:
        order = _topological(loss)

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    if loss.is_leaf:
        leaves[id(loss)] = loss
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
            if parent.is_leaf:
                leaves[key] = parent

    out = {}
    for key, leaf in leaves.items():
        g = np.asarray(grads[key], dtype=leaf.dtype).reshape(leaf.shape)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        out[leaf] = g
    return out


# ---------------------------------------------------------------------------
# finite-difference verification

@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    tolerance: float
    passed: bool

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: max rel err {self.max_rel_error:.3e} (tol {self.tolerance:g})"


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], tolerance: float = 1e-4,
               h: float = 1e-4, name: str = "op", wrt: Sequence[int] | None = None) -> GradCheckReport:
    """Compare analytic gradients of scalar ``fn(*tensors)`` to central differences.

    All inputs are promoted to float64. ``wrt`` selects which inputs are
    differentiated (default: all).
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    wrt = range(len(arrays)) if wrt is None else wrt
    tensors = [Tensor(a, requires_grad=i in wrt) for i, a in enumerate(arrays)]
    loss = fn(*tensors)
    backward(loss)

    def evaluate() -> float:
        with no_grad():
            return float(fn(*[Tensor(a) for a in arrays]).data)

    worst = 0.0
    for i in wrt:
        analytic = tensors[i].grad if tensors[i].grad is not None else np.zeros_like(arrays[i])
        flat = arrays[i].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            up = evaluate()
            flat[j] = orig - h
            down = evaluate()
            flat[j] = orig
            numeric = (up - down) / (2 * h)
            a = analytic.reshape(-1)[j]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
            worst = max(worst, rel)
    return GradCheckReport(name, worst, tolerance, worst < tolerance)
