"""Dense float64 tensors with a reverse-mode tape and an Adam optimizer.

Operations are recorded only while a :class:`Tape` is active in the current
context; outside one they run as plain numpy math, which is how inference
works. Each thread (or asyncio task) sees its own active tape, so graphs in a
mini-batch can be differentiated independently.
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "AdamState",
    "ShapeError",
    "NonFiniteError",
    "StaleTapeError",
    "Tape",
    "Tensor",
    "adam_step",
    "add",
    "concat_features",
    "gather_rows",
    "global_avg_pool",
    "graph_feature_norm",
    "hadamard",
    "linear",
    "matmul",
    "neighborhood_max_pool",
    "neighborhood_mean",
    "record",
    "reduce_sum",
    "relu",
    "scatter_sum",
    "softmax_rows",
    "subtract",
]


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class StaleTapeError(RuntimeError):
    pass


_active_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "evseg_active_tape", default=None
)


class Tensor:
    """A float64 array plus a flag saying whether gradients should reach it."""

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite values in tensor {name or ''}".strip())
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of executed primitives.

    Use as a context manager around a forward pass, then call
    :meth:`backward` once. A second call raises :class:`StaleTapeError`.
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self._consumed = False
        self._token: contextvars.Token | None = None

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def backward(self, loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
        """Return d(loss)/d(param) for each of ``params``, in order.

        Parameters that did not take part in the forward pass get zeros.
        """
        if self._consumed:
            raise StaleTapeError("tape already consumed; re-run the forward pass")
        if loss.data.size != 1:
            raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
        self._consumed = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g_out = grads.pop(id(node.out), None)
            if g_out is None:
                continue
            for inp, g in zip(node.inputs, node.backward(g_out)):
                if g is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
        self.nodes.clear()
        return [
            grads.get(id(p), np.zeros_like(p.data)).reshape(p.shape) for p in params
        ]


def record(
    out_data: np.ndarray,
    inputs: Sequence[Tensor],
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]],
) -> Tensor:
    """Wrap ``out_data`` as a tensor and put it on the active tape if needed.

    ``backward`` maps the output gradient to one gradient (or ``None``) per
    input. Also the hook for composite ops defined outside this module.
    """
    tape = _active_tape.get()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    # a NaN or Inf anywhere makes the sum non-finite
    if not np.isfinite(np.add.reduce(out_data, axis=None)):
        raise NonFiniteError(f"non-finite output of shape {np.shape(out_data)}")
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = needs
    out.name = None
    if needs:
        tape.nodes.append(_Node(out, tuple(inputs), backward))
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a bias row matching a's last axis."""
    a, b = _as_tensor(a), _as_tensor(b)
    if b.data.ndim == 1 and a.data.ndim >= 1 and b.shape[0] == a.shape[-1] and a.shape != b.shape:
        lead = tuple(range(a.data.ndim - 1))
        return record(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=lead)))
    _same_shape("add", a, b)
    return record(a.data + b.data, (a, b), lambda g: (g, g))


def subtract(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("subtract", a, b)
    return record(a.data - b.data, (a, b), lambda g: (g, -g))


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("hadamard", a, b)
    ad, bd = a.data, b.data
    return record(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` with ``b`` a 2-D matrix; ``a`` may carry leading axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if b.data.ndim != 2 or a.data.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ bd.T
        gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return record(ad @ bd, (a, b), back)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map over the last axis: ``x @ weight + bias``."""
    if bias is None:
        return matmul(x, weight)
    if weight.data.ndim != 2 or x.shape[-1] != weight.shape[0] or bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear: x {x.shape}, weight {weight.shape}, bias {bias.shape}")
    xd, wd = x.data, weight.data

    def back(g):
        g2 = g.reshape(-1, g.shape[-1])
        return g @ wd.T, xd.reshape(-1, xd.shape[-1]).T @ g2, g2.sum(axis=0)

    return record(xd @ wd + bias.data, (x, weight, bias), back)


# ---------------------------------------------------------------------------
# reductions and normalization


def softmax_rows(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` (rows by default), max-shifted for stability."""
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return record(s, (x,), back)


def reduce_sum(x: Tensor, axis: int) -> Tensor:
    shape = x.shape

    def back(g):
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return record(x.data.sum(axis=axis), (x,), back)


def neighborhood_mean(x: Tensor) -> Tensor:
    """Mean over the neighbor axis of an ``(M, k, F)`` tensor."""
    if x.data.ndim != 3:
        raise ShapeError(f"neighborhood_mean expects (M, k, F), got {x.shape}")
    k = x.shape[1]
    return record(
        x.data.mean(axis=1),
        (x,),
        lambda g: (np.repeat(g[:, None, :] / k, k, axis=1),),
    )


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the node axis; ``(N, F) -> (1, F)``."""
    n = x.shape[0]
    return record(
        x.data.mean(axis=0, keepdims=True),
        (x,),
        lambda g: (np.repeat(g / n, n, axis=0),),
    )


@dataclass
class NormStats:
    """Running mean/variance buffers for :func:`graph_feature_norm`."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1

    @classmethod
    def fresh(cls, width: int) -> "NormStats":
        return cls(np.zeros(width), np.ones(width))

    def update(self, mean: np.ndarray, var: np.ndarray) -> None:
        m = self.momentum
        self.mean = (1 - m) * self.mean + m * mean
        self.var = (1 - m) * self.var + m * var


def graph_feature_norm(
    x: Tensor,
    scale: Tensor,
    shift: Tensor,
    stats: NormStats | None = None,
    training: bool = True,
    eps: float = 1e-8,
) -> Tensor:
    """Per-feature normalization over the node axis of one graph.

    In training mode the graph's own statistics are used (and folded into
    ``stats`` when given); otherwise ``stats`` must be provided.
    """
    xd = x.data
    if xd.ndim != 2 or scale.shape != (xd.shape[1],) or shift.shape != (xd.shape[1],):
        raise ShapeError(f"graph_feature_norm: x {x.shape}, scale {scale.shape}, shift {shift.shape}")
    if training:
        mu = xd.mean(axis=0)
        var = xd.var(axis=0)
        if stats is not None:
            stats.update(mu, var)
    else:
        if stats is None:
            raise ValueError("inference-mode normalization needs running statistics")
        mu, var = stats.mean, stats.var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    out = xhat * scale.data + shift.data

    def back(g):
        gs = g * scale.data
        if training:
            gx = inv * (gs - gs.mean(axis=0) - xhat * (gs * xhat).mean(axis=0))
        else:
            gx = gs * inv
        return gx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return record(out, (x, scale, shift), back)


# ---------------------------------------------------------------------------
# indexing


def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """``x[index]`` for a non-negative integer index array of any shape."""
    index = np.asarray(index, dtype=np.intp)

    def back(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index.reshape(-1), g.reshape(-1, *x.shape[1:]))
        return (gx,)

    return record(x.data[index], (x,), back)


def scatter_sum(x: Tensor, index: np.ndarray, num_rows: int) -> Tensor:
    """Sum rows of ``x`` into ``num_rows`` output rows: ``out[index[r]] += x[r]``."""
    index = np.asarray(index, dtype=np.intp)
    if index.shape != (x.shape[0],):
        raise ShapeError(f"scatter_sum: index {index.shape} vs rows {x.shape[0]}")
    out = np.zeros((num_rows, *x.shape[1:]))
    np.add.at(out, index, x.data)
    return record(out, (x,), lambda g: (g[index],))


def neighborhood_max_pool(x: Tensor, index: np.ndarray) -> Tensor:
    """Elementwise max of ``x`` over each row of the ``(M, k)`` index matrix."""
    index = np.asarray(index, dtype=np.intp)
    if index.ndim != 2 or x.data.ndim != 2:
        raise ShapeError(f"neighborhood_max_pool: index {index.shape}, x {x.shape}")
    vals = x.data[index]  # (M, k, F)
    arg = vals.argmax(axis=1)  # first max wins
    src = index[np.arange(index.shape[0])[:, None], arg]  # (M, F) winning rows
    cols = np.broadcast_to(np.arange(x.shape[1]), src.shape)

    def back(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (src, cols), g)
        return (gx,)

    return record(np.take_along_axis(vals, arg[:, None, :], 1)[:, 0, :], (x,), back)


def concat_features(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the last (feature) axis."""
    parts = [_as_tensor(p) for p in parts]
    lead = parts[0].shape[:-1]
    for p in parts[1:]:
        if p.shape[:-1] != lead:
            raise ShapeError(f"concat_features: leading shapes differ {lead} vs {p.shape[:-1]}")
    splits = np.cumsum([p.shape[-1] for p in parts])[:-1]
    return record(
        np.concatenate([p.data for p in parts], axis=-1),
        parts,
        lambda g: np.split(g, splits, axis=-1),
    )


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState) -> AdamState:
    """Apply one bias-corrected Adam update to ``params`` in place."""
    if len(params) != len(grads):
        raise ShapeError(f"adam_step: {len(params)} params but {len(grads)} grads")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1**state.step
    c2 = 1 - b2**state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.shape or state.m[i].shape != p.shape:
            raise ShapeError(f"adam_step: parameter {i} shape {p.shape}, grad {g.shape}")
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        p.data = p.data - state.lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + state.eps)
    return state
