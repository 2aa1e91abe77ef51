"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph is define-by-run: every operation records its inputs and a
backward closure on the freshly created output tensor, so a new graph is
built for each forward pass. ``backward`` walks that graph exactly once in
reverse topological order and accumulates (sums) gradients into every
tensor that requires them. All data is 64-bit; the finite-difference
checker at the bottom of this module is the ground truth the operator set
is verified against.

Broadcast support is deliberately narrow: ``mul``/``add`` accept equal
shapes, or a per-channel vector of shape [B, C] against a map of shape
[B, C, H, W]. Nothing else broadcasts.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DimensionError, LayoutError

# Smallest/largest float64 values strictly inside (0, 1); sigmoid output is
# clipped here so the open-interval invariant survives saturation.
_SIG_LO = np.nextafter(0.0, 1.0)
_SIG_HI = np.nextafter(1.0, 0.0)


class Tensor:
    """A dense float64 array plus an optional gradient slot.

    ``op`` records the operator that produced the tensor ("leaf" for
    inputs/parameters) and is used for NaN diagnostics.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = op
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"


def _result(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    """Wrap an op result; the backward closure is kept only if needed."""
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents), op=op)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    return out


# Public hook for modules that define their own differentiable operators
# (the detector's 3x3 convolution, upsampling, Huber loss) on this graph.
make_op = _result


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# batchnorm state
# ---------------------------------------------------------------------------


@dataclass
class RunningStats:
    """Per-channel running mean/variance for batchnorm eval mode."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def create(cls, channels: int, momentum: float = 0.1, eps: float = 1e-5) -> "RunningStats":
        if eps <= 0:
            raise ConfigError(f"batchnorm epsilon must be > 0, got {eps}")
        return cls(np.zeros(channels), np.ones(channels), momentum, eps)

    def copy(self) -> "RunningStats":
        return RunningStats(self.mean.copy(), self.var.copy(), self.momentum, self.eps)


# ---------------------------------------------------------------------------
# operators
# ---------------------------------------------------------------------------


def _require_4d(x: Tensor, name: str) -> None:
    if x.ndim != 4:
        raise DimensionError(f"{name} expects a [B,C,H,W] tensor, got shape {x.shape}")


def conv1x1(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Pointwise convolution: out[b,o,i,j] = sum_c w[o,c]*x[b,c,i,j] + b[o]."""
    _require_4d(x, "conv1x1")
    if w.ndim != 2:
        raise DimensionError(f"conv1x1 weights must be [C_out,C_in], got shape {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise DimensionError(
            f"conv1x1 channel mismatch: input axis 1 has {x.shape[1]} channels, "
            f"weight axis 1 expects {w.shape[1]}"
        )
    if b.shape != (w.shape[0],):
        raise DimensionError(f"conv1x1 bias must be [C_out]={w.shape[0]}, got shape {b.shape}")

    xd, wd = x.data, w.data
    out = np.moveaxis(np.tensordot(wd, xd, axes=([1], [1])), 0, 1)
    out = out + b.data[None, :, None, None]

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate(np.moveaxis(np.tensordot(wd, g, axes=([0], [1])), 0, 1))
        if w.requires_grad:
            w.accumulate(np.tensordot(g, xd, axes=([0, 2, 3], [0, 2, 3])))
        if b.requires_grad:
            b.accumulate(g.sum(axis=(0, 2, 3)))

    return _result(out, (x, w, b), backward, "conv1x1")


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, mode: str, state: RunningStats) -> Tensor:
    """Per-channel batch normalization over the (B, H, W) axes.

    Train mode normalizes with the batch statistics and folds them into the
    running stats (new = (1-momentum)*old + momentum*batch); eval mode uses
    the running stats as constants. Batch variance is the biased (1/M)
    estimate in both the normalization and the running update.
    """
    _require_4d(x, "batchnorm")
    if mode not in ("train", "eval"):
        raise ConfigError(f"batchnorm mode must be 'train' or 'eval', got {mode!r}")
    if state.eps <= 0:
        raise ConfigError(f"batchnorm epsilon must be > 0, got {state.eps}")
    B, C, H, W = x.shape
    if gamma.shape != (C,) or beta.shape != (C,):
        raise DimensionError(
            f"batchnorm gamma/beta must be [{C}], got {gamma.shape} and {beta.shape}"
        )
    if B == 0:
        raise DimensionError("batchnorm got an empty batch")
    m = B * H * W
    if mode == "train" and m < 2:
        raise DimensionError(f"batchnorm train mode needs B*H*W >= 2, got {m}")

    xd = x.data
    if mode == "train":
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        state.mean = (1.0 - state.momentum) * state.mean + state.momentum * mu
        state.var = (1.0 - state.momentum) * state.var + state.momentum * var
    else:
        mu = state.mean
        var = state.var
    inv_std = 1.0 / np.sqrt(var + state.eps)
    x_hat = (xd - mu[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma.data[None, :, None, None] * x_hat + beta.data[None, :, None, None]

    def backward(g: np.ndarray) -> None:
        if gamma.requires_grad:
            gamma.accumulate((g * x_hat).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            beta.accumulate(g.sum(axis=(0, 2, 3)))
        if not x.requires_grad:
            return
        gd = gamma.data[None, :, None, None]
        istd = inv_std[None, :, None, None]
        if mode == "eval":
            x.accumulate(g * gd * istd)
            return
        dxhat = g * gd
        xc = xd - mu[None, :, None, None]
        dvar = (dxhat * xc).sum(axis=(0, 2, 3)) * (-0.5) * inv_std**3
        dmu = (-(dxhat * istd)).sum(axis=(0, 2, 3)) + dvar * (-2.0 / m) * xc.sum(axis=(0, 2, 3))
        dx = (
            dxhat * istd
            + (dvar[None, :, None, None] * 2.0 / m) * xc
            + dmu[None, :, None, None] / m
        )
        x.accumulate(dx)

    return _result(out, (x, gamma, beta), backward, "batchnorm")


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)
    mask = x.data > 0.0

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate(g * mask)

    return _result(out, (x,), backward, "relu")


def sigmoid(x: Tensor) -> Tensor:
    """Numerically stable logistic; output clipped strictly inside (0, 1)."""
    xd = x.data
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out[~pos] = ex / (1.0 + ex)
    np.clip(out, _SIG_LO, _SIG_HI, out=out)

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate(g * out * (1.0 - out))

    return _result(out, (x,), backward, "sigmoid")


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ConfigError(f"unknown activation kind {kind!r}")


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean per channel: [B,C,H,W] -> [B,C]."""
    _require_4d(x, "global_avg_pool")
    B, C, H, W = x.shape
    out = x.data.mean(axis=(2, 3))

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate(np.broadcast_to(g[:, :, None, None] / (H * W), x.shape).copy())

    return _result(out, (x,), backward, "global_avg_pool")


def _broadcast_kind(x: Tensor, y: Tensor, op: str) -> bool:
    """True when y is a [B,C] vector applied to an [B,C,H,W] map."""
    if x.shape == y.shape:
        return False
    if x.ndim == 4 and y.ndim == 2 and x.shape[:2] == y.shape:
        return True
    raise DimensionError(
        f"{op}: shapes {x.shape} and {y.shape} are neither equal nor the "
        f"supported [B,C,H,W] vs [B,C] per-channel broadcast"
    )


def mul(x: Tensor, y: Tensor) -> Tensor:
    broadcast = _broadcast_kind(x, y, "mul")
    yd = y.data[:, :, None, None] if broadcast else y.data
    out = x.data * yd

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate(g * yd)
        if y.requires_grad:
            gy = g * x.data
            y.accumulate(gy.sum(axis=(2, 3)) if broadcast else gy)

    return _result(out, (x, y), backward, "mul")


def add(x: Tensor, y: Tensor) -> Tensor:
    broadcast = _broadcast_kind(x, y, "add")
    yd = y.data[:, :, None, None] if broadcast else y.data
    out = x.data + yd

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate(g)
        if y.requires_grad:
            y.accumulate(g.sum(axis=(2, 3)) if broadcast else g)

    return _result(out, (x, y), backward, "add")


def elementwise(x: Tensor, y: Tensor, kind: str) -> Tensor:
    if kind == "mul":
        return mul(x, y)
    if kind == "add":
        return add(x, y)
    raise ConfigError(f"unknown elementwise kind {kind!r}")


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    """Concatenate along axis 1; inputs must agree on every other axis."""
    if not xs:
        raise DimensionError("concat_channels needs at least one input")
    first = xs[0]
    for i, t in enumerate(xs[1:], start=1):
        if t.ndim != first.ndim or t.shape[0] != first.shape[0] or t.shape[2:] != first.shape[2:]:
            raise DimensionError(
                f"concat_channels input {i} has shape {t.shape}, incompatible "
                f"with input 0 of shape {first.shape} outside axis 1"
            )
    widths = [t.shape[1] for t in xs]
    out = np.concatenate([t.data for t in xs], axis=1)
    offsets = np.cumsum([0] + widths)

    def backward(g: np.ndarray) -> None:
        for t, lo, hi in zip(xs, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                t.accumulate(g[:, lo:hi])

    return _result(out, tuple(xs), backward, "concat_channels")


def group_max(x: Tensor, groups: int) -> Tensor:
    """Max over each group of A=C/groups adjacent channels.

    The channel layout is anchor-major within each class group (channel
    index = n*A + a); ties route the full gradient to the lowest anchor
    index in the group.
    """
    _require_4d(x, "group_max")
    B, C, H, W = x.shape
    if groups < 1 or C % groups != 0:
        raise LayoutError(
            f"group_max: channel count {C} is not divisible into {groups} groups"
        )
    A = C // groups
    grouped = x.data.reshape(B, groups, A, H, W)
    idx = grouped.argmax(axis=2)
    out = np.take_along_axis(grouped, idx[:, :, None], axis=2)[:, :, 0]

    def backward(g: np.ndarray) -> None:
        if not x.requires_grad:
            return
        gx = np.zeros_like(grouped)
        np.put_along_axis(gx, idx[:, :, None], g[:, :, None], axis=2)
        x.accumulate(gx.reshape(x.shape))

    return _result(out, (x,), backward, "group_max")


def _normalize_axes(x: Tensor, axes) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(x.ndim))
    axes = (axes,) if isinstance(axes, int) else tuple(axes)
    for a in axes:
        if not -x.ndim <= a < x.ndim:
            raise DimensionError(f"reduce: axis {a} invalid for shape {x.shape}")
    return tuple(sorted(a % x.ndim for a in axes))


def reduce(x: Tensor, axes=None, kind: str = "sum") -> Tensor:
    """Sum or mean over the given axes (all axes when None, identity for ())."""
    if kind not in ("sum", "mean"):
        raise ConfigError(f"unknown reduce kind {kind!r}")
    ax = _normalize_axes(x, axes)
    count = int(np.prod([x.shape[a] for a in ax], dtype=np.int64)) if ax else 1
    out = x.data.sum(axis=ax) if ax else x.data.copy()
    if kind == "mean":
        out = out / count

    def backward(g: np.ndarray) -> None:
        if not x.requires_grad:
            return
        shape = [1 if a in ax else s for a, s in enumerate(x.shape)]
        gg = np.broadcast_to(g.reshape(shape), x.shape)
        x.accumulate(gg / count if kind == "mean" else gg.copy())

    return _result(out, (x,), backward, f"reduce_{kind}")


def reduce_sum(x: Tensor, axes=None) -> Tensor:
    return reduce(x, axes, "sum")


def reduce_mean(x: Tensor, axes=None) -> Tensor:
    return reduce(x, axes, "mean")


def scale(x: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    out = x.data * factor

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate(g * factor)

    return _result(out, (x,), backward, "scale")


def add_scalar(x: Tensor, value: float) -> Tensor:
    value = float(value)

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate(g.copy())

    return _result(x.data + value, (x,), backward, "add_scalar")


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0.0):
        raise ContractError("log requires strictly positive inputs; clamp first")
    out = np.log(x.data)

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate(g / x.data)

    return _result(out, (x,), backward, "log")


def power(x: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)
    out = x.data**exponent

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate(g * exponent * x.data ** (exponent - 1.0))

    return _result(out, (x,), backward, "power")


def reciprocal(x: Tensor) -> Tensor:
    out = 1.0 / x.data

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate(-g * out * out)

    return _result(out, (x,), backward, "reciprocal")


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Numerical guard with a straight-through gradient.

    The forward value is clipped to [lo, hi]; the backward pass passes the
    upstream gradient unchanged, so downstream derivatives are evaluated at
    the clamped value without killing the gradient at the bounds.
    """
    out = np.clip(x.data, lo, hi)

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate(g.copy())

    return _result(out, (x,), backward, "clamp")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    out = x.data.reshape(shape)

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate(g.reshape(x.shape))

    return _result(out, (x,), backward, "reshape")


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate(g.transpose(inverse))

    return _result(out, (x,), backward, "permute")


def take_rows(x: Tensor, indices: np.ndarray) -> Tensor:
    """Gather rows of a 2-D tensor; backward scatter-adds duplicates."""
    if x.ndim != 2:
        raise DimensionError(f"take_rows expects a 2-D tensor, got shape {x.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    out = x.data[idx]

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            np.add.at(gx, idx, g)
            x.accumulate(gx)

    return _result(out, (x,), backward, "take_rows")


# ---------------------------------------------------------------------------
# graph traversal
# ---------------------------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
    """Iterative post-order DFS; returns nodes with inputs before consumers."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Reverse-mode sweep from a scalar loss.

    Gradients accumulate (sum) into every reachable tensor with
    ``requires_grad``; each node's backward rule fires exactly once. Returns
    a map from ``id(tensor)`` to its gradient array.
    """
    if loss.shape != ():
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    order = _topo_order(loss)
    loss.grad = np.ones(())
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    return {id(t): t.grad for t in order if t.requires_grad and t.grad is not None}


def first_nan_node(root: Tensor) -> str | None:
    """Name of the first graph node (in forward order) holding a NaN/Inf."""
    for node in _topo_order(root):
        if not np.all(np.isfinite(node.data)):
            return node.op
    return None


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------


def finite_diff_check(
    f: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-6
) -> float:
    """Worst relative error of backward gradients vs central differences.

    ``f`` rebuilds a scalar graph from ``params`` on every call and must be
    deterministic (checked by evaluating twice). For each parameter element
    the analytic gradient is compared against (f(t+h)-f(t-h))/(2h) with the
    denominator max(|analytic|, |numeric|, 1e-8).
    """
    if step <= 0:
        raise ContractError(f"finite_diff_check step must be > 0, got {step}")
    base_a = float(f().data)
    base_b = float(f().data)
    if base_a != base_b:
        raise ContractError(
            f"finite_diff_check: f is not deterministic ({base_a!r} != {base_b!r})"
        )

    zero_grads(params)
    backward(f())
    analytic = [
        p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params
    ]

    worst = 0.0
    for p, grads in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = grads.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = float(f().data)
            flat[i] = orig - step
            f_minus = float(f().data)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            rel = abs(gflat[i] - numeric) / max(abs(gflat[i]), abs(numeric), 1e-8)
            worst = max(worst, rel)
    return worst
