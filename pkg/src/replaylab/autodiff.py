"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Operations are recorded on the active :class:`Graph` (see ``with Graph():``)
in construction order; :func:`backward` walks that record in reverse.
Outside a graph every op is a plain numpy computation, which is what
evaluation uses.

The primitive set is deliberately small: exactly what the mini-UNet and the
Dice loss need. Elementwise binary ops require equal shapes or a Python
scalar operand; there is no broadcasting.
"""
from __future__ import annotations

import contextlib
import hashlib
import itertools
import weakref
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ConfigError, ContractError, GraphStateError, ShapeError

__all__ = [
    "Tensor", "Graph", "Node", "backward", "check_gradients", "GradientReport",
    "conv", "relu", "normalized_relu", "add", "sub", "mul", "div", "rsub",
    "concat", "max_pool", "upsample", "sum_all",
]


class Tensor:
    """Dense array value with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "_graph", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        # weak, so a finished tape is freed by refcounting instead of waiting for the cycle collector
        self._graph: weakref.ref[Graph] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the data."""
        return self.data.reshape(-1)

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # operator sugar, used by the loss code
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(self, other)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return rsub(self, other)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(self, other)
    def __truediv__(self, other): return div(self, other)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    # maps d(loss)/d(output) to a tuple of d(loss)/d(input), None where not needed
    backward_fn: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


@dataclass
class Graph:
    """Ordered record of primitive applications."""

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Graph":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)


_ACTIVE: list[Graph] = []


def _current_graph() -> Graph | None:
    return _ACTIVE[-1] if _ACTIVE else None


@contextlib.contextmanager
def no_record() -> Iterator[None]:
    """Temporarily suspend recording (used by finite differences)."""
    saved = list(_ACTIVE)
    _ACTIVE.clear()
    try:
        yield
    finally:
        _ACTIVE.extend(saved)


# Activation-pattern recorder: piecewise-smooth ops feed their discrete
# choices (ReLU masks, pooling/normalisation argmaxes) into a running hash.
_PATTERN: list["hashlib._Hash"] = []


def _note(arr: np.ndarray) -> None:
    if _PATTERN:
        _PATTERN[-1].update(np.ascontiguousarray(arr).tobytes())


@contextlib.contextmanager
def activation_pattern() -> Iterator[list[str]]:
    """Collect a digest of every discrete branch taken inside the block."""
    h = hashlib.sha256()
    out: list[str] = []
    _PATTERN.append(h)
    try:
        yield out
    finally:
        _PATTERN.pop()
        out.append(h.hexdigest())


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _wrap(arr: np.ndarray) -> Tensor:
    # results of our own ops are fresh arrays; skip the defensive copy
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(arr, dtype=np.float64)
    out.requires_grad = False
    out.grad = None
    out._graph = None
    out.name = None
    return out


def _record(op: str, inputs: Sequence[Tensor], out_data: np.ndarray, backward_fn) -> Tensor:
    out = _wrap(out_data)
    graph = _current_graph()
    if graph is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._graph = weakref.ref(graph)
        graph.nodes.append(Node(op, tuple(inputs), out, backward_fn))
    return out


# ---------------------------------------------------------------- primitives

def _check_kernel(x: np.ndarray, k: np.ndarray, b: np.ndarray | None) -> int:
    rank = x.ndim - 2
    if rank not in (2, 3):
        raise ShapeError(f"conv expects 2 or 3 spatial dims, got input shape {x.shape}")
    if k.ndim != rank + 2:
        raise ShapeError(f"kernel rank {k.ndim} does not match input rank {x.ndim}")
    if k.shape[1] != x.shape[1]:
        raise ShapeError(f"channel mismatch: input has {x.shape[1]}, kernel expects {k.shape[1]}")
    if any(e % 2 == 0 for e in k.shape[2:]):
        raise ConfigError(f"kernel extents must be odd, got {k.shape[2:]}")
    if b is not None and b.shape != (k.shape[0],):
        raise ShapeError(f"bias shape {b.shape} does not match {k.shape[0]} filters")
    return rank


def _offsets(ks: tuple[int, ...]) -> list[tuple[int, ...]]:
    return list(itertools.product(*[range(e) for e in ks]))


def _im2col(x: np.ndarray, ks: tuple[int, ...]) -> np.ndarray:
    """(N, C, *sp) -> (N, C, prod(ks), *sp) with zero padding ks//2."""
    sp = x.shape[2:]
    xp = np.pad(x, [(0, 0), (0, 0)] + [(e // 2, e // 2) for e in ks])
    offs = _offsets(ks)
    col = np.empty(x.shape[:2] + (len(offs),) + sp)
    for i, off in enumerate(offs):
        col[:, :, i] = xp[(slice(None), slice(None)) + tuple(slice(o, o + s) for o, s in zip(off, sp))]
    return col


def _col2im(col: np.ndarray, ks: tuple[int, ...]) -> np.ndarray:
    """Adjoint of :func:`_im2col`."""
    n, c, _ = col.shape[:3]
    sp = col.shape[3:]
    out = np.zeros((n, c) + tuple(s + 2 * (e // 2) for s, e in zip(sp, ks)))
    for i, off in enumerate(_offsets(ks)):
        out[(slice(None), slice(None)) + tuple(slice(o, o + s) for o, s in zip(off, sp))] += col[:, :, i]
    crop = tuple(slice(e // 2, e // 2 + s) for e, s in zip(ks, sp))
    return out[(slice(None), slice(None)) + crop]


def conv(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """N-d convolution (2-d or 3-d), stride 1, zero padding k//2."""
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    xd, kd = x.data, kernel.data
    bd = bias.data if bias is not None else None
    rank = _check_kernel(xd, kd, bd)
    n, c = xd.shape[:2]
    sp = xd.shape[2:]
    f = kd.shape[0]
    ks = kd.shape[2:]
    col = _im2col(xd, ks)
    ck = col.shape[1] * col.shape[2]
    cols = col.reshape(n, ck, -1)
    km = kd.reshape(f, ck)
    out = np.matmul(km, cols).reshape((n, f) + sp)
    if bd is not None:
        out = out + bd.reshape((1, -1) + (1,) * rank)

    def bw(g):
        gx = gk = gb = None
        gm = g.reshape(n, f, -1)
        if x.requires_grad:
            gx = _col2im(np.matmul(km.T, gm).reshape(col.shape), ks)
        if kernel.requires_grad:
            gk = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0).reshape(kd.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0,) + tuple(range(2, 2 + rank)))
        return (gx, gk, gb) if bias is not None else (gx, gk)

    inputs = (x, kernel, bias) if bias is not None else (x, kernel)
    return _record("conv", inputs, out, bw)


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    _note(mask)
    return _record("relu", (x,), np.where(mask, x.data, 0.0), lambda g: (g * mask,))


def normalized_relu(x: Tensor) -> Tensor:
    """relu(x) / max(relu(x)) per sample (leading axis); all zeros when the max is 0.

    The max is differentiated as a function of the input; ties go to the first
    maximal element in row-major order.
    """
    x = _as_tensor(x)
    n = x.shape[0]
    flat = x.data.reshape(n, -1)
    r = np.maximum(flat, 0.0)
    arg = np.argmax(r, axis=1)  # first occurrence on ties
    _note(flat > 0)
    _note(arg)
    m = r[np.arange(n), arg]
    live = m > 0
    safe_m = np.where(live, m, 1.0)
    y = np.where(live[:, None], r / safe_m[:, None], 0.0)

    def bw(g):
        gf = g.reshape(n, -1)
        gr = np.where(live[:, None], gf / safe_m[:, None], 0.0)
        gm = np.where(live, -(gf * r).sum(axis=1) / safe_m ** 2, 0.0)
        gr[np.arange(n), arg] += gm
        gx = gr * (flat > 0)
        return (gx.reshape(x.shape),)

    return _record("normalized_relu", (x,), y.reshape(x.shape), bw)


def _binary(op: str, a, b, fwd, grad_a, grad_b) -> Tensor:
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise ContractError(f"{op} needs at least one Tensor operand")
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        if a.shape != b.shape:
            raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
        ad, bd = a.data, b.data
        out = fwd(ad, bd)
        return _record(op, (a, b), out, lambda g: (
            grad_a(g, ad, bd) if a.requires_grad else None,
            grad_b(g, ad, bd) if b.requires_grad else None,
        ))
    if isinstance(a, Tensor):
        ad, bd = a.data, float(b)
        return _record(op, (a,), fwd(ad, bd), lambda g: (grad_a(g, ad, bd),))
    ad, bd = float(a), b.data
    return _record(op, (b,), fwd(ad, bd), lambda g: (grad_b(g, ad, bd),))


def add(a, b) -> Tensor:
    return _binary("add", a, b, np.add, lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b) -> Tensor:
    return _binary("sub", a, b, np.subtract, lambda g, x, y: g, lambda g, x, y: -g)


def rsub(a: Tensor, b) -> Tensor:
    """b - a."""
    return sub(b, a)


def mul(a, b) -> Tensor:
    return _binary("mul", a, b, np.multiply, lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a, b) -> Tensor:
    return _binary(
        "div", a, b, np.divide,
        lambda g, x, y: g / y,
        lambda g, x, y: -g * x / (y * y),
    )


def sum_all(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape
    return _record("sum", (x,), np.asarray(x.data.sum()), lambda g: (np.full(shape, float(g)),))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along ``axis`` (the channel axis by default)."""
    tensors = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record("concat", tensors, out, bw)


def _blocked(a: np.ndarray, rank: int) -> np.ndarray:
    """(N, C, 2h, 2w[, 2d]) -> (N, C, h, w[, d], 2**rank) window view (copy)."""
    n, c = a.shape[:2]
    sp = a.shape[2:]
    shaped = a.reshape((n, c) + sum(((s // 2, 2) for s in sp), ()))
    order = [0, 1] + [2 + 2 * i for i in range(rank)] + [3 + 2 * i for i in range(rank)]
    return shaped.transpose(order).reshape((n, c) + tuple(s // 2 for s in sp) + (2 ** rank,))


def _unblocked(b: np.ndarray, rank: int) -> np.ndarray:
    n, c = b.shape[:2]
    half = b.shape[2:2 + rank]
    shaped = b.reshape((n, c) + half + (2,) * rank)
    order = [0, 1]
    for i in range(rank):
        order += [2 + i, 2 + rank + i]
    return shaped.transpose(order).reshape((n, c) + tuple(2 * h for h in half))


def max_pool(x: Tensor) -> Tensor:
    """Stride-2, window-2 max pooling over every spatial axis."""
    x = _as_tensor(x)
    rank = x.data.ndim - 2
    if any(s % 2 for s in x.shape[2:]):
        raise ShapeError(f"max_pool needs even spatial extents, got {x.shape[2:]}")
    blocks = _blocked(x.data, rank)
    arg = np.argmax(blocks, axis=-1)[..., None]
    _note(arg)
    out = np.take_along_axis(blocks, arg, axis=-1)[..., 0]

    def bw(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, arg, g[..., None], axis=-1)
        return (_unblocked(gb, rank),)

    return _record("max_pool", (x,), out, bw)


def upsample(x: Tensor) -> Tensor:
    """Nearest-neighbour x2 upsampling over every spatial axis."""
    x = _as_tensor(x)
    rank = x.data.ndim - 2
    out = x.data
    for ax in range(2, 2 + rank):
        out = np.repeat(out, 2, axis=ax)

    def bw(g):
        return (_blocked(g, rank).sum(axis=-1),)

    return _record("upsample", (x,), out, bw)


# ---------------------------------------------------------------- backward

def backward(graph: Graph, loss: Tensor) -> dict[int, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every grad-requiring leaf.

    Returns a map from ``id(leaf)`` to its accumulated gradient.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not graph.nodes:
        raise GraphStateError("backward called before any forward pass was recorded")
    if loss._graph is None or loss._graph() is not graph:
        if not loss.requires_grad:
            # constant loss: every parameter gradient is zero
            return {}
        raise GraphStateError("loss was not produced by this graph")

    produced = {id(node.output) for node in graph.nodes}
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward_fn(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if key not in produced:
                leaves[key] = t
    out = {}
    for key, t in leaves.items():
        g = grads[key].reshape(t.shape)
        t.grad = g.copy() if t.grad is None else t.grad + g
        out[key] = t.grad
    return out


@dataclass
class GradientReport:
    tolerance: float
    max_rel_error: dict[str, float]
    # coordinates rejected because the +/- step crossed a ReLU/max switch
    kinks_skipped: dict[str, int] = field(default_factory=dict)

    @property
    def passed(self) -> dict[str, bool]:
        return {k: v <= self.tolerance for k, v in self.max_rel_error.items()}

    @property
    def ok(self) -> bool:
        return all(self.passed.values())


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: dict[str, Tensor],
    tolerance: float = 1e-4,
    n_coords: int = 20,
    step: float = 1e-5,
    seed: int = 0,
    skip_kinks: bool = True,
) -> GradientReport:
    """Compare analytic gradients against central finite differences.

    ``loss_fn`` rebuilds the forward pass and returns a scalar; it is called
    once under a fresh graph and then repeatedly without recording. With
    ``skip_kinks`` a coordinate whose stencil changes the activation pattern
    is replaced by another one, since the function is not differentiable
    between the two evaluation points.
    """
    for p in params.values():
        p.zero_grad()
    with Graph() as g, activation_pattern() as base:
        loss = loss_fn()
    backward(g, loss)
    rng = np.random.default_rng(seed)
    report: dict[str, float] = {}
    skipped: dict[str, int] = {}
    for name, p in params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        candidates = rng.permutation(flat.size)
        want = min(n_coords, flat.size)
        worst, used, skips = 0.0, 0, 0
        for c in candidates:
            if used == want:
                break
            orig = flat[c]
            with no_record():
                flat[c] = orig + step
                with activation_pattern() as pu:
                    up = loss_fn().item()
                flat[c] = orig - step
                with activation_pattern() as pd:
                    down = loss_fn().item()
            flat[c] = orig
            if skip_kinks and (pu[0] != base[0] or pd[0] != base[0]):
                skips += 1
                continue
            numeric = (up - down) / (2 * step)
            worst = max(worst, relative_error(float(analytic.reshape(-1)[c]), numeric))
            used += 1
        report[name] = worst
        skipped[name] = skips
    return GradientReport(tolerance, report, skipped)
