"""Dense arrays with reverse-mode differentiation.

Every operation the encoder and the aggregation heads need is defined here as
a pure function Array -> Array that records its backward rule on a graph node.
Calling :func:`backward` on a scalar result traces the graph into a
topologically ordered :class:`Tape` and accumulates gradients into the leaves.

Shapes follow the row-major convention throughout. Ops that the model uses in
batched form (matmul, softmax, layer_norm, ...) accept extra leading axes; the
layer axis of a pooled stack is always axis 0.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Array",
    "Node",
    "Tape",
    "ShapeError",
    "EvaluationError",
    "array",
    "zeros",
    "backward",
    "set_debug_checks",
    "matmul",
    "add",
    "add_vec",
    "scale",
    "transpose",
    "reshape",
    "concat_lastaxis",
    "slice_lastaxis",
    "slice_rows",
    "stack_axis0",
    "softmax_lastaxis",
    "max_over_axis0",
    "mean_over_axis0",
    "select_max_norm_axis0",
    "layer_norm",
    "gelu",
    "dropout",
    "mask_rows",
    "mask_scores",
    "embed_lookup",
    "sum_all",
    "cross_entropy_mean",
    "squared_error_mean",
    "grad_check",
]

LAYER_NORM_EPS = 1e-5
MASK_PENALTY = -1e9

# When enabled, every op output is scanned for NaN/Inf right after the
# forward computation. Off by default: the scan costs a full pass per op.
_debug_checks = False


def set_debug_checks(enabled: bool) -> None:
    global _debug_checks
    _debug_checks = bool(enabled)


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested op."""


class EvaluationError(RuntimeError):
    """A checked evaluation produced a non-finite value."""


class Node:
    """One executed op: inputs, output, and the backward rule."""

    __slots__ = ("op", "inputs", "output", "bwd")

    def __init__(self, op: str, inputs: tuple["Array", ...],
                 bwd: Callable[[np.ndarray], Sequence[np.ndarray]]):
        self.op = op
        self.inputs = inputs
        self.output: "Array | None" = None
        self.bwd = bwd


class Array:
    """Shape-carrying numeric tensor with an optional gradient buffer.

    ``data`` is a float32 or float64 ndarray (float64 in test/grad-check mode,
    float32 in train mode). ``grad`` is allocated lazily during backward and
    always matches ``data`` in shape.
    """

    __slots__ = ("data", "grad", "node")

    def __init__(self, data: np.ndarray, node: Node | None = None):
        self.data = data
        self.grad: np.ndarray | None = None
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Array(shape={self.shape}, dtype={self.data.dtype})"


def array(data, dtype=np.float64) -> Array:
    """Leaf Array from nested lists / ndarray, copied to a known dtype."""
    return Array(np.array(data, dtype=dtype))


def zeros(shape, dtype=np.float64) -> Array:
    return Array(np.zeros(shape, dtype=dtype))


def _make(op: str, out_data: np.ndarray, inputs: tuple[Array, ...], bwd) -> Array:
    if _debug_checks and not np.all(np.isfinite(out_data)):
        raise EvaluationError(f"non-finite values in output of op '{op}'")
    node = Node(op, inputs, bwd)
    out = Array(out_data, node=node)
    node.output = out
    return out


class Tape:
    """Topologically ordered record of the nodes that produced a value.

    Every node's inputs precede it in ``nodes``; the backward traversal in
    :meth:`run_backward` therefore visits each node exactly once, in reverse.
    """

    def __init__(self, nodes: list[Node]):
        self.nodes = nodes

    @classmethod
    def trace(cls, root: Array) -> "Tape":
        nodes: list[Node] = []
        seen: set[int] = set()
        if root.node is None:
            return cls(nodes)
        stack: list[tuple[Node, bool]] = [(root.node, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                nodes.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for inp in node.inputs:
                if inp.node is not None and id(inp.node) not in seen:
                    stack.append((inp.node, False))
        return cls(nodes)

    def run_backward(self, root: Array, seed: np.ndarray | None = None) -> None:
        if seed is None:
            seed = np.ones(root.shape, dtype=root.data.dtype)
        root.grad = np.array(seed, dtype=root.data.dtype) if root.grad is None \
            else root.grad + seed
        for node in reversed(self.nodes):
            out = node.output
            if out is None or out.grad is None:
                continue
            grads = node.bwd(out.grad)
            for inp, g in zip(node.inputs, grads):
                if g is None:
                    continue
                if inp.grad is None:
                    inp.grad = np.array(g, dtype=inp.data.dtype, copy=True)
                else:
                    inp.grad += g


def backward(root: Array, seed: np.ndarray | None = None) -> None:
    """Reverse-mode pass from a (normally scalar) root into leaf .grad buffers."""
    Tape.trace(root).run_backward(root, seed)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to the shape of an operand that was broadcast up."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# structural / arithmetic ops
# ---------------------------------------------------------------------------

def matmul(a: Array, b: Array) -> Array:
    """Matrix product over the last two axes; leading axes broadcast.

    Backward: dA = dC @ B^T, dB = A^T @ dC (summed over broadcast axes).
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bwd(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make("matmul", out, (a, b), bwd)


def add(a: Array, b: Array) -> Array:
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return _make("add", a.data + b.data, (a, b), lambda g: (g, g))


def add_vec(x: Array, v: Array) -> Array:
    """Add a rank-1 vector along the last axis of x (bias add)."""
    if v.ndim != 1 or v.shape[0] != x.shape[-1]:
        raise ShapeError(f"add_vec: vector {v.shape} does not match last axis of {x.shape}")
    out = x.data + v.data

    def bwd(g):
        return g, g.reshape(-1, v.shape[0]).sum(axis=0)

    return _make("add_vec", out, (x, v), bwd)


def scale(x: Array, c: float) -> Array:
    c = float(c)
    return _make("scale", x.data * c, (x,), lambda g: (g * c,))


def transpose(x: Array) -> Array:
    """Swap the last two axes."""
    if x.ndim < 2:
        raise ShapeError(f"transpose: need rank >= 2, got shape {x.shape}")
    return _make("transpose", np.swapaxes(x.data, -1, -2), (x,),
                 lambda g: (np.swapaxes(g, -1, -2),))


def reshape(x: Array, shape) -> Array:
    old = x.shape
    return _make("reshape", x.data.reshape(shape), (x,),
                 lambda g: (g.reshape(old),))


def concat_lastaxis(parts: Sequence[Array]) -> Array:
    if not parts:
        raise ShapeError("concat_lastaxis: empty input list")
    lead = parts[0].shape[:-1]
    for p in parts:
        if p.shape[:-1] != lead:
            raise ShapeError(f"concat_lastaxis: leading shapes differ: "
                             f"{p.shape} vs {parts[0].shape}")
    out = np.concatenate([p.data for p in parts], axis=-1)
    splits = np.cumsum([p.shape[-1] for p in parts])[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=-1))

    return _make("concat_lastaxis", out, tuple(parts), bwd)


def slice_lastaxis(x: Array, start: int, stop: int) -> Array:
    if not (0 <= start < stop <= x.shape[-1]):
        raise ShapeError(f"slice_lastaxis: [{start}:{stop}] out of range for {x.shape}")
    out = x.data[..., start:stop].copy()

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[..., start:stop] = g
        return (gx,)

    return _make("slice_lastaxis", out, (x,), bwd)


def slice_rows(x: Array, start: int, stop: int) -> Array:
    """Slice along the row axis (second-to-last)."""
    if x.ndim < 2:
        raise ShapeError(f"slice_rows: need rank >= 2, got shape {x.shape}")
    if not (0 <= start < stop <= x.shape[-2]):
        raise ShapeError(f"slice_rows: [{start}:{stop}] out of range for {x.shape}")
    out = x.data[..., start:stop, :].copy()

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[..., start:stop, :] = g
        return (gx,)

    return _make("slice_rows", out, (x,), bwd)


def stack_axis0(parts: Sequence[Array]) -> Array:
    if not parts:
        raise ShapeError("stack_axis0: empty input list")
    for p in parts:
        if p.shape != parts[0].shape:
            raise ShapeError(f"stack_axis0: shape mismatch {p.shape} vs {parts[0].shape}")
    out = np.stack([p.data for p in parts], axis=0)

    def bwd(g):
        return tuple(g[i] for i in range(len(parts)))

    return _make("stack_axis0", out, tuple(parts), bwd)


# ---------------------------------------------------------------------------
# nonlinear ops
# ---------------------------------------------------------------------------

def softmax_lastaxis(x: Array) -> Array:
    """Stable softmax along the last axis (max-subtracted)."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - inner),)

    return _make("softmax_lastaxis", y, (x,), bwd)


def max_over_axis0(theta: Array) -> Array:
    """Element-wise max over the layer axis (axis 0).

    Ties break toward the lowest layer index; the backward pass routes the
    incoming gradient solely to the argmax element (subgradient convention).
    """
    if theta.ndim < 1 or theta.shape[0] < 1:
        raise ShapeError(f"max_over_axis0: need a nonempty axis 0, got {theta.shape}")
    idx = np.argmax(theta.data, axis=0)  # first occurrence == lowest layer
    out = np.take_along_axis(theta.data, idx[None, ...], axis=0)[0]

    def bwd(g):
        gt = np.zeros_like(theta.data)
        np.put_along_axis(gt, idx[None, ...], g[None, ...], axis=0)
        return (gt,)

    return _make("max_over_axis0", out, (theta,), bwd)


def mean_over_axis0(theta: Array) -> Array:
    """Arithmetic mean over the layer axis; backward spreads grad/k uniformly."""
    if theta.ndim < 1 or theta.shape[0] < 1:
        raise ShapeError(f"mean_over_axis0: need a nonempty axis 0, got {theta.shape}")
    k = theta.shape[0]
    out = theta.data.mean(axis=0)

    def bwd(g):
        return (np.broadcast_to(g / k, theta.data.shape).copy(),)

    return _make("mean_over_axis0", out, (theta,), bwd)


def select_max_norm_axis0(theta: Array) -> Array:
    """Per position, keep the axis-0 slice whose vector has the largest L2 norm.

    theta is (k, ..., d); for each (...) position the full d-vector of the
    winning layer is copied through. Ties break toward the highest index
    (deepest layer). Backward routes the gradient to the selected vectors.
    """
    if theta.ndim < 2 or theta.shape[0] < 1:
        raise ShapeError(f"select_max_norm_axis0: need shape (k, ..., d), got {theta.shape}")
    k = theta.shape[0]
    norms = np.sqrt((theta.data ** 2).sum(axis=-1))       # (k, ...)
    idx = (k - 1) - np.argmax(norms[::-1], axis=0)        # ties -> deepest
    idx_full = np.broadcast_to(idx[None, ..., None], (1,) + theta.shape[1:])
    out = np.take_along_axis(theta.data, idx_full, axis=0)[0]

    def bwd(g):
        gt = np.zeros_like(theta.data)
        np.put_along_axis(gt, idx_full.copy(), g[None, ...], axis=0)
        return (gt,)

    return _make("select_max_norm_axis0", out, (theta,), bwd)


def layer_norm(x: Array, gain: Array, bias: Array) -> Array:
    """Per-row zero-mean unit-variance normalization, then affine.

    Epsilon sits inside the square root, so a constant row maps to the bias.
    """
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias {gain.shape}/{bias.shape} "
                         f"do not match last axis of {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    xhat = centered * inv
    out = xhat * gain.data + bias.data

    def bwd(g):
        gy = g * gain.data
        # dx = (gy - mean(gy) - xhat * mean(gy * xhat)) / sqrt(var + eps)
        gx = (gy - gy.mean(axis=-1, keepdims=True)
              - xhat * (gy * xhat).mean(axis=-1, keepdims=True)) * inv
        ggain = (g * xhat).reshape(-1, d).sum(axis=0)
        gbias = g.reshape(-1, d).sum(axis=0)
        return gx, ggain, gbias

    return _make("layer_norm", out, (x, gain, bias), bwd)


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(x: Array) -> Array:
    """Tanh-form GELU; the backward is the exact derivative of this form."""
    u = _GELU_C * (x.data + _GELU_A * x.data ** 3)
    t = np.tanh(u)
    out = 0.5 * x.data * (1.0 + t)

    def bwd(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * x.data ** 2)
        dy = 0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t ** 2) * du
        return (g * dy,)

    return _make("gelu", out, (x,), bwd)


def dropout(x: Array, p: float, rng: np.random.Generator) -> Array:
    """Inverted dropout; identity when p == 0. Mask drawn from rng."""
    if p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    return _make("dropout", x.data * keep, (x,), lambda g: (g * keep,))


def mask_rows(x: Array, mask: np.ndarray) -> Array:
    """Zero out rows where mask == 0. mask has the shape of x minus the last axis."""
    m = np.asarray(mask, dtype=x.data.dtype)
    if m.shape != x.shape[:-1]:
        raise ShapeError(f"mask_rows: mask {m.shape} does not match rows of {x.shape}")
    m = m[..., None]
    return _make("mask_rows", x.data * m, (x,), lambda g: (g * m,))


def mask_scores(scores: Array, mask: np.ndarray) -> Array:
    """Add a large negative penalty to attention scores at masked-out keys.

    scores is (..., q, T); mask is (..., T) over the key axis and broadcasts
    across queries. The penalty is constant, so the backward is the identity.
    """
    m = np.asarray(mask, dtype=scores.data.dtype)
    if m.shape == scores.shape[:-2] + (scores.shape[-1],):
        m = m[..., None, :]
    elif m.shape != scores.shape:
        raise ShapeError(f"mask_scores: mask {mask.shape} does not fit scores {scores.shape}")
    penalty = (1.0 - m) * MASK_PENALTY
    return _make("mask_scores", scores.data + penalty, (scores,), lambda g: (g,))


def embed_lookup(table: Array, ids: np.ndarray) -> Array:
    """Gather rows of an embedding table; backward scatter-adds into the table."""
    ids = np.asarray(ids)
    out = table.data[ids]

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _make("embed_lookup", out, (table,), bwd)


def sum_all(x: Array) -> Array:
    out = np.asarray(x.data.sum(), dtype=x.data.dtype)
    return _make("sum_all", out, (x,),
                 lambda g: (np.full(x.shape, g, dtype=x.data.dtype),))


# ---------------------------------------------------------------------------
# fused losses
# ---------------------------------------------------------------------------

def cross_entropy_mean(logits: Array, labels: np.ndarray) -> Array:
    """Mean of -log softmax(logits)[label] over all leading positions.

    logits is (..., C), labels an int array of the leading shape. Stabilized
    with max subtraction; backward is (softmax - onehot) / n.
    """
    n_classes = logits.shape[-1]
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    flat = logits.data.reshape(-1, n_classes)
    if labels.shape[0] != flat.shape[0]:
        raise ShapeError(f"cross_entropy_mean: {labels.shape[0]} labels for "
                         f"{flat.shape[0]} rows of logits {logits.shape}")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError(f"cross_entropy_mean: label out of range [0, {n_classes})")
    shifted = flat - flat.max(axis=-1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logsumexp
    rows = np.arange(flat.shape[0])
    out = np.asarray(-logp[rows, labels].mean(), dtype=logits.data.dtype)

    def bwd(g):
        gl = np.exp(logp)
        gl[rows, labels] -= 1.0
        gl *= g / flat.shape[0]
        return (gl.reshape(logits.shape),)

    return _make("cross_entropy_mean", out, (logits,), bwd)


def squared_error_mean(preds: Array, targets: np.ndarray) -> Array:
    """Mean squared error of flattened predictions against constant targets."""
    t = np.asarray(targets, dtype=preds.data.dtype).reshape(-1)
    p = preds.data.reshape(-1)
    if p.shape != t.shape:
        raise ShapeError(f"squared_error_mean: {p.shape[0]} preds vs {t.shape[0]} targets")
    diff = p - t
    out = np.asarray((diff ** 2).mean(), dtype=preds.data.dtype)

    def bwd(g):
        return ((2.0 * diff / p.shape[0] * g).reshape(preds.shape),)

    return _make("squared_error_mean", out, (preds,), bwd)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(f: Callable[[], Array], params: Sequence[Array],
               step: float = 1e-5, max_coords_per_param: int | None = None,
               rng: np.random.Generator | None = None) -> float:
    """Compare reverse-mode gradients of f() against central differences.

    Returns max over checked coordinates of |a - n| / max(1e-8, |a| + |n|).
    Meaningful only on float64 parameters. When max_coords_per_param is set,
    a random subset of coordinates per parameter is probed (seeded via rng).
    """
    if rng is None:
        rng = np.random.default_rng(0)

    for p in params:
        p.zero_grad()
    out = f()
    if out.size != 1:
        raise ShapeError(f"grad_check: f must be scalar-valued, got shape {out.shape}")
    if not np.isfinite(out.data).all():
        raise EvaluationError("grad_check: f evaluated to a non-finite value")
    backward(out)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy()
                for p in params]

    def eval_scalar() -> float:
        val = f()
        v = float(val.data)
        if not math.isfinite(v):
            raise EvaluationError("grad_check: f evaluated to a non-finite value")
        return v

    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        n_coords = flat.shape[0]
        if max_coords_per_param is not None and n_coords > max_coords_per_param:
            coords = rng.choice(n_coords, size=max_coords_per_param, replace=False)
        else:
            coords = range(n_coords)
        a_flat = a.reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + step
            f_plus = eval_scalar()
            flat[i] = orig - step
            f_minus = eval_scalar()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            denom = max(1e-8, abs(a_flat[i]) + abs(numeric))
            worst = max(worst, abs(a_flat[i] - numeric) / denom)
    return worst
