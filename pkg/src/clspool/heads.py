"""Aggregation heads: interchangeable strategies mapping a layer stack to logits.

Six kinds are supported, named by what they pool:

* ``baseline``      - final-layer [CLS] straight into the classifier
* ``maxcls``        - element-wise max over the [CLS] vectors of the last k layers
* ``mha``           - extra multi-head attention layer, final [CLS] as the query
                      over the whole final layer
* ``maxseq+mha``    - max-pool whole sequences of the last k layers, then the
                      extra attention layer over the pooled sequence
* ``meanseq+mha``   - same with mean pooling
* ``normseq+mha``   - same, but per position keep the layer vector with the
                      largest L2 norm instead of the element-wise max

Every head ends in a plain linear classifier (no activation). The extra
attention layer has no residual, layer norm, bias, or feed-forward: it is a
bare attention block so the comparison between kinds stays clean.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import arraycore as ac
from .arraycore import Array
from .encoder import LayerStack, cls_of

__all__ = [
    "HeadKind",
    "HeadParams",
    "ConfigurationError",
    "SliceError",
    "VALID_HEAD_KINDS",
    "parse_head_spec",
    "xavier_uniform_init",
    "init_head_params",
    "theta",
    "head_baseline",
    "head_max_cls",
    "cls_attend",
    "head_mha",
    "head_max_seq_mha",
    "head_mean_seq_mha",
    "head_norm_select_seq_mha",
    "classify",
    "head_forward",
]

VALID_HEAD_KINDS = ("baseline", "maxcls", "mha", "maxseq+mha", "meanseq+mha",
                    "normseq+mha")
DEFAULT_K = 3
DEFAULT_NUM_HEADS = 4

_POOLED_KINDS = ("maxseq+mha", "meanseq+mha", "normseq+mha")
_MHA_KINDS = ("mha",) + _POOLED_KINDS


class ConfigurationError(ValueError):
    """Head kind and parameters (or spec string) do not line up."""


class SliceError(ValueError):
    """Requested layer/token slice exceeds the stack."""


@dataclass(frozen=True)
class HeadKind:
    kind: str
    k: int = DEFAULT_K
    num_heads: int = DEFAULT_NUM_HEADS

    def __post_init__(self):
        if self.kind not in VALID_HEAD_KINDS:
            raise ConfigurationError(
                f"unknown head kind '{self.kind}'; valid kinds: "
                + ", ".join(VALID_HEAD_KINDS))
        if self.k < 1:
            raise ConfigurationError(f"head kind '{self.kind}': k must be >= 1, got {self.k}")
        if self.num_heads < 1:
            raise ConfigurationError(
                f"head kind '{self.kind}': num_heads must be >= 1, got {self.num_heads}")

    @property
    def uses_attention(self) -> bool:
        return self.kind in _MHA_KINDS

    @property
    def uses_depth(self) -> bool:
        return self.kind in ("maxcls",) + _POOLED_KINDS

    def spec(self) -> str:
        """Short string form usable on the command line."""
        if self.kind == "baseline":
            return "baseline"
        if self.kind == "maxcls":
            return f"maxcls:k={self.k}"
        if self.kind == "mha":
            return f"mha:h={self.num_heads}"
        return f"{self.kind}:k={self.k},h={self.num_heads}"


def parse_head_spec(spec: str) -> HeadKind:
    """Parse strings like 'maxseq+mha:k=3,h=4' into a HeadKind."""
    name, _, argstr = spec.strip().partition(":")
    if name not in VALID_HEAD_KINDS:
        raise ConfigurationError(
            f"unknown head kind '{name}'; valid kinds: " + ", ".join(VALID_HEAD_KINDS))
    kwargs = {}
    if argstr:
        for part in argstr.split(","):
            key, _, value = part.partition("=")
            key = key.strip()
            try:
                number = int(value)
            except ValueError:
                raise ConfigurationError(f"head spec '{spec}': bad value in '{part}'")
            if key == "k":
                kwargs["k"] = number
            elif key == "h":
                kwargs["num_heads"] = number
            else:
                raise ConfigurationError(f"head spec '{spec}': unknown argument '{key}'")
    if name == "baseline" and kwargs:
        raise ConfigurationError("head spec 'baseline' takes no arguments")
    if name == "maxcls" and "num_heads" in kwargs:
        raise ConfigurationError("head spec 'maxcls' takes no h argument")
    if name == "mha" and "k" in kwargs:
        raise ConfigurationError("head spec 'mha' takes no k argument")
    return HeadKind(kind=name, **kwargs)


@dataclass
class HeadParams:
    """Attention projections (present only for mha-style kinds) + classifier.

    wq/wk/wv/wo are d x d; the per-head d x (d/h) projections are the column
    blocks of wq/wk/wv. The classifier is linear with no activation after it.
    """

    w_cls: Array
    b_cls: Array
    wq: Array | None = None
    wk: Array | None = None
    wv: Array | None = None
    wo: Array | None = None

    def named_parameters(self):
        for name in ("wq", "wk", "wv", "wo"):
            p = getattr(self, name)
            if p is not None:
                yield f"head.{name}", p
        yield "head.w_cls", self.w_cls
        yield "head.b_cls", self.b_cls


def xavier_uniform_init(rows: int, cols: int, rng: np.random.Generator,
                        dtype=np.float64) -> Array:
    """Uniform on [-a, a] with a = sqrt(6 / (rows + cols))."""
    if rows < 1 or cols < 1:
        raise ValueError("xavier_uniform_init: extents must be positive")
    a = np.sqrt(6.0 / (rows + cols))
    return Array(rng.uniform(-a, a, size=(rows, cols)).astype(dtype))


def init_head_params(kind: HeadKind, d_model: int, n_classes: int,
                     rng: np.random.Generator, dtype=np.float64) -> HeadParams:
    """Fresh head parameters; attention weights Xavier-uniform, zero classifier bias."""
    if kind.uses_attention and d_model % kind.num_heads != 0:
        raise ConfigurationError(
            f"head '{kind.spec()}': num_heads {kind.num_heads} does not divide "
            f"d_model {d_model}")
    params = HeadParams(
        w_cls=xavier_uniform_init(d_model, n_classes, rng, dtype),
        b_cls=Array(np.zeros(n_classes, dtype=dtype)),
    )
    if kind.uses_attention:
        params.wq = xavier_uniform_init(d_model, d_model, rng, dtype)
        params.wk = xavier_uniform_init(d_model, d_model, rng, dtype)
        params.wv = xavier_uniform_init(d_model, d_model, rng, dtype)
        params.wo = xavier_uniform_init(d_model, d_model, rng, dtype)
    return params


def theta(stack: LayerStack, k: int, t: int) -> Array:
    """The (k, ..., t, d) tensor of the first t token vectors of the last k layers.

    Layer order is preserved: axis 0 runs oldest-to-deepest of the slice.
    """
    n = stack.num_layers
    seq = stack.seq_len
    if not 1 <= k <= n:
        raise SliceError(f"theta: k={k} out of range [1, {n}]")
    if not 1 <= t <= seq:
        raise SliceError(f"theta: t={t} out of range [1, {seq}]")
    return ac.stack_axis0([ac.slice_rows(y, 0, t) for y in stack.activations[n - k:]])


def head_baseline(stack: LayerStack) -> Array:
    """Final-layer [CLS] vector, unchanged."""
    return cls_of(stack, stack.num_layers)


def head_max_cls(stack: LayerStack, k: int) -> Array:
    """Element-wise max over the last k layers' [CLS] vectors."""
    return ac.max_over_axis0(theta(stack, k, 1))


def cls_attend(query_cls: Array, context: Array, params: HeadParams,
               mask: np.ndarray, num_heads: int = DEFAULT_NUM_HEADS,
               return_weights: bool = False):
    """One multi-head attention step with a single query row.

    No residual, no layer norm, no activation afterward: heads are
    concatenated and projected by wo, and that is the output.
    """
    if params.wq is None or params.wk is None or params.wv is None or params.wo is None:
        raise ConfigurationError("cls_attend: head params carry no attention projections")
    d = context.shape[-1]
    if d % num_heads != 0:
        raise ConfigurationError(f"cls_attend: num_heads {num_heads} does not divide d {d}")
    dh = d // num_heads
    inv_scale = 1.0 / np.sqrt(dh)
    q = ac.matmul(query_cls, params.wq)
    k = ac.matmul(context, params.wk)
    v = ac.matmul(context, params.wv)
    outs, weights = [], []
    for s in range(num_heads):
        lo, hi = s * dh, (s + 1) * dh
        scores = ac.matmul(ac.slice_lastaxis(q, lo, hi),
                           ac.transpose(ac.slice_lastaxis(k, lo, hi)))
        scores = ac.mask_scores(ac.scale(scores, inv_scale), mask)
        attn = ac.softmax_lastaxis(scores)
        weights.append(attn.data)
        outs.append(ac.matmul(attn, ac.slice_lastaxis(v, lo, hi)))
    out = ac.matmul(ac.concat_lastaxis(outs), params.wo)
    if return_weights:
        return out, weights
    return out


def head_mha(stack: LayerStack, params: HeadParams, mask: np.ndarray | None = None,
             num_heads: int = DEFAULT_NUM_HEADS) -> Array:
    """Final [CLS] queries the whole final layer through the extra attention."""
    mask = stack.mask if mask is None else mask
    return cls_attend(head_baseline(stack), stack.activations[-1], params, mask,
                      num_heads)


def _pooled_seq_mha(stack: LayerStack, k: int, params: HeadParams,
                    mask: np.ndarray | None, num_heads: int, pool) -> Array:
    mask = stack.mask if mask is None else mask
    pooled = pool(theta(stack, k, stack.seq_len))
    query = ac.slice_rows(pooled, 0, 1)  # the pooled [CLS] slot
    return cls_attend(query, pooled, params, mask, num_heads)


def head_max_seq_mha(stack: LayerStack, k: int, params: HeadParams,
                     mask: np.ndarray | None = None,
                     num_heads: int = DEFAULT_NUM_HEADS) -> Array:
    """Max-pool whole sequences of the last k layers, then attend over the pool."""
    return _pooled_seq_mha(stack, k, params, mask, num_heads, ac.max_over_axis0)


def head_mean_seq_mha(stack: LayerStack, k: int, params: HeadParams,
                      mask: np.ndarray | None = None,
                      num_heads: int = DEFAULT_NUM_HEADS) -> Array:
    """Mean-pool variant of head_max_seq_mha."""
    return _pooled_seq_mha(stack, k, params, mask, num_heads, ac.mean_over_axis0)


def head_norm_select_seq_mha(stack: LayerStack, k: int, params: HeadParams,
                             mask: np.ndarray | None = None,
                             num_heads: int = DEFAULT_NUM_HEADS) -> Array:
    """Per position keep the layer vector with the largest L2 norm, then attend."""
    return _pooled_seq_mha(stack, k, params, mask, num_heads, ac.select_max_norm_axis0)


def classify(rep: Array, w_cls: Array, b_cls: Array) -> Array:
    """Linear classification head; C = 1 covers regression tasks."""
    return ac.add_vec(ac.matmul(rep, w_cls), b_cls)


def head_forward(kind: HeadKind, stack: LayerStack, params: HeadParams,
                 mask: np.ndarray | None = None) -> Array:
    """Compose the kind-specific aggregation with the linear classifier."""
    if kind.uses_attention and params.wq is None:
        raise ConfigurationError(
            f"head '{kind.spec()}' needs attention projections but params carry none")
    if kind.kind == "baseline":
        rep = head_baseline(stack)
    elif kind.kind == "maxcls":
        rep = head_max_cls(stack, kind.k)
    elif kind.kind == "mha":
        rep = head_mha(stack, params, mask, kind.num_heads)
    elif kind.kind == "maxseq+mha":
        rep = head_max_seq_mha(stack, kind.k, params, mask, kind.num_heads)
    elif kind.kind == "meanseq+mha":
        rep = head_mean_seq_mha(stack, kind.k, params, mask, kind.num_heads)
    else:
        rep = head_norm_select_seq_mha(stack, kind.k, params, mask, kind.num_heads)
    return classify(rep, params.w_cls, params.b_cls)
