"""Dense-tensor numerics with a reverse-mode tape.

numpy holds the values; each op records its parents and a backward
closure on the active :class:`Tape`. There is deliberately no autograd
graph without a tape: calling ops outside a ``with Tape()`` block is
plain (and faster) numpy. Fused ops (rms_norm, causal_attn,
cross_entropy_mean, ...) keep the op count per transformer block small
enough that finite-difference sweeps over every parameter stay cheap.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, NonFiniteError, ShapeError

_ACTIVE_TAPE: "Tape | None" = None
_CHECK_FINITE = True


def set_check_finite(enabled: bool) -> bool:
    """Toggle per-op finiteness asserts; returns the previous setting."""
    global _CHECK_FINITE
    previous = _CHECK_FINITE
    _CHECK_FINITE = enabled
    return previous


class Tensor:
    """Immutable dense array, optionally recorded on the active tape."""

    __slots__ = ("data", "parents", "backward_fn", "detached")

    def __init__(self, data, dtype=None, detached=False):
        self.data = np.asarray(data, dtype=dtype)
        self.parents: tuple = ()
        self.backward_fn = None
        self.detached = detached

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """Value-identical tensor with no tape parents."""
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.parents = ()
        out.backward_fn = None
        out.detached = True
        if _ACTIVE_TAPE is not None:
            _ACTIVE_TAPE.nodes.append(out)
        return out

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

    # arithmetic sugar; heavy lifting lives in the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of op results; creation order is topological."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise ContractError("nested tapes are not supported")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE


def _wrap(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(data: np.ndarray, parents, backward_fn) -> Tensor:
    if _CHECK_FINITE and not np.all(np.isfinite(data)):
        raise NonFiniteError("op produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.detached = False
    if _ACTIVE_TAPE is not None:
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
        _ACTIVE_TAPE.nodes.append(out)
    else:
        out.parents = ()
        out.backward_fn = None
    return out


def backward(loss: Tensor, tape: Tape) -> dict:
    """Reverse accumulation from a scalar loss over the tape.

    Returns a map from tensor (node) to its gradient array; leaves such
    as parameters appear in the map once some recorded op touches them.
    """
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.data.shape}")
    grads: dict = {loss: np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        grad = grads.get(node)
        if grad is None or node.backward_fn is None:
            continue
        parent_grads = node.backward_fn(grad)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None:
                continue
            acc = grads.get(parent)
            grads[parent] = pg if acc is None else acc + pg
    return grads


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad down to `shape` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise / structural ops


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data + b.data
    return _make(data, (a, b), lambda g: (_unbroadcast(g, a.data.shape),
                                          _unbroadcast(g, b.data.shape)))


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data - b.data
    return _make(data, (a, b), lambda g: (_unbroadcast(g, a.data.shape),
                                          _unbroadcast(-g, b.data.shape)))


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        return scale(a, b)
    a, b = _wrap(a), _wrap(b)
    data = a.data * b.data
    return _make(data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.data.shape),
                            _unbroadcast(g * a.data, b.data.shape)))


def scale(a, factor: float) -> Tensor:
    a = _wrap(a)
    return _make(a.data * factor, (a,), lambda g: (g * factor,))


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.shape[-1] != b.data.shape[-2 if b.data.ndim > 1 else 0]:
        raise ShapeError(f"matmul inner extents differ: {a.data.shape} @ {b.data.shape}")
    data = a.data @ b.data

    def bwd(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape)
        return ga, gb

    return _make(data, (a, b), bwd)


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    old = a.data.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes) -> Tensor:
    a = _wrap(a)
    inverse = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,),
                 lambda g: (g.transpose(inverse),))


def concat_last(a, b) -> Tensor:
    """Concatenate along the last axis (the [state ; injected] join)."""
    a, b = _wrap(a), _wrap(b)
    cut = a.data.shape[-1]
    data = np.concatenate([a.data, b.data], axis=-1)
    return _make(data, (a, b), lambda g: (g[..., :cut], g[..., cut:]))


def tsum(a) -> Tensor:
    a = _wrap(a)
    shape = a.data.shape
    return _make(np.asarray(a.data.sum()), (a,),
                 lambda g: (np.broadcast_to(g, shape).copy(),))


def tmean(a) -> Tensor:
    a = _wrap(a)
    shape, size = a.data.shape, a.data.size
    return _make(np.asarray(a.data.mean()), (a,),
                 lambda g: (np.broadcast_to(g / size, shape).copy(),))


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    data = table.data[ids]

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _make(data, (table,), bwd)


# ---------------------------------------------------------------------------
# fused neural-net ops


def rms_norm(x, gain, eps: float) -> Tensor:
    """y = x / rms(x) * gain over the last axis."""
    x, gain = _wrap(x), _wrap(gain)
    inv = 1.0 / np.sqrt(np.mean(x.data ** 2, axis=-1, keepdims=True) + eps)
    data = x.data * inv * gain.data

    def bwd(g):
        u = g * gain.data
        gx = inv * u - x.data * inv ** 3 * np.mean(x.data * u, axis=-1,
                                                   keepdims=True)
        ggain = _unbroadcast(g * x.data * inv, gain.data.shape)
        return gx, ggain

    return _make(data, (x, gain), bwd)


def silu_glu(gate, up) -> Tensor:
    """SwiGLU activation: silu(gate) * up."""
    gate, up = _wrap(gate), _wrap(up)
    sig = 1.0 / (1.0 + np.exp(-gate.data))
    s = gate.data * sig
    data = s * up.data

    def bwd(g):
        dsig = sig * (1.0 + gate.data * (1.0 - sig))
        return g * up.data * dsig, g * s

    return _make(data, (gate, up), bwd)


def split_heads(x, n_heads: int, head_dim: int) -> Tensor:
    """(B, n, H*d) -> (B, H, n, d)."""
    x = _wrap(x)
    b, n, _ = x.data.shape
    data = x.data.reshape(b, n, n_heads, head_dim).transpose(0, 2, 1, 3)
    return _make(data, (x,),
                 lambda g: (g.transpose(0, 2, 1, 3).reshape(b, n, -1),))


def merge_heads(x) -> Tensor:
    """(B, H, n, d) -> (B, n, H*d)."""
    x = _wrap(x)
    b, h, n, d = x.data.shape
    data = x.data.transpose(0, 2, 1, 3).reshape(b, n, h * d)
    return _make(data, (x,),
                 lambda g: (g.reshape(b, n, h, d).transpose(0, 2, 1, 3),))


def expand_kv(x, groups: int) -> Tensor:
    """Repeat kv heads so each query-head group sees its kv head."""
    x = _wrap(x)
    if groups == 1:
        return x
    b, hk, n, d = x.data.shape
    data = np.repeat(x.data, groups, axis=1)
    return _make(data, (x,),
                 lambda g: (g.reshape(b, hk, groups, n, d).sum(axis=2),))


def rope_rotate(x, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotary position embedding on (B, H, n, d); cos/sin are (n, d/2)."""
    x = _wrap(x)
    half = x.data.shape[-1] // 2
    x1, x2 = x.data[..., :half], x.data[..., half:]
    data = np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)

    def bwd(g):
        g1, g2 = g[..., :half], g[..., half:]
        return (np.concatenate([g1 * cos + g2 * sin,
                                -g1 * sin + g2 * cos], axis=-1),)

    return _make(data, (x,), bwd)


def causal_attn(q, k, v, att_scale: float) -> Tensor:
    """softmax(q kᵀ · scale + causal mask) v over (B, H, n, d) inputs."""
    q, k, v = _wrap(q), _wrap(k), _wrap(v)
    n = q.data.shape[-2]
    scores = (q.data @ np.swapaxes(k.data, -1, -2)) * att_scale
    mask = np.triu(np.ones((n, n), dtype=bool), k=1)
    scores = np.where(mask, -np.inf, scores)
    scores -= scores.max(axis=-1, keepdims=True)
    attn = np.exp(scores)
    attn /= attn.sum(axis=-1, keepdims=True)
    data = attn @ v.data

    def bwd(g):
        d_attn = g @ np.swapaxes(v.data, -1, -2)
        gv = np.swapaxes(attn, -1, -2) @ g
        d_scores = attn * (d_attn - (d_attn * attn).sum(axis=-1, keepdims=True))
        d_scores *= att_scale
        gq = d_scores @ k.data
        gk = np.swapaxes(d_scores, -1, -2) @ q.data
        return gq, gk, gv

    return _make(data, (q, k, v), bwd)


def cross_entropy_mean(logits, targets: np.ndarray,
                       mask: np.ndarray | None = None) -> Tensor:
    """Mean next-token cross entropy; `mask` selects counted positions."""
    logits = _wrap(logits)
    targets = np.asarray(targets)
    zmax = logits.data.max(axis=-1, keepdims=True)
    exp = np.exp(logits.data - zmax)
    lse = np.log(exp.sum(axis=-1)) + zmax[..., 0]
    picked = np.take_along_axis(logits.data, targets[..., None], axis=-1)[..., 0]
    per_token = lse - picked
    if mask is None:
        count = per_token.size
        loss = per_token.sum() / count
    else:
        count = max(int(mask.sum()), 1)
        loss = (per_token * mask).sum() / count

    def bwd(g):
        probs = exp / exp.sum(axis=-1, keepdims=True)
        np.subtract.at(probs, (*np.indices(targets.shape), targets), 1.0)
        if mask is not None:
            probs = probs * mask[..., None]
        return (probs * (g / count),)

    return _make(np.asarray(loss), (logits,), bwd)


def draw_normal(stream, shape, mean: float, std: float,
                dtype=np.float64) -> Tensor:
    """i.i.d. normal leaf tensor from a deterministic stream."""
    return Tensor(stream.normal(shape, mean, std, dtype=dtype))


def softmax_probs(logits: np.ndarray) -> np.ndarray:
    """Value-mode softmax helper (no tape)."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)
