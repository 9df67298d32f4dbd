"""Dense rank-<=3 float64 tensors with tape-based reverse-mode autodiff.

Just enough of an engine for a toy decoder-only transformer: matmul
against rank-2 weights, batched rank-3 matmul for attention, token/feature
gathers and concats, softmax, layer norm, tanh-GELU, embedding lookup and
masked cross entropy.  Operations executed inside a ``with Tape() as t:``
block are recorded; ``backward(loss, t)`` replays the tape in reverse and
accumulates gradients into every participating tensor with
``requires_grad`` set.  Gradients add across backward calls; call
``Tensor.zero_grad`` (or reset the whole parameter set) between steps.

Everything is float64 and single-threaded by contract.  Tensors are plain
values; nothing here locks or shares hidden state beyond the active-tape
stack.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DegenerateLossError, NumericError, ShapeError

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


class Tensor:
    """Rank-<=3 float64 array with a gradient buffer of the same shape."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 3:
            raise ShapeError(f"rank {arr.ndim} > 3 not supported (shape {arr.shape})")
        self.data = np.ascontiguousarray(arr)
        self.grad = np.zeros_like(self.data)
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the value buffer."""
        return self.data.reshape(-1)

    @property
    def grad_values(self) -> np.ndarray:
        """Flat row-major view of the gradient buffer."""
        return self.grad.reshape(-1)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Tensor(shape={tuple(self.shape)}, requires_grad={self.requires_grad})"


class _TapeEntry:
    __slots__ = ("output", "inputs", "backward_fn")

    def __init__(self, output: Tensor, inputs: tuple, backward_fn: Callable):
        self.output = output
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of primitive operations, used for reverse traversal.

    Entries are appended in execution order, so the list is already a
    topological order of the computation.
    """

    def __init__(self):
        self.entries: list[_TapeEntry] = []

    def record(self, output: Tensor, inputs: tuple, backward_fn: Callable) -> None:
        self.entries.append(_TapeEntry(output, inputs, backward_fn))

    def __len__(self) -> int:
        return len(self.entries)

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self, "tape stack corrupted"


_TAPE_STACK: list[Tape] = []


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _make(data: np.ndarray, inputs: tuple, backward_fn: Callable) -> Tensor:
    """Wrap an op result, recording it when a tape is active and grads flow."""
    out = Tensor(data, requires_grad=any(t.requires_grad for t in inputs))
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        tape.record(out, inputs, backward_fn)
    return out


def backward(root: Tensor, tape: Tape) -> None:
    """Reverse-traverse the tape, accumulating d(root)/d(tensor) into .grad.

    root must be a scalar produced on the tape.  Gradients add into
    existing buffers: running backward twice doubles them.
    """
    if root.data.size != 1:
        raise ContractError(f"backward root must be scalar, got shape {root.shape}")
    produced = {id(e.output) for e in tape.entries}
    if id(root) not in produced:
        raise ContractError("backward root was not produced on this tape")

    # Pending gradients keyed by tensor identity; tape entries keep every
    # referenced tensor alive, so ids are stable for the traversal.
    pending: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    leaves: dict[int, Tensor] = {id(root): root}

    for entry in reversed(tape.entries):
        g_out = pending.pop(id(entry.output), None)
        if g_out is None:
            continue
        if entry.output.requires_grad:
            entry.output.grad += g_out
        for tensor, grad in entry.backward_fn(g_out):
            key = id(tensor)
            prev = pending.get(key)
            # Out-of-place add: backward_fn may hand back shared arrays.
            pending[key] = grad if prev is None else prev + grad
            leaves[key] = tensor

    for key, grad in pending.items():
        t = leaves[key]
        if t.requires_grad:
            t.grad += grad


# ---------------------------------------------------------------------------
# primitive operations
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise a + b; b may be rank-1 to broadcast a bias over the last axis."""
    if a.shape == b.shape:
        out_data = a.data + b.data

        def bw(g):
            grads = []
            if a.requires_grad:
                grads.append((a, g))
            if b.requires_grad:
                grads.append((b, g))
            return grads

    elif b.data.ndim == 1 and a.shape[-1] == b.shape[0]:
        out_data = a.data + b.data

        def bw(g):
            grads = []
            if a.requires_grad:
                grads.append((a, g))
            if b.requires_grad:
                axes = tuple(range(g.ndim - 1))
                grads.append((b, g.sum(axis=axes)))
            return grads

    else:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")
    return _make(out_data, (a, b), bw)


def affine_const(x: Tensor, scale: float = 1.0, shift=0.0) -> Tensor:
    """x * scale + shift with constant (non-differentiated) scale and shift.

    shift may be a float or an ndarray broadcastable to x (used for the
    additive causal mask and fixed positional encodings).
    """
    shift_arr = np.asarray(shift, dtype=np.float64)
    out_data = x.data * scale + shift_arr
    if out_data.shape != x.data.shape:
        raise ShapeError(
            f"affine_const: shift shape {shift_arr.shape} does not broadcast onto {x.shape}"
        )

    def bw(g):
        return [(x, g * scale)] if x.requires_grad else []

    return _make(out_data, (x,), bw)


def matmul(a: Tensor, w: Tensor) -> Tensor:
    """Matrix product of a (rank 2 or 3) with a rank-2 matrix w."""
    if w.data.ndim != 2 or a.data.ndim not in (2, 3) or a.shape[-1] != w.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {w.shape}")
    out_data = np.matmul(a.data, w.data)

    def bw(g):
        grads = []
        if a.requires_grad:
            grads.append((a, np.matmul(g, w.data.T)))
        if w.requires_grad:
            if a.data.ndim == 3:
                gw = np.tensordot(a.data, g, axes=([0, 1], [0, 1]))
            else:
                gw = a.data.T @ g
            grads.append((w, gw))
        return grads

    return _make(out_data, (a, w), bw)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product of two rank-3 tensors sharing the batch axis."""
    if (
        a.data.ndim != 3
        or b.data.ndim != 3
        or a.shape[0] != b.shape[0]
        or a.shape[2] != b.shape[1]
    ):
        raise ShapeError(f"bmm: incompatible shapes {a.shape} and {b.shape}")
    out_data = np.matmul(a.data, b.data)

    def bw(g):
        grads = []
        if a.requires_grad:
            grads.append((a, np.matmul(g, b.data.transpose(0, 2, 1))))
        if b.requires_grad:
            grads.append((b, np.matmul(a.data.transpose(0, 2, 1), g)))
        return grads

    return _make(out_data, (a, b), bw)


def transpose_last2(x: Tensor) -> Tensor:
    """Swap the last two axes (rank 2 or 3)."""
    if x.data.ndim < 2:
        raise ShapeError(f"transpose_last2 needs rank >= 2, got shape {x.shape}")
    axes = (1, 0) if x.data.ndim == 2 else (0, 2, 1)
    out_data = x.data.transpose(axes)

    def bw(g):
        return [(x, g.transpose(axes))] if x.requires_grad else []

    return _make(out_data, (x,), bw)


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    """Narrow the last (feature) axis to [start, stop)."""
    d = x.shape[-1]
    if not (0 <= start < stop <= d):
        raise ShapeError(f"slice_last: [{start}, {stop}) out of range for width {d}")
    out_data = x.data[..., start:stop]

    def bw(g):
        if not x.requires_grad:
            return []
        gx = np.zeros_like(x.data)
        gx[..., start:stop] = g
        return [(x, gx)]

    return _make(out_data, (x,), bw)


def _token_axis(x: Tensor) -> int:
    if x.data.ndim == 3:
        return 1
    if x.data.ndim == 2:
        return 0
    raise ShapeError(f"token-axis op needs rank 2 or 3, got shape {x.shape}")


def gather_tokens(x: Tensor, indices: Sequence[int]) -> Tensor:
    """Gather positions along the token axis (axis 0 of n x d, axis 1 of b x n x d).

    Backward scatters gradients to the gathered positions; everything else
    stays zero.
    """
    axis = _token_axis(x)
    idx = np.asarray(indices, dtype=np.intp)
    n = x.shape[axis]
    if idx.size == 0:
        raise IndexError("gather_tokens: empty index list")
    if idx.min() < 0 or idx.max() >= n:
        raise IndexError(f"gather_tokens: index out of range for length {n}")
    out_data = np.take(x.data, idx, axis=axis)

    def bw(g):
        if not x.requires_grad:
            return []
        gx = np.zeros_like(x.data)
        if axis == 0:
            np.add.at(gx, idx, g)
        else:
            # per-batch scatter keeps duplicate indices accumulating
            for b in range(x.shape[0]):
                np.add.at(gx[b], idx, g[b])
        return [(x, gx)]

    return _make(out_data, (x,), bw)


def concat_tokens(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the token axis."""
    if not parts:
        raise ShapeError("concat_tokens: no parts")
    axis = _token_axis(parts[0])
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]

    def bw(g):
        grads = []
        offset = 0
        for p, size in zip(parts, sizes):
            if p.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(offset, offset + size)
                grads.append((p, g[tuple(sl)]))
            offset += size
        return grads

    return _make(out_data, tuple(parts), bw)


def concat_last(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the last (feature) axis."""
    if not parts:
        raise ShapeError("concat_last: no parts")
    out_data = np.concatenate([p.data for p in parts], axis=-1)
    sizes = [p.shape[-1] for p in parts]

    def bw(g):
        grads = []
        offset = 0
        for p, size in zip(parts, sizes):
            if p.requires_grad:
                grads.append((p, g[..., offset : offset + size]))
            offset += size
        return grads

    return _make(out_data, tuple(parts), bw)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Row-major reshape."""
    shape = tuple(shape)
    if int(np.prod(shape)) != x.data.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    out_data = x.data.reshape(shape)

    def bw(g):
        return [(x, g.reshape(x.data.shape))] if x.requires_grad else []

    return _make(out_data, (x,), bw)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilized by max subtraction."""
    if np.isnan(x.data).any():
        raise NumericError("softmax: NaN in input")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        if not x.requires_grad:
            return []
        dot = (g * out_data).sum(axis=-1, keepdims=True)
        return [(x, (g - dot) * out_data)]

    return _make(out_data, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then apply gain and bias."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match width {d}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (x.data - mu) * inv
    out_data = y * gain.data + bias.data

    def bw(g):
        grads = []
        if x.requires_grad:
            dy = g * gain.data
            m1 = dy.mean(axis=-1, keepdims=True)
            m2 = (dy * y).mean(axis=-1, keepdims=True)
            grads.append((x, (dy - m1 - y * m2) * inv))
        lead = tuple(range(g.ndim - 1))
        if gain.requires_grad:
            grads.append((gain, (g * y).sum(axis=lead)))
        if bias.requires_grad:
            grads.append((bias, g.sum(axis=lead)))
        return grads

    return _make(out_data, (x, gain, bias), bw)


def gelu(x: Tensor) -> Tensor:
    """Elementwise GELU, tanh approximation."""
    u = _GELU_C * (x.data + _GELU_A * x.data**3)
    t = np.tanh(u)
    out_data = 0.5 * x.data * (1.0 + t)

    def bw(g):
        if not x.requires_grad:
            return []
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * x.data**2)
        dx = 0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t**2) * du
        return [(x, g * dx)]

    return _make(out_data, (x,), bw)


def gelu_scalar(v: float) -> float:
    """Scalar reference for the tanh-approximation GELU."""
    return 0.5 * v * (1.0 + math.tanh(_GELU_C * (v + _GELU_A * v**3)))


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of a V x d table; ids may be a flat list (n x d output)
    or a list of lists (b x n x d output).  Backward scatter-adds row
    gradients, so duplicate ids accumulate."""
    if table.data.ndim != 2:
        raise ShapeError(f"embedding_lookup: table must be rank 2, got {table.shape}")
    idx = np.asarray(ids, dtype=np.intp)
    if idx.ndim not in (1, 2):
        raise ShapeError(f"embedding_lookup: ids must be rank 1 or 2, got {idx.ndim}")
    vocab = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= vocab):
        raise IndexError(f"embedding_lookup: id out of range for vocab {vocab}")
    out_data = table.data[idx]

    def bw(g):
        if not table.requires_grad:
            return []
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        return [(table, gt)]

    return _make(out_data, (table,), bw)


def cross_entropy(logits: Tensor, targets: Sequence[int], ignore_mask: Sequence[bool]) -> Tensor:
    """Mean negative log-likelihood over positions where ignore_mask is False.

    logits is n x V; targets and ignore_mask have length n.  Raises when
    every position is ignored.
    """
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be rank 2, got {logits.shape}")
    n, vocab = logits.shape
    tgt = np.asarray(targets, dtype=np.intp)
    ign = np.asarray(ignore_mask, dtype=bool)
    if tgt.shape != (n,) or ign.shape != (n,):
        raise ShapeError(
            f"cross_entropy: got {len(tgt)} targets / {len(ign)} mask bits for {n} rows"
        )
    keep = ~ign
    m = int(keep.sum())
    if m == 0:
        raise DegenerateLossError("cross_entropy: every position is masked")
    if tgt[keep].min() < 0 or tgt[keep].max() >= vocab:
        raise IndexError(f"cross_entropy: target id out of range for vocab {vocab}")

    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1)) + logits.data.max(axis=-1)
    nll = logz - logits.data[np.arange(n), tgt]
    out_data = np.array(nll[keep].mean())

    def bw(g):
        if not logits.requires_grad:
            return []
        p = np.exp(shifted)
        p /= p.sum(axis=-1, keepdims=True)
        p[np.arange(n), tgt] -= 1.0
        p[ign] = 0.0
        return [(logits, p * (float(g) / m))]

    return _make(out_data, (logits,), bw)
