"""
Minimal reverse-mode automatic differentiation on top of numpy.

Every operation executed while a :class:`Tape` is active is recorded in
execution order (which is already a topological order), and every scalar
multiplication the operation performs is added to ``tape.mults``.  Only the
operations needed by the reconstructors are provided; none of them broadcast
implicitly, shape coercions (``add_bias``, ``reshape``, ``transpose``) are
explicit ops.

Counting rules
--------------
Each op adds its analytic multiplication count:

=================  ==============================================
matmul / bmm       ``batch * n * k * m``
conv2d             ``B * Ho * Wo * k * k * C * O``
mul, scale         one per output element
softmax            one per element (normalisation by 1/rowsum)
batch_norm         two per element (normalise, then gamma)
bilinear_resize    the two interpolation-matrix contractions
mse_loss           one per element (squares)
=================  ==============================================

Additions, ``exp``, ``erf`` and other elementwise nonlinearities are not
multiplications and are not counted.
"""
from __future__ import annotations

import math
from collections import Counter

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

__all__ = [
    "Tensor", "Tape", "NonFiniteError", "active_tape",
    "add", "sub", "mul", "scale", "add_bias", "matmul", "bmm",
    "transpose", "reshape", "gelu", "identity", "softmax_rows", "conv2d",
    "batch_norm", "bilinear_resize", "bilinear_matrix", "mse_loss",
    "sum_all", "space_to_depth", "depth_to_space", "save_checkpoint", "load_checkpoint",
]

_TAPES: list["Tape"] = []


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


def active_tape():
    return _TAPES[-1] if _TAPES else None


class Tensor:
    """Shaped array of reals with an optional gradient."""

    __slots__ = ("data", "requires_grad", "grad", "name", "tracked")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self.tracked = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


class Tape:
    """Records operations for reverse-mode replay and tallies multiplications.

    Use as a context manager::

        with Tape() as tape:
            loss = mse_loss(model(x), y)
        grads = tape.backward(loss)

    A tape is single-writer. ``backward`` does not consume the record, so it
    can be replayed; each call starts from fresh accumulators.
    """

    def __init__(self):
        self.records = []
        self.mults = 0
        self.by_kind = Counter()

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def count(self, kind, n):
        self.mults += int(n)
        self.by_kind[kind] += int(n)

    def backward(self, loss, params=None):
        """Gradients of scalar ``loss`` w.r.t. every leaf with ``requires_grad``.

        Parameters not connected to ``loss`` get a zero gradient rather than
        an error. Returns a dict keyed by tensor; ``.grad`` is also set.
        """
        if loss.size != 1:
            raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
        grads = {id(loss): np.ones_like(loss.data)}
        leaves = {}
        for out, inputs, fn in reversed(self.records):
            g = grads.get(id(out))
            if g is None:
                continue
            for t, gi in zip(inputs, fn(g)):
                if gi is None or not t.tracked:
                    continue
                if t.requires_grad:
                    leaves[id(t)] = t
                prev = grads.get(id(t))
                grads[id(t)] = gi if prev is None else prev + gi
        targets = list(params) if params is not None else list(leaves.values())
        result = {}
        for p in targets:
            g = grads.get(id(p))
            p.grad = np.zeros_like(p.data) if g is None else g.astype(p.dtype, copy=False)
            result[p] = p.grad
        return result


def _check_finite(data, kind):
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{kind} produced non-finite values")


def _emit(data, inputs, backward, kind, mults=0):
    _check_finite(data, kind)
    out = Tensor(data)
    tape = active_tape()
    if tape is not None:
        if mults:
            tape.count(kind, mults)
        if any(t.tracked for t in inputs):
            out.tracked = True
            tape.records.append((out, inputs, backward))
    return out


def _same_shape(a, b, kind):
    if a.shape != b.shape:
        raise ValueError(f"{kind}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b):
    _same_shape(a, b, "add")
    return _emit(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b):
    _same_shape(a, b, "sub")
    return _emit(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b):
    """Hadamard product."""
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _emit(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul", ad.size)


def scale(a, c):
    c = float(c)
    return _emit(a.data * c, (a,), lambda g: (g * c,), "scale", a.size)


def add_bias(x, b):
    """Add a vector along the last axis of ``x`` (the one explicit broadcast)."""
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ValueError(f"add_bias: bias {b.shape} does not match last axis of {x.shape}")
    lead = tuple(range(x.ndim - 1))
    return _emit(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=lead)), "add_bias")


def matmul(a, b):
    """``(..., n, k) @ (k, m) -> (..., n, m)``; the right operand is a 2D matrix."""
    if b.ndim != 2 or a.ndim < 2 or a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    k, m = bd.shape

    def backward(g):
        return g @ bd.T, ad.reshape(-1, k).T @ g.reshape(-1, m)

    return _emit(ad @ bd, (a, b), backward, "matmul", ad.size * m)


def bmm(a, b):
    """Batched ``(..., n, k) @ (..., k, m)`` with identical leading dims."""
    if a.ndim < 3 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"bmm: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _emit(ad @ bd, (a, b), backward, "bmm", ad.size * bd.shape[-1])


def transpose(x, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    data = np.ascontiguousarray(x.data.transpose(axes))
    return _emit(data, (x,), lambda g: (g.transpose(inv),), "transpose")


def reshape(x, shape):
    src = x.shape
    data = x.data.reshape(shape)
    return _emit(data, (x,), lambda g: (g.reshape(src),), "reshape")


def identity(x):
    return x


def gelu(x):
    """Exact (erf-based) GELU."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * xd * xd) / math.sqrt(2.0 * math.pi)
    return _emit(xd * cdf, (x,), lambda g: (g * (cdf + xd * pdf),), "gelu")


def softmax_rows(x):
    """Softmax over the last axis, max-subtracted for stability."""
    xd = x.data
    e = np.exp(xd - xd.max(axis=-1, keepdims=True))
    out = e * (1.0 / e.sum(axis=-1, keepdims=True))

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _emit(out, (x,), backward, "softmax", xd.size)


def conv2d_output_size(n, kernel, stride, padding):
    return (n + 2 * padding - kernel) // stride + 1


def conv2d(x, w, stride=1, padding=0):
    """2D cross-correlation of NHWC input with an HWIO kernel, zero padding."""
    if x.ndim != 4 or w.ndim != 4 or w.shape[0] != w.shape[1] or x.shape[3] != w.shape[2]:
        raise ValueError(f"conv2d: incompatible input {x.shape} and kernel {w.shape}")
    B, H, W, C = x.shape
    k, O = w.shape[0], w.shape[3]
    s, p = int(stride), int(padding)
    if k > H + 2 * p or k > W + 2 * p:
        raise ValueError(f"conv2d: kernel {k} larger than padded input {(H + 2 * p, W + 2 * p)}")
    Ho, Wo = conv2d_output_size(H, k, s, p), conv2d_output_size(W, k, s, p)
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (0, 0)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::s, ::s][:, :Ho, :Wo]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(B * Ho * Wo, k * k * C)
    wmat = w.data.reshape(k * k * C, O)
    out = (cols @ wmat).reshape(B, Ho, Wo, O)

    def backward(g):
        g2 = g.reshape(-1, O)
        gw = (cols.T @ g2).reshape(w.shape)
        gcols = (g2 @ wmat.T).reshape(B, Ho, Wo, k, k, C)
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                gxp[:, i:i + s * Ho:s, j:j + s * Wo:s, :] += gcols[:, :, :, i, j, :]
        return gxp[:, p:p + H, p:p + W, :], gw

    return _emit(out, (x, w), backward, "conv2d", B * Ho * Wo * k * k * C * O)


def batch_norm(x, gamma, beta, eps=1e-5, stats=None):
    """Per-feature normalisation over every axis but the last.

    With ``stats=None`` the batch statistics are used (training mode) and
    returned alongside the output as ``(mean, var)``; otherwise ``stats`` is a
    ``(mean, var)`` pair of fixed running statistics.
    """
    F = x.shape[-1]
    if gamma.shape != (F,) or beta.shape != (F,):
        raise ValueError(f"batch_norm: scale/shift must have shape ({F},)")
    axes = tuple(range(x.ndim - 1))
    xd = x.data
    if stats is None:
        mean = xd.mean(axis=axes)
        var = xd.var(axis=axes)
    else:
        mean, var = stats
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean) * inv
    out = xhat * gamma.data + beta.data
    count = xd.size // F
    training = stats is None

    def backward(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        gxhat = g * gamma.data
        if training:
            gx = inv / count * (count * gxhat - gxhat.sum(axis=axes) - xhat * (gxhat * xhat).sum(axis=axes))
        else:
            gx = gxhat * inv
        return gx, gg, gb

    y = _emit(out, (x, gamma, beta), backward, "batch_norm", 2 * xd.size)
    return y, (mean, var)


def bilinear_matrix(n_in, n_out, antialias=True):
    """Rows interpolate ``n_in`` samples onto ``n_out`` (half-pixel centres).

    When downsampling with ``antialias`` the triangle kernel is widened by the
    scale factor. Rows always sum to one, so constants are preserved.
    """
    ratio = n_in / n_out
    support = max(ratio, 1.0) if antialias else 1.0
    centers = (np.arange(n_out) + 0.5) * ratio - 0.5
    j = np.arange(n_in)
    w = np.clip(1.0 - np.abs(j[None, :] - centers[:, None]) / support, 0.0, None)
    empty = w.sum(axis=1) == 0
    if empty.any():
        nearest = np.clip(np.rint(centers[empty]).astype(int), 0, n_in - 1)
        w[empty, nearest] = 1.0
    # renormalise: taps that fall off the edge are dropped
    w /= w.sum(axis=1, keepdims=True)
    return w


def bilinear_resize(x, size, antialias=True):
    """Resize an NHWC tensor to ``size=(Ho, Wo)`` with bilinear weights."""
    B, H, W, C = x.shape
    Ho, Wo = size
    ry = bilinear_matrix(H, Ho, antialias).astype(x.dtype)
    rx = bilinear_matrix(W, Wo, antialias).astype(x.dtype)
    tmp = np.einsum("oh,bhwc->bowc", ry, x.data)
    out = np.einsum("pw,bowc->bopc", rx, tmp)

    def backward(g):
        gt = np.einsum("pw,bopc->bowc", rx, g)
        return (np.einsum("oh,bowc->bhwc", ry, gt),)

    mults = Ho * H * B * W * C + Wo * W * B * Ho * C
    return _emit(out, (x,), backward, "bilinear_resize", mults)


def mse_loss(pred, target):
    _same_shape(pred, target, "mse_loss")
    diff = pred.data - target.data
    n = diff.size
    val = np.asarray((diff * diff).sum() / n, dtype=pred.dtype)
    return _emit(val, (pred, target), lambda g: (2.0 * g * diff / n, -2.0 * g * diff / n), "mse_loss", n)


def sum_all(x):
    return _emit(np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                 lambda g: (np.full_like(x.data, g),), "sum")


def space_to_depth(x, block):
    """``(B, H, W, C) -> (B, H/b, W/b, b*b*C)`` in the patch order (row, col, channel)."""
    B, H, W, C = x.shape
    if H % block or W % block:
        raise ValueError(f"space_to_depth: {H}x{W} not divisible by {block}")
    y = reshape(x, (B, H // block, block, W // block, block, C))
    y = transpose(y, (0, 1, 3, 2, 4, 5))
    return reshape(y, (B, H // block, W // block, block * block * C))


def depth_to_space(x, block):
    """Inverse of :func:`space_to_depth`."""
    B, h, w, D = x.shape
    C = D // (block * block)
    if C * block * block != D:
        raise ValueError(f"depth_to_space: depth {D} not divisible by {block * block}")
    y = reshape(x, (B, h, w, block, block, C))
    y = transpose(y, (0, 1, 3, 2, 4, 5))
    return reshape(y, (B, h * block, w * block, C))


def save_checkpoint(path, arrays):
    """Write named arrays as one flat float32 ``.bin`` plus a ``.json`` manifest.

    ``path`` is the stem; returns the two paths written.
    """
    import json
    from pathlib import Path

    stem = Path(path)
    bin_path, man_path = stem.with_suffix(".bin"), stem.with_suffix(".json")
    entries, offset = [], 0
    with open(bin_path, "wb") as fh:
        for name, arr in arrays.items():
            a = np.ascontiguousarray(np.asarray(arr, dtype="<f4"))
            fh.write(a.tobytes())
            entries.append({"name": name, "shape": list(a.shape), "offset": offset, "nbytes": a.nbytes})
            offset += a.nbytes
    man_path.write_text(json.dumps({"dtype": "float32", "byteorder": "little",
                                    "total_bytes": offset, "tensors": entries}, indent=2))
    return bin_path, man_path


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``{name: float32 array}``."""
    import json
    from pathlib import Path

    stem = Path(path)
    manifest = json.loads(stem.with_suffix(".json").read_text())
    raw = stem.with_suffix(".bin").read_bytes()
    if len(raw) != manifest["total_bytes"]:
        raise ValueError(f"{stem}.bin has {len(raw)} bytes, manifest says {manifest['total_bytes']}")
    out = {}
    for e in manifest["tensors"]:
        a = np.frombuffer(raw, dtype="<f4", count=e["nbytes"] // 4, offset=e["offset"])
        out[e["name"]] = a.reshape(e["shape"]).astype(np.float32)
    return out
