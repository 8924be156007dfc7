"""Dense tensors with reverse-mode automatic differentiation.

Values are numpy arrays (float32 by default, float64 for high-precision
gradient checks). Each operation records its parents and a backward
closure; `backward()` walks the graph in reverse topological order and
accumulates gradients on every tensor with `requires_grad`.

Graphs are built per training step and garbage-collected with the loss
tensor; there is no persistent tape.
"""

from __future__ import annotations

import struct
import warnings

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import ContractError, GraphError, NumericFault

# Counts backward() calls on detached tensors (no-ops).
_detached_backward_count = 0


def detached_backward_count():
    return _detached_backward_count


def _check_finite(data, op):
    if not np.all(np.isfinite(data)):
        raise NumericFault(op)


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A dense n-dimensional value, optionally tracked in the autodiff graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn", "op")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        _check_finite(arr, "leaf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward_fn = None
        self.op = "leaf"

    # -- construction of op results ------------------------------------

    @classmethod
    def _from_op(cls, data, parents, op, backward_fn):
        arr = np.asarray(data)
        if not np.all(np.isfinite(arr)):
            raise NumericFault(op)
        out = cls.__new__(cls)
        out.data = arr
        out.requires_grad = any(p.requires_grad for p in parents)
        out.grad = None
        out._parents = tuple(parents) if out.requires_grad else ()
        out._backward_fn = backward_fn if out.requires_grad else None
        out.op = op
        return out

    # -- basic protocol --------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            # Copy: g may alias another node's grad buffer.
            self.grad = np.array(g, dtype=self.data.dtype)
        else:
            self.grad += g

    # -- arithmetic -------------------------------------------------------

    def _coerce(self, other):
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    @staticmethod
    def _broadcast_guard(a, b, op):
        try:
            np.broadcast_shapes(a.shape, b.shape)
        except ValueError:
            raise GraphError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None

    def __add__(self, other):
        other = self._coerce(other)
        self._broadcast_guard(self, other, "add")
        out_data = self.data + other.data

        def backward(out):
            if self.requires_grad:
                self._accumulate(_unbroadcast(out.grad, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(out.grad, other.shape))

        return Tensor._from_op(out_data, (self, other), "add", backward)

    __radd__ = __add__

    def __mul__(self, other):
        other = self._coerce(other)
        self._broadcast_guard(self, other, "mul")
        out_data = self.data * other.data

        def backward(out):
            if self.requires_grad:
                self._accumulate(_unbroadcast(out.grad * other.data, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(out.grad * self.data, other.shape))

        return Tensor._from_op(out_data, (self, other), "mul", backward)

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        return self + (-self._coerce(other))

    def __rsub__(self, other):
        return self._coerce(other) + (-self)

    def __pow__(self, exponent):
        exponent = float(exponent)
        out_data = self.data ** exponent

        def backward(out):
            if self.requires_grad:
                self._accumulate(out.grad * exponent * self.data ** (exponent - 1.0))

        return Tensor._from_op(out_data, (self,), "pow", backward)

    def matmul(self, other):
        other = self._coerce(other)
        if self.data.ndim != 2 or other.data.ndim != 2 or self.shape[1] != other.shape[0]:
            raise GraphError(f"matmul: incompatible shapes {self.shape} and {other.shape}")
        out_data = self.data @ other.data

        def backward(out):
            if self.requires_grad:
                self._accumulate(out.grad @ other.data.T)
            if other.requires_grad:
                other._accumulate(self.data.T @ out.grad)

        return Tensor._from_op(out_data, (self, other), "matmul", backward)

    __matmul__ = matmul

    # -- reductions / shape ------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def backward(out):
            if not self.requires_grad:
                return
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accumulate(np.broadcast_to(g, self.shape))

        return Tensor._from_op(out_data, (self,), "sum", backward)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod(
            [self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out_data = self.data.reshape(shape)

        def backward(out):
            if self.requires_grad:
                self._accumulate(out.grad.reshape(self.shape))

        return Tensor._from_op(out_data, (self,), "reshape", backward)

    # -- elementwise nonlinearities -----------------------------------------

    def log(self):
        out_data = np.log(self.data)

        def backward(out):
            if self.requires_grad:
                self._accumulate(out.grad / self.data)

        return Tensor._from_op(out_data, (self,), "log", backward)

    def exp(self):
        out_data = np.exp(self.data)

        def backward(out):
            if self.requires_grad:
                self._accumulate(out.grad * out_data)

        return Tensor._from_op(out_data, (self,), "exp", backward)

    def tanh(self):
        out_data = np.tanh(self.data)

        def backward(out):
            if self.requires_grad:
                self._accumulate(out.grad * (1.0 - out_data * out_data))

        return Tensor._from_op(out_data, (self,), "tanh", backward)

    def sigmoid(self):
        out_data = 0.5 * (np.tanh(0.5 * self.data) + 1.0)

        def backward(out):
            if self.requires_grad:
                self._accumulate(out.grad * out_data * (1.0 - out_data))

        return Tensor._from_op(out_data, (self,), "sigmoid", backward)

    def relu(self):
        return self.leaky_relu(0.0)

    def leaky_relu(self, slope=0.2):
        scale = np.where(self.data > 0, self.data.dtype.type(1), self.data.dtype.type(slope))
        out_data = self.data * scale

        def backward(out):
            if self.requires_grad:
                self._accumulate(out.grad * scale)

        return Tensor._from_op(out_data, (self,), "leaky_relu", backward)

    def clip_min(self, lo):
        """Elementwise max(x, lo); gradient is zero where clipped."""
        mask = self.data > lo
        out_data = np.where(mask, self.data, lo)

        def backward(out):
            if self.requires_grad:
                self._accumulate(out.grad * mask)

        return Tensor._from_op(out_data, (self,), "clip_min", backward)

    def softmax(self):
        """Row-wise softmax over the last axis."""
        shifted = self.data - self.data.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        out_data = e / e.sum(axis=-1, keepdims=True)

        def backward(out):
            if self.requires_grad:
                s = out_data
                dot = (out.grad * s).sum(axis=-1, keepdims=True)
                self._accumulate(s * (out.grad - dot))

        return Tensor._from_op(out_data, (self,), "softmax", backward)

    # -- convolutions -----------------------------------------------------

    def conv2d(self, weight, bias=None):
        """Stride-2 'same' convolution: [B,C,H,W] -> [B,F,ceil(H/2),ceil(W/2)].

        weight: [F,C,k,k]; bias: [F] or None.
        """
        w = self._coerce(weight)
        x = self
        if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
            raise GraphError(
                f"conv2d: incompatible shapes input {x.shape} weight {w.shape}")
        out_data, cols = _conv_same_s2(x.data, w.data)
        if bias is not None:
            b = self._coerce(bias)
            if b.shape != (w.shape[0],):
                raise GraphError(
                    f"conv2d: bias shape {b.shape} does not match {w.shape[0]} filters")
            out_data = out_data + b.data.reshape(1, -1, 1, 1)
            parents = (x, w, b)
        else:
            b = None
            parents = (x, w)

        def backward(out):
            g = out.grad
            F = w.shape[0]
            g2 = g.transpose(0, 2, 3, 1).reshape(-1, F)
            if w.requires_grad:
                w._accumulate((g2.T @ cols).reshape(w.shape))
            if b is not None and b.requires_grad:
                b._accumulate(g.sum(axis=(0, 2, 3)))
            if x.requires_grad:
                x._accumulate(_conv_same_s2_input_grad(g, w.data, x.shape))

        return Tensor._from_op(out_data, parents, "conv2d", backward)

    def conv2d_transpose(self, weight, bias=None):
        """Stride-2 transposed convolution: [B,C,H,W] -> [B,F,2H,2W].

        weight: [C,F,k,k]. Exactly the adjoint of conv2d with the same weight,
        so <tconv(x,w), y> == <x, conv(y,w)> holds by construction.
        """
        w = self._coerce(weight)
        x = self
        if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[0]:
            raise GraphError(
                f"conv2d_transpose: incompatible shapes input {x.shape} weight {w.shape}")
        B, C, H, W = x.shape
        F = w.shape[1]
        out_shape = (B, F, 2 * H, 2 * W)
        out_data = _conv_same_s2_input_grad(x.data, w.data, out_shape)
        if bias is not None:
            b = self._coerce(bias)
            if b.shape != (F,):
                raise GraphError(
                    f"conv2d_transpose: bias shape {b.shape} does not match {F} filters")
            out_data = out_data + b.data.reshape(1, -1, 1, 1)
            parents = (x, w, b)
        else:
            b = None
            parents = (x, w)

        def backward(out):
            g = out.grad
            if x.requires_grad or w.requires_grad:
                conv_out, cols = _conv_same_s2(g, w.data)
                if x.requires_grad:
                    x._accumulate(conv_out)
                if w.requires_grad:
                    x2 = x.data.transpose(0, 2, 3, 1).reshape(-1, C)
                    w._accumulate((x2.T @ cols).reshape(w.shape))
            if b is not None and b.requires_grad:
                b._accumulate(g.sum(axis=(0, 2, 3)))

        return Tensor._from_op(out_data, parents, "conv2d_transpose", backward)

    # -- backward entry -----------------------------------------------------

    def backward(self):
        return backward(self)


def _same_pads(H, W, k):
    """Top/left/total padding for stride-2 'same' convolution."""
    out_h, out_w = (H + 1) // 2, (W + 1) // 2
    ph = max((out_h - 1) * 2 + k - H, 0)
    pw = max((out_w - 1) * 2 + k - W, 0)
    return ph // 2, ph, pw // 2, pw


def _im2col_s2(x, k):
    """Contiguous patch matrix (B*OH*OW, C*k*k) for stride-2 same conv."""
    B, C, H, W = x.shape
    out_h, out_w = (H + 1) // 2, (W + 1) // 2
    pt, ph, pl, pw = _same_pads(H, W, k)
    if ph or pw:
        xp = np.pad(x, ((0, 0), (0, 0), (pt, ph - pt), (pl, pw - pl)))
    else:
        xp = x
    sB, sC, sH, sW = xp.strides
    view = as_strided(
        xp,
        shape=(B, out_h, out_w, C, k, k),
        strides=(sB, 2 * sH, 2 * sW, sC, sH, sW),
        writeable=False,
    )
    return view.reshape(B * out_h * out_w, C * k * k), (out_h, out_w)


def _conv_same_s2(x, w):
    """Forward stride-2 same conv. Returns (out [B,F,OH,OW], cols)."""
    B = x.shape[0]
    F, _, k, _ = w.shape
    cols, (out_h, out_w) = _im2col_s2(x, k)
    out2 = cols @ w.reshape(F, -1).T
    # Channels-first view; downstream ufuncs re-materialize it contiguously.
    out = out2.reshape(B, out_h, out_w, F).transpose(0, 3, 1, 2)
    return out, cols


def _conv_same_s2_input_grad(g, w, x_shape):
    """Adjoint of _conv_same_s2 w.r.t. the input (col2im scatter-add)."""
    B, C, H, W = x_shape
    F, _, k, _ = w.shape
    oh, ow = g.shape[2], g.shape[3]
    pt, ph, pl, pw = _same_pads(H, W, k)
    g2 = g.transpose(0, 2, 3, 1).reshape(-1, F)
    dcols = (g2 @ w.reshape(F, -1)).reshape(B, oh, ow, C, k, k)
    if k == 2 and ph == 0 and pw == 0:
        # Windows tile the input exactly; col2im is a pure permutation.
        return dcols.transpose(0, 3, 1, 4, 2, 5).reshape(B, C, H, W)
    dxp = np.zeros((B, C, H + ph, W + pw), dtype=g.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + 2 * oh:2, j:j + 2 * ow:2] += \
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dxp[:, :, pt:pt + H, pl:pl + W]


def backward(loss):
    """Run reverse-mode differentiation from a scalar loss.

    Accumulates into each requires_grad tensor's `.grad` (repeated calls add)
    and returns a map from tensor to its gradient array.
    """
    global _detached_backward_count
    if loss.data.size != 1:
        raise ContractError(
            f"backward requires a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        _detached_backward_count += 1
        warnings.warn("backward() on a detached tensor is a no-op", stacklevel=2)
        return {}

    topo, seen = [], set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    loss._accumulate(np.ones_like(loss.data))
    for node in reversed(topo):
        if node._backward_fn is not None:
            if node.grad is None:
                continue
            if not np.all(np.isfinite(node.grad)):
                raise NumericFault(node.op, "gradient")
            node._backward_fn(node)
    return {t: t.grad for t in topo if t.requires_grad}


def grad_check(fn, x, eps=None, tol=None):
    """Compare analytic gradients of fn(x) against central finite differences.

    fn builds a scalar loss Tensor from a Tensor input. Returns a dict with
    the max relative error |analytic - numeric| / max(1, |analytic|), the
    pass flag, and the tolerance used. Defaults depend on precision:
    (eps=1e-2, tol=1e-3) in float32, (eps=1e-5, tol=1e-6) in float64.
    """
    double = x.data.dtype == np.float64
    if eps is None:
        eps = 1e-5 if double else 1e-2
    if tol is None:
        tol = 1e-6 if double else 1e-3
    if eps <= 0:
        raise ContractError("grad_check requires eps > 0")

    probe = Tensor(x.data.copy(), requires_grad=True)
    loss = fn(probe)
    if fn(Tensor(x.data.copy(), requires_grad=True)).data != loss.data:
        raise ContractError("grad_check: fn is not deterministic; check invalidated")
    backward(loss)
    analytic = probe.grad if probe.grad is not None else np.zeros_like(probe.data)

    flat = x.data.copy().ravel()
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(fn(Tensor(flat.reshape(x.shape))).data)
        flat[i] = orig - eps
        lo = float(fn(Tensor(flat.reshape(x.shape))).data)
        flat[i] = orig
        numeric[i] = (hi - lo) / (2.0 * eps)

    a = analytic.ravel().astype(np.float64)
    n = numeric.astype(np.float64)
    rel = np.abs(a - n) / np.maximum(1.0, np.abs(a))
    max_rel = float(rel.max()) if rel.size else 0.0
    return {"max_rel_error": max_rel, "passed": max_rel <= tol, "tol": tol}


# -- binary snapshot format ("VGT1") -----------------------------------------

SNAPSHOT_MAGIC = b"VGT1"


def save_tensor(path, tensor):
    """Write a tensor snapshot: magic, u32 rank, u32 dims, f32 row-major data."""
    data = tensor.data if isinstance(tensor, Tensor) else np.asarray(tensor)
    with open(path, "wb") as fh:
        fh.write(SNAPSHOT_MAGIC)
        fh.write(struct.pack("<I", data.ndim))
        for d in data.shape:
            fh.write(struct.pack("<I", d))
        fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def load_tensor(path):
    """Read a tensor snapshot written by save_tensor."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != SNAPSHOT_MAGIC:
            raise ContractError(f"{path}: bad snapshot magic {magic!r}")
        (rank,) = struct.unpack("<I", fh.read(4))
        shape = struct.unpack(f"<{rank}I", fh.read(4 * rank))
        count = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(fh.read(4 * count), dtype="<f4").reshape(shape)
    return Tensor(data.copy())
