"""Dense tensors with tape-based reverse-mode automatic differentiation.

Tensors wrap row-major numpy arrays (float64 by default; float32 available
for speed but excluded from gradient-check guarantees). Operations executed
while a Tape is active append adjoint closures to it; one reverse traversal
of the tape populates ``grad`` for every tensor that requires gradients and
is reachable from the loss. There is no graph compilation: the tape records
execution order, which is already topological.

Thread model: a tape is single-threaded; distinct tapes may live on distinct
threads because they share no state.
"""

from __future__ import annotations

import threading

import numpy as np

from .errors import ConfigError, ContractError, ShapeError

DEFAULT_DTYPE = np.float64

_state = threading.local()


def _tape_stack():
    if not hasattr(_state, "stack"):
        _state.stack = []
    return _state.stack


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """n-dimensional array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_tape")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        self.data = np.asarray(data, dtype=dtype or DEFAULT_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.shape != ():
            raise ContractError(f"item() expects a scalar, got shape {self.data.shape}")
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype)
        else:
            self.grad += g

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; all routes through the module-level ops.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean(self)


class Tape:
    """Ordered record of executed operations; reverse walk drives backprop."""

    def __init__(self):
        self._entries = []  # (op_name, output, backward_closure)

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self._entries)

    def record(self, op_name, out, backward):
        self._entries.append((op_name, out, backward))
        out._tape = self

    def backward(self, loss):
        """Populate grads of every requires_grad tensor reachable from ``loss``."""
        if loss.data.shape != ():
            raise ContractError(
                f"backward expects a scalar loss, got shape {loss.data.shape}"
            )
        loss._accumulate(np.ones((), dtype=loss.data.dtype))
        for _, out, backward in reversed(self._entries):
            if out.grad is None:
                continue
            backward(out.grad)

    def first_nonfinite(self):
        """Name of the first recorded op whose output holds NaN/Inf, or None."""
        for op_name, out, _ in self._entries:
            if not np.all(np.isfinite(out.data)):
                return op_name
        return None


def backward(loss):
    """Run reverse-mode accumulation from a scalar loss over its tape."""
    if loss._tape is None:
        if loss.data.shape != ():
            raise ContractError(
                f"backward expects a scalar loss, got shape {loss.data.shape}"
            )
        loss._accumulate(np.ones((), dtype=loss.data.dtype))
        return
    loss._tape.backward(loss)


def as_tensor(value):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value))


# Test hook: when set to an op name, that op's recorded adjoint is scaled by
# 1.01, simulating a corrupted backward rule for fault-injection tests.
FAULT_INJECT_OP = None


def _make(op_name, data, inputs, backward):
    out = Tensor(data)
    out.requires_grad = any(t.requires_grad for t in inputs)
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        if FAULT_INJECT_OP == op_name:
            original = backward

            def backward(g, _orig=original):
                _orig(g * 1.01)

        tape.record(op_name, out, backward)
    return out


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Elementwise arithmetic (suffix broadcasting, e.g. (L,d) + (d,))


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _make("add", data, (a, b), bw)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.data.shape))

    return _make("sub", data, (a, b), bw)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make("mul", data, (a, b), bw)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data / b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make("div", data, (a, b), bw)


# ---------------------------------------------------------------------------
# Linear algebra and shape plumbing


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul requires (m,k) x (k,n); got {a.data.shape} x {b.data.shape}"
        )
    data = a.data @ b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _make("matmul", data, (a, b), bw)


def transpose(x):
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {x.data.shape}")

    def bw(g):
        if x.requires_grad:
            x._accumulate(g.T)

    return _make("transpose", x.data.T.copy(), (x,), bw)


def permute(x, axes):
    x = as_tensor(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def bw(g):
        if x.requires_grad:
            x._accumulate(g.transpose(inverse))

    return _make("permute", x.data.transpose(axes).copy(), (x,), bw)


def reshape(x, shape):
    x = as_tensor(x)
    original = x.data.shape

    def bw(g):
        if x.requires_grad:
            x._accumulate(g.reshape(original))

    return _make("reshape", x.data.reshape(shape), (x,), bw)


def narrow(x, axis, start, length):
    """Contiguous slice along one axis; adjoint scatters back into place."""
    x = as_tensor(x)
    index = [slice(None)] * x.data.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)

    def bw(g):
        if x.requires_grad:
            full = np.zeros_like(x.data)
            full[index] = g
            x._accumulate(full)

    return _make("narrow", x.data[index].copy(), (x,), bw)


def concat(tensors, axis):
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.data.shape[axis] for t in tensors])[:-1]

    def bw(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t._accumulate(piece)

    return _make("concat", data, tuple(tensors), bw)


def take_windows(img, row_idx, col_idx):
    """Gather ``out[l,a,b,:] = img[row_idx[l,a], col_idx[l,b], :]``.

    Index arrays are precomputed integer maps (L, window); the adjoint
    scatter-adds, so repeated indices (reflected borders) accumulate.
    """
    img = as_tensor(img)
    rows = row_idx[:, :, None]
    cols = col_idx[:, None, :]
    data = img.data[rows, cols, :]

    def bw(g):
        if img.requires_grad:
            gi = np.zeros_like(img.data)
            np.add.at(gi, (rows, cols), g)
            img._accumulate(gi)

    return _make("take_windows", data, (img,), bw)


# ---------------------------------------------------------------------------
# Reductions


def sum_all(x):
    x = as_tensor(x)

    def bw(g):
        if x.requires_grad:
            x._accumulate(np.full_like(x.data, g))

    return _make("sum", np.asarray(x.data.sum()), (x,), bw)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    data = x.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        count = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.data.shape[a] for a in axes]))

    def bw(g):
        if not x.requires_grad:
            return
        if axis is None:
            x._accumulate(np.full_like(x.data, g / count))
            return
        gg = g
        if not keepdims:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            gg = np.expand_dims(g, axes)
        x._accumulate(np.broadcast_to(gg / count, x.data.shape).copy())

    return _make("mean", np.asarray(data), (x,), bw)


# ---------------------------------------------------------------------------
# Nonlinearities and normalization


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0  # subgradient 0 at the kink

    def bw(g):
        if x.requires_grad:
            x._accumulate(g * mask)

    return _make("relu", np.maximum(x.data, 0.0), (x,), bw)


def sqrt(x):
    x = as_tensor(x)
    data = np.sqrt(x.data)

    def bw(g):
        if x.requires_grad:
            x._accumulate(g / (2.0 * data))

    return _make("sqrt", data, (x,), bw)


def softplus(x):
    """ln(1 + e^x), computed stably; adjoint is sigmoid(x)."""
    x = as_tensor(x)
    data = np.logaddexp(0.0, x.data)

    def bw(g):
        if x.requires_grad:
            sig = 1.0 / (1.0 + np.exp(-x.data))
            x._accumulate(g * sig)

    return _make("softplus", data, (x,), bw)


def softmax_rows(x):
    """Softmax over the last axis; every row sums to 1."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        if x.requires_grad:
            dot = (g * data).sum(axis=-1, keepdims=True)
            x._accumulate((g - dot) * data)

    return _make("softmax_rows", data, (x,), bw)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize the last axis to mean 0 / variance 1, then scale and shift."""
    if eps <= 0:
        raise ConfigError(f"layer_norm eps must be > 0, got {eps}")
    x = as_tensor(x)
    mu = mean(x, axis=-1, keepdims=True)
    centered = sub(x, mu)
    var = mean(mul(centered, centered), axis=-1, keepdims=True)
    std = sqrt(add(var, eps))
    return add(mul(div(centered, std), gain), bias)


# ---------------------------------------------------------------------------
# Convolution and upsampling


def _pad_hw(data, pad_h, pad_w, mode):
    if pad_h == 0 and pad_w == 0:
        return data
    widths = ((0, 0), (pad_h, pad_h), (pad_w, pad_w), (0, 0))
    if mode == "zero":
        return np.pad(data, widths, mode="constant")
    if mode == "reflect":
        return np.pad(data, widths, mode="reflect")
    raise ConfigError(f"unknown padding mode {mode!r}; expected 'zero' or 'reflect'")


def _unpad_hw_adjoint(gpad, pad_h, pad_w, mode, height, width):
    """Fold padded-space gradient back onto the (B,H,W,C) source.

    Reflect padding (no edge repeat) maps pad row j to source row pad-j on
    the left and pad+H+t to H-2-t on the right, so those slices accumulate.
    """
    if pad_h == 0 and pad_w == 0:
        return gpad
    if mode == "zero":
        return gpad[:, pad_h : pad_h + height, pad_w : pad_w + width, :]
    core = gpad[:, pad_h : pad_h + height, :, :].copy()
    if pad_h:
        core[:, 1 : pad_h + 1, :, :] += gpad[:, :pad_h, :, :][:, ::-1, :, :]
        core[:, height - 1 - pad_h : height - 1, :, :] += gpad[:, pad_h + height :, :, :][:, ::-1, :, :]
    out = core[:, :, pad_w : pad_w + width, :].copy()
    if pad_w:
        out[:, :, 1 : pad_w + 1, :] += core[:, :, :pad_w, :][:, :, ::-1, :]
        out[:, :, width - 1 - pad_w : width - 1, :] += core[:, :, pad_w + width :, :][:, :, ::-1, :]
    return out


def conv2d(x, kernel, padding="zero", stride=1):
    """Same-size cross-correlation (no kernel flip).

    ``x`` is (H,W,Cin) or batched (B,H,W,Cin); ``kernel`` is (k,k,Cin,Cout).
    Stride 1 keeps the spatial size; stride s yields ceil(dim/s) with the
    symmetric k//2 padding used here. Adjoints flow to both operands.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    kd = kernel.data
    if kd.ndim != 4 or kd.shape[0] != kd.shape[1]:
        raise ShapeError(f"kernel must be (k,k,Cin,Cout), got {kd.shape}")
    k = kd.shape[0]
    if k % 2 == 0:
        raise ConfigError(f"kernel size must be odd, got {k}")
    batched = x.data.ndim == 4
    xd = x.data if batched else x.data[None]
    if xd.ndim != 4 or xd.shape[3] != kd.shape[2]:
        raise ShapeError(
            f"input {x.data.shape} incompatible with kernel {kd.shape}"
        )
    b, height, width, cin = xd.shape
    cout = kd.shape[3]
    pad = k // 2
    xp = _pad_hw(xd, pad, pad, padding)
    out_h = (xp.shape[1] - k) // stride + 1
    out_w = (xp.shape[2] - k) // stride + 1

    cols = np.empty((b, out_h, out_w, k * k * cin), dtype=xd.dtype)
    for di in range(k):
        for dj in range(k):
            patch = xp[:, di : di + (out_h - 1) * stride + 1 : stride,
                       dj : dj + (out_w - 1) * stride + 1 : stride, :]
            cols[..., (di * k + dj) * cin : (di * k + dj + 1) * cin] = patch
    wflat = kd.reshape(k * k * cin, cout)
    data = (cols.reshape(-1, k * k * cin) @ wflat).reshape(b, out_h, out_w, cout)

    def bw(g):
        gflat = g.reshape(-1, cout)
        if kernel.requires_grad:
            gw = cols.reshape(-1, k * k * cin).T @ gflat
            kernel._accumulate(gw.reshape(kd.shape))
        if x.requires_grad:
            gcols = (gflat @ wflat.T).reshape(b, out_h, out_w, k * k * cin)
            gxp = np.zeros_like(xp)
            for di in range(k):
                for dj in range(k):
                    gxp[:, di : di + (out_h - 1) * stride + 1 : stride,
                        dj : dj + (out_w - 1) * stride + 1 : stride, :] += gcols[
                        ..., (di * k + dj) * cin : (di * k + dj + 1) * cin
                    ]
            gx = _unpad_hw_adjoint(gxp, pad, pad, padding, height, width)
            x._accumulate(gx if batched else gx[0])

    return _make("conv2d", data if batched else data[0], (x, kernel), bw)


def upsample_nearest_2x(x):
    """Replicate each (H,W) cell into a 2x2 block; adjoint sums the block."""
    x = as_tensor(x)
    data = np.repeat(np.repeat(x.data, 2, axis=0), 2, axis=1)

    def bw(g):
        if x.requires_grad:
            h, w = x.data.shape[0], x.data.shape[1]
            x._accumulate(g.reshape(h, 2, w, 2, *x.data.shape[2:]).sum(axis=(1, 3)))

    return _make("upsample_nearest_2x", data, (x,), bw)


# ---------------------------------------------------------------------------
# Verification


def grad_check(f, x, h=1e-5):
    """Max relative error between reverse-mode and central finite differences.

    ``f`` maps a Tensor to a scalar Tensor and must be deterministic. Every
    coordinate of ``x`` is perturbed by ±h; the per-coordinate relative error
    is |ad - fd| / max(1e-8, |ad| + |fd|).
    """
    probe = Tensor(x.data.copy(), requires_grad=True)
    with Tape() as tape:
        out = f(probe)
    if out.data.shape != ():
        raise ContractError(f"grad_check expects a scalar function, got shape {out.data.shape}")
    tape.backward(out)
    analytic = np.zeros_like(probe.data) if probe.grad is None else probe.grad.copy()

    flat = probe.data.reshape(-1)
    fd = np.zeros(flat.size, dtype=flat.dtype)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + h
        up = float(f(probe).data)
        flat[i] = original - h
        down = float(f(probe).data)
        flat[i] = original
        fd[i] = (up - down) / (2.0 * h)

    ad = analytic.reshape(-1)
    denom = np.maximum(1e-8, np.abs(ad) + np.abs(fd))
    return float(np.max(np.abs(ad - fd) / denom))


def param_grad_check(make_loss, param, h=1e-5, coords=None, rng=None):
    """grad_check against a parameter owned by a model.

    ``make_loss`` rebuilds the scalar loss from current parameter values.
    ``coords`` limits finite differencing to that many sampled coordinates
    (all of them when None). Returns the max relative error over the checked
    coordinates.
    """
    param.grad = None
    with Tape() as tape:
        loss = make_loss()
    tape.backward(loss)
    analytic = (
        np.zeros_like(param.data) if param.grad is None else param.grad.copy()
    ).reshape(-1)

    flat = param.data.reshape(-1)
    if coords is None or coords >= flat.size:
        picked = np.arange(flat.size)
    else:
        picked = (rng or np.random.default_rng(0)).choice(
            flat.size, size=coords, replace=False
        )
    worst = 0.0
    for i in picked:
        original = flat[i]
        flat[i] = original + h
        up = float(make_loss().data)
        flat[i] = original - h
        down = float(make_loss().data)
        flat[i] = original
        fd = (up - down) / (2.0 * h)
        rel = abs(analytic[i] - fd) / max(1e-8, abs(analytic[i]) + abs(fd))
        worst = max(worst, rel)
    return worst
