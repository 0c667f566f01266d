"""Dense float tensors with tape-based reverse-mode differentiation.

Only the handful of operations needed by the bag classifier are provided:
convolution, pooling, ReLU, affine maps, softmax, cross-entropy and the
instance-wise max used for feature fusion.  Storage is float32; a float64
"shadow" mode exists for gradient checking.

Recording is opt-in: operations only append to a :class:`Tape` when one is
active on the current thread, so forward-only inference on frozen parameters
records nothing and is safe to run from several threads at once.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "EmptyBagError",
    "TrainingError",
    "Tensor",
    "Parameter",
    "Tape",
    "float64_mode",
    "default_dtype",
    "conv2d",
    "max_pool2d",
    "global_max_pool",
    "relu",
    "affine",
    "softmax",
    "cross_entropy",
    "max_reduce_instances",
    "add",
    "mul",
    "reduce_sum",
    "sgd_step",
    "finite_diff_check",
]

CE_EPSILON = 1e-12


class DimensionError(ValueError):
    """Raised when operand shapes do not line up."""


class EmptyBagError(ValueError):
    """Raised when a bag (set of instances) has no members."""


class TrainingError(RuntimeError):
    """Raised when optimisation hits a non-finite value."""


_local = threading.local()


def default_dtype():
    return getattr(_local, "dtype", np.float32)


@contextlib.contextmanager
def float64_mode():
    """Create new tensors as float64 inside the block (gradient checks only)."""
    previous = default_dtype()
    _local.dtype = np.float64
    try:
        yield
    finally:
        _local.dtype = previous


class Tensor:
    """Immutable n-dimensional array.

    ``data`` is a read-only numpy array.  ``grad`` is filled in by
    :meth:`Tape.backward` for tensors created with ``requires_grad=True``.
    """

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.array(data, dtype=dtype or default_dtype())
        if any(d <= 0 for d in arr.shape):
            raise DimensionError(f"tensor dimensions must be positive, got {arr.shape}")
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        arr.setflags(write=False)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data)

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype})"


class Parameter(Tensor):
    """Trainable tensor with a zero-initialised gradient accumulator."""

    __slots__ = ()

    def __init__(self, data, name: str | None = None, dtype=None):
        super().__init__(data, requires_grad=True, name=name, dtype=dtype)
        self.grad = np.zeros_like(self.data)

    @property
    def value(self) -> Tensor:
        return Tensor._wrap(self.data)

    def assign(self, arr: np.ndarray) -> None:
        arr = np.array(arr, dtype=self.data.dtype)
        if arr.shape != self.data.shape:
            raise DimensionError(
                f"parameter {self.name!r}: cannot assign shape {arr.shape} to {self.data.shape}"
            )
        arr.setflags(write=False)
        self.data = arr

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)


class Tape:
    """Ordered record of differentiable operations on the current thread.

    Use as a context manager around a forward pass, then call
    :meth:`backward` on the scalar result.  Records are appended in execution
    order, which is a topological order of the graph; backward walks it in
    reverse.
    """

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "tapes", None)
        if stack is None:
            stack = _local.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.tapes.pop()

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Tensor, seed: np.ndarray | None = None) -> None:
        """Propagate d(loss) back through every recorded operation.

        Parameter gradients are *added* to ``Parameter.grad``; other leaves
        that require grad get their ``grad`` set (or accumulated).
        """
        if seed is None:
            seed = np.ones_like(loss.data)
        grads: dict[int, np.ndarray] = {id(loss): np.asarray(seed, dtype=loss.dtype)}
        owners: dict[int, Tensor] = {id(loss): loss}
        for out, inputs, backward_fn in reversed(self.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            owners.pop(id(out), None)
            for inp, gi in zip(inputs, backward_fn(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                    owners[key] = inp
        for key, g in grads.items():
            leaf = owners[key]
            if isinstance(leaf, Parameter):
                leaf.grad = leaf.grad + g
            elif leaf.grad is None:
                leaf.grad = g
            else:
                leaf.grad = leaf.grad + g


def _active_tape() -> Tape | None:
    stack = getattr(_local, "tapes", None)
    return stack[-1] if stack else None


def _result(arr: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor._wrap(arr)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.records.append((out, tuple(inputs), backward_fn))
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --------------------------------------------------------------------------
# Elementwise helpers


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")
    return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def reduce_sum(x: Tensor) -> Tensor:
    shape = x.shape
    return _result(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


# --------------------------------------------------------------------------
# Convolution and pooling


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation.

    ``x`` is ``[C_in, H, W]`` or a batch ``[N, C_in, H, W]``; ``kernels`` is
    ``[C_out, C_in, kH, kW]`` and ``bias`` is ``[C_out]``.
    """
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise ValueError(f"padding must be >= 0, got {padding}")
    single = x.data.ndim == 3
    if x.data.ndim not in (3, 4):
        raise DimensionError(f"conv2d: input must be [C,H,W] or [N,C,H,W], got {x.shape}")
    if kernels.data.ndim != 4:
        raise DimensionError(f"conv2d: kernels must be [C_out,C_in,kH,kW], got {kernels.shape}")
    xd = x.data[None] if single else x.data
    n, c_in, h, w = xd.shape
    c_out, k_in, kh, kw = kernels.shape
    if k_in != c_in:
        raise DimensionError(f"conv2d: channel axis mismatch, input has {c_in} but kernels expect {k_in}")
    if bias.shape != (c_out,):
        raise DimensionError(f"conv2d: bias axis mismatch, expected ({c_out},) got {bias.shape}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp:
        raise DimensionError(f"conv2d: height axis too small ({hp}) for kernel height {kh}")
    if kw > wp:
        raise DimensionError(f"conv2d: width axis too small ({wp}) for kernel width {kw}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # rows: (n, ho, wo); cols: (c_in, kh, kw)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c_in * kh * kw)
    wmat = kernels.data.reshape(c_out, -1)
    out = cols @ wmat.T + bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2))
    if single:
        out = out[0]

    def backward(g):
        g4 = g[None] if single else g
        gmat = g4.transpose(0, 2, 3, 1).reshape(n * ho * wo, c_out)
        g_bias = gmat.sum(axis=0)
        g_kernels = (gmat.T @ cols).reshape(kernels.shape)
        g_input = None
        if x.requires_grad:
            dcols = (gmat @ wmat).reshape(n, ho, wo, c_in, kh, kw)
            gxp = np.zeros((n, c_in, hp, wp), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            g_input = gxp[:, :, padding:padding + h, padding:padding + w]
            if single:
                g_input = g_input[0]
        return g_input, g_kernels, g_bias

    return _result(out, (x, kernels, bias), backward)


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping ``size`` x ``size`` max pooling over the last two axes.

    Ties route the gradient to the first element of the window in row-major
    order.
    """
    *lead, h, w = x.shape
    if h % size or w % size:
        raise DimensionError(f"max_pool2d: spatial axes {h}x{w} not divisible by {size}")
    ho, wo = h // size, w // size
    blocks = x.data.reshape(*lead, ho, size, wo, size)
    blocks = np.moveaxis(blocks, -3, -2).reshape(*lead, ho, wo, size * size)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        onehot = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(onehot, idx[..., None], g[..., None], axis=-1)
        onehot = onehot.reshape(*lead, ho, wo, size, size)
        return (np.moveaxis(onehot, -2, -3).reshape(x.shape),)

    return _result(np.ascontiguousarray(out), (x,), backward)


def global_max_pool(x: Tensor) -> Tensor:
    """Spatial max over the last two axes: ``[..., C, H, W] -> [..., C]``."""
    *lead, h, w = x.shape
    flat = x.data.reshape(*lead, h * w)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gflat = np.zeros(flat.shape, dtype=g.dtype)
        np.put_along_axis(gflat, idx[..., None], g[..., None], axis=-1)
        return (gflat.reshape(x.shape),)

    return _result(np.ascontiguousarray(out), (x,), backward)


# --------------------------------------------------------------------------
# Dense layers and losses


def affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight + bias`` for ``x`` of shape ``[n]`` or ``[B, n]``."""
    if weight.data.ndim != 2:
        raise DimensionError(f"affine: weight must be 2-D, got {weight.shape}")
    n, m = weight.shape
    if x.shape[-1] != n:
        raise DimensionError(f"affine: input axis has {x.shape[-1]} features, weight expects {n}")
    if bias.shape != (m,):
        raise DimensionError(f"affine: bias axis mismatch, expected ({m},) got {bias.shape}")
    out = x.data @ weight.data + bias.data

    def backward(g):
        if g.ndim == 1:
            gw = np.outer(x.data, g)
            gb = g
        else:
            gw = x.data.T @ g
            gb = g.sum(axis=0)
        return g @ weight.data.T, gw, gb

    return _result(out, (x, weight, bias), backward)


def softmax(logits: Tensor) -> Tensor:
    """Softmax over the last axis, shifted by the max logit."""
    if logits.shape[-1] < 2:
        raise DimensionError(f"softmax: need at least 2 classes, got {logits.shape[-1]}")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _result(p, (logits,), backward)


def cross_entropy(probs: Tensor, target: int) -> Tensor:
    """``-log(probs[target])`` with the probability clamped at 1e-12."""
    c = probs.shape[-1]
    if probs.data.ndim != 1:
        raise DimensionError(f"cross_entropy: expected a probability vector, got {probs.shape}")
    if not 0 <= target < c:
        raise IndexError(f"cross_entropy: target class {target} out of range for {c} classes")
    pt = probs.data[target]
    clamped = max(pt, CE_EPSILON)
    loss = np.asarray(-np.log(clamped), dtype=probs.dtype)

    def backward(g):
        gp = np.zeros_like(probs.data)
        if pt > CE_EPSILON:
            gp[target] = -g / pt
        return (gp,)

    return _result(loss, (probs,), backward)


def softmax_cross_entropy(logits: Tensor, target: int) -> tuple[Tensor, np.ndarray]:
    """Fused ``cross_entropy(softmax(logits), target)`` via log-sum-exp.

    Returns (loss, probabilities).  No clamp is needed, and the gradient stays
    ``probs - one_hot(target)`` even when the target probability underflows,
    which the two-step composition cannot deliver in float32.
    """
    c = logits.shape[-1]
    if logits.data.ndim != 1 or c < 2:
        raise DimensionError(f"softmax_cross_entropy: expected a logit vector of length >= 2, got {logits.shape}")
    if not 0 <= target < c:
        raise IndexError(f"softmax_cross_entropy: target class {target} out of range for {c} classes")
    z = logits.data - logits.data.max()
    e = np.exp(z)
    total = e.sum()
    p = e / total
    loss = np.asarray(np.log(total) - z[target], dtype=logits.dtype)

    def backward(g):
        grad = p.copy()
        grad[target] -= 1
        return (g * grad,)

    return _result(loss, (logits,), backward), p


def max_reduce_instances(features: Tensor) -> tuple[Tensor, np.ndarray]:
    """Elementwise max over instances: ``[N, n_f] -> [n_f]``.

    Returns the fused vector and, per feature, the index of the winning
    instance (lowest index on ties).  Backward sends each feature's gradient
    to its winning instance only.
    """
    if not isinstance(features, Tensor):
        arr = np.asarray(features)
        if arr.ndim >= 1 and arr.shape[0] == 0:
            raise EmptyBagError("cannot fuse an empty bag")
        features = Tensor(arr)
    if features.data.ndim != 2:
        raise DimensionError(f"max_reduce_instances: expected [N, n_f], got {features.shape}")
    argmax = features.data.argmax(axis=0)
    cols = np.arange(features.shape[1])
    fused = features.data[argmax, cols]

    def backward(g):
        gf = np.zeros_like(features.data)
        gf[argmax, cols] = g
        return (gf,)

    return _result(np.ascontiguousarray(fused), (features,), backward), argmax


# --------------------------------------------------------------------------
# Optimisation and checking


def sgd_step(params: Iterable[Parameter], learning_rate: float) -> None:
    """Plain gradient descent update, then zero every gradient."""
    if not learning_rate > 0:
        raise ValueError(f"learning rate must be positive, got {learning_rate}")
    params = list(params)
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise TrainingError(f"non-finite gradient in parameter {p.name!r}")
    for p in params:
        p.assign(p.data - p.data.dtype.type(learning_rate) * p.grad)
        p.zero_grad()


def finite_diff_check(
    fn: Callable[[Tensor], Tensor], point, epsilon: float = 1e-5, numeric_dtype=None
) -> float:
    """Largest elementwise relative error between autodiff and central differences.

    ``fn`` maps a tensor to a scalar tensor.  The relative error of a pair
    ``(a, b)`` is ``|a - b| / max(|a|, |b|, 1e-8)``.

    The autodiff gradient is computed in the current default dtype.  Passing
    ``numeric_dtype=np.float64`` evaluates the central differences at double
    precision, which is how float32 backward passes are checked: float32
    differencing is dominated by rounding noise.
    """
    base = np.array(point.data if isinstance(point, Tensor) else point, dtype=default_dtype())
    x = Tensor(base, requires_grad=True)
    with Tape() as tape:
        y = fn(x)
    if y.data.size != 1:
        raise DimensionError(f"finite_diff_check: function must be scalar-valued, got {y.shape}")
    tape.backward(y)
    analytic = np.zeros(base.shape) if x.grad is None else np.asarray(x.grad, dtype=np.float64)

    numeric = np.zeros(base.shape)
    flat = base.reshape(-1).astype(numeric_dtype or base.dtype)
    for i in range(flat.size):
        hi = flat.copy()
        lo = flat.copy()
        hi[i] += epsilon
        lo[i] -= epsilon
        f_hi = float(fn(Tensor(hi.reshape(base.shape), dtype=flat.dtype)).data)
        f_lo = float(fn(Tensor(lo.reshape(base.shape), dtype=flat.dtype)).data)
        # the perturbation actually applied after rounding to storage dtype
        step = float(hi[i]) - float(lo[i])
        numeric.reshape(-1)[i] = (f_hi - f_lo) / step
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
