"""Differentiable numeric primitives on float64 numpy arrays.

A minimal reverse-mode engine: ops compute eagerly, and when handed a
:class:`Tape` they append a backward closure to it.  Calling
``tape.backward(loss)`` replays the closures in reverse recording order,
accumulating gradients additively into each participating tensor's ``grad``
buffer.  Ops called without a tape are plain inference.

Every op accepts either a single sample or a batch with one extra leading
axis (vectors become (N, n) matrices, images (C, H, W) become (N, C, H, W));
the batched form exists purely for speed and computes the same math.

Non-finite values are an error state: tensor construction and gradient
accumulation raise :class:`~cxrfusion.errors.NumericError` on NaN/Inf.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence, Union

import numpy as np

from . import kernels
from .errors import NumericError, ShapeError

ArrayLike = Union[np.ndarray, Sequence, float, int]


class Tensor:
    """A float64 array plus an optional same-shape gradient buffer."""

    __slots__ = ("data", "grad")

    def __init__(self, data: ArrayLike):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor contains non-finite values")
        self.data = arr
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ShapeError(
                f"gradient shape {g.shape} != tensor shape {self.data.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError("gradient contains non-finite values")
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape})"


class Tape:
    """Ordered record of executed ops; replays backward rules in reverse."""

    __slots__ = ("_ops",)

    def __init__(self):
        self._ops: list[Callable[[], None]] = []

    def record(self, backward_fn: Callable[[], None]) -> None:
        self._ops.append(backward_fn)

    def __len__(self) -> int:
        return len(self._ops)

    def backward(self, root: Tensor) -> None:
        """Seed d(root)/d(root)=1 and run every recorded rule exactly once."""
        if root.data.size != 1:
            raise ShapeError("backward root must be a scalar tensor")
        root.accumulate_grad(np.ones_like(root.data))
        for fn in reversed(self._ops):
            fn()


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def swish(x: Tensor, tape: Optional[Tape] = None) -> Tensor:
    """Elementwise x * sigmoid(x)."""
    s = _sigmoid(x.data)
    out = Tensor(x.data * s)
    if tape is not None:
        def _bw():
            if out.grad is None:
                return
            x.accumulate_grad(out.grad * s * (1.0 + x.data * (1.0 - s)))
        tape.record(_bw)
    return out


def affine(x: Tensor, w: Tensor, b: Tensor, tape: Optional[Tape] = None) -> Tensor:
    """y = W x + b for a vector x, or row-wise for a batch (N, n_in)."""
    if w.data.ndim != 2 or b.data.ndim != 1:
        raise ShapeError("affine expects W of rank 2 and b of rank 1")
    n_out, n_in = w.data.shape
    if b.data.shape[0] != n_out:
        raise ShapeError(f"bias length {b.data.shape[0]} != {n_out} rows of W")
    if x.data.ndim == 1:
        if x.data.shape[0] != n_in:
            raise ShapeError(f"input length {x.data.shape[0]} != {n_in} cols of W")
        out = Tensor(w.data @ x.data + b.data)
        if tape is not None:
            def _bw():
                if out.grad is None:
                    return
                g = out.grad
                x.accumulate_grad(w.data.T @ g)
                w.accumulate_grad(np.outer(g, x.data))
                b.accumulate_grad(g.copy())
            tape.record(_bw)
        return out
    if x.data.ndim == 2:
        if x.data.shape[1] != n_in:
            raise ShapeError(f"input width {x.data.shape[1]} != {n_in} cols of W")
        out = Tensor(x.data @ w.data.T + b.data)
        if tape is not None:
            def _bw():
                if out.grad is None:
                    return
                g = out.grad
                x.accumulate_grad(g @ w.data)
                w.accumulate_grad(g.T @ x.data)
                b.accumulate_grad(g.sum(axis=0))
            tape.record(_bw)
        return out
    raise ShapeError(f"affine input must have rank 1 or 2, got {x.data.ndim}")


def conv2d(x: Tensor, k: Tensor, stride: int = 1, pad: int = 0,
           tape: Optional[Tape] = None) -> Tensor:
    """Zero-padded strided cross-correlation.

    x is (C_in, H, W) or (N, C_in, H, W); k is (C_out, C_in, kh, kw).
    Output spatial size is floor((H + 2*pad - kh) / stride) + 1.
    """
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    if pad < 0:
        raise ShapeError(f"pad must be >= 0, got {pad}")
    if k.data.ndim != 4:
        raise ShapeError("conv2d kernel must have rank 4 (C_out, C_in, kh, kw)")
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4:
        raise ShapeError(f"conv2d input must have rank 3 or 4, got {x.data.ndim}")
    n, c, h, w = xd.shape
    f, kc, kh, kw = k.data.shape
    if kc != c:
        raise ShapeError(f"kernel expects {kc} input channels, input has {c}")
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise ShapeError(
            f"kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{w + 2 * pad}")
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    out_arr = kernels.conv2d_forward(xp, k.data, stride)
    out = Tensor(out_arr[0] if squeeze else out_arr)
    if tape is not None:
        xp_shape = xp.shape

        def _bw():
            if out.grad is None:
                return
            g = out.grad[None] if squeeze else out.grad
            dk = kernels.conv2d_grad_weights(xp, g, stride, k.data.shape)
            k.accumulate_grad(dk)
            dxp = kernels.conv2d_grad_input(g, k.data, stride, xp_shape)
            if pad:
                dxp = dxp[:, :, pad:-pad, pad:-pad]
            x.accumulate_grad(dxp[0] if squeeze else dxp)
        tape.record(_bw)
    return out


def global_avg_pool(x: Tensor, tape: Optional[Tape] = None) -> Tensor:
    """Per-channel spatial mean: (C, H, W) -> (C,) or (N, C, H, W) -> (N, C)."""
    if x.data.ndim not in (3, 4):
        raise ShapeError(f"global_avg_pool input must have rank 3 or 4, got {x.data.ndim}")
    h, w = x.data.shape[-2], x.data.shape[-1]
    out = Tensor(x.data.mean(axis=(-2, -1)))
    if tape is not None:
        def _bw():
            if out.grad is None:
                return
            g = out.grad[..., None, None] / (h * w)
            x.accumulate_grad(np.broadcast_to(g, x.data.shape).copy())
        tape.record(_bw)
    return out


def add(a: Tensor, b: Tensor, tape: Optional[Tape] = None) -> Tensor:
    """Elementwise sum of two same-shape tensors (residual skips)."""
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add shapes differ: {a.data.shape} vs {b.data.shape}")
    out = Tensor(a.data + b.data)
    if tape is not None:
        def _bw():
            if out.grad is None:
                return
            a.accumulate_grad(out.grad)
            b.accumulate_grad(out.grad)
        tape.record(_bw)
    return out


def concat(a: Tensor, b: Tensor, tape: Optional[Tape] = None) -> Tensor:
    """Concatenate along the last axis (feature fusion)."""
    if a.data.ndim != b.data.ndim:
        raise ShapeError("concat operands must have equal rank")
    if a.data.shape[:-1] != b.data.shape[:-1]:
        raise ShapeError(
            f"concat leading shapes differ: {a.data.shape} vs {b.data.shape}")
    na = a.data.shape[-1]
    out = Tensor(np.concatenate([a.data, b.data], axis=-1))
    if tape is not None:
        def _bw():
            if out.grad is None:
                return
            a.accumulate_grad(out.grad[..., :na])
            b.accumulate_grad(out.grad[..., na:])
        tape.record(_bw)
    return out


def avg_pool2(x: Tensor, tape: Optional[Tape] = None) -> Tensor:
    """2x2 average pooling with stride 2; spatial dims must be even.

    Preserves the global mean exactly, which the parameter-free shortcut in
    the residual backbone relies on.
    """
    if x.data.ndim not in (3, 4):
        raise ShapeError(f"avg_pool2 input must have rank 3 or 4, got {x.data.ndim}")
    h, w = x.data.shape[-2], x.data.shape[-1]
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2 needs even spatial dims, got {h}x{w}")
    lead = x.data.shape[:-2]
    blocks = x.data.reshape(*lead, h // 2, 2, w // 2, 2)
    out = Tensor(blocks.mean(axis=(-3, -1)))
    if tape is not None:
        def _bw():
            if out.grad is None:
                return
            g = (out.grad / 4.0)[..., :, None, :, None]
            x.accumulate_grad(np.broadcast_to(
                g, lead + (h // 2, 2, w // 2, 2)).reshape(x.data.shape).copy())
        tape.record(_bw)
    return out


def repeat_channels(x: Tensor, reps: int, tape: Optional[Tape] = None) -> Tensor:
    """Replicate each channel ``reps`` times consecutively along the channel axis."""
    if x.data.ndim not in (3, 4):
        raise ShapeError(f"repeat_channels input must have rank 3 or 4, got {x.data.ndim}")
    if reps < 1:
        raise ShapeError(f"reps must be >= 1, got {reps}")
    axis = x.data.ndim - 3
    out = Tensor(np.repeat(x.data, reps, axis=axis))
    if tape is not None:
        c = x.data.shape[axis]
        hw = x.data.shape[-2:]
        lead = x.data.shape[:axis]

        def _bw():
            if out.grad is None:
                return
            g = out.grad.reshape(*lead, c, reps, *hw).sum(axis=axis + 1)
            x.accumulate_grad(g)
        tape.record(_bw)
    return out


def tsum(x: Tensor, tape: Optional[Tape] = None) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    out = Tensor(x.data.sum())
    if tape is not None:
        def _bw():
            if out.grad is None:
                return
            x.accumulate_grad(np.full_like(x.data, float(out.grad)))
        tape.record(_bw)
    return out


def _as_array(t: Union[Tensor, ArrayLike]) -> np.ndarray:
    return t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)


def masked_bce(logits: Tensor, targets: Union[Tensor, ArrayLike],
               mask: Union[Tensor, ArrayLike],
               tape: Optional[Tape] = None) -> Tensor:
    """Mean binary cross-entropy from logits over mask==1 entries.

    Uses the stable form max(z,0) - z*t + log(1 + exp(-|z|)).  A fully
    masked input yields loss 0.0 and contributes no gradient.
    """
    z = logits.data
    t = _as_array(targets)
    m = _as_array(mask)
    if z.shape != t.shape or z.shape != m.shape:
        raise ShapeError(
            f"logits {z.shape}, targets {t.shape}, mask {m.shape} must match")
    if not np.all((t == 0.0) | (t == 1.0)):
        raise NumericError("targets must be exactly 0 or 1")
    if not np.all((m == 0.0) | (m == 1.0)):
        raise NumericError("mask must be exactly 0 or 1")
    n_kept = m.sum()
    if n_kept == 0:
        return Tensor(0.0)
    per_elem = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    out = Tensor((per_elem * m).sum() / n_kept)
    if tape is not None:
        def _bw():
            if out.grad is None:
                return
            g = float(out.grad)
            logits.accumulate_grad(g * m * (_sigmoid(z) - t) / n_kept)
        tape.record(_bw)
    return out


def finite_diff_grad(f: Callable[[Tensor], float], x: Tensor,
                     eps: float = 1e-5) -> Tensor:
    """Central-difference gradient oracle: (f(x+eps*e_i) - f(x-eps*e_i)) / 2eps."""
    if eps <= 0:
        raise ShapeError(f"eps must be positive, got {eps}")
    flat = x.data.ravel()
    grad = np.empty_like(flat)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] = flat[i] + eps
        f_hi = float(f(Tensor(bumped.reshape(x.data.shape))))
        bumped[i] = flat[i] - eps
        f_lo = float(f(Tensor(bumped.reshape(x.data.shape))))
        if not (np.isfinite(f_hi) and np.isfinite(f_lo)):
            raise NumericError("objective returned a non-finite value")
        grad[i] = (f_hi - f_lo) / (2.0 * eps)
    return Tensor(grad.reshape(x.data.shape))
