"""Differentiable layer primitives over rank-4 tensors.

Every operation has an explicit backward pass that accumulates into its
parents' gradient buffers; each one is checkable against central finite
differences (see ``gradcheck``). Convolution dispatches to the selected
kernel backend; everything else is vectorized numpy.

Conventions fixed here for determinism: the ReLU subgradient at 0 is 0,
max-pool ties resolve to the first window position in row-major order, and
dropout is inverted (train-time scaling, identity at eval).
"""

from __future__ import annotations

from typing import Optional, Tuple, Union

import numpy as np

from . import backend
from .errors import ShapeError, StateError
from .tensor import Param, Tensor, _from_op


def conv2d(
    x: Tensor, weights: Param, bias: Optional[Param] = None, padding: int = 0
) -> Tensor:
    """2-D cross-correlation with a square kernel, stride 1.

    weights: (c_out, c_in, k, k), bias: (1, c_out, 1, 1) or None (convolutions
    feeding straight into batch norm drop the bias, which normalization would
    cancel anyway). Output spatial size is h + 2*padding - k + 1 per axis.
    """
    w = weights.value
    c_out, c_in, k, k2 = w.shape
    if k != k2:
        raise ShapeError("conv2d", "kernel (square)", k, k2)
    if k < 1:
        raise ShapeError("conv2d", "kernel size", ">= 1", k)
    if padding < 0:
        raise ShapeError("conv2d", "padding (non-negative)", ">= 0", padding)
    if x.shape[1] != c_in:
        raise ShapeError("conv2d", "input channels", c_in, x.shape[1])
    b = bias.value if bias is not None else None
    if b is not None and b.shape != (1, c_out, 1, 1):
        raise ShapeError("conv2d", "bias channels", (1, c_out, 1, 1), b.shape)
    if x.shape[2] + 2 * padding < k or x.shape[3] + 2 * padding < k:
        raise ShapeError("conv2d", "spatial extent vs kernel", f">= {k}", x.shape[2:])

    xp = _pad2d(x.data, padding)
    bvec = b.data.reshape(-1) if b is not None else np.zeros(c_out)
    out_data = backend.conv_forward_padded(xp, w.data, bvec)
    parents = (x, w) if b is None else (x, w, b)
    out = _from_op(out_data, parents)
    if out.requires_grad:

        def _bw():
            g = np.ascontiguousarray(out.grad)
            dxp, dw, db = backend.conv_backward_padded(xp, w.data, g)
            if x.requires_grad:
                x.accumulate_grad(_unpad2d(dxp, padding))
            w.accumulate_grad(dw)
            if b is not None:
                b.accumulate_grad(db.reshape(1, c_out, 1, 1))

        out._backward = _bw
    return out


def _pad2d(a: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return np.ascontiguousarray(a)
    return np.pad(a, ((0, 0), (0, 0), (p, p), (p, p)))


def _unpad2d(a: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return a
    return a[:, :, p:-p, p:-p]


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = _from_op(np.where(mask, x.data, 0.0), (x,))
    if out.requires_grad:

        def _bw():
            x.accumulate_grad(out.grad * mask)

        out._backward = _bw
    return out


def sigmoid(x: Tensor) -> Tensor:
    """Numerically stable logistic; backward multiplies by A(1-A)."""
    d = x.data
    out_data = np.empty_like(d)
    pos = d >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    out_data[~pos] = ex / (1.0 + ex)
    out = _from_op(out_data, (x,))
    if out.requires_grad:

        def _bw():
            x.accumulate_grad(out.grad * out_data * (1.0 - out_data))

        out._backward = _bw
    return out


def softplus(x: Tensor) -> Tensor:
    """log(1 + e^x); strictly positive, used to constrain learnable weights."""
    out = _from_op(np.logaddexp(0.0, x.data), (x,))
    if out.requires_grad:

        def _bw():
            x.accumulate_grad(out.grad / (1.0 + np.exp(-x.data)))

        out._backward = _bw
    return out


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip values to [lo, hi]; gradient is zero outside the open interval."""
    out = _from_op(np.clip(x.data, lo, hi), (x,))
    if out.requires_grad:
        inside = (x.data > lo) & (x.data < hi)

        def _bw():
            x.accumulate_grad(out.grad * inside)

        out._backward = _bw
    return out


class BatchNormState:
    """Running per-channel statistics updated by the train-mode pass."""

    __slots__ = ("running_mean", "running_var", "initialized")

    def __init__(self, channels: int):
        self.running_mean = np.zeros(channels, dtype=np.float64)
        self.running_var = np.ones(channels, dtype=np.float64)
        self.initialized = False


def batch_norm(
    x: Tensor,
    scale: Param,
    shift: Param,
    state: BatchNormState,
    mode: str,
    eps: float = 1e-5,
    momentum: float = 0.1,
) -> Tensor:
    """Per-channel normalization over (n, h, w) with affine scale/shift.

    Train mode normalizes with batch statistics (population variance) and
    updates the running stats by exponential moving average; eval mode uses
    the running stats and fails if no train-mode pass ever ran.
    """
    c = x.shape[1]
    if scale.shape != (1, c, 1, 1):
        raise ShapeError("batch_norm", "scale channels", (1, c, 1, 1), scale.shape)
    if shift.shape != (1, c, 1, 1):
        raise ShapeError("batch_norm", "shift channels", (1, c, 1, 1), shift.shape)
    if eps <= 0:
        raise ShapeError("batch_norm", "eps (positive)", "> 0", eps)
    ga, be = scale.value, shift.value

    if mode == "train":
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        state.running_mean = (1.0 - momentum) * state.running_mean + momentum * mu
        state.running_var = (1.0 - momentum) * state.running_var + momentum * var
        state.initialized = True

        mu4 = mu.reshape(1, c, 1, 1)
        inv = 1.0 / np.sqrt(var + eps).reshape(1, c, 1, 1)
        xc = x.data - mu4
        xhat = xc * inv
        out = _from_op(ga.data * xhat + be.data, (x, ga, be))
        if out.requires_grad:
            m = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]

            def _bw():
                g = out.grad
                ga.accumulate_grad((g * xhat).sum(axis=(0, 2, 3)).reshape(1, c, 1, 1))
                be.accumulate_grad(g.sum(axis=(0, 2, 3)).reshape(1, c, 1, 1))
                if x.requires_grad:
                    dxhat = g * ga.data
                    dvar = (dxhat * xc).sum(axis=(0, 2, 3)).reshape(1, c, 1, 1) * (
                        -0.5
                    ) * inv**3
                    dmu = -(dxhat * inv).sum(axis=(0, 2, 3)).reshape(1, c, 1, 1) + dvar * (
                        -2.0 / m
                    ) * xc.sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
                    x.accumulate_grad(dxhat * inv + dvar * 2.0 * xc / m + dmu / m)

            out._backward = _bw
        return out

    if mode == "eval":
        if not state.initialized:
            raise StateError(
                "batch_norm: eval mode before any train-mode call "
                "(running statistics uninitialized)"
            )
        inv = 1.0 / np.sqrt(state.running_var + eps).reshape(1, c, 1, 1)
        xhat = (x.data - state.running_mean.reshape(1, c, 1, 1)) * inv
        out = _from_op(ga.data * xhat + be.data, (x, ga, be))
        if out.requires_grad:

            def _bw():
                g = out.grad
                ga.accumulate_grad((g * xhat).sum(axis=(0, 2, 3)).reshape(1, c, 1, 1))
                be.accumulate_grad(g.sum(axis=(0, 2, 3)).reshape(1, c, 1, 1))
                if x.requires_grad:
                    x.accumulate_grad(g * ga.data * inv)

            out._backward = _bw
        return out

    raise ValueError(f"batch_norm: mode must be 'train' or 'eval', got {mode!r}")


def max_pool2(x: Tensor) -> Tuple[Tensor, np.ndarray]:
    """2x2 max pooling, stride 2; indices record the argmax for routing.

    Ties go to the first window position in row-major order; the returned
    index array has shape (n, c, h/2, w/2) with values in 0..3.
    """
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError("max_pool2", "spatial dims (even)", "even", (h, w))
    windows = (
        x.data.reshape(n, c, h // 2, 2, w // 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h // 2, w // 2, 4)
    )
    idx = windows.argmax(axis=-1)
    out_data = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
    out = _from_op(out_data, (x,))
    if out.requires_grad:

        def _bw():
            buf = np.zeros((n, c, h // 2, w // 2, 4), dtype=np.float64)
            np.put_along_axis(buf, idx[..., None], out.grad[..., None], axis=-1)
            x.accumulate_grad(
                buf.reshape(n, c, h // 2, w // 2, 2, 2)
                .transpose(0, 1, 2, 4, 3, 5)
                .reshape(n, c, h, w)
            )

        out._backward = _bw
    return out, idx


def dropout(
    x: Tensor,
    rate: float,
    mode: str,
    rng: Union[int, np.random.Generator],
) -> Tensor:
    """Inverted dropout: train mode zeroes with probability ``rate`` and
    rescales survivors by 1/(1-rate); eval mode is the identity. The same
    seed yields the same mask."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout: rate must be in [0, 1), got {rate}")
    if mode == "eval" or rate == 0.0:
        return x
    gen = np.random.default_rng(rng) if isinstance(rng, (int, np.integer)) else rng
    keep = (gen.random(x.shape) >= rate) / (1.0 - rate)
    out = _from_op(x.data * keep, (x,))
    if out.requires_grad:

        def _bw():
            x.accumulate_grad(out.grad * keep)

        out._backward = _bw
    return out


def concat_channels(*tensors: Tensor) -> Tensor:
    """Concatenate along the channel axis; batch and spatial dims must match."""
    if not tensors:
        raise ValueError("concat_channels: at least one input required")
    if len(tensors) == 1:
        return tensors[0]
    first = tensors[0]
    for t in tensors[1:]:
        for axis, name in ((0, "batch"), (2, "height"), (3, "width")):
            if t.shape[axis] != first.shape[axis]:
                raise ShapeError("concat_channels", name, first.shape[axis], t.shape[axis])
    out = _from_op(np.concatenate([t.data for t in tensors], axis=1), tuple(tensors))
    if out.requires_grad:
        offsets = np.cumsum([0] + [t.shape[1] for t in tensors])

        def _bw():
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    t.accumulate_grad(out.grad[:, lo:hi])

        out._backward = _bw
    return out


def huber_slope(x: Tensor, delta: float) -> Tensor:
    """Derivative of the Huber penalty, clamp(x/delta, -1, 1), fused."""
    if delta <= 0:
        raise ValueError(f"huber_slope: delta must be positive, got {delta}")
    out = _from_op(np.clip(x.data / delta, -1.0, 1.0), (x,))
    if out.requires_grad:
        inv = (np.abs(x.data) < delta) / delta

        def _bw():
            x.accumulate_grad(out.grad * inv)

        out._backward = _bw
    return out


def huber(x: Tensor, delta: float) -> Tensor:
    """Smoothed absolute value: z^2/(2d) inside |z| <= d, |z| - d/2 outside."""
    if delta <= 0:
        raise ValueError(f"huber: delta must be positive, got {delta}")
    a = np.abs(x.data)
    inside = a <= delta
    out = _from_op(np.where(inside, x.data**2 / (2.0 * delta), a - delta / 2.0), (x,))
    if out.requires_grad:
        slope = np.clip(x.data / delta, -1.0, 1.0)

        def _bw():
            x.accumulate_grad(out.grad * slope)

        out._backward = _bw
    return out


