"""Decoder upsampling operators and the artifact quantifier.

Two routes double a feature map's resolution:

* ``bilinear_upsample`` — closed form, parameter-free. Each output pixel is
  the unique function B0 + B1*x1 + B2*x2 + B3*x1*x2 through its four nearest
  input neighbors, evaluated at the half-pixel-center mapping
  x_in = (x_out + 0.5)/2 - 0.5 with border clamping. Linear, so the backward
  pass is the exact transpose of the forward map.
* ``transpose_conv_upsample`` — learned stride-2 transposed convolution, kept
  as the baseline whose uneven kernel overlap produces parity-periodic
  artifacts when the kernel size is not divisible by the stride.

``checkerboard_score`` quantifies those artifacts; ``solve_bilinear_weights``
is the direct 4x4 solve that serves as the independent oracle for the fast
interpolation path.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence, Tuple

import numpy as np

from .errors import ShapeError
from .tensor import Param, Tensor, _from_op


@dataclass(frozen=True)
class BilinearWeights:
    """Coefficients of g(x1, x2) = b0 + b1*x1 + b2*x2 + b3*x1*x2."""

    b0: float
    b1: float
    b2: float
    b3: float

    def __call__(self, x1: float, x2: float) -> float:
        return self.b0 + self.b1 * x1 + self.b2 * x2 + self.b3 * x1 * x2


def solve_bilinear_weights(
    coords: Sequence[Tuple[float, float]], values: Sequence[float]
) -> BilinearWeights:
    """Solve the 4x4 system that fits a bilinear surface through four points.

    ``coords`` are four (x1, x2) rectangle corners, ``values`` the intensities
    there. Degenerate corner sets (duplicates, collinear points) make the
    matrix singular and raise ValueError.
    """
    if len(coords) != 4 or len(values) != 4:
        raise ValueError("solve_bilinear_weights: exactly four corners required")
    mat = np.array([[1.0, x1, x2, x1 * x2] for x1, x2 in coords], dtype=np.float64)
    try:
        sol = np.linalg.solve(mat, np.asarray(values, dtype=np.float64))
    except np.linalg.LinAlgError as exc:
        raise ValueError(f"solve_bilinear_weights: degenerate corner set ({exc})") from exc
    if not np.all(np.isfinite(sol)):
        raise ValueError("solve_bilinear_weights: non-finite solution")
    return BilinearWeights(*map(float, sol))


@lru_cache(maxsize=64)
def _interp_matrix(n_in: int) -> np.ndarray:
    """Per-axis interpolation matrix for factor-2, half-pixel centers.

    Output coordinate o maps to input coordinate (o + 0.5)/2 - 0.5; the two
    nearest neighbors blend with weights (1-t, t), clamped at the border.
    The weights are exactly 0.25/0.75 in binary floating point, so constant
    inputs reproduce bit-exactly.
    """
    r = np.zeros((2 * n_in, n_in), dtype=np.float64)
    for o in range(2 * n_in):
        xi = (o + 0.5) / 2.0 - 0.5
        lo = int(np.floor(xi))
        t = xi - lo
        l0 = min(max(lo, 0), n_in - 1)
        l1 = min(max(lo + 1, 0), n_in - 1)
        r[o, l0] += 1.0 - t
        r[o, l1] += t
    return r


def bilinear_upsample(x: Tensor, factor: int = 2) -> Tensor:
    """Closed-form factor-2 upsampling (see module docstring)."""
    if factor != 2:
        raise ValueError(f"bilinear_upsample: only factor 2 is supported, got {factor}")
    n, c, h, w = x.shape
    if h < 1 or w < 1:
        raise ShapeError("bilinear_upsample", "spatial dims", ">= 1", (h, w))
    rh = _interp_matrix(h)
    rw = _interp_matrix(w)
    out = _from_op(np.einsum("ih,nchw,jw->ncij", rh, x.data, rw, optimize=True), (x,))
    if out.requires_grad:

        def _bw():
            x.accumulate_grad(
                np.einsum("ih,ncij,jw->nchw", rh, out.grad, rw, optimize=True)
            )

        out._backward = _bw
    return out


def transpose_conv_upsample(x: Tensor, weights: Param, stride: int = 2) -> Tensor:
    """Learned stride-2 transposed convolution producing exactly 2h x 2w.

    weights: (c_in, c_out, k, k) with k >= stride. The raw transposed output
    ((h-1)*stride + k per axis) is center-cropped to the target size with
    offset (raw - target) // 2.
    """
    w = weights.value
    c_in, c_out, k, k2 = w.shape
    if k != k2:
        raise ShapeError("transpose_conv_upsample", "kernel (square)", k, k2)
    if stride != 2:
        raise ValueError(f"transpose_conv_upsample: stride must be 2, got {stride}")
    if k < stride:
        raise ShapeError("transpose_conv_upsample", "kernel vs stride", f">= {stride}", k)
    if x.shape[1] != c_in:
        raise ShapeError("transpose_conv_upsample", "input channels", c_in, x.shape[1])

    n, _, h, wd = x.shape
    raw_h, raw_w = (h - 1) * stride + k, (wd - 1) * stride + k
    th, tw = stride * h, stride * wd
    oy, ox = (raw_h - th) // 2, (raw_w - tw) // 2

    raw = np.zeros((n, c_out, raw_h, raw_w), dtype=np.float64)
    for dy in range(k):
        for dx in range(k):
            contrib = np.einsum("nchw,cd->ndhw", x.data, w.data[:, :, dy, dx])
            raw[:, :, dy : dy + stride * h : stride, dx : dx + stride * wd : stride] += contrib
    out = _from_op(np.ascontiguousarray(raw[:, :, oy : oy + th, ox : ox + tw]), (x, w))
    if out.requires_grad:

        def _bw():
            graw = np.zeros((n, c_out, raw_h, raw_w), dtype=np.float64)
            graw[:, :, oy : oy + th, ox : ox + tw] = out.grad
            dx_acc = np.zeros_like(x.data) if x.requires_grad else None
            dw_acc = np.zeros_like(w.data)
            for dy in range(k):
                for dx in range(k):
                    gslice = graw[
                        :, :, dy : dy + stride * h : stride, dx : dx + stride * wd : stride
                    ]
                    if dx_acc is not None:
                        dx_acc += np.einsum("ndhw,cd->nchw", gslice, w.data[:, :, dy, dx])
                    dw_acc[:, :, dy, dx] = np.einsum("nchw,ndhw->cd", x.data, gslice)
            if dx_acc is not None:
                x.accumulate_grad(dx_acc)
            w.accumulate_grad(dw_acc)

        out._backward = _bw
    return out


def checkerboard_score(image) -> float:
    """Variance of the four pixel-parity-class means.

    Pixels are bucketed by (row mod 2, col mod 2) over every batch/channel
    plane; the score is zero iff all four classes share one mean, which is
    exactly the signature a parity-periodic upsampling artifact breaks.
    """
    data = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    if data.ndim == 2:
        data = data[None, None]
    h, w = data.shape[-2], data.shape[-1]
    if h < 4 or w < 4:
        raise ShapeError("checkerboard_score", "spatial dims", ">= 4", (h, w))
    means = [data[..., a::2, b::2].mean() for a in (0, 1) for b in (0, 1)]
    return float(np.var(means))
