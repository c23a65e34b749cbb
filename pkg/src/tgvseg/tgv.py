"""Second-order total generalized variation with learnable balance weights.

The energy of a map v approximates

    min_w  p1 * sum |grad v - w|  +  p2 * sum |sym_grad(w)|

with forward differences on the valid grid, the symmetrized Jacobian
eps(w) = (grad w + grad w^T) / 2, and Huber-smoothed absolute values. The
inner minimum over the vector field w is realized by a fixed number of
unrolled gradient-descent steps starting from w = grad v, so the whole
computation stays differentiable with respect to v and both balance weights.

p1 and p2 are stored as unconstrained raw scalars and mapped through softplus,
which keeps them strictly positive under any optimizer trajectory.

Differences use the valid grid (the differentiated axis shrinks by one), so
the discrete gradient of an affine map is exactly constant and the energy's
null space contains constants and affine ramps exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np

from .errors import ConfigError, EngineError
from .ops import huber, huber_slope, softplus
from .tensor import Param, Tensor, _from_op


def softplus_inverse(y: float) -> float:
    """Raw value r with softplus(r) = y, for y > 0."""
    if y <= 0:
        raise ConfigError(f"softplus_inverse: target must be positive, got {y}")
    return float(y + math.log(-math.expm1(-y)))


def _scalar_param(value: float) -> Param:
    return Param(np.full((1, 1, 1, 1), value, dtype=np.float64))


@dataclass
class TGVParams:
    """Learnable balance weights plus the loss and inner-solver settings.

    Stability note: the unrolled descent is a fixed-step method whose
    curvature near the Huber kink scales like (p1 + 8*p2)/huber_delta, so
    keep inner_lr below roughly huber_delta / (p1 + 8*p2); the defaults sit
    comfortably inside that region.
    """

    p1_raw: Param = field(default_factory=lambda: _scalar_param(softplus_inverse(1.0)))
    p2_raw: Param = field(default_factory=lambda: _scalar_param(softplus_inverse(1.0)))
    gamma: float = 1e-3
    lam: float = 0.0
    order: int = 2
    inner_steps: int = 10
    inner_lr: float = 0.1
    huber_delta: float = 0.5

    @staticmethod
    def create(
        p1: float = 1.0,
        p2: float = 1.0,
        gamma: float = 1e-3,
        lam: float = 0.0,
        inner_steps: int = 10,
        inner_lr: float = 0.1,
        huber_delta: float = 0.5,
    ) -> "TGVParams":
        return TGVParams(
            p1_raw=_scalar_param(softplus_inverse(p1)),
            p2_raw=_scalar_param(softplus_inverse(p2)),
            gamma=gamma,
            lam=lam,
            inner_steps=inner_steps,
            inner_lr=inner_lr,
            huber_delta=huber_delta,
        )

    def validate(self) -> None:
        if self.order != 2:
            raise ConfigError(f"TGVParams: only order 2 is supported, got {self.order}")
        if self.gamma < 0 or self.lam < 0:
            raise ConfigError("TGVParams: gamma and lam must be non-negative")
        if self.inner_steps < 1:
            raise ConfigError("TGVParams: inner_steps must be >= 1")
        if self.inner_lr <= 0 or self.huber_delta <= 0:
            raise ConfigError("TGVParams: inner_lr and huber_delta must be positive")

    def p1(self) -> Tensor:
        return softplus(self.p1_raw.value)

    def p2(self) -> Tensor:
        return softplus(self.p2_raw.value)

    def params(self) -> List[Param]:
        return [self.p1_raw, self.p2_raw]


# --- forward differences on the valid grid and their adjoints ---


def diff_h(x: Tensor) -> Tensor:
    """Forward difference along height; output has h-1 rows."""
    out = _from_op(np.ascontiguousarray(x.data[:, :, 1:, :] - x.data[:, :, :-1, :]), (x,))
    if out.requires_grad:

        def _bw():
            g = out.grad
            dx = np.zeros_like(x.data)
            dx[:, :, 1:, :] += g
            dx[:, :, :-1, :] -= g
            x.accumulate_grad(dx)

        out._backward = _bw
    return out


def diff_w(x: Tensor) -> Tensor:
    """Forward difference along width; output has w-1 columns."""
    out = _from_op(np.ascontiguousarray(x.data[:, :, :, 1:] - x.data[:, :, :, :-1]), (x,))
    if out.requires_grad:

        def _bw():
            g = out.grad
            dx = np.zeros_like(x.data)
            dx[:, :, :, 1:] += g
            dx[:, :, :, :-1] -= g
            x.accumulate_grad(dx)

        out._backward = _bw
    return out


def diff_h_adj(y: Tensor) -> Tensor:
    """Linear transpose of diff_h: maps h-1 rows back to h rows."""
    n, c, hm1, w = y.shape
    data = np.zeros((n, c, hm1 + 1, w), dtype=np.float64)
    data[:, :, 1:, :] += y.data
    data[:, :, :-1, :] -= y.data
    out = _from_op(data, (y,))
    if out.requires_grad:

        def _bw():
            g = out.grad
            y.accumulate_grad(g[:, :, 1:, :] - g[:, :, :-1, :])

        out._backward = _bw
    return out


def diff_w_adj(y: Tensor) -> Tensor:
    """Linear transpose of diff_w: maps w-1 columns back to w columns."""
    n, c, h, wm1 = y.shape
    data = np.zeros((n, c, h, wm1 + 1), dtype=np.float64)
    data[:, :, :, 1:] += y.data
    data[:, :, :, :-1] -= y.data
    out = _from_op(data, (y,))
    if out.requires_grad:

        def _bw():
            g = out.grad
            y.accumulate_grad(g[:, :, :, 1:] - g[:, :, :, :-1])

        out._backward = _bw
    return out


def tgv2_energy(v: Tensor, params: TGVParams) -> Tuple[Tensor, Tuple[Tensor, Tensor]]:
    """Unrolled second-order TGV energy of a feature map.

    Returns (energy, (w_h, w_w)): the scalar energy tensor and the final
    vector-field estimate. Channels are penalized independently and summed,
    so multi-channel input equals the sum of per-channel energies.

    The inner descent over w uses the analytic gradient of the Huberized
    objective expressed with graph operations, which keeps the energy
    differentiable with respect to v and both balance weights.
    """
    params.validate()
    n, c, h, w = v.shape
    if h < 2 or w < 2:
        raise EngineError(f"tgv2_energy: spatial dims must be >= 2, got {(h, w)}")
    if not np.all(np.isfinite(v.data)):
        raise EngineError("tgv2_energy: non-finite input")

    delta = params.huber_delta
    p1 = params.p1()
    p2 = params.p2()
    neg_p1 = -1.0 * p1
    lr = params.inner_lr

    gh = diff_h(v)  # (n, c, h-1, w)
    gw = diff_w(v)  # (n, c, h, w-1)
    wh, ww = gh, gw  # init at grad v

    for _ in range(params.inner_steps):
        rh = gh - wh
        rw = gw - ww
        e_hh = diff_h(wh)                                  # (n, c, h-2, w)
        e_ww = diff_w(ww)                                  # (n, c, h, w-2)
        e_hw = 0.5 * (diff_w(wh) + diff_h(ww))             # (n, c, h-1, w-1)
        # d(energy)/dw, with huber' = clamp(z/delta, -1, 1):
        step_h = neg_p1 * huber_slope(rh, delta) + p2 * (
            diff_h_adj(huber_slope(e_hh, delta)) + diff_w_adj(huber_slope(e_hw, delta))
        )
        step_w = neg_p1 * huber_slope(rw, delta) + p2 * (
            diff_w_adj(huber_slope(e_ww, delta)) + diff_h_adj(huber_slope(e_hw, delta))
        )
        wh = wh - lr * step_h
        ww = ww - lr * step_w

    e_hh = diff_h(wh)
    e_ww = diff_w(ww)
    e_hw = 0.5 * (diff_w(wh) + diff_h(ww))
    first = huber(gh - wh, delta).sum() + huber(gw - ww, delta).sum()
    second = (
        huber(e_hh, delta).sum()
        + huber(e_ww, delta).sum()
        + 2.0 * huber(e_hw, delta).sum()
    )
    energy = p1 * first + p2 * second
    return energy, (wh, ww)


def tgv_loss_term(feature_maps: List[Tensor], params: TGVParams) -> Tensor:
    """Regularization contribution of the upsampled decoder maps.

    gamma * sum of tgv2_energy over maps plus lam * sum of squared-norm
    fidelity over the same maps. With gamma = lam = 0 the term is exactly
    zero and no graph is built over the maps.
    """
    if not feature_maps:
        raise ValueError("tgv_loss_term: feature map list must be non-empty")
    params.validate()
    if params.gamma == 0.0 and params.lam == 0.0:
        return Tensor.scalar(0.0)
    total = Tensor.scalar(0.0)
    for fmap in feature_maps:
        if params.gamma != 0.0:
            energy, _ = tgv2_energy(fmap, params)
            total = total + params.gamma * energy
        if params.lam != 0.0:
            total = total + params.lam * (fmap * fmap).sum()
    return total
