"""Finite-difference verification of analytic gradients.

``grad_check`` perturbs every element of every named parameter by a central
step and compares the numeric slope of a scalar loss against the gradient the
backward machinery produced. The numeric side never touches the analytic
code path, so it stays an independent oracle.

``standard_battery`` bundles one check per differentiable primitive plus the
regularizer and a small end-to-end network; the CLI and the acceptance suite
both run it. Loss closures weight outputs with fixed random coefficients so
the upstream gradient is non-uniform (a plain sum is a degenerate check for
normalization layers, whose output sum is nearly input-independent).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Tuple

import numpy as np

from .errors import TrainingError
from .tensor import Param, Tensor


@dataclass
class GradCheckEntry:
    name: str
    max_rel_err: float
    passed: bool


@dataclass
class GradCheckReport:
    step: float
    tolerance: float
    entries: List[GradCheckEntry] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    def format_table(self) -> str:
        width = max([len(e.name) for e in self.entries] + [9])
        lines = [f"{'parameter':<{width}}  {'max rel err':>12}  result"]
        for e in self.entries:
            lines.append(
                f"{e.name:<{width}}  {e.max_rel_err:>12.3e}  "
                f"{'pass' if e.passed else 'FAIL'}"
            )
        return "\n".join(lines)


def _loss_value(forward: Callable[[], Tensor]) -> float:
    loss = forward()
    val = loss.item()
    if not np.isfinite(val):
        raise TrainingError("grad_check: forward produced a non-finite loss")
    return val


def grad_check(
    forward: Callable[[], Tensor],
    params: Dict[str, Param],
    step: float = 1e-5,
    tolerance: float = 1e-4,
) -> GradCheckReport:
    """Compare analytic gradients of ``forward()`` against central differences.

    ``forward`` must return a scalar loss and read the current values of
    ``params`` (closures over the Param objects). Relative error per element
    is |analytic - numeric| / max(|analytic|, |numeric|, 1e-8); an entry
    passes iff all of its elements fall below ``tolerance``. Inputs can be
    checked by wrapping them as named Params.
    """
    if step <= 0:
        raise ValueError(f"grad_check: step must be positive, got {step}")
    for p in params.values():
        p.zero_grad()
    loss = forward()
    if not np.isfinite(loss.item()):
        raise TrainingError("grad_check: forward produced a non-finite loss")
    loss.backward()
    analytic = {name: np.array(p.grad, copy=True) for name, p in params.items()}

    report = GradCheckReport(step=step, tolerance=tolerance)
    for name, p in params.items():
        flat = p.value.data.reshape(-1)
        numeric = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = _loss_value(forward)
            flat[i] = orig - step
            down = _loss_value(forward)
            flat[i] = orig
            numeric[i] = (up - down) / (2.0 * step)
        a = analytic[name].reshape(-1)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-8)
        rel = np.abs(a - numeric) / denom
        worst = float(rel.max()) if rel.size else 0.0
        report.entries.append(GradCheckEntry(name, worst, worst < tolerance))
    return report


def _weight_tensor(shape, tag: int) -> Tensor:
    return Tensor(np.random.default_rng(1000 + tag).uniform(-1.0, 1.0, shape))


def standard_battery(
    tolerance: float = 1e-4, step: float = 1e-5, loose_tolerance: float = 1e-3
) -> List[Tuple[str, GradCheckReport]]:
    """Run the full verification battery; returns (name, report) pairs.

    ``loose_tolerance`` applies to the regularizer and the end-to-end
    network, whose unrolled inner solver and deeper composition accumulate
    more roundoff than a single primitive.
    """
    from . import ops
    from .network import UNetPPConfig, build_network
    from .tgv import TGVParams, tgv_loss_term
    from .training import bce_loss, network_loss
    from .upsample import bilinear_upsample, transpose_conv_upsample

    rng = np.random.default_rng(19)
    results: List[Tuple[str, GradCheckReport]] = []

    def run(name, fn, params, tol):
        results.append((name, grad_check(fn, params, step=step, tolerance=tol)))

    x = Param(rng.uniform(-1, 1, (2, 3, 6, 6)))
    w = Param(rng.uniform(-1, 1, (4, 3, 3, 3)))
    b = Param(rng.uniform(-1, 1, (1, 4, 1, 1)))
    wsum = _weight_tensor((2, 4, 6, 6), 0)
    run(
        "conv2d",
        lambda: (ops.conv2d(x.value, w, b, padding=1) * wsum).sum(),
        {"input": x, "weights": w, "bias": b},
        tolerance,
    )

    xb = Param(rng.uniform(-1, 1, (3, 4, 5, 5)))
    sc = Param(rng.uniform(0.5, 1.5, (1, 4, 1, 1)))
    sh = Param(rng.uniform(-0.5, 0.5, (1, 4, 1, 1)))
    wbn = _weight_tensor((3, 4, 5, 5), 1)

    def bn_loss():
        state = ops.BatchNormState(4)
        out = ops.batch_norm(xb.value, sc, sh, state, "train")
        return (out * wbn).sum()

    run("batch_norm", bn_loss, {"input": xb, "scale": sc, "shift": sh}, tolerance)

    xp = Param(rng.uniform(-1, 1, (2, 2, 6, 6)))
    wpool = _weight_tensor((2, 2, 3, 3), 2)
    run(
        "max_pool2",
        lambda: (ops.max_pool2(xp.value)[0] * wpool).sum(),
        {"input": xp},
        tolerance,
    )

    xd = Param(rng.uniform(-1, 1, (2, 2, 6, 6)))
    wdrop = _weight_tensor((2, 2, 6, 6), 3)
    run(
        "dropout_fixed_mask",
        lambda: (ops.dropout(xd.value, 0.4, "train", 77) * wdrop).sum(),
        {"input": xd},
        tolerance,
    )

    xs = Param(rng.uniform(-1, 1, (2, 2, 4, 4)))
    wsig = _weight_tensor((2, 2, 4, 4), 4)
    run("sigmoid", lambda: (ops.sigmoid(xs.value) * wsig).sum(), {"input": xs}, tolerance)
    run("relu", lambda: (ops.relu(xs.value) * wsig).sum(), {"input": xs}, tolerance)

    xc1 = Param(rng.uniform(-1, 1, (2, 2, 4, 4)))
    xc2 = Param(rng.uniform(-1, 1, (2, 3, 4, 4)))
    wcat = _weight_tensor((2, 5, 4, 4), 5)
    run(
        "concat_channels",
        lambda: (ops.concat_channels(xc1.value, xc2.value) * wcat).sum(),
        {"a": xc1, "b": xc2},
        tolerance,
    )

    xu = Param(rng.uniform(-1, 1, (2, 2, 5, 5)))
    wup = _weight_tensor((2, 2, 10, 10), 6)
    run(
        "bilinear_upsample",
        lambda: (bilinear_upsample(xu.value) * wup).sum(),
        {"input": xu},
        tolerance,
    )

    xt = Param(rng.uniform(-1, 1, (2, 3, 4, 4)))
    wt = Param(rng.uniform(-1, 1, (3, 2, 3, 3)))
    wtc = _weight_tensor((2, 2, 8, 8), 7)
    run(
        "transpose_conv_upsample",
        lambda: (transpose_conv_upsample(xt.value, wt) * wtc).sum(),
        {"input": xt, "weights": wt},
        tolerance,
    )

    pb = Param(rng.uniform(0.2, 0.8, (1, 1, 6, 6)))
    target = Tensor((rng.random((1, 1, 6, 6)) < 0.4).astype(float))
    run("bce_loss", lambda: bce_loss(pb.value, target), {"pred": pb}, tolerance)

    fmap = Param(rng.uniform(-1, 1, (1, 2, 6, 6)))
    tgv = TGVParams.create(gamma=0.7, lam=0.3)
    run(
        "tgv_loss_term",
        lambda: tgv_loss_term([fmap.value], tgv),
        {"map": fmap, "p1_raw": tgv.p1_raw, "p2_raw": tgv.p2_raw},
        loose_tolerance,
    )

    net = build_network(
        UNetPPConfig(
            depth=2,
            base_channels=2,
            seed=7,
            dropout_rate=0.0,
            tgv=TGVParams.create(gamma=1e-3),
        )
    )
    xe = Tensor(rng.uniform(0, 1, (2, 1, 8, 8)))
    te = Tensor((rng.random((2, 1, 8, 8)) < 0.3).astype(float))

    def net_loss():
        return network_loss(net, net.forward(xe, "train"), te)

    # deeper composition puts more kinks (relu, pooling argmax, huber
    # saturation) near any finite-difference window; a smaller step keeps
    # the probes on one side of them
    results.append(
        ("end_to_end_depth2",
         grad_check(net_loss, net.params, step=min(step, 1e-6), tolerance=loose_tolerance))
    )
    return results
