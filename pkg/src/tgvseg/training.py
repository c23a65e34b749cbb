"""Loss assembly, optimizers, the LR-plateau schedule, k-fold splitting, and
the epoch loop.

The validation loss drives both halving and early stopping with one counter:
the learning rate halves whenever the count of consecutive non-improving
epochs reaches a positive multiple of ``plateau_patience`` (so each halving
requires a fresh plateau), and training stops when the count reaches
``early_stop_patience``. Improvement means the loss dropped by at least
``min_delta`` below the best seen; ties are non-improvements.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from . import metrics as metrics_mod
from .data import AugmentSpec, Sample, augment
from .errors import ConfigError, ShapeError, TrainingError
from .network import Network
from .tensor import Param, Tensor, no_grad
from .tgv import TGVParams, tgv_loss_term
from .util import child_rng

BCE_CLAMP = 1e-7


@dataclass
class TrainConfig:
    epochs: int = 100
    learning_rate: float = 1e-4
    batch_size: int = 32
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    plateau_patience: int = 10
    early_stop_patience: int = 20
    min_delta: float = 1e-6
    folds: int = 10
    val_fraction: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("beta1/beta2 must lie in (0, 1)")
        if self.adam_eps <= 0:
            raise ConfigError("adam_eps must be positive")
        if self.plateau_patience < 1 or self.early_stop_patience < 1:
            raise ConfigError("patience values must be >= 1")
        if self.plateau_patience >= self.early_stop_patience:
            raise ConfigError("plateau_patience must be smaller than early_stop_patience")
        if self.folds < 2:
            raise ConfigError("folds must be >= 2")
        if not 0 < self.val_fraction < 1:
            raise ConfigError("val_fraction must be in (0, 1)")


@dataclass(frozen=True)
class ScheduleState:
    best_val_loss: float = math.inf
    epochs_since_improvement: int = 0
    current_lr: float = 1e-4
    stopped: bool = False


def schedule_update(state: ScheduleState, val_loss: float, cfg: TrainConfig) -> ScheduleState:
    """Advance the plateau schedule by one epoch's validation loss."""
    if not np.isfinite(val_loss):
        raise TrainingError(f"schedule_update: non-finite validation loss {val_loss}")
    if state.best_val_loss - val_loss >= cfg.min_delta:
        return replace(state, best_val_loss=val_loss, epochs_since_improvement=0)
    count = state.epochs_since_improvement + 1
    lr = state.current_lr
    if count % cfg.plateau_patience == 0:
        lr = lr / 2.0
    stopped = count >= cfg.early_stop_patience
    return replace(
        state, epochs_since_improvement=count, current_lr=lr, stopped=stopped
    )


def bce_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean binary cross-entropy of a probability map against a binary mask.

    Predictions are clamped to [1e-7, 1 - 1e-7] before the logs; the clamp
    also zeroes the gradient on saturated pixels.
    """
    if pred.shape != target.shape:
        raise ShapeError("bce_loss", "shape", target.shape, pred.shape)
    t = target.data
    if not np.all((t == 0.0) | (t == 1.0)):
        raise ConfigError("bce_loss: target must be binary (0/1)")
    from .ops import clamp

    p = clamp(pred, BCE_CLAMP, 1.0 - BCE_CLAMP)
    n = p.data.size
    val = -(t * np.log(p.data) + (1.0 - t) * np.log1p(-p.data)).sum() / n
    from .tensor import _from_op

    out = _from_op(np.full((1, 1, 1, 1), val), (p,))
    if out.requires_grad:

        def _bw():
            g = out.grad[0, 0, 0, 0]
            p.accumulate_grad(g * (p.data - t) / (p.data * (1.0 - p.data) * n))

        out._backward = _bw
    return out


def total_loss(
    pred: Tensor, target: Tensor, decoder_maps: Sequence[Tensor], tgv: TGVParams
) -> Tensor:
    """Segmentation fidelity plus the regularization term.

    With gamma = lam = 0 this returns the fidelity loss bit-for-bit (the
    regularizer contributes no graph at all).
    """
    fidelity = bce_loss(pred, target)
    if tgv.gamma == 0.0 and tgv.lam == 0.0:
        return fidelity
    return fidelity + tgv_loss_term(list(decoder_maps), tgv)


def network_loss(net: Network, pred: Tensor, target: Tensor) -> Tensor:
    """Total loss using the network's own balance weights (handles the
    per-level pair switch; equals ``total_loss`` in the global default).

    The regularizer only applies in bilinear_tgv mode; the transposed
    convolution baseline trains on the plain fidelity loss.
    """
    fidelity = bce_loss(pred, target)
    tgv0 = net.tgv
    if net.config.upsample_mode != "bilinear_tgv":
        return fidelity
    if tgv0.gamma == 0.0 and tgv0.lam == 0.0:
        return fidelity
    maps = net.collect_decoder_maps()
    if not net.config.tgv_per_level:
        return fidelity + tgv_loss_term(maps, tgv0)
    total = fidelity
    for fmap, level in zip(maps, net.decoder_map_levels()):
        total = total + tgv_loss_term([fmap], net.tgv_for_level(level))
    return total


def adam_step(params: Sequence[Param], lr: float, cfg: TrainConfig) -> None:
    """Standard bias-corrected Adam update; the caller zeroes gradients."""
    for p in params:
        g = p.grad
        if g is None:
            raise TrainingError("adam_step: gradients not populated")
        p.step_count += 1
        p.m = cfg.beta1 * p.m + (1.0 - cfg.beta1) * g
        p.v = cfg.beta2 * p.v + (1.0 - cfg.beta2) * g * g
        m_hat = p.m / (1.0 - cfg.beta1**p.step_count)
        v_hat = p.v / (1.0 - cfg.beta2**p.step_count)
        p.value.data -= lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)


def sgd_step(params: Sequence[Param], lr: float) -> None:
    """Plain descent: value(h+1) = value(h) - lr * grad."""
    for p in params:
        g = p.grad
        if g is None:
            raise TrainingError("sgd_step: gradients not populated")
        p.step_count += 1
        p.value.data -= lr * g


def kfold_split(n: int, k: int = 10, seed: int = 0) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Disjoint covering folds with sizes differing by at most one."""
    if n < k:
        raise ConfigError(f"kfold_split: need at least {k} samples, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    base, extra = divmod(n, k)
    folds = []
    start = 0
    for i in range(k):
        size = base + (1 if i < extra else 0)
        val = np.sort(perm[start : start + size])
        train = np.sort(np.concatenate([perm[:start], perm[start + size :]]))
        folds.append((train, val))
        start += size
    return folds


def stratified_val_split(
    samples: Sequence[Sample], fraction: float, seed: int
) -> Tuple[List[int], List[int]]:
    """Hold out ~fraction of indices per source tag for validation."""
    by_source: dict = {}
    for idx, s in enumerate(samples):
        by_source.setdefault(s.source, []).append(idx)
    train_idx: List[int] = []
    val_idx: List[int] = []
    for source in sorted(by_source):
        idxs = by_source[source]
        rng = child_rng(seed, "valsplit", source)
        order = rng.permutation(len(idxs))
        n_val = int(round(fraction * len(idxs)))
        if len(idxs) >= 2:
            n_val = min(len(idxs) - 1, max(1, n_val))
        else:
            n_val = 0
        val_idx.extend(idxs[o] for o in order[:n_val])
        train_idx.extend(idxs[o] for o in order[n_val:])
    if not val_idx:
        raise ConfigError(
            "validation split is empty; dataset too small, pass val_samples explicitly"
        )
    return sorted(train_idx), sorted(val_idx)


def batch_tensors(samples: Sequence[Sample]) -> Tuple[Tensor, Tensor]:
    images = np.stack([s.image for s in samples])[:, None, :, :]
    masks = np.stack([s.mask for s in samples])[:, None, :, :].astype(np.float64)
    return Tensor(images), Tensor(masks)


def evaluate(
    net: Network,
    samples: Sequence[Sample],
    batch_size: int = 32,
    threshold: float = 0.5,
    compute_loss: bool = True,
) -> Tuple[float, "metrics_mod.MetricsReport"]:
    """Eval-mode loss and pooled metrics over a sample set (never augmented).

    Runs without graph construction; with ``compute_loss=False`` only the
    metrics are computed and the returned loss is NaN.
    """
    if not samples:
        raise ConfigError("evaluate: empty sample set")
    total = 0.0
    counts = metrics_mod.ConfusionCounts(0, 0, 0, 0)
    inter = pred_area = target_area = 0
    with no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start : start + batch_size]
            x, t = batch_tensors(chunk)
            pred = net.forward(x, "eval")
            if compute_loss:
                total += network_loss(net, pred, t).item() * len(chunk)
            pred_mask = pred.data >= threshold
            target_mask = t.data >= 0.5
            counts = counts + metrics_mod.confusion(pred, t, threshold)
            inter += int(np.logical_and(pred_mask, target_mask).sum())
            pred_area += int(pred_mask.sum())
            target_area += int(target_mask.sum())
    report = metrics_mod.compute_metrics_from_counts(counts, inter, pred_area, target_area)
    loss = total / len(samples) if compute_loss else math.nan
    return loss, report


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    dice: float
    iou: float


@dataclass
class TrainReport:
    epochs: List[EpochStats] = field(default_factory=list)
    schedule: ScheduleState = field(default_factory=ScheduleState)
    best_epoch: int = -1
    best_val_loss: float = math.inf
    best_state: Optional[dict] = None
    kfold_mode: bool = False

    CSV_HEADER = "epoch,train_loss,val_loss,lr,dice,iou"

    def to_csv(self) -> str:
        lines = [self.CSV_HEADER]
        for e in self.epochs:
            lines.append(
                f"{e.epoch},{e.train_loss!r},{e.val_loss!r},{e.lr!r},{e.dice!r},{e.iou!r}"
            )
        return "\n".join(lines) + "\n"


def fit(
    net: Network,
    samples: Sequence[Sample],
    cfg: TrainConfig,
    val_samples: Optional[Sequence[Sample]] = None,
    augment_spec: Optional[AugmentSpec] = None,
    callbacks: Sequence[Callable[[EpochStats], None]] = (),
) -> TrainReport:
    """Run the epoch loop: shuffled mini-batches (last partial batch kept),
    per-epoch validation loss driving the plateau schedule, snapshot of the
    best-validation parameters, and per-epoch training-set dice/iou for the
    report. Augmentation, when given, touches only training batches.
    """
    cfg.validate()
    if not samples:
        raise ConfigError("fit: dataset must be non-empty")
    if val_samples is None:
        train_idx, val_idx = stratified_val_split(samples, cfg.val_fraction, cfg.seed)
        train = [samples[i] for i in train_idx]
        val = [samples[i] for i in val_idx]
    else:
        train = list(samples)
        val = list(val_samples)
        if not val:
            raise ConfigError("fit: val_samples must be non-empty when given")
    if cfg.batch_size > len(train):
        raise ConfigError(
            f"fit: batch_size {cfg.batch_size} exceeds training set size {len(train)}"
        )

    report = TrainReport(schedule=ScheduleState(current_lr=cfg.learning_rate))
    shuffle_rng = child_rng(cfg.seed, "shuffle")
    params = net.parameters()
    state = report.schedule

    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(len(train))
        losses = []
        for start in range(0, len(train), cfg.batch_size):
            batch_ids = order[start : start + cfg.batch_size]
            batch = [train[i] for i in batch_ids]
            if augment_spec is not None:
                batch = [
                    augment(s, augment_spec, child_rng(cfg.seed, "augment", epoch, int(i)))
                    for s, i in zip(batch, batch_ids)
                ]
            x, t = batch_tensors(batch)
            net.zero_grad()
            pred = net.forward(x, "train")
            loss = network_loss(net, pred, t)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError(
                    f"fit: non-finite training loss {value} at epoch {epoch}, "
                    f"batch starting {start}"
                )
            loss.backward()
            adam_step(params, state.current_lr, cfg)
            losses.append(value)

        val_loss, _ = evaluate(net, val, cfg.batch_size)
        if not np.isfinite(val_loss):
            raise TrainingError(f"fit: non-finite validation loss at epoch {epoch}")
        _, train_report = evaluate(net, train, cfg.batch_size, compute_loss=False)
        state = schedule_update(state, val_loss, cfg)
        if state.epochs_since_improvement == 0:
            report.best_epoch = epoch
            report.best_val_loss = val_loss
            report.best_state = {
                "arrays": {k: np.array(v, copy=True) for k, v in net.state_arrays().items()},
                "bn_initialized": {n: st.initialized for n, st in net.bn_states.items()},
            }
        stats = EpochStats(
            epoch=epoch,
            train_loss=float(np.mean(losses)),
            val_loss=val_loss,
            lr=state.current_lr,
            dice=train_report.dsc,
            iou=train_report.jaccard,
        )
        report.epochs.append(stats)
        for cb in callbacks:
            cb(stats)
        if state.stopped:
            break

    report.schedule = state
    return report
