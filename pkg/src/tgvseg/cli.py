"""Command-line surface: reproducible train / eval / predict / compare runs.

Configuration lives in an INI file with one section per subsystem; every
command-line flag overrides its file key, and the fully resolved
configuration is echoed to ``manifest.ini`` in the output directory, which
can itself be passed back via ``--config`` to re-launch an identical run.

Exit codes: 0 success, 1 validation/config error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import configparser
import os
import sys
import time
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image
from scipy import ndimage

from . import metrics as metrics_mod
from .data import (
    AugmentSpec,
    ComboSpec,
    Sample,
    dataset_stats,
    load_dataset,
    make_combo,
    synth_blobs,
)
from .errors import ConfigError, DataError, EngineError
from .gradcheck import standard_battery
from .network import Network, UNetPPConfig, build_network
from .tensor import Tensor, no_grad
from .tgv import TGVParams
from .training import (
    TrainConfig,
    batch_tensors,
    evaluate,
    fit,
    kfold_split,
    stratified_val_split,
)
from .upsample import checkerboard_score

# (section, key, type, default) — the single source of truth for RunConfig.
CONFIG_FIELDS = [
    ("network", "depth", int, 5),
    ("network", "base_channels", int, 16),
    ("network", "in_channels", int, 1),
    ("network", "dropout_rate", float, 0.2),
    ("network", "upsample_mode", str, "bilinear_tgv"),
    ("network", "transpose_kernel", int, 3),
    ("network", "tgv_per_level", bool, False),
    ("tgv", "p1", float, 1.0),
    ("tgv", "p2", float, 1.0),
    ("tgv", "gamma", float, 1e-3),
    ("tgv", "lam", float, 0.0),
    ("tgv", "inner_steps", int, 10),
    ("tgv", "inner_lr", float, 0.1),
    ("tgv", "huber_delta", float, 0.5),
    ("training", "epochs", int, 100),
    ("training", "learning_rate", float, 1e-4),
    ("training", "batch_size", int, 32),
    ("training", "beta1", float, 0.9),
    ("training", "beta2", float, 0.999),
    ("training", "adam_eps", float, 1e-8),
    ("training", "plateau_patience", int, 10),
    ("training", "early_stop_patience", int, 20),
    ("training", "min_delta", float, 1e-6),
    ("training", "folds", int, 10),
    ("training", "val_fraction", float, 0.1),
    ("augment", "enabled", bool, False),
    ("augment", "hflip", float, 0.5),
    ("augment", "vflip", float, 0.5),
    ("augment", "crop", float, 0.0),
    ("augment", "affine", float, 0.0),
    ("augment", "noise", float, 0.0),
    ("augment", "blur", float, 0.0),
    ("augment", "brightness", float, 0.0),
    ("augment", "contrast", float, 0.0),
    ("data", "data_root", str, ""),
    ("data", "synthetic", int, 0),
    ("data", "size", int, 64),
    ("data", "combo", str, ""),
    ("data", "combo_total", int, 0),
    ("data", "threshold", float, 0.5),
    ("run", "seed", int, 0),
    ("run", "kfold", bool, False),
]


class RunConfig:
    """Flat key-value configuration with INI round-tripping."""

    def __init__(self):
        self.values = {(s, k): d for s, k, _, d in CONFIG_FIELDS}

    def get(self, section: str, key: str):
        return self.values[(section, key)]

    def set(self, section: str, key: str, value) -> None:
        if (section, key) not in self.values:
            raise ConfigError(f"unknown config key [{section}] {key}")
        self.values[(section, key)] = value

    @staticmethod
    def load_ini(path: str) -> "RunConfig":
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise ConfigError(f"cannot read config file {path}")
        rc = RunConfig()
        types = {(s, k): t for s, k, t, _ in CONFIG_FIELDS}
        for section in parser.sections():
            for key, raw in parser.items(section):
                if (section, key) not in types:
                    raise ConfigError(f"{path}: unknown key [{section}] {key}")
                t = types[(section, key)]
                try:
                    if t is bool:
                        value = raw.strip().lower() in ("1", "true", "yes", "on")
                    else:
                        value = t(raw)
                except ValueError as exc:
                    raise ConfigError(f"{path}: bad value for [{section}] {key}: {raw}") from exc
                rc.values[(section, key)] = value
        return rc

    def to_ini(self) -> str:
        lines = []
        current = None
        for section, key, t, _default in CONFIG_FIELDS:
            if section != current:
                if current is not None:
                    lines.append("")
                lines.append(f"[{section}]")
                current = section
            value = self.values[(section, key)]
            if t is bool:
                text = "true" if value else "false"
            elif t is float:
                text = repr(float(value))
            else:
                text = str(value)
            lines.append(f"{key} = {text}")
        return "\n".join(lines) + "\n"

    # --- builders ---
    def network_config(self) -> UNetPPConfig:
        g = self.get
        return UNetPPConfig(
            depth=g("network", "depth"),
            base_channels=g("network", "base_channels"),
            in_channels=g("network", "in_channels"),
            dropout_rate=g("network", "dropout_rate"),
            upsample_mode=g("network", "upsample_mode"),
            transpose_kernel=g("network", "transpose_kernel"),
            tgv_per_level=g("network", "tgv_per_level"),
            tgv=TGVParams.create(
                p1=g("tgv", "p1"),
                p2=g("tgv", "p2"),
                gamma=g("tgv", "gamma"),
                lam=g("tgv", "lam"),
                inner_steps=g("tgv", "inner_steps"),
                inner_lr=g("tgv", "inner_lr"),
                huber_delta=g("tgv", "huber_delta"),
            ),
            seed=g("run", "seed"),
        )

    def train_config(self) -> TrainConfig:
        g = self.get
        return TrainConfig(
            epochs=g("training", "epochs"),
            learning_rate=g("training", "learning_rate"),
            batch_size=g("training", "batch_size"),
            beta1=g("training", "beta1"),
            beta2=g("training", "beta2"),
            adam_eps=g("training", "adam_eps"),
            plateau_patience=g("training", "plateau_patience"),
            early_stop_patience=g("training", "early_stop_patience"),
            min_delta=g("training", "min_delta"),
            folds=g("training", "folds"),
            val_fraction=g("training", "val_fraction"),
            seed=g("run", "seed"),
        )

    def augment_spec(self) -> Optional[AugmentSpec]:
        if not self.get("augment", "enabled"):
            return None
        g = self.get
        spec = AugmentSpec(
            hflip=g("augment", "hflip"),
            vflip=g("augment", "vflip"),
            crop=g("augment", "crop"),
            affine=g("augment", "affine"),
            noise=g("augment", "noise"),
            blur=g("augment", "blur"),
            brightness=g("augment", "brightness"),
            contrast=g("augment", "contrast"),
            seed=g("run", "seed"),
        )
        spec.validate()
        return spec

    def load_samples(self) -> List[Sample]:
        n_synth = self.get("data", "synthetic")
        root = self.get("data", "data_root")
        if n_synth > 0:
            return synth_blobs(n_synth, self.get("data", "size"), seed=self.get("run", "seed"))
        if root:
            samples = load_dataset(root)
            if not samples:
                raise DataError(f"dataset at {root} is empty")
            return samples
        raise ConfigError("no dataset: pass --data PATH or --synthetic N")


def _apply_overrides(rc: RunConfig, args: argparse.Namespace) -> None:
    mapping = [
        ("seed", "run", "seed"),
        ("synthetic", "data", "synthetic"),
        ("size", "data", "size"),
        ("data", "data", "data_root"),
        ("depth", "network", "depth"),
        ("base_channels", "network", "base_channels"),
        ("epochs", "training", "epochs"),
        ("lr", "training", "learning_rate"),
        ("batch_size", "training", "batch_size"),
        ("gamma", "tgv", "gamma"),
        ("upsample", "network", "upsample_mode"),
        ("threshold", "data", "threshold"),
        ("combo", "data", "combo"),
        ("combo_total", "data", "combo_total"),
    ]
    for attr, section, key in mapping:
        value = getattr(args, attr, None)
        if value is not None:
            rc.set(section, key, value)
    if getattr(args, "kfold", False):
        rc.set("run", "kfold", True)


def _resolve_config(args: argparse.Namespace) -> RunConfig:
    rc = RunConfig.load_ini(args.config) if getattr(args, "config", None) else RunConfig()
    _apply_overrides(rc, args)
    return rc


def _prepare_out(args) -> str:
    out = getattr(args, "out", None) or "runs/latest"
    os.makedirs(out, exist_ok=True)
    return out


def _write(path: str, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


# --- subcommands ---


def cmd_train(args) -> int:
    rc = _resolve_config(args)
    out = _prepare_out(args)
    samples = rc.load_samples()
    tc = rc.train_config()
    tc.validate()
    _write(os.path.join(out, "manifest.ini"), rc.to_ini())

    if rc.get("run", "kfold"):
        return _train_kfold(rc, tc, samples, out)

    train_idx, val_idx = stratified_val_split(samples, tc.val_fraction, tc.seed)
    train = [samples[i] for i in train_idx]
    val = [samples[i] for i in val_idx]
    if tc.batch_size > len(train):
        # desk-scale datasets are often smaller than the stock batch size
        print(f"note: clamping batch size {tc.batch_size} -> {len(train)}", file=sys.stderr)
        tc.batch_size = len(train)
    net = build_network(rc.network_config())
    report = fit(net, train, tc, val_samples=val, augment_spec=rc.augment_spec())
    _write_train_outputs(out, net, report)
    if report.epochs:
        last = report.epochs[-1]
        print(
            f"trained {len(report.epochs)} epochs: train_loss={last.train_loss:.6f} "
            f"val_loss={last.val_loss:.6f} dice={last.dice:.4f} iou={last.iou:.4f}"
        )
    else:
        print("trained 0 epochs")
    return 0


def _write_train_outputs(out: str, net: Network, report) -> None:
    _write(os.path.join(out, "curve.csv"), report.to_csv())
    net.save(os.path.join(out, "final.ckpt"))
    if report.best_state is not None:
        from . import checkpoint as ckpt

        meta = {
            "kind": "network",
            "config": net.config.to_meta(),
            "bn_initialized": report.best_state["bn_initialized"],
        }
        ckpt.save_arrays(os.path.join(out, "best.ckpt"), report.best_state["arrays"], meta)
    else:
        net.save(os.path.join(out, "best.ckpt"))


def _train_kfold(rc: RunConfig, tc: TrainConfig, samples, out: str) -> int:
    folds = kfold_split(len(samples), tc.folds, tc.seed)
    rows = ["fold,epochs,final_train_loss,final_val_loss,best_val_loss,dice,iou"]
    finals = []
    for k, (train_idx, val_idx) in enumerate(folds):
        fold_out = os.path.join(out, f"fold{k}")
        os.makedirs(fold_out, exist_ok=True)
        train = [samples[i] for i in train_idx]
        val = [samples[i] for i in val_idx]
        fold_tc = tc
        if tc.batch_size > len(train):
            import dataclasses

            fold_tc = dataclasses.replace(tc, batch_size=len(train))
        net = build_network(rc.network_config())
        report = fit(net, train, fold_tc, val_samples=val, augment_spec=rc.augment_spec())
        _write_train_outputs(fold_out, net, report)
        if report.epochs:
            last = report.epochs[-1]
            rows.append(
                f"{k},{len(report.epochs)},{last.train_loss!r},{last.val_loss!r},"
                f"{report.best_val_loss!r},{last.dice!r},{last.iou!r}"
            )
            finals.append((last.dice, last.iou))
        else:
            rows.append(f"{k},0,,,,,")
    if finals:
        mean_dice = float(np.mean([f[0] for f in finals]))
        mean_iou = float(np.mean([f[1] for f in finals]))
        rows.append(f"mean,,,,,{mean_dice!r},{mean_iou!r}")
        print(f"k-fold complete: mean dice={mean_dice:.4f} iou={mean_iou:.4f}")
    _write(os.path.join(out, "kfold_summary.csv"), "\n".join(rows) + "\n")
    return 0


def _parse_combo(text: str) -> Dict[str, float]:
    proportions = {}
    for part in text.split(","):
        if not part.strip():
            continue
        if "=" not in part:
            raise ConfigError(f"bad combo entry {part!r}; expected source=fraction")
        name, frac = part.split("=", 1)
        proportions[name.strip()] = float(frac)
    if not proportions:
        raise ConfigError("empty combo specification")
    return proportions


def _eval_samples(net: Network, samples: Sequence[Sample], threshold: float, batch: int = 16):
    counts = metrics_mod.ConfusionCounts(0, 0, 0, 0)
    inter = pred_area = target_area = 0
    pred_masks, target_masks, volumes = [], [], []
    with no_grad():
        for start in range(0, len(samples), batch):
            chunk = samples[start : start + batch]
            x, t = batch_tensors(chunk)
            pred = net.forward(x, "eval")
            pm = pred.data >= threshold
            tm = t.data >= 0.5
            counts = counts + metrics_mod.confusion(pred, t, threshold)
            inter += int(np.logical_and(pm, tm).sum())
            pred_area += int(pm.sum())
            target_area += int(tm.sum())
            for i, s in enumerate(chunk):
                pred_masks.append(pm[i, 0])
                target_masks.append(tm[i, 0])
                volumes.append(s.volume_id)
    report = metrics_mod.compute_metrics_from_counts(counts, inter, pred_area, target_area)
    fpv = metrics_mod.fp_per_volume(pred_masks, target_masks, volumes)
    return report.with_fp_per_volume(fpv)


def cmd_eval(args) -> int:
    rc = _resolve_config(args)
    out = _prepare_out(args)
    net = Network.load(args.checkpoint)
    samples = rc.load_samples()
    combo_text = rc.get("data", "combo")
    combo_label = ""
    if combo_text:
        pools: Dict[str, List[Sample]] = {}
        for s in samples:
            pools.setdefault(s.source, []).append(s)
        total = rc.get("data", "combo_total") or min(len(samples), 64)
        spec = ComboSpec(proportions=_parse_combo(combo_text), total=total)
        samples = make_combo(pools, spec, seed=rc.get("run", "seed"))
        combo_label = combo_text
    threshold = rc.get("data", "threshold")
    report = _eval_samples(net, samples, threshold)
    dataset_label = rc.get("data", "data_root") or f"synthetic{rc.get('data', 'synthetic')}"
    row = {
        "dataset": dataset_label,
        "combo": combo_label,
        "threshold": threshold,
        "accuracy": report.accuracy,
        "jaccard": report.jaccard,
        "precision": report.precision,
        "recall": report.recall,
        "f1": report.f1,
        "dsc": report.dsc,
        "fp_per_volume": report.fp_per_volume,
    }
    _write(os.path.join(out, "metrics.csv"), metrics_mod.report_csv([row]))
    table = metrics_mod.report_table([row])
    _write(os.path.join(out, "metrics.txt"), table)
    print(table, end="")
    return 0


def _load_image_for_predict(path: str) -> np.ndarray:
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("L"), dtype=np.float64) / 255.0
    except OSError as exc:
        raise DataError(f"unreadable image file {path}: {exc}") from exc


def cmd_predict(args) -> int:
    rc = _resolve_config(args)
    out = _prepare_out(args)
    net = Network.load(args.checkpoint)
    threshold = rc.get("data", "threshold")
    div = net.config.spatial_divisor
    for path in args.images:
        image = _load_image_for_predict(path)
        h, w = image.shape
        if h % div or w % div:
            raise ConfigError(
                f"{path}: spatial size {(h, w)} not divisible by {div}; "
                f"crop to {(h // div) * div}x{(w // div) * div} first"
            )
        with no_grad():
            pred = net.forward(Tensor(image[None, None]), "eval")
        mask = (pred.data[0, 0] >= threshold).astype(np.uint8)
        stem = os.path.splitext(os.path.basename(path))[0]
        Image.fromarray(mask * 255, mode="L").save(os.path.join(out, f"{stem}_mask.png"))
        if args.overlay:
            interior = ndimage.binary_erosion(mask, structure=np.ones((3, 3)))
            contour = mask.astype(bool) & ~interior
            rgb = np.stack([image, image, image], axis=-1)
            rgb[contour] = (1.0, 0.0, 0.0)
            Image.fromarray(np.round(rgb * 255).astype(np.uint8), mode="RGB").save(
                os.path.join(out, f"{stem}_overlay.png")
            )
        print(f"{path}: foreground fraction {mask.mean():.4f}")
    return 0


def _constant_probe_checkerboard(net: Network, size: int) -> float:
    """Mean parity-variance of each upsampler's output on constant input."""
    cfg = net.config
    scores = []
    with no_grad():
        for level in range(cfg.depth - 1):
            spatial = size // (2 ** (level + 1))
            if spatial < 2:
                continue
            x = Tensor(np.ones((1, cfg.channels(level + 1), spatial, spatial)))
            scores.append(checkerboard_score(net._upsample(x, level)))
    return float(np.mean(scores))


def cmd_compare_upsampling(args) -> int:
    rc = _resolve_config(args)
    out = _prepare_out(args)
    if rc.get("data", "synthetic") <= 0:
        rc.set("data", "synthetic", 8)
    samples = rc.load_samples()
    tc = rc.train_config()
    tc.validate()
    _write(os.path.join(out, "manifest.ini"), rc.to_ini())
    train_idx, val_idx = stratified_val_split(samples, tc.val_fraction, tc.seed)
    train = [samples[i] for i in train_idx]
    val = [samples[i] for i in val_idx]
    if tc.batch_size > len(train):
        tc.batch_size = len(train)

    rows = ["mode,final_dice,final_iou,checkerboard,wall_time_s"]
    size = rc.get("data", "size")
    for mode in ("bilinear_tgv", "transpose_conv"):
        rc.set("network", "upsample_mode", mode)
        net = build_network(rc.network_config())
        start = time.perf_counter()
        report = fit(net, train, tc, val_samples=val, augment_spec=rc.augment_spec())
        wall = time.perf_counter() - start
        mode_out = os.path.join(out, mode)
        os.makedirs(mode_out, exist_ok=True)
        _write_train_outputs(mode_out, net, report)
        score = _constant_probe_checkerboard(net, size)
        last = report.epochs[-1] if report.epochs else None
        dice = last.dice if last else 0.0
        iou = last.iou if last else 0.0
        rows.append(f"{mode},{dice!r},{iou!r},{score!r},{wall:.3f}")
        print(f"{mode}: dice={dice:.4f} iou={iou:.4f} checkerboard={score:.3e} wall={wall:.1f}s")
    _write(os.path.join(out, "compare.csv"), "\n".join(rows) + "\n")
    return 0


def cmd_gradcheck(args) -> int:
    tolerance = args.tolerance
    results = standard_battery(tolerance=tolerance, step=args.step,
                               loose_tolerance=max(1e-3, tolerance))
    width = max(len(name) for name, _ in results)
    all_ok = True
    for name, report in results:
        worst = max(e.max_rel_err for e in report.entries)
        ok = report.passed
        all_ok &= ok
        print(f"{name:<{width}}  {worst:12.3e}  {'pass' if ok else 'FAIL'}")
    print("gradient battery:", "PASS" if all_ok else "FAIL")
    return 0 if all_ok else 1


def cmd_stats(args) -> int:
    rc = _resolve_config(args)
    samples = rc.load_samples()
    by_source: Dict[str, List[Sample]] = {}
    for s in samples:
        by_source.setdefault(s.source, []).append(s)
    print(f"{'source':<16} {'mean':>8} {'std':>8} {'images':>8}")
    for source in sorted(by_source):
        mean, std = dataset_stats(by_source[source])
        print(f"{source:<16} {mean:8.4f} {std:8.4f} {len(by_source[source]):>8}")
    mean, std = dataset_stats(samples)
    print(f"{'pooled':<16} {mean:8.4f} {std:8.4f} {len(samples):>8}")
    return 0


# --- parser ---


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI config file; flags override its keys")
    p.add_argument("--seed", type=int, help="root seed for all randomness")
    p.add_argument("--out", help="output directory (default runs/latest)")


def _add_data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="dataset root (images/ masks/ manifest.txt)")
    p.add_argument("--synthetic", type=int, help="generate N synthetic samples instead")
    p.add_argument("--size", type=int, help="synthetic image side length")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--depth", type=int, help="encoder levels (>= 2)")
    p.add_argument("--base-channels", dest="base_channels", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float, help="initial learning rate")
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--gamma", type=float, help="regularizer weight")
    p.add_argument("--upsample", choices=["bilinear_tgv", "transpose_conv"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tgvseg", description="desk-scale blob segmentation engine"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a network")
    _add_common(p)
    _add_data_flags(p)
    _add_train_flags(p)
    p.add_argument("--kfold", action="store_true", help="run k-fold cross-validation")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_common(p)
    _add_data_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--threshold", type=float)
    p.add_argument("--combo", help="source mixture, e.g. a=0.5,b=0.25,c=0.25")
    p.add_argument("--combo-total", dest="combo_total", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="write predicted masks for images")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--threshold", type=float)
    p.add_argument("--overlay", action="store_true", help="also write contour overlays")
    p.add_argument("images", nargs="+", help="grayscale raster files")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("compare-upsampling", help="train both decoder variants")
    _add_common(p)
    _add_data_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_compare_upsampling)

    p = sub.add_parser("gradcheck", help="finite-difference gradient battery")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--step", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("stats", help="per-source dataset statistics")
    _add_common(p)
    _add_data_flags(p)
    p.set_defaults(func=cmd_stats)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except EngineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
