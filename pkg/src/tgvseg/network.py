"""Encoder-decoder segmentation network with nested dense skip connections.

The node grid X[i, j] (0 <= i + j <= depth-1) follows the nested-skip rule:
column j = 0 is the encoder (channel count doubles per level, dropout then
2x max pooling between levels), and every decoder node X[i, j] for j >= 1
consumes the channel concatenation of X[i, 0..j-1] with the upsampled
X[i+1, j-1]. Each node is a block of two 3x3 convolutions, each followed by
batch normalization and a ReLU. A 1x1 convolution plus a sigmoid maps the
final node to a foreground-probability map with the input's spatial size.

Upsampling doubles the spatial size while keeping channels (either the
closed-form bilinear operator or a learned stride-2 transposed convolution),
then a shared 1x1 projection halves the channels to match the skip
arithmetic. Since the projection exists in both modes, switching modes
changes the parameter set only by the transposed-convolution kernels.
Raw upsampler outputs are cached per forward pass and feed the
regularization term.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import checkpoint as ckpt
from . import ops
from .errors import CheckpointError, ConfigError, ShapeError, StateError
from .tensor import Param, Tensor
from .tgv import TGVParams, softplus_inverse
from .upsample import bilinear_upsample, transpose_conv_upsample
from .util import child_rng

UPSAMPLE_MODES = ("bilinear_tgv", "transpose_conv")


@dataclass
class UNetPPConfig:
    depth: int = 5
    base_channels: int = 16
    in_channels: int = 1
    dropout_rate: float = 0.2
    upsample_mode: str = "bilinear_tgv"
    tgv: TGVParams = field(default_factory=TGVParams)
    tgv_per_level: bool = False
    transpose_kernel: int = 3
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        if self.depth < 2:
            raise ConfigError(f"depth must be >= 2, got {self.depth}")
        if self.base_channels < 1:
            raise ConfigError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.in_channels < 1:
            raise ConfigError(f"in_channels must be >= 1, got {self.in_channels}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.upsample_mode not in UPSAMPLE_MODES:
            raise ConfigError(
                f"upsample_mode must be one of {UPSAMPLE_MODES}, got {self.upsample_mode!r}"
            )
        if self.transpose_kernel < 2:
            raise ConfigError(
                f"transpose_kernel must be >= stride 2, got {self.transpose_kernel}"
            )
        if self.bn_eps <= 0:
            raise ConfigError("bn_eps must be positive")
        if not 0.0 < self.bn_momentum <= 1.0:
            raise ConfigError("bn_momentum must be in (0, 1]")
        self.tgv.validate()

    def channels(self, level: int) -> int:
        return self.base_channels * (2**level)

    @property
    def spatial_divisor(self) -> int:
        return 2 ** (self.depth - 1)

    def to_meta(self) -> dict:
        d = asdict(self)
        tgv = self.tgv
        d["tgv"] = {
            "p1": float(np.logaddexp(0.0, tgv.p1_raw.data[0, 0, 0, 0])),
            "p2": float(np.logaddexp(0.0, tgv.p2_raw.data[0, 0, 0, 0])),
            "gamma": tgv.gamma,
            "lam": tgv.lam,
            "inner_steps": tgv.inner_steps,
            "inner_lr": tgv.inner_lr,
            "huber_delta": tgv.huber_delta,
        }
        return d

    @staticmethod
    def from_meta(meta: dict) -> "UNetPPConfig":
        d = dict(meta)
        t = d.pop("tgv")
        tgv = TGVParams.create(
            p1=t["p1"],
            p2=t["p2"],
            gamma=t["gamma"],
            lam=t["lam"],
            inner_steps=t["inner_steps"],
            inner_lr=t["inner_lr"],
            huber_delta=t["huber_delta"],
        )
        return UNetPPConfig(tgv=tgv, **d)


class ConvBlock:
    """Two (conv 3x3 -> batch norm -> ReLU) stages.

    The convolutions are bias-free: normalization subtracts any channel
    offset, so a pre-norm bias is a dead parameter."""

    def __init__(self, net: "Network", name: str, c_in: int, c_out: int):
        self.net = net
        self.conv1_w = net._new_conv_weight(f"{name}.conv1.weight", c_out, c_in, 3)
        self.bn1_scale = net._new_param(f"{name}.bn1.scale", np.ones((1, c_out, 1, 1)))
        self.bn1_shift = net._new_param(f"{name}.bn1.shift", np.zeros((1, c_out, 1, 1)))
        self.bn1_state = net._new_bn_state(f"{name}.bn1", c_out)
        self.conv2_w = net._new_conv_weight(f"{name}.conv2.weight", c_out, c_out, 3)
        self.bn2_scale = net._new_param(f"{name}.bn2.scale", np.ones((1, c_out, 1, 1)))
        self.bn2_shift = net._new_param(f"{name}.bn2.shift", np.zeros((1, c_out, 1, 1)))
        self.bn2_state = net._new_bn_state(f"{name}.bn2", c_out)
        self.c_in = c_in

    def forward(self, x: Tensor, mode: str) -> Tensor:
        cfg = self.net.config
        y = ops.conv2d(x, self.conv1_w, padding=1)
        y = ops.batch_norm(
            y, self.bn1_scale, self.bn1_shift, self.bn1_state, mode, cfg.bn_eps, cfg.bn_momentum
        )
        y = ops.relu(y)
        y = ops.conv2d(y, self.conv2_w, padding=1)
        y = ops.batch_norm(
            y, self.bn2_scale, self.bn2_shift, self.bn2_state, mode, cfg.bn_eps, cfg.bn_momentum
        )
        return ops.relu(y)


class Network:
    """Built by ``build_network``; holds parameters, stats, and the TGV state."""

    def __init__(self, config: UNetPPConfig):
        config.validate()
        self.config = config
        self.params: Dict[str, Param] = {}
        self.bn_states: Dict[str, ops.BatchNormState] = {}
        self._decoder_maps: Optional[Dict[Tuple[int, int], Tensor]] = None
        self._forward_count = 0

        d = config.depth
        ch = config.channels
        self.blocks: Dict[Tuple[int, int], ConvBlock] = {}
        for i in range(d):
            c_in = config.in_channels if i == 0 else ch(i - 1)
            self.blocks[(i, 0)] = ConvBlock(self, f"node{i}_0", c_in, ch(i))
        for j in range(1, d):
            for i in range(d - j):
                c_in = (j + 1) * ch(i)
                block = ConvBlock(self, f"node{i}_{j}", c_in, ch(i))
                # skip arithmetic: j same-level maps plus the halved upsample
                assert block.c_in == j * ch(i) + ch(i)
                self.blocks[(i, j)] = block

        # shared 1x1 projections halving the upsampled channels (both modes)
        self.proj_w: Dict[int, Param] = {}
        self.proj_b: Dict[int, Param] = {}
        for i in range(d - 1):
            self.proj_w[i] = self._new_conv_weight(f"up{i}.proj.weight", ch(i), ch(i + 1), 1)
            self.proj_b[i] = self._new_param(f"up{i}.proj.bias", np.zeros((1, ch(i), 1, 1)))

        self.head_w = self._new_conv_weight("head.weight", 1, ch(0), 1)
        self.head_b = self._new_param("head.bias", np.zeros((1, 1, 1, 1)))

        # transposed-convolution kernels only exist in that mode, so the
        # parameter count differs between modes exactly by these entries
        self.tconv_w: Dict[int, Param] = {}
        if config.upsample_mode == "transpose_conv":
            k = config.transpose_kernel
            for i in range(d - 1):
                c = ch(i + 1)
                self.tconv_w[i] = self._new_conv_weight(
                    f"up{i}.tconv.weight", c, c, k, transpose=True
                )

        # per-network learnable balance weights (never shared across builds)
        self.tgv_levels: List[TGVParams] = []
        n_pairs = (d - 1) if config.tgv_per_level else 1
        base = config.tgv
        for lvl in range(n_pairs):
            prefix = f"tgv.level{lvl}" if config.tgv_per_level else "tgv"
            pair = replace(
                base,
                p1_raw=self._new_param(f"{prefix}.p1_raw", np.array(base.p1_raw.data, copy=True)),
                p2_raw=self._new_param(f"{prefix}.p2_raw", np.array(base.p2_raw.data, copy=True)),
            )
            self.tgv_levels.append(pair)

    # --- parameter plumbing ---
    def _new_param(self, name: str, value: np.ndarray) -> Param:
        if name in self.params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        p = Param(np.asarray(value, dtype=np.float64))
        self.params[name] = p
        return p

    def _new_conv_weight(
        self, name: str, c_out: int, c_in: int, k: int, transpose: bool = False
    ) -> Param:
        rng = child_rng(self.config.seed, "init", name)
        fan_in = c_in * k * k if not transpose else c_out * k * k
        bound = np.sqrt(6.0 / fan_in)
        shape = (c_out, c_in, k, k)
        return self._new_param(name, rng.uniform(-bound, bound, shape))

    def _new_bn_state(self, name: str, channels: int) -> ops.BatchNormState:
        st = ops.BatchNormState(channels)
        self.bn_states[name] = st
        return st

    def parameters(self) -> List[Param]:
        return list(self.params.values())

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def tgv_for_level(self, level: int) -> TGVParams:
        if self.config.tgv_per_level:
            return self.tgv_levels[level]
        return self.tgv_levels[0]

    @property
    def tgv(self) -> TGVParams:
        """The global balance-weight pair (per-level mode has several)."""
        return self.tgv_levels[0]

    # --- passes ---
    def _upsample(self, x: Tensor, level: int) -> Tensor:
        if self.config.upsample_mode == "bilinear_tgv":
            return bilinear_upsample(x)
        return transpose_conv_upsample(x, self.tconv_w[level], stride=2)

    def forward(self, x: Tensor, mode: str) -> Tensor:
        if mode not in ("train", "eval"):
            raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
        cfg = self.config
        n, c, h, w = x.shape
        if c != cfg.in_channels:
            raise ShapeError("forward", "input channels", cfg.in_channels, c)
        div = cfg.spatial_divisor
        if h % div or w % div:
            raise ShapeError(
                "forward", f"spatial dims (divisible by {div})", f"multiple of {div}", (h, w)
            )
        if mode == "train":
            self._forward_count += 1
        maps: Dict[Tuple[int, int], Tensor] = {}
        grid: Dict[Tuple[int, int], Tensor] = {}

        current = x
        for i in range(cfg.depth):
            grid[(i, 0)] = self.blocks[(i, 0)].forward(current, mode)
            if i < cfg.depth - 1:
                dropped = ops.dropout(
                    grid[(i, 0)],
                    cfg.dropout_rate,
                    mode,
                    child_rng(cfg.seed, "dropout", self._forward_count, i),
                )
                current, _ = ops.max_pool2(dropped)

        for j in range(1, cfg.depth):
            for i in range(cfg.depth - j):
                up_raw = self._upsample(grid[(i + 1, j - 1)], i)
                maps[(i, j)] = up_raw
                up = ops.conv2d(up_raw, self.proj_w[i], self.proj_b[i], padding=0)
                skips = [grid[(i, jj)] for jj in range(j)]
                grid[(i, j)] = self.blocks[(i, j)].forward(
                    ops.concat_channels(*skips, up), mode
                )

        self._decoder_maps = maps
        logits = ops.conv2d(grid[(0, cfg.depth - 1)], self.head_w, self.head_b, padding=0)
        return ops.sigmoid(logits)

    def collect_decoder_maps(self) -> List[Tensor]:
        """Raw upsampler outputs of the last forward, ordered by the (i, j)
        of the consuming node."""
        if self._decoder_maps is None:
            raise StateError("collect_decoder_maps: no forward pass has run yet")
        return [self._decoder_maps[key] for key in sorted(self._decoder_maps)]

    def decoder_map_levels(self) -> List[int]:
        """Target level i of each map returned by collect_decoder_maps."""
        if self._decoder_maps is None:
            raise StateError("decoder_map_levels: no forward pass has run yet")
        return [key[0] for key in sorted(self._decoder_maps)]

    # --- persistence ---
    def state_arrays(self) -> Dict[str, np.ndarray]:
        arrays = {name: p.data for name, p in self.params.items()}
        for name, st in self.bn_states.items():
            arrays[f"{name}.running_mean"] = st.running_mean
            arrays[f"{name}.running_var"] = st.running_var
        return arrays

    def save(self, path) -> None:
        meta = {
            "kind": "network",
            "config": self.config.to_meta(),
            "bn_initialized": {n: st.initialized for n, st in self.bn_states.items()},
        }
        ckpt.save_arrays(path, self.state_arrays(), meta)

    @staticmethod
    def load(path) -> "Network":
        arrays, meta = ckpt.load_arrays(path)
        if meta.get("kind") != "network":
            raise CheckpointError(f"{path}: not a network checkpoint")
        net = Network(UNetPPConfig.from_meta(meta["config"]))
        net.load_arrays(arrays, meta)
        return net

    def load_arrays(self, arrays: Dict[str, np.ndarray], meta: dict) -> None:
        expected = self.state_arrays()
        deltas = []
        for name, arr in expected.items():
            if name not in arrays:
                deltas.append(f"missing {name} {arr.shape}")
            elif arrays[name].shape != arr.shape:
                deltas.append(f"{name}: expected {arr.shape}, got {arrays[name].shape}")
        for name in arrays:
            if name not in expected:
                deltas.append(f"unexpected {name} {arrays[name].shape}")
        if deltas:
            raise CheckpointError("checkpoint/network shape deltas: " + "; ".join(deltas))
        for name, p in self.params.items():
            p.value.data = np.array(arrays[name], copy=True)
        flags = meta.get("bn_initialized", {})
        for name, st in self.bn_states.items():
            st.running_mean = np.array(arrays[f"{name}.running_mean"], copy=True)
            st.running_var = np.array(arrays[f"{name}.running_var"], copy=True)
            st.initialized = bool(flags.get(name, True))


def build_network(config: UNetPPConfig) -> Network:
    """Construct a network with deterministic per-name parameter init."""
    return Network(config)
