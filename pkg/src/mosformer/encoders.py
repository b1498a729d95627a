"""Residual CNN encoder and the target/momentum dual-encoder pair."""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .exceptions import ConfigError, DimensionError, InputError
from .tensor import Tensor, no_grad
from .tensor.nn import BatchNorm2d, Conv2d, ConvBNReLU, Module, ModuleList

ENCODER_MODES = ("momentum", "independent", "single")


@dataclass(frozen=True)
class EncoderConfig:
    in_channels: int = 1
    stem_channels: int = 16
    stage_channels: Tuple[int, ...] = (16, 32, 64, 128)
    blocks: Tuple[int, ...] = (1, 1, 1, 1)
    strides: Tuple[int, ...] = (2, 2, 2, 1)
    block: str = "basic"

    def __post_init__(self):
        if len(self.stage_channels) != 4 or len(self.blocks) != 4 or len(self.strides) != 4:
            raise ConfigError("encoder needs exactly four stages")
        if self.strides[-1] != 1:
            raise ConfigError("last encoder stage must keep resolution (stride 1)")
        if self.block not in ("basic", "bottleneck"):
            raise ConfigError(f"unknown block type {self.block!r}")

    @classmethod
    def resnet50(cls, in_channels: int = 1) -> "EncoderConfig":
        return cls(in_channels, 64, (256, 512, 1024, 2048), (3, 4, 6, 3), (2, 2, 2, 1), "bottleneck")

    @property
    def level_channels(self) -> Tuple[int, ...]:
        """Channels of the five returned maps: stem then the four stages."""
        return (self.stem_channels,) + tuple(self.stage_channels)

    @property
    def level_strides(self) -> Tuple[int, ...]:
        """Downsampling factor of each returned map relative to the input."""
        out, total = [2], 2
        for s in self.strides:
            total *= s
            out.append(total)
        return tuple(out)


class BasicBlock(Module):
    def __init__(self, cin: int, cout: int, stride: int, rng: np.random.Generator):
        super().__init__()
        self.conv1 = Conv2d(cin, cout, 3, rng, stride=stride, bias=False)
        self.bn1 = BatchNorm2d(cout)
        self.conv2 = Conv2d(cout, cout, 3, rng, bias=False)
        self.bn2 = BatchNorm2d(cout)
        self.down = None
        if stride != 1 or cin != cout:
            self.down = Conv2d(cin, cout, 1, rng, stride=stride, bias=False)
            self.down_bn = BatchNorm2d(cout)

    def forward(self, x: Tensor) -> Tensor:
        out = self.bn1(self.conv1(x)).relu()
        out = self.bn2(self.conv2(out))
        short = x if self.down is None else self.down_bn(self.down(x))
        return (out + short).relu()


class Bottleneck(Module):
    expansion = 4

    def __init__(self, cin: int, cout: int, stride: int, rng: np.random.Generator):
        super().__init__()
        width = cout // self.expansion
        self.conv1 = Conv2d(cin, width, 1, rng, bias=False)
        self.bn1 = BatchNorm2d(width)
        self.conv2 = Conv2d(width, width, 3, rng, stride=stride, bias=False)
        self.bn2 = BatchNorm2d(width)
        self.conv3 = Conv2d(width, cout, 1, rng, bias=False)
        self.bn3 = BatchNorm2d(cout)
        self.down = None
        if stride != 1 or cin != cout:
            self.down = Conv2d(cin, cout, 1, rng, stride=stride, bias=False)
            self.down_bn = BatchNorm2d(cout)

    def forward(self, x: Tensor) -> Tensor:
        out = self.bn1(self.conv1(x)).relu()
        out = self.bn2(self.conv2(out)).relu()
        out = self.bn3(self.conv3(out))
        short = x if self.down is None else self.down_bn(self.down(x))
        return (out + short).relu()


class ResidualEncoder(Module):
    """Stride-2 stem followed by four residual stages (strides 2, 2, 2, 1).

    ``forward`` returns five maps at 1/2, 1/4, 1/8, 1/16 and 1/16 of the input.
    """

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.stem = ConvBNReLU(cfg.in_channels, cfg.stem_channels, rng, stride=2)
        block = BasicBlock if cfg.block == "basic" else Bottleneck
        self.stages = ModuleList()
        cin = cfg.stem_channels
        for cout, n, stride in zip(cfg.stage_channels, cfg.blocks, cfg.strides):
            stage = ModuleList()
            for b in range(n):
                stage.append(block(cin, cout, stride if b == 0 else 1, rng))
                cin = cout
            self.stages.append(stage)

    def forward(self, x: Tensor) -> List[Tensor]:
        h, w = x.shape[-2:]
        if h % 16 or w % 16:
            raise DimensionError(f"encoder input {h}×{w} must be divisible by 16")
        feats = [self.stem(x)]
        out = feats[0]
        for stage in self.stages:
            for blk in stage:
                out = blk(out)
            feats.append(out)
        return feats


def batch_norms(module: Module) -> List[BatchNorm2d]:
    found = []
    if isinstance(module, BatchNorm2d):
        found.append(module)
    for _, child in module.children():
        found.extend(batch_norms(child))
    return found


def momentum_update(theta2: Sequence[np.ndarray], theta1: Sequence[np.ndarray], m: float) -> None:
    """In place ``theta2 <- m * theta2 + (1 - m) * theta1`` for aligned arrays."""
    if len(theta2) != len(theta1):
        raise ConfigError("parameter sets differ in length")
    for t2, t1 in zip(theta2, theta1):
        if t2.shape != t1.shape:
            raise ConfigError(f"parameter shapes differ: {t2.shape} vs {t1.shape}")
        t2[...] = m * t2 + (1 - m) * t1


class DualEncoder(Module):
    """Target encoder (theta1) plus the encoder that sees the neighbour slices (theta2).

    ``mode`` selects how theta2 behaves:

    * ``"momentum"``: theta2 starts as a copy of theta1, is never touched by
      backprop, and follows theta1 through :meth:`momentum_update`.
    * ``"independent"``: theta2 starts as a copy and is trained by backprop.
    * ``"single"``: there is no theta2; neighbours go through theta1.
    """

    def __init__(
        self,
        cfg: EncoderConfig,
        rng: np.random.Generator,
        mode: str = "momentum",
        m: float = 0.1,
        blend_buffers: bool = True,
    ):
        super().__init__()
        if mode not in ENCODER_MODES:
            raise ConfigError(f"encoder mode must be one of {ENCODER_MODES}, got {mode!r}")
        if not 0.0 <= m < 1.0:
            raise InputError(f"momentum coefficient must lie in [0, 1), got {m}")
        self.mode = mode
        self.m = m
        self.blend_buffers = blend_buffers
        self.target = ResidualEncoder(cfg, rng)
        if mode != "single":
            self.momentum = copy.deepcopy(self.target)
            if mode == "momentum":
                self.momentum.requires_grad_(False)
                for bn in batch_norms(self.momentum):
                    bn.track_stats = False

    @property
    def neighbor_encoder(self) -> ResidualEncoder:
        return self.target if self.mode == "single" else self.momentum

    def forward(self, target: Tensor, neighbors: Tensor) -> Tuple[List[Tensor], List[Tensor]]:
        """Encode ``target`` (N×C×H×W) and ``neighbors`` (N×2s×C×H×W).

        Returns the target pyramid and the neighbour pyramid, the latter with
        maps shaped ``(N, 2s, c, h, w)``.
        """
        if neighbors.ndim != 5 or neighbors.shape[0] != target.shape[0] or neighbors.shape[2:] != target.shape[1:]:
            raise InputError(f"neighbors {neighbors.shape} do not match target {target.shape}")
        target_pyr = self.target(target)
        n, k = neighbors.shape[:2]
        if k == 0:
            return target_pyr, []
        flat = neighbors.reshape(n * k, *neighbors.shape[2:])
        enc = self.neighbor_encoder
        if self.mode == "momentum":
            with no_grad():
                neighbor_pyr = enc(flat)
        elif self.mode == "single":
            bns = batch_norms(enc)
            for bn in bns:
                bn.track_stats = False
            try:
                neighbor_pyr = enc(flat)
            finally:
                for bn in bns:
                    bn.track_stats = True
        else:
            neighbor_pyr = enc(flat)
        return target_pyr, [f.reshape(n, k, *f.shape[1:]) for f in neighbor_pyr]

    def momentum_update(self) -> None:
        """Blend theta1 into theta2; a no-op unless ``mode == "momentum"``."""
        if self.mode != "momentum":
            return
        momentum_update(
            [p.data for p in self.momentum.parameters()],
            [p.data for p in self.target.parameters()],
            self.m,
        )
        t2 = dict(self.momentum.named_buffers())
        for name, t1 in self.target.named_buffers():
            if self.blend_buffers:
                momentum_update([t2[name]], [t1], self.m)
            else:
                t2[name][...] = t1
