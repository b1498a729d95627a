"""The full 2.5D segmentation network and slice-wise volume inference."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .attention import IFTransBlock, IFTransConfig
from .encoders import DualEncoder, EncoderConfig
from .exceptions import ConfigError, DimensionError, InputError
from .tensor import Tensor, concat, no_grad, upsample2x
from .tensor.nn import Conv2d, ConvBNReLU, Module, ModuleDict, ModuleList

FUSION_SCALES = (2, 4, 8, 16)


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    ``fusion_scales`` lists the downsampling factors whose skip features go
    through inter-slice fusion; factor 16 covers both 1/16 maps.
    """

    in_channels: int = 1
    n_classes: int = 4
    neighbors: int = 1
    fusion_scales: Tuple[int, ...] = FUSION_SCALES
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    window_size: int = 7
    head_dim: int = 16
    mlp_ratio: float = 4.0
    encoder_mode: str = "momentum"
    momentum: float = 0.1
    blend_bn_stats: bool = True
    update_neighbors: bool = True
    boundary: str = "clamp"

    def __post_init__(self):
        if self.n_classes < 2:
            raise ConfigError("need at least two classes")
        if self.neighbors < 0:
            raise ConfigError("neighbors must be >= 0")
        if not self.fusion_scales or any(s not in FUSION_SCALES for s in self.fusion_scales):
            raise ConfigError(f"fusion scales must be a non-empty subset of {FUSION_SCALES}")
        if self.boundary not in ("clamp", "mirror"):
            raise ConfigError("boundary must be 'clamp' or 'mirror'")
        if self.encoder.in_channels != self.in_channels:
            object.__setattr__(self, "encoder", replace(self.encoder, in_channels=self.in_channels))

    def iftrans_config(self, dim: int) -> IFTransConfig:
        heads = max(1, dim // self.head_dim)
        while dim % heads:
            heads -= 1
        return IFTransConfig(
            window_size=self.window_size,
            dim=dim,
            heads=heads,
            neighbors=self.neighbors,
            mlp_ratio=self.mlp_ratio,
            update_neighbors=self.update_neighbors,
        )


class LogitStack(NamedTuple):
    full: Tensor
    half: Tensor
    quarter: Tensor


def neighbor_indices(i: int, depth: int, s: int, boundary: str = "clamp") -> List[int]:
    """Slice indices ``i-s .. i-1, i+1 .. i+s`` mapped into ``[0, depth)``."""
    out = []
    for off in list(range(-s, 0)) + list(range(1, s + 1)):
        j = i + off
        if boundary == "clamp":
            j = min(max(j, 0), depth - 1)
        else:
            period = 2 * (depth - 1)
            if period == 0:
                j = 0
            else:
                j = abs(j) % period
                j = period - j if j >= depth else j
        out.append(j)
    return out


class DecoderBlock(Module):
    """Optional ×2 upsample, concatenation with the skip map, then (Conv+BN+ReLU)×2."""

    def __init__(self, cin: int, cskip: int, cout: int, upsample: bool, rng: np.random.Generator):
        super().__init__()
        self.upsample = upsample
        self.conv1 = ConvBNReLU(cin + cskip, cout, rng)
        self.conv2 = ConvBNReLU(cout, cout, rng)

    def forward(self, x: Tensor, skip: Optional[Tensor] = None) -> Tensor:
        if self.upsample:
            x = upsample2x(x)
        if skip is not None:
            x = concat([x, skip], axis=1)
        return self.conv2(self.conv1(x))


class SupervisionHead(Module):
    """×2 bilinear upsample followed by a 1×1 convolution to class logits."""

    def __init__(self, cin: int, n_classes: int, rng: np.random.Generator):
        super().__init__()
        self.conv = Conv2d(cin, n_classes, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(upsample2x(x))


class MOSformer(Module):
    """Dual encoders → per-scale IF-Trans fusion → U-shaped decoder with deep supervision.

    Encoder levels (stem and four stages) sit at 1/2, 1/4, 1/8, 1/16 and
    1/16. The last level is the decoder bottom; every other level is a skip
    connection. Fused levels are named ``k1 .. k5`` in that order.
    """

    def __init__(self, cfg: ModelConfig, rng: Optional[np.random.Generator] = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        enc = cfg.encoder
        chans = enc.level_channels
        self.level_strides = enc.level_strides
        self.enc = DualEncoder(enc, rng, mode=cfg.encoder_mode, m=cfg.momentum, blend_buffers=cfg.blend_bn_stats)
        self.ift = ModuleDict()
        for k, (c, stride) in enumerate(zip(chans, self.level_strides), start=1):
            if stride in cfg.fusion_scales:
                setattr(self.ift, f"k{k}", IFTransBlock(cfg.iftrans_config(c), rng))
        # decoder from the bottom (level 5) up to full resolution
        self.dec = ModuleList()
        cin = chans[4]
        for level in (3, 2, 1, 0):
            up = self.level_strides[level] != self.level_strides[level + 1]
            self.dec.append(DecoderBlock(cin, chans[level], chans[level], up, rng))
            cin = chans[level]
        self.dec.append(DecoderBlock(cin, 0, chans[0], True, rng))
        self.head = Conv2d(chans[0], cfg.n_classes, 1, rng)
        # auxiliary heads read the decoder outputs at 1/4 and 1/8
        self.ds_half = SupervisionHead(chans[1], cfg.n_classes, rng)
        self.ds_quarter = SupervisionHead(chans[2], cfg.n_classes, rng)

    # ------------------------------------------------------------------ fusion
    def fuse(self, target_pyr: Sequence[Tensor], neighbor_pyr: Sequence[Tensor]) -> List[Tensor]:
        s = self.cfg.neighbors
        fused = []
        for k, ft in enumerate(target_pyr, start=1):
            name = f"k{k}"
            if name not in self.ift:
                fused.append(ft)
                continue
            n, c, h, w = ft.shape
            parts = [ft.reshape(n, 1, c, h, w)]
            if s:
                fn = neighbor_pyr[k - 1]
                parts = [fn[:, :s], parts[0], fn[:, s:]]
            stack = concat(parts, axis=1).transpose(0, 1, 3, 4, 2)
            out = self.ift[name](stack)
            fused.append(out.transpose(0, 3, 1, 2))
        return fused

    def decode(self, skips: Sequence[Tensor]) -> LogitStack:
        x = skips[4]
        outs = []
        for block, level in zip(self.dec, (3, 2, 1, 0, None)):
            x = block(x, None if level is None else skips[level])
            outs.append(x)
        # outs: 1/16, 1/8, 1/4, 1/2, 1/1
        return LogitStack(self.head(outs[4]), self.ds_half(outs[2]), self.ds_quarter(outs[1]))

    def forward(self, target, neighbors) -> LogitStack:
        """``target``: N×C×H×W; ``neighbors``: N×2s×C×H×W ordered i-s..i-1, i+1..i+s."""
        target = target if isinstance(target, Tensor) else Tensor(target)
        neighbors = neighbors if isinstance(neighbors, Tensor) else Tensor(neighbors)
        if target.ndim != 4:
            raise DimensionError(f"target must be N×C×H×W, got {target.shape}")
        if target.shape[1] != self.cfg.in_channels:
            raise DimensionError(f"expected {self.cfg.in_channels} input channels, got {target.shape[1]}")
        if neighbors.ndim != 5 or neighbors.shape[1] != 2 * self.cfg.neighbors:
            raise DimensionError(
                f"expected neighbors N×{2 * self.cfg.neighbors}×C×H×W, got {neighbors.shape}"
            )
        target_pyr, neighbor_pyr = self.enc(target, neighbors)
        return self.decode(self.fuse(target_pyr, neighbor_pyr))

    def momentum_update(self) -> None:
        self.enc.momentum_update()

    def bypass_fusion(self) -> None:
        """Zero every IF-Trans residual branch so fusion becomes the identity."""
        for _, block in self.ift.items():
            block.zero_output_projections()


def gather_slices(volume: np.ndarray, index: int, s: int, boundary: str = "clamp") -> Tuple[np.ndarray, np.ndarray]:
    """Target slice (C×H×W) and its 2s neighbours (2s×C×H×W) from a C×H×W×D volume."""
    depth = volume.shape[-1]
    target = volume[..., index]
    idx = neighbor_indices(index, depth, s, boundary)
    if idx:
        neigh = np.stack([volume[..., j] for j in idx])
    else:
        neigh = np.zeros((0,) + target.shape, dtype=volume.dtype)
    return target, neigh


def predict_volume_logits(model: MOSformer, volume: np.ndarray, batch_size: int = 8) -> np.ndarray:
    """Full-resolution logits ``(C0, H, W, D)`` for every slice of ``volume``."""
    volume = np.asarray(volume)
    if volume.ndim == 3:
        volume = volume[None]
    if volume.ndim != 4:
        raise InputError(f"volume must be C×H×W×D, got shape {volume.shape}")
    if volume.shape[-1] < 1:
        raise InputError("volume has no slices")
    c, h, w, depth = volume.shape
    s = model.cfg.neighbors
    dtype = model.head.weight.dtype
    vol = volume.astype(dtype, copy=False)
    out = np.empty((model.cfg.n_classes, h, w, depth), dtype=dtype)
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            for start in range(0, depth, batch_size):
                idx = range(start, min(start + batch_size, depth))
                pairs = [gather_slices(vol, i, s, model.cfg.boundary) for i in idx]
                tgt = np.stack([p[0] for p in pairs])
                nb = np.stack([p[1] for p in pairs])
                logits = model(Tensor(tgt), Tensor(nb)).full.data
                out[..., start : start + len(idx)] = logits.transpose(1, 2, 3, 0)
    finally:
        model.train(was_training)
    return out


def predict_volume(model: MOSformer, volume: np.ndarray, batch_size: int = 8) -> np.ndarray:
    """Label map ``(H, W, D)``: argmax over the full-resolution logits of every slice."""
    return predict_volume_logits(model, volume, batch_size).argmax(axis=0).astype(np.int32)
