"""Cross-slice (shifted) window attention and the two-layer inter-slice fusion block.

Feature maps inside this module are channel-last: ``(N, S, H, W, d)`` where
``S = 2s + 1`` slices are ordered ``i-s .. i .. i+s``. A joint window holds
the ``M*M`` tokens of one spatial window from every slice, slice-major, so
``L = S * M * M`` tokens attend to each other.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .exceptions import DimensionError, InputError
from .tensor import Parameter, Tensor, concat, functional as F, get_default_dtype, pad, roll
from .tensor.nn import LayerNorm, Linear, Module

MASK_VALUE = -1e9


@dataclass(frozen=True)
class IFTransConfig:
    window_size: int = 7
    dim: int = 32
    heads: int = 2
    neighbors: int = 1
    mlp_ratio: float = 4.0
    update_neighbors: bool = True

    def __post_init__(self):
        if self.window_size < 1:
            raise InputError("window_size must be >= 1")
        if self.heads < 1 or self.dim % self.heads:
            raise InputError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if self.neighbors < 0:
            raise InputError("neighbors must be >= 0")


@dataclass
class WindowGrid:
    """Tokens of a feature map grouped into non-overlapping ``M×M`` windows.

    ``windows`` has shape ``(*lead, n_windows, M*M, d)`` with windows in
    raster order over the ``height × width`` map.
    """

    windows: Tensor
    window_size: int
    height: int
    width: int

    @property
    def n_windows(self) -> int:
        return (self.height // self.window_size) * (self.width // self.window_size)

    @property
    def origins(self) -> List[Tuple[int, int]]:
        m = self.window_size
        return [(r, c) for r in range(0, self.height, m) for c in range(0, self.width, m)]


def partition_windows(fmap: Tensor, window_size: int) -> WindowGrid:
    """Split a channel-last map ``(*lead, H, W, d)`` into raster-ordered windows."""
    *lead, h, w, d = fmap.shape
    m = window_size
    if h % m or w % m:
        raise DimensionError(f"map {h}×{w} is not divisible by window size {m}")
    k = len(lead)
    x = fmap.reshape(*lead, h // m, m, w // m, m, d)
    x = x.transpose(*range(k), k, k + 2, k + 1, k + 3, k + 4)
    return WindowGrid(x.reshape(*lead, (h // m) * (w // m), m * m, d), m, h, w)


def reverse_windows(grid: WindowGrid, height: Optional[int] = None, width: Optional[int] = None) -> Tensor:
    """Inverse of :func:`partition_windows`."""
    h = grid.height if height is None else height
    w = grid.width if width is None else width
    m = grid.window_size
    *lead, nw, t, d = grid.windows.shape
    if h % m or w % m or nw != (h // m) * (w // m) or t != m * m:
        raise DimensionError(f"grid of {nw} windows × {t} tokens does not tile a {h}×{w} map with M={m}")
    k = len(lead)
    x = grid.windows.reshape(*lead, h // m, w // m, m, m, d)
    x = x.transpose(*range(k), k, k + 2, k + 1, k + 3, k + 4)
    return x.reshape(*lead, h, w, d)


def cyclic_shift(fmap: Tensor, dh: int, dw: int, axes: Tuple[int, int] = (-3, -2)) -> Tensor:
    """Toroidal roll of a channel-last map by ``(dh, dw)`` pixels."""
    if dh == 0 and dw == 0:
        return fmap
    return roll(fmap, (dh, dw), axes)


@functools.lru_cache(maxsize=128)
def relative_position_index(window_size: int) -> np.ndarray:
    """``(M², M²)`` map from token pair ``(p, q)`` to a flat bias-table slot.

    ``index = (Δrow + M - 1) * (2M - 1) + (Δcol + M - 1)`` with ``Δ = p - q``.
    """
    m = window_size
    coords = np.stack(np.meshgrid(np.arange(m), np.arange(m), indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :]
    index = (rel[0] + m - 1) * (2 * m - 1) + (rel[1] + m - 1)
    index.flags.writeable = False
    return index


@functools.lru_cache(maxsize=128)
def shift_attention_mask(height: int, width: int, window_size: int, shift: int) -> np.ndarray:
    """Additive mask ``(n_windows, M², M²)`` for attention on a cyclically shifted map.

    Token pairs whose pixels came from different regions of the unshifted map
    get ``MASK_VALUE``; all others get 0. With ``shift == 0`` the mask is zero.
    """
    m = window_size
    if height % m or width % m:
        raise DimensionError(f"map {height}×{width} is not divisible by window size {m}")
    nw = (height // m) * (width // m)
    if shift == 0:
        mask = np.zeros((nw, m * m, m * m))
    else:
        region = np.zeros((height, width), dtype=np.int64)
        bands = (slice(0, -m), slice(-m, -shift), slice(-shift, None))
        label = 0
        for hs in bands:
            for ws in bands:
                region[hs, ws] = label
                label += 1
        ids = region.reshape(height // m, m, width // m, m).transpose(0, 2, 1, 3).reshape(nw, m * m)
        mask = np.where(ids[:, :, None] != ids[:, None, :], MASK_VALUE, 0.0)
    mask.flags.writeable = False
    return mask


def _joint_bias(table: Tensor, window_size: int, n_slices: int) -> Tensor:
    """Gather the in-plane bias for every pair in an ``S·M²`` joint window.

    The same 2-D displacement bias applies regardless of which slices the
    two tokens come from.
    """
    heads = table.shape[0]
    index = relative_position_index(window_size)
    if n_slices > 1:
        index = np.tile(index, (n_slices, n_slices))
    return table.reshape(heads, -1)[:, index]


def _joint_mask(mask: np.ndarray, n_slices: int) -> np.ndarray:
    return mask if n_slices == 1 else np.tile(mask, (1, n_slices, n_slices))


def window_attention(
    tokens: Tensor,
    qkv: Linear,
    proj: Linear,
    heads: int,
    bias: Optional[Tensor] = None,
    mask: Optional[np.ndarray] = None,
    return_weights: bool = False,
):
    """Multi-head self-attention inside each window.

    ``tokens`` is ``(B, L, d)`` with ``B = N * n_windows``; ``bias`` is
    ``(heads, L, L)``; ``mask`` is ``(n_windows, L, L)`` and is broadcast over
    the batch.
    """
    b, l, d = tokens.shape
    dh = d // heads
    x = qkv(tokens).reshape(b, l, 3, heads, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = x[0], x[1], x[2]
    scores = (q * (1.0 / math.sqrt(dh))) @ k.transpose(0, 1, 3, 2)
    if bias is not None:
        scores = scores + bias
    if mask is not None:
        nw = mask.shape[0]
        scores = F.add_constant(scores.reshape(b // nw, nw, heads, l, l), mask[None, :, None].astype(scores.dtype))
        scores = scores.reshape(b, heads, l, l)
    weights = F.softmax(scores, axis=-1)
    out = proj((weights @ v).transpose(0, 2, 1, 3).reshape(b, l, d))
    return (out, weights) if return_weights else out


def cross_slice_attention(
    windows: Tensor,
    qkv: Linear,
    proj: Linear,
    bias_table: Optional[Tensor],
    heads: int,
    window_size: int,
    mask: Optional[np.ndarray] = None,
) -> Tensor:
    """Attention over joint windows ``(N, n_windows, S, M², d)``; same shape out."""
    n, nw, n_slices, t, d = windows.shape
    tokens = windows.reshape(n * nw, n_slices * t, d)
    bias = None if bias_table is None else _joint_bias(bias_table, window_size, n_slices)
    joint_mask = None if mask is None else _joint_mask(mask, n_slices)
    out = window_attention(tokens, qkv, proj, heads, bias, joint_mask)
    return out.reshape(n, nw, n_slices, t, d)


def csw_msa(
    grids: Sequence[WindowGrid],
    qkv: Linear,
    proj: Linear,
    bias_table: Optional[Tensor],
    heads: int,
    mask: Optional[np.ndarray] = None,
) -> List[WindowGrid]:
    """Cross-slice window attention over ``2s + 1`` aligned window grids.

    For every spatial window the tokens of all slices are concatenated and
    attend jointly; the result is split back into one grid per slice.
    """
    first = grids[0]
    for g in grids[1:]:
        if g.windows.shape != first.windows.shape or g.window_size != first.window_size:
            raise DimensionError("all slices must share window size, count and dimension")
    *lead, nw, t, d = first.windows.shape
    n_slices = len(grids)
    stacked = concat([g.windows.reshape(-1, nw, 1, t, d) for g in grids], axis=2)
    out = cross_slice_attention(stacked, qkv, proj, bias_table, heads, first.window_size, mask)
    return [
        WindowGrid(out[:, :, j].reshape(*lead, nw, t, d), first.window_size, first.height, first.width)
        for j in range(n_slices)
    ]


def window_msa(
    grid: WindowGrid,
    qkv: Linear,
    proj: Linear,
    bias_table: Optional[Tensor],
    heads: int,
    mask: Optional[np.ndarray] = None,
) -> WindowGrid:
    """Plain single-slice window attention."""
    *lead, nw, t, d = grid.windows.shape
    tokens = grid.windows.reshape(-1, t, d)
    bias = None
    if bias_table is not None:
        bias = bias_table.reshape(bias_table.shape[0], -1)[:, relative_position_index(grid.window_size)]
    out = window_attention(tokens, qkv, proj, heads, bias, mask)
    return WindowGrid(out.reshape(*lead, nw, t, d), grid.window_size, grid.height, grid.width)


class IFTransLayer(Module):
    """Pre-norm (shifted) cross-slice window attention followed by a pre-norm MLP.

    Operates jointly on all slices of ``(N, S, H, W, d)`` and returns the same shape.
    """

    def __init__(self, cfg: IFTransConfig, shift: int, rng: np.random.Generator):
        super().__init__()
        d = cfg.dim
        m = cfg.window_size
        hidden = int(round(d * cfg.mlp_ratio))
        self.dim = d
        self.heads = cfg.heads
        self.window_size = m
        self.shift = shift
        self.ln1 = LayerNorm(d)
        self.qkv = Linear(d, 3 * d, rng)
        self.proj = Linear(d, d, rng)
        self.bias_table = Parameter((rng.standard_normal((cfg.heads, 2 * m - 1, 2 * m - 1)) * 0.02).astype(get_default_dtype()))
        self.ln2 = LayerNorm(d)
        self.mlp1 = Linear(d, hidden, rng)
        self.mlp2 = Linear(hidden, d, rng)

    def attention(self, x: Tensor) -> Tensor:
        n, s, h, w, d = x.shape
        m = self.window_size
        ph, pw = (-h) % m, (-w) % m
        if ph or pw:
            x = pad(x, [(0, 0), (0, 0), (0, ph), (0, pw), (0, 0)])
        hp, wp = h + ph, w + pw
        if self.shift:
            x = cyclic_shift(x, -self.shift, -self.shift)
        mask = shift_attention_mask(hp, wp, m, self.shift) if self.shift else None
        grid = partition_windows(x, m)
        windows = grid.windows.transpose(0, 2, 1, 3, 4)
        fused = cross_slice_attention(windows, self.qkv, self.proj, self.bias_table, self.heads, m, mask)
        out = reverse_windows(WindowGrid(fused.transpose(0, 2, 1, 3, 4), m, hp, wp))
        if self.shift:
            out = cyclic_shift(out, self.shift, self.shift)
        if ph or pw:
            out = out[:, :, :h, :w]
        return out

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attention(self.ln1(x))
        return x + self.mlp2(F.gelu(self.mlp1(self.ln2(x))))


class IFTransBlock(Module):
    """Regular then shifted IF-Trans layer; returns only the target slice.

    With ``update_neighbors`` the second layer sees neighbour features
    refined by the first layer; otherwise it reuses the block inputs for
    the neighbours and only the target slice is carried forward.
    """

    def __init__(self, cfg: IFTransConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.l0 = IFTransLayer(cfg, 0, rng)
        self.l1 = IFTransLayer(cfg, cfg.window_size // 2, rng)

    def forward(self, feats: Tensor) -> Tensor:
        """``feats``: ``(N, 2s+1, H, W, d)``; returns target features ``(N, H, W, d)``."""
        n, s_total, h, w, d = feats.shape
        t = s_total // 2
        x = self.l0(feats)
        if not self.cfg.update_neighbors and s_total > 1:
            x = concat([feats[:, :t], x[:, t : t + 1], feats[:, t + 1 :]], axis=1)
        x = self.l1(x)
        return x[:, t]

    def zero_output_projections(self) -> None:
        """Zero the residual branches so the block becomes the identity on the target slice."""
        for layer in (self.l0, self.l1):
            for lin in (layer.proj, layer.mlp2):
                lin.weight.data[...] = 0
                lin.bias.data[...] = 0
