"""Finite-difference verification of every differentiable unit in the package.

Each unit builds small random inputs in the requested dtype and returns the
worst relative error between tape gradients and central differences.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import attention as A
from .encoders import EncoderConfig
from .losses import ce_loss, deep_supervision_loss, dice_loss
from .model import MOSformer, ModelConfig
from .tensor import Parameter, Tensor, default_dtype, functional as F, get_default_dtype
from .tensor.core import concat, getitem, matmul, pad, roll
from .tensor.gradcheck import gradcheck, projected
from .tensor.nn import Linear

# finite-difference step and pass threshold per dtype
STEPS = {"float64": 1e-6, "float32": 1e-2}
TOLERANCES = {"float64": 1e-4, "float32": 5e-2}


@dataclass
class UnitResult:
    name: str
    error: float
    tolerance: float
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error) and self.error < self.tolerance)


def _p(rng, *shape, scale=1.0):
    return Parameter((rng.standard_normal(shape) * scale).astype(get_default_dtype()))


def _check(fn, tensors, h, rng, max_coords=None, seed=0):
    return gradcheck(projected(fn, seed), tensors, h=h, max_coords=max_coords, rng=rng)


def unit_elementwise(rng, h):
    a, b = _p(rng, 3, 4), _p(rng, 4)
    c = Parameter(rng.uniform(0.5, 2.0, (3, 4)).astype(get_default_dtype()))
    return _check(lambda: ((a * b - a / c) ** 2 + (c.log() + a.exp()) * 0.5 - b).sum(axis=0), [a, b, c], h, rng)


def unit_matmul(rng, h):
    a, b = _p(rng, 2, 3, 4), _p(rng, 4, 5)
    return _check(lambda: matmul(a, b), [a, b], h, rng)


def unit_shape_ops(rng, h):
    a, b = _p(rng, 2, 3, 4), _p(rng, 2, 1, 4)
    idx = np.array([2, 0, 0])
    return _check(
        lambda: concat([roll(pad(a, [(0, 0), (1, 0), (0, 2)]), (1, -1), (1, 2))[:, :3, :4], b], axis=1).transpose(2, 0, 1)
        + getitem(a, (slice(None), idx)).reshape(4, 2, 3).mean(),
        [a, b], h, rng,
    )


def unit_softmax(rng, h):
    a = _p(rng, 3, 5)
    return _check(lambda: F.softmax(a, axis=-1) + F.log_softmax(a, axis=0), [a], h, rng)


def unit_layer_norm(rng, h):
    x, g, b = _p(rng, 2, 3, 6), _p(rng, 6), _p(rng, 6)
    return _check(lambda: F.layer_norm(x, g, b), [x, g, b], h, rng)


def unit_batch_norm(rng, h):
    x, g, b = _p(rng, 3, 2, 3, 3), _p(rng, 2), _p(rng, 2)
    rm, rv = np.zeros(2), np.ones(2)
    return _check(lambda: F.batch_norm(x, g, b, rm, rv, training=True, update_stats=False), [x, g, b], h, rng)


def unit_gelu(rng, h):
    x = _p(rng, 4, 5, scale=2.0)
    return _check(lambda: F.gelu(x), [x], h, rng)


def unit_linear(rng, h):
    x, w, b = _p(rng, 2, 3, 4), _p(rng, 4, 5), _p(rng, 5)
    return _check(lambda: F.linear(x, w, b), [x, w, b], h, rng)


def unit_conv2d(rng, h):
    x, w, b = _p(rng, 2, 3, 7, 6), _p(rng, 4, 3, 3, 3), _p(rng, 4)
    return max(
        _check(lambda: F.conv2d(x, w, b, stride=2, pad=1), [x, w, b], h, rng),
        _check(lambda: F.conv2d(x, w[:, :, :1, :1], None, stride=1, pad=0), [x, w], h, rng),
    )


def unit_resize(rng, h):
    x = _p(rng, 2, 3, 4, 5)
    return max(
        _check(lambda: F.resize_bilinear(x, 7, 3), [x], h, rng),
        _check(lambda: F.upsample2x(x), [x], h, rng),
    )


def _attention_parts(rng, d=4, heads=2, m=2):
    qkv = Linear(d, 3 * d, rng, std=0.5)
    proj = Linear(d, d, rng, std=0.5)
    table = _p(rng, heads, 2 * m - 1, 2 * m - 1, scale=0.5)
    return qkv, proj, table


def unit_window_msa(rng, h):
    qkv, proj, table = _attention_parts(rng)
    x = _p(rng, 1, 4, 4, 4)
    mask = A.shift_attention_mask(4, 4, 2, 1)

    def fn():
        return A.reverse_windows(A.window_msa(A.partition_windows(x, 2), qkv, proj, table, 2, mask))

    return _check(fn, [x, table, *qkv.parameters(), *proj.parameters()], h, rng)


def unit_csw_msa(rng, h):
    qkv, proj, table = _attention_parts(rng)
    xs = [_p(rng, 1, 4, 4, 4) for _ in range(3)]

    def fn():
        grids = A.csw_msa([A.partition_windows(x, 2) for x in xs], qkv, proj, table, 2)
        return concat([A.reverse_windows(g) for g in grids], axis=0)

    return _check(fn, [*xs, table, *qkv.parameters(), *proj.parameters()], h, rng)


def unit_iftrans_block(rng, h):
    worst = 0.0
    for update in (True, False):
        cfg = A.IFTransConfig(window_size=2, dim=4, heads=2, neighbors=1, update_neighbors=update)
        block = A.IFTransBlock(cfg, rng)
        for p in block.parameters():
            p.data[...] = rng.standard_normal(p.shape) * 0.3
        x = _p(rng, 1, 3, 3, 5, 4)
        worst = max(worst, _check(lambda: block(x), [x, *block.parameters()], h, rng, max_coords=12))
    return worst


def unit_ce_loss(rng, h):
    z = _p(rng, 2, 3, 4, 4)
    lbl = rng.integers(0, 3, (2, 4, 4))
    return gradcheck(lambda: ce_loss(z, lbl), [z], h=h, rng=rng)


def unit_dice_loss(rng, h):
    z = _p(rng, 2, 3, 4, 4)
    lbl = rng.integers(0, 3, (2, 4, 4))
    return gradcheck(lambda: dice_loss(z, lbl), [z], h=h, rng=rng)


def unit_deep_supervision(rng, h):
    zs = [_p(rng, 2, 3, 8 // f, 8 // f) for f in (1, 2, 4)]
    lbl = rng.integers(0, 3, (2, 8, 8))
    return gradcheck(lambda: deep_supervision_loss(zs, lbl), zs, h=h, rng=rng)


def tiny_model_config(encoder_mode: str = "momentum") -> ModelConfig:
    return ModelConfig(
        n_classes=3,
        neighbors=1,
        window_size=2,
        head_dim=4,
        encoder=EncoderConfig(stem_channels=4, stage_channels=(4, 8, 8, 8)),
        encoder_mode=encoder_mode,
    )


def unit_full_model(rng, h):
    model = MOSformer(tiny_model_config(), rng)
    # O(1) weights so every parameter's gradient rises above finite-difference round-off
    for name, p in model.named_parameters():
        if p.requires_grad and not name.endswith(("bn1.weight", "bn2.weight", "bn.weight", "bn3.weight")):
            p.data[...] = rng.standard_normal(p.shape) * (0.5 if p.ndim < 4 else 1.0 / np.sqrt(p.data[0].size))
    tgt = _p(rng, 2, 1, 16, 16)
    nb = Tensor(rng.standard_normal((2, 2, 1, 16, 16)).astype(get_default_dtype()))
    lbl = rng.integers(0, 3, (2, 16, 16))
    return gradcheck(lambda: deep_supervision_loss(model(tgt, nb), lbl), [tgt, *model.trainable_parameters()],
                     h=h, max_coords=2, rng=rng, pooled=True)


UNITS: Dict[str, Callable] = {
    "elementwise": unit_elementwise,
    "matmul": unit_matmul,
    "shape_ops": unit_shape_ops,
    "softmax": unit_softmax,
    "layer_norm": unit_layer_norm,
    "batch_norm": unit_batch_norm,
    "gelu": unit_gelu,
    "linear": unit_linear,
    "conv2d": unit_conv2d,
    "resize": unit_resize,
    "window_msa": unit_window_msa,
    "csw_msa": unit_csw_msa,
    "iftrans_block": unit_iftrans_block,
    "ce_loss": unit_ce_loss,
    "dice_loss": unit_dice_loss,
    "deep_supervision": unit_deep_supervision,
    "full_model": unit_full_model,
}


def run_suite(
    dtype: str = "float64",
    seed: int = 0,
    units: Optional[Sequence[str]] = None,
    tolerance: Optional[float] = None,
) -> List[UnitResult]:
    """Run the named units (all by default) with a fresh seeded rng each."""
    h = STEPS[dtype]
    tol = TOLERANCES[dtype] if tolerance is None else tolerance
    results = []
    for name in units or UNITS:
        rng = np.random.default_rng([seed, sum(map(ord, name))])
        start = time.perf_counter()
        with default_dtype(dtype):
            try:
                err = float(UNITS[name](rng, h))
            except FloatingPointError:
                err = float("inf")
        results.append(UnitResult(name, err, tol, time.perf_counter() - start))
    return results


def format_report(results: Sequence[UnitResult]) -> str:
    lines = [f"{'unit':<18} {'max rel err':>12}  status"]
    for r in results:
        lines.append(f"{r.name:<18} {r.error:>12.3e}  {'ok' if r.passed else 'FAIL'}")
    failed = [r.name for r in results if not r.passed]
    lines.append("all units passed" if not failed else "failed units: " + ", ".join(failed))
    return "\n".join(lines)
