"""Train/evaluate model variants along one hyperparameter axis."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from .config import RunConfig
from .data import load_cases
from .exceptions import ConfigError
from .training import evaluate, train

logger = logging.getLogger(__name__)

AXIS_VALUES = {
    "s": (0, 1, 2),
    "m": tuple(round(0.1 * i, 1) for i in range(10)),
    "scales": ((16,), (8, 16), (4, 8, 16), (2, 4, 8, 16)),
    "encoder_mode": ("single", "independent", "momentum"),
}
AXES = tuple(AXIS_VALUES)


def format_value(value) -> str:
    if isinstance(value, tuple):
        return "/" + ",/".join(str(v) for v in value)
    return str(value)


def parse_value(axis: str, text: str):
    for v in AXIS_VALUES[axis]:
        if format_value(v) == text or str(v) == text:
            return v
    raise ConfigError(f"{text!r} is not a value of axis {axis!r}; choose from {[format_value(v) for v in AXIS_VALUES[axis]]}")


def variant(cfg: RunConfig, axis: str, value) -> RunConfig:
    """``cfg`` with one axis set; every other setting stays as given."""
    if axis == "s":
        model = replace(cfg.model, neighbors=int(value))
    elif axis == "m":
        model = replace(cfg.model, momentum=float(value))
    elif axis == "scales":
        model = replace(cfg.model, fusion_scales=tuple(value))
    elif axis == "encoder_mode":
        model = replace(cfg.model, encoder_mode=str(value))
    else:
        raise ConfigError(f"unknown ablation axis {axis!r}")
    return replace(cfg, model=model)


@dataclass
class AblationRow:
    axis: str
    value: str
    seed: int
    mean_dsc: float
    mean_hd95: float
    seconds: float


@dataclass
class AblationTable:
    rows: List[AblationRow] = field(default_factory=list)

    def medians(self) -> Dict[str, float]:
        by_value: Dict[str, List[float]] = {}
        for r in self.rows:
            by_value.setdefault(r.value, []).append(r.mean_dsc)
        return {v: float(np.median(d)) for v, d in by_value.items()}

    def per_seed(self, value: str) -> Dict[int, float]:
        return {r.seed: r.mean_dsc for r in self.rows if r.value == value}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["axis", "value", "seed", "mean_dsc", "mean_hd95", "seconds"])
        for r in self.rows:
            hd = "" if math.isnan(r.mean_hd95) else f"{r.mean_hd95:.4f}"
            w.writerow([r.axis, r.value, r.seed, f"{r.mean_dsc:.4f}", hd, f"{r.seconds:.1f}"])
        for v, med in self.medians().items():
            w.writerow([self.rows[0].axis, v, "median", f"{med:.4f}", "", ""])
        return buf.getvalue()


def run_ablation(
    cfg: RunConfig,
    axis: str,
    manifest: Union[str, Path],
    seeds: Sequence[int],
    out_dir: Union[str, Path, None] = None,
    values: Optional[Sequence] = None,
) -> AblationTable:
    """Train one model per (value, seed) on the ``train`` split and score it on ``test``."""
    if axis not in AXIS_VALUES:
        raise ConfigError(f"unknown ablation axis {axis!r}; choose from {AXES}")
    chosen = AXIS_VALUES[axis] if not values else [parse_value(axis, v) if isinstance(v, str) else v for v in values]
    train_cases = load_cases(manifest, "train")
    test_cases = load_cases(manifest, "test")
    out = Path(out_dir) if out_dir is not None else None
    table = AblationTable()
    for value in chosen:
        for seed in seeds:
            vcfg = variant(cfg, axis, value)
            vcfg = replace(vcfg, train=replace(vcfg.train, seed=seed))
            run_dir = None if out is None else out / f"{axis}={format_value(value).replace('/', '')}" / f"seed{seed}"
            start = time.perf_counter()
            result = train(vcfg, train_cases, run_dir)
            report = evaluate(result.model, vcfg, test_cases)
            row = AblationRow(axis, format_value(value), seed, report.mean_dsc, report.mean_hd95, time.perf_counter() - start)
            logger.info("%s=%s seed %d: DSC %.2f", axis, row.value, seed, row.mean_dsc)
            table.rows.append(row)
            if out is not None:
                out.mkdir(parents=True, exist_ok=True)
                (out / f"ablation_{axis}.csv").write_text(table.to_csv(), encoding="utf-8")
    return table
