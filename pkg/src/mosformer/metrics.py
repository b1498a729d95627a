"""Overlap and surface-distance metrics with a CSV report."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .exceptions import InputError


def dsc(pred: np.ndarray, truth: np.ndarray) -> float:
    """Dice similarity ``2|P∩G| / (|P|+|G|)`` of two boolean masks; 1.0 when both are empty."""
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if pred.shape != truth.shape:
        raise InputError(f"mask shapes differ: {pred.shape} vs {truth.shape}")
    total = int(pred.sum()) + int(truth.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, truth).sum()) / total


def boundary_points(mask: np.ndarray) -> np.ndarray:
    """Integer coordinates of surface voxels (face connectivity, i.e. 4-conn in 2-D, 6-conn in 3-D)."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return np.zeros((0, mask.ndim), dtype=np.int64)
    structure = ndimage.generate_binary_structure(mask.ndim, 1)
    interior = ndimage.binary_erosion(mask, structure=structure, border_value=0)
    return np.argwhere(mask & ~interior)


def _directed_distances(src: np.ndarray, dst: np.ndarray, spacing: np.ndarray) -> np.ndarray:
    """Distance from each point of ``src`` to its nearest point in ``dst`` (physical units)."""
    tree = cKDTree(dst * spacing)
    _, nearest = tree.query(src * spacing)
    diff = (src - dst[nearest]) * spacing
    return np.sqrt((diff * diff).sum(axis=1))


def hd95(pred_points, truth_points, spacing: Optional[Sequence[float]] = None) -> float:
    """Symmetric 95th-percentile Hausdorff distance between two point sets.

    ``max(p95 of pred→truth nearest distances, p95 of truth→pred)`` with
    linear-interpolation percentiles. Returns ``nan`` if either set is empty.
    """
    p = np.asarray(pred_points, dtype=np.float64)
    g = np.asarray(truth_points, dtype=np.float64)
    if len(p) == 0 or len(g) == 0:
        return math.nan
    sp = np.ones(p.shape[1]) if spacing is None else np.asarray(spacing, dtype=np.float64)
    d_pg = np.percentile(_directed_distances(p, g, sp), 95)
    d_gp = np.percentile(_directed_distances(g, p, sp), 95)
    return float(max(d_pg, d_gp))


def hd95_masks(pred: np.ndarray, truth: np.ndarray, spacing: Optional[Sequence[float]] = None) -> float:
    return hd95(boundary_points(pred), boundary_points(truth), spacing)


@dataclass
class MetricRow:
    case_id: str
    class_id: int
    dsc_percent: float
    hd95: float
    undefined: bool


@dataclass
class MetricReport:
    """Per-(case, class) metrics; background (class 0) is never reported."""

    rows: List[MetricRow] = field(default_factory=list)

    def extend(self, rows: Iterable[MetricRow]) -> None:
        self.rows.extend(rows)

    @property
    def mean_dsc(self) -> float:
        vals = [r.dsc_percent for r in self.rows]
        return float(np.mean(vals)) if vals else math.nan

    @property
    def mean_hd95(self) -> float:
        vals = [r.hd95 for r in self.rows if not r.undefined]
        return float(np.mean(vals)) if vals else math.nan

    def class_means(self) -> dict:
        out = {}
        for cid in sorted({r.class_id for r in self.rows}):
            rows = [r for r in self.rows if r.class_id == cid]
            hds = [r.hd95 for r in rows if not r.undefined]
            out[cid] = (float(np.mean([r.dsc_percent for r in rows])), float(np.mean(hds)) if hds else math.nan)
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["case_id", "class_id", "dsc_percent", "hd95", "undefined_flag"])
        for r in self.rows:
            writer.writerow([r.case_id, r.class_id, f"{r.dsc_percent:.6f}", "" if r.undefined else f"{r.hd95:.6f}", int(r.undefined)])
        hd = self.mean_hd95
        writer.writerow(["mean", "all", f"{self.mean_dsc:.6f}", "" if math.isnan(hd) else f"{hd:.6f}", int(math.isnan(hd))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "MetricReport":
        rows = []
        for rec in csv.DictReader(io.StringIO(text)):
            if rec["case_id"] == "mean":
                continue
            undefined = rec["undefined_flag"] == "1"
            rows.append(
                MetricRow(rec["case_id"], int(rec["class_id"]), float(rec["dsc_percent"]),
                          math.nan if undefined else float(rec["hd95"]), undefined)
            )
        return cls(rows)


def evaluate_case(
    case_id: str,
    pred: np.ndarray,
    truth: np.ndarray,
    n_classes: int,
    spacing: Optional[Sequence[float]] = None,
) -> List[MetricRow]:
    """Metrics for every foreground class present in ``truth``.

    HD95 is flagged undefined when either the prediction or the truth has
    no voxels of the class.
    """
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise InputError(f"prediction {pred.shape} and truth {truth.shape} differ in shape")
    rows = []
    for c in range(1, n_classes):
        g = truth == c
        if not g.any():
            continue
        p = pred == c
        hd = hd95_masks(p, g, spacing)
        rows.append(MetricRow(case_id, c, 100.0 * dsc(p, g), hd, math.isnan(hd)))
    return rows
