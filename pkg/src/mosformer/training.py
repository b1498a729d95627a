"""Training loop, checkpointing and evaluation."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import config as config_mod
from .config import RunConfig
from .data import Case
from .exceptions import ConfigError, DimensionError, TrainingDiverged
from .losses import LossWeights, deep_supervision_terms
from .metrics import MetricReport, evaluate_case
from .model import MOSformer, ModelConfig, gather_slices, predict_volume
from .tensor import SGD, LrSchedule, Tensor, default_dtype, lr_at
from .tensor import checkpoint as ckpt
from .tensor.functional import bilinear_matrix

logger = logging.getLogger(__name__)

CONFIG_RECORD = "meta.config"
LOG_FIELDS = ["epoch", "iter", "lr", "loss", "ce_full", "dice_full", "ce_half", "dice_half", "ce_quarter", "dice_quarter"]


def worker_count() -> int:
    """Worker cap from ``MOSF_THREADS`` (default 1)."""
    try:
        return max(1, int(os.environ.get("MOSF_THREADS", "1")))
    except ValueError:
        return 1


def build_model(cfg: RunConfig) -> MOSformer:
    with default_dtype(cfg.train.dtype):
        return MOSformer(cfg.model, np.random.default_rng(cfg.train.seed))


def parameter_digest(arrays: Sequence[np.ndarray]) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


# ------------------------------------------------------------- checkpoints
def model_state(model: MOSformer, cfg: Optional[RunConfig] = None) -> Dict[str, np.ndarray]:
    state = dict(model.state_dict())
    if cfg is not None:
        state[CONFIG_RECORD] = np.frombuffer(config_mod.to_text(cfg).encode("utf-8"), dtype=np.uint8)
    return state


def save_model(path: Union[str, Path], model: MOSformer, cfg: Optional[RunConfig] = None) -> None:
    ckpt.save(path, model_state(model, cfg))


def load_model(path: Union[str, Path], cfg: Optional[RunConfig] = None) -> Tuple[MOSformer, RunConfig]:
    """Rebuild a model from a checkpoint, using its embedded config unless ``cfg`` is given."""
    state = ckpt.load(path)
    if cfg is None:
        if CONFIG_RECORD not in state:
            raise ConfigError(f"{path} has no embedded config; pass one explicitly")
        cfg = config_mod.from_text(state[CONFIG_RECORD].tobytes().decode("utf-8"))
    model = build_model(cfg)
    model.load_state_dict({k: v for k, v in state.items() if k != CONFIG_RECORD})
    return model, cfg


# ------------------------------------------------------------ preprocessing
def resize_case_arrays(image: np.ndarray, labels: np.ndarray, size: int) -> Tuple[np.ndarray, np.ndarray]:
    """Resize the in-plane grid: bilinear for images, nearest for labels."""
    c, h, w, d = image.shape
    if (h, w) == (size, size):
        return image, labels
    ah = bilinear_matrix(h, size)
    aw = bilinear_matrix(w, size)
    img = np.einsum("ih,chwd,jw->cijd", ah, image.astype(np.float64), aw).astype(image.dtype)
    rows = np.minimum((np.arange(size) * h) // size, h - 1)
    cols = np.minimum((np.arange(size) * w) // size, w - 1)
    return img, labels[rows][:, cols]


class SliceSampler:
    """Uniform sampling over every (case, slice) pair, with clamped neighbour gathering."""

    def __init__(self, cases: Sequence[Case], s: int, boundary: str, dtype, rng: np.random.Generator, flip: bool = False):
        if not cases:
            raise DimensionError("no training cases")
        self.cases = cases
        self.s = s
        self.boundary = boundary
        self.dtype = dtype
        self.rng = rng
        self.flip = flip
        self.index = [(ci, z) for ci, c in enumerate(cases) for z in range(c.image.shape[-1])]

    def __len__(self) -> int:
        return len(self.index)

    def batch(self, size: int):
        picks = self.rng.integers(0, len(self.index), size=size)
        tgts, nbs, lbls = [], [], []
        for p in picks:
            ci, z = self.index[p]
            case = self.cases[ci]
            tgt, nb = gather_slices(case.image, z, self.s, self.boundary)
            lbl = case.labels[..., z]
            if self.flip:
                fh, fw = self.rng.integers(0, 2, size=2)
                if fh:
                    tgt, nb, lbl = tgt[..., ::-1, :], nb[..., ::-1, :], lbl[::-1, :]
                if fw:
                    tgt, nb, lbl = tgt[..., ::-1], nb[..., ::-1], lbl[:, ::-1]
            tgts.append(tgt)
            nbs.append(nb)
            lbls.append(lbl)
        return (
            np.stack(tgts).astype(self.dtype),
            np.stack(nbs).astype(self.dtype),
            np.stack(lbls).astype(np.int64),
        )


@dataclass
class TrainResult:
    model: MOSformer
    config: RunConfig
    log: List[dict] = field(default_factory=list)

    def epoch_losses(self) -> List[float]:
        by_epoch: Dict[int, List[float]] = {}
        for row in self.log:
            by_epoch.setdefault(row["epoch"], []).append(row["loss"])
        return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]


def _prepare_cases(cases: Sequence[Case], cfg: RunConfig) -> List[Case]:
    size = cfg.train.image_size
    if not size:
        return list(cases)
    out = []
    for c in cases:
        img, lbl = resize_case_arrays(c.image, c.labels, size)
        out.append(replace(c, image=img, labels=lbl))
    return out


def train(
    cfg: RunConfig,
    cases: Sequence[Case],
    out_dir: Union[str, Path, None] = None,
    on_iteration: Optional[Callable[[dict], None]] = None,
    model: Optional[MOSformer] = None,
) -> TrainResult:
    """Train on ``cases`` with SGD + momentum under the warmup/cosine schedule.

    Every iteration: sample a batch of target slices with their neighbours,
    compute the deep-supervision loss, backprop, take an SGD step on all
    trainable parameters, then blend the target encoder into the momentum
    encoder. With ``out_dir`` set, writes ``train_log.csv`` and overwrites
    ``checkpoint.mosf`` after every epoch.
    """
    cases = _prepare_cases(cases, cfg)
    for c in cases:
        if c.labels.max(initial=0) >= cfg.model.n_classes:
            raise ConfigError(f"case {c.case_id} has labels >= n_classes={cfg.model.n_classes}")
        if c.image.shape[0] != cfg.model.in_channels:
            raise ConfigError(f"case {c.case_id} has {c.image.shape[0]} channels, model expects {cfg.model.in_channels}")
    t = cfg.train
    dtype = np.dtype(t.dtype)
    model = build_model(cfg) if model is None else model
    model.train()
    optim = SGD(model.trainable_parameters(), lr=cfg.optim.lr_max, momentum=cfg.optim.momentum, weight_decay=cfg.optim.weight_decay)
    sched = LrSchedule(cfg.optim.lr_max, cfg.optim.lr_min, t.warmup_epochs, t.epochs)
    sampler = SliceSampler(cases, cfg.model.neighbors, cfg.model.boundary, dtype, np.random.default_rng([t.seed, 1]), t.flip)
    iters = t.iters_per_epoch or max(1, len(sampler) // t.batch_size)
    weights = LossWeights()

    out = Path(out_dir) if out_dir is not None else None
    log_fh = writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = (out / "train_log.csv").open("w", newline="", encoding="utf-8")
        writer = csv.DictWriter(log_fh, fieldnames=LOG_FIELDS, lineterminator="\n")
        writer.writeheader()

    result = TrainResult(model, cfg)
    try:
        for epoch in range(t.epochs):
            optim.lr = lr_at(epoch, sched)
            for it in range(iters):
                tgt, nb, lbl = sampler.batch(t.batch_size)
                stack = model(Tensor(tgt), Tensor(nb))
                terms = deep_supervision_terms(stack, lbl, weights)
                loss = terms["loss"]
                value = float(loss.data)
                if not math.isfinite(value):
                    _dump_divergence(out, model, cfg, epoch, it, terms)
                    raise TrainingDiverged(f"non-finite loss {value} at epoch {epoch}, iteration {it}")
                optim.zero_grad()
                loss.backward()
                optim.step()
                model.momentum_update()
                row = {"epoch": epoch, "iter": it, "lr": optim.lr}
                row.update({k: float(v.data) for k, v in terms.items()})
                result.log.append(row)
                if writer is not None:
                    writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
                if on_iteration is not None:
                    on_iteration(row)
            if out is not None:
                log_fh.flush()
                save_model(out / "checkpoint.mosf", model, cfg)
            logger.info("epoch %d lr %.5f loss %.4f", epoch, optim.lr, result.epoch_losses()[-1])
    finally:
        if log_fh is not None:
            log_fh.close()
    model.eval()
    return result


def _dump_divergence(out: Optional[Path], model: MOSformer, cfg: RunConfig, epoch: int, it: int, terms: dict) -> None:
    if out is None:
        return
    save_model(out / "diverged.mosf", model, cfg)
    info = {"epoch": epoch, "iter": it, "terms": {k: float(v.data) for k, v in terms.items()}}
    bad = [name for name, p in model.named_parameters() if not np.all(np.isfinite(p.data))]
    info["non_finite_parameters"] = bad
    (out / "diverged.json").write_text(json.dumps(info, indent=2))


# --------------------------------------------------------------- evaluation
def predict_case(model: MOSformer, cfg: RunConfig, image: np.ndarray) -> np.ndarray:
    """Label map on the case's native grid (resizing in and out under ``image_size``)."""
    size = cfg.train.image_size
    h, w = image.shape[1:3]
    if size and (h, w) != (size, size):
        small, _ = resize_case_arrays(image, np.zeros(image.shape[1:], dtype=np.int64), size)
        pred = predict_volume(model, small)
        rows = np.minimum((np.arange(h) * size) // h, size - 1)
        cols = np.minimum((np.arange(w) * size) // w, size - 1)
        return pred[rows][:, cols]
    return predict_volume(model, image)


def evaluate(model: MOSformer, cfg: RunConfig, cases: Sequence[Case]) -> MetricReport:
    """DSC and HD95 per foreground class for every case, aggregated in case order."""
    for c in cases:
        if c.n_classes and c.n_classes != cfg.model.n_classes:
            raise ConfigError(f"case {c.case_id} declares {c.n_classes} classes, model has {cfg.model.n_classes}")
    preds = [predict_case(model, cfg, c.image) for c in cases]

    def score(args):
        case, pred = args
        return evaluate_case(case.case_id, pred, case.labels, cfg.model.n_classes, case.spacing)

    report = MetricReport()
    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        for rows in pool.map(score, zip(cases, preds)):
            report.extend(rows)
    return report
