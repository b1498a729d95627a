"""Tiny run configurations and synthetic cases shared by the training-level tests."""

from dataclasses import replace

import numpy as np

from mosformer.config import OptimConfig, RunConfig, TrainConfig
from mosformer.data import Case
from mosformer.gradsuite import tiny_model_config


def tiny_config(encoder_mode="momentum", **train) -> RunConfig:
    kw = dict(epochs=2, batch_size=2, warmup_epochs=1, iters_per_epoch=2, dtype="float64")
    kw.update(train)
    return RunConfig(model=tiny_model_config(encoder_mode), optim=OptimConfig(), train=TrainConfig(**kw))


def tiny_cases(seed=0, n=3, size=16, depth=3, dtype=np.float64):
    rng = np.random.default_rng(seed)
    cases = []
    for i in range(n):
        labels = np.zeros((size, size, depth), np.int64)
        labels[2:8, 3:9] = 1
        labels[9:14, 8:15, : depth - 1] = 2
        labels = np.roll(labels, i, axis=0)
        image = (labels[None] + 0.3 * rng.standard_normal((1, size, size, depth))).astype(dtype)
        cases.append(Case(f"c{i}", image, labels, (1.0, 1.0, 2.0), 3))
    return cases


def with_model(cfg: RunConfig, **model) -> RunConfig:
    return replace(cfg, model=replace(cfg.model, **model))
