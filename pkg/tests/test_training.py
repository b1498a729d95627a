import csv
import json
from dataclasses import replace

import numpy as np
import pytest

from helpers import tiny_cases, tiny_config
from mosformer import training
from mosformer.exceptions import ConfigError, DimensionError, TrainingDiverged
from mosformer.tensor import checkpoint as ckpt
from mosformer.tensor import LrSchedule, lr_at
from mosformer.training import (
    LOG_FIELDS,
    SliceSampler,
    evaluate,
    load_model,
    parameter_digest,
    predict_case,
    resize_case_arrays,
    save_model,
    train,
    worker_count,
)


def test_lr_at_end_of_warmup():
    assert lr_at(5, LrSchedule(3e-2, 5e-3, 5, 300)) == pytest.approx(3e-2)
    assert lr_at(0, LrSchedule(3e-2, 5e-3, 5, 300)) == pytest.approx(5e-3)
    assert lr_at(299, LrSchedule(3e-2, 5e-3, 5, 300)) == pytest.approx(5e-3)


def test_log_rows_and_files(tmp_path):
    cfg = tiny_config(epochs=3, iters_per_epoch=2)
    seen = []
    result = train(cfg, tiny_cases(), tmp_path, on_iteration=seen.append)
    assert len(result.log) == len(seen) == 6
    assert [(r["epoch"], r["iter"]) for r in result.log] == [(e, i) for e in range(3) for i in range(2)]
    sched = LrSchedule(cfg.optim.lr_max, cfg.optim.lr_min, 1, 3)
    assert [r["lr"] for r in result.log[::2]] == [lr_at(e, sched) for e in range(3)]
    with (tmp_path / "train_log.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == LOG_FIELDS and len(rows) == 6
    assert float(rows[-1]["loss"]) == result.log[-1]["loss"]
    assert (tmp_path / "checkpoint.mosf").exists()
    assert not result.model.training


def test_default_iterations_cover_all_slices():
    cfg = tiny_config(epochs=2, iters_per_epoch=0, batch_size=4)
    assert len(train(cfg, tiny_cases(n=3, depth=3)).log) == 2 * (9 // 4)


def test_training_is_bitwise_reproducible(tmp_path):
    cfg = tiny_config()
    a = train(cfg, tiny_cases(), tmp_path / "a")
    b = train(cfg, tiny_cases(), tmp_path / "b")
    assert (tmp_path / "a" / "checkpoint.mosf").read_bytes() == (tmp_path / "b" / "checkpoint.mosf").read_bytes()
    assert [r["loss"] for r in a.log] == [r["loss"] for r in b.log]
    c = train(replace(cfg, train=replace(cfg.train, seed=1)), tiny_cases())
    assert parameter_digest(a.model.state_dict().values()) != parameter_digest(c.model.state_dict().values())


def test_momentum_encoder_follows_each_step():
    cfg = tiny_config(epochs=1, warmup_epochs=0, iters_per_epoch=1)
    model = training.build_model(cfg)
    before = parameter_digest(p.data for p in model.enc.momentum.parameters())
    train(cfg, tiny_cases(), model=model)
    assert parameter_digest(p.data for p in model.enc.momentum.parameters()) != before


def test_checkpoint_round_trip(tmp_path):
    cfg = tiny_config()
    model = train(cfg, tiny_cases()).model
    save_model(tmp_path / "a.mosf", model, cfg)
    loaded, cfg2 = load_model(tmp_path / "a.mosf")
    assert cfg2 == cfg
    save_model(tmp_path / "b.mosf", loaded, cfg2)
    assert (tmp_path / "a.mosf").read_bytes() == (tmp_path / "b.mosf").read_bytes()
    image = tiny_cases(seed=5)[0].image
    np.testing.assert_array_equal(predict_case(model, cfg, image), predict_case(loaded, cfg2, image))


def test_checkpoint_without_config(tmp_path):
    cfg = tiny_config()
    save_model(tmp_path / "bare.mosf", training.build_model(cfg))
    with pytest.raises(ConfigError):
        load_model(tmp_path / "bare.mosf")
    model, _ = load_model(tmp_path / "bare.mosf", cfg)
    assert model.cfg.n_classes == 3


def test_divergence_dumps_state(tmp_path):
    cases = tiny_cases()
    for c in cases:
        c.image[...] = np.nan
    with pytest.raises(TrainingDiverged):
        train(tiny_config(), cases, tmp_path)
    info = json.loads((tmp_path / "diverged.json").read_text())
    assert info["epoch"] == 0 and info["iter"] == 0
    assert "loss" in info["terms"]
    assert "meta.config" in ckpt.load(tmp_path / "diverged.mosf")


def test_input_checks():
    cases = tiny_cases()
    cases[0].labels[0, 0, 0] = 3
    with pytest.raises(ConfigError):
        train(tiny_config(), cases)
    cases = tiny_cases()
    cases[1] = replace(cases[1], image=np.concatenate([cases[1].image] * 2))
    with pytest.raises(ConfigError):
        train(tiny_config(), cases)
    with pytest.raises(DimensionError):
        train(tiny_config(), [])


def test_sampler_batches(rng):
    cases = tiny_cases()
    s = SliceSampler(cases, 1, "clamp", np.float32, np.random.default_rng(0))
    tgt, nb, lbl = s.batch(5)
    assert tgt.shape == (5, 1, 16, 16) and nb.shape == (5, 2, 1, 16, 16) and lbl.shape == (5, 16, 16)
    assert tgt.dtype == np.float32 and lbl.dtype == np.int64
    again = SliceSampler(cases, 1, "clamp", np.float32, np.random.default_rng(0)).batch(5)
    np.testing.assert_array_equal(again[0], tgt)


def test_flip_keeps_image_and_labels_aligned():
    cases = tiny_cases()
    for c in cases:
        c.image[...] = c.labels[None]
    s = SliceSampler(cases, 1, "clamp", np.float64, np.random.default_rng(2), flip=True)
    tgt, _, lbl = s.batch(16)
    np.testing.assert_array_equal(tgt[:, 0], lbl)


def test_resize_case_arrays():
    image = np.arange(2 * 8 * 8 * 3, dtype=np.float64).reshape(2, 8, 8, 3)
    labels = np.arange(8 * 8 * 3).reshape(8, 8, 3)
    img, lbl = resize_case_arrays(image, labels, 16)
    assert img.shape == (2, 16, 16, 3) and lbl.shape == (16, 16, 3)
    np.testing.assert_array_equal(lbl[::2, ::2], labels)
    assert resize_case_arrays(image, labels, 8)[0] is image
    const = np.full((1, 8, 8, 2), 3.5)
    np.testing.assert_allclose(resize_case_arrays(const, labels[..., :2], 32)[0], 3.5)


def test_predict_with_image_size_returns_native_grid():
    cfg = tiny_config(image_size=32)
    model = training.build_model(cfg)
    model.eval()
    assert predict_case(model, cfg, tiny_cases()[0].image).shape == (16, 16, 3)


# ------------------------------------------------------------ evaluation
def test_evaluate_ground_truth_is_perfect(monkeypatch):
    cases = tiny_cases()
    lookup = {id(c.image): c.labels for c in cases}
    monkeypatch.setattr(training, "predict_case", lambda m, cfg, image: lookup[id(image)])
    report = evaluate(None, tiny_config(), cases)
    assert report.mean_dsc == 100.0 and report.mean_hd95 == 0.0
    assert len(report.rows) == 6 and [r.case_id for r in report.rows[::2]] == ["c0", "c1", "c2"]


def test_evaluate_background_prediction_is_undefined(monkeypatch):
    monkeypatch.setattr(training, "predict_case", lambda m, cfg, image: np.zeros(image.shape[1:], np.int32))
    report = evaluate(None, tiny_config(), tiny_cases())
    assert all(r.undefined for r in report.rows)
    assert "undefined_flag" in report.to_csv()


def test_evaluate_class_mismatch():
    cases = [replace(c, n_classes=5) for c in tiny_cases()]
    with pytest.raises(ConfigError):
        evaluate(None, tiny_config(), cases)


def test_worker_count_and_threaded_eval(monkeypatch):
    monkeypatch.delenv("MOSF_THREADS", raising=False)
    assert worker_count() == 1
    monkeypatch.setenv("MOSF_THREADS", "3")
    assert worker_count() == 3
    cfg = tiny_config()
    model = training.build_model(cfg)
    model.eval()
    cases = tiny_cases()
    threaded = evaluate(model, cfg, cases).to_csv()
    monkeypatch.setenv("MOSF_THREADS", "junk")
    assert worker_count() == 1
    assert evaluate(model, cfg, cases).to_csv() == threaded
