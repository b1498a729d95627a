import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from helpers import tiny_cases, tiny_config
from mosformer import MOSformerSegmenter
from mosformer.exceptions import DataError, DimensionError, InputError
from mosformer.validation import as_volume_list, check_labels, check_volume


def tiny_estimator(**kw):
    est = MOSformerSegmenter.from_config(tiny_config(epochs=2, iters_per_epoch=2))
    return est.set_params(**kw)


def test_params_and_clone():
    est = MOSformerSegmenter(neighbors=2, epochs=3)
    params = est.get_params()
    assert params["neighbors"] == 2 and params["epochs"] == 3 and params["preset"] == "desk"
    twin = clone(est)
    assert twin.get_params() == params
    cfg = est.build_config()
    assert cfg.model.neighbors == 2 and cfg.train.epochs == 3 and cfg.train.warmup_epochs == 2


def test_from_config_round_trips():
    cfg = tiny_config()
    assert MOSformerSegmenter.from_config(cfg).build_config() == cfg


def test_unfitted():
    with pytest.raises(NotFittedError):
        MOSformerSegmenter().predict(np.zeros((16, 16, 2)))


def test_fit_predict_score():
    cases = tiny_cases()
    X = [c.image for c in cases]
    y = [c.labels for c in cases]
    est = tiny_estimator().fit(X, y)
    assert len(est.loss_curve_) == 2
    single = est.predict(X[0][0])
    assert single.shape == (16, 16, 3) and single.dtype == np.int32
    many = est.predict(X)
    assert isinstance(many, list) and len(many) == 3
    np.testing.assert_array_equal(many[0], single)
    assert 0.0 <= est.score(X, y) <= 1.0


def test_fit_rejects_bad_inputs():
    cases = tiny_cases()
    X = [c.image for c in cases]
    y = [c.labels for c in cases]
    with pytest.raises(ValueError):
        tiny_estimator().fit(X, y[:2])
    bad = [l.copy() for l in y]
    bad[0][0, 0, 0] = 7
    with pytest.raises(DataError):
        tiny_estimator().fit(X, bad)


def test_check_volume():
    assert check_volume(np.zeros((16, 32, 2))).shape == (1, 16, 32, 2)
    assert check_volume(np.zeros((1, 16, 16, 2), np.int16)).dtype == np.float32
    with pytest.raises(DimensionError):
        check_volume(np.zeros((16, 20, 2)))
    with pytest.raises(DimensionError):
        check_volume(np.zeros((2, 16, 16, 2)))
    with pytest.raises(DimensionError):
        check_volume(np.zeros((16, 16)))
    with pytest.raises(DimensionError):
        check_volume(np.zeros((16, 16, 0)))
    with pytest.raises(InputError):
        check_volume(np.full((16, 16, 1), np.nan))


def test_check_labels():
    np.testing.assert_array_equal(check_labels(np.ones((1, 2, 2, 1)), (2, 2, 1), 2), np.ones((2, 2, 1)))
    with pytest.raises(DataError):
        check_labels(np.full((2, 2, 1), 0.5), (2, 2, 1), 2)
    with pytest.raises(DimensionError):
        check_labels(np.zeros((2, 3, 1), int), (2, 2, 1), 2)
    with pytest.raises(DataError):
        check_labels(np.full((2, 2, 1), -1), (2, 2, 1), 2)


def test_as_volume_list():
    assert len(as_volume_list(np.zeros((4, 4, 4)))) == 1
    assert len(as_volume_list([np.zeros((4, 4, 4))] * 2)) == 2
    with pytest.raises(InputError):
        as_volume_list("volume")
