import hashlib

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mosformer.encoders import DualEncoder, EncoderConfig, ResidualEncoder, batch_norms, momentum_update
from mosformer.exceptions import ConfigError, DimensionError, InputError
from mosformer.tensor import SGD, Tensor, default_dtype, no_grad

SMALL = EncoderConfig(stem_channels=4, stage_channels=(4, 8, 8, 16))


def digest(module):
    h = hashlib.sha256()
    for _, p in module.named_parameters():
        h.update(p.data.tobytes())
    return h.hexdigest()


def test_config_validation():
    with pytest.raises(ConfigError):
        EncoderConfig(strides=(2, 2, 2, 2))
    with pytest.raises(ConfigError):
        EncoderConfig(stage_channels=(4, 8, 16))
    with pytest.raises(ConfigError):
        EncoderConfig(block="dense")


def test_levels_for_224_input(rng):
    enc = ResidualEncoder(EncoderConfig(), rng).eval()
    with no_grad():
        feats = enc(Tensor(np.zeros((1, 1, 224, 224))))
    assert [f.shape[-1] for f in feats] == [112, 56, 28, 14, 14]
    assert [f.shape[1] for f in feats] == list(EncoderConfig().level_channels)
    assert EncoderConfig().level_strides == (2, 4, 8, 16, 16)


def test_bottleneck_preset_shapes(rng):
    cfg = EncoderConfig.resnet50()
    assert cfg.level_channels == (64, 256, 512, 1024, 2048)
    enc = ResidualEncoder(cfg, rng).eval()
    with no_grad():
        feats = enc(Tensor(np.zeros((1, 1, 32, 32))))
    assert [f.shape[1:] for f in feats] == [(64, 16, 16), (256, 8, 8), (512, 4, 4), (1024, 2, 2), (2048, 2, 2)]


@pytest.mark.parametrize("training", [True, False])
def test_zero_input_gives_zero_pyramid(rng, training):
    enc = ResidualEncoder(SMALL, rng).train(training)
    for f in enc(Tensor(np.zeros((2, 1, 32, 32)))):
        assert not f.data.any()


def test_doubling_input_doubles_every_level(rng):
    enc = ResidualEncoder(SMALL, rng)
    a = [f.shape[-2:] for f in enc(Tensor(np.zeros((1, 1, 16, 32))))]
    b = [f.shape[-2:] for f in enc(Tensor(np.zeros((1, 1, 32, 64))))]
    assert [(2 * h, 2 * w) for h, w in a] == b


def test_indivisible_input_rejected(rng):
    with pytest.raises(DimensionError):
        ResidualEncoder(SMALL, rng)(Tensor(np.zeros((1, 1, 24, 32))))


# ---------------------------------------------------------------- momentum update
def test_momentum_update_examples():
    t2, t1 = [np.array([1.0])], [np.array([0.0])]
    momentum_update(t2, t1, 0.1)
    assert t2[0][0] == 0.1
    t2 = [np.array([3.0, -1.0])]
    momentum_update(t2, [np.array([0.5, 2.0])], 0.0)
    np.testing.assert_array_equal(t2[0], [0.5, 2.0])


@given(st.floats(0, 0.99), st.integers(0, 10**6))
def test_momentum_update_is_exact_elementwise(m, seed):
    rng = np.random.default_rng(seed)
    t1 = [rng.standard_normal((3, 4)), rng.standard_normal(5)]
    t2 = [rng.standard_normal((3, 4)), rng.standard_normal(5)]
    expect = [m * b + (1 - m) * a for a, b in zip(t1, t2)]
    before = [a.copy() for a in t1]
    momentum_update(t2, t1, m)
    for got, want in zip(t2, expect):
        assert np.max(np.abs(got - want)) == 0.0
    for a, b in zip(t1, before):
        np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("m", [0.1, 0.5, 0.9])
def test_geometric_convergence(rng, m):
    t1 = [rng.standard_normal(50)]
    t2 = [rng.standard_normal(50)]
    d0 = np.linalg.norm(t2[0] - t1[0])
    for t in range(1, 11):
        momentum_update(t2, t1, m)
        assert abs(np.linalg.norm(t2[0] - t1[0]) - m ** t * d0) < 1e-6


def test_momentum_update_shape_mismatch():
    with pytest.raises(ConfigError):
        momentum_update([np.zeros(2)], [np.zeros(3)], 0.1)
    with pytest.raises(ConfigError):
        momentum_update([np.zeros(2)], [], 0.1)


# ---------------------------------------------------------------- dual encoder
def test_init_copies_theta1(rng):
    dual = DualEncoder(SMALL, rng)
    a = dict(dual.target.named_parameters())
    b = dict(dual.momentum.named_parameters())
    assert list(a) == list(b)
    for k in a:
        np.testing.assert_array_equal(a[k].data, b[k].data)
        assert a[k].data is not b[k].data
    x = Tensor(rng.standard_normal((2, 1, 32, 32)))
    dual.eval()
    for fa, fb in zip(dual.target(x), dual.momentum(x)):
        np.testing.assert_array_equal(fa.data, fb.data)


def test_no_neighbors_runs_target_only(rng):
    dual = DualEncoder(SMALL, rng)
    tgt, nb = dual(Tensor(np.ones((2, 1, 16, 16))), Tensor(np.zeros((2, 0, 1, 16, 16))))
    assert len(tgt) == 5 and nb == []


def test_neighbor_pyramid_shapes(rng):
    dual = DualEncoder(SMALL, rng)
    _, nb = dual(Tensor(np.ones((3, 1, 16, 16))), Tensor(rng.standard_normal((3, 4, 1, 16, 16))))
    assert [f.shape[:2] for f in nb] == [(3, 4)] * 5


def test_neighbor_count_mismatch(rng):
    dual = DualEncoder(SMALL, rng)
    with pytest.raises(InputError):
        dual(Tensor(np.ones((2, 1, 16, 16))), Tensor(np.ones((3, 2, 1, 16, 16))))


def test_momentum_encoder_receives_no_gradient(rng):
    dual = DualEncoder(SMALL, rng)
    tgt, nb = dual(Tensor(rng.standard_normal((2, 1, 16, 16))), Tensor(rng.standard_normal((2, 2, 1, 16, 16))))
    loss = sum((f.sum() for f in tgt), Tensor(0.0)) + sum((f.sum() for f in nb), Tensor(0.0))
    loss.backward()
    assert all(p.grad is None and not p.requires_grad for p in dual.momentum.parameters())
    assert any(p.grad is not None for p in dual.target.parameters())
    assert all(not f.requires_grad for f in nb)


def test_zero_momentum_makes_encoders_agree(rng):
    dual = DualEncoder(SMALL, rng, m=0.0)
    for p in dual.target.parameters():
        p.data += rng.standard_normal(p.shape).astype(p.dtype) * 0.1
    dual(Tensor(rng.standard_normal((4, 1, 16, 16))), Tensor(np.zeros((4, 0, 1, 16, 16))))  # moves running stats
    dual.momentum_update()
    dual.eval()
    x = Tensor(rng.standard_normal((1, 1, 16, 16)))
    for fa, fb in zip(dual.target(x), dual.momentum(x)):
        np.testing.assert_array_equal(fa.data, fb.data)


def test_buffers_blend_or_copy(rng):
    for blend in (True, False):
        dual = DualEncoder(SMALL, rng, m=0.5, blend_buffers=blend)
        bn1, bn2 = batch_norms(dual.target)[0], batch_norms(dual.momentum)[0]
        bn1.running_mean[...] = 2.0
        bn2.running_mean[...] = 0.0
        dual.momentum_update()
        np.testing.assert_array_equal(bn2.running_mean, 1.0 if blend else 2.0)


def test_theta2_changes_only_at_momentum_update(rng):
    dual = DualEncoder(SMALL, rng)
    opt = SGD(dual.trainable_parameters(), lr=0.1)
    h0 = digest(dual.momentum)
    tgt, nb = dual(Tensor(rng.standard_normal((2, 1, 16, 16))), Tensor(rng.standard_normal((2, 2, 1, 16, 16))))
    (tgt[-1] * tgt[-1]).sum().backward()
    opt.step()
    assert digest(dual.momentum) == h0
    dual.momentum_update()
    assert digest(dual.momentum) != h0


def test_independent_mode_trains_theta2(rng):
    dual = DualEncoder(SMALL, rng, mode="independent")
    tgt, nb = dual(Tensor(rng.standard_normal((2, 1, 16, 16))), Tensor(rng.standard_normal((2, 2, 1, 16, 16))))
    (nb[-1] * nb[-1]).sum().backward()
    assert all(p.grad is not None for p in dual.momentum.parameters())
    h0 = digest(dual.momentum)
    dual.momentum_update()
    assert digest(dual.momentum) == h0


def test_single_mode_neighbors_leave_running_stats(rng):
    dual = DualEncoder(SMALL, rng, mode="single")
    assert not hasattr(dual, "momentum") or dual.neighbor_encoder is dual.target
    x = Tensor(rng.standard_normal((2, 1, 16, 16)))
    dual(x, Tensor(np.zeros((2, 0, 1, 16, 16))))
    stats = [bn.running_mean.copy() for bn in batch_norms(dual.target)]
    dual2 = DualEncoder(SMALL, np.random.default_rng(1234), mode="single")
    dual2(x, Tensor(rng.standard_normal((2, 2, 1, 16, 16)) * 5))
    for a, bn in zip(stats, batch_norms(dual2.target)):
        np.testing.assert_array_equal(a, bn.running_mean)


def test_invalid_mode_and_coefficient(rng):
    with pytest.raises(ConfigError):
        DualEncoder(SMALL, rng, mode="triple")
    with pytest.raises(InputError):
        DualEncoder(SMALL, rng, m=1.0)
