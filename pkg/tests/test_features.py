import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pestsim import features as ft
from pestsim.records import WaveformRecord

finite = st.floats(-3000, 3000, allow_nan=False)


def test_constant_sequence():
    s = ft.stat_features(np.full(50, 7.0))
    assert (s["mean"], s["sd"], s["max"], s["median"], s["iqr"]) == (7.0, 0.0, 7.0, 7.0, 0.0)
    assert s["energy"] == 50 * 49.0
    assert s["skewness"] == 0.0 and s["kurtosis"] == 0.0


def test_hand_values():
    s = ft.stat_features([1, 2, 3, 4])
    assert s["mean"] == 2.5 and s["median"] == 2.5 and s["energy"] == 30.0


def test_symmetric_sequence_has_zero_skew():
    assert ft.stat_features([-3, -1, 0, 1, 3])["skewness"] == pytest.approx(0.0, abs=1e-15)


def test_empty_channel_rejected():
    with pytest.raises(ValueError):
        ft.stat_features([])


def test_reduce_constant():
    tr, fr = ft.reduce(np.full(128, 5.0), 16)
    assert np.all(tr == 5.0)
    # DC lives in the first frequency bin only
    assert fr[0] > 0 and np.allclose(fr[1:], 0.0, atol=1e-9)


def test_reduce_sinusoid_lands_in_one_bin():
    L, bins = 128, 16
    k = 4 * 5 + 2  # spectral index inside frequency bin 5
    x = np.cos(2 * np.pi * k * np.arange(L) / L)
    _, fr = ft.reduce(x, bins)
    assert np.argmax(fr) == 5
    assert fr[5] == pytest.approx(L / 2 / 4)
    assert np.allclose(np.delete(fr, 5), 0.0, atol=1e-9)


def test_reduce_identity_when_bins_equal_length():
    x = np.random.default_rng(0).normal(size=32)
    tr, _ = ft.reduce(x, 32)
    assert np.array_equal(tr, x)


def test_reduce_pads_by_edge():
    tr, _ = ft.reduce(np.arange(10.0), 4)
    assert np.allclose(tr, [1.0, 4.0, 7.0, 9.0])


@settings(max_examples=60, deadline=None)
@given(x=arrays(float, st.integers(4, 200), elements=finite), c=st.floats(-1000, 1000))
def test_translation_covariance(x, c):
    a, b = ft.stat_features(x), ft.stat_features(x + c)
    scale = 1e-9 * (1 + np.abs(x).max() + abs(c))
    for k in ("mean", "median", "max", "q25", "q75"):
        assert b[k] == pytest.approx(a[k] + c, abs=scale * 10)
    for k in ("sd", "iqr"):
        assert b[k] == pytest.approx(a[k], abs=scale * 10)
    if a["sd"] > 1e-3 * (1 + np.abs(x).max()):
        for k in ("skewness", "kurtosis"):
            assert b[k] == pytest.approx(a[k], rel=1e-6, abs=1e-6)


@settings(max_examples=60, deadline=None)
@given(x=arrays(float, st.integers(1, 300), elements=finite))
def test_parseval(x):
    energy = ft.stat_features(x)["energy"]
    power = np.sum(np.abs(np.fft.fft(x)) ** 2) / x.size
    assert power == pytest.approx(energy, rel=1e-9, abs=1e-9)


def test_feature_vector_layout():
    rng = np.random.default_rng(1)
    rec = WaveformRecord("d", 0, 0, rng.integers(1900, 2100, 128), rng.integers(1900, 2100, 128))
    v = ft.record_features(rec)
    assert v.shape == (len(ft.feature_names()),) == (2 * (10 + 16 + 16),)
    assert np.all(np.isfinite(v))
    assert ft.feature_names()[:2] == ["ch1_mean", "ch1_sd"]


def test_logits_shape_and_dimension_check():
    p = ft.CountingParams.init(6, hidden=8)
    assert ft.counting_forward(np.zeros(6), p).shape == (3,)
    assert ft.counting_forward(np.zeros((4, 6)), p).shape == (4, 3)
    with pytest.raises(ValueError):
        ft.counting_forward(np.zeros(5), p)


def test_forward_is_pure():
    p = ft.CountingParams.init(6, hidden=8, seed=3)
    x = np.random.default_rng(0).normal(size=(5, 6))
    before = {k: v.copy() for k, v in p.tensors().items()}
    assert np.array_equal(ft.counting_forward(x, p), ft.counting_forward(x, p))
    assert all(np.array_equal(before[k], v) for k, v in p.tensors().items())


def test_gradient_check():
    rng = np.random.default_rng(2)
    p = ft.CountingParams.init(7, hidden=12, seed=2)
    p.b1 += 0.1  # keep pre-activations away from the ReLU kink
    x = rng.normal(size=(5, 7))
    y = rng.integers(0, 3, 5)
    assert ft.counting_grad_check(x, y, p) < 1e-4


def test_separable_toy_reaches_full_accuracy():
    rng = np.random.default_rng(0)
    centers = np.array([[4, 0, 0], [0, 4, 0], [0, 0, 4]], float)
    y = np.repeat(np.arange(3), 30)
    x = centers[y] + rng.normal(scale=0.5, size=(90, 3))
    params, hist = ft.counting_train(x, y, epochs=200, seed=0)
    assert hist[-1]["train_acc"] == 1.0
    assert np.all(ft.counting_forward(x, params).argmax(axis=1) == y)


def test_training_is_seeded():
    rng = np.random.default_rng(5)
    x, y = rng.normal(size=(40, 4)), rng.integers(0, 3, 40)
    a, _ = ft.counting_train(x, y, epochs=3, seed=9)
    b, _ = ft.counting_train(x, y, epochs=3, seed=9)
    assert all(np.array_equal(a.tensors()[k], b.tensors()[k]) for k in ft.CountingParams.NAMES)
