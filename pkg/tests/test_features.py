import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from efformer.features import (decode_positions, decode_track, geometric_feature, geometric_features,
                               one_hot, positional_encoding, time_column)


def test_geometric_feature_documented_example():
    from efformer.features import geometric_vector
    f = geometric_vector((320, 240), (256, 192), (128, 96), 2, 640, 480, 10)
    assert np.allclose(f, [0.5, 0.5, 0.1, 0.1, 0.3, 0.3, 0.2], atol=1e-15)


def test_geometric_feature_from_track():
    track = np.array([[128, 96], [256, 192], [320, 240]], dtype=float)
    f = geometric_feature(track, 3, 640, 480, 10)
    assert np.allclose(f, [0.5, 0.5, 0.1, 0.1, 0.3, 0.3, 0.3], atol=1e-15)


def test_first_frame_and_stationary_conventions():
    track = np.array([[100.0, 50.0]] * 4)
    for t in range(1, 5):
        f = geometric_feature(track, t, 640, 480, 4)
        assert np.all(f[2:6] == 0)
    moving = np.array([[10.0, 10.0], [20.0, 30.0]])
    assert np.all(geometric_feature(moving, 1, 640, 480, 2)[2:6] == 0)


def test_geometric_feature_errors():
    with pytest.raises(ValueError):
        geometric_feature(np.zeros((3, 2)), 0, 640, 480, 3)
    with pytest.raises(ValueError):
        geometric_feature(np.zeros((3, 2)), 1, 0, 480, 3)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 8))
def test_vectorized_matches_scalar(seed, T):
    rng = np.random.default_rng(seed)
    pos = rng.uniform(0, 500, size=(2, 3, T, 2))
    wh = np.array([[640.0, 480.0], [320.0, 200.0]])
    g = geometric_features(pos, wh[:, None, :])
    for b in range(2):
        for i in range(3):
            for t in range(1, T + 1):
                ref = geometric_feature(pos[b, i], t, wh[b, 0], wh[b, 1], T)
                assert np.allclose(g[b, i, t - 1], ref, atol=1e-14)


def test_positional_encoding_table():
    pe = positional_encoding(4, 6)
    assert pe.shape == (4, 6)
    assert np.isclose(pe[0, 0], np.sin(1.0)) and np.isclose(pe[0, 1], np.cos(1.0))
    assert np.isclose(pe[2, 2], np.sin(3 / 10000 ** (2 / 6)))


def test_time_column_and_one_hot():
    tc = time_column(3, 10, (2, 1))
    assert tc.shape == (2, 1, 3, 1) and np.allclose(tc[0, 0, :, 0], [0.1, 0.2, 0.3])
    assert np.array_equal(one_hot([0, 2], 3), [[1, 0, 0], [0, 0, 1]])
    with pytest.raises(ValueError):
        one_hot([3], 3)


def test_decode_modes():
    wh = np.array([640.0, 480.0])
    first = np.array([128.0, 96.0])
    zero = np.zeros(6)
    assert np.array_equal(decode_positions(zero, "uvr", first, first, wh), first)
    geo = np.array([[0, 0, 0.1, 0.1, 0, 0], [0, 0, 0.1, 0.1, 0, 0]])
    track = decode_track(geo, "cumdelta", np.array([320.0, 240.0]), wh)
    assert np.allclose(track[-1], [0.7 * 640, 240 + 0.2 * 480])
    assert np.allclose(decode_positions(np.array([0.25, 0.5, 9, 9, 9, 9]), "uv", first, first, wh), [160, 240])
    with pytest.raises(ValueError):
        decode_positions(zero, "bogus", first, first, wh)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_modes_agree_on_exact_features(seed):
    # the three decodings invert the exact geometric feature of a track
    rng = np.random.default_rng(seed)
    track = rng.uniform(0, 600, size=(6, 2))
    wh = np.array([640.0, 480.0])
    geo = geometric_features(track, wh)[1:, :6]
    for mode in ("uv", "cumdelta", "uvr"):
        assert np.allclose(decode_track(geo, mode, track[0], wh), track, atol=1e-9)
