import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from longidiff.codec import CodecConfig, decode, encode


def index_map_oracle(img, k):
    c, h, w = img.shape
    out = np.zeros((c * k * k, h // k, w // k), dtype=img.dtype)
    for ch in range(c):
        for i in range(h // k):
            for j in range(w // k):
                for di in range(k):
                    for dj in range(k):
                        out[ch * k * k + di * k + dj, i, j] = img[ch, i * k + di, j * k + dj]
    return out


def test_factor_one_is_identity():
    x = np.random.default_rng(0).random((2, 5, 7))
    np.testing.assert_array_equal(encode(x, 1), x)


def test_documented_channel_order():
    img = (4 * np.arange(4)[:, None] + np.arange(4)[None, :]).reshape(1, 4, 4).astype(np.float32)
    z = encode(img, 2)
    assert z.shape == (4, 2, 2)
    np.testing.assert_array_equal(z, index_map_oracle(img, 2))
    np.testing.assert_array_equal(z[:, 0, 0], [0, 1, 4, 5])


def test_random_rgb_matches_oracle():
    img = np.random.default_rng(1).random((3, 8, 12))
    np.testing.assert_array_equal(encode(img, 4), index_map_oracle(img, 4))


def test_zero_latent_decodes_to_zero():
    assert not decode(np.zeros((16, 8, 8)), 4).any()


def test_leading_axes_and_present_flags():
    x = np.random.default_rng(2).random((2, 3, 1, 8, 8))
    z = encode(x, 4, present=np.array([[1, 0, 1], [0, 1, 1]]))
    assert z.shape == (2, 3, 16, 2, 2)
    assert not z[0, 1].any() and not z[1, 0].any()
    np.testing.assert_array_equal(z[0, 0], encode(x[0, 0], 4))


def test_indivisible_size_rejected():
    with pytest.raises(ValueError):
        encode(np.zeros((1, 6, 8)), 4)
    with pytest.raises(ValueError):
        CodecConfig(4, 1, 30, 32)
    with pytest.raises(ValueError):
        decode(np.zeros((15, 2, 2)), 4)


def test_config_latent_shape():
    assert CodecConfig(4, 1, 32, 32).latent_shape == (16, 8, 8)
    assert CodecConfig(2, 3, 16, 8).latent_shape == (12, 8, 4)


images = arrays(np.float32, st.tuples(st.integers(1, 3), st.sampled_from([4, 8, 12]), st.sampled_from([4, 8])),
                elements=st.floats(-1e3, 1e3, width=32))


@settings(max_examples=200, deadline=None)
@given(images, st.sampled_from([1, 2, 4]))
def test_round_trip_bit_exact_and_norm_preserving(img, k):
    z = encode(img, k)
    assert decode(z, k).tobytes() == img.tobytes()
    # squares of float32 are exact in float64 and fsum is order independent
    assert math.fsum((z.astype(np.float64) ** 2).ravel()) == math.fsum((img.astype(np.float64) ** 2).ravel())
    np.testing.assert_array_equal(encode(decode(z, k), k), z)
