import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ossir.data import (RainParams, bicubic_down4, clean_image, make_dataset, make_pair, random_crops,
                        resize_matrix, streak_layer, synth_rain)
from ossir.errors import DimensionError, DomainError


@given(st.integers(0, 10_000))
def test_clean_image_range_and_purity(seed):
    a = clean_image(seed, 32)
    assert a.shape == (3, 32, 32)
    assert a.min() >= 0.0 and a.max() <= 1.0
    assert np.array_equal(a, clean_image(seed, 32))


def test_dataset_is_pure_function_of_seed():
    a = make_dataset(4, 32, seed=7)
    b = make_dataset(4, 32, seed=7)
    for p, q in zip(a, b):
        assert p.lq.tobytes() == q.lq.tobytes() and p.hq.tobytes() == q.hq.tobytes()
    c = make_dataset(4, 32, seed=8)
    assert not np.array_equal(a[0].hq, c[0].hq)


def test_dataset_prefix_stable():
    # pair i depends only on (seed, i), not on the corpus size
    short, long = make_dataset(2, 32, seed=3), make_dataset(5, 32, seed=3)
    assert np.array_equal(short[1].lq, long[1].lq)


def test_zero_density_rain_is_identity():
    clean = clean_image(0, 32)
    assert np.array_equal(synth_rain(clean, 1, density=0.0), clean)


def test_rain_only_brightens_and_stays_in_range():
    clean = clean_image(1, 64)
    rainy = synth_rain(clean, 1, density=0.02)
    assert rainy.min() >= 0.0 and rainy.max() <= 1.0
    assert np.all(rainy >= clean)
    assert np.any(rainy > clean)
    # streaks are achromatic: the same increment on every channel where unclipped
    d = rainy - clean
    ok = (rainy < 1.0).all(axis=0)
    assert np.allclose(d[0][ok], d[1][ok]) and np.allclose(d[1][ok], d[2][ok])


def test_streak_count_scales_with_density():
    lo = np.count_nonzero(streak_layer(64, 64, 0, 0.005, 0, 8, 0.5))
    hi = np.count_nonzero(streak_layer(64, 64, 0, 0.02, 0, 8, 0.5))
    assert hi > 2 * lo > 0


def test_vertical_streak_orientation():
    layer = streak_layer(64, 64, 3, 0.002, 0.0, 12, 0.5)
    ys, xs = np.nonzero(layer)
    # with angle 0 each streak is a vertical run, so columns repeat far more than rows
    assert len(np.unique(xs)) < len(np.unique(ys))


def test_synth_rain_validation():
    with pytest.raises(DimensionError):
        synth_rain(np.zeros((4, 4)), 0)
    with pytest.raises(DomainError):
        synth_rain(np.full((3, 4, 4), 2.0), 0)


def test_resize_rows_sum_to_one():
    m = resize_matrix(32, 4)
    assert m.shape == (8, 32)
    np.testing.assert_allclose(m.sum(axis=1), 1.0, atol=1e-14)


def test_bicubic_reproduces_linear_ramp():
    # a linear signal sampled at pixel centers must come back as the block-center values
    n = 32
    ramp = np.linspace(0.1, 0.9, n)
    img = np.broadcast_to(ramp[None, None, :], (3, n, n)).copy()
    out = bicubic_down4(img)
    want = np.interp(np.arange(n // 4) * 4 + 1.5, np.arange(n), ramp)
    np.testing.assert_allclose(out[0, 0], want, atol=1e-12)


def test_bicubic_constant_and_shape():
    out = bicubic_down4(np.full((3, 16, 24), 0.3))
    assert out.shape == (3, 4, 6)
    np.testing.assert_allclose(out, 0.3, atol=1e-14)
    with pytest.raises(DimensionError):
        bicubic_down4(np.zeros((3, 10, 16)))


def test_sr_pair_shapes():
    p = make_pair(0, 64, task="sr4x")
    p.check()
    assert p.lq.shape == (3, 16, 16) and p.hq.shape == (3, 64, 64)
    with pytest.raises(DomainError):
        make_pair(0, 64, task="denoise")


def test_rain_params_change_degradation():
    a = make_pair(5, 32, rain=RainParams(density=0.005)).lq
    b = make_pair(5, 32, rain=RainParams(density=0.03)).lq
    assert np.count_nonzero(b - a) > 0


def locate(pairs, crop):
    patch = crop.shape[-1]
    for k, p in enumerate(pairs):
        size = p.hq.shape[-1]
        for y in range(size - patch + 1):
            for x in range(size - patch + 1):
                if np.array_equal(p.hq[:, y:y + patch, x:x + patch], crop):
                    return k, y, x
    return None


def test_random_crops_aligned():
    pairs = make_dataset(3, 32, seed=0)
    lq, hq = random_crops(pairs, 4, 16, np.random.default_rng(0))
    assert lq.shape == hq.shape == (4, 3, 16, 16)
    for i in range(4):
        k, y, x = locate(pairs, hq[i])
        assert np.array_equal(pairs[k].lq[:, y:y + 16, x:x + 16], lq[i])


def test_random_crops_sr_scale():
    pairs = make_dataset(2, 32, task="sr4x", seed=0)
    rng = np.random.default_rng(1)
    lq, hq = random_crops(pairs, 3, 16, rng)
    assert lq.shape == (3, 3, 4, 4) and hq.shape == (3, 3, 16, 16)
    for i in range(3):
        k, y, x = locate(pairs, hq[i])
        assert y % 4 == 0 and x % 4 == 0
        assert np.array_equal(pairs[k].lq[:, y // 4:y // 4 + 4, x // 4:x // 4 + 4], lq[i])
    with pytest.raises(DimensionError):
        random_crops(pairs, 1, 64, rng)
