import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cropseg import baselines
from oracles import otsu_exhaustive


def disk_scene(size=121, radius=40, inside=1.0, outside=0.0):
    yy, xx = np.mgrid[:size, :size]
    c = size // 2
    disk = (yy - c) ** 2 + (xx - c) ** 2 <= radius ** 2
    return np.where(disk, inside, outside), disk


def test_two_valued_channel():
    ch = np.zeros(100)
    ch[:10] = 1.0
    res = baselines.otsu_threshold(ch.reshape(10, 10))
    assert 0.0 < res.threshold < 1.0
    assert res.mask.sum() == 10 and np.all(res.mask.ravel()[:10])
    assert not res.degenerate


def test_constant_channel_is_degenerate():
    res = baselines.otsu_threshold(np.full((5, 5), 0.3))
    assert res.degenerate and not res.mask.any()


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_otsu_equals_exhaustive_search(seed):
    rng = np.random.default_rng(seed)
    levels = rng.uniform(-1, 3, rng.integers(2, 12))
    counts = rng.integers(1, 60, levels.size)
    values = np.repeat(levels, counts)
    if values.max() == values.min():
        return
    res = baselines.otsu_threshold(values.reshape(1, -1))
    assert res.threshold == otsu_exhaustive(values)
    assert np.array_equal(res.mask.ravel(), values > res.threshold)


def test_otsu_is_idempotent(rng):
    ch = rng.uniform(0, 1, (20, 20))
    a, b = baselines.otsu_threshold(ch), baselines.otsu_threshold(ch.copy())
    assert a.threshold == b.threshold and np.array_equal(a.mask, b.mask)


def test_adaptive_constant_is_background():
    assert not baselines.adaptive_threshold(np.full((15, 15), 0.4), 5, 0.01).any()


def test_adaptive_isolated_bright_pixel():
    ch = np.zeros((15, 15))
    ch[7, 7] = 1.0
    mask = baselines.adaptive_threshold(ch, 5, 0.01)
    assert mask[7, 7] and mask.sum() == 1


@pytest.mark.parametrize("window", [4, 1, 0])
def test_adaptive_rejects_bad_window(window):
    with pytest.raises(ValueError):
        baselines.adaptive_threshold(np.zeros((5, 5)), window)


def test_adaptive_oversegments_big_plants():
    ch, disk = disk_scene()
    interior = disk & (np.hypot(*(np.mgrid[:121, :121] - 60)) < 30)
    adaptive = baselines.adaptive_threshold(ch, window=11, offset=0.02)
    otsu = baselines.otsu_threshold(ch).mask
    assert adaptive[interior].mean() < 0.5
    assert otsu[interior].mean() == 1.0


def test_huge_window_approaches_global_mean(rng):
    # Replicated borders weight edge pixels more than interior ones, so the
    # local mean of a huge window only equals the global mean when the border
    # ring itself sits at the mean.  Build such a scene.
    ch = rng.uniform(0.2, 0.8, (12, 10))
    ring = np.ones_like(ch, dtype=bool)
    ring[1:-1, 1:-1] = False
    ch[ring] = 0.5
    ch[~ring] += 0.5 - ch[~ring].mean()
    window = 2 * max(ch.shape) + 1
    mask = baselines.adaptive_threshold(ch, window, 0.0)
    edges = baselines.histogram_edges(ch)
    bin_width = edges[1] - edges[0]
    disagree = mask != (ch > ch.mean())
    assert np.all(np.abs(ch[disagree] - ch.mean()) <= bin_width)
    assert np.allclose(baselines.local_mean(ch, window), ch.mean())


def test_vegetation_fraction():
    m = np.zeros((4, 5), bool)
    m[0, :2] = True
    assert baselines.vegetation_fraction(m) == 0.1
