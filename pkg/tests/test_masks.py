from functools import partial

import numpy as np
import pytest

from stickerguard import masks, scenes
from stickerguard.imaging import Rect
from stickerguard.masks import MaskSetStore, MaskStoreError, RandomMaskConfig
from stickerguard.parallel import pmap

WINDOWS = (2, 4, 8, 16)
RATIOS = (0.25, 0.5, 0.625, 0.75)


def _store():
    def m(i):
        out = np.zeros((32, 32), bool)
        out[i, i] = True
        return out
    entries = {t: [(j, m(j + 8 * t)) for j in range(4) if j != t] for t in range(4)}
    return MaskSetStore(entries)


# --- random windows ---------------------------------------------------------


@pytest.mark.parametrize("canvas", [64, 32])
@pytest.mark.parametrize("w", WINDOWS)
@pytest.mark.parametrize("ratio", RATIOS)
def test_non_overlapping_coverage_is_exact(canvas, w, ratio):
    cfg = RandomMaskConfig(w, ratio=ratio, k=5, seed=7)
    m, _ = masks.window_count(canvas, canvas, cfg)
    rows, cols = masks.block_grid(canvas, canvas, w)
    for mask in masks.random_masks(canvas, canvas, cfg):
        assert masks.gridded_coverage(mask, w) == pytest.approx(m * w * w / (rows * cols * w * w), abs=0)
        assert mask.sum() == m * w * w


def test_window_counts_and_floor_flags():
    assert masks.window_count(64, 64, RandomMaskConfig(16, ratio=0.625)) == (10, False)
    assert masks.window_count(32, 32, RandomMaskConfig(16, ratio=0.625)) == (2, True)
    assert masks.window_count(64, 64, RandomMaskConfig(8, ratio=0.625)) == (40, False)
    assert masks.window_count(32, 32, RandomMaskConfig(8, ratio=0.625)) == (10, False)
    assert masks.window_count(32, 32, RandomMaskConfig(16, ratio=0.25)) == (1, False)
    assert masks.window_count(64, 64, RandomMaskConfig(4, count=3)) == (3, False)


@pytest.mark.parametrize("w", WINDOWS)
@pytest.mark.parametrize("ratio", RATIOS)
def test_overlapping_window_count(w, ratio):
    cfg = RandomMaskConfig(w, ratio=ratio, overlap="overlapping", k=4, seed=3)
    m, _ = masks.window_count(64, 64, cfg)
    for i in range(cfg.k):
        rects = masks.window_rects(64, 64, cfg, i)
        assert len(rects) == m
        assert all(r.inside(64, 64) and r.w == r.h == w for r in rects)


def test_generators_deterministic_and_prefix_stable():
    for overlap in ("non-overlapping", "overlapping"):
        cfg = RandomMaskConfig(8, ratio=0.5, overlap=overlap, k=6, seed=9)
        a = masks.random_masks(64, 64, cfg)
        b = masks.random_masks(64, 64, cfg)
        fewer = masks.random_masks(64, 64, RandomMaskConfig(8, ratio=0.5, overlap=overlap, k=3, seed=9))
        assert all(np.array_equal(x, y) for x, y in zip(a, b))
        assert all(np.array_equal(x, y) for x, y in zip(a, fewer))
        assert not np.array_equal(a[0], a[1])


def test_generators_invariant_to_worker_count():
    cfg = RandomMaskConfig(4, ratio=0.625, k=8, seed=2)
    job = partial(masks.window_rects, 64, 64, cfg)
    assert pmap(job, range(8), workers=1) == pmap(job, range(8), workers=3)


def test_random_mask_config_validation():
    with pytest.raises(ValueError):
        RandomMaskConfig(8)
    with pytest.raises(ValueError):
        RandomMaskConfig(8, ratio=0.5, count=2)
    with pytest.raises(ValueError):
        RandomMaskConfig(8, ratio=1.5)
    with pytest.raises(ValueError):
        RandomMaskConfig(8, ratio=0.5, overlap="sideways")
    with pytest.raises(ValueError):
        masks.window_rects(16, 16, RandomMaskConfig(32, count=1))
    with pytest.raises(ValueError):
        masks.window_rects(32, 32, RandomMaskConfig(16, count=5))


# --- oracle and estimated sets --------------------------------------------


def test_oracle_mask_needs_attacked_sample():
    sample = scenes.make_sample(0, 0, 0)
    with pytest.raises(ValueError, match="no oracle mask"):
        masks.oracle_mask(sample)


def test_ranked_sources_order_and_skips():
    store = _store()
    probs = np.array([0.1, 0.2, 0.6, 0.1])
    assert masks.ranked_sources(probs, store, 3) == (2, [1, 0, 3])
    # equal activations fall back to the lower label
    assert masks.ranked_sources(probs, store, 2) == (2, [1, 0])
    with pytest.raises(MaskStoreError):
        masks.ranked_sources(probs, store, 4)
    with pytest.raises(MaskStoreError):
        masks.ranked_sources(np.array([0, 0, 0, 0, 1.0]), store, 1)


def test_random_select_without_replacement():
    store = _store()
    picks = masks.random_select(store, 1, 3, seed=4)
    assert len({m.tobytes() for m in picks}) == 3
    again = masks.random_select(store, 1, 3, seed=4)
    assert all(np.array_equal(a, b) for a, b in zip(picks, again))
    with pytest.raises(MaskStoreError):
        masks.random_select(store, 1, 4, seed=4)


def test_guaranteed_select_requires_ground_truth_flag():
    store = _store()
    with pytest.raises(PermissionError):
        masks.guaranteed_select(store, 1, 3, 2, seed=0)
    for seed in range(10):
        picks = masks.guaranteed_select(store, 1, 3, 2, seed=seed, ground_truth_access=True)
        assert np.array_equal(picks[0], store.mask(3, 1))
        assert len({m.tobytes() for m in picks}) == 2


def test_store_lookups():
    store = _store()
    assert store.targets() == [0, 1, 2, 3]
    assert store.sources_for(0) == [1, 2, 3]
    assert len(store) == 12
    with pytest.raises(MaskStoreError):
        store.mask(0, 0)
    with pytest.raises(MaskStoreError):
        store.masks_for(9)


def test_build_store_cache_round_trip(tmp_path, small_model):
    budget = scenes.AttackBudget(max_stickers=2)
    classes = [0, 1, 2]
    store = masks.build_mask_set_store(small_model, classes, classes, budget, seed=1, cache_dir=tmp_path)
    assert store.targets() == classes and len(store) == 6
    name = masks.cache_name(small_model.model_id, budget, 1, 64, classes, classes)
    index = (tmp_path / name / "index.json").read_bytes()
    cached = masks.build_mask_set_store(small_model, classes, classes, budget, seed=1, cache_dir=tmp_path)
    for t in classes:
        for j in store.sources_for(t):
            np.testing.assert_array_equal(store.mask(j, t), cached.mask(j, t))
    assert cached.success == store.success
    masks.save_store(cached, tmp_path / "copy")
    assert (tmp_path / "copy" / "index.json").read_bytes() == index
    assert name != masks.cache_name(small_model.model_id, budget, 2, 64, classes, classes)
    for t in classes:
        for j in store.sources_for(t):
            _, region = scenes.render_sign(j)
            assert not np.any(store.mask(j, t) & ~region)


def test_rect_helpers():
    assert Rect(2, 3, 4, 5).slices == (slice(3, 8), slice(2, 6))
    assert not Rect(0, 0, 0, 4).inside(10, 10)
