import json

import numpy as np
import pytest

from stickerguard import scenes
from stickerguard.imaging import Rect


def test_render_is_deterministic_and_seed_sensitive():
    a, ra = scenes.render_sign(3, 1.0, 42)
    b, rb = scenes.render_sign(3, 1.0, 42)
    c, _ = scenes.render_sign(3, 1.0, 43)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(ra, rb)
    assert not np.array_equal(a, c)


def test_classes_differ_and_regions_are_plausible():
    renders = [scenes.render_sign(c) for c in range(scenes.N_CLASSES)]
    for i, (img, region) in enumerate(renders):
        assert img.shape == (64, 64, 3)
        assert 0.2 < region.mean() < 0.6
        assert not region[0].any() and not region[-1].any()
        for j in range(i):
            assert not np.array_equal(img, renders[j][0])


def test_render_rejects_bad_input():
    with pytest.raises(ValueError):
        scenes.render_sign(scenes.N_CLASSES)
    with pytest.raises(ValueError):
        scenes.render_sign(0, variation=1.5)


def test_zero_variation_is_canonical():
    a, _ = scenes.render_sign(5, 0.0, 1)
    b, _ = scenes.render_sign(5, 0.0, 999)
    np.testing.assert_array_equal(a, b)


def test_dataset_split_and_ids():
    train, test = scenes.generate_dataset(10, (0.8, 0.2), master_seed=3, n_classes=2)
    assert len(train) == 16 and len(test) == 4
    assert [s.sample_id for s in test] == ["c0_0008", "c0_0009", "c1_0008", "c1_0009"]
    again = scenes.make_sample(1, 9, 3)
    np.testing.assert_array_equal(again.image, test[-1].image)
    with pytest.raises(ValueError):
        scenes.generate_dataset(10, (0.5, 0.2))


def test_apply_stickers_last_wins_and_stays_in_region():
    img, region = scenes.render_sign(0)
    placements = [(Rect(24, 24, 8, 8), "black"), (Rect(28, 28, 4, 4), "white")]
    out, mask = scenes.apply_stickers(img, region, placements)
    assert mask.sum() == 64
    assert np.all(out[24, 24] == 0.0)
    assert np.all(out[29, 29] == 1.0)
    np.testing.assert_array_equal(out[~mask], img[~mask])
    with pytest.raises(ValueError):
        scenes.apply_stickers(img, region, [(Rect(0, 0, 4, 4), "black")])
    with pytest.raises(ValueError):
        scenes.apply_stickers(img, region, [(Rect(24, 24, 4, 4), "red")])


def test_candidates_lie_inside_region():
    _, region = scenes.render_sign(2)
    cands = scenes.candidate_placements(region, scenes.AttackBudget())
    assert cands
    for rect, _ in cands:
        assert region[rect.slices].all()
    # scan order: row-major, size ascending, black before white
    assert cands[0][1] == "black" and cands[1][1] == "white"
    keys = [(r.y, r.x, r.w) for r, _ in cands[::2]]
    assert keys == sorted(keys)


def test_budget_validation():
    with pytest.raises(ValueError):
        scenes.AttackBudget(max_stickers=-1)
    with pytest.raises(ValueError):
        scenes.AttackBudget(sticker_sizes=(0,))
    with pytest.raises(ValueError):
        scenes.AttackBudget(colors=("green",))


def test_attack_trace_monotone_and_budget_respected(small_model):
    sample = scenes.make_sample(0, 0, 0)
    budget = scenes.AttackBudget(max_stickers=5)
    attacked, record = scenes.surrogate_attack(small_model, sample, 3, budget, return_record=True)
    assert len(record.placements) <= 5
    assert all(b > a for a, b in zip(record.trace, record.trace[1:]))
    assert attacked.attacked and attacked.target_label == 3
    assert not np.any(attacked.perturbation_mask & ~attacked.sign_region)
    np.testing.assert_array_equal(attacked.image[~attacked.perturbation_mask],
                                  sample.image[~attacked.perturbation_mask])
    again, record2 = scenes.surrogate_attack(small_model, sample, 3, budget, return_record=True)
    assert record2 == record
    np.testing.assert_array_equal(again.image, attacked.image)


def test_attack_preconditions(small_model):
    sample = scenes.make_sample(1, 0, 0)
    with pytest.raises(ValueError):
        scenes.surrogate_attack(small_model, sample, 1)
    with pytest.raises(ValueError):
        scenes.surrogate_attack(small_model, sample, 8)


def test_zero_budget_leaves_image_untouched(small_model):
    sample = scenes.make_sample(1, 0, 0)
    attacked, ok = scenes.surrogate_attack(small_model, sample, 2, scenes.AttackBudget(max_stickers=0))
    assert not ok
    np.testing.assert_array_equal(attacked.image, sample.image)
    assert not attacked.perturbation_mask.any()


def test_corpus_round_trip(tmp_path, small_model):
    train, _ = scenes.generate_dataset(2, (0.5, 0.5), n_classes=2)
    attacked = scenes.build_attacked_corpus(small_model, [0], [1], scenes.AttackBudget(max_stickers=2))
    samples = train + attacked
    manifest = scenes.save_corpus(samples, tmp_path / "c", {"seed": 0})
    assert manifest["counts"] == {"total": 3, "attacked": 1, "unattacked": 2, "per_class": {"0": 2, "1": 1}}
    first = (tmp_path / "c" / "manifest.json").read_bytes()
    scenes.save_corpus(samples, tmp_path / "c", {"seed": 0})
    assert (tmp_path / "c" / "manifest.json").read_bytes() == first
    loaded = scenes.load_corpus(tmp_path / "c")
    for a, b in zip(samples, loaded):
        assert a.sample_id == b.sample_id and a.attacked == b.attacked
        np.testing.assert_array_equal(a.image, b.image)
        np.testing.assert_array_equal(a.sign_region, b.sign_region)
        if a.attacked:
            np.testing.assert_array_equal(a.perturbation_mask, b.perturbation_mask)
            assert a.placements == b.placements
    assert json.loads(first)["samples"][2]["target_label"] == 1


def test_attacked_corpus_is_worker_invariant(small_model):
    budget = scenes.AttackBudget(max_stickers=2)
    one = scenes.build_attacked_corpus(small_model, [0, 1], [0, 1, 2], budget, workers=1)
    two = scenes.build_attacked_corpus(small_model, [0, 1], [0, 1, 2], budget, workers=2)
    assert [s.sample_id for s in one] == ["a0_t1", "a0_t2", "a1_t0", "a1_t2"]
    for a, b in zip(one, two):
        np.testing.assert_array_equal(a.image, b.image)
