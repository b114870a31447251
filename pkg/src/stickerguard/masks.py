"""
Defensive mask generation for the three knowledge levels.

* oracle: the attacker's own perturbation mask (full knowledge)
* estimated mask sets: re-run the attack from every candidate source toward
  the inferred target, then pick a subset by class ranking or at random
* random windows: ``m`` random ``w x w`` windows per mask, either placed
  anywhere (overlapping) or drawn from a disjoint block grid
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from stickerguard import classifier as clf
from stickerguard.imaging import Rect, load_mask_png, mask_from_rects, save_mask_png
from stickerguard.parallel import pmap
from stickerguard.scenes import AttackBudget, Sample, render_sign, surrogate_attack
from stickerguard.seeding import derive_rng, derive_seed

logger = logging.getLogger(__name__)


class MaskStoreError(LookupError):
    pass


def oracle_mask(sample):
    if not sample.attacked or sample.perturbation_mask is None:
        raise ValueError(f"no oracle mask: sample {sample.sample_id!r} is not attacked")
    return sample.perturbation_mask


# ---------------------------------------------------------------------------
# estimated mask sets


@dataclass(frozen=True, eq=False)
class MaskSetStore:
    """
    ``entries[target]`` is a list of ``(source, mask)`` sorted by source.

    ``success[(source, target)]`` records whether the attack that produced the
    mask reached its target.
    """

    entries: dict
    success: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def targets(self):
        return sorted(self.entries)

    def sources_for(self, target):
        return [j for j, _ in self.entries.get(target, [])]

    def mask(self, source, target):
        for j, m in self.entries.get(target, []):
            if j == source:
                return m
        raise MaskStoreError(f"no mask for source {source} -> target {target}")

    def masks_for(self, target):
        if target not in self.entries:
            raise MaskStoreError(f"mask store has no entry for target {target}")
        return [m for _, m in self.entries[target]]

    def __len__(self):
        return sum(len(v) for v in self.entries.values())


def store_key(source, target):
    return f"src{source}_tgt{target}"


def cache_name(model_id, budget, seed, canvas, sources=(), targets=()):
    blob = json.dumps({"model": model_id, "budget": asdict(budget), "seed": seed, "canvas": canvas,
                       "sources": sorted(sources), "targets": sorted(targets)}, sort_keys=True)
    return "store-" + hashlib.sha256(blob.encode()).hexdigest()[:16]


def _store_job(job):
    model, source, target, budget, seed, canvas = job
    image, region = render_sign(source, 0.0, 0, canvas)
    sample = Sample(image, source, region, sample_id=f"canon{source}")
    try:
        attacked, ok = surrogate_attack(model, sample, target, budget, seed)
    except Exception as exc:
        raise RuntimeError(f"attack {source} -> {target} failed: {exc}") from exc
    return source, target, attacked.perturbation_mask, ok


def build_mask_set_store(model, sources, targets, budget=AttackBudget(), seed=0, canvas=64,
                         cache_dir=None, workers=1):
    """
    Attack the canonical render of every source toward every other target.

    With ``cache_dir`` the store is read from, or written to, a subdirectory
    keyed by the model id, the budget and the seed.
    """
    cache_path = None
    if cache_dir is not None:
        cache_path = Path(cache_dir) / cache_name(model.model_id, budget, seed, canvas, sources, targets)
        if (cache_path / "index.json").is_file():
            logger.info("loading mask store from %s", cache_path)
            return load_store(cache_path)
    jobs = [(model, j, t, budget, derive_seed(seed, j, t), canvas)
            for t in targets for j in sources if j != t]
    entries, success = {}, {}
    for source, target, mask, ok in pmap(_store_job, jobs, workers):
        entries.setdefault(target, []).append((source, mask))
        success[(source, target)] = bool(ok)
    for t in entries:
        entries[t].sort(key=lambda item: item[0])
    provenance = {"model_id": model.model_id, "budget": asdict(budget), "seed": seed, "canvas": canvas,
                  "sources": list(sources), "targets": list(targets)}
    store = MaskSetStore(entries, success, provenance)
    if cache_path is not None:
        save_store(store, cache_path)
    return store


def save_store(store, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = {}
    for target in store.targets():
        for source, mask in store.entries[target]:
            key = store_key(source, target)
            save_mask_png(mask, directory / f"{key}.png")
            index[key] = {"file": f"{key}.png", "source": source, "target": target,
                          "success": store.success.get((source, target)),
                          "coverage": float(mask.mean())}
    payload = {"provenance": store.provenance, "masks": index}
    (directory / "index.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def load_store(directory):
    directory = Path(directory)
    index_path = directory / "index.json"
    if not index_path.is_file():
        raise FileNotFoundError(f"no mask store index at {index_path}")
    payload = json.loads(index_path.read_text())
    entries, success = {}, {}
    for row in payload["masks"].values():
        entries.setdefault(row["target"], []).append((row["source"], load_mask_png(directory / row["file"])))
        success[(row["source"], row["target"])] = row["success"]
    for t in entries:
        entries[t].sort(key=lambda item: item[0])
    return MaskSetStore(entries, success, payload["provenance"])


def ranked_sources(probs, store, k):
    """
    Presumed target and the ``k`` most activated candidate sources.

    The top class is taken as the attack target; sources follow in descending
    activation, skipping classes with no mask toward that target.
    """
    ranking = clf.rank_labels(probs)
    target = ranking[0]
    if target not in store.entries:
        raise MaskStoreError(f"mask store has no entry for target {target}")
    available = set(store.sources_for(target))
    sources = [j for j in ranking[1:] if j in available][:k]
    if len(sources) < k:
        raise MaskStoreError(f"only {len(sources)} sources available for target {target}, need {k}")
    return target, sources


def ranked_select(model, image, store, k):
    target, sources = ranked_sources(clf.classify(model, image), store, k)
    return [store.mask(j, target) for j in sources]


def random_select(store, target, k, seed):
    masks = store.masks_for(target)
    if k > len(masks):
        raise MaskStoreError(f"requested {k} masks but target {target} has {len(masks)}")
    picks = np.random.default_rng(seed).choice(len(masks), size=k, replace=False)
    return [masks[i] for i in picks]


def guaranteed_select(store, target, true_source, k, seed, *, ground_truth_access=False):
    """
    Random subset that always contains the mask for the true source.

    Evaluation-only: it reads the sample's ground-truth label, so callers must
    acknowledge that with ``ground_truth_access=True``.
    """
    if not ground_truth_access:
        raise PermissionError("guaranteed selection needs ground-truth access (evaluation only)")
    pairs = store.entries.get(target)
    if pairs is None:
        raise MaskStoreError(f"mask store has no entry for target {target}")
    if k > len(pairs):
        raise MaskStoreError(f"requested {k} masks but target {target} has {len(pairs)}")
    chosen = [m for j, m in pairs if j == true_source]
    rest = [m for j, m in pairs if j != true_source]
    n_random = k - len(chosen[:1])
    picks = np.random.default_rng(seed).choice(len(rest), size=n_random, replace=False)
    return chosen[:1] + [rest[i] for i in picks]


# ---------------------------------------------------------------------------
# random windows


@dataclass(frozen=True)
class RandomMaskConfig:
    window: int
    ratio: float | None = None
    count: int | None = None
    overlap: str = "non-overlapping"
    k: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if (self.ratio is None) == (self.count is None):
            raise ValueError("give exactly one of ratio or count")
        if self.ratio is not None and not 0 < self.ratio <= 1:
            raise ValueError("ratio must lie in (0, 1]")
        if self.count is not None and self.count < 1:
            raise ValueError("count must be >= 1")
        if self.overlap not in ("overlapping", "non-overlapping"):
            raise ValueError(f"unknown overlap mode {self.overlap!r}")
        if self.k < 1:
            raise ValueError("k must be >= 1")


def block_grid(height, width, window):
    return height // window, width // window


def window_count(height, width, config):
    """
    Windows per mask and whether the ratio had to be floored.

    A ratio is taken of the number of disjoint ``w x w`` blocks that fit on the
    canvas; non-integer products are rounded down.
    """
    rows, cols = block_grid(height, width, config.window)
    if config.count is not None:
        return config.count, False
    exact = Fraction(str(config.ratio)) * rows * cols
    return int(exact), exact.denominator != 1


def window_rects(height, width, config, index=0):
    """
    Windows of mask ``index`` as ``Rect`` objects, in draw order.

    Each mask index draws from its own stream seeded by ``(config.seed,
    index)``, so a mask does not depend on how many are requested or on which
    worker generates it.
    """
    w = config.window
    if w > min(height, width):
        raise ValueError(f"window {w} does not fit a {width}x{height} canvas")
    rows, cols = block_grid(height, width, w)
    m, _ = window_count(height, width, config)
    if config.overlap == "non-overlapping" and m > rows * cols:
        raise ValueError(f"{m} windows exceed the {rows * cols} available blocks")
    if m < 1:
        raise ValueError(f"ratio {config.ratio} gives no window for w={w}")
    rng = derive_rng(config.seed, index, "windows")
    if config.overlap == "non-overlapping":
        cells = (divmod(int(b), cols) for b in rng.choice(rows * cols, size=m, replace=False))
        return [Rect(c * w, r * w, w, w) for r, c in cells]
    ys = rng.integers(0, height - w + 1, size=m)
    xs = rng.integers(0, width - w + 1, size=m)
    return [Rect(int(x), int(y), w, w) for y, x in zip(ys, xs)]


def random_masks(height, width, config):
    """``config.k`` random-window masks for a ``height x width`` canvas."""
    return [mask_from_rects(width, height, window_rects(height, width, config, i)) for i in range(config.k)]


def gridded_coverage(mask, window):
    """Coverage over the part of the canvas tiled by whole ``window`` blocks."""
    rows, cols = block_grid(mask.shape[0], mask.shape[1], window)
    return float(mask[:rows * window, :cols * window].mean())
