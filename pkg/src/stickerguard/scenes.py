"""
Procedural sign corpus, digital sticker application and a greedy black-box
sticker attack.

Every sign class has a fixed face shape, face color, border color and glyph.
Renders are deterministic in ``(class_id, variation, seed)``; ``variation``
scales brightness jitter (up to +/-10%), translation (up to 5% of the canvas)
and additive Gaussian noise (sigma up to 0.02).
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from stickerguard import classifier as clf
from stickerguard.imaging import (
    Rect,
    check_image,
    composite,
    load_mask_png,
    load_png,
    mask_from_rects,
    save_mask_png,
    save_png,
    to_bytes,
)
from stickerguard.parallel import pmap
from stickerguard.seeding import derive_rng, derive_seed

logger = logging.getLogger(__name__)

CANVAS = 64
N_CLASSES = 8
STICKER_COLORS = {"black": (0.0, 0.0, 0.0), "white": (1.0, 1.0, 1.0)}

MAX_BRIGHTNESS_JITTER = 0.10
MAX_SHIFT_FRACTION = 0.05
MAX_NOISE_SIGMA = 0.02

FACE_RADIUS = 0.40  # fraction of the canvas
BORDER = 0.14  # fraction of the face radius


@dataclass(frozen=True)
class SignSpec:
    class_id: int
    name: str
    shape: str
    face: tuple
    border: tuple
    glyph: str
    ink: tuple


SIGNS = (
    SignSpec(0, "stop", "octagon", (0.78, 0.08, 0.10), (0.95, 0.95, 0.95), "hbar", (0.95, 0.95, 0.95)),
    SignSpec(1, "warning", "triangle-up", (0.96, 0.82, 0.12), (0.05, 0.05, 0.05), "exclaim", (0.05, 0.05, 0.05)),
    SignSpec(2, "yield", "triangle-down", (0.95, 0.95, 0.95), (0.80, 0.10, 0.10), "dot", (0.80, 0.10, 0.10)),
    SignSpec(3, "crossing", "diamond", (0.97, 0.58, 0.10), (0.05, 0.05, 0.05), "cross", (0.05, 0.05, 0.05)),
    SignSpec(4, "keep-right", "circle", (0.10, 0.30, 0.78), (0.95, 0.95, 0.95), "arrow", (0.95, 0.95, 0.95)),
    SignSpec(5, "speed-limit", "square", (0.95, 0.95, 0.95), (0.05, 0.05, 0.05), "bars", (0.05, 0.05, 0.05)),
    SignSpec(6, "lane-ends", "hexagon", (0.10, 0.55, 0.25), (0.95, 0.95, 0.95), "ring", (0.95, 0.95, 0.95)),
    SignSpec(7, "school", "pentagon", (0.72, 0.92, 0.20), (0.05, 0.05, 0.05), "block", (0.05, 0.05, 0.05)),
)


def sign_spec(class_id):
    if not 0 <= class_id < len(SIGNS):
        raise ValueError(f"class_id must lie in [0, {len(SIGNS)}), got {class_id}")
    return SIGNS[class_id]


# ---------------------------------------------------------------------------
# geometry


def _regular_polygon(n, rotation):
    angles = rotation + 2 * np.pi * np.arange(n) / n
    return np.stack([np.cos(angles), np.sin(angles)], axis=1)


_SHAPES = {
    "octagon": _regular_polygon(8, np.pi / 8),
    "triangle-up": _regular_polygon(3, -np.pi / 2),
    "triangle-down": _regular_polygon(3, np.pi / 2),
    "diamond": _regular_polygon(4, 0.0),
    "square": _regular_polygon(4, np.pi / 4) * 0.95,
    "hexagon": _regular_polygon(6, 0.0),
    "pentagon": _regular_polygon(5, -np.pi / 2),
}


def _inside_polygon(u, v, verts, scale):
    # convex, counter-clockwise in (u, v) with v pointing down the image
    inside = np.ones(u.shape, dtype=bool)
    pts = verts * scale
    for (x0, y0), (x1, y1) in zip(pts, np.roll(pts, -1, axis=0)):
        inside &= (x1 - x0) * (v - y0) - (y1 - y0) * (u - x0) >= 0
    return inside


def shape_mask(shape, u, v, scale=1.0):
    """Membership of unit-radius coordinates ``(u, v)`` in a sign face."""
    if shape == "circle":
        return u * u + v * v <= scale * scale
    if shape not in _SHAPES:
        raise ValueError(f"unknown shape {shape!r}")
    return _inside_polygon(u, v, _SHAPES[shape], scale)


def glyph_mask(glyph, u, v):
    r = np.hypot(u, v)
    if glyph == "hbar":
        return (np.abs(v) < 0.14) & (np.abs(u) < 0.55)
    if glyph == "exclaim":
        return ((np.abs(u) < 0.08) & (v > -0.15) & (v < 0.25)) | (np.hypot(u, v - 0.38) < 0.09)
    if glyph == "dot":
        return np.hypot(u, v + 0.22) < 0.2
    if glyph == "cross":
        return ((np.abs(u) < 0.09) | (np.abs(v) < 0.09)) & (np.abs(u) + np.abs(v) < 0.5)
    if glyph == "arrow":
        shaft = (np.abs(u) < 0.08) & (v > -0.1) & (v < 0.45)
        head = (v <= -0.1) & (v > -0.45) & (np.abs(u) < (v + 0.45) * 0.9)
        return shaft | head
    if glyph == "bars":
        return (np.abs(v) < 0.4) & ((np.abs(u - 0.22) < 0.08) | (np.abs(u + 0.22) < 0.08))
    if glyph == "ring":
        return (r > 0.28) & (r < 0.42)
    if glyph == "block":
        return (np.abs(u) < 0.22) & (np.abs(v - 0.1) < 0.22)
    raise ValueError(f"unknown glyph {glyph!r}")


def _background(canvas):
    t = (np.arange(canvas) + 0.5)[:, None, None] / canvas
    top = np.array([0.58, 0.68, 0.78])
    bottom = np.array([0.42, 0.48, 0.40])
    return np.broadcast_to(top + (bottom - top) * t, (canvas, canvas, 3)).copy()


def jitter_brightness(image, factor):
    return np.clip(np.asarray(image, dtype=np.float64) * factor, 0.0, 1.0)


def render_sign(class_id, variation=0.0, seed=0, canvas=CANVAS):
    """
    Render one sign scene.

    :return: ``(image, sign_region)`` where ``sign_region`` marks the sign face
        including its border
    """
    spec = sign_spec(class_id)
    if not 0.0 <= variation <= 1.0:
        raise ValueError("variation must lie in [0, 1]")
    rng = derive_rng(seed, class_id, "render")
    brightness = 1.0 + variation * rng.uniform(-MAX_BRIGHTNESS_JITTER, MAX_BRIGHTNESS_JITTER)
    max_shift = variation * MAX_SHIFT_FRACTION * canvas
    dx, dy = np.round(rng.uniform(-max_shift, max_shift, size=2)).astype(int)
    sigma = variation * rng.uniform(0.0, MAX_NOISE_SIGMA)

    radius = FACE_RADIUS * canvas
    centre = canvas / 2.0
    grid = np.arange(canvas) + 0.5
    u = (grid[None, :] - centre - dx) / radius
    v = (grid[:, None] - centre - dy) / radius
    u, v = np.broadcast_arrays(u, v)

    region = shape_mask(spec.shape, u, v)
    face = shape_mask(spec.shape, u, v, 1.0 - BORDER)
    ink = face & glyph_mask(spec.glyph, u, v)

    image = _background(canvas)
    image[region] = spec.border
    image[face] = spec.face
    image[ink] = spec.ink
    image = jitter_brightness(image, brightness)
    if sigma > 0:
        image = np.clip(image + rng.normal(0.0, sigma, size=image.shape), 0.0, 1.0)
    # quantize so a render survives a PNG round trip unchanged
    return to_bytes(image) / 255.0, region


def generate_sign(class_id, variation=0.0, seed=0, canvas=CANVAS):
    return render_sign(class_id, variation, seed, canvas)[0]


# ---------------------------------------------------------------------------
# samples and corpora


@dataclass(frozen=True, eq=False)
class Sample:
    """A scene with its ground truth and, when attacked, the attack record."""

    image: np.ndarray = field(repr=False)
    true_label: int
    sign_region: np.ndarray = field(repr=False)
    sample_id: str = ""
    seed: int | None = None
    attacked: bool = False
    target_label: int | None = None
    perturbation_mask: np.ndarray | None = field(default=None, repr=False)
    placements: tuple = ()
    clean_image: np.ndarray | None = field(default=None, repr=False)
    attack_success: bool | None = None

    def __post_init__(self):
        if self.attacked and (self.target_label is None or self.perturbation_mask is None):
            raise ValueError("attacked samples need a target label and a perturbation mask")
        if self.perturbation_mask is not None and np.any(self.perturbation_mask & ~self.sign_region):
            raise ValueError("perturbation mask leaves the sign region")


@dataclass(frozen=True)
class AttackBudget:
    max_stickers: int = 12
    sticker_sizes: tuple = (4, 8)
    colors: tuple = ("black", "white")
    candidate_stride: int = 4

    def __post_init__(self):
        if self.max_stickers < 0:
            raise ValueError("max_stickers must be >= 0")
        if not self.sticker_sizes or any(s <= 0 for s in self.sticker_sizes):
            raise ValueError("sticker sizes must be positive")
        if self.candidate_stride <= 0:
            raise ValueError("candidate_stride must be positive")
        unknown = set(self.colors) - set(STICKER_COLORS)
        if unknown:
            raise ValueError(f"unsupported sticker colors {sorted(unknown)}")


def sample_seed(master_seed, class_id, index):
    return derive_seed(master_seed, class_id, index)


def make_sample(class_id, index, master_seed, variation=1.0, canvas=CANVAS):
    seed = sample_seed(master_seed, class_id, index)
    image, region = render_sign(class_id, variation, seed, canvas)
    return Sample(image, class_id, region, sample_id=f"c{class_id}_{index:04d}", seed=seed)


def generate_dataset(n_per_class, split_fractions=(0.8, 0.2), master_seed=0, n_classes=N_CLASSES,
                     canvas=CANVAS, variation=1.0):
    """
    Unattacked train/test corpora, ``n_per_class`` renders per class.

    Sample ``i`` of class ``c`` is seeded from ``(master_seed, c, i)`` alone, so
    any sample can be regenerated without the others. The first
    ``floor(n_per_class * split_fractions[0])`` indices of each class go to
    the train split.
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    if abs(sum(split_fractions) - 1.0) > 1e-9 or any(f < 0 for f in split_fractions):
        raise ValueError("split fractions must be non-negative and sum to 1")
    n_train = int(np.floor(n_per_class * split_fractions[0] + 1e-9))
    if n_per_class == 1:
        n_train = 1 if split_fractions[0] >= 0.5 else 0
    train, test = [], []
    for cls in range(n_classes):
        for idx in range(n_per_class):
            (train if idx < n_train else test).append(make_sample(cls, idx, master_seed, variation, canvas))
    return train, test


def sticker_pattern(shape, placements):
    """Flat-color pattern image where the last placement covering a pixel wins."""
    pattern = np.zeros(shape, dtype=np.float64)
    for rect, color in placements:
        pattern[rect.slices] = STICKER_COLORS[color]
    return pattern


def apply_stickers(image, sign_region, placements):
    """
    Paste flat black/white stickers onto ``image``.

    :param placements: sequence of ``(Rect, color)``; later entries cover
        earlier ones where they overlap
    :return: ``(attacked image, union mask)``
    """
    image = check_image(image)
    height, width = image.shape[:2]
    for rect, color in placements:
        if color not in STICKER_COLORS:
            raise ValueError(f"unknown sticker color {color!r}")
        if not rect.inside(width, height) or not np.all(sign_region[rect.slices]):
            raise ValueError(f"sticker {rect} escapes the sign region")
    mask = mask_from_rects(width, height, [r for r, _ in placements])
    return composite(image, sticker_pattern(image.shape, placements), mask), mask


# ---------------------------------------------------------------------------
# surrogate attack


@dataclass(frozen=True)
class AttackRecord:
    placements: tuple
    trace: tuple  # target-class probability before the attack and after every kept sticker
    success: bool
    final_label: int


def candidate_placements(sign_region, budget):
    """All sticker placements in scan order: row-major, then size, then color."""
    height, width = sign_region.shape
    colors = [c for c in ("black", "white") if c in budget.colors]
    # summed-area table for O(1) "rect fully inside region" checks
    sat = np.zeros((height + 1, width + 1), dtype=np.int64)
    sat[1:, 1:] = np.cumsum(np.cumsum(sign_region, axis=0), axis=1)
    out = []
    stride = budget.candidate_stride
    sizes = sorted(budget.sticker_sizes)
    for y in range(0, height, stride):
        for x in range(0, width, stride):
            for size in sizes:
                if y + size > height or x + size > width:
                    continue
                inside = sat[y + size, x + size] - sat[y, x + size] - sat[y + size, x] + sat[y, x]
                if inside != size * size:
                    continue
                for color in colors:
                    out.append((Rect(x, y, size, size), color))
    return out


def greedy_sticker_attack(model, image, sign_region, target_label, budget):
    """
    Greedy targeted sticker placement against a black-box classifier.

    Each step tries every candidate sticker on the current image and keeps the
    one with the highest target-class probability (first in scan order on
    ties). The loop ends when the prediction reaches the target, the budget is
    spent, or the best candidate no longer raises the target probability; in
    the last case every further step would repeat the same choice.
    """
    image = check_image(image)
    current = image.copy()
    probs = clf.classify(model, current)
    trace = [float(probs[target_label])]
    kept = []
    candidates = candidate_placements(sign_region, budget)
    if not candidates and budget.max_stickers > 0:
        raise ValueError("no sticker placement fits inside the sign region")
    label = clf.argmax_lowest(probs)
    while label != target_label and len(kept) < budget.max_stickers:
        batch = np.repeat(current[None].astype(np.float32), len(candidates), axis=0)
        for i, (rect, color) in enumerate(candidates):
            batch[i][rect.slices] = STICKER_COLORS[color]
        scores = clf.classify_batch(model, batch)
        best = int(np.argmax(scores[:, target_label]))
        if scores[best, target_label] <= trace[-1]:
            break
        rect, color = candidates[best]
        kept.append((rect, color))
        current[rect.slices] = STICKER_COLORS[color]
        # reuse the batch scores so the trace is exactly the maximized objective
        trace.append(float(scores[best, target_label]))
        label = clf.argmax_lowest(scores[best])
    return AttackRecord(tuple(kept), tuple(trace), label == target_label, label)


def surrogate_attack(model, sample, target_label, budget=AttackBudget(), seed=0, return_record=False):
    """
    Attack an unattacked sample toward ``target_label``.

    The search itself is deterministic; ``seed`` is carried into the output
    sample as provenance.

    :return: ``(attacked sample, success)`` or, with ``return_record``,
        ``(attacked sample, AttackRecord)``
    """
    if sample.attacked:
        raise ValueError("sample is already attacked")
    if target_label == sample.true_label:
        raise ValueError("target label equals the true label")
    if not 0 <= target_label < model.n_classes:
        raise ValueError(f"target label {target_label} outside [0, {model.n_classes})")
    record = greedy_sticker_attack(model, sample.image, sample.sign_region, target_label, budget)
    attacked_image, mask = apply_stickers(sample.image, sample.sign_region, record.placements)
    out = replace(
        sample,
        image=attacked_image,
        attacked=True,
        target_label=int(target_label),
        perturbation_mask=mask,
        placements=record.placements,
        clean_image=sample.image,
        attack_success=record.success,
        sample_id=f"{sample.sample_id}_t{target_label}",
        seed=sample.seed if sample.seed is not None else seed,
    )
    return out, (record if return_record else record.success)


def _attack_job(job):
    model, sample, target, budget = job
    return surrogate_attack(model, sample, target, budget)[0]


def attack_source_sample(source, target, master_seed, canvas=CANVAS, variation=1.0):
    """The varied render of ``source`` that is attacked toward ``target``."""
    seed = derive_seed(master_seed, "attack", source, target)
    image, region = render_sign(source, variation, seed, canvas)
    return Sample(image, source, region, sample_id=f"a{source}", seed=seed)


def build_attacked_corpus(model, sources, targets=None, budget=AttackBudget(), master_seed=0,
                          canvas=CANVAS, variation=1.0, workers=1):
    """
    One attacked scene per (source, target) pair with ``source != target``.

    Each pair gets its own varied render of the source sign, mirroring one
    photograph per physically attacked sign.
    """
    targets = list(range(model.n_classes)) if targets is None else list(targets)
    jobs = []
    for src in sources:
        for tgt in targets:
            if tgt == src:
                continue
            jobs.append((model, attack_source_sample(src, tgt, master_seed, canvas, variation), tgt, budget))
    return pmap(_attack_job, jobs, workers)


# ---------------------------------------------------------------------------
# persistence

_SCHEMA = 1


def _placement_json(placements):
    return [[r.x, r.y, r.w, r.h, color] for r, color in placements]


def save_corpus(samples, directory, meta=None):
    """Write ``images/``, ``masks/`` (and ``clean/`` for attacked) plus ``manifest.json``."""
    directory = Path(directory)
    for sub in ("images", "masks"):
        (directory / sub).mkdir(parents=True, exist_ok=True)
    rows = []
    for s in samples:
        row = {
            "id": s.sample_id,
            "image": f"images/{s.sample_id}.png",
            "region_mask": f"masks/{s.sample_id}_region.png",
            "true_label": int(s.true_label),
            "attacked": bool(s.attacked),
            "target_label": None if s.target_label is None else int(s.target_label),
            "seed": s.seed,
        }
        save_png(s.image, directory / row["image"])
        save_mask_png(s.sign_region, directory / row["region_mask"])
        if s.attacked:
            (directory / "clean").mkdir(exist_ok=True)
            row["perturbation_mask"] = f"masks/{s.sample_id}_perturbation.png"
            row["clean_image"] = f"clean/{s.sample_id}.png"
            row["placements"] = _placement_json(s.placements)
            row["attack_success"] = bool(s.attack_success)
            save_mask_png(s.perturbation_mask, directory / row["perturbation_mask"])
            save_png(s.clean_image, directory / row["clean_image"])
        rows.append(row)
    manifest = {
        "schema": _SCHEMA,
        "meta": meta or {},
        "counts": {
            "total": len(rows),
            "attacked": sum(r["attacked"] for r in rows),
            "unattacked": sum(not r["attacked"] for r in rows),
            "per_class": {str(c): sum(r["true_label"] == c for r in rows)
                          for c in sorted({r["true_label"] for r in rows})},
        },
        "samples": rows,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_corpus(directory):
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.is_file():
        raise FileNotFoundError(f"no corpus manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    samples = []
    for row in manifest["samples"]:
        kwargs = dict(
            image=load_png(directory / row["image"]),
            true_label=row["true_label"],
            sign_region=load_mask_png(directory / row["region_mask"]),
            sample_id=row["id"],
            seed=row["seed"],
        )
        if row["attacked"]:
            kwargs.update(
                attacked=True,
                target_label=row["target_label"],
                perturbation_mask=load_mask_png(directory / row["perturbation_mask"]),
                placements=tuple((Rect(*p[:4]), p[4]) for p in row["placements"]),
                clean_image=load_png(directory / row["clean_image"]),
                attack_success=row["attack_success"],
            )
        samples.append(Sample(**kwargs))
    return samples
