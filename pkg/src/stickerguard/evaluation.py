"""
Scenario orchestration and robustness metrics.

Metrics, with ``t*`` the true class, ``t'`` the attack target, ``D`` the
defense and ``pi_a`` the prior probability of an attack:

* CA     accuracy on unattacked scenes
* T-ASR  fraction of attacked scenes classified as ``t'``
* U-ASR  fraction of attacked scenes not classified as ``t*``
* DR     among attacked scenes misclassified before defense, the fraction
         classified as ``t*`` after it (undefined when that set is empty)
* CD     CA minus post-defense accuracy on unattacked scenes
* PDA    ``(1 - pi_a) * acc_D(unattacked) + pi_a * acc_D(attacked)``
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from functools import partial

import numpy as np
from PIL import Image as PILImage

from stickerguard import classifier as clf
from stickerguard import fusion, masks
from stickerguard.defenses import Reconstruct, Remap, parallel_apply, sequential_apply
from stickerguard.imaging import check_image, to_bytes
from stickerguard.parallel import pmap
from stickerguard.seeding import derive_seed

logger = logging.getLogger(__name__)

DEFAULT_PI_A = 0.5
METRIC_NAMES = ("CA", "T_ASR", "U_ASR", "DR", "CD", "PDA")


class ScenarioError(ValueError):
    pass


# ---------------------------------------------------------------------------
# metrics


def _ratio(num, den):
    return num / den if den else None


@dataclass(frozen=True)
class MetricsReport:
    CA: float
    T_ASR: float
    U_ASR: float
    DR: float | None
    CD: float
    PDA: float
    pi_a: float
    counts: dict
    name: str = ""
    config: dict = field(default_factory=dict)

    @property
    def fingerprint(self):
        blob = json.dumps(self.config, sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def to_dict(self):
        out = asdict(self)
        out["fingerprint"] = self.fingerprint
        return out

    def row(self):
        return {"name": self.name, **{m: getattr(self, m) for m in METRIC_NAMES}, "pi_a": self.pi_a,
                "fingerprint": self.fingerprint}


def metrics_from_predictions(attacked_true, attacked_target, attacked_pre, attacked_post,
                             unattacked_true, unattacked_pre, unattacked_post,
                             pi_a=DEFAULT_PI_A, name="", config=None):
    """
    Build a :class:`MetricsReport` from per-sample prediction tables.

    ``*_pre`` are decisions on the raw images, ``*_post`` decisions after the
    defense. Every metric is the ratio of the integer counts stored in
    ``counts``.
    """
    at, ag, apre, apost = (np.asarray(a, dtype=np.int64) for a in
                           (attacked_true, attacked_target, attacked_pre, attacked_post))
    ut, upre, upost = (np.asarray(a, dtype=np.int64) for a in (unattacked_true, unattacked_pre, unattacked_post))
    if len(at) == 0 or len(ut) == 0:
        raise ValueError("both attacked and unattacked sets must be non-empty")
    if not 0.0 <= pi_a <= 1.0:
        raise ValueError("pi_a must lie in [0, 1]")
    n_a, n_u = len(at), len(ut)
    missed = apre != at
    counts = {
        "CA": [int(np.sum(upre == ut)), n_u],
        "T_ASR": [int(np.sum(apre == ag)), n_a],
        "U_ASR": [int(np.sum(missed)), n_a],
        "DR": [int(np.sum(apost[missed] == at[missed])), int(np.sum(missed))],
        "post_unattacked": [int(np.sum(upost == ut)), n_u],
        "post_attacked": [int(np.sum(apost == at)), n_a],
    }
    ca = counts["CA"][0] / n_u
    acc_u = counts["post_unattacked"][0] / n_u
    acc_a = counts["post_attacked"][0] / n_a
    return MetricsReport(
        CA=ca,
        T_ASR=counts["T_ASR"][0] / n_a,
        U_ASR=counts["U_ASR"][0] / n_a,
        DR=_ratio(*counts["DR"]),
        CD=ca - acc_u,
        PDA=(1.0 - pi_a) * acc_u + pi_a * acc_a,
        pi_a=pi_a,
        counts=counts,
        name=name,
        config=config or {},
    )


def pda_from_rates(ca, cd, dr, pi_a=DEFAULT_PI_A):
    """Closed form of PDA that holds when every attacked scene fools the classifier."""
    return (1.0 - pi_a) * (ca - cd) + pi_a * dr


def _require(samples, attacked):
    if len(samples) == 0:
        raise ValueError("empty sample set")
    if any(s.attacked != attacked for s in samples):
        raise ValueError("expected only {} samples".format("attacked" if attacked else "unattacked"))


def predictions(model, samples):
    return clf.predict_batch(model, np.stack([s.image for s in samples]))


def compute_ca(model, unattacked):
    _require(unattacked, attacked=False)
    return float(np.mean(predictions(model, unattacked) == [s.true_label for s in unattacked]))


def compute_asr(model, attacked):
    _require(attacked, attacked=True)
    pred = predictions(model, attacked)
    t_asr = float(np.mean(pred == [s.target_label for s in attacked]))
    u_asr = float(np.mean(pred != [s.true_label for s in attacked]))
    return t_asr, u_asr


def compute_dr(model, pipeline, attacked, return_counts=False):
    """
    Defense rate. ``pipeline`` maps a sample to its post-defense label.

    Returns ``None`` when no attacked sample was misclassified before the
    defense.
    """
    _require(attacked, attacked=True)
    pre = predictions(model, attacked)
    true = np.array([s.true_label for s in attacked])
    missed = np.flatnonzero(pre != true)
    restored = sum(pipeline(attacked[i]) == true[i] for i in missed)
    dr = _ratio(int(restored), len(missed))
    return (dr, (int(restored), len(missed))) if return_counts else dr


def compute_cd(model, pipeline, unattacked):
    _require(unattacked, attacked=False)
    true = np.array([s.true_label for s in unattacked])
    post = np.array([pipeline(s) for s in unattacked])
    return compute_ca(model, unattacked) - float(np.mean(post == true))


def compute_pda(model, pipeline, attacked, unattacked, pi_a=DEFAULT_PI_A):
    _require(attacked, attacked=True)
    _require(unattacked, attacked=False)
    acc_a = np.mean([pipeline(s) == s.true_label for s in attacked])
    acc_u = np.mean([pipeline(s) == s.true_label for s in unattacked])
    return float((1.0 - pi_a) * acc_u + pi_a * acc_a)


# ---------------------------------------------------------------------------
# scenarios


@dataclass(frozen=True)
class Oracle:
    kind: str = "oracle"


@dataclass(frozen=True)
class EstimatedSet:
    selection: str = "ranked"  # ranked | random | guaranteed
    k: int | None = 3  # None: every mask toward the presumed target
    seed: int = 0
    kind: str = "estimated"

    def __post_init__(self):
        if self.selection not in ("ranked", "random", "guaranteed"):
            raise ValueError(f"unknown selection {self.selection!r}")
        if self.k is not None and self.k < 1:
            raise ValueError("k must be >= 1")


@dataclass(frozen=True)
class RandomWindows:
    config: masks.RandomMaskConfig
    kind: str = "random-windows"


_KNOWLEDGE_SOURCES = {"non-blind": Oracle, "semi-blind": EstimatedSet, "blind": RandomWindows}


@dataclass(frozen=True)
class ScenarioConfig:
    knowledge: str
    defense: object
    mask_source: object
    application: str = "sequential"
    fusion: str = "single"
    pi_a: float = DEFAULT_PI_A
    name: str = ""

    def __post_init__(self):
        expected = _KNOWLEDGE_SOURCES.get(self.knowledge)
        if expected is None:
            raise ScenarioError(f"unknown knowledge level {self.knowledge!r}")
        if not isinstance(self.mask_source, expected):
            raise ScenarioError(f"{self.knowledge} requires a {expected.__name__} mask source, "
                                f"got {type(self.mask_source).__name__}")
        if not isinstance(self.defense, (Remap, Reconstruct)):
            raise ScenarioError("defense must be a Remap or Reconstruct op")
        if self.application not in ("sequential", "parallel"):
            raise ScenarioError(f"unknown application {self.application!r}")
        if self.fusion not in fusion.FUSION_MODES:
            raise ScenarioError(f"unknown fusion mode {self.fusion!r}")
        if self.application == "parallel" and self.fusion == "single":
            raise ScenarioError("parallel application needs mv or sf fusion")
        if self.application == "sequential" and self.fusion != "single":
            raise ScenarioError("sequential application produces one image; use fusion 'single'")
        if not 0.0 <= self.pi_a <= 1.0:
            raise ScenarioError("pi_a must lie in [0, 1]")

    @property
    def label(self):
        if self.name:
            return self.name
        src = self.mask_source
        parts = [self.defense.name]
        if isinstance(src, RandomWindows):
            prefix = "NOL" if src.config.overlap == "non-overlapping" else "OL"
            parts.insert(0, prefix)
            k = src.config.k
        elif isinstance(src, EstimatedSet):
            k = src.k if src.k is not None else "all"
        else:
            k = None
        if self.application == "parallel":
            parts.append(f"Par({k})")
        elif k is not None:
            sel = {"ranked": "Rank", "random": "Rand", "guaranteed": "Gtd"}.get(getattr(src, "selection", ""), "")
            parts.append(f"Seq-{sel}({k})" if sel else f"Seq({k})")
        label = "-".join(parts)
        return label + (f" + {self.fusion.upper()}" if self.application == "parallel" else "")

    def describe(self):
        d = asdict(self)
        d["defense"] = {"type": type(self.defense).__name__, **asdict(self.defense)}
        d["mask_source"] = {"type": type(self.mask_source).__name__, **asdict(self.mask_source)}
        d["label"] = self.label
        return d


def defense_masks(model, sample, config, store=None):
    """
    Defensive masks for one sample; ``None`` means the sample is left alone.

    Non-blind defenders know whether a scene is attacked and skip clean ones.
    The other levels always defend, presuming an attack.
    """
    src = config.mask_source
    if isinstance(src, Oracle):
        return [masks.oracle_mask(sample)] if sample.attacked else None
    if isinstance(src, RandomWindows):
        h, w = sample.image.shape[:2]
        cfg = src.config
        per_sample = masks.RandomMaskConfig(cfg.window, cfg.ratio, cfg.count, cfg.overlap, cfg.k,
                                            derive_seed(cfg.seed, sample.sample_id))
        return masks.random_masks(h, w, per_sample)
    if store is None:
        raise ScenarioError("semi-blind evaluation needs a mask store; run build-masks first")
    probs = clf.classify(model, sample.image)
    target = clf.argmax_lowest(probs)
    available = len(store.sources_for(target))
    k = available if src.k is None else src.k
    seed = derive_seed(src.seed, sample.sample_id)
    if src.selection == "ranked":
        _, sources = masks.ranked_sources(probs, store, k)
        return [store.mask(j, target) for j in sources]
    if src.selection == "random":
        return masks.random_select(store, target, k, seed)
    return masks.guaranteed_select(store, target, sample.true_label, k, seed, ground_truth_access=True)


def defend_and_decide(model, sample, config, store=None):
    """Post-defense label of one sample under ``config``."""
    mask_list = defense_masks(model, sample, config, store)
    if mask_list is None:
        return clf.predict(model, sample.image)
    if config.application == "sequential":
        return fusion.decide_single(model, sequential_apply(sample.image, mask_list, config.defense))
    defended = parallel_apply(sample.image, mask_list, config.defense)
    return fusion.fuse(config.fusion, clf.classify_batch(model, np.stack(defended)))


def _decide_job(job):
    model, sample, config, store = job
    return defend_and_decide(model, sample, config, store)


def run_scenario(model, attacked, unattacked, config, store=None, workers=1):
    """Evaluate one scenario on an attacked and an unattacked corpus."""
    _require(attacked, attacked=True)
    _require(unattacked, attacked=False)
    if config.knowledge == "semi-blind" and store is None:
        raise ScenarioError("semi-blind evaluation needs a mask store; run build-masks first")
    samples = list(attacked) + list(unattacked)
    post = pmap(_decide_job, [(model, s, config, store) for s in samples], workers)
    pre = predictions(model, samples)
    n = len(attacked)
    report = metrics_from_predictions(
        [s.true_label for s in attacked], [s.target_label for s in attacked], pre[:n], post[:n],
        [s.true_label for s in unattacked], pre[n:], post[n:],
        pi_a=config.pi_a, name=config.label, config=config.describe())
    logger.info("%s: %s", config.label, format_report(report))
    return report


# ---------------------------------------------------------------------------
# baselines


def baseline_median_filter(image, kernel=7):
    """Per-channel median over a ``kernel x kernel`` window with edge clamping."""
    if kernel < 3 or kernel % 2 == 0:
        raise ValueError("kernel must be an odd integer >= 3")
    image = check_image(image)
    r = kernel // 2
    padded = np.pad(image, ((r, r), (r, r), (0, 0)), mode="edge")
    windows = np.lib.stride_tricks.sliding_window_view(padded, (kernel, kernel), axis=(0, 1))
    return np.median(windows.reshape(*image.shape, kernel * kernel), axis=-1)


def baseline_jpeg(image, quality=10):
    """Baseline JPEG encode/decode round trip at ``quality``."""
    if not 1 <= quality <= 100:
        raise ValueError("quality must lie in [1, 100]")
    image = check_image(image)
    buf = io.BytesIO()
    try:
        PILImage.fromarray(to_bytes(image)).save(buf, format="JPEG", quality=int(quality))
        buf.seek(0)
        with PILImage.open(buf) as im:
            decoded = np.asarray(im.convert("RGB"), dtype=np.float64)
    except OSError as exc:
        raise RuntimeError(f"JPEG codec failure: {exc}") from exc
    return decoded / 255.0


BASELINES = {
    "median": (baseline_median_filter, "kernel", 7, "Median Filter (kernel={})"),
    "jpeg": (baseline_jpeg, "quality", 10, "JPEG (QF={})"),
}


def _baseline_job(job):
    model, transform, sample = job
    return clf.predict(model, transform(sample.image))


def run_baseline(model, attacked, unattacked, kind="median", param=None, pi_a=DEFAULT_PI_A, workers=1):
    """Global input transformation applied to every scene, attacked or not."""
    fn, pname, default, title = BASELINES[kind]
    param = default if param is None else param
    transform = partial(fn, **{pname: param})
    samples = list(attacked) + list(unattacked)
    post = pmap(_baseline_job, [(model, transform, s) for s in samples], workers)
    pre = predictions(model, samples)
    n = len(attacked)
    return metrics_from_predictions(
        [s.true_label for s in attacked], [s.target_label for s in attacked], pre[:n], post[:n],
        [s.true_label for s in unattacked], pre[n:], post[n:],
        pi_a=pi_a, name=title.format(param), config={"baseline": kind, pname: param})


# ---------------------------------------------------------------------------
# grid search


@dataclass(frozen=True)
class GridCell:
    window: int
    ratio: float
    windows_per_mask: int
    floored: bool
    report: MetricsReport | None
    note: str = ""


@dataclass(frozen=True)
class GridResult:
    cells: list
    best: GridCell | None

    def cell(self, window, ratio):
        for c in self.cells:
            if c.window == window and c.ratio == ratio:
                return c
        raise KeyError((window, ratio))


def grid_search(model, attacked, unattacked, windows=(2, 4, 8, 16), ratios=(0.25, 0.5, 0.625, 0.75),
                k=100, fusion_mode="sf", defense=None, overlap="non-overlapping", seed=0,
                pi_a=DEFAULT_PI_A, workers=1):
    """
    Blind parallel defense over a window-size x ratio grid.

    Cells whose ratio gives a fractional window count use the floor and are
    flagged; cells that round to zero windows are reported without metrics.
    The best cell maximizes PDA (first in grid order on ties).
    """
    defense = Reconstruct() if defense is None else defense
    height, width = attacked[0].image.shape[:2]
    cells = []
    for w in windows:
        for ratio in ratios:
            cfg = masks.RandomMaskConfig(w, ratio=ratio, overlap=overlap, k=k, seed=seed)
            m, floored = masks.window_count(height, width, cfg)
            note = f"non-integer window count floored to {m}" if floored else ""
            if m < 1:
                cells.append(GridCell(w, ratio, m, floored, None, "no window at this ratio"))
                continue
            scenario = ScenarioConfig("blind", defense, RandomWindows(cfg), "parallel", fusion_mode, pi_a)
            report = run_scenario(model, attacked, unattacked, scenario, workers=workers)
            cells.append(GridCell(w, ratio, m, floored, report, note))
    scored = [c for c in cells if c.report is not None]
    # max() keeps the first maximal element
    best = max(scored, key=lambda c: c.report.PDA) if scored else None
    return GridResult(cells, best)


# ---------------------------------------------------------------------------
# output


def _fmt(v):
    return "undefined" if v is None else f"{v:.4f}"


def format_report(report):
    return "  ".join(f"{m}={_fmt(getattr(report, m))}" for m in METRIC_NAMES)


def format_table(reports):
    head = f"{'defense':<36}" + "".join(f"{m:>10}" for m in METRIC_NAMES)
    lines = [head, "-" * len(head)]
    for r in reports:
        lines.append(f"{r.name[:36]:<36}" + "".join(f"{_fmt(getattr(r, m)):>10}" for m in METRIC_NAMES))
    return "\n".join(lines)


def reports_json(reports):
    return json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True, default=str) + "\n"


def reports_csv(reports):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=["name", *METRIC_NAMES, "pi_a", "fingerprint"], lineterminator="\n")
    writer.writeheader()
    for r in reports:
        writer.writerow({k: ("undefined" if v is None else v) for k, v in r.row().items()})
    return buf.getvalue()


def grid_csv(result, ratios=None):
    """Window sizes as rows, ratios as column groups of DR / CD / PDA."""
    ratios = sorted({c.ratio for c in result.cells}) if ratios is None else list(ratios)
    windows = sorted({c.window for c in result.cells})
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    header = ["w"]
    for r in ratios:
        header += [f"ratio={r}:DR", f"ratio={r}:CD", f"ratio={r}:PDA", f"ratio={r}:note"]
    writer.writerow(header)
    for w in windows:
        row = [w]
        for r in ratios:
            c = result.cell(w, r)
            if c.report is None:
                row += ["", "", "", c.note]
            else:
                row += [_fmt(c.report.DR), _fmt(c.report.CD), _fmt(c.report.PDA), "*" if c.floored else ""]
        writer.writerow(row)
    return buf.getvalue()
