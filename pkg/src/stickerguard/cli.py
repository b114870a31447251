"""
Command line entry point.

Stages mirror the experimental pipeline and each writes inspectable artifacts
under the output root (``--out``, else ``$STICKERGUARD_OUT``, else
``./runs``)::

    gen-data     data/train, data/test          unattacked sign corpora
    train        model.bin                      classifier
    attack       attacked/                      sticker-attacked corpus
    build-masks  masks/store-<hash>/            estimated mask sets
    defend       defended/                      defended copies of one image
    eval         reports/eval/                  metrics JSON/CSV + figure
    grid         reports/grid/                  window x ratio sweep

Settings come from built-in defaults, then ``--config file.json`` (flat
dotted keys, e.g. ``{"attack.max_stickers": 8}``), then explicit flags.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import re
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from stickerguard import classifier as clf
from stickerguard import defenses, evaluation, masks, report, scenes
from stickerguard.imaging import load_mask_png, load_png, save_png

logger = logging.getLogger("stickerguard")

OUT_ENV = "STICKERGUARD_OUT"

DEFAULTS = {
    "seed": 0,
    "canvas": 64,
    "n_classes": 8,
    "workers": 1,
    "data.n_per_class": 250,
    "data.train_fraction": 0.8,
    "train.epochs": 3,
    "train.batch_size": 32,
    "train.learning_rate": 0.01,
    "train.weight_decay": 1e-3,
    "attack.max_stickers": 12,
    "attack.sizes": "4,8",
    "attack.stride": 4,
    "attack.sources": "all",
    "eval.unattacked_per_class": 8,
    "eval.pi_a": 0.5,
}

SCENARIOS = ("non-blind", "semi-blind", "blind", "all")
DEFENSES = {
    "remap-w": lambda a: defenses.Remap(defenses.RemapMode("white")),
    "remap-b": lambda a: defenses.Remap(defenses.RemapMode("black")),
    "remap-t": lambda a: defenses.Remap(defenses.RemapMode("threshold", a.tau)),
    "reconstruct": lambda a: defenses.Reconstruct(a.eps, a.max_iter),
}
FUSIONS = ("single", "mv", "sf")
SELECTIONS = ("ranked", "random", "guaranteed")
OVERLAPS = ("non-overlapping", "overlapping")
BASELINES = tuple(evaluation.BASELINES)


class CLIError(Exception):
    def __init__(self, kind, message, hint=""):
        super().__init__(message)
        self.kind = kind
        self.hint = hint


# ---------------------------------------------------------------------------
# configuration


def _flag(key):
    return "--" + key.replace("_", "-")


def resolve_config(args):
    cfg = dict(DEFAULTS)
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise CLIError("missing-config", f"config file {path} not found")
        loaded = json.loads(path.read_text())
        unknown = set(loaded) - set(DEFAULTS)
        if unknown:
            raise CLIError("bad-config", f"unknown config keys: {sorted(unknown)}")
        cfg.update(loaded)
    for key in DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    return cfg


def out_root(args):
    return Path(args.out or os.environ.get(OUT_ENV) or "runs")


def _ints(text):
    return [int(v) for v in str(text).split(",") if v.strip()]


def _floats(text):
    return [float(v) for v in str(text).split(",") if v.strip()]


def budget_from(cfg):
    return scenes.AttackBudget(int(cfg["attack.max_stickers"]), tuple(_ints(cfg["attack.sizes"])),
                               ("black", "white"), int(cfg["attack.stride"]))


def sources_from(cfg):
    if str(cfg["attack.sources"]) == "all":
        return list(range(int(cfg["n_classes"])))
    return _ints(cfg["attack.sources"])


class Paths:
    def __init__(self, root):
        self.root = Path(root)
        self.train = self.root / "data" / "train"
        self.test = self.root / "data" / "test"
        self.model = self.root / "model.bin"
        self.attacked = self.root / "attacked"
        self.masks = self.root / "masks"
        self.defended = self.root / "defended"
        self.eval = self.root / "reports" / "eval"
        self.grid = self.root / "reports" / "grid"


def _need(path, step, what):
    if not Path(path).exists():
        raise CLIError("missing-artifact", f"{what} not found at {path}", f"run `stickerguard {step}` first")


def _load_model(paths):
    _need(paths.model, "train", "model")
    return clf.load_model(paths.model)


def store_name(model, cfg):
    classes = range(int(cfg["n_classes"]))
    return masks.cache_name(model.model_id, budget_from(cfg), int(cfg["seed"]), int(cfg["canvas"]), classes, classes)


def _load_store(paths, model, cfg, required=True):
    path = paths.masks / store_name(model, cfg)
    if not (path / "index.json").is_file():
        if required:
            raise CLIError("missing-artifact", f"mask store not found at {path}",
                           "run `stickerguard build-masks` first")
        return None
    return masks.load_store(path)


def _eval_corpora(paths, cfg):
    _need(paths.attacked / "manifest.json", "attack", "attacked corpus")
    _need(paths.test / "manifest.json", "gen-data", "test corpus")
    attacked = scenes.load_corpus(paths.attacked)
    per_class = int(cfg["eval.unattacked_per_class"])
    seen = {}
    unattacked = []
    for s in scenes.load_corpus(paths.test):
        if seen.get(s.true_label, 0) < per_class:
            seen[s.true_label] = seen.get(s.true_label, 0) + 1
            unattacked.append(s)
    return attacked, unattacked


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args, cfg):
    paths = Paths(out_root(args))
    frac = float(cfg["data.train_fraction"])
    train, test = scenes.generate_dataset(int(cfg["data.n_per_class"]), (frac, 1.0 - frac), int(cfg["seed"]),
                                          int(cfg["n_classes"]), int(cfg["canvas"]))
    meta = {"seed": int(cfg["seed"]), "canvas": int(cfg["canvas"]), "n_classes": int(cfg["n_classes"])}
    for split, samples, directory in (("train", train, paths.train), ("test", test, paths.test)):
        manifest = scenes.save_corpus(samples, directory, {**meta, "split": split})
        counts = manifest["counts"]
        print(f"{split}: {counts['total']} samples ({counts['unattacked']} unattacked, "
              f"{counts['attacked']} attacked) -> {directory}")
        print("  per class: " + ", ".join(f"{c}:{n}" for c, n in counts["per_class"].items()))
    return 0


def cmd_train(args, cfg):
    paths = Paths(out_root(args))
    _need(paths.train / "manifest.json", "gen-data", "training corpus")
    train = scenes.load_corpus(paths.train)
    config = clf.TrainConfig(epochs=int(cfg["train.epochs"]), batch_size=int(cfg["train.batch_size"]),
                             learning_rate=float(cfg["train.learning_rate"]),
                             weight_decay=float(cfg["train.weight_decay"]), n_classes=int(cfg["n_classes"]))
    model = clf.train([(s.image, s.true_label) for s in train], config, seed=int(cfg["seed"]))
    paths.model.parent.mkdir(parents=True, exist_ok=True)
    clf.save_model(model, paths.model)
    print(f"model {model.model_id} -> {paths.model}")
    if (paths.test / "manifest.json").is_file():
        test = scenes.load_corpus(paths.test)
        acc = clf.accuracy(model, np.stack([s.image for s in test]), [s.true_label for s in test])
        print(f"clean test accuracy: {acc:.4f} ({len(test)} images)")
    return 0


def cmd_attack(args, cfg):
    paths = Paths(out_root(args))
    model = _load_model(paths)
    attacked = scenes.build_attacked_corpus(model, sources_from(cfg), None, budget_from(cfg), int(cfg["seed"]),
                                            int(cfg["canvas"]), workers=int(cfg["workers"]))
    meta = {"seed": int(cfg["seed"]), "model_id": model.model_id, "budget": asdict(budget_from(cfg))}
    scenes.save_corpus(attacked, paths.attacked, meta)
    t_asr, u_asr = evaluation.compute_asr(model, attacked)
    print(f"{len(attacked)} attacked scenes -> {paths.attacked}")
    print(f"T-ASR {t_asr:.4f}  U-ASR {u_asr:.4f}")
    return 0


def cmd_build_masks(args, cfg):
    paths = Paths(out_root(args))
    model = _load_model(paths)
    # the defender attacks every class, whatever subset the evaluation attacks
    classes = list(range(int(cfg["n_classes"])))
    store = masks.build_mask_set_store(model, classes, classes, budget_from(cfg), int(cfg["seed"]),
                                       int(cfg["canvas"]), cache_dir=paths.masks, workers=int(cfg["workers"]))
    ok = sum(bool(v) for v in store.success.values())
    print(f"{len(store)} masks ({ok} from successful attacks) -> {paths.masks / store_name(model, cfg)}")
    return 0


def scenario_from_args(args, cfg, knowledge):
    defense_key = args.defense or ("remap-t" if knowledge == "non-blind" else "reconstruct")
    op = DEFENSES[defense_key](args)
    pi_a = float(cfg["eval.pi_a"])
    if knowledge == "non-blind":
        application = args.application or "sequential"
        source = evaluation.Oracle()
    elif knowledge == "semi-blind":
        application = args.application or "sequential"
        # parallel defenses default to every mask toward the presumed target
        default_k = None if application == "parallel" else 3
        k = None if args.k == "all" else int(args.k) if args.k else default_k
        source = evaluation.EstimatedSet(args.selection or "ranked", k, int(cfg["seed"]))
    else:
        application = args.application or "parallel"
        k = 100 if args.k in (None, "all") else int(args.k)
        source = evaluation.RandomWindows(masks.RandomMaskConfig(
            args.window or 8, ratio=args.ratio if args.ratio is not None else 0.625,
            overlap=args.overlap or "non-overlapping", k=k, seed=int(cfg["seed"])))
    fusion = args.fusion or ("sf" if application == "parallel" else "single")
    return evaluation.ScenarioConfig(knowledge, op, source, application, fusion, pi_a)


def default_scenarios(args, cfg):
    return [
        scenario_from_args(_blank(args, defense="remap-t"), cfg, "non-blind"),
        scenario_from_args(_blank(args, defense="reconstruct", selection="ranked", k="3"), cfg, "semi-blind"),
        scenario_from_args(_blank(args, defense="reconstruct", k="100", window=8, ratio=0.625,
                                  overlap="non-overlapping", fusion="sf"), cfg, "blind"),
    ]


def _blank(args, **overrides):
    ns = argparse.Namespace(**vars(args))
    for name in ("defense", "application", "fusion", "selection", "k", "window", "ratio", "overlap"):
        setattr(ns, name, None)
    for name, value in overrides.items():
        setattr(ns, name, value)
    return ns


def _slug(text):
    return re.sub(r"[^A-Za-z0-9]+", "-", text).strip("-").lower()


def write_reports(reports, directory, stem):
    directory.mkdir(parents=True, exist_ok=True)
    for r in reports:
        (directory / f"{_slug(r.name)}.json").write_text(evaluation.reports_json([r]))
    (directory / f"{stem}.json").write_text(evaluation.reports_json(reports))
    (directory / f"{stem}.csv").write_text(evaluation.reports_csv(reports))
    report.metrics_bars(reports, directory / f"{stem}.png")


def cmd_eval(args, cfg):
    paths = Paths(out_root(args))
    model = _load_model(paths)
    attacked, unattacked = _eval_corpora(paths, cfg)
    workers = int(cfg["workers"])
    if args.baseline:
        reports = [evaluation.run_baseline(model, attacked, unattacked, args.baseline, args.baseline_param,
                                           float(cfg["eval.pi_a"]), workers)]
    else:
        if args.scenario == "all":
            configs = default_scenarios(args, cfg)
        else:
            configs = [scenario_from_args(args, cfg, args.scenario)]
        store = None
        if any(c.knowledge == "semi-blind" for c in configs):
            store = _load_store(paths, model, cfg)
        reports = [evaluation.run_scenario(model, attacked, unattacked, c, store, workers) for c in configs]
    print(evaluation.format_table(reports))
    write_reports(reports, paths.eval, args.name or "eval")
    print(f"reports -> {paths.eval}")
    return 0


def cmd_grid(args, cfg):
    paths = Paths(out_root(args))
    model = _load_model(paths)
    attacked, unattacked = _eval_corpora(paths, cfg)
    defense = DEFENSES[args.defense or "reconstruct"](args)
    result = evaluation.grid_search(model, attacked, unattacked, _ints(args.w), _floats(args.ratio),
                                    int(args.k or 100), args.fusion or "sf", defense,
                                    args.overlap or "non-overlapping", int(cfg["seed"]),
                                    float(cfg["eval.pi_a"]), int(cfg["workers"]))
    paths.grid.mkdir(parents=True, exist_ok=True)
    (paths.grid / "grid.csv").write_text(evaluation.grid_csv(result, _floats(args.ratio)))
    scored = [c.report for c in result.cells if c.report is not None]
    (paths.grid / "cells.csv").write_text(evaluation.reports_csv(scored))
    cells = [{"window": c.window, "ratio": c.ratio, "windows_per_mask": c.windows_per_mask,
              "floored": c.floored, "note": c.note, "report": c.report.to_dict() if c.report else None}
             for c in result.cells]
    best = None if result.best is None else {"window": result.best.window, "ratio": result.best.ratio}
    (paths.grid / "grid.json").write_text(json.dumps({"cells": cells, "best": best}, indent=2,
                                                     sort_keys=True, default=str) + "\n")
    report.grid_heatmap(result, paths.grid / "grid.png")
    print(evaluation.grid_csv(result, _floats(args.ratio)), end="")
    if result.best is not None:
        print(f"best: w={result.best.window} ratio={result.best.ratio} PDA={result.best.report.PDA:.4f}")
    print(f"grid -> {paths.grid}")
    return 0


def cmd_defend(args, cfg):
    paths = Paths(out_root(args))
    model = _load_model(paths)
    image = load_png(args.image)
    scenario = args.scenario if args.scenario != "all" else "blind"
    config = scenario_from_args(args, cfg, scenario)
    region = np.ones(image.shape[:2], dtype=bool)
    if scenario == "non-blind":
        if not args.mask:
            raise CLIError("missing-argument", "non-blind defense needs --mask", "pass the perturbation mask PNG")
        pmask = load_mask_png(args.mask)
        sample = scenes.Sample(image, -1, region, sample_id=Path(args.image).stem, attacked=True,
                               target_label=-1, perturbation_mask=pmask)
    else:
        sample = scenes.Sample(image, -1, region, sample_id=Path(args.image).stem)
    store = _load_store(paths, model, cfg) if scenario == "semi-blind" else None
    mask_list = evaluation.defense_masks(model, sample, config, store)
    if config.application == "sequential":
        defended = [defenses.sequential_apply(image, mask_list, config.defense)]
    else:
        defended = defenses.parallel_apply(image, mask_list, config.defense)
    out_dir = Path(args.output) if args.output else paths.defended
    out_dir.mkdir(parents=True, exist_ok=True)
    for stale in out_dir.glob(f"{sample.sample_id}_defended_*.png"):
        stale.unlink()
    for i, img in enumerate(defended):
        save_png(img, out_dir / f"{sample.sample_id}_defended_{i:03d}.png")
    label = evaluation.defend_and_decide(model, sample, config, store)
    shown = defended[:5]
    report.image_panel([image, *shown], ["input", *[f"defended {i}" for i in range(len(shown))]],
                       out_dir / f"{sample.sample_id}_panel.png", [None, *mask_list[:5]])
    print(json.dumps({"input": str(args.image), "scenario": config.label,
                      "prediction_before": clf.predict(model, image), "decision": int(label),
                      "defended_images": len(defended), "output": str(out_dir)}, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# parser


def _common(parser):
    parser.add_argument("--out", help=f"output root (default: ${OUT_ENV} or ./runs)")
    parser.add_argument("--config", help="JSON file of dotted keys, overridden by flags")
    parser.add_argument("--seed", dest="seed", type=int, help="master seed (default 0)")
    parser.add_argument("--canvas", dest="canvas", type=int, help="scene size in pixels (default 64)")
    parser.add_argument("--n-classes", dest="n_classes", type=int, help="sign classes (default 8)")
    parser.add_argument("--workers", dest="workers", type=int,
                        help="worker processes; results do not depend on it (default 1)")
    parser.add_argument("-v", "--verbose", action="store_true")


def _attack_flags(parser):
    parser.add_argument("--attack.max-stickers", dest="attack.max_stickers", type=int, help="default 12")
    parser.add_argument("--attack.sizes", dest="attack.sizes", help="comma-separated sticker sizes (default 4,8)")
    parser.add_argument("--attack.stride", dest="attack.stride", type=int, help="candidate grid stride (default 4)")
    parser.add_argument("--attack.sources", dest="attack.sources",
                        help="comma-separated source classes or 'all' (default all)")


def _defense_flags(parser, scenario_default="all"):
    parser.add_argument("--scenario", choices=SCENARIOS, default=scenario_default,
                        help="knowledge level: " + ", ".join(SCENARIOS) + f" (default {scenario_default})")
    parser.add_argument("--defense", choices=sorted(DEFENSES),
                        help="local defense: " + ", ".join(sorted(DEFENSES)))
    parser.add_argument("--application", choices=("sequential", "parallel"), help="mask composition")
    parser.add_argument("--fusion", choices=FUSIONS, help="decision rule: " + ", ".join(FUSIONS))
    parser.add_argument("--selection", choices=SELECTIONS,
                        help="semi-blind mask selection: " + ", ".join(SELECTIONS))
    parser.add_argument("--k", help="masks per scene ('all' = every mask toward the presumed target)")
    parser.add_argument("--window", type=int, help="blind window size w (default 8)")
    parser.add_argument("--ratio", type=float, help="blind window ratio (default 0.625)")
    parser.add_argument("--overlap", choices=OVERLAPS, help="blind window placement: " + ", ".join(OVERLAPS))
    parser.add_argument("--tau", type=float, default=defenses.DEFAULT_TAU, help="remap-t luminance threshold")
    parser.add_argument("--eps", type=float, default=defenses.DEFAULT_EPS, help="inpainting tolerance")
    parser.add_argument("--max-iter", type=int, default=defenses.DEFAULT_MAX_ITER, help="inpainting sweeps")
    parser.add_argument("--eval.pi-a", dest="eval.pi_a", type=float, help="attack prior (default 0.5)")


def build_parser():
    parser = argparse.ArgumentParser(prog="stickerguard", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render the unattacked train/test corpora")
    _common(p)
    p.add_argument("--data.n-per-class", dest="data.n_per_class", type=int, help="default 250")
    p.add_argument("--data.train-fraction", dest="data.train_fraction", type=float, help="default 0.8")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the classifier")
    _common(p)
    p.add_argument("--train.epochs", dest="train.epochs", type=int, help="default 3")
    p.add_argument("--train.batch-size", dest="train.batch_size", type=int, help="default 32")
    p.add_argument("--train.learning-rate", dest="train.learning_rate", type=float, help="default 0.01")
    p.add_argument("--train.weight-decay", dest="train.weight_decay", type=float, help="default 1e-3")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", help="attack one render per (source, target) pair")
    _common(p)
    _attack_flags(p)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("build-masks", help="precompute estimated mask sets")
    _common(p)
    _attack_flags(p)
    p.set_defaults(func=cmd_build_masks)

    p = sub.add_parser("defend", help="defend a single PNG and print the decision")
    _common(p)
    _attack_flags(p)
    _defense_flags(p, scenario_default="blind")
    p.add_argument("--image", required=True, help="input PNG")
    p.add_argument("--mask", help="perturbation mask PNG (non-blind only)")
    p.add_argument("--output", help="directory for defended PNGs (default <out>/defended)")
    p.set_defaults(func=cmd_defend)

    p = sub.add_parser("eval", help="evaluate scenarios or a baseline")
    _common(p)
    _attack_flags(p)
    _defense_flags(p)
    p.add_argument("--eval.unattacked-per-class", dest="eval.unattacked_per_class", type=int,
                   help="unattacked test scenes per class (default 8)")
    p.add_argument("--baseline", choices=BASELINES, help="global baseline instead of a scenario: "
                   + ", ".join(BASELINES))
    p.add_argument("--baseline-param", type=int, help="median kernel (default 7) or JPEG quality (default 10)")
    p.add_argument("--name", help="stem of the summary files (default eval)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("grid", help="blind window-size x ratio grid search")
    _common(p)
    p.add_argument("--w", default="2,4,8,16", help="comma-separated window sizes")
    p.add_argument("--ratio", default="0.25,0.5,0.625,0.75", help="comma-separated ratios")
    p.add_argument("--k", help="masks per scene (default 100)")
    p.add_argument("--fusion", choices=("mv", "sf"), help="default sf")
    p.add_argument("--defense", choices=sorted(DEFENSES), help="default reconstruct")
    p.add_argument("--overlap", choices=OVERLAPS)
    p.add_argument("--tau", type=float, default=defenses.DEFAULT_TAU)
    p.add_argument("--eps", type=float, default=defenses.DEFAULT_EPS)
    p.add_argument("--max-iter", type=int, default=defenses.DEFAULT_MAX_ITER)
    p.add_argument("--eval.unattacked-per-class", dest="eval.unattacked_per_class", type=int)
    p.add_argument("--eval.pi-a", dest="eval.pi_a", type=float)
    p.set_defaults(func=cmd_grid)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return args.func(args, cfg)
    except CLIError as exc:
        error = {"error": exc.kind, "message": str(exc), "hint": exc.hint}
    except (FileNotFoundError, ValueError, LookupError, PermissionError) as exc:
        error = {"error": type(exc).__name__, "message": str(exc), "hint": ""}
    print(json.dumps(error, sort_keys=True), file=sys.stderr)
    return 2


if __name__ == "__main__":
    sys.exit(main())
