"""
Final decisions from one or several defended images.

The ``*_probs`` functions work on an already computed ``(k, N)`` stack of
softmax vectors; the model-level wrappers classify first. Sums use
``math.fsum`` so the result cannot depend on the order of the defended images.
"""
import math

import numpy as np

from stickerguard import classifier as clf

FUSION_MODES = ("single", "mv", "sf")


def _stack(probs):
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2 or len(probs) == 0:
        raise ValueError("need a non-empty (k, N) stack of softmax vectors")
    return probs


def class_mass(probs):
    """Exactly rounded per-class sum over the stack."""
    probs = _stack(probs)
    return np.array([math.fsum(probs[:, n]) for n in range(probs.shape[1])])


def majority_vote_probs(probs):
    """
    Most frequent per-image decision.

    Ties go to the tied label with the larger summed softmax mass, then to
    the lowest label.
    """
    probs = _stack(probs)
    votes = np.bincount(np.argmax(probs, axis=1), minlength=probs.shape[1])
    tied = np.flatnonzero(votes == votes.max())
    if len(tied) == 1:
        return int(tied[0])
    mass = class_mass(probs)[tied]
    return int(tied[np.flatnonzero(mass == mass.max())[0]])


def softmax_fusion_probs(probs):
    return clf.argmax_lowest(class_mass(probs))


def decide_single(model, defended):
    return clf.predict(model, defended)


def majority_vote(model, defended):
    if len(defended) == 0:
        raise ValueError("majority vote needs at least one defended image")
    return majority_vote_probs(clf.classify_batch(model, np.stack(defended)))


def softmax_fusion(model, defended):
    if len(defended) == 0:
        raise ValueError("softmax fusion needs at least one defended image")
    return softmax_fusion_probs(clf.classify_batch(model, np.stack(defended)))


def fuse(mode, probs):
    """Dispatch on a fusion keyword for a precomputed probability stack."""
    if mode == "mv":
        return majority_vote_probs(probs)
    if mode == "sf":
        return softmax_fusion_probs(probs)
    if mode == "single":
        probs = _stack(probs)
        if len(probs) != 1:
            raise ValueError("single-image decision needs exactly one defended image")
        return clf.argmax_lowest(probs[0])
    raise ValueError(f"unknown fusion mode {mode!r}")
