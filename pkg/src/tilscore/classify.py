"""Patch classification over sampled candidates, and classifier evaluation.

Labels come from the argmax of the backend's probability vector with ties
broken toward the earlier class in the fixed (necrosis, stroma, normal_lung,
tumor) order. Only stroma and tumor patches stay relevant for TIL scoring;
necrosis and normal lung are discarded after classification. Evaluation
reports a 4x4 confusion matrix (rows = truth), overall accuracy, and
one-versus-rest AUCs computed by Mann-Whitney pair counting with half-credit
for score ties.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BackendError, UndefinedMetricError
from .sampling import Candidate, sig6
from .slide_io import SlideBundle
from .taxonomy import PATCH_CLASSES, RELEVANT_CLASSES
from .backends import make_patch_id

__all__ = ["classify_candidates", "filter_relevant", "evaluate_classifier", "ClassifierReport"]


def classify_candidates(backend, bundle: SlideBundle, candidates: list[Candidate],
                        workers: int = 1) -> list[Candidate]:
    """Attach class probabilities and labels to every sampled candidate.

    Untouched rows (not sampled) pass through unchanged; order is preserved.
    Backend failures propagate with the candidate index attached.
    """
    mpp = bundle.meta.mpp
    targets = [(i, c) for i, c in enumerate(candidates) if c.sampled]

    def one(item):
        i, c = item
        buf = bundle.read_region(0, c.x, c.y, c.patch_size, c.patch_size)
        try:
            probs = backend.classify(make_patch_id(c.slide_id, c.x, c.y), buf, mpp)
        except BackendError as e:
            raise type(e)(f"candidate {i} ({c.slide_id}:{c.x}:{c.y}): {e}") from e
        return probs

    if workers > 1 and len(targets) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, targets))
    else:
        results = [one(t) for t in targets]
    for (i, c), probs in zip(targets, results):
        qp = tuple(sig6(p) for p in probs.probs)
        c.class_probs = qp
        # label argmax over the stored (quantized) vector so a CSV reload agrees
        c.class_label = PATCH_CLASSES[qp.index(max(qp))]
    return candidates


def filter_relevant(candidates: list[Candidate]) -> list[Candidate]:
    """Keep sampled candidates labeled stroma or tumor (same objects, in order)."""
    return [c for c in candidates
            if c.sampled and c.class_label in RELEVANT_CLASSES]


@dataclass(frozen=True)
class ClassifierReport:
    confusion: np.ndarray  # (4, 4) int, rows = truth, cols = predicted
    accuracy: float
    per_class_auc: tuple  # aligned with PATCH_CLASSES, NaN for absent classes
    mean_auc: float
    n: int

    def to_json_dict(self) -> dict:
        return {
            "classes": list(PATCH_CLASSES),
            "confusion": self.confusion.tolist(),
            "accuracy": self.accuracy,
            "per_class_auc": [None if np.isnan(a) else a for a in self.per_class_auc],
            "mean_auc": self.mean_auc,
            "n": self.n,
        }

    def write_json(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_json_dict(), sort_keys=True, indent=1))
        return path

    def write_confusion_csv(self, path) -> Path:
        path = Path(path)
        lines = ["truth\\predicted," + ",".join(PATCH_CLASSES)]
        for k, row in zip(PATCH_CLASSES, self.confusion):
            lines.append(k + "," + ",".join(str(int(v)) for v in row))
        path.write_text("\n".join(lines) + "\n")
        return path


def _pair_auc(scores: np.ndarray, positive: np.ndarray) -> float:
    """One-vs-rest AUC by pair counting; ties in score earn half credit."""
    pos = scores[positive]
    neg = scores[~positive]
    wins = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return (wins + 0.5 * ties) / (len(pos) * len(neg))


def evaluate_classifier(records) -> ClassifierReport:
    """Score (probs, true_label) pairs against the fixed four-class taxonomy.

    `records` yields (probs, true_label) where probs is a length-4 sequence
    aligned with PATCH_CLASSES. Truth restricted to a single class leaves no
    one-vs-rest configuration, which is an error; classes absent from the
    truth get NaN AUC and are excluded from the mean.
    """
    probs = []
    labels = []
    for vec, truth in records:
        vec = tuple(float(v) for v in vec)
        if len(vec) != len(PATCH_CLASSES):
            raise ValueError("probability vector length mismatch")
        if truth not in PATCH_CLASSES:
            raise ValueError(f"unknown true label {truth!r}")
        probs.append(vec)
        labels.append(PATCH_CLASSES.index(truth))
    if not probs:
        raise ValueError("no records to evaluate")
    p = np.asarray(probs, dtype=np.float64)
    t = np.asarray(labels, dtype=np.intp)
    if len(np.unique(t)) < 2:
        raise UndefinedMetricError("single-class truth leaves AUC undefined")
    # argmax with ties toward the earlier class
    pred = np.argmax(p, axis=1)
    k = len(PATCH_CLASSES)
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (t, pred), 1)
    accuracy = float(np.trace(confusion) / len(t))
    aucs = []
    for ci in range(k):
        positive = t == ci
        if positive.any() and (~positive).any():
            aucs.append(float(_pair_auc(p[:, ci], positive)))
        else:
            aucs.append(float("nan"))
    present = [a for a in aucs if not np.isnan(a)]
    return ClassifierReport(
        confusion=confusion,
        accuracy=accuracy,
        per_class_auc=tuple(aucs),
        mean_auc=float(np.mean(present)),
        n=len(t),
    )
