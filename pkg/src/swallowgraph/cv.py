"""Patient-level cross-validation: iterative multilabel stratified k-fold
over per-patient label histograms, plus the weighted-F1 metric.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class CvError(ValueError):
    pass


@dataclass
class FoldAssignment:
    fold_of: dict     # patient_id -> fold index
    k: int

    def folds(self):
        out = [[] for _ in range(self.k)]
        for pid, f in self.fold_of.items():
            out[f].append(pid)
        return [sorted(f) for f in out]

    def validation_patients(self, fold):
        return sorted(p for p, f in self.fold_of.items() if f == fold)

    def training_patients(self, fold):
        return sorted(p for p, f in self.fold_of.items() if f != fold)

    def save(self, path):
        Path(path).write_text(json.dumps(
            {"k": self.k, "fold_of": self.fold_of}, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path):
        obj = json.loads(Path(path).read_text())
        return cls(fold_of={p: int(f) for p, f in obj["fold_of"].items()},
                   k=int(obj["k"]))


def patient_histograms(patient_labels, class_counts):
    """Concatenated normalized per-category label histograms per patient.

    patient_labels: {patient_id: [n_swallows, 3] int array}.
    Returns (ids, H [P, sum(class_counts)], swallow counts).
    """
    ids = sorted(patient_labels.keys())
    dims = sum(class_counts)
    h = np.zeros((len(ids), dims))
    counts = np.zeros(len(ids))
    for r, pid in enumerate(ids):
        labs = np.asarray(patient_labels[pid], dtype=int)
        counts[r] = labs.shape[0]
        off = 0
        for c, k in enumerate(class_counts):
            hist = np.bincount(labs[:, c], minlength=k).astype(float)
            h[r, off:off + k] = hist / max(hist.sum(), 1.0)
            off += k
    return ids, h, counts


def multilabel_stratified_kfold(patient_labels, class_counts, k=5, seed=0):
    """Greedy iterative assignment of patients to k folds.

    Patients are processed largest-need-first (most swallows, then largest
    histogram imbalance); each goes to the fold that minimizes the
    deviation of the accumulated swallow-weighted histogram from its
    proportional target, with a patient-count balance penalty. Seeded
    tie-breaking makes the split deterministic.
    """
    if k < 2:
        raise CvError("k must be >= 2")
    ids, h, counts = patient_histograms(patient_labels, class_counts)
    n = len(ids)
    if k > n:
        raise CvError(f"k={k} exceeds patient count {n}")
    rng = np.random.default_rng(seed)

    weighted = h * counts[:, None]          # absolute label mass per patient
    mass = weighted.sum(axis=1)
    target = weighted.sum(axis=0) / k       # final per-fold label-mass target
    order = np.lexsort((rng.random(n), -np.abs(h - h.mean(axis=0)).sum(axis=1),
                        -counts))

    fold_hist = np.zeros((k, h.shape[1]))
    fold_patients = np.zeros(k)
    max_patients = int(np.ceil(n / k))
    fold_of = {}
    for idx in order:
        best, best_score = None, None
        jitter = rng.random(k) * 1e-9       # seeded deterministic tie-break
        for f in range(k):
            if fold_patients[f] >= max_patients:
                continue
            # remaining need: how far below its final target the fold is in
            # exactly the label dimensions this patient brings. Assigning to
            # the neediest fold keeps all folds growing toward the same
            # target instead of filling them one at a time.
            need = ((target - fold_hist[f]) * weighted[idx]).sum() / mass[idx]
            score = need - 0.01 * fold_patients[f] + jitter[f]
            if best_score is None or score > best_score:
                best, best_score = f, score
        fold_hist[best] += weighted[idx]
        fold_patients[best] += 1
        fold_of[ids[idx]] = best
    return FoldAssignment(fold_of=fold_of, k=k)


def fold_proportion_deviation(patient_labels, class_counts, assignment):
    """Max over classes and folds of |class proportion in fold - overall|."""
    all_labels = np.concatenate([np.asarray(v) for v in patient_labels.values()])
    worst = 0.0
    for fold in range(assignment.k):
        val = assignment.validation_patients(fold)
        labs = np.concatenate([np.asarray(patient_labels[p]) for p in val])
        for c, kc in enumerate(class_counts):
            overall = np.bincount(all_labels[:, c], minlength=kc) / len(all_labels)
            local = np.bincount(labs[:, c], minlength=kc) / len(labs)
            worst = max(worst, float(np.abs(local - overall).max()))
    return worst


def weighted_f1(predictions, labels, n_classes):
    """Support-weighted mean of per-class F1.

    Zero-support classes are excluded from the weighting; a class with no
    true and no predicted positives scores F1 = 0.
    """
    predictions = np.asarray(predictions, dtype=int)
    labels = np.asarray(labels, dtype=int)
    if len(predictions) != len(labels):
        raise CvError("prediction/label length mismatch")
    if len(labels) == 0:
        raise CvError("empty input")
    total, weight_sum = 0.0, 0.0
    for k in range(n_classes):
        support = int((labels == k).sum())
        if support == 0:
            continue
        tp = int(((predictions == k) & (labels == k)).sum())
        fp = int(((predictions == k) & (labels != k)).sum())
        fn = support - tp
        f1 = 2.0 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) > 0 else 0.0
        total += support * f1
        weight_sum += support
    return total / weight_sum
