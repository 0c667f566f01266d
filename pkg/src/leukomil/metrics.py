"""ROC/AUC, confusion matrices, stratified k-fold splits, CV aggregation and PCA."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np


class MetricError(ValueError):
    """A metric is undefined for the given input."""


class DegenerateDataError(ValueError):
    pass


# ---------------------------------------------------------------------------
# ROC


@dataclass
class RocCurve:
    thresholds: np.ndarray  # threshold for each point; +inf for the origin
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float
    auc_exact: Fraction = field(default=Fraction(0), repr=False)  # the AUC as a ratio of pair counts

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.fpr.tolist(), self.tpr.tolist()))


def roc_auc(scores, labels) -> RocCurve:
    """ROC curve by sweeping every distinct score; trapezoidal AUC.

    A point is emitted after each group of tied scores, so ties contribute a
    diagonal segment and the AUC equals P(s+ > s-) + P(s+ = s-)/2.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.shape != labels.shape:
        raise MetricError(f"{len(scores)} scores but {len(labels)} labels")
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("ROC needs both positive and negative examples")
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    last_of_group = np.r_[s[1:] != s[:-1], True]
    tp = np.cumsum(y)[last_of_group]
    fp = np.cumsum(~y)[last_of_group]
    tp = np.r_[0, tp]
    fp = np.r_[0, fp]
    # integer trapezoid: sum (fp_i - fp_{i-1}) * (tp_i + tp_{i-1}) / 2
    twice_area = int(np.sum(np.diff(fp) * (tp[1:] + tp[:-1])))
    exact = Fraction(twice_area, 2 * n_pos * n_neg)
    thresholds = np.r_[np.inf, s[last_of_group]]
    return RocCurve(thresholds, fp / n_neg, tp / n_pos, float(exact), exact)


def one_vs_rest(probabilities, truth: Sequence[str], classes: Sequence[str]) -> dict[str, RocCurve]:
    """Per-class ROC using that class's probability column as the score."""
    probs = np.asarray(probabilities, dtype=np.float64)
    truth = list(truth)
    out = {}
    for j, c in enumerate(classes):
        y = [t == c for t in truth]
        if any(y) and not all(y):
            out[c] = roc_auc(probs[:, j], y)
    return out


# ---------------------------------------------------------------------------
# confusion matrix


@dataclass
class ConfusionMatrix:
    classes: tuple[str, ...]
    counts: np.ndarray  # rows = truth, cols = prediction

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        if self.total == 0:
            raise MetricError("accuracy undefined for an empty confusion matrix")
        return float(np.trace(self.counts)) / self.total

    def recall(self, cls: str) -> float:
        i = self.classes.index(cls)
        row = self.counts[i].sum()
        if row == 0:
            raise MetricError(f"recall undefined: no items of class {cls!r}")
        return float(self.counts[i, i]) / float(row)

    def precision(self, cls: str) -> float:
        i = self.classes.index(cls)
        col = self.counts[:, i].sum()
        if col == 0:
            raise MetricError(f"precision undefined: nothing predicted as {cls!r}")
        return float(self.counts[i, i]) / float(col)

    def row_shares(self) -> np.ndarray:
        rows = self.counts.sum(axis=1, keepdims=True)
        return np.divide(self.counts, rows, out=np.zeros(self.counts.shape), where=rows > 0)

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.classes != self.classes:
            raise MetricError("cannot add confusion matrices over different classes")
        return ConfusionMatrix(self.classes, self.counts + other.counts)


def confusion(preds: Sequence[str], truth: Sequence[str], classes: Sequence[str]) -> ConfusionMatrix:
    classes = tuple(classes)
    if len(preds) != len(truth):
        raise MetricError(f"{len(preds)} predictions but {len(truth)} truths")
    index = {c: i for i, c in enumerate(classes)}
    counts = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for p, t in zip(preds, truth):
        if p not in index or t not in index:
            bad = p if p not in index else t
            raise MetricError(f"unknown class label {bad!r}")
        counts[index[t], index[p]] += 1
    return ConfusionMatrix(classes, counts)


# ---------------------------------------------------------------------------
# cross-validation


class SplitError(ValueError):
    pass


@dataclass
class CvSplit:
    k: int
    assignment: dict[str, int]  # sample id -> fold

    def fold(self, i: int) -> list[str]:
        return [sid for sid, f in self.assignment.items() if f == i]

    def train_test(self, i: int) -> tuple[list[str], list[str]]:
        test = self.fold(i)
        train = [sid for sid, f in self.assignment.items() if f != i]
        return train, test


def kfold(sample_ids: Sequence[str], labels: Sequence[str], k: int, seed: int = 0) -> CvSplit:
    """Stratified folds: seeded shuffle within each class, then round-robin."""
    if k < 2:
        raise SplitError(f"k must be >= 2, got {k}")
    if len(sample_ids) != len(labels):
        raise SplitError("sample_ids and labels differ in length")
    if len(set(sample_ids)) != len(sample_ids):
        raise SplitError("duplicate sample ids")
    rng = np.random.default_rng(seed)
    assignment: dict[str, int] = {}
    offset = 0
    for lab in sorted(set(labels)):
        members = [s for s, l in zip(sample_ids, labels) if l == lab]
        if len(members) < k:
            raise SplitError(f"class {lab!r} has {len(members)} samples, fewer than k={k}")
        for j, idx in enumerate(rng.permutation(len(members))):
            # rotating the start keeps total fold sizes balanced too
            assignment[members[idx]] = (offset + j) % k
        offset += len(members)
    return CvSplit(k, {s: assignment[s] for s in sample_ids})


@dataclass(frozen=True)
class Aggregate:
    mean: float
    std: float

    def __str__(self) -> str:
        return format_mean_std(self.mean, self.std)


def aggregate_cv(values: Sequence[float]) -> Aggregate:
    """Arithmetic mean and population standard deviation of per-fold values."""
    vals = [float(v) for v in values]
    if len(vals) < 2:
        raise MetricError("aggregation needs at least two folds")
    mean = math.fsum(vals) / len(vals)
    var = math.fsum((v - mean) ** 2 for v in vals) / len(vals)
    return Aggregate(mean, math.sqrt(var))


def format_mean_std(mean: float, std: float, digits: int = 3) -> str:
    return f"{mean:.{digits}f} ± {std:.{digits}f}"


# ---------------------------------------------------------------------------
# PCA


@dataclass
class PcaProjection:
    mean: np.ndarray
    axes: np.ndarray  # (dims, n_features), orthonormal rows
    coords: np.ndarray  # (n_items, dims)
    explained_variance: np.ndarray
    explained_variance_ratio: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return self.coords @ self.axes + self.mean


def pca_project(vectors, dims: int = 2) -> PcaProjection:
    """Project onto the top ``dims`` eigenvectors of the sample covariance.

    Each axis is signed so its first non-zero component is positive.
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2:
        raise DegenerateDataError(f"expected a 2-D array of vectors, got shape {x.shape}")
    n, d = x.shape
    if dims > d:
        raise DegenerateDataError(f"cannot take {dims} components of {d}-dimensional data")
    if n < dims + 1:
        raise DegenerateDataError(f"need at least {dims + 1} vectors, got {n}")
    mean = x.mean(axis=0)
    centred = x - mean
    cov = centred.T @ centred / (n - 1)
    total = float(np.trace(cov))
    if total <= 1e-12 * max(1.0, float(np.abs(x).max()) ** 2):
        raise DegenerateDataError("data has zero variance")
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:dims]
    evals = np.clip(evals[order], 0, None)
    axes = evecs[:, order].T.copy()
    for row in axes:
        nz = np.flatnonzero(np.abs(row) > 1e-12)
        if len(nz) and row[nz[0]] < 0:
            row *= -1
    coords = centred @ axes.T
    return PcaProjection(mean, axes, coords, evals, evals / total)


def silhouette(points, labels) -> float:
    """Mean silhouette coefficient with Euclidean distance."""
    p = np.asarray(points, dtype=np.float64)
    labels = np.asarray(labels)
    uniq = np.unique(labels)
    if len(uniq) < 2:
        raise MetricError("silhouette needs at least two clusters")
    d = np.sqrt(((p[:, None, :] - p[None, :, :]) ** 2).sum(-1))
    scores = []
    for i in range(len(p)):
        same = labels == labels[i]
        if same.sum() < 2:
            scores.append(0.0)
            continue
        a = d[i, same].sum() / (same.sum() - 1)
        b = min(d[i, labels == u].mean() for u in uniq if u != labels[i])
        scores.append((b - a) / max(a, b) if max(a, b) > 0 else 0.0)
    return float(np.mean(scores))
