"""Supervised metrics and the label-free SPIE score.

The supervised side is a plain confusion-matrix pipeline: overall
accuracy, per-class F1 and IoU, unweighted means, and a Dice score (mean
F1). The label-free side segments both a predicted-mask rendering and the
raw input with a deterministic graph-based region merger and scores the
disagreement of the two boundary maps; 0 means the prediction's segment
structure matches the input's exactly, 1 means the two disagree everywhere.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import (ContractError, DimensionError, EvaluationError, LabelError)

IGNORE_INDEX = 255


# -- confusion matrix ----------------------------------------------------------


@dataclass
class ConfusionMatrix:
    """K x K counts; rows are true classes, columns predicted classes."""

    num_classes: int
    counts: np.ndarray = None

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion_accumulate(cm: ConfusionMatrix, predicted: np.ndarray,
                         truth: np.ndarray) -> ConfusionMatrix:
    """Add one mask pair's pixel counts; ignore pixels are skipped."""
    predicted = np.asarray(predicted)
    truth = np.asarray(truth)
    if predicted.shape != truth.shape:
        raise DimensionError(f"confusion: predicted {predicted.shape} vs truth {truth.shape}")
    k = cm.num_classes
    scored = truth != IGNORE_INDEX
    t = truth[scored].astype(np.int64)
    p = predicted[scored].astype(np.int64)
    if ((t < 0) | (t >= k)).any() or ((p < 0) | (p >= k)).any():
        raise LabelError(f"confusion: labels outside [0, {k})")
    cm.counts += np.bincount(t * k + p, minlength=k * k).reshape(k, k)
    return cm


@dataclass
class MetricsReport:
    overall_accuracy: float
    per_class_f1: list
    mean_f1: float
    per_class_iou: list
    mean_iou: float
    dice: float
    class_ids: list
    excluded_class: Optional[int] = None


def compute_report(cm: ConfusionMatrix, exclude_class: Optional[int] = None) -> MetricsReport:
    """Scores from a confusion matrix.

    Excluding a class removes its row and column before scoring. A class
    with zero support and zero predictions scores F1 = IoU = 1 so absent
    classes do not zero out the means.
    """
    counts = cm.counts
    ids = list(range(cm.num_classes))
    if exclude_class is not None:
        if not 0 <= exclude_class < cm.num_classes:
            raise LabelError(f"exclude_class {exclude_class} outside [0, {cm.num_classes})")
        keep = [i for i in ids if i != exclude_class]
        counts = counts[np.ix_(keep, keep)]
        ids = keep
    total = int(counts.sum())
    if total == 0:
        raise EvaluationError("confusion matrix is empty after exclusion")

    tp = np.diag(counts).astype(np.float64)
    fp = counts.sum(axis=0) - tp
    fn = counts.sum(axis=1) - tp
    f1 = np.ones(len(ids))
    iou = np.ones(len(ids))
    seen = (tp + fp + fn) > 0
    f1[seen] = 2 * tp[seen] / (2 * tp[seen] + fp[seen] + fn[seen])
    iou[seen] = tp[seen] / (tp[seen] + fp[seen] + fn[seen])

    mean_f1 = float(np.mean(f1))
    return MetricsReport(
        overall_accuracy=float(tp.sum() / total),
        per_class_f1=[float(v) for v in f1],
        mean_f1=mean_f1,
        per_class_iou=[float(v) for v in iou],
        mean_iou=float(np.mean(iou)),
        dice=mean_f1,
        class_ids=ids,
        excluded_class=exclude_class,
    )


def brute_force_report(predicted_masks: Sequence[np.ndarray], truth_masks: Sequence[np.ndarray],
                       num_classes: int, exclude_class: Optional[int] = None) -> MetricsReport:
    """Independent oracle: recount TP/FP/FN per class by direct pixel
    enumeration over the mask pairs, no confusion matrix involved."""
    ids = [i for i in range(num_classes) if i != exclude_class]
    tp = {i: 0 for i in ids}
    fp = {i: 0 for i in ids}
    fn = {i: 0 for i in ids}
    correct = 0
    scored = 0
    for pred, true in zip(predicted_masks, truth_masks):
        for p, t in zip(np.asarray(pred).reshape(-1), np.asarray(true).reshape(-1)):
            p, t = int(p), int(t)
            if t == IGNORE_INDEX or t == exclude_class or p == exclude_class:
                continue
            scored += 1
            if p == t:
                correct += 1
                tp[t] += 1
            else:
                fp[p] += 1
                fn[t] += 1
    if scored == 0:
        raise EvaluationError("no pixels to score")
    f1, iou = [], []
    for i in ids:
        if tp[i] + fp[i] + fn[i] == 0:
            f1.append(1.0)
            iou.append(1.0)
        else:
            f1.append(2 * tp[i] / (2 * tp[i] + fp[i] + fn[i]))
            iou.append(tp[i] / (tp[i] + fp[i] + fn[i]))
    mean_f1 = float(np.mean(f1))
    return MetricsReport(overall_accuracy=correct / scored, per_class_f1=f1, mean_f1=mean_f1,
                         per_class_iou=iou, mean_iou=float(np.mean(iou)), dice=mean_f1,
                         class_ids=ids, excluded_class=exclude_class)


# -- graph-based segment detection ----------------------------------------------


@dataclass(frozen=True)
class SegmenterParams:
    """Greedy region-merging knobs: ``k`` scales the size-dependent merge
    threshold, ``min_size`` is the smallest surviving region."""

    k: float = 300.0
    min_size: int = 20


@dataclass
class SegmentMap:
    labels: np.ndarray    # [H,W] int, contiguous ids from 0
    boundary: np.ndarray  # [H,W] bool, pixels with a 4-neighbor of another id

    @property
    def num_segments(self) -> int:
        return int(self.labels.max()) + 1


class _UnionFind:
    __slots__ = ("parent", "size")

    def __init__(self, n: int):
        self.parent = np.arange(n)
        self.size = np.ones(n, dtype=np.int64)

    def find(self, x: int) -> int:
        parent = self.parent
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    def union(self, a: int, b: int) -> int:
        if self.size[a] < self.size[b]:
            a, b = b, a
        self.parent[b] = a
        self.size[a] += self.size[b]
        return a


def boundary_from_labels(labels: np.ndarray) -> np.ndarray:
    """Mark pixels having a 4-neighbor with a different segment id."""
    boundary = np.zeros(labels.shape, dtype=bool)
    boundary[:, :-1] |= labels[:, :-1] != labels[:, 1:]
    boundary[:, 1:] |= labels[:, 1:] != labels[:, :-1]
    boundary[:-1, :] |= labels[:-1, :] != labels[1:, :]
    boundary[1:, :] |= labels[1:, :] != labels[:-1, :]
    return boundary


def segment_detect(image: np.ndarray, params: SegmenterParams = SegmenterParams()) -> SegmentMap:
    """Deterministic graph-based greedy region merging.

    4-neighbor edges carry Euclidean RGB distances and are visited in
    ascending order; two regions merge while the edge weight stays under
    each region's internal difference plus k/|region|. Regions smaller than
    ``min_size`` are then absorbed across their cheapest edges.
    """
    image = np.asarray(image)
    if image.size == 0:
        raise ContractError("segment_detect: empty image")
    if image.ndim == 2:
        image = np.stack([image] * 3, axis=2)
    if image.ndim != 3 or image.shape[2] != 3:
        raise DimensionError(f"segment_detect: expected [H,W,3] or [H,W], got {image.shape}")
    h, w = image.shape[:2]
    flat = image.reshape(-1, 3).astype(np.float64)
    idx = np.arange(h * w).reshape(h, w)

    right_a = idx[:, :-1].reshape(-1)
    right_b = idx[:, 1:].reshape(-1)
    down_a = idx[:-1, :].reshape(-1)
    down_b = idx[1:, :].reshape(-1)
    edges_a = np.concatenate([right_a, down_a])
    edges_b = np.concatenate([right_b, down_b])
    weights = np.sqrt(((flat[edges_a] - flat[edges_b]) ** 2).sum(axis=1))
    order = np.argsort(weights, kind="stable")

    uf = _UnionFind(h * w)
    threshold = np.full(h * w, float(params.k))
    for e in order:
        a = uf.find(int(edges_a[e]))
        b = uf.find(int(edges_b[e]))
        if a == b:
            continue
        weight = float(weights[e])
        if weight <= threshold[a] and weight <= threshold[b]:
            root = uf.union(a, b)
            threshold[root] = weight + params.k / float(uf.size[root])

    if params.min_size > 1:
        for e in order:
            a = uf.find(int(edges_a[e]))
            b = uf.find(int(edges_b[e]))
            if a != b and (uf.size[a] < params.min_size or uf.size[b] < params.min_size):
                uf.union(a, b)

    roots = np.array([uf.find(i) for i in range(h * w)])
    _, labels = np.unique(roots, return_inverse=True)
    # renumber by first appearance in row-major order so ids are stable
    first_seen = {}
    remap = np.empty(labels.max() + 1, dtype=np.int64)
    next_id = 0
    for lab in labels:
        if lab not in first_seen:
            first_seen[lab] = next_id
            remap[lab] = next_id
            next_id += 1
    labels = remap[labels].reshape(h, w)
    return SegmentMap(labels=labels, boundary=boundary_from_labels(labels))


# -- SPIE -----------------------------------------------------------------------


def boundary_disagreement(boundary_a: np.ndarray, boundary_b: np.ndarray) -> float:
    """Fraction of pixels where two boundary maps differ, in [0, 1]."""
    if boundary_a.shape != boundary_b.shape:
        raise DimensionError(f"boundary maps {boundary_a.shape} vs {boundary_b.shape}")
    return float(np.mean(boundary_a != boundary_b))


@dataclass
class SpieReport:
    spie: float
    num_samples: int
    per_sample: list


def spie(model_masks: Sequence[np.ndarray], inputs: Sequence[np.ndarray],
         segmenter: SegmenterParams = SegmenterParams()) -> SpieReport:
    """Label-free score: segment the predicted-mask rendering and the raw
    input, compare their boundary maps, average the per-sample
    disagreement fractions. 0 for structurally perfect predictions, 1 for
    completely inaccurate ones."""
    model_masks = list(model_masks)
    inputs = list(inputs)
    if len(model_masks) != len(inputs):
        raise ContractError(f"spie: {len(model_masks)} masks vs {len(inputs)} inputs")
    if not inputs:
        raise ContractError("spie: need at least one sample")
    per_sample = []
    for rendered, raw in zip(model_masks, inputs):
        seg_pred = segment_detect(rendered, segmenter)
        seg_input = segment_detect(raw, segmenter)
        per_sample.append(boundary_disagreement(seg_pred.boundary, seg_input.boundary))
    return SpieReport(spie=float(np.mean(per_sample)), num_samples=len(per_sample),
                      per_sample=per_sample)


def improvement(base_spie: float, ours_spie: float) -> float:
    """Percentage improvement over a baseline score; positive is better.
    Reporting rounds to whole percent, the raw value is returned."""
    if base_spie <= 0:
        raise ContractError(f"improvement: baseline must be positive, got {base_spie}")
    return 100.0 * (base_spie - ours_spie) / base_spie


# -- serialization ----------------------------------------------------------------


def report_to_kv(report: MetricsReport, class_names: Optional[Sequence[str]] = None) -> str:
    """Human-readable key-value rendering with full float precision."""
    lines = [
        f"overall_accuracy = {report.overall_accuracy!r}",
        f"mean_f1 = {report.mean_f1!r}",
        f"mean_iou = {report.mean_iou!r}",
        f"dice = {report.dice!r}",
        f"excluded_class = {report.excluded_class}",
    ]
    for pos, class_id in enumerate(report.class_ids):
        name = class_names[class_id] if class_names else f"class_{class_id}"
        lines.append(f"f1[{name}] = {report.per_class_f1[pos]!r}")
        lines.append(f"iou[{name}] = {report.per_class_iou[pos]!r}")
    return "\n".join(lines) + "\n"


def report_to_csv(report: MetricsReport, class_names: Optional[Sequence[str]] = None) -> str:
    """One CSV row per class: id, name, f1, iou (full precision)."""
    out = io.StringIO()
    writer = csv.writer(out)
    writer.writerow(["class_id", "class_name", "f1", "iou"])
    for pos, class_id in enumerate(report.class_ids):
        name = class_names[class_id] if class_names else f"class_{class_id}"
        writer.writerow([class_id, name, repr(report.per_class_f1[pos]),
                         repr(report.per_class_iou[pos])])
    return out.getvalue()


def csv_to_class_scores(text: str) -> tuple[list, list]:
    """Parse :func:`report_to_csv` output back into (f1 list, iou list)."""
    rows = list(csv.reader(io.StringIO(text)))
    f1 = [float(row[2]) for row in rows[1:]]
    iou = [float(row[3]) for row in rows[1:]]
    return f1, iou


def spie_to_csv(report: SpieReport, ids: Optional[Sequence[str]] = None) -> str:
    """One CSV row per sample plus an aggregate row."""
    out = io.StringIO()
    writer = csv.writer(out)
    writer.writerow(["sample", "spie"])
    for i, value in enumerate(report.per_sample):
        writer.writerow([ids[i] if ids else str(i), repr(value)])
    writer.writerow(["mean", repr(report.spie)])
    return out.getvalue()
