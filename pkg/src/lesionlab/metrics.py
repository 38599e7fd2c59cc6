"""Voxel-wise Dice, lesion-wise detection scores and category statistics."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from enum import Enum

import numpy as np
from scipy.optimize import linear_sum_assignment

from .labeling import (
    DEFAULT_DISTANCE_BANDS,
    DEFAULT_SIZE_BANDS,
    category_names,
    dbl_encode,
    msl_encode,
)
from .volume import DEFAULT_CONNECTIVITY, as_binary, component_sizes, label_components

MINI_LESION_CUTOFF = 1000


class Matching(str, Enum):
    """How predicted and reference lesions are paired for detection counts."""

    ANY_OVERLAP = "any-overlap"
    ONE_TO_ONE = "one-to-one"


@dataclass(frozen=True)
class LesionMetrics:
    dice: float
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float

    @classmethod
    def from_counts(cls, dice, tp, fp, fn):
        precision = tp / (tp + fp) if tp + fp else 1.0
        recall = tp / (tp + fn) if tp + fn else 1.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        return cls(float(dice), int(tp), int(fp), int(fn), precision, recall, f1)

    def as_dict(self):
        return asdict(self)


SCORE_FIELDS = ("dice", "precision", "recall", "f1")


def _pair(pred, gt):
    pred = as_binary(pred, "pred")
    gt = as_binary(gt, "gt")
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    return pred, gt


def dice(pred, gt):
    """2|A∩B| / (|A| + |B|); 1.0 when both masks are empty."""
    pred, gt = _pair(pred, gt)
    denom = int(pred.sum()) + int(gt.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, gt).sum()) / denom


def overlap_pairs(pred_labels, gt_labels):
    """Unique ``(pred_id, gt_id)`` pairs sharing at least one voxel."""
    both = (pred_labels > 0) & (gt_labels > 0)
    pairs = np.stack([pred_labels[both], gt_labels[both]], axis=1)
    return np.unique(pairs, axis=0) if len(pairs) else pairs.reshape(0, 2)


def lesionwise_counts(pred, gt, conn=DEFAULT_CONNECTIVITY, matching=Matching.ANY_OVERLAP):
    """Lesion detection counts ``(tp, fp, fn)``.

    Under any-overlap matching a reference lesion is detected (tp) when
    any predicted voxel touches it and missed (fn) otherwise; a predicted
    lesion touching no reference voxel is a false positive. One predicted
    blob spanning two reference lesions therefore yields two tp.

    One-to-one matching instead pairs lesions through a maximum bipartite
    matching of the overlap graph; unmatched lesions on either side are
    fn / fp.
    """
    pred, gt = _pair(pred, gt)
    pl, n_pred = label_components(pred, conn)
    gl, n_gt = label_components(gt, conn)
    return counts_from_pairs(overlap_pairs(pl, gl), n_pred, n_gt, matching)


def counts_from_pairs(pairs, n_pred, n_gt, matching=Matching.ANY_OVERLAP):
    """``(tp, fp, fn)`` from the overlap pairs of labelled pred / gt masks."""
    matching = Matching(matching)
    if matching is Matching.ANY_OVERLAP:
        tp = len(np.unique(pairs[:, 1]))
        fp = n_pred - len(np.unique(pairs[:, 0]))
        return tp, fp, n_gt - tp
    if len(pairs) == 0:
        return 0, n_pred, n_gt
    _, p_idx = np.unique(pairs[:, 0], return_inverse=True)
    _, g_idx = np.unique(pairs[:, 1], return_inverse=True)
    cost = np.zeros((p_idx.max() + 1, g_idx.max() + 1))
    cost[p_idx, g_idx] = -1.0
    rows, cols = linear_sum_assignment(cost)
    tp = int((cost[rows, cols] < 0).sum())
    return tp, n_pred - tp, n_gt - tp


def evaluate_case(pred, gt, conn=DEFAULT_CONNECTIVITY, matching=Matching.ANY_OVERLAP):
    """Dice plus lesion-wise precision / recall / F1 for one case."""
    tp, fp, fn = lesionwise_counts(pred, gt, conn, matching)
    return LesionMetrics.from_counts(dice(pred, gt), tp, fp, fn)


def max_lesion_volume(mask, conn=DEFAULT_CONNECTIVITY):
    """Largest component volume of ``mask`` (0 when empty)."""
    labels, n = label_components(mask, conn)
    return int(component_sizes(labels, n)[1:].max()) if n else 0


def is_mini_lesion_case(gt, conn=DEFAULT_CONNECTIVITY, cutoff=MINI_LESION_CUTOFF):
    """True when every reference lesion has fewer than ``cutoff`` voxels."""
    return max_lesion_volume(gt, conn) < cutoff


def aggregate(metrics):
    """Unweighted mean of per-case scores; detection counts are summed."""
    metrics = list(metrics)
    if not metrics:
        raise ValueError("cannot aggregate an empty case set")
    out = {name: sum(getattr(m, name) for m in metrics) / len(metrics) for name in SCORE_FIELDS}
    for name in ("tp", "fp", "fn"):
        out[name] = int(sum(getattr(m, name) for m in metrics))
    out["n_cases"] = len(metrics)
    return out


@dataclass
class CaseResult:
    case_id: str
    metrics: LesionMetrics
    mini: bool


@dataclass
class EvaluationReport:
    cases: list
    # subset name -> aggregate dict; a subset with no cases is absent
    aggregates: dict


def evaluate_set(cases, conn=DEFAULT_CONNECTIVITY, matching=Matching.ANY_OVERLAP,
                 mini_only=False, executor=None):
    """Evaluate ``(case_id, pred, gt)`` triples.

    Per-case rows are sorted by case id. Aggregates are reported for the
    full set (``"all"``) and for the mini-lesion subset (``"mini"``, cases
    whose largest reference lesion is under 1000 voxels). With
    ``mini_only`` only mini-lesion cases are kept.
    """
    cases = sorted(cases, key=lambda c: c[0])
    if not cases:
        raise ValueError("empty case set")

    def run(case):
        case_id, pred, gt = case
        return CaseResult(case_id, evaluate_case(pred, gt, conn, matching),
                          is_mini_lesion_case(gt, conn))

    mapper = executor.map if executor is not None else map
    results = list(mapper(run, cases))
    if mini_only:
        results = [r for r in results if r.mini]
        if not results:
            raise ValueError("no case belongs to the mini-lesion subset")
    aggregates = {"all": aggregate(r.metrics for r in results)}
    mini = [r.metrics for r in results if r.mini]
    if mini:
        aggregates["mini"] = aggregate(mini)
    return EvaluationReport(results, aggregates)


@dataclass
class CategoryStats:
    strategy: str
    bands: tuple
    names: tuple
    lesion_counts: np.ndarray | None  # multi-size only
    voxel_counts: np.ndarray
    n_scans: int
    conn: int

    @property
    def mean_voxels_per_scan(self):
        return self.voxel_counts / self.n_scans

    def rows(self):
        for i, name in enumerate(self.names):
            yield {
                "category": name,
                "lesions": None if self.lesion_counts is None else int(self.lesion_counts[i]),
                "voxels": int(self.voxel_counts[i]),
                "mean_voxels_per_scan": float(self.mean_voxels_per_scan[i]),
            }


def category_stats(masks, strategy="msl", bands=None, conn=DEFAULT_CONNECTIVITY,
                   spacing=None, use_spacing=False):
    """Per-category lesion and voxel counts over a mask collection.

    For ``"msl"`` each lesion is counted once in its size category; for
    ``"dbl"`` only voxel counts are meaningful and the interesting figure
    is ``mean_voxels_per_scan``.
    """
    masks = list(masks)
    if not masks:
        raise ValueError("empty mask collection")
    if strategy not in ("msl", "dbl"):
        raise ValueError(f"unknown strategy {strategy!r}")
    if bands is None:
        bands = DEFAULT_SIZE_BANDS if strategy == "msl" else DEFAULT_DISTANCE_BANDS
    n_cat = len(bands) + 1
    voxels = np.zeros(n_cat, dtype=np.int64)
    lesions = np.zeros(n_cat, dtype=np.int64) if strategy == "msl" else None
    for mask in masks:
        if strategy == "msl":
            cats = msl_encode(mask, bands, conn)
            labels, n = label_components(mask, conn)
            if n:
                # every voxel of a component shares one category
                first = np.zeros(n + 1, dtype=np.int64)
                first[labels.ravel()] = cats.ravel()
                lesions += np.bincount(first[1:], minlength=n_cat + 1)[1:]
        else:
            cats = dbl_encode(mask, bands, spacing=spacing, use_spacing=use_spacing)
        voxels += np.bincount(cats.ravel(), minlength=n_cat + 1)[1:]
    return CategoryStats(strategy, tuple(bands), category_names(strategy, bands),
                         lesions, voxels, len(masks), conn)
