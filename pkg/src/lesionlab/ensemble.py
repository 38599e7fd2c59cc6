"""Size-gated fusion of two foreground maps and small-lesion filtering."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

from .labeling import binarize
from .metrics import (
    LesionMetrics,
    Matching,
    aggregate,
    counts_from_pairs,
    is_mini_lesion_case,
    overlap_pairs,
)
from .volume import DEFAULT_CONNECTIVITY, check_connectivity, component_sizes, label_components

DEFAULT_LAMBDAS = tuple(round(0.1 * i, 10) for i in range(11))
DEFAULT_PP_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 10) for i in range(10))

# Postprocessing thresholds tuned for single-strategy predictions
# (labeling strategy, training loss) -> p_t
VANILLA_PP_THRESHOLDS = {
    ("msl", "dice+ce"): 0.95,
    ("msl", "dice+focal"): 0.9,
    ("dbl", "dice+ce"): 0.7,
    ("dbl", "dice+focal"): 0.8,
}

SWEEP_COLUMNS = ("lambda", "p_t", "subset", "dice", "f1", "precision", "recall", "rank")
RANKED_METRICS = ("dice", "f1")


@dataclass(frozen=True)
class EnsembleConfig:
    mixing_rate: float = 0.8
    small_cutoff: int = 1000
    binarize_threshold: float = 0.5
    conn: int = DEFAULT_CONNECTIVITY

    def __post_init__(self):
        if not 0.0 <= self.mixing_rate <= 1.0:
            raise ValueError(f"mixing rate must lie in [0, 1], got {self.mixing_rate}")
        if int(self.small_cutoff) != self.small_cutoff or self.small_cutoff < 1:
            raise ValueError(f"small cutoff must be a positive integer, got {self.small_cutoff}")
        if not 0.0 <= self.binarize_threshold <= 1.0:
            raise ValueError(f"binarize threshold must lie in [0, 1], got {self.binarize_threshold}")
        check_connectivity(self.conn)


@dataclass(frozen=True)
class PostprocessConfig:
    prob_threshold: float = 0.75
    small_cutoff: int = 1000
    conn: int = DEFAULT_CONNECTIVITY

    def __post_init__(self):
        if not 0.0 <= self.prob_threshold <= 1.0:
            raise ValueError(f"probability threshold must lie in [0, 1], got {self.prob_threshold}")
        if int(self.small_cutoff) != self.small_cutoff or self.small_cutoff < 1:
            raise ValueError(f"small cutoff must be a positive integer, got {self.small_cutoff}")
        check_connectivity(self.conn)


def _same_shape(a, b, what):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch between {what}: {a.shape} vs {b.shape}")


def small_candidate_region(p_msl, p_dbl, cfg=EnsembleConfig()):
    """Voxels of union components (of both binarized maps) smaller than the cutoff."""
    union = binarize(p_msl, cfg.binarize_threshold) | binarize(p_dbl, cfg.binarize_threshold)
    labels, n = label_components(union, cfg.conn)
    small = component_sizes(labels, n) < cfg.small_cutoff
    small[0] = False
    return small[labels]


def ensemble(p_msl, p_dbl, cfg=EnsembleConfig()):
    """Fuse multi-size and distance-based foreground probabilities.

    Candidate lesions are the connected components of the union of both
    binarized maps. Inside a candidate with fewer than ``small_cutoff``
    voxels the fused probability is
    ``mixing_rate * p_msl + (1 - mixing_rate) * p_dbl``; everywhere else it
    is ``p_dbl`` unchanged.

    Returns
    -------
    fused : ndarray of float64
    mask : ndarray of bool
        ``fused > binarize_threshold``.
    """
    p_msl = np.asarray(p_msl, dtype=np.float64)
    p_dbl = np.asarray(p_dbl, dtype=np.float64)
    _same_shape(p_msl, p_dbl, "MSL and DBL maps")
    region = small_candidate_region(p_msl, p_dbl, cfg)
    lam = cfg.mixing_rate
    fused = p_dbl.copy()
    fused[region] = lam * p_msl[region] + (1.0 - lam) * p_dbl[region]
    return fused, binarize(fused, cfg.binarize_threshold)


def _component_peaks(mask, fg, conn):
    labels, n = label_components(mask, conn)
    sizes = component_sizes(labels, n)
    peaks = np.full(n + 1, -np.inf)
    if n:
        peaks[1:] = ndimage.maximum(fg, labels, np.arange(1, n + 1))
    return labels, sizes, peaks


def _keep(sizes, peaks, cfg):
    keep = (sizes >= cfg.small_cutoff) | (peaks >= cfg.prob_threshold)
    keep[0] = False
    return keep


def postprocess(mask, fg, cfg=PostprocessConfig()):
    """Drop small predicted lesions that never reach the confidence threshold.

    A component with fewer than ``small_cutoff`` voxels is removed when its
    peak probability is strictly below ``prob_threshold``; larger
    components are always kept.
    """
    mask = np.asarray(mask)
    fg = np.asarray(fg, dtype=np.float64)
    _same_shape(mask, fg, "mask and probability map")
    labels, sizes, peaks = _component_peaks(mask, fg, cfg.conn)
    return _keep(sizes, peaks, cfg)[labels]


@dataclass
class SweepCase:
    case_id: str
    p_msl: np.ndarray
    p_dbl: np.ndarray
    gt: np.ndarray


@dataclass
class SweepResult:
    rows: list  # dicts keyed by SWEEP_COLUMNS
    best: tuple  # (lambda, p_t)
    subsets: tuple  # subsets that took part in ranking


def average_ranks(table, subsets, metrics=RANKED_METRICS):
    """Mean rank of each (lambda, p_t) cell across subset x metric columns.

    ``table`` maps ``(lam, p_t) -> {subset: {metric: value}}``. Within a
    column the highest score gets rank 1; ties share their average rank.
    """
    cells = list(table)
    ranks = np.zeros(len(cells))
    columns = 0
    for subset in subsets:
        for metric in metrics:
            values = np.array([table[c][subset][metric] for c in cells])
            ranks += rankdata(-values, method="average")
            columns += 1
    return dict(zip(cells, ranks / columns))


def sweep(cases, lambdas=DEFAULT_LAMBDAS, thresholds=DEFAULT_PP_THRESHOLDS,
          small_cutoff=1000, binarize_threshold=0.5, conn=DEFAULT_CONNECTIVITY,
          matching=Matching.ANY_OVERLAP, executor=None):
    """Grid search over mixing rate and postprocessing threshold.

    For every ``(lambda, p_t)`` each case goes through ensemble, then
    postprocess on the fused map, then evaluation; scores are averaged
    over all cases (subset ``"all"``) and over mini-lesion cases
    (``"mini"``). The best cell has the lowest average rank over Dice and
    F1 in every subset present; ties go to the first cell in grid order.
    """
    cases = sorted(cases, key=lambda c: c.case_id)
    if not cases:
        raise ValueError("empty case set")
    lambdas = [float(x) for x in lambdas]
    thresholds = [float(x) for x in thresholds]
    if not lambdas or not thresholds:
        raise ValueError("sweep grids must be non-empty")
    for t in thresholds:
        PostprocessConfig(t, small_cutoff, conn)

    mini = {c.case_id: is_mini_lesion_case(c.gt, conn) for c in cases}
    subsets = ("mini", "all") if any(mini.values()) else ("all",)

    references = {}
    for c in cases:
        gl, n_gt = label_components(c.gt, conn)
        references[c.case_id] = (gl, n_gt, int(np.count_nonzero(gl)))

    def run(job):
        lam, case = job
        gl, n_gt, gt_total = references[case.case_id]
        cfg = EnsembleConfig(lam, small_cutoff, binarize_threshold, conn)
        fused, mask = ensemble(case.p_msl, case.p_dbl, cfg)
        labels, sizes, peaks = _component_peaks(mask, fused, conn)
        pairs = overlap_pairs(labels, gl)
        hits = np.bincount(labels[gl > 0], minlength=len(sizes))
        out = []
        for t in thresholds:
            # dropping whole components leaves the others' labels valid
            keep = _keep(sizes, peaks, PostprocessConfig(t, small_cutoff, conn))
            denom = int(sizes[keep].sum()) + gt_total
            score = 2.0 * int(hits[keep].sum()) / denom if denom else 1.0
            kept_pairs = pairs[keep[pairs[:, 0]]]
            counts = counts_from_pairs(kept_pairs, int(keep.sum()), n_gt, matching)
            out.append(LesionMetrics.from_counts(score, *counts))
        return out

    jobs = [(lam, case) for lam in lambdas for case in cases]
    mapper = executor.map if executor is not None else map
    results = iter(mapper(run, jobs))

    table = {}
    for lam in lambdas:
        per_case = [next(results) for _ in cases]
        for j, t in enumerate(thresholds):
            scores = {"all": aggregate(m[j] for m in per_case)}
            if "mini" in subsets:
                scores["mini"] = aggregate(
                    m[j] for m, c in zip(per_case, cases) if mini[c.case_id]
                )
            table[(lam, t)] = scores

    ranks = average_ranks(table, subsets)
    best = min(table, key=lambda cell: ranks[cell])  # min() keeps the first of equals
    rows = []
    for (lam, t), scores in table.items():
        for subset in subsets:
            s = scores[subset]
            rows.append({
                "lambda": lam, "p_t": t, "subset": subset,
                "dice": s["dice"], "f1": s["f1"],
                "precision": s["precision"], "recall": s["recall"],
                "rank": float(ranks[(lam, t)]),
            })
    return SweepResult(rows, best, subsets)
