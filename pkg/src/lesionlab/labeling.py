"""Multi-size and distance-based relabeling of binary lesion masks.

Category 0 is always background. Multi-size categories run smallest
lesion first; distance categories run nearest-to-boundary first.
"""

from __future__ import annotations

import numpy as np

from .volume import (
    DEFAULT_CONNECTIVITY,
    as_binary,
    component_sizes,
    distance_to_background,
    label_components,
)

DEFAULT_SIZE_BANDS = (100, 1000, 10000)
DEFAULT_DISTANCE_BANDS = (2.0,)
PROB_TOLERANCE = 1e-5

SIZE_NAMES = {4: ("tiny", "small", "medium", "large")}
DISTANCE_NAMES = {
    1: ("lesion",),
    2: ("boundary", "interior"),
    3: ("boundary", "transition", "interior"),
}


def check_size_bands(bands):
    bands = tuple(int(b) for b in bands)
    if not bands:
        raise ValueError("size bands need at least one threshold")
    if bands[0] < 1 or any(b >= c for b, c in zip(bands, bands[1:])):
        raise ValueError(f"size bands must be positive and strictly increasing, got {bands}")
    return bands


def check_distance_bands(bands):
    bands = tuple(float(b) for b in bands)
    if any(not b > 0 for b in bands) or any(b >= c for b, c in zip(bands, bands[1:])):
        raise ValueError(f"distance bands must be positive and strictly increasing, got {bands}")
    return bands


def category_names(strategy, bands):
    """Human-readable names of categories ``1..C``."""
    n = len(bands) + 1
    names = (SIZE_NAMES if strategy == "msl" else DISTANCE_NAMES).get(n)
    return names if names else tuple(f"class_{i}" for i in range(1, n + 1))


def size_category(volumes, bands=DEFAULT_SIZE_BANDS):
    """Category of a lesion by volume: 1 + number of thresholds <= volume."""
    bands = check_size_bands(bands)
    return 1 + np.searchsorted(np.asarray(bands), volumes, side="right")


def msl_encode(mask, bands=DEFAULT_SIZE_BANDS, conn=DEFAULT_CONNECTIVITY):
    """Label every lesion voxel by the size band of its connected component.

    With the default thresholds ``(100, 1000, 10000)`` a lesion with
    ``|K| < 100`` becomes 1 (tiny), ``100 <= |K| < 1000`` 2 (small),
    ``1000 <= |K| < 10000`` 3 (medium) and anything larger 4 (large).

    Returns a uint8 array of the mask's shape.
    """
    bands = check_size_bands(bands)
    if len(bands) > 254:
        raise ValueError("too many size bands for uint8 labels")
    labels, n = label_components(mask, conn)
    per_label = np.zeros(n + 1, dtype=np.uint8)
    if n:
        per_label[1:] = size_category(component_sizes(labels, n)[1:], bands)
    return per_label[labels]


def dbl_encode(mask, bands=DEFAULT_DISTANCE_BANDS, spacing=None, use_spacing=False):
    """Label every lesion voxel by its distance to the nearest non-lesion voxel.

    A voxel at distance ``d`` gets ``1 + #{t in bands : t < d}``; with the
    default ``(2,)`` that is 1 (boundary) for ``d <= 2`` and 2 (interior)
    otherwise. Empty ``bands`` gives plain binary labels.
    """
    bands = check_distance_bands(bands)
    if len(bands) > 254:
        raise ValueError("too many distance bands for uint8 labels")
    mask = as_binary(mask)
    dist = distance_to_background(mask, spacing=spacing, use_spacing=use_spacing)
    cat = 1 + np.searchsorted(np.asarray(bands, dtype=np.float64), dist, side="left")
    return np.where(mask, cat, 0).astype(np.uint8)


def category_to_binary(categories):
    """Foreground wherever the category label is positive."""
    return np.asarray(categories) > 0


def check_probabilities(probs, tol=PROB_TOLERANCE, renormalize=False):
    """Validate a ``(..., C+1)`` class-probability array.

    Entries must lie in ``[0, 1]`` (within ``tol``) and sum to 1 within
    ``tol`` per voxel. With ``renormalize`` the per-voxel sums are scaled
    to exactly 1 instead of being checked.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim < 2 or probs.shape[-1] < 2:
        raise ValueError(f"expected a class axis with at least 2 channels, got shape {probs.shape}")
    if probs.size and (probs.min() < -tol or probs.max() > 1 + tol):
        raise ValueError("class probabilities outside [0, 1]")
    sums = probs.sum(axis=-1)
    if renormalize:
        if (sums <= 0).any():
            raise ValueError("cannot renormalize voxels whose probabilities sum to 0")
        return np.clip(probs / sums[..., None], 0.0, 1.0)
    if sums.size and np.abs(sums - 1).max() > tol:
        raise ValueError(
            f"class probabilities do not sum to 1 (max deviation {np.abs(sums - 1).max():.3g})"
        )
    return probs


def foreground_probability(probs, tol=PROB_TOLERANCE, renormalize=False):
    """Per-voxel lesion probability: the summed probability of all foreground classes."""
    probs = check_probabilities(probs, tol=tol, renormalize=renormalize)
    return np.clip(probs[..., 1:].sum(axis=-1), 0.0, 1.0)


def binarize(fg, threshold=0.5):
    """Foreground where ``fg > threshold`` (strict)."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    return np.asarray(fg) > threshold
