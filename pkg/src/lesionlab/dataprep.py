"""Fold assignment and training-patch sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_PATCH_SIZE = (128, 128, 128)


@dataclass(frozen=True)
class CaseRecord:
    case_id: str
    total_lesion_volume: int
    image_path: str | None = None
    mask_path: str | None = None


def size_balanced_split(cases, k=5, seed=0):
    """Assign cases to ``k`` folds with balanced counts and lesion volume.

    Cases are visited largest total lesion volume first (equal volumes in
    a seed-dependent order) and each goes to the eligible fold with the
    smallest running volume, ties broken by fewer cases then lower fold
    index. A fold is eligible while it holds fewer than ``n // k`` cases,
    or exactly ``n // k`` when fewer than ``n % k`` folds have already
    taken an extra case; so fold sizes never differ by more than one.

    Returns a dict ``case_id -> fold``.
    """
    cases = list(cases)
    n = len(cases)
    if k < 2:
        raise ValueError(f"k must be at least 2, got {k}")
    if k > n:
        raise ValueError(f"cannot split {n} cases into {k} folds")
    ids = [c.case_id for c in cases]
    if len(set(ids)) != n:
        raise ValueError("case ids must be unique")
    if any(c.total_lesion_volume < 0 for c in cases):
        raise ValueError("lesion volumes must be non-negative")

    rng = np.random.default_rng(seed)
    shuffled = [cases[i] for i in rng.permutation(n)]
    ordered = sorted(shuffled, key=lambda c: -c.total_lesion_volume)  # stable

    base, extra = divmod(n, k)
    totals = [0] * k
    counts = [0] * k
    assignment = {}
    for case in ordered:
        oversized = sum(c > base for c in counts)
        eligible = [
            f for f in range(k)
            if counts[f] < base or (counts[f] == base and oversized < extra)
        ]
        fold = min(eligible, key=lambda f: (totals[f], counts[f], f))
        assignment[case.case_id] = fold
        totals[fold] += case.total_lesion_volume
        counts[fold] += 1
    return assignment


def fold_totals(cases, assignment, k):
    """Summed lesion volume per fold."""
    totals = np.zeros(k, dtype=np.int64)
    for c in cases:
        totals[assignment[c.case_id]] += c.total_lesion_volume
    return totals


@dataclass
class Patch:
    image: np.ndarray
    mask: np.ndarray
    corner: tuple  # in coordinates of the (possibly padded) grid
    center_voxel: tuple | None = None  # lesion voxel the patch was centred on


@dataclass
class PatchPair:
    random: Patch
    lesion: Patch


def _pad_to(arr, size, value):
    pad = [(0, max(0, p - n)) for n, p in zip(arr.shape, size)]
    if not any(after for _, after in pad):
        return arr
    return np.pad(arr, pad, constant_values=value)


def _crop(arr, corner, size):
    return arr[tuple(slice(c, c + p) for c, p in zip(corner, size))].copy()


def check_patch_size(size):
    size = tuple(int(p) for p in size)
    if len(size) != 3 or any(p < 1 for p in size):
        raise ValueError(f"patch size must be three positive integers, got {size}")
    return size


def sample_patch_pair(image, mask, size=DEFAULT_PATCH_SIZE, rng=None):
    """Draw one random crop and one lesion-centred crop.

    The random patch's corner is uniform over all positions where the
    patch fits. The lesion patch centres a lesion voxel, chosen uniformly
    among all lesion voxels, at index ``size // 2`` and is then clamped to
    stay inside the grid; with an empty mask it is another random crop.
    Grids smaller than the patch are padded at the high end with zeros.

    ``rng`` is a ``numpy.random.Generator`` (or a seed) owned by the caller.
    """
    image = np.asarray(image)
    mask = np.asarray(mask)
    if image.shape[:3] != mask.shape[:3]:
        raise ValueError(f"image {image.shape} and mask {mask.shape} shapes differ")
    size = check_patch_size(size)
    rng = np.random.default_rng(rng)

    image = _pad_to(image, size, 0)
    mask = _pad_to(mask, size, 0)
    limits = [n - p for n, p in zip(mask.shape, size)]

    def random_corner():
        return tuple(int(rng.integers(0, hi + 1)) for hi in limits)

    first = random_corner()
    random_patch = Patch(_crop(image, first, size), _crop(mask, first, size), first)

    lesion = np.flatnonzero(mask.ravel(order="F"))
    if len(lesion) == 0:
        corner, center = random_corner(), None
    else:
        pick = lesion[rng.integers(0, len(lesion))]
        center = tuple(int(c) for c in np.unravel_index(pick, mask.shape, order="F"))
        corner = tuple(
            int(min(max(c - p // 2, 0), hi)) for c, p, hi in zip(center, size, limits)
        )
    lesion_patch = Patch(_crop(image, corner, size), _crop(mask, corner, size), corner, center)
    return PatchPair(random_patch, lesion_patch)
