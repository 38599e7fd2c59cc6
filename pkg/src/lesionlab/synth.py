"""Synthetic lesion masks with MSL-like and DBL-like probability volumes.

The two probability volumes mimic the complementary failure modes of the
two labeling strategies: the multi-size map is confident on small
lesions but soft on the rim of large ones, the distance-based map is
sharp on large lesions but hesitant on small ones. Everything is driven
by one seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .labeling import DEFAULT_SIZE_BANDS, check_size_bands, dbl_encode, msl_encode
from .volume import label_components


class SynthPackingError(RuntimeError):
    """Requested lesions do not fit into the grid."""


@dataclass(frozen=True)
class SynthSpec:
    shape: tuple = (48, 48, 48)
    # number of lesions per size band (bands as in multi-size labeling)
    lesion_counts: tuple = (2, 1, 0, 0)
    bands: tuple = DEFAULT_SIZE_BANDS
    min_volume: int = 5
    max_volume: int = 20000
    spurious: int = 0  # false-positive blobs planted in the probability maps
    noise: float = 0.05
    corruption: float = 0.5
    leak: float = 0.1  # share of foreground mass spread over wrong classes
    dbl_bands: tuple = (2.0,)
    seed: int = 0
    max_attempts: int = 200

    def __post_init__(self):
        if len(self.shape) != 3 or any(int(n) < 1 for n in self.shape):
            raise ValueError(f"shape must be three positive integers, got {self.shape}")
        check_size_bands(self.bands)
        if len(self.lesion_counts) != len(self.bands) + 1:
            raise ValueError("need one lesion count per size band")
        if any(c < 0 for c in self.lesion_counts) or self.spurious < 0:
            raise ValueError("lesion counts must be non-negative")
        if not 1 <= self.min_volume < self.bands[0] or self.max_volume <= self.bands[-1]:
            raise ValueError("min/max volume must bracket the size bands")
        if not 0.0 <= self.corruption <= 1.0:
            raise ValueError("corruption must lie in [0, 1]")
        if not 0.0 <= self.leak < 1.0:
            raise ValueError("leak must lie in [0, 1)")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")

    def band_range(self, i):
        """Half-open volume interval ``[lo, hi)`` of size band ``i``."""
        edges = (self.min_volume, *self.bands, self.max_volume + 1)
        return edges[i], edges[i + 1]


def _ellipsoid(radii, offset):
    half = [int(math.ceil(r + 1)) for r in radii]
    grids = np.ogrid[tuple(slice(-h, h + 1) for h in half)]
    inside = sum(((g - o) / r) ** 2 for g, o, r in zip(grids, offset, radii)) <= 1.0
    # trim to the tight bounding box
    idx = np.argwhere(inside)
    if len(idx) == 0:
        return inside[:0, :0, :0]
    lo, hi = idx.min(0), idx.max(0) + 1
    return inside[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]


def _lesion_shape(lo, hi, rng, max_tries=50):
    """A 6-connected voxelised ellipsoid whose volume lies in ``[lo, hi)``."""
    for _ in range(max_tries):
        target = math.exp(rng.uniform(math.log(lo), math.log(hi)))
        ratios = rng.uniform(0.7, 1.3, size=3)
        ratios /= np.cbrt(ratios.prod())
        offset = rng.uniform(-0.5, 0.5, size=3)
        # bisection on the scale; voxel count is monotone in it
        a, b = 0.3, 2.0 * np.cbrt(3 * hi / (4 * math.pi)) + 2.0
        shape = None
        for _ in range(40):
            mid = 0.5 * (a + b)
            cand = _ellipsoid(ratios * mid, offset)
            n = int(cand.sum())
            if lo <= n < hi:
                shape = cand
                if n < target:
                    a = mid
                else:
                    b = mid
            elif n < lo:
                a = mid
            else:
                b = mid
        if shape is not None and label_components(shape, 6)[1] == 1:
            return shape
    raise SynthPackingError(f"could not shape a lesion with volume in [{lo}, {hi})")


def _place(occupied, shape, rng, attempts, gap=2):
    grid = occupied.shape
    room = [n - s - 2 for n, s in zip(grid, shape.shape)]
    if any(r < 0 for r in room):
        return None
    for _ in range(attempts):
        corner = [1 + int(rng.integers(0, r + 1)) for r in room]
        sl = tuple(slice(c - gap, c + s + gap) for c, s in zip(corner, shape.shape))
        sl = tuple(slice(max(s.start, 0), s.stop) for s in sl)
        if occupied[sl].any():
            continue
        return tuple(slice(c, c + s) for c, s in zip(corner, shape.shape))
    return None


def plant_lesions(spec, rng):
    """Binary mask with non-touching ellipsoidal lesions; largest placed first."""
    shape = tuple(int(n) for n in spec.shape)
    requests = [
        spec.band_range(i)
        for i in reversed(range(len(spec.lesion_counts)))
        for _ in range(spec.lesion_counts[i])
    ]
    mask = np.zeros(shape, dtype=bool)
    for lo, hi in requests:
        blob = _lesion_shape(lo, hi, rng)
        where = _place(mask, blob, rng, spec.max_attempts)
        if where is None:
            raise SynthPackingError(
                f"no room for a lesion of {int(blob.sum())} voxels in a {shape} grid"
            )
        mask[where] |= blob
    return mask


def _class_volume(fg, categories, n_classes, leak):
    """Split foreground mass over classes; class 0 takes the remainder."""
    probs = np.zeros(fg.shape + (n_classes + 1,), dtype=np.float64)
    cats = np.where(categories > 0, categories, 1).astype(np.intp)
    if n_classes == 1:
        probs[..., 1] = fg
    else:
        probs[..., 1:] = (fg * leak / (n_classes - 1))[..., None]
        np.put_along_axis(probs, cats[..., None], (fg * (1 - leak))[..., None], axis=-1)
    probs[..., 0] = 1.0 - probs[..., 1:].sum(axis=-1)
    return probs


def synth_generate(spec):
    """Generate ``(gt, msl_probs, dbl_probs)`` for ``spec``.

    ``gt`` is a uint8 mask; the probability volumes have shape
    ``(*spec.shape, C + 1)`` with class 0 the background.
    """
    rng = np.random.default_rng(spec.seed)
    gt = plant_lesions(spec, rng)
    c = spec.corruption

    labels, n = label_components(gt, 26)
    sizes = np.bincount(labels.ravel(), minlength=n + 1)
    rim = dbl_encode(gt, (2.0,)) == 1

    fg_msl = np.zeros(gt.shape)
    fg_dbl = np.zeros(gt.shape)
    touched = gt.copy()
    for i in range(1, n + 1):
        comp = labels == i
        if sizes[i] < 1000:
            fg_msl[comp] = rng.uniform(0.8, 0.99)
            fg_dbl[comp] = rng.uniform(0.95 - 0.9 * c, 0.95)
        else:
            fg_dbl[comp] = 0.95
            fg_msl[comp] = 0.95
            fg_msl[comp & rim] = rng.uniform(0.95 - 0.9 * c, 0.95)
        halo = ndimage.binary_dilation(comp, ndimage.generate_binary_structure(3, 1)) & ~gt
        fg_msl[halo] = rng.uniform(0.1, 0.1 + 0.6 * c)
        fg_dbl[halo] = rng.uniform(0.1, 0.1 + 0.6 * c)
        touched |= halo

    for _ in range(spec.spurious):
        blob = _lesion_shape(3, 40, rng)
        where = _place(touched, blob, rng, spec.max_attempts)
        if where is None:
            raise SynthPackingError("no room for a spurious blob")
        region = np.zeros(gt.shape, dtype=bool)
        region[where] = blob
        for fg in (fg_msl, fg_dbl):
            if rng.random() < 0.5:
                fg[region] = rng.uniform(0.5, 0.8)
        touched |= region

    if spec.noise > 0:
        for fg in (fg_msl, fg_dbl):
            jitter = rng.normal(0.0, spec.noise, size=gt.shape)
            fg[touched] = np.clip(fg[touched] + jitter[touched], 0.0, 1.0)

    msl_probs = _class_volume(fg_msl, msl_encode(gt, spec.bands), len(spec.bands) + 1, spec.leak)
    dbl_probs = _class_volume(fg_dbl, dbl_encode(gt, spec.dbl_bands), len(spec.dbl_bands) + 1,
                              spec.leak)
    return gt.astype(np.uint8), msl_probs, dbl_probs


def synth_case_specs(n_cases, shape=(48, 48, 48), seed=0, spurious=3, noise=0.05, corruption=0.5):
    """Specs for a varied case set: even cases hold only lesions under
    1000 voxels, odd cases add a medium lesion."""
    rng = np.random.default_rng(seed)
    specs = []
    for i in range(n_cases):
        tiny, small = int(rng.integers(1, 4)), int(rng.integers(0, 3))
        medium = i % 2
        specs.append(SynthSpec(
            shape=shape, lesion_counts=(tiny, small, medium, 0), spurious=spurious,
            noise=noise, corruption=corruption, seed=int(rng.integers(0, 2**31 - 1)),
        ))
    return specs
