"""Dense voxel grids, lesion components and distance-to-background.

Arrays are indexed ``[x, y, z]``. The linear index of voxel ``(x, y, z)``
is ``x + nx * (y + ny * z)`` (x fastest), which is also the on-disk
order of NIfTI payloads.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from ._edt import squared_edt

CONNECTIVITIES = (6, 18, 26)
DEFAULT_CONNECTIVITY = 26

# ndimage.generate_binary_structure rank per neighbourhood size
_STRUCTURE_RANK = {6: 1, 18: 2, 26: 3}


@dataclass
class VoxelGrid:
    """A 3D scalar field (or 4D class-probability field) with voxel spacing.

    ``data`` has shape ``(nx, ny, nz)`` or ``(nx, ny, nz, channels)``.
    ``header`` carries source-file fields (affine codes etc.) so that
    written outputs overlay their inputs.
    """

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    affine: np.ndarray | None = None
    header: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim not in (3, 4):
            raise ValueError(f"expected a 3D or 4D array, got shape {self.data.shape}")
        if any(n < 1 for n in self.data.shape):
            raise ValueError(f"grid dimensions must be positive, got {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(not s > 0 for s in self.spacing):
            raise ValueError(f"spacing must be three positive numbers, got {self.spacing}")
        if self.affine is None:
            self.affine = np.diag([*self.spacing, 1.0])
        else:
            self.affine = np.asarray(self.affine, dtype=np.float64).reshape(4, 4)

    @property
    def shape(self):
        return self.data.shape[:3]

    @property
    def n_channels(self):
        """Number of class channels, or ``None`` for a scalar grid."""
        return self.data.shape[3] if self.data.ndim == 4 else None

    def flat(self):
        """Payload flattened in x-fastest order."""
        return self.data.ravel(order="F")


@dataclass(frozen=True)
class LesionComponent:
    """One connected lesion: voxel indices (``(n, 3)`` array), volume and bbox."""

    id: int
    voxels: np.ndarray = field(repr=False)
    bbox_min: tuple
    bbox_max: tuple

    @property
    def volume(self):
        return len(self.voxels)


def check_connectivity(conn):
    if conn not in CONNECTIVITIES:
        raise ValueError(f"connectivity must be one of {CONNECTIVITIES}, got {conn!r}")
    return int(conn)


def structure(conn):
    """3x3x3 boolean neighbourhood for ``conn``."""
    return ndimage.generate_binary_structure(3, _STRUCTURE_RANK[check_connectivity(conn)])


def as_binary(mask, name="mask"):
    """Validate a binary 3D array and return it as ``bool``."""
    mask = np.asarray(mask)
    if mask.ndim != 3:
        raise ValueError(f"{name} must be 3D, got shape {mask.shape}")
    if mask.dtype == bool:
        return mask
    if mask.size and not np.isin(mask, (0, 1)).all():
        raise ValueError(f"{name} is not binary: values outside {{0, 1}}")
    return mask.astype(bool)


def linear_index_order(shape):
    """Linear (x-fastest) index of every voxel, as an array of ``shape``."""
    return np.arange(int(np.prod(shape))).reshape(shape, order="F")


def label_components(mask, conn=DEFAULT_CONNECTIVITY):
    """Label connected foreground components.

    Returns ``(labels, n)`` where ``labels`` is an int32 array with ids
    ``1..n`` assigned in ascending order of each component's minimum
    linear (x-fastest) index, and 0 on background.
    """
    mask = as_binary(mask)
    raw, n = ndimage.label(mask, structure=structure(conn))
    if n == 0:
        return raw.astype(np.int32), 0
    # first occurrence in x-fastest order == minimum linear index
    flat = raw.ravel(order="F")
    ids, first = np.unique(flat, return_index=True)
    keep = ids > 0
    order = np.argsort(first[keep], kind="stable")
    remap = np.zeros(n + 1, dtype=np.int32)
    remap[ids[keep][order]] = np.arange(1, n + 1, dtype=np.int32)
    return remap[raw], n


def component_sizes(labels, n):
    """Voxel count of each label ``1..n`` (index 0 holds the background count)."""
    return np.bincount(labels.ravel(), minlength=n + 1)


def connected_components(mask, conn=DEFAULT_CONNECTIVITY):
    """Return the connected lesions of ``mask`` as ``LesionComponent`` objects.

    Parameters
    ----------
    mask : array_like
        Binary 3D array indexed ``[x, y, z]``.
    conn : {6, 18, 26}
        Neighbourhood defining adjacency.

    Returns
    -------
    list of LesionComponent
        Ordered by id; ids follow ascending minimum linear index.
    """
    labels, n = label_components(mask, conn)
    if n == 0:
        return []
    slices = ndimage.find_objects(labels)
    out = []
    for i, sl in enumerate(slices, start=1):
        offset = np.array([s.start for s in sl])
        local = np.argwhere(labels[sl] == i) + offset
        # x-fastest ordering of the voxel list
        local = local[np.lexsort((local[:, 0], local[:, 1], local[:, 2]))]
        out.append(
            LesionComponent(
                id=i,
                voxels=local,
                bbox_min=tuple(int(s.start) for s in sl),
                bbox_max=tuple(int(s.stop) - 1 for s in sl),
            )
        )
    return out


def component_volumes(components):
    """Map component id to voxel count."""
    return {c.id: c.volume for c in components}


def distance_to_background(mask, spacing=None, use_spacing=False):
    """Exact Euclidean distance from each lesion voxel to the nearest background voxel.

    Voxels beyond the grid border count as background, as if the mask were
    zero-padded by one layer. Distances are in voxel units unless
    ``use_spacing`` is set, in which case ``spacing`` (mm per voxel along
    x, y, z) is applied. Background voxels get 0.
    """
    mask = as_binary(mask)
    if use_spacing:
        if spacing is None:
            raise ValueError("use_spacing requires a spacing")
        step = tuple(float(s) for s in spacing)
        if len(step) != 3 or any(not s > 0 for s in step):
            raise ValueError(f"spacing must be three positive numbers, got {spacing}")
    else:
        step = (1.0, 1.0, 1.0)
    padded = np.pad(mask, 1, constant_values=False)
    sq = squared_edt(padded, step)[1:-1, 1:-1, 1:-1]
    return np.sqrt(sq)
