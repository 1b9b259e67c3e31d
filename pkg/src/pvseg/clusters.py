"""Connected-component statistics for cluster-wise PVS quantification."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .volume import IGNORE, LabelMap, require_same_grid

#: 26-connectivity matches tubular PVS running obliquely through the grid.
DEFAULT_CONNECTIVITY = 26

_STRUCTURE_RANK = {6: 1, 18: 2, 26: 3}


@dataclass(frozen=True)
class ClusterStats:
    """Cluster decomposition of one class in a label map."""

    class_id: int
    connectivity: int
    cluster_count: int
    voxel_count: int
    cluster_sizes: Tuple[int, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if sum(self.cluster_sizes) != self.voxel_count or len(self.cluster_sizes) != self.cluster_count:
            raise ValueError("inconsistent cluster statistics")

    def to_dict(self) -> dict:
        return {
            "class_id": self.class_id,
            "connectivity": self.connectivity,
            "cluster_count": self.cluster_count,
            "voxel_count": self.voxel_count,
            "cluster_sizes": list(self.cluster_sizes),
        }


def connected_components(labels: LabelMap, class_id: int, connectivity: int = DEFAULT_CONNECTIVITY) -> ClusterStats:
    """Decompose ``labels == class_id`` into connected clusters.

    ``connectivity`` is 6 (faces), 18 (faces+edges) or 26 (full neighborhood).
    The result does not depend on voxel scan order.
    """
    if connectivity not in _STRUCTURE_RANK:
        raise ValueError(f"connectivity must be one of {sorted(_STRUCTURE_RANK)}, got {connectivity}")
    if class_id == IGNORE:
        raise ValueError("ignore label has no cluster decomposition")
    mask = labels.data == class_id
    structure = ndimage.generate_binary_structure(3, _STRUCTURE_RANK[connectivity])
    labelled, n = ndimage.label(mask, structure=structure)
    if n == 0:
        return ClusterStats(class_id, connectivity, 0, 0, ())
    sizes = np.bincount(labelled.ravel())[1:]
    sizes = tuple(sorted(int(s) for s in sizes))
    return ClusterStats(class_id, connectivity, n, int(mask.sum()), sizes)


def cluster_count_vector(
    cases: Sequence[Tuple[LabelMap, LabelMap]],
    class_id: int,
    connectivity: int = DEFAULT_CONNECTIVITY,
) -> Tuple[List[int], List[int]]:
    """Per-case (predicted, reference) cluster counts for agreement statistics."""
    if not cases:
        raise ValueError("empty case list")
    pred_counts, ref_counts = [], []
    for pred, ref in cases:
        require_same_grid(pred, ref, "pred/ref label grids")
        pred_counts.append(connected_components(pred, class_id, connectivity).cluster_count)
        ref_counts.append(connected_components(ref, class_id, connectivity).cluster_count)
    return pred_counts, ref_counts
