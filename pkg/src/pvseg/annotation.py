"""Label-scheme management: sparse-slice ignore masks, ROI retention, WMH merge."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Tuple

import numpy as np
from scipy import ndimage

from .volume import BACKGROUND, BG_PVS, IGNORE, WMH, WM_PVS, LabelMap, Volume, require_same_grid


@dataclass(frozen=True)
class LabelScheme:
    """Class-id assignment and the foreground set entering the dice average."""

    class_ids: Dict[str, int] = field(
        default_factory=lambda: {
            "background": BACKGROUND,
            "wm_pvs": WM_PVS,
            "bg_pvs": BG_PVS,
            "wmh": WMH,
            "ignore": IGNORE,
        }
    )
    foreground_ids: Tuple[int, ...] = (WM_PVS, BG_PVS)

    def __post_init__(self):
        ids = list(self.class_ids.values())
        if len(set(ids)) != len(ids):
            raise ValueError("class ids must be distinct")
        fg = tuple(self.foreground_ids)
        if self.class_ids.get("ignore", IGNORE) in fg:
            raise ValueError("ignore id cannot be a foreground class")
        if self.class_ids.get("background", BACKGROUND) in fg:
            raise ValueError("background cannot be a foreground class")
        object.__setattr__(self, "foreground_ids", fg)

    @property
    def ignore_id(self) -> int:
        return self.class_ids["ignore"]

    @property
    def num_classes(self) -> int:
        """Dense classes (background + labelled), excluding the ignore id."""
        return len([v for v in self.class_ids.values() if v != self.ignore_id])

    @staticmethod
    def pvs_only() -> "LabelScheme":
        """WM-PVS + BG-PVS scheme (no WMH class): 3 dense classes."""
        return LabelScheme(
            class_ids={"background": BACKGROUND, "wm_pvs": WM_PVS, "bg_pvs": BG_PVS, "ignore": IGNORE},
            foreground_ids=(WM_PVS, BG_PVS),
        )

    @staticmethod
    def pvs_wmh() -> "LabelScheme":
        """WM-PVS + BG-PVS + WMH scheme: 4 dense classes."""
        return LabelScheme(foreground_ids=(WM_PVS, BG_PVS, WMH))


@dataclass(frozen=True)
class SparseAnnotation:
    """Which axial slices carry manual labels; all others become ignore.

    The acquisition protocol marks 10 slices per scan (2 brainstem-level,
    4 basal-ganglia-level, 4 centrum-semiovale-level); the indices are data.
    """

    annotated_slices: FrozenSet[int]
    axis: int = 2

    def __post_init__(self):
        object.__setattr__(self, "annotated_slices", frozenset(int(s) for s in self.annotated_slices))
        if self.axis not in (0, 1, 2):
            raise ValueError("axis must be 0, 1 or 2")


def apply_sparse_ignore(labels: LabelMap, ann: SparseAnnotation) -> LabelMap:
    """Set every voxel on a non-annotated axial slice to the ignore label."""
    n_slices = labels.dims[ann.axis]
    bad = [s for s in ann.annotated_slices if not 0 <= s < n_slices]
    if bad:
        raise IndexError(f"annotated slices out of range: {sorted(bad)} (axis has {n_slices})")
    out = labels.data.copy()
    keep = np.zeros(n_slices, dtype=bool)
    keep[sorted(ann.annotated_slices)] = True
    index = [slice(None)] * 3
    index[ann.axis] = ~keep
    out[tuple(index)] = IGNORE
    return labels.with_data(out)


def roi_retain(vol: Volume, parcellation: LabelMap, keep_ids, dilate_iters: int = 1) -> Volume:
    """Zero everything outside the selected parcellation ROIs.

    The ROI mask is dilated ``dilate_iters`` times with the full 3x3x3
    structuring element so the retained region covers the ROI entirely.
    """
    require_same_grid(vol, parcellation, "volume/parcellation grids")
    if dilate_iters < 0:
        raise ValueError("dilate_iters must be non-negative")
    mask = np.isin(parcellation.data, list(keep_ids))
    if not mask.any():
        raise ValueError(f"no parcellation voxels match keep_ids {sorted(set(keep_ids))}")
    if dilate_iters > 0:
        mask = ndimage.binary_dilation(mask, structure=np.ones((3, 3, 3), bool), iterations=dilate_iters)
    return vol.with_data(np.where(mask, vol.data, 0.0).astype(np.float32))


def merge_wmh(pvs: LabelMap, wmh_probability: Volume, threshold: float = 0.5) -> LabelMap:
    """Override PVS labels with the WMH class where the probability exceeds
    the threshold; ignore voxels are never overridden."""
    require_same_grid(pvs, wmh_probability, "pvs/wmh grids")
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    out = pvs.data.copy()
    hit = (wmh_probability.data > threshold) & (out != IGNORE)
    out[hit] = WMH
    return pvs.with_data(out)
