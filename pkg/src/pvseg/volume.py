"""Volume / label-map data model, resampling policies, and baseline intensity ops.

Arrays are indexed ``[i, j, k]`` where ``i`` is the first header axis of the
underlying NIfTI grid; ``spacing`` follows the same axis order (mm per voxel).
The affine is carried verbatim for provenance and never used to reorient data.
Paired grids (image/labels/parcellation/WMH) must match voxel-for-voxel.

Volumes store float32 data; all statistics are accumulated in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Tuple, Union

import numpy as np

Dims = Tuple[int, int, int]
Spacing = Tuple[float, float, float]


def _canon_spacing(spacing) -> Spacing:
    # Quantize to float32 so in-memory spacing survives the float32 pixdim
    # round trip bit-exactly.
    s = tuple(float(np.float32(v)) for v in spacing)
    if len(s) != 3 or any(v <= 0 for v in s):
        raise ValueError(f"spacing must be 3 positive reals, got {spacing!r}")
    return s  # type: ignore[return-value]


def _check_grid(data: np.ndarray, spacing) -> None:
    if data.ndim != 3 or any(d < 1 for d in data.shape):
        raise ValueError(f"data must be a 3D grid with positive dims, got shape {data.shape}")


@dataclass(frozen=True)
class Volume:
    """A 3D scalar image with per-axis voxel spacing and stored affine."""

    data: np.ndarray
    spacing: Spacing
    affine: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        _check_grid(data, self.spacing)
        if not np.all(np.isfinite(data)):
            raise ValueError("volume data must be finite")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _canon_spacing(self.spacing))
        object.__setattr__(self, "affine", np.asarray(self.affine, dtype=np.float64).reshape(4, 4))

    @property
    def dims(self) -> Dims:
        return self.data.shape  # type: ignore[return-value]

    def with_data(self, data: np.ndarray) -> "Volume":
        return replace(self, data=data)


#: Class ids of the PVS labelling scheme.
BACKGROUND, WM_PVS, BG_PVS, WMH, IGNORE = 0, 1, 2, 3, 255


@dataclass(frozen=True)
class LabelMap:
    """A 3D small-integer grid sharing a Volume's grid.

    Values are not constrained at construction (parcellation maps carry atlas
    ids); PVS-scheme maps are checked explicitly via :func:`validate_scheme`.
    """

    data: np.ndarray
    spacing: Spacing
    affine: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        data = np.asarray(self.data)
        _check_grid(data, self.spacing)
        if not np.issubdtype(data.dtype, np.integer):
            raise ValueError(f"label data must be integer, got {data.dtype}")
        if data.min() < 0:
            raise ValueError("label values must be non-negative")
        if data.max() <= 255 and data.dtype != np.uint8:
            data = data.astype(np.uint8)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _canon_spacing(self.spacing))
        object.__setattr__(self, "affine", np.asarray(self.affine, dtype=np.float64).reshape(4, 4))

    @property
    def dims(self) -> Dims:
        return self.data.shape  # type: ignore[return-value]

    def with_data(self, data: np.ndarray) -> "LabelMap":
        return replace(self, data=data)


Grid = Union[Volume, LabelMap]

SCHEME_VALUES = frozenset({BACKGROUND, WM_PVS, BG_PVS, WMH, IGNORE})


def validate_scheme(labels: LabelMap) -> None:
    """Require every value to be one of the PVS scheme ids {0,1,2,3,255}."""
    bad = np.setdiff1d(np.unique(labels.data), sorted(SCHEME_VALUES))
    if bad.size:
        raise ValueError(f"label values outside PVS scheme: {bad.tolist()}")


def same_grid(a: Grid, b: Grid) -> bool:
    return a.dims == b.dims and a.spacing == b.spacing


def require_same_grid(a: Grid, b: Grid, what: str = "grids") -> None:
    if not same_grid(a, b):
        raise ValueError(f"{what} do not match: {a.dims}@{a.spacing} vs {b.dims}@{b.spacing}")


@dataclass(frozen=True)
class SpacingPolicy:
    """Either keep native grids (agnostic) or resample to a target spacing."""

    variant: str  # "agnostic" | "target"
    spacing: Optional[Spacing] = None

    def __post_init__(self):
        if self.variant not in ("agnostic", "target"):
            raise ValueError(f"unknown spacing policy {self.variant!r}")
        if self.variant == "target":
            if self.spacing is None:
                raise ValueError("target policy requires a spacing")
            object.__setattr__(self, "spacing", _canon_spacing(self.spacing))
        elif self.spacing is not None:
            raise ValueError("agnostic policy takes no spacing")

    @staticmethod
    def agnostic() -> "SpacingPolicy":
        return SpacingPolicy("agnostic")

    @staticmethod
    def target(spacing) -> "SpacingPolicy":
        return SpacingPolicy("target", _canon_spacing(spacing))


def _interp_axis_linear(arr: np.ndarray, coords: np.ndarray, axis: int) -> np.ndarray:
    """Linear interpolation of ``arr`` along ``axis`` at clamped coordinates."""
    n = arr.shape[axis]
    c = np.clip(coords, 0.0, n - 1)
    lo = np.floor(c).astype(np.intp)
    hi = np.minimum(lo + 1, n - 1)
    w = (c - lo).astype(np.float64)
    a = np.take(arr, lo, axis=axis)
    b = np.take(arr, hi, axis=axis)
    shape = [1] * arr.ndim
    shape[axis] = len(coords)
    w = w.reshape(shape)
    return a * (1.0 - w) + b * w


def _interp_axis_nearest(arr: np.ndarray, coords: np.ndarray, axis: int) -> np.ndarray:
    n = arr.shape[axis]
    c = np.clip(coords, 0.0, n - 1)
    idx = np.floor(c + 0.5).astype(np.intp)
    idx = np.clip(idx, 0, n - 1)
    return np.take(arr, idx, axis=axis)


def resample(vol: Grid, policy: SpacingPolicy, interp: str = "trilinear") -> Grid:
    """Resample onto the policy's grid; the agnostic policy is the identity.

    Target resampling maps output voxel centers into input index space by the
    spacing ratio (corner-aligned: output index 0 lands on input index 0) and
    clamps coordinates at the borders (edge extension).
    """
    if interp not in ("trilinear", "nearest"):
        raise ValueError(f"unknown interpolation {interp!r}")
    if isinstance(vol, LabelMap) and interp != "nearest":
        raise ValueError("label maps must be resampled with nearest interpolation")
    if policy.variant == "agnostic":
        return vol

    target = policy.spacing
    assert target is not None
    out_dims = tuple(int(round(vol.dims[i] * vol.spacing[i] / target[i])) for i in range(3))
    if any(d < 1 for d in out_dims):
        raise ValueError(f"target spacing {target} collapses dims {vol.dims} to {out_dims}")

    if isinstance(vol, LabelMap):
        arr = vol.data
        interp_axis = _interp_axis_nearest
    else:
        arr = vol.data.astype(np.float64)
        interp_axis = _interp_axis_linear if interp == "trilinear" else _interp_axis_nearest
    for ax in range(3):
        ratio = target[ax] / vol.spacing[ax]
        coords = np.arange(out_dims[ax], dtype=np.float64) * ratio
        arr = interp_axis(arr, coords, ax)
    if isinstance(vol, LabelMap):
        return LabelMap(arr, target, vol.affine)
    return Volume(arr.astype(np.float32), target, vol.affine)


def otsu_foreground(vol: Volume, bins: int = 256) -> Tuple[float, np.ndarray]:
    """Between-class-variance threshold over a 256-bin histogram of [min, max].

    Returns ``(threshold, mask)`` with ``mask = data > threshold``. Ties in the
    variance scan break toward the lower threshold. Bin means use bin centers.
    """
    data = vol.data.astype(np.float64)
    lo, hi = float(data.min()), float(data.max())
    if lo == hi:
        raise ValueError("Otsu threshold undefined for a constant volume")
    hist, edges = np.histogram(data, bins=bins, range=(lo, hi))
    hist = hist.astype(np.float64)
    centers = 0.5 * (edges[:-1] + edges[1:])

    w0 = np.cumsum(hist)
    total = w0[-1]
    w1 = total - w0
    m0 = np.cumsum(hist * centers)
    mu_total = m0[-1]
    # threshold t: background = bins [0..t], foreground = bins [t+1..]
    valid = (w0[:-1] > 0) & (w1[:-1] > 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        mu0 = m0[:-1] / w0[:-1]
        mu1 = (mu_total - m0[:-1]) / w1[:-1]
        var_b = np.where(valid, w0[:-1] * w1[:-1] * (mu0 - mu1) ** 2, -np.inf)
    t = int(np.argmax(var_b))  # argmax takes the first (lowest) maximizer
    threshold = float(edges[t + 1])
    return threshold, vol.data > threshold


def rescale_unit(vol: Volume, mask: Optional[np.ndarray] = None) -> Volume:
    """Affine map sending region min to 0 and max to 1; outside the mask 0."""
    if mask is None:
        region = vol.data
    else:
        if mask.shape != vol.dims:
            raise ValueError("mask shape does not match volume")
        region = vol.data[mask]
        if region.size == 0:
            raise ValueError("mask selects no voxels")
    lo, hi = float(region.min()), float(region.max())
    if lo == hi:
        raise ValueError("rescale undefined: region is constant")
    out = (vol.data.astype(np.float64) - lo) / (hi - lo)
    if mask is not None:
        out = np.where(mask, out, 0.0)
    else:
        out = np.clip(out, 0.0, 1.0)
    return vol.with_data(out.astype(np.float32))


def clip_zscore(vol: Volume, mask: Optional[np.ndarray] = None) -> Volume:
    """Clip to the region's [P0.5, P99.5] then z-score with the clipped region's
    population statistics. The transform is applied to every voxel; statistics
    come from the masked region when a mask is given, else the whole volume.
    """
    if mask is not None and mask.shape != vol.dims:
        raise ValueError("mask shape does not match volume")
    region = vol.data[mask] if mask is not None else vol.data.reshape(-1)
    if region.size < 2 or float(region.min()) == float(region.max()):
        raise ValueError("clip_zscore undefined: region has <2 distinct values")
    region = region.astype(np.float64)
    p_lo, p_hi = np.percentile(region, [0.5, 99.5])
    clipped_region = np.clip(region, p_lo, p_hi)
    mean = clipped_region.mean()
    std = clipped_region.std()  # population convention
    if std == 0.0:
        raise ValueError("clip_zscore undefined: zero std after clipping")
    out = (np.clip(vol.data.astype(np.float64), p_lo, p_hi) - mean) / std
    return vol.with_data(out.astype(np.float32))
