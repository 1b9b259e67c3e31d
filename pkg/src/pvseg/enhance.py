"""3D image enhancement: non-local means denoising and contrast-limited
adaptive histogram equalization, plus the composed enhancement pipeline
(Otsu background removal -> unit rescale -> optional NLMF -> optional AHE).

Both filters are pure functions of their inputs and vectorize over the whole
grid: NLMF accumulates one shifted squared-difference map per search offset
with integral-image box sums, AHE gathers per-tile equalization mappings with
a trilinear blend. Neither pads: patch and search windows are clipped at the
volume border.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import FrozenSet, Optional, Tuple, Union

import numpy as np

from .volume import Volume, otsu_foreground, rescale_unit

NLMF = "NLMF"
AHE = "AHE"


@dataclass(frozen=True)
class EnhanceConfig:
    nlm_patch_radius: int = 1
    nlm_block_radius: int = 2
    nlm_sigma: Union[float, str] = "auto"
    ahe_kernel: Optional[Tuple[int, int, int]] = None  # None: dims // 8, floor, min 4
    ahe_clip_limit: float = 0.01
    pipeline_flags: FrozenSet[str] = field(default_factory=frozenset)

    def __post_init__(self):
        if self.nlm_patch_radius < 0 or self.nlm_block_radius < 1:
            raise ValueError("patch radius must be >= 0 and block radius >= 1")
        if self.nlm_block_radius < self.nlm_patch_radius:
            raise ValueError("block radius must be >= patch radius")
        if isinstance(self.nlm_sigma, str):
            if self.nlm_sigma != "auto":
                raise ValueError(f"nlm_sigma must be positive or 'auto', got {self.nlm_sigma!r}")
        elif self.nlm_sigma <= 0:
            raise ValueError("nlm_sigma must be positive")
        if not 0.0 < self.ahe_clip_limit <= 1.0:
            raise ValueError("ahe_clip_limit must lie in (0, 1]")
        bad = set(self.pipeline_flags) - {NLMF, AHE}
        if bad:
            raise ValueError(f"unknown pipeline flags {sorted(bad)}")
        object.__setattr__(self, "pipeline_flags", frozenset(self.pipeline_flags))
        if self.ahe_kernel is not None:
            k = tuple(int(v) for v in self.ahe_kernel)
            if len(k) != 3 or any(v < 1 for v in k):
                raise ValueError("ahe_kernel must be 3 positive integers")
            object.__setattr__(self, "ahe_kernel", k)


def estimate_sigma(vol: Volume, background_mask: np.ndarray) -> float:
    """Noise level estimate: population std of the background voxels."""
    if background_mask.shape != vol.dims:
        raise ValueError("background mask shape does not match volume")
    values = vol.data[background_mask]
    if values.size < 27:
        raise ValueError(f"background mask too small ({values.size} voxels, need >= 27)")
    sigma = float(values.astype(np.float64).std())
    if sigma == 0.0:
        raise ValueError("background has zero variance; cannot estimate noise")
    return sigma


def _box_sum(arr: np.ndarray, radius: Tuple[int, int, int]) -> np.ndarray:
    """Sum of ``arr`` over a (2r+1)^3 window clipped at the borders."""
    out = arr
    for ax, r in enumerate(radius):
        if r == 0:
            continue
        n = out.shape[ax]
        cs = np.concatenate(
            [np.zeros_like(out.take([0], axis=ax)), np.cumsum(out, axis=ax)], axis=ax
        )
        hi = np.minimum(np.arange(n) + r + 1, n)
        lo = np.maximum(np.arange(n) - r, 0)
        out = np.take(cs, hi, axis=ax) - np.take(cs, lo, axis=ax)
    return out


def nlm_filter(vol: Volume, cfg: EnhanceConfig, sigma: Optional[float] = None) -> Volume:
    """Non-local means with Gaussian-noise distance correction.

    Each output voxel is a weight-normalized average of the centers of
    patches inside the search block; a pair at offset ``o`` with clipped
    patch overlap of N voxels and squared patch distance d2 gets weight
    ``exp(-max(d2 - 2*sigma^2*N, 0) / (sigma^2 * N))`` (filtering strength
    h = sigma). The self pair always contributes weight 1.
    """
    if sigma is None:
        if not isinstance(cfg.nlm_sigma, (int, float)):
            raise ValueError("nlm_sigma is 'auto' but no resolved sigma was supplied")
        sigma = float(cfg.nlm_sigma)
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    data = vol.data.astype(np.float64)
    if not np.all(np.isfinite(data)):
        raise ValueError("non-finite voxel values")

    p = cfg.nlm_patch_radius
    b = cfg.nlm_block_radius
    dims = data.shape
    num = np.zeros(dims)
    den = np.zeros(dims)
    s2 = sigma * sigma

    for ox in range(-b, b + 1):
        for oy in range(-b, b + 1):
            for oz in range(-b, b + 1):
                o = (ox, oy, oz)
                # region of voxels x with x+o inside the volume
                src = tuple(slice(max(0, oi), dims[a] + min(0, oi)) for a, oi in enumerate(o))
                dst = tuple(slice(max(0, -oi), dims[a] + min(0, -oi)) for a, oi in enumerate(o))
                if any(s.start >= s.stop for s in dst):
                    continue
                diff2 = np.zeros(dims)
                valid = np.zeros(dims)
                diff2[dst] = (data[dst] - data[src]) ** 2
                valid[dst] = 1.0
                d2 = _box_sum(diff2, (p, p, p))
                n_patch = _box_sum(valid, (p, p, p))
                w = np.zeros(dims)
                ok = valid.astype(bool) & (n_patch > 0)
                w[ok] = np.exp(-np.maximum(d2[ok] - 2.0 * s2 * n_patch[ok], 0.0) / (s2 * n_patch[ok]))
                shifted = np.zeros(dims)
                shifted[dst] = data[src]
                num += w * shifted
                den += w
    return vol.with_data((num / den).astype(np.float32))


def _tile_edges(dim: int, kernel: int) -> np.ndarray:
    n_tiles = -(-dim // kernel)
    edges = np.arange(n_tiles + 1) * kernel
    edges[-1] = dim
    return edges


def adaptive_hist_eq(vol: Volume, cfg: EnhanceConfig) -> Volume:
    """Contrast-limited AHE over a 3D tile grid.

    Per tile: 256-bin histogram over [0, 1], clipped at
    ``max(clip_limit * tile_voxels / 256, 1)`` with the excess spread
    uniformly, then the inclusive CDF as the equalization mapping. Each voxel
    blends the mappings of the (up to) 8 surrounding tile centers trilinearly.
    """
    data = vol.data.astype(np.float64)
    if data.min() < 0.0 or data.max() > 1.0:
        raise ValueError("AHE input must lie in [0, 1]; rescale first")
    kernel = cfg.ahe_kernel or tuple(max(4, d // 8) for d in vol.dims)
    if any(k > d for k, d in zip(kernel, vol.dims)):
        raise ValueError(f"AHE kernel {kernel} larger than volume {vol.dims}")

    nbins = 256
    bins = np.minimum((data * nbins).astype(np.intp), nbins - 1)
    edges = [_tile_edges(d, k) for d, k in zip(vol.dims, kernel)]
    n_tiles = [len(e) - 1 for e in edges]
    centers = [0.5 * (e[:-1] + e[1:] - 1) for e in edges]

    mappings = np.empty((*n_tiles, nbins))
    for tx in range(n_tiles[0]):
        for ty in range(n_tiles[1]):
            for tz in range(n_tiles[2]):
                sel = (
                    slice(edges[0][tx], edges[0][tx + 1]),
                    slice(edges[1][ty], edges[1][ty + 1]),
                    slice(edges[2][tz], edges[2][tz + 1]),
                )
                tile_bins = bins[sel].ravel()
                hist = np.bincount(tile_bins, minlength=nbins).astype(np.float64)
                total = tile_bins.size
                clip = max(cfg.ahe_clip_limit * total / nbins, 1.0)
                excess = np.maximum(hist - clip, 0.0).sum()
                hist = np.minimum(hist, clip) + excess / nbins
                mappings[tx, ty, tz] = np.cumsum(hist) / total

    # fractional tile coordinate per axis: clamped between first/last centers
    tile_lo, tile_w = [], []
    for ax in range(3):
        c = centers[ax]
        pos = np.clip(np.arange(vol.dims[ax], dtype=np.float64), c[0], c[-1])
        t = np.clip(np.searchsorted(c, pos, side="right") - 1, 0, max(len(c) - 2, 0))
        if len(c) > 1:
            frac = (pos - c[t]) / (c[t + 1] - c[t])
        else:
            frac = np.zeros_like(pos)
        tile_lo.append(t)
        tile_w.append(frac)

    ix = tile_lo[0][:, None, None]
    iy = tile_lo[1][None, :, None]
    iz = tile_lo[2][None, None, :]
    wx = tile_w[0][:, None, None]
    wy = tile_w[1][None, :, None]
    wz = tile_w[2][None, None, :]
    out = np.zeros(vol.dims)
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                w = (
                    (wx if dx else 1.0 - wx)
                    * (wy if dy else 1.0 - wy)
                    * (wz if dz else 1.0 - wz)
                )
                tx = np.minimum(ix + dx, n_tiles[0] - 1)
                ty = np.minimum(iy + dy, n_tiles[1] - 1)
                tz = np.minimum(iz + dz, n_tiles[2] - 1)
                out += w * mappings[tx, ty, tz, bins]
    return vol.with_data(out.astype(np.float32))


def enhance_pipeline(vol: Volume, cfg: EnhanceConfig) -> Volume:
    """Otsu background removal, unit rescale over the foreground, then the
    flagged filters. Background voxels stay exactly 0 after every stage.

    With the AHE flag set, downstream normalization must skip z-scoring
    (handled by the training config, see PipelineConfig.applies_zscore).
    """
    _, mask = otsu_foreground(vol)
    out = rescale_unit(vol, mask)

    if NLMF in cfg.pipeline_flags:
        sigma: Optional[float]
        if cfg.nlm_sigma == "auto":
            # estimate on the raw background, rescaled into the unit range
            raw_sigma = estimate_sigma(vol, ~mask)
            span = float(vol.data[mask].max() - vol.data[mask].min())
            sigma = raw_sigma / span
        else:
            sigma = float(cfg.nlm_sigma)
        out = nlm_filter(out, cfg, sigma=sigma)
        out = out.with_data(np.where(mask, out.data, 0.0).astype(np.float32))
    if AHE in cfg.pipeline_flags:
        out = out.with_data(np.clip(out.data, 0.0, 1.0))
        out = adaptive_hist_eq(out, cfg)
        out = out.with_data(np.where(mask, out.data, 0.0).astype(np.float32))
    return out
