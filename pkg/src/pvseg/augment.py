"""Paired image/label augmentation: mirroring, rotation, rescaling, elastic
deformation, and additive Gaussian noise.

Every spatial transform is applied identically to both patches through one
shared coordinate field: trilinear interpolation for the image (zero fill
outside) and nearest-neighbour for the labels (ignore fill outside), so the
image/label pairing survives any transform.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy import ndimage

from .volume import IGNORE


@dataclass(frozen=True)
class AugmentConfig:
    mirror: bool = True
    mirror_prob: float = 0.5
    rotation: bool = True
    rotation_max_deg: float = 15.0
    rescale: bool = True
    zoom_range: Tuple[float, float] = (0.9, 1.1)
    elastic: bool = True
    elastic_amplitude: float = 2.0  # voxels, at the coarse control points
    elastic_grid: int = 4  # control points per axis; trilinear upsampling smooths
    gaussian_noise: bool = True
    noise_sigma_max: float = 0.05  # fraction of the patch intensity range

    def __post_init__(self) -> None:
        if not 0.0 <= self.mirror_prob <= 1.0:
            raise ValueError("mirror_prob must lie in [0, 1]")
        if self.rotation_max_deg < 0.0:
            raise ValueError("rotation_max_deg must be non-negative")
        lo, hi = self.zoom_range
        if not 0.0 < lo <= hi:
            raise ValueError(f"zoom_range must satisfy 0 < min <= max, got {self.zoom_range}")
        if self.elastic_amplitude < 0.0 or self.elastic_grid < 2:
            raise ValueError("elastic_amplitude must be >= 0 and elastic_grid >= 2")
        if not 0.0 <= self.noise_sigma_max:
            raise ValueError("noise_sigma_max must be non-negative")

    @staticmethod
    def disabled() -> "AugmentConfig":
        return AugmentConfig(mirror=False, rotation=False, rescale=False,
                             elastic=False, gaussian_noise=False)

    def to_dict(self) -> dict:
        return {
            "mirror": self.mirror,
            "mirror_prob": self.mirror_prob,
            "rotation": self.rotation,
            "rotation_max_deg": self.rotation_max_deg,
            "rescale": self.rescale,
            "zoom_range": list(self.zoom_range),
            "elastic": self.elastic,
            "elastic_amplitude": self.elastic_amplitude,
            "elastic_grid": self.elastic_grid,
            "gaussian_noise": self.gaussian_noise,
            "noise_sigma_max": self.noise_sigma_max,
        }

    @staticmethod
    def from_dict(d: dict) -> "AugmentConfig":
        kwargs = dict(d)
        if "zoom_range" in kwargs:
            kwargs["zoom_range"] = tuple(kwargs["zoom_range"])
        return AugmentConfig(**kwargs)


def _rotation_matrix(angles_rad: np.ndarray) -> np.ndarray:
    cx, cy, cz = np.cos(angles_rad)
    sx, sy, sz = np.sin(angles_rad)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rx @ ry @ rz


def resample_pair(
    image: np.ndarray,
    labels: np.ndarray,
    matrix: np.ndarray,
    displacement: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """Resample an image/label pair through one coordinate field.

    ``matrix`` maps output voxel coordinates (relative to the patch center)
    to input coordinates; ``displacement``, when given, is a per-voxel
    additive offset of shape (3, *spatial). The image is sampled trilinearly
    with zero fill, the labels nearest-neighbour with ignore fill.
    """
    spatial = labels.shape
    center = (np.asarray(spatial, dtype=np.float64) - 1.0) / 2.0
    grids = np.indices(spatial, dtype=np.float64)
    rel = np.stack([grids[a] - center[a] for a in range(3)])
    coords = np.einsum("ij,jxyz->ixyz", np.asarray(matrix, dtype=np.float64), rel)
    coords += center[:, None, None, None]
    if displacement is not None:
        coords = coords + displacement

    multi = image.ndim == 4
    chans = image if multi else image[None]
    out_img = np.stack([
        ndimage.map_coordinates(c.astype(np.float64), coords, order=1,
                                mode="constant", cval=0.0)
        for c in chans
    ])
    out_lbl = ndimage.map_coordinates(labels, coords, order=0,
                                      mode="constant", cval=IGNORE)
    return (out_img if multi else out_img[0]).astype(image.dtype, copy=False), out_lbl


def _elastic_field(spatial: Tuple[int, ...], amplitude: float, grid: int, rng) -> np.ndarray:
    coarse = rng.uniform(-amplitude, amplitude, size=(3, grid, grid, grid))
    zoom = [s / grid for s in spatial]
    return np.stack([ndimage.zoom(coarse[a], zoom, order=1, mode="nearest") for a in range(3)])


def augment(
    image: np.ndarray,
    labels: np.ndarray,
    cfg: AugmentConfig,
    rng: np.random.Generator,
) -> Tuple[np.ndarray, np.ndarray]:
    """One augmented (image, labels) draw. ``image`` is (*spatial) or
    (channels, *spatial); ``labels`` is (*spatial). With everything disabled
    this is the identity."""
    image = np.asarray(image)
    labels = np.asarray(labels)
    spatial = labels.shape
    if image.shape[-3:] != spatial:
        raise ValueError(f"image spatial dims {image.shape[-3:]} != labels {spatial}")

    if cfg.mirror:
        for axis in range(3):
            if rng.random() < cfg.mirror_prob:
                image = np.flip(image, axis=axis + (image.ndim - 3))
                labels = np.flip(labels, axis=axis)
        image = np.ascontiguousarray(image)
        labels = np.ascontiguousarray(labels)

    matrix = np.eye(3)
    warp = False
    if cfg.rotation and cfg.rotation_max_deg > 0.0:
        angles = np.deg2rad(rng.uniform(-cfg.rotation_max_deg, cfg.rotation_max_deg, 3))
        # sampling map is the inverse of the content rotation
        matrix = matrix @ _rotation_matrix(angles).T
        warp = True
    if cfg.rescale:
        zoom = rng.uniform(*cfg.zoom_range)
        if zoom != 1.0:
            matrix = matrix / zoom
            warp = True
    displacement = None
    if cfg.elastic and cfg.elastic_amplitude > 0.0:
        displacement = _elastic_field(spatial, cfg.elastic_amplitude, cfg.elastic_grid, rng)
        warp = True
    if warp:
        image, labels = resample_pair(image, labels, matrix, displacement)

    if cfg.gaussian_noise and cfg.noise_sigma_max > 0.0:
        span = float(image.max() - image.min())
        sigma = rng.uniform(0.0, cfg.noise_sigma_max) * span
        if sigma > 0.0:
            noise = rng.normal(0.0, sigma, size=image.shape)
            image = (image.astype(np.float64) + noise).astype(np.float32)

    return image, labels
