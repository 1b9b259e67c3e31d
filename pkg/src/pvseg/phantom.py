"""Synthetic tubular phantoms: dark tube segments in an ellipsoidal "brain",
split into an outer white-matter shell and an inner basal-ganglia ellipsoid,
with exact voxel-level ground truth for end-to-end pipeline verification.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Tuple

import numpy as np
from scipy import ndimage

from .clusters import DEFAULT_CONNECTIVITY, ClusterStats, connected_components
from .manifest import Manifest, ManifestCase, config_fingerprint, save_manifest
from .nifti import write_nifti
from .volume import BG_PVS, WM_PVS, LabelMap, Volume

_MAX_PLACEMENT_ATTEMPTS = 200


@dataclass(frozen=True)
class PhantomConfig:
    dims: Tuple[int, int, int] = (64, 64, 64)
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    n_tubes_wm: int = 6
    n_tubes_bg: int = 3
    radius_range: Tuple[float, float] = (1.2, 2.2)
    length_range: Tuple[float, float] = (12.0, 28.0)
    # negative: tubes darker than parenchyma, as PVS appear on T1w
    tube_contrast: float = -0.4
    background_level: float = 1.0
    noise_sigma: float = 0.0
    wm_fraction: float = 0.7
    n_wmh_blobs: int = 0
    wmh_blob_radius: float = 3.0
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        if len(self.dims) != 3 or any(d < 16 for d in self.dims):
            raise ValueError(f"dims must be 3 values >= 16, got {self.dims}")
        if self.n_tubes_wm < 0 or self.n_tubes_bg < 0 or self.n_wmh_blobs < 0:
            raise ValueError("structure counts must be non-negative")
        lo, hi = self.radius_range
        if not 0.5 <= lo <= hi:
            raise ValueError(f"radii must satisfy 0.5 <= min <= max, got {self.radius_range}")
        lo, hi = self.length_range
        if not 0.0 < lo <= hi:
            raise ValueError(f"lengths must satisfy 0 < min <= max, got {self.length_range}")
        if self.tube_contrast == 0.0:
            raise ValueError("tube_contrast must be nonzero so tubes are visible")
        if self.noise_sigma < 0.0:
            raise ValueError("noise_sigma must be non-negative")
        if not 0.0 < self.wm_fraction < 1.0:
            raise ValueError("wm_fraction must lie strictly between 0 and 1")
        if self.wmh_blob_radius <= 0.0:
            raise ValueError("wmh_blob_radius must be positive")

    def to_dict(self) -> dict:
        return {
            "dims": list(self.dims),
            "spacing": list(self.spacing),
            "n_tubes_wm": self.n_tubes_wm,
            "n_tubes_bg": self.n_tubes_bg,
            "radius_range": list(self.radius_range),
            "length_range": list(self.length_range),
            "tube_contrast": self.tube_contrast,
            "background_level": self.background_level,
            "noise_sigma": self.noise_sigma,
            "wm_fraction": self.wm_fraction,
            "n_wmh_blobs": self.n_wmh_blobs,
            "wmh_blob_radius": self.wmh_blob_radius,
            "seed": self.seed,
        }

    @staticmethod
    def from_dict(d: dict) -> "PhantomConfig":
        kwargs = dict(d)
        for key in ("dims", "spacing", "radius_range", "length_range"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return PhantomConfig(**kwargs)


def compartment_masks(cfg: PhantomConfig) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(brain, wm, bg) boolean masks. The brain is an axis-aligned ellipsoid
    with semi-axes 0.45 * dims; the BG compartment is a concentric inner
    ellipsoid scaled so it holds (1 - wm_fraction) of the brain volume."""
    dims = np.asarray(cfg.dims, dtype=np.float64)
    center = (dims - 1.0) / 2.0
    semi = 0.45 * dims
    grids = np.indices(cfg.dims, dtype=np.float64)
    r2 = sum(((grids[a] - center[a]) / semi[a]) ** 2 for a in range(3))
    brain = r2 <= 1.0
    inner_scale = (1.0 - cfg.wm_fraction) ** (1.0 / 3.0)
    bg = r2 <= inner_scale ** 2
    wm = brain & ~bg
    return brain, wm, bg


def _segment_distance_box(cfg, a: np.ndarray, b: np.ndarray, radius: float):
    """Voxel-center distances to segment ab, evaluated only inside the
    segment's bounding box inflated by radius + 1. Returns (slices, dist)."""
    lo = np.floor(np.minimum(a, b) - radius - 1.0).astype(int)
    hi = np.ceil(np.maximum(a, b) + radius + 1.0).astype(int) + 1
    lo = np.maximum(lo, 0)
    hi = np.minimum(hi, np.asarray(cfg.dims))
    if np.any(lo >= hi):
        return None, None
    box = tuple(slice(int(l), int(h)) for l, h in zip(lo, hi))
    grids = np.indices(tuple(int(h - l) for l, h in zip(lo, hi)), dtype=np.float64)
    pts = np.stack([grids[i] + lo[i] for i in range(3)], axis=-1)
    ab = b - a
    denom = float(ab @ ab)
    t = np.clip(((pts - a) @ ab) / denom, 0.0, 1.0) if denom > 0 else np.zeros(pts.shape[:-1])
    closest = a + t[..., None] * ab
    dist = np.sqrt(((pts - closest) ** 2).sum(axis=-1))
    return box, dist


def _place_tube(rng, cfg, region: np.ndarray, region_idx: np.ndarray) -> Tuple[tuple, np.ndarray]:
    """One tube wholly inside ``region``, retried until its voxelization is a
    single 26-connected component."""
    struct = np.ones((3, 3, 3), dtype=bool)
    for _ in range(_MAX_PLACEMENT_ATTEMPTS):
        start = region_idx[rng.integers(len(region_idx))].astype(np.float64)
        direction = rng.normal(size=3)
        norm = float(np.linalg.norm(direction))
        if norm < 1e-9:
            continue
        direction /= norm
        length = rng.uniform(*cfg.length_range)
        radius = rng.uniform(*cfg.radius_range)
        end = start + length * direction
        box, dist = _segment_distance_box(cfg, start, end, radius)
        if box is None:
            continue
        tube = (dist <= radius) & region[box]
        if not tube.any():
            continue
        _, n_comp = ndimage.label(tube, structure=struct)
        if n_comp != 1:
            continue
        return box, tube
    raise RuntimeError(
        f"failed to place a tube after {_MAX_PLACEMENT_ATTEMPTS} attempts; "
        "volume too crowded or compartment too small"
    )


def generate_phantom(cfg: PhantomConfig) -> Tuple[Volume, LabelMap, Dict[int, ClusterStats]]:
    """Build one phantom.

    Intensity is ``background_level`` inside the brain ellipsoid, zero outside,
    and ``background_level + tube_contrast`` exactly on tube voxels, so with
    zero noise the labeled set equals the set of brain voxels whose intensity
    deviates from the parenchyma level. Ground-truth ClusterStats are computed
    from the emitted label map (overlapping tubes merge into one cluster).
    """
    rng = np.random.default_rng(cfg.seed)
    brain, wm, bg = compartment_masks(cfg)
    data = np.zeros(cfg.dims, dtype=np.float64)
    data[brain] = cfg.background_level
    labels = np.zeros(cfg.dims, dtype=np.uint8)

    for region, n_tubes, class_id in ((wm, cfg.n_tubes_wm, WM_PVS), (bg, cfg.n_tubes_bg, BG_PVS)):
        if n_tubes == 0:
            continue
        region_idx = np.argwhere(region)
        if len(region_idx) == 0:
            raise RuntimeError("compartment is empty; enlarge dims")
        for _ in range(n_tubes):
            box, tube = _place_tube(rng, cfg, region, region_idx)
            labels[box][tube] = class_id
            data[box][tube] = cfg.background_level + cfg.tube_contrast

    if cfg.noise_sigma > 0.0:
        data = data + rng.normal(0.0, cfg.noise_sigma, size=cfg.dims)

    vol = Volume(data.astype(np.float32), cfg.spacing)
    lbl = LabelMap(labels, cfg.spacing)
    stats = {
        class_id: connected_components(lbl, class_id, DEFAULT_CONNECTIVITY)
        for class_id in (WM_PVS, BG_PVS)
    }
    return vol, lbl, stats


def wmh_blob_probability(cfg: PhantomConfig, seed_tag: int = 1) -> Volume:
    """Spherical probability-1 blobs in the WM shell, for exercising the
    WMH merge step; not a lesion model."""
    rng = np.random.default_rng([cfg.seed, seed_tag])
    _, wm, _ = compartment_masks(cfg)
    prob = np.zeros(cfg.dims, dtype=np.float64)
    wm_idx = np.argwhere(wm)
    for _ in range(cfg.n_wmh_blobs):
        center = wm_idx[rng.integers(len(wm_idx))].astype(np.float64)
        box, dist = _segment_distance_box(cfg, center, center, cfg.wmh_blob_radius)
        blob = (dist <= cfg.wmh_blob_radius) & wm[box]
        prob[box][blob] = 1.0
    return Volume(prob.astype(np.float32), cfg.spacing)


def _burden_split(counts: Dict[str, int]) -> Dict[str, str]:
    """Median split on foreground voxels: the ceil(n/2) largest counts are
    "high", ties broken by case id for determinism."""
    order = sorted(counts, key=lambda cid: (counts[cid], cid))
    n_low = len(order) // 2
    return {cid: ("low" if i < n_low else "high") for i, cid in enumerate(order)}


def phantom_cohort(
    cfg: PhantomConfig,
    n_cases: int,
    seed: int,
    out_dir,
    labeled: bool = True,
) -> Manifest:
    """Generate ``n_cases`` phantoms under ``out_dir`` and write a manifest.

    Per-case seeds are spawned from the cohort seed, so the same (cfg, n, seed)
    triple regenerates the cohort byte-for-byte. Rows carry dataset tag
    "phantom" and, when labeled, a burden class from the median split on
    foreground voxel count.
    """
    if n_cases < 1:
        raise ValueError("n_cases must be >= 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    children = np.random.SeedSequence(seed).spawn(n_cases)

    rows = []
    counts: Dict[str, int] = {}
    for i in range(n_cases):
        case_seed = int(children[i].generate_state(1, dtype=np.uint32)[0])
        case_cfg = dataclasses.replace(cfg, seed=case_seed)
        vol, lbl, _ = generate_phantom(case_cfg)
        cid = f"case_{i:03d}"
        img_name = f"{cid}_img.nii.gz"
        write_nifti(vol, out_dir / img_name)
        row: dict = {"id": cid, "dataset": "phantom", "image": img_name}
        if labeled:
            lbl_name = f"{cid}_lbl.nii.gz"
            write_nifti(lbl, out_dir / lbl_name)
            row["labels"] = lbl_name
            counts[cid] = int(np.count_nonzero(lbl.data))
        if cfg.n_wmh_blobs > 0:
            wmh_name = f"{cid}_wmh.nii.gz"
            write_nifti(wmh_blob_probability(case_cfg), out_dir / wmh_name)
            row["wmh"] = wmh_name
        rows.append(row)

    if labeled:
        burden = _burden_split(counts)
        for row in rows:
            row["burden"] = burden[row["id"]]

    fingerprint = config_fingerprint(
        {"phantom": cfg.to_dict(), "n_cases": n_cases, "seed": seed}
    )
    manifest = Manifest(
        cases=tuple(ManifestCase.from_dict(r) for r in rows),
        config_fingerprint=fingerprint,
        root=out_dir,
    )
    save_manifest(manifest, out_dir / "manifest.json")
    return manifest
