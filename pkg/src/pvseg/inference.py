"""Sliding-window whole-volume inference and the pseudo-label round.

Windows tile the volume with 50% overlap per axis (edge windows clamped
inside), each window's softmax is blended under a Gaussian importance weight
peaked at the window center (sigma = patch/8), and the per-voxel class with
the highest accumulated score wins. Volumes smaller than the patch are
zero-padded, inferred, and cropped back.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .network import NetModel, forward, softmax_probs
from .volume import LabelMap, Volume


def window_starts(dim: int, patch: int) -> List[int]:
    """Start offsets covering [0, dim) with 50% overlap; the last window is
    clamped to end exactly at the volume edge."""
    if dim < patch:
        raise ValueError(f"dimension {dim} smaller than patch {patch}")
    stride = max(patch // 2, 1)
    starts = list(range(0, dim - patch + 1, stride))
    if starts[-1] != dim - patch:
        starts.append(dim - patch)
    return starts


def gaussian_window_weight(patch_size: Tuple[int, int, int]) -> np.ndarray:
    """Separable Gaussian importance map, peak 1 at the window center,
    sigma = patch/8 per axis."""
    axes = []
    for p in patch_size:
        center = (p - 1) / 2.0
        sigma = p / 8.0
        x = np.arange(p, dtype=np.float64)
        axes.append(np.exp(-0.5 * ((x - center) / sigma) ** 2))
    w = axes[0][:, None, None] * axes[1][None, :, None] * axes[2][None, None, :]
    return w


def infer_channels(
    model: NetModel,
    channels: np.ndarray,
    spacing: Tuple[float, float, float],
    affine: Optional[np.ndarray] = None,
) -> LabelMap:
    """Segment one preprocessed multi-channel volume (channels, *spatial)."""
    channels = np.asarray(channels, dtype=np.float32)
    if channels.ndim == 3:
        channels = channels[None]
    if channels.ndim != 4 or channels.shape[0] != model.cfg.in_channels:
        raise ValueError(
            f"expected ({model.cfg.in_channels}, *spatial) input, got {channels.shape}"
        )
    patch = model.cfg.patch_size
    dims = channels.shape[1:]

    pad = [max(p - d, 0) for p, d in zip(patch, dims)]
    if any(pad):
        channels = np.pad(
            channels, [(0, 0)] + [(0, p) for p in pad], mode="constant", constant_values=0.0
        )
    padded_dims = channels.shape[1:]

    k = model.cfg.num_classes
    scores = np.zeros((k, *padded_dims), dtype=np.float64)
    weight_sum = np.zeros(padded_dims, dtype=np.float64)
    w = gaussian_window_weight(patch)

    for sx in window_starts(padded_dims[0], patch[0]):
        for sy in window_starts(padded_dims[1], patch[1]):
            for sz in window_starts(padded_dims[2], patch[2]):
                sl = (slice(sx, sx + patch[0]), slice(sy, sy + patch[1]), slice(sz, sz + patch[2]))
                logits = forward(model, channels[(slice(None), *sl)][None])
                probs = softmax_probs(logits.astype(np.float64))[0]
                scores[(slice(None), *sl)] += probs * w[None]
                weight_sum[sl] += w

    labels = np.argmax(scores / weight_sum[None], axis=0).astype(np.uint8)
    if any(pad):
        labels = labels[: dims[0], : dims[1], : dims[2]]
    return LabelMap(labels, spacing, np.eye(4) if affine is None else affine)


def infer(model: NetModel, vol: Volume) -> LabelMap:
    """Segment one preprocessed single-channel Volume."""
    return infer_channels(model, vol.data[None], vol.spacing, vol.affine)


@dataclass(frozen=True)
class PseudoLabelResult:
    written: List[dict]  # manifest rows for the new label files
    failures: List[Tuple[str, str]]  # (case id, reason)


def pseudo_label_round(
    model: NetModel,
    cases: Sequence[dict],
    out_dir,
    load_channels,
) -> PseudoLabelResult:
    """Infer every case and write its predicted labels to ``out_dir``.

    ``cases`` are manifest rows (dicts with at least id/image); the caller
    supplies ``load_channels(row) -> (channels, spacing, affine)`` so this
    module stays free of manifest path resolution. Output rows replicate the
    input row plus labels path and provenance "pseudo". Per-case failures are
    collected, not fatal.
    """
    from .nifti import write_nifti

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: List[dict] = []
    failures: List[Tuple[str, str]] = []
    for row in cases:
        cid = row["id"]
        try:
            channels, spacing, affine = load_channels(row)
            pred = infer_channels(model, channels, spacing, affine)
            name = f"{cid}_pseudo.nii.gz"
            write_nifti(pred, out_dir / name)
            new_row = dict(row)
            new_row["labels"] = name
            new_row["provenance"] = "pseudo"
            written.append(new_row)
        except Exception as exc:  # per-case isolation
            failures.append((cid, str(exc)))
    return PseudoLabelResult(written, failures)


def merge_training_set(
    gold: Sequence[dict],
    pseudo: Sequence[dict],
    validation_ids: Sequence[str] = (),
) -> List[dict]:
    """Union of gold training rows and pseudo rows. An id collision with a
    training row, or with a held-out validation id, signals leakage and
    raises."""
    gold_ids = {row["id"] for row in gold}
    held_out = set(validation_ids)
    merged = list(gold)
    for row in pseudo:
        if row["id"] in gold_ids:
            raise ValueError(f"pseudo case {row['id']} collides with a gold case id")
        if row["id"] in held_out:
            raise ValueError(f"pseudo case {row['id']} is a held-out validation case")
        merged.append(row)
    return merged
