"""Residual-encoder 3D U-Net on a flat named-parameter vector, plus the
partial dice + cross-entropy loss and exact reverse-mode gradients.

Topology (all convs 3x3x3 pad 1 unless stated, norm = instance norm eps 1e-5,
activation = leaky rectifier slope 0.01):

* stem: conv(in -> ch0) -> norm -> act
* encoder level l: for l >= 1 a stride-2 conv(ch(l-1) -> ch(l)) -> norm -> act,
  then ``blocks_per_stage`` residual units at ch(l); one unit is
  conv -> norm -> act -> conv -> norm, added to its input, then act.
* decoder level l (stages-2 .. 0): transposed conv(ch(l+1) -> ch(l), kernel 2
  stride 2), concat with the encoder output of level l, then
  ``blocks_per_stage`` plain units conv -> norm -> act (first conv takes the
  concatenated 2*ch(l) channels).
* head: 1x1x1 conv(ch0 -> num_classes), no activation.

Channel widths follow ch(l) = min(base_channels * 2**l, 64).

Parameters live in one flat float64 vector with named segments in build
order; the count is a pure function of NetConfig. torch supplies the conv
kernels and reverse-mode differentiation; initialization is drawn from a
seeded numpy generator so checkpoints are torch-version independent.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .annotation import LabelScheme

torch.set_num_threads(1)

LEAKY_SLOPE = 0.01
NORM_EPS = 1e-5
LOG_EPS = 1e-12
MAX_CHANNELS = 64


@dataclass(frozen=True)
class NetConfig:
    in_channels: int = 1
    num_classes: int = 3
    stages: int = 4
    base_channels: int = 8
    patch_size: Tuple[int, int, int] = (32, 32, 32)
    blocks_per_stage: int = 2

    def __post_init__(self) -> None:
        object.__setattr__(self, "patch_size", tuple(int(p) for p in self.patch_size))
        for name in ("in_channels", "num_classes", "stages", "base_channels", "blocks_per_stage"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if len(self.patch_size) != 3 or any(p < 1 for p in self.patch_size):
            raise ValueError(f"patch_size must be 3 positive integers, got {self.patch_size}")
        div = 2 ** (self.stages - 1)
        if any(p % div for p in self.patch_size):
            raise ValueError(
                f"patch_size {self.patch_size} must be divisible by 2**(stages-1) = {div}"
            )

    def channels(self, level: int) -> int:
        return min(self.base_channels * 2 ** level, MAX_CHANNELS)

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "num_classes": self.num_classes,
            "stages": self.stages,
            "base_channels": self.base_channels,
            "patch_size": list(self.patch_size),
            "blocks_per_stage": self.blocks_per_stage,
        }

    @staticmethod
    def from_dict(d: dict) -> "NetConfig":
        kwargs = dict(d)
        if "patch_size" in kwargs:
            kwargs["patch_size"] = tuple(kwargs["patch_size"])
        return NetConfig(**kwargs)


def param_index(cfg: NetConfig) -> List[Tuple[str, Tuple[int, ...]]]:
    """Named parameter segments in canonical (build) order."""
    idx: List[Tuple[str, Tuple[int, ...]]] = []

    def conv(name: str, cin: int, cout: int, k: int) -> None:
        idx.append((f"{name}.w", (cout, cin, k, k, k)))
        idx.append((f"{name}.b", (cout,)))

    def norm(name: str, c: int) -> None:
        idx.append((f"{name}.g", (c,)))
        idx.append((f"{name}.b", (c,)))

    def res_unit(name: str, c: int) -> None:
        conv(f"{name}.conv1", c, c, 3)
        norm(f"{name}.norm1", c)
        conv(f"{name}.conv2", c, c, 3)
        norm(f"{name}.norm2", c)

    conv("stem.conv", cfg.in_channels, cfg.channels(0), 3)
    norm("stem.norm", cfg.channels(0))
    for m in range(cfg.blocks_per_stage):
        res_unit(f"enc0.res{m}", cfg.channels(0))
    for l in range(1, cfg.stages):
        conv(f"enc{l}.down.conv", cfg.channels(l - 1), cfg.channels(l), 3)
        norm(f"enc{l}.down.norm", cfg.channels(l))
        for m in range(cfg.blocks_per_stage):
            res_unit(f"enc{l}.res{m}", cfg.channels(l))
    for l in range(cfg.stages - 2, -1, -1):
        # transposed conv weight layout: (in, out, 2, 2, 2)
        idx.append((f"dec{l}.up.w", (cfg.channels(l + 1), cfg.channels(l), 2, 2, 2)))
        idx.append((f"dec{l}.up.b", (cfg.channels(l),)))
        for m in range(cfg.blocks_per_stage):
            cin = 2 * cfg.channels(l) if m == 0 else cfg.channels(l)
            conv(f"dec{l}.conv{m}", cin, cfg.channels(l), 3)
            norm(f"dec{l}.norm{m}", cfg.channels(l))
    conv("head", cfg.channels(0), cfg.num_classes, 1)
    return idx


def param_count(cfg: NetConfig) -> int:
    return sum(int(np.prod(shape)) for _, shape in param_index(cfg))


@dataclass(frozen=True)
class NetModel:
    cfg: NetConfig
    params: np.ndarray  # flat float64 vector in param_index order

    def __post_init__(self) -> None:
        params = np.asarray(self.params, dtype=np.float64).reshape(-1)
        expected = param_count(self.cfg)
        if params.size != expected:
            raise ValueError(f"parameter vector has {params.size} entries, expected {expected}")
        if not np.all(np.isfinite(params)):
            raise ValueError("parameters must be finite")
        object.__setattr__(self, "params", params)

    def segments(self) -> Dict[str, np.ndarray]:
        out: Dict[str, np.ndarray] = {}
        offset = 0
        for name, shape in param_index(self.cfg):
            size = int(np.prod(shape))
            out[name] = self.params[offset : offset + size].reshape(shape)
            offset += size
        return out


def _fan_in(name: str, shape: Tuple[int, ...]) -> int:
    if ".up.w" in name:
        # stride equals kernel: each output voxel sees each input channel once
        return shape[0]
    return int(np.prod(shape[1:]))


def build_model(cfg: NetConfig, seed: int = 0) -> NetModel:
    """He fan-in normal kernels, zero biases, unit norm scales; drawn from a
    seeded generator in canonical segment order (bitwise reproducible)."""
    rng = np.random.default_rng(seed)
    parts = []
    for name, shape in param_index(cfg):
        if name.endswith(".w"):
            std = np.sqrt(2.0 / _fan_in(name, shape))
            parts.append(rng.normal(0.0, std, size=shape).ravel())
        elif name.endswith(".g"):
            parts.append(np.ones(shape).ravel())
        else:  # biases and norm shifts
            parts.append(np.zeros(shape).ravel())
    return NetModel(cfg, np.concatenate(parts))


def _torch_segments(cfg: NetConfig, flat: torch.Tensor) -> Dict[str, torch.Tensor]:
    segs: Dict[str, torch.Tensor] = {}
    offset = 0
    for name, shape in param_index(cfg):
        size = int(np.prod(shape))
        segs[name] = flat[offset : offset + size].reshape(shape)
        offset += size
    return segs


def _forward_graph(cfg: NetConfig, flat: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    p = _torch_segments(cfg, flat)

    def act(t):
        return F.leaky_relu(t, LEAKY_SLOPE)

    def norm(t, name):
        return F.instance_norm(t, weight=p[f"{name}.g"], bias=p[f"{name}.b"], eps=NORM_EPS)

    def conv(t, name, stride=1, pad=1):
        return F.conv3d(t, p[f"{name}.w"], p[f"{name}.b"], stride=stride, padding=pad)

    def res_unit(t, name):
        y = act(norm(conv(t, f"{name}.conv1"), f"{name}.norm1"))
        y = norm(conv(y, f"{name}.conv2"), f"{name}.norm2")
        return act(t + y)

    x = act(norm(conv(x, "stem.conv"), "stem.norm"))
    for m in range(cfg.blocks_per_stage):
        x = res_unit(x, f"enc0.res{m}")
    skips = [x]
    for l in range(1, cfg.stages):
        x = act(norm(conv(x, f"enc{l}.down.conv", stride=2), f"enc{l}.down.norm"))
        for m in range(cfg.blocks_per_stage):
            x = res_unit(x, f"enc{l}.res{m}")
        skips.append(x)
    for l in range(cfg.stages - 2, -1, -1):
        x = F.conv_transpose3d(x, p[f"dec{l}.up.w"], p[f"dec{l}.up.b"], stride=2)
        x = torch.cat([x, skips[l]], dim=1)
        for m in range(cfg.blocks_per_stage):
            x = act(norm(conv(x, f"dec{l}.conv{m}"), f"dec{l}.norm{m}"))
    return F.conv3d(x, p["head.w"], p["head.b"])


def _check_patch(cfg: NetConfig, patch: np.ndarray) -> np.ndarray:
    patch = np.asarray(patch)
    if patch.ndim == 4:
        patch = patch[None]
    if patch.ndim != 5 or patch.shape[1] != cfg.in_channels:
        raise ValueError(
            f"patch must be (batch, {cfg.in_channels}, *spatial), got {patch.shape}"
        )
    if tuple(patch.shape[2:]) != cfg.patch_size:
        raise ValueError(f"patch spatial dims {patch.shape[2:]} != patch_size {cfg.patch_size}")
    if not np.all(np.isfinite(patch)):
        raise ValueError("patch values must be finite")
    return patch


def forward(model: NetModel, patch: np.ndarray, dtype=np.float32) -> np.ndarray:
    """Logits of shape (batch, num_classes, *patch_size)."""
    patch = _check_patch(model.cfg, patch)
    tdt = torch.float64 if np.dtype(dtype) == np.float64 else torch.float32
    with torch.no_grad():
        flat = torch.from_numpy(model.params).to(tdt)
        x = torch.from_numpy(np.ascontiguousarray(patch)).to(tdt)
        logits = _forward_graph(model.cfg, flat, x)
    return logits.numpy()


def softmax_probs(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


@dataclass(frozen=True)
class LossInputs:
    """Per-voxel softmax output u and one-hot target v, shape (batch,
    num_classes, n_voxels); ignore_mask (batch, n_voxels) marks voxels
    excluded from every sum; foreground holds the dice class-channel set."""

    u: np.ndarray
    v: np.ndarray
    ignore_mask: np.ndarray
    foreground: Tuple[int, ...]

    def __post_init__(self) -> None:
        u = np.asarray(self.u, dtype=np.float64)
        v = np.asarray(self.v, dtype=np.float64)
        if u.ndim > 3:
            u = u.reshape(u.shape[0], u.shape[1], -1)
            v = v.reshape(v.shape[0], v.shape[1], -1)
        ignore = np.asarray(self.ignore_mask, dtype=bool).reshape(u.shape[0], -1)
        if u.shape != v.shape or u.ndim != 3 or ignore.shape != (u.shape[0], u.shape[2]):
            raise ValueError("u/v must be (batch, classes, voxels) with matching ignore mask")
        if np.any(u < 0) or not np.allclose(u.sum(axis=1), 1.0, atol=1e-6):
            raise ValueError("u must be a softmax output: non-negative, summing to 1 per voxel")
        kept = ~ignore
        vk = v[:, :, :].transpose(1, 0, 2)[:, kept]
        if vk.size and not (
            np.all((vk == 0) | (vk == 1)) and np.allclose(vk.sum(axis=0), 1.0)
        ):
            raise ValueError("v must be one-hot on non-ignored voxels")
        fg = tuple(int(k) for k in self.foreground)
        if not fg or any(not 0 <= k < u.shape[1] for k in fg):
            raise ValueError(f"foreground channels {fg} out of range for {u.shape[1]} classes")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "ignore_mask", ignore)
        object.__setattr__(self, "foreground", fg)


def loss_inputs(probs: np.ndarray, labels: np.ndarray, scheme: LabelScheme) -> LossInputs:
    """Build LossInputs from softmax probabilities and integer labels; voxels
    labeled with the scheme's ignore id are excluded."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.ndim == labels.ndim:  # unbatched
        probs = probs[None]
        labels = labels[None]
    b, k = probs.shape[:2]
    u = probs.reshape(b, k, -1)
    lab = labels.reshape(b, -1)
    if lab.shape[1] != u.shape[2]:
        raise ValueError("label voxel count does not match probabilities")
    ignore = lab == scheme.ignore_id
    dense = np.where(ignore, 0, lab)
    if np.any(dense >= k):
        raise ValueError("label id exceeds class-channel count")
    v = np.zeros_like(u)
    np.put_along_axis(v, dense[:, None, :], 1.0, axis=1)
    v[np.broadcast_to(ignore[:, None, :], v.shape)] = 0.0
    return LossInputs(u, v, ignore, scheme.foreground_ids)


def _kept(li: LossInputs) -> np.ndarray:
    kept = ~li.ignore_mask
    if not kept.any():
        raise ValueError("all voxels ignored; loss undefined")
    return kept


def dice_loss(li: LossInputs) -> float:
    """-(2/|K|) * sum_k intersection_k / (sum u_k + sum v_k) over foreground
    classes K and non-ignored voxels; zero-denominator classes contribute 0."""
    kept = _kept(li)
    w = kept[:, None, :].astype(np.float64)
    total = 0.0
    for k in li.foreground:
        num = float((li.u[:, k, :] * li.v[:, k, :] * w[:, 0, :]).sum())
        den = float((li.u[:, k, :] * w[:, 0, :]).sum() + (li.v[:, k, :] * w[:, 0, :]).sum())
        if den > 0.0:
            total += num / den
    return -2.0 / len(li.foreground) * total


def cross_entropy_loss(li: LossInputs) -> float:
    """Mean over non-ignored voxels of -log u at the true class (all classes
    participate, background included); u clamped at 1e-12 inside the log."""
    kept = _kept(li)
    u_true = (li.u * li.v).sum(axis=1)[kept]
    return float(-np.log(np.maximum(u_true, LOG_EPS)).mean())


def total_loss(li: LossInputs) -> float:
    return dice_loss(li) + cross_entropy_loss(li)


def _losses_graph(
    logits: torch.Tensor,
    labels: torch.Tensor,
    ignore_id: int,
    foreground: Sequence[int],
) -> torch.Tensor:
    """total_loss inside the autograd graph; same formulas as the numpy path."""
    b, k = logits.shape[:2]
    u = torch.softmax(logits.reshape(b, k, -1), dim=1)
    lab = labels.reshape(b, -1)
    kept = lab != ignore_id
    if not bool(kept.any()):
        raise ValueError("all voxels ignored; loss undefined")
    dense = torch.where(kept, lab, torch.zeros_like(lab))
    v = F.one_hot(dense.long(), num_classes=k).permute(0, 2, 1).to(u.dtype)
    v = v * kept[:, None, :].to(u.dtype)
    w = kept[:, None, :].to(u.dtype)

    dice = u.new_zeros(())
    for kk in foreground:
        num = (u[:, kk, :] * v[:, kk, :] * w[:, 0, :]).sum()
        den = (u[:, kk, :] * w[:, 0, :]).sum() + (v[:, kk, :] * w[:, 0, :]).sum()
        if den.detach().item() > 0.0:
            dice = dice + num / den
    dice = -2.0 / len(foreground) * dice

    u_true = (u * v).sum(dim=1)[kept]
    ce = -torch.log(torch.clamp(u_true, min=LOG_EPS)).mean()
    return dice + ce


def loss_and_gradients(
    model: NetModel,
    patch: np.ndarray,
    labels: np.ndarray,
    scheme: LabelScheme,
    dtype=np.float32,
) -> Tuple[float, np.ndarray]:
    """(total loss, d loss / d params) for one batch; exact reverse-mode."""
    patch = _check_patch(model.cfg, patch)
    labels = np.asarray(labels)
    if labels.ndim == 3:
        labels = labels[None]
    if labels.shape[0] != patch.shape[0] or tuple(labels.shape[1:]) != model.cfg.patch_size:
        raise ValueError(f"labels shape {labels.shape} does not match patch batch")
    tdt = torch.float64 if np.dtype(dtype) == np.float64 else torch.float32
    flat = torch.from_numpy(model.params).to(tdt).requires_grad_(True)
    x = torch.from_numpy(np.ascontiguousarray(patch)).to(tdt)
    lab = torch.from_numpy(np.ascontiguousarray(labels.astype(np.int64)))
    logits = _forward_graph(model.cfg, flat, x)
    loss = _losses_graph(logits, lab, scheme.ignore_id, scheme.foreground_ids)
    loss.backward()
    grad = flat.grad.detach().to(torch.float64).numpy().copy()
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite gradient")
    return float(loss.detach()), grad


def gradients(
    model: NetModel,
    patch: np.ndarray,
    labels: np.ndarray,
    scheme: LabelScheme,
    dtype=np.float64,
) -> np.ndarray:
    return loss_and_gradients(model, patch, labels, scheme, dtype=dtype)[1]


CHECKPOINT_VERSION = 1


def save_checkpoint(
    model: NetModel,
    path,
    epoch: int = 0,
    meta: Optional[dict] = None,
    arrays: Optional[Dict[str, np.ndarray]] = None,
) -> None:
    """Single .npz holding the flat float64 parameter vector, a JSON metadata
    record (net config, epoch, anything the caller adds), and optional extra
    arrays such as optimizer moments; round trips bit-exactly."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {"version": CHECKPOINT_VERSION, "net": model.cfg.to_dict(), "epoch": int(epoch)}
    doc.update(meta or {})
    payload = {f"extra_{k}": v for k, v in (arrays or {}).items()}
    payload["params"] = model.params
    payload["meta"] = np.frombuffer(json.dumps(doc, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_checkpoint(path) -> Tuple[NetModel, dict, Dict[str, np.ndarray]]:
    with np.load(path) as npz:
        params = npz["params"]
        doc = json.loads(bytes(npz["meta"]).decode("utf-8"))
        arrays = {k[6:]: npz[k] for k in npz.files if k.startswith("extra_")}
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
    model = NetModel(NetConfig.from_dict(doc["net"]), params)
    return model, doc, arrays
