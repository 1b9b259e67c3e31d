"""Patch sampling, Adam with bias correction, the plateau-triggered learning
rate schedule, and the epoch training loop.

The schedule tracks an exponential moving average of the per-epoch training
loss (alpha 0.9, seeded with the first epoch's loss); when the EMA has not
improved by at least 5e-3 within the last 30 epochs the learning rate drops
by a factor of 5 and the patience counter resets.

Training is bitwise reproducible from (seed, data, config): all randomness
flows through one generator, gradient evaluation is single-threaded, and
parameters update in float64.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .annotation import LabelScheme
from .augment import AugmentConfig, augment
from .network import NetConfig, NetModel, build_model, load_checkpoint, loss_and_gradients, save_checkpoint


@dataclass(frozen=True)
class TrainConfig:
    initial_lr: float = 3e-4
    batch_size: int = 2
    batches_per_epoch: int = 250
    epochs: int = 1000
    lr_decay_factor: float = 5.0
    lr_patience_epochs: int = 30
    lr_min_improvement: float = 5e-3
    ema_alpha: float = 0.9
    fg_oversample: float = 0.33
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self) -> None:
        if self.initial_lr <= 0 or self.adam_eps <= 0:
            raise ValueError("initial_lr and adam_eps must be positive")
        if min(self.batch_size, self.batches_per_epoch, self.lr_patience_epochs) < 1:
            raise ValueError("batch_size, batches_per_epoch, lr_patience_epochs must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.lr_decay_factor <= 1.0:
            raise ValueError("lr_decay_factor must exceed 1")
        if self.lr_min_improvement < 0.0:
            raise ValueError("lr_min_improvement must be non-negative")
        if not 0.0 < self.ema_alpha < 1.0:
            raise ValueError("ema_alpha must lie strictly in (0, 1)")
        if not 0.0 <= self.fg_oversample <= 1.0:
            raise ValueError("fg_oversample must lie in [0, 1]")
        for b in (self.adam_beta1, self.adam_beta2):
            if not 0.0 <= b < 1.0:
                raise ValueError("adam betas must lie in [0, 1)")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        return TrainConfig(**d)


@dataclass(frozen=True)
class LRState:
    current_lr: float
    ema_history: Tuple[float, ...] = ()
    best_ema: float = float("inf")
    epochs_since_improvement: int = 0

    @property
    def ema(self) -> Optional[float]:
        return self.ema_history[-1] if self.ema_history else None


def lr_update(state: LRState, epoch_loss: float, cfg: TrainConfig) -> LRState:
    """Append the EMA of ``epoch_loss`` and decay the learning rate after
    ``lr_patience_epochs`` epochs without an improvement of at least
    ``lr_min_improvement`` over the best EMA seen."""
    if not np.isfinite(epoch_loss):
        raise ValueError(f"epoch loss must be finite, got {epoch_loss}")
    if state.ema_history:
        ema = cfg.ema_alpha * state.ema_history[-1] + (1.0 - cfg.ema_alpha) * epoch_loss
    else:
        ema = float(epoch_loss)
    if ema < state.best_ema - cfg.lr_min_improvement:
        best, counter = ema, 0
    else:
        best, counter = state.best_ema, state.epochs_since_improvement + 1
    lr = state.current_lr
    if counter >= cfg.lr_patience_epochs:
        lr = lr / cfg.lr_decay_factor
        counter = 0
    return LRState(lr, state.ema_history + (ema,), best, counter)


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int

    @staticmethod
    def zeros(n: int) -> "AdamState":
        return AdamState(np.zeros(n), np.zeros(n), 0)


def adam_step(
    model: NetModel,
    grads: np.ndarray,
    state: AdamState,
    lr: float,
    cfg: TrainConfig,
) -> Tuple[NetModel, AdamState]:
    """One bias-corrected Adam update in float64."""
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != model.params.shape:
        raise ValueError(f"gradient shape {grads.shape} != parameter shape {model.params.shape}")
    if not np.all(np.isfinite(grads)):
        raise FloatingPointError("non-finite gradient entering the optimizer")
    t = state.t + 1
    m = cfg.adam_beta1 * state.m + (1.0 - cfg.adam_beta1) * grads
    v = cfg.adam_beta2 * state.v + (1.0 - cfg.adam_beta2) * grads ** 2
    m_hat = m / (1.0 - cfg.adam_beta1 ** t)
    v_hat = v / (1.0 - cfg.adam_beta2 ** t)
    params = model.params - lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
    return NetModel(model.cfg, params), AdamState(m, v, t)


@dataclass(frozen=True)
class TrainingCase:
    """In-memory case: image (channels, *spatial) and labels (*spatial)."""

    id: str
    image: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        image = np.asarray(self.image, dtype=np.float32)
        if image.ndim == 3:
            image = image[None]
        labels = np.asarray(self.labels)
        if image.ndim != 4 or labels.ndim != 3 or image.shape[1:] != labels.shape:
            raise ValueError(
                f"case {self.id}: image {image.shape} and labels {labels.shape} do not pair"
            )
        object.__setattr__(self, "image", image)
        object.__setattr__(self, "labels", labels)


def sample_patch(
    case: TrainingCase,
    patch_size: Tuple[int, int, int],
    fg_oversample: float,
    rng: np.random.Generator,
    scheme: Optional[LabelScheme] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """Crop one patch around a random center: with probability
    ``fg_oversample`` the center is a uniformly drawn foreground voxel
    (non-background, non-ignore), otherwise uniform over the volume. Regions
    outside the volume pad with 0 (image) and the ignore id (labels)."""
    scheme = scheme or LabelScheme.pvs_only()
    dims = case.labels.shape
    bg = scheme.class_ids["background"]
    center = None
    if fg_oversample > 0.0 and rng.random() < fg_oversample:
        fg = np.argwhere((case.labels != bg) & (case.labels != scheme.ignore_id))
        if len(fg):
            center = fg[rng.integers(len(fg))]
    if center is None:
        center = np.array([rng.integers(d) for d in dims])

    img = np.zeros((case.image.shape[0], *patch_size), dtype=np.float32)
    lbl = np.full(patch_size, scheme.ignore_id, dtype=case.labels.dtype)
    src, dst = [], []
    for a in range(3):
        start = int(center[a]) - patch_size[a] // 2
        s0, s1 = max(start, 0), min(start + patch_size[a], dims[a])
        src.append(slice(s0, s1))
        dst.append(slice(s0 - start, s1 - start))
    if all(s.stop > s.start for s in src):
        img[(slice(None), *dst)] = case.image[(slice(None), *src)]
        lbl[tuple(dst)] = case.labels[tuple(src)]
    return img, lbl


def _has_labeled_voxel(case: TrainingCase, scheme: LabelScheme) -> bool:
    return bool(np.any(case.labels != scheme.ignore_id))


def train(
    cases: Sequence[TrainingCase],
    net_cfg: NetConfig,
    train_cfg: TrainConfig,
    augment_cfg: Optional[AugmentConfig] = None,
    scheme: Optional[LabelScheme] = None,
    out_dir=None,
    log_path=None,
    resume_from=None,
) -> Tuple[NetModel, List[dict]]:
    """Run the epoch loop and return (final model, per-epoch log records).

    Each step samples ``batch_size`` patches from uniformly chosen cases,
    augments them, and applies one Adam update on the dice + cross-entropy
    gradient. Per epoch one record {epoch, mean_loss, ema, lr} is logged
    (``lr`` is the rate used during that epoch). With ``out_dir`` set,
    ``checkpoint_final.npz`` and ``checkpoint_best.npz`` (lowest EMA) are
    written; ``resume_from`` restores parameters, optimizer moments, the
    schedule, and the epoch counter from a final checkpoint. Each epoch draws
    from a generator keyed by (seed, epoch), so a resumed run continues the
    exact stream a straight-through run would have used.
    """
    scheme = scheme or LabelScheme.pvs_only()
    augment_cfg = augment_cfg or AugmentConfig()
    if not cases:
        raise ValueError("no training cases")
    if not any(_has_labeled_voxel(c, scheme) for c in cases):
        raise ValueError("every training case is fully ignored; nothing to learn from")
    for c in cases:
        if c.image.shape[0] != net_cfg.in_channels:
            raise ValueError(
                f"case {c.id} has {c.image.shape[0]} channels, net expects {net_cfg.in_channels}"
            )

    start_epoch = 0
    if resume_from is not None:
        model, doc, arrays = load_checkpoint(resume_from)
        if model.cfg != net_cfg:
            raise ValueError("checkpoint net config does not match the requested config")
        adam = AdamState(arrays["adam_m"], arrays["adam_v"], int(doc["adam_t"]))
        best = doc["best_ema"]
        lr_state = LRState(
            current_lr=float(doc["lr"]),
            ema_history=tuple(doc["ema_history"]),
            best_ema=float("inf") if best is None else float(best),
            epochs_since_improvement=int(doc["epochs_since_improvement"]),
        )
        start_epoch = int(doc["epoch"]) + 1
    else:
        model = build_model(net_cfg, train_cfg.seed)
        adam = AdamState.zeros(model.params.size)
        lr_state = LRState(current_lr=train_cfg.initial_lr)

    log: List[dict] = []
    log_fh = open(log_path, "a", encoding="utf-8") if log_path else None
    best_saved = lr_state.best_ema
    try:
        for epoch in range(start_epoch, train_cfg.epochs):
            rng = np.random.default_rng([train_cfg.seed, epoch])
            lr_used = lr_state.current_lr
            losses = []
            for _ in range(train_cfg.batches_per_epoch):
                imgs, lbls = [], []
                for _ in range(train_cfg.batch_size):
                    case = cases[rng.integers(len(cases))]
                    img, lbl = sample_patch(
                        case, net_cfg.patch_size, train_cfg.fg_oversample, rng, scheme
                    )
                    img, lbl = augment(img, lbl, augment_cfg, rng)
                    imgs.append(img)
                    lbls.append(lbl)
                batch_img = np.stack(imgs)
                batch_lbl = np.stack(lbls)
                if np.all(batch_lbl == scheme.ignore_id):
                    continue  # no supervision in this draw; skip the step
                loss, grad = loss_and_gradients(model, batch_img, batch_lbl, scheme)
                model, adam = adam_step(model, grad, adam, lr_state.current_lr, train_cfg)
                losses.append(loss)
            if not losses:
                raise RuntimeError(f"epoch {epoch}: every sampled batch was fully ignored")
            mean_loss = float(np.mean(losses))
            lr_state = lr_update(lr_state, mean_loss, train_cfg)
            record = {
                "epoch": epoch,
                "mean_loss": mean_loss,
                "ema": lr_state.ema,
                "lr": lr_used,
            }
            log.append(record)
            if log_fh:
                log_fh.write(json.dumps(record, sort_keys=True) + "\n")
                log_fh.flush()
            if out_dir is not None and lr_state.best_ema < best_saved:
                best_saved = lr_state.best_ema
                _write_checkpoint(model, adam, lr_state, epoch, train_cfg,
                                  Path(out_dir) / "checkpoint_best.npz")
    finally:
        if log_fh:
            log_fh.close()

    if out_dir is not None:
        last = max(train_cfg.epochs, start_epoch) - 1
        _write_checkpoint(model, adam, lr_state, last, train_cfg,
                          Path(out_dir) / "checkpoint_final.npz")
        if not (Path(out_dir) / "checkpoint_best.npz").exists():
            _write_checkpoint(model, adam, lr_state, last, train_cfg,
                              Path(out_dir) / "checkpoint_best.npz")
    return model, log


def _write_checkpoint(model, adam, lr_state, epoch, train_cfg, path) -> None:
    save_checkpoint(
        model,
        path,
        epoch=epoch,
        meta={
            "seed": train_cfg.seed,
            "lr": lr_state.current_lr,
            "ema_history": list(lr_state.ema_history),
            "best_ema": lr_state.best_ema if np.isfinite(lr_state.best_ema) else None,
            "epochs_since_improvement": lr_state.epochs_since_improvement,
            "adam_t": adam.t,
        },
        arrays={"adam_m": adam.m, "adam_v": adam.v},
    )
