"""Whole-pipeline configuration: one JSON-serializable object aggregating
spacing policy, enhancement, label scheme, network, training, augmentation,
and evaluation settings, hashed into the fingerprint that stamps every
derived manifest.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple

from .annotation import LabelScheme
from .augment import AugmentConfig
from .enhance import AHE, EnhanceConfig
from .manifest import config_fingerprint
from .network import NetConfig
from .training import TrainConfig
from .volume import SpacingPolicy


@dataclass(frozen=True)
class EvalConfig:
    connectivity: int = 26
    k_folds: int = 5
    bootstrap_seed: int = 0
    bootstrap_resamples: int = 2000

    def __post_init__(self) -> None:
        if self.connectivity not in (6, 18, 26):
            raise ValueError(f"connectivity must be 6, 18, or 26, got {self.connectivity}")
        if self.k_folds < 2 or self.bootstrap_resamples < 1:
            raise ValueError("k_folds must be >= 2 and bootstrap_resamples >= 1")

    def to_dict(self) -> dict:
        return {
            "connectivity": self.connectivity,
            "k_folds": self.k_folds,
            "bootstrap_seed": self.bootstrap_seed,
            "bootstrap_resamples": self.bootstrap_resamples,
        }

    @staticmethod
    def from_dict(d: dict) -> "EvalConfig":
        return EvalConfig(**d)


def _policy_to_dict(p: SpacingPolicy) -> dict:
    d = {"variant": p.variant}
    if p.variant == "target":
        d["spacing"] = list(p.spacing)
    return d


def _policy_from_dict(d: dict) -> SpacingPolicy:
    if d["variant"] == "agnostic":
        return SpacingPolicy.agnostic()
    return SpacingPolicy.target(tuple(d["spacing"]))


def _scheme_to_dict(s: LabelScheme) -> dict:
    return {"class_ids": dict(s.class_ids), "foreground_ids": list(s.foreground_ids)}


def _scheme_from_dict(d: dict) -> LabelScheme:
    return LabelScheme(
        class_ids={k: int(v) for k, v in d["class_ids"].items()},
        foreground_ids=tuple(d["foreground_ids"]),
    )


def _enhance_to_dict(e: EnhanceConfig) -> dict:
    return {
        "nlm_patch_radius": e.nlm_patch_radius,
        "nlm_block_radius": e.nlm_block_radius,
        "nlm_sigma": e.nlm_sigma,
        "ahe_kernel": list(e.ahe_kernel) if e.ahe_kernel is not None else None,
        "ahe_clip_limit": e.ahe_clip_limit,
        "pipeline_flags": sorted(e.pipeline_flags),
    }


def _enhance_from_dict(d: dict) -> EnhanceConfig:
    kwargs = dict(d)
    if kwargs.get("ahe_kernel") is not None:
        kwargs["ahe_kernel"] = tuple(kwargs["ahe_kernel"])
    kwargs["pipeline_flags"] = frozenset(kwargs.get("pipeline_flags", ()))
    return EnhanceConfig(**kwargs)


@dataclass(frozen=True)
class PipelineConfig:
    spacing_policy: SpacingPolicy = field(default_factory=SpacingPolicy.agnostic)
    enhance: EnhanceConfig = field(default_factory=EnhanceConfig)
    label_scheme: LabelScheme = field(default_factory=LabelScheme.pvs_only)
    net: NetConfig = field(default_factory=NetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @property
    def applies_zscore(self) -> bool:
        """Clipped z-scoring is the default intensity normalization at train
        and inference time, except after adaptive histogram equalization,
        which already fixes the intensity distribution to [0, 1]."""
        return AHE not in self.enhance.pipeline_flags

    def to_dict(self) -> dict:
        return {
            "spacing_policy": _policy_to_dict(self.spacing_policy),
            "enhance": _enhance_to_dict(self.enhance),
            "label_scheme": _scheme_to_dict(self.label_scheme),
            "net": self.net.to_dict(),
            "train": self.train.to_dict(),
            "augment": self.augment.to_dict(),
            "eval": self.eval.to_dict(),
        }

    @staticmethod
    def from_dict(d: dict) -> "PipelineConfig":
        kwargs = {}
        if "spacing_policy" in d:
            kwargs["spacing_policy"] = _policy_from_dict(d["spacing_policy"])
        if "enhance" in d:
            kwargs["enhance"] = _enhance_from_dict(d["enhance"])
        if "label_scheme" in d:
            kwargs["label_scheme"] = _scheme_from_dict(d["label_scheme"])
        if "net" in d:
            kwargs["net"] = NetConfig.from_dict(d["net"])
        if "train" in d:
            kwargs["train"] = TrainConfig.from_dict(d["train"])
        if "augment" in d:
            kwargs["augment"] = AugmentConfig.from_dict(d["augment"])
        if "eval" in d:
            kwargs["eval"] = EvalConfig.from_dict(d["eval"])
        return PipelineConfig(**kwargs)

    def fingerprint(self) -> str:
        return config_fingerprint(self.to_dict())
