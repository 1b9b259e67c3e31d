"""Case manifests and the canonical JSON conventions shared by every command.

A manifest is a JSON document listing cases (image paths plus optional labels,
second channel, parcellation, WMH map, sparse-annotation slice list, burden
class, and provenance). Paths are stored relative to the manifest file and
resolved at load. Every manifest written by a pipeline step embeds the SHA-256
fingerprint of the config that produced it, so downstream steps can refuse to
mix incompatible preprocessing.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Tuple

from .nifti import read_nifti_header

BURDEN_VALUES = ("high", "low")
PROVENANCE_VALUES = ("gold", "pseudo")


def canonical_json(obj) -> str:
    """Stable serialization: sorted keys, two-space indent, trailing newline."""
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def config_fingerprint(cfg_dict: dict) -> str:
    return hashlib.sha256(canonical_json(cfg_dict).encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class ManifestCase:
    id: str
    dataset: str
    image: str
    image2: Optional[str] = None
    labels: Optional[str] = None
    parcellation: Optional[str] = None
    wmh: Optional[str] = None
    annotated_slices: Optional[Tuple[int, ...]] = None
    burden: Optional[str] = None
    provenance: str = "gold"

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("case id must be non-empty")
        if self.burden is not None and self.burden not in BURDEN_VALUES:
            raise ValueError(f"burden must be one of {BURDEN_VALUES}, got {self.burden!r}")
        if self.provenance not in PROVENANCE_VALUES:
            raise ValueError(f"provenance must be one of {PROVENANCE_VALUES}, got {self.provenance!r}")
        if self.annotated_slices is not None:
            object.__setattr__(self, "annotated_slices", tuple(int(s) for s in self.annotated_slices))

    def to_dict(self) -> dict:
        d = {"id": self.id, "dataset": self.dataset, "image": self.image, "provenance": self.provenance}
        for key in ("image2", "labels", "parcellation", "wmh", "burden"):
            val = getattr(self, key)
            if val is not None:
                d[key] = val
        if self.annotated_slices is not None:
            d["annotated_slices"] = list(self.annotated_slices)
        return d

    @staticmethod
    def from_dict(d: dict) -> "ManifestCase":
        return ManifestCase(
            id=d["id"],
            dataset=d["dataset"],
            image=d["image"],
            image2=d.get("image2"),
            labels=d.get("labels"),
            parcellation=d.get("parcellation"),
            wmh=d.get("wmh"),
            annotated_slices=tuple(d["annotated_slices"]) if "annotated_slices" in d else None,
            burden=d.get("burden"),
            provenance=d.get("provenance", "gold"),
        )


@dataclass(frozen=True)
class Manifest:
    cases: Tuple[ManifestCase, ...]
    config_fingerprint: str = ""
    # directory used to resolve relative case paths; set on load/save
    root: Optional[Path] = field(default=None, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "cases", tuple(self.cases))
        ids = [c.id for c in self.cases]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise ValueError(f"duplicate case ids: {dupes}")

    def __len__(self) -> int:
        return len(self.cases)

    def case(self, case_id: str) -> ManifestCase:
        for c in self.cases:
            if c.id == case_id:
                return c
        raise KeyError(case_id)

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        if p.is_absolute() or self.root is None:
            return p
        return self.root / p

    def to_dict(self) -> dict:
        return {
            "config_fingerprint": self.config_fingerprint,
            "cases": [c.to_dict() for c in self.cases],
        }


def save_manifest(manifest: Manifest, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(canonical_json(manifest.to_dict()), encoding="utf-8")


def load_manifest(path, check_files: bool = True) -> Manifest:
    """Parse and validate a manifest. With ``check_files`` every referenced
    file must exist and, when a second channel is present, sit on the same
    grid as the primary image."""
    path = Path(path)
    doc = json.loads(path.read_text(encoding="utf-8"))
    cases = tuple(ManifestCase.from_dict(d) for d in doc.get("cases", []))
    manifest = Manifest(
        cases=cases,
        config_fingerprint=doc.get("config_fingerprint", ""),
        root=path.parent,
    )
    if check_files:
        _check_case_files(manifest)
    return manifest


def _check_case_files(manifest: Manifest) -> None:
    for case in manifest.cases:
        for key in ("image", "image2", "labels", "parcellation", "wmh"):
            rel = getattr(case, key)
            if rel is None:
                continue
            p = manifest.resolve(rel)
            if not p.exists():
                raise FileNotFoundError(f"case {case.id}: missing {key} file {p}")
        if case.image2 is not None:
            d1, s1 = read_nifti_header(manifest.resolve(case.image))
            d2, s2 = read_nifti_header(manifest.resolve(case.image2))
            if d1 != d2 or s1 != s2:
                raise ValueError(
                    f"case {case.id}: image2 grid {d2}/{s2} does not match image grid {d1}/{s1}"
                )


def replace_cases(manifest: Manifest, cases: Sequence[ManifestCase], fingerprint: Optional[str] = None) -> Manifest:
    return Manifest(
        cases=tuple(cases),
        config_fingerprint=manifest.config_fingerprint if fingerprint is None else fingerprint,
        root=manifest.root,
    )
