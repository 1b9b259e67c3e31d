"""Command-line interface.

Subcommands cover the full workflow: ``phantom`` (synthetic cohorts),
``preprocess`` (spacing policy + enhancement), ``cv-split`` (stratified
folds), ``train``, ``infer`` (sliding-window prediction / pseudo-labels), and
``evaluate`` (metrics report). All state flows through files: JSON manifests
and configs in, NIfTI volumes and JSON reports out. Every derived manifest
embeds the fingerprint of the config that produced it; ``evaluate`` refuses
to compare manifests whose fingerprints differ unless forced.

Exit codes: 0 success, 1 validation failure, 2 partial per-case failure.
Progress and errors are logged as JSON lines on standard error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .annotation import SparseAnnotation, apply_sparse_ignore
from .clusters import connected_components
from .config import PipelineConfig
from .enhance import enhance_pipeline
from .evaluation import (
    FoldAssignment,
    agreement_stats,
    aggregate_report,
    confusion,
    dsc_sen_ppv,
    report_csv,
    stratified_kfold,
)
from .inference import infer_channels
from .manifest import Manifest, ManifestCase, canonical_json, config_fingerprint, load_manifest, save_manifest
from .network import load_checkpoint
from .nifti import read_nifti, write_nifti
from .phantom import PhantomConfig, phantom_cohort
from .training import TrainingCase, train
from .volume import LabelMap, Volume, clip_zscore, resample


def _log(event: str, **fields) -> None:
    rec = {"event": event}
    rec.update(fields)
    print(json.dumps(rec, sort_keys=True, default=str), file=sys.stderr, flush=True)


def _load_config(path: Optional[str]) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return PipelineConfig.from_dict(doc)


def _case_channels(
    manifest: Manifest, case: ManifestCase, zscore: bool
) -> Tuple[np.ndarray, Tuple[float, float, float], np.ndarray]:
    """Stack the case's image channels, optionally z-scoring over the
    nonzero (brain) region."""
    vols: List[Volume] = [read_nifti(manifest.resolve(case.image), kind="image")]
    if case.image2 is not None:
        vols.append(read_nifti(manifest.resolve(case.image2), kind="image"))
    if zscore:
        normed = []
        for v in vols:
            mask = v.data != 0
            normed.append(clip_zscore(v, mask) if mask.any() else v)
        vols = normed
    first = vols[0]
    return np.stack([v.data for v in vols]), first.spacing, first.affine


def cmd_phantom(args) -> int:
    cfg = PhantomConfig()
    labeled = True
    if args.config:
        doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
        cfg = PhantomConfig.from_dict(doc.get("phantom", {}))
        labeled = bool(doc.get("labeled", True))
    manifest = phantom_cohort(cfg, args.n, args.seed, args.out, labeled=labeled)
    _log("phantom_cohort", n=len(manifest), out=args.out, labeled=labeled)
    return 0


def cmd_preprocess(args) -> int:
    cfg = _load_config(args.config)
    manifest = load_manifest(args.manifest)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    fingerprint = cfg.fingerprint()

    rows: List[ManifestCase] = []
    failures = 0
    for case in manifest.cases:
        try:
            rows.append(_preprocess_case(manifest, case, cfg, out_dir))
            _log("preprocessed", case=case.id)
        except Exception as exc:
            failures += 1
            _log("case_failed", case=case.id, error=str(exc))
    out = Manifest(cases=tuple(rows), config_fingerprint=fingerprint, root=out_dir)
    save_manifest(out, out_dir / "manifest.json")
    _log("preprocess_done", cases=len(rows), failed=failures, fingerprint=fingerprint)
    return 2 if failures else 0


def _preprocess_case(
    manifest: Manifest, case: ManifestCase, cfg: PipelineConfig, out_dir: Path
) -> ManifestCase:
    updates: Dict[str, str] = {}

    def emit(obj, tag: str) -> str:
        name = f"{case.id}_{tag}.nii.gz"
        write_nifti(obj, out_dir / name)
        return name

    for key in ("image", "image2"):
        rel = getattr(case, key)
        if rel is None:
            continue
        vol = read_nifti(manifest.resolve(rel), kind="image")
        vol = resample(vol, cfg.spacing_policy, interp="trilinear")
        vol = enhance_pipeline(vol, cfg.enhance)
        updates[key] = emit(vol, "img" if key == "image" else "img2")
    for key in ("labels", "parcellation", "wmh"):
        rel = getattr(case, key)
        if rel is None:
            continue
        kind = "image" if key == "wmh" else "labels"
        obj = read_nifti(manifest.resolve(rel), kind=kind)
        interp = "trilinear" if key == "wmh" else "nearest"
        obj = resample(obj, cfg.spacing_policy, interp=interp)
        updates[key] = emit(obj, key)

    d = case.to_dict()
    d.update(updates)
    return ManifestCase.from_dict(d)


def cmd_cv_split(args) -> int:
    manifest = load_manifest(args.manifest, check_files=False)
    rows = [
        {"id": c.id, "dataset": c.dataset, "burden": c.burden or ""}
        for c in manifest.cases
    ]
    folds = stratified_kfold(rows, k=args.k, seed=args.seed)
    doc = folds.to_dict()
    doc["seed"] = args.seed
    doc["config_fingerprint"] = manifest.config_fingerprint
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(canonical_json(doc), encoding="utf-8")
    _log("cv_split", k=args.k, cases=len(rows), out=args.out)
    return 0


def _load_folds(path) -> FoldAssignment:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return FoldAssignment.from_dict(doc)


def _load_training_case(manifest: Manifest, case: ManifestCase, cfg: PipelineConfig) -> TrainingCase:
    channels, _, _ = _case_channels(manifest, case, cfg.applies_zscore)
    labels = read_nifti(manifest.resolve(case.labels), kind="labels")
    if case.annotated_slices is not None:
        labels = apply_sparse_ignore(labels, SparseAnnotation(frozenset(case.annotated_slices)))
    return TrainingCase(case.id, channels, labels.data)


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    manifest = load_manifest(args.manifest)
    folds = _load_folds(args.folds)
    if not 0 <= args.fold < folds.k:
        _log("error", error=f"fold {args.fold} out of range for k={folds.k}")
        return 1
    train_ids = set(folds.training_ids(args.fold))
    cases = [
        _load_training_case(manifest, c, cfg)
        for c in manifest.cases
        if c.id in train_ids and c.labels is not None
    ]
    if not cases:
        _log("error", error="no labeled training cases in this fold")
        return 1
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _log("train_start", fold=args.fold, cases=len(cases), epochs=cfg.train.epochs)
    model, log = train(
        cases,
        cfg.net,
        cfg.train,
        cfg.augment,
        cfg.label_scheme,
        out_dir=out_dir,
        log_path=out_dir / "training_log.jsonl",
        resume_from=args.checkpoint,
    )
    # stamp lineage onto the final checkpoints for infer/evaluate
    from .network import save_checkpoint

    meta = {
        "config_fingerprint": cfg.fingerprint(),
        "zscore": cfg.applies_zscore,
        "fold": args.fold,
        "seed": cfg.train.seed,
    }
    for name in ("checkpoint_final.npz", "checkpoint_best.npz"):
        p = out_dir / name
        m, doc, arrays = load_checkpoint(p)
        doc.pop("version", None)
        doc.pop("net", None)
        epoch = doc.pop("epoch", 0)
        doc.update(meta)
        save_checkpoint(m, p, epoch=epoch, meta=doc, arrays=arrays)
    _log("train_done", fold=args.fold, epochs_run=len(log),
         final_ema=log[-1]["ema"] if log else None)
    return 0


def cmd_infer(args) -> int:
    model, doc, _ = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    zscore = bool(doc.get("zscore", True))

    rows: List[dict] = []
    failures = 0
    for case in manifest.cases:
        try:
            if (case.image2 is not None) != (model.cfg.in_channels == 2):
                raise ValueError(
                    f"checkpoint expects {model.cfg.in_channels} channel(s); "
                    f"case has {'2' if case.image2 else '1'}"
                )
            channels, spacing, affine = _case_channels(manifest, case, zscore)
            pred = infer_channels(model, channels, spacing, affine)
            name = f"{case.id}_pred.nii.gz"
            write_nifti(pred, out_dir / name)
            row = case.to_dict()
            # image paths stay valid outside the source directory
            for key in ("image", "image2", "parcellation", "wmh"):
                if row.get(key) is not None:
                    row[key] = str(manifest.resolve(row[key]))
            row.pop("annotated_slices", None)  # predictions are dense
            row["labels"] = name
            row["provenance"] = "pseudo"
            rows.append(row)
            _log("inferred", case=case.id)
        except Exception as exc:
            failures += 1
            _log("case_failed", case=case.id, error=str(exc))
    out = Manifest(
        cases=tuple(ManifestCase.from_dict(r) for r in rows),
        config_fingerprint=doc.get("config_fingerprint", manifest.config_fingerprint),
        root=out_dir,
    )
    save_manifest(out, out_dir / "manifest.json")
    _log("infer_done", cases=len(rows), failed=failures)
    return 2 if failures else 0


def cmd_evaluate(args) -> int:
    cfg = _load_config(args.config)
    pred_path, ref_path = args.manifest
    pred_man = load_manifest(pred_path)
    ref_man = load_manifest(ref_path)
    if pred_man.config_fingerprint != ref_man.config_fingerprint:
        if not args.force_fingerprint_mismatch:
            _log(
                "error",
                error="config fingerprint mismatch between manifests",
                pred=pred_man.config_fingerprint,
                ref=ref_man.config_fingerprint,
            )
            return 1
        _log("warning", warning="comparing manifests with mismatched fingerprints")

    scheme = cfg.label_scheme
    class_names = [n for n in scheme.class_ids
                   if scheme.class_ids[n] in scheme.foreground_ids]
    conn = cfg.eval.connectivity

    pred_ids = {c.id for c in pred_man.cases if c.labels is not None}
    ref_ids = {c.id for c in ref_man.cases if c.labels is not None}
    shared = sorted(pred_ids & ref_ids)
    for missing in sorted((pred_ids | ref_ids) - set(shared)):
        _log("warning", warning="case not present with labels in both manifests", case=missing)
    if not shared:
        _log("error", error="no cases to evaluate")
        return 1

    per_case = []
    counts: Dict[str, Dict[str, List[int]]] = {
        n: {"pred": [], "ref": []} for n in class_names
    }
    for cid in shared:
        pred = read_nifti(pred_man.resolve(pred_man.case(cid).labels), kind="labels")
        ref = read_nifti(ref_man.resolve(ref_man.case(cid).labels), kind="labels")
        metrics = {}
        clusters = {}
        for cname in class_names:
            k = scheme.class_ids[cname]
            dsc, sen, ppv = dsc_sen_ppv(confusion(pred, ref, k))
            metrics[cname] = {"dsc": dsc, "sen": sen, "ppv": ppv}
            pc = connected_components(pred, k, conn).cluster_count
            rc = connected_components(ref, k, conn).cluster_count
            clusters[cname] = {"pred": pc, "ref": rc}
            counts[cname]["pred"].append(pc)
            counts[cname]["ref"].append(rc)
        per_case.append({
            "id": cid,
            "dataset": ref_man.case(cid).dataset,
            "metrics": metrics,
            "clusters": clusters,
        })

    agreement = {}
    for cname in class_names:
        try:
            agreement[cname] = agreement_stats(
                counts[cname]["pred"],
                counts[cname]["ref"],
                n_resamples=cfg.eval.bootstrap_resamples,
                seed=cfg.eval.bootstrap_seed,
            )
        except ValueError as exc:
            _log("warning", warning=f"agreement undefined for {cname}", error=str(exc))

    report = aggregate_report(
        per_case,
        class_names,
        config_fingerprint=ref_man.config_fingerprint,
        agreement=agreement,
        connectivity=conn,
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(canonical_json(report), encoding="utf-8")
    if args.csv:
        Path(args.csv).write_text(report_csv(report), encoding="utf-8")
    _log("evaluate_done", cases=len(shared), out=args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pvseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic tubular cohort")
    p.add_argument("--config", help="JSON: {phantom: {...}, labeled: bool}")
    p.add_argument("--n", type=int, required=True, help="number of cases")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("preprocess", help="apply spacing policy and enhancement")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("cv-split", help="stratified k-fold assignment")
    p.add_argument("--manifest", required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="folds JSON path")
    p.set_defaults(func=cmd_cv_split)

    p = sub.add_parser("train", help="train one cross-validation fold")
    p.add_argument("--manifest", required=True)
    p.add_argument("--folds", required=True)
    p.add_argument("--fold", type=int, required=True)
    p.add_argument("--config")
    p.add_argument("--checkpoint", help="resume from this checkpoint")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="sliding-window inference over a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", help="voxel and cluster metrics report")
    p.add_argument("--manifest", nargs=2, metavar=("PRED", "REF"), required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--csv", help="also write a CSV table here")
    p.add_argument("--force-fingerprint-mismatch", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:
        _log("error", error=str(exc), type=type(exc).__name__)
        return 1


if __name__ == "__main__":
    sys.exit(main())
