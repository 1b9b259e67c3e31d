"""Voxel-wise metrics, cluster-agreement statistics, stratified k-fold
splitting, and mean +/- SD report aggregation.

Undefined per-case metrics (empty denominators) are reported as ``None`` and
excluded from aggregation; every report cell records how many values were
excluded so the omission stays auditable.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats as sps

from .volume import IGNORE, LabelMap, require_same_grid


@dataclass(frozen=True)
class ConfusionCounts:
    class_id: int
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def confusion(pred: LabelMap, ref: LabelMap, class_id: int) -> ConfusionCounts:
    """Voxel-wise counts for one class; voxels with ref == ignore are excluded."""
    require_same_grid(pred, ref, "pred/ref grids")
    keep = ref.data != IGNORE
    p = pred.data[keep] == class_id
    r = ref.data[keep] == class_id
    tp = int(np.count_nonzero(p & r))
    fp = int(np.count_nonzero(p & ~r))
    fn = int(np.count_nonzero(~p & r))
    tn = int(keep.sum()) - tp - fp - fn
    return ConfusionCounts(class_id, tp, fp, fn, tn)


def dsc_sen_ppv(c: ConfusionCounts) -> Tuple[Optional[float], Optional[float], Optional[float]]:
    """(DSC, sensitivity, positive predictive value); None where undefined."""
    dsc_den = (c.tp + c.fp) + (c.tp + c.fn)
    dsc = 2.0 * c.tp / dsc_den if dsc_den else None
    sen = c.tp / (c.tp + c.fn) if (c.tp + c.fn) else None
    ppv = c.tp / (c.tp + c.fp) if (c.tp + c.fp) else None
    return dsc, sen, ppv


@dataclass(frozen=True)
class AgreementStats:
    lin_ccc: float
    ccc_ci_low: float
    ccc_ci_high: float
    spearman_rho: float
    spearman_p: float
    bland_altman_bias: float
    loa_low: float
    loa_high: float

    def to_dict(self) -> dict:
        return {
            "lin_ccc": self.lin_ccc,
            "ccc_ci_low": self.ccc_ci_low,
            "ccc_ci_high": self.ccc_ci_high,
            "spearman_rho": self.spearman_rho,
            "spearman_p": self.spearman_p,
            "bland_altman_bias": self.bland_altman_bias,
            "loa_low": self.loa_low,
            "loa_high": self.loa_high,
        }


def _ccc_value(x: np.ndarray, y: np.ndarray) -> float:
    # population (divide-by-n) moments
    mx, my = x.mean(), y.mean()
    sx2 = ((x - mx) ** 2).mean()
    sy2 = ((y - my) ** 2).mean()
    sxy = ((x - mx) * (y - my)).mean()
    den = sx2 + sy2 + (mx - my) ** 2
    if den == 0.0:
        raise ValueError("CCC undefined: both vectors constant with equal means")
    return float(2.0 * sxy / den)


def lin_ccc(x, y, n_resamples: int = 2000, seed: int = 0) -> Tuple[float, float, float]:
    """Lin's concordance correlation coefficient with a seeded percentile
    bootstrap (2.5/97.5) confidence interval over paired resamples."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 3:
        raise ValueError("need paired 1D vectors of length >= 3")
    ccc = _ccc_value(x, y)
    rng = np.random.default_rng(seed)
    boot = []
    for _ in range(n_resamples):
        idx = rng.integers(0, len(x), len(x))
        try:
            boot.append(_ccc_value(x[idx], y[idx]))
        except ValueError:
            continue  # degenerate resample
    if boot:
        lo, hi = np.percentile(boot, [2.5, 97.5])
    else:
        lo = hi = ccc
    return ccc, float(lo), float(hi)


def _average_ranks(v: np.ndarray) -> np.ndarray:
    order = np.argsort(v, kind="stable")
    ranks = np.empty(len(v), dtype=np.float64)
    sv = v[order]
    i = 0
    while i < len(v):
        j = i
        while j + 1 < len(v) and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(x, y) -> Tuple[float, float]:
    """Spearman rho (average ranks for ties) with a two-sided t-approximation
    p-value; rho = +/-1 reports p = 0."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 3:
        raise ValueError("need paired 1D vectors of length >= 3")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise ValueError("Spearman undefined for a constant vector")
    rx, ry = _average_ranks(x), _average_ranks(y)
    rho = float(np.corrcoef(rx, ry)[0, 1])
    n = len(x)
    if abs(rho) >= 1.0:
        return float(np.sign(rho)), 0.0
    t = rho * np.sqrt((n - 2) / (1.0 - rho * rho))
    p = float(2.0 * sps.t.sf(abs(t), df=n - 2))
    return rho, p


def bland_altman(x, y) -> Tuple[float, float, float]:
    """(bias, loa_low, loa_high) of the paired differences x - y; limits of
    agreement at bias -/+ 1.96 sample SD."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 2:
        raise ValueError("need paired 1D vectors of length >= 2")
    d = x - y
    bias = float(d.mean())
    sd = float(d.std(ddof=1))
    return bias, bias - 1.96 * sd, bias + 1.96 * sd


def agreement_stats(pred_counts, ref_counts, n_resamples: int = 2000, seed: int = 0) -> AgreementStats:
    ccc, lo, hi = lin_ccc(pred_counts, ref_counts, n_resamples=n_resamples, seed=seed)
    rho, p = spearman(pred_counts, ref_counts)
    bias, loa_lo, loa_hi = bland_altman(pred_counts, ref_counts)
    return AgreementStats(ccc, lo, hi, rho, p, bias, loa_lo, loa_hi)


@dataclass(frozen=True)
class FoldAssignment:
    k: int
    assignment: Dict[str, int]  # case id -> fold index
    strata: Dict[str, Tuple[str, str]]  # case id -> (dataset, burden)

    def validation_ids(self, fold: int) -> List[str]:
        if not 0 <= fold < self.k:
            raise IndexError(f"fold {fold} out of range for k={self.k}")
        return sorted(cid for cid, f in self.assignment.items() if f == fold)

    def training_ids(self, fold: int) -> List[str]:
        if not 0 <= fold < self.k:
            raise IndexError(f"fold {fold} out of range for k={self.k}")
        return sorted(cid for cid, f in self.assignment.items() if f != fold)

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "assignment": dict(sorted(self.assignment.items())),
            "strata": {cid: list(s) for cid, s in sorted(self.strata.items())},
        }

    @staticmethod
    def from_dict(d: dict) -> "FoldAssignment":
        return FoldAssignment(
            k=int(d["k"]),
            assignment={k: int(v) for k, v in d["assignment"].items()},
            strata={k: (v[0], v[1]) for k, v in d["strata"].items()},
        )


def stratified_kfold(cases: Sequence[dict], k: int, seed: int = 0) -> FoldAssignment:
    """Deal cases of each (dataset, burden) stratum round-robin to k folds
    after a seeded shuffle, so per-stratum fold sizes differ by at most 1."""
    if k < 2:
        raise ValueError("k must be >= 2")
    if not cases:
        raise ValueError("empty manifest")
    strata: Dict[Tuple[str, str], List[str]] = {}
    strata_of: Dict[str, Tuple[str, str]] = {}
    for case in cases:
        key = (str(case.get("dataset", "")), str(case.get("burden", "")))
        cid = case["id"]
        strata.setdefault(key, []).append(cid)
        strata_of[cid] = key
    rng = np.random.default_rng(seed)
    assignment: Dict[str, int] = {}
    for key in sorted(strata):
        ids = sorted(strata[key])
        rng.shuffle(ids)
        for pos, cid in enumerate(ids):
            assignment[cid] = pos % k
    return FoldAssignment(k=k, assignment=assignment, strata=strata_of)


def _cell_from(defined: List[float], excluded: int) -> dict:
    if not defined:
        return {"mean": None, "sd": None, "n": 0, "excluded": excluded}
    arr = np.asarray(defined, dtype=np.float64)
    sd = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
    return {"mean": float(arr.mean()), "sd": sd, "n": len(arr), "excluded": excluded}


def aggregate_cell(values: Sequence[Optional[float]]) -> dict:
    """Mean +/- sample SD of the defined values; single values report sd 0 and
    a cell with no defined values reports null mean/sd (the n and excluded
    fields keep the omission auditable)."""
    values = list(values)
    defined = [float(v) for v in values if v is not None]
    excluded = len(values) - len(defined)
    return _cell_from(defined, excluded)


def aggregate_report(
    per_case: Sequence[dict],
    class_names: Sequence[str],
    config_fingerprint: str = "",
    agreement: Optional[Dict[str, AgreementStats]] = None,
    connectivity: int = 26,
) -> dict:
    """Assemble the metrics report.

    ``per_case`` records look like::

        {"id": ..., "dataset": ..., "metrics": {class_name: {"dsc": float|None,
         "sen": ..., "ppv": ...}}, "clusters": {class_name: {"pred": int, "ref": int}}}

    Groups cover overall, per dataset, and per class; each cell is
    mean +/- SD with exclusion counts. ``agreement`` holds per-class cluster
    agreement statistics computed across the cohort.
    """
    if not per_case:
        raise ValueError("no cases to aggregate")

    def group(name: str, records: Sequence[dict], classes: Sequence[str]) -> dict:
        vals = {
            m: [rec["metrics"][c][m] for rec in records for c in classes]
            for m in ("dsc", "sen", "ppv")
        }
        clusters = {
            "pred": int(sum(rec["clusters"][c]["pred"] for rec in records for c in classes)),
            "ref": int(sum(rec["clusters"][c]["ref"] for rec in records for c in classes)),
        }
        return {
            "name": name,
            "n": len(records),
            "dsc": aggregate_cell(vals["dsc"]),
            "sen": aggregate_cell(vals["sen"]),
            "ppv": aggregate_cell(vals["ppv"]),
            "clusters": clusters,
        }

    groups = [group("overall", per_case, class_names)]
    for ds in sorted({rec["dataset"] for rec in per_case}):
        groups.append(group(f"dataset:{ds}", [r for r in per_case if r["dataset"] == ds], class_names))
    for cname in class_names:
        groups.append(group(f"class:{cname}", per_case, [cname]))

    report = {
        "groups": groups,
        "agreement": {k: v.to_dict() for k, v in (agreement or {}).items()},
        "config_fingerprint": config_fingerprint,
        "connectivity": connectivity,
    }
    return report


def report_csv(report: dict) -> str:
    """Flatten the report into a mean +/- SD table (rows: groups; columns:
    DSC / SEN / PPV / cluster counts), mirroring the published table layout."""
    lines = ["group,n,dsc,sen,ppv,pred_clusters,ref_clusters"]
    for g in report["groups"]:
        cells = []
        for m in ("dsc", "sen", "ppv"):
            c = g[m]
            cells.append("-" if c["mean"] is None else f"{c['mean']:.4f} ± {c['sd']:.4f}")
        lines.append(
            f"{g['name']},{g['n']},{cells[0]},{cells[1]},{cells[2]},"
            f"{g['clusters']['pred']},{g['clusters']['ref']}"
        )
    return "\n".join(lines) + "\n"
