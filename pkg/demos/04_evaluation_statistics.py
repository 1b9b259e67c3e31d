"""
Evaluation metrics and agreement statistics
===========================================

The evaluation vocabulary on worked examples: voxel overlap (DSC,
sensitivity, PPV), cluster counting under different connectivities, and the
count-agreement statistics (Lin's CCC, Spearman, Bland-Altman).
"""

import numpy as np

from pvseg.clusters import connected_components
from pvseg.evaluation import (
    agreement_stats,
    bland_altman,
    confusion,
    dsc_sen_ppv,
    lin_ccc,
    spearman,
    stratified_kfold,
)
from pvseg.volume import LabelMap

# A hand-sized overlap example. Prediction marks 6 voxels of class 1, the
# reference marks 5, they share 4: TP=4, FP=2, FN=1.
pred = np.zeros((4, 4, 4), dtype=np.uint8)
ref = np.zeros((4, 4, 4), dtype=np.uint8)
pred[1, 1, 0:3] = 1
pred[2, 1, 0:3] = 1
ref[1, 1, 0:3] = 1
ref[2, 1, 0] = 1
ref[3, 3, 3] = 1

c = confusion(LabelMap(pred, (1, 1, 1)), LabelMap(ref, (1, 1, 1)), 1)
dsc, sen, ppv = dsc_sen_ppv(c)
print(f"TP={c.tp} FP={c.fp} FN={c.fn}")
print(f"DSC={dsc:.4f} (= 8/11), SEN={sen:.4f}, PPV={ppv:.4f}")

# Connectivity matters for counting: two voxels touching only at a corner
# are one cluster under 26-connectivity but two under 6-connectivity.
corner = np.zeros((3, 3, 3), dtype=np.uint8)
corner[0, 0, 0] = 1
corner[1, 1, 1] = 1
lm = LabelMap(corner, (1, 1, 1))
print("\ncorner-touching pair:",
      {conn: connected_components(lm, 1, conn).cluster_count for conn in (6, 18, 26)})

# Lin's concordance correlation penalizes bias and scale differences, not
# just scatter, so it is never larger in magnitude than Pearson's r.
x = [1.0, 2.0, 3.0]
y = [2.0, 3.0, 4.0]
ccc, lo, hi = lin_ccc(x, y, n_resamples=1000, seed=0)
print(f"\nlin_ccc({x}, {y}) = {ccc:.6f} (= 4/7), bootstrap 95% CI [{lo:.3f}, {hi:.3f}]")

rho, p = spearman([1, 2, 3, 4, 5], [5, 4, 3, 2, 1])
print(f"spearman on a pure reversal: rho={rho:.1f}, p={p:.4f}")

bias, lo, hi = bland_altman([10.0, 12.0, 11.0, 13.0], [9.0, 13.0, 10.0, 15.0])
print(f"bland-altman: bias={bias:+.2f}, limits of agreement [{lo:+.2f}, {hi:+.2f}]")

# The combined bundle, as it appears in evaluation reports: per-case cluster
# counts from prediction and reference.
rng = np.random.default_rng(0)
ref_counts = rng.integers(5, 30, size=12)
pred_counts = ref_counts + rng.integers(-3, 4, size=12)
stats = agreement_stats(pred_counts, ref_counts, n_resamples=500, seed=1)
print(f"\ncount agreement over {len(ref_counts)} cases:")
print(f"  CCC {stats.lin_ccc:.3f} [{stats.ccc_ci_low:.3f}, {stats.ccc_ci_high:.3f}]")
print(f"  Spearman rho {stats.spearman_rho:.3f} (p={stats.spearman_p:.2e})")
print(f"  bias {stats.bland_altman_bias:+.2f}, LoA [{stats.loa_low:+.2f}, {stats.loa_high:+.2f}]")

# Cross-validation folds are stratified by (dataset, burden) so each fold
# sees every dataset and a balanced burden mix.
cases = [{"id": f"c{i:02d}", "dataset": f"site{i % 3}", "burden": "high" if i % 2 else "low"}
         for i in range(30)]
folds = stratified_kfold(cases, k=5, seed=0)
for fold in range(5):
    val = folds.validation_ids(fold)
    per_site = {s: sum(folds.strata[v][0] == s for v in val) for s in ("site0", "site1", "site2")}
    print(f"fold {fold}: validation={len(val)} cases, per dataset {per_site}")
