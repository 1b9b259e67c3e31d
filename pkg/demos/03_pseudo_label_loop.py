"""
The pseudo-label loop
=====================

Train briefly on a labeled cohort, predict labels for an unlabeled cohort,
then merge gold and pseudo rows into one training set, refusing any overlap
with held-out validation cases.
"""

import dataclasses
import tempfile
from pathlib import Path

from pvseg.augment import AugmentConfig
from pvseg.inference import merge_training_set, pseudo_label_round
from pvseg.network import NetConfig
from pvseg.phantom import PhantomConfig, generate_phantom
from pvseg.training import TrainConfig, TrainingCase, train
from pvseg.volume import clip_zscore

base = PhantomConfig(dims=(32, 32, 32), n_tubes_wm=4, n_tubes_bg=2,
                     radius_range=(1.0, 1.8), length_range=(8.0, 16.0),
                     noise_sigma=0.04)


def make_case(seed):
    vol, labels, _ = generate_phantom(dataclasses.replace(base, seed=seed))
    return clip_zscore(vol, vol.data != 0), labels


# Stage 1: a quick model from four gold cases.
gold_cases = []
gold_rows = []
for i in range(4):
    vol, labels = make_case(200 + i)
    gold_cases.append(TrainingCase(f"gold{i}", vol.data[None], labels.data))
    gold_rows.append({"id": f"gold{i}", "image": f"gold{i}.nii.gz"})

net = NetConfig(stages=2, base_channels=4, patch_size=(16, 16, 16),
                num_classes=3, blocks_per_stage=1)
model, _ = train(gold_cases, net,
                 TrainConfig(batch_size=2, batches_per_epoch=10, epochs=4, seed=2),
                 AugmentConfig.disabled())

# Stage 2: predict labels for six unlabeled phantoms. The loader callback is
# where a real pipeline would read files; here it regenerates the volume.
unlabeled_rows = [{"id": f"extra{i}", "image": f"extra{i}.nii.gz"} for i in range(6)]


def load_channels(row):
    seed = 300 + int(row["id"].removeprefix("extra"))
    vol, _ = make_case(seed)
    return vol.data[None], vol.spacing, vol.affine


with tempfile.TemporaryDirectory() as tmp:
    result = pseudo_label_round(model, unlabeled_rows, tmp, load_channels)
    print("pseudo-labeled cases:", [r["id"] for r in result.written])
    print("failures:", result.failures)
    print("files written:", sorted(p.name for p in Path(tmp).iterdir()))

    # Stage 3: the merged set feeds the next training round. Ids colliding
    # with gold cases or with validation cases raise instead of leaking.
    merged = merge_training_set(gold_rows, result.written, validation_ids=["val0"])
    print("\nmerged training set:", [r["id"] for r in merged])

    try:
        merge_training_set(gold_rows, [{"id": "val0", "labels": "x"}],
                           validation_ids=["val0"])
    except ValueError as exc:
        print("leakage rejected:", exc)
