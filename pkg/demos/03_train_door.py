"""Train on synthetic doors, then look at the predictions and the decoded field.

The default budget (1500 steps) takes around 20 minutes on one CPU core.
Run: python3 demos/03_train_door.py [steps] [workdir]
"""

import math
import sys
from pathlib import Path

import torch

from partmotion import evaluation, model, synthgen, train

torch.set_num_threads(1)
steps = int(sys.argv[1]) if len(sys.argv) > 1 else 1500
work = Path(sys.argv[2] if len(sys.argv) > 2 else "demo_door")

# 16 doors, 32 tuples each; two whole objects are held out.
train_ds, test_ds = synthgen.generate_split("door", 16, 32, 512, seed=7, out_dir=work / "data")
print(f"{len(train_ds)} training tuples, {len(test_ds)} held-out tuples")

cfg = train.TrainConfig(steps=steps, learning_rate=2e-3, mirror_augment=True)
result = train.train(train_ds, model.desk_config(), cfg, work / "run")
print(f"loss {result.record.losses[0]:.3f} -> {result.record.losses[-1]:.3f} in {result.record.wall_clock / 60:.1f} min")

# Held-out objects, restricted to targets at least 30 degrees from frame 1.
report = evaluation.evaluate(result.model, test_ds, evaluation.EvalOptions(min_pose_delta=math.radians(30)))
agg = report["aggregates"]["all"]
base = report["baselines"]["identity"]["all"]
print(f"median EMD {agg['emd']['median']:.4f} vs identity {base['emd']['median']:.4f}, median PAE {agg['pae']['median']:.2f} deg")
evaluation.render_report(report, work / "report.json")

# The decoded displacement field should circle the hinge.
obj, t = test_ds.objects[0], test_ds.tuples[0][0]
field = evaluation.grid_field_report(result.model, obj, t)
if field["fittable"]:
    print(f"field axis error {field['axis_error_deg']:.1f} deg")
evaluation.render_report(field, work / "field.json", kind="field")
print("figures written to", work)
