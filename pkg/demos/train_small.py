"""Unsupervised training on a small generated benchmark, then evaluation.

    PYTHONPATH=src python demos/train_small.py [n_train] [epochs]

With the defaults (40 scenes, 3 epochs) this takes a few minutes on one core.
"""
import sys
import time

import numpy as np

from mbse3.metrics import epe3d
from mbse3.scenegen import SceneSpec, generate_scene
from mbse3.trainer import Model, TrainerConfig, evaluate, train

n_train = int(sys.argv[1]) if len(sys.argv) > 1 else 40
epochs = int(sys.argv[2]) if len(sys.argv) > 2 else 3

spec = SceneSpec(seed=0)
train_set = [generate_scene(spec, i) for i in range(n_train)]
test_set = [generate_scene(spec, 10_000 + i) for i in range(20)]
print(f"{n_train} training scenes with {spec.part_count[0]}-{spec.part_count[1]} parts, "
      f"flow noise {spec.flow_noise} m, {spec.outlier_fraction:.0%} outliers")

model = Model.create(seed=0)
print(f"model: {model.params.n_params()} parameters")
_, before = evaluate(model, test_set)
print(f"untrained: test AP {before['AP']:.3f}, mIoU {before['mIoU']:.3f}")

t0 = time.time()


def show(row):
    print(f"epoch {row['epoch']}: l_seg {row['l_seg']:.4f}  l_mot {row['l_mot']:.3f}  "
          f"consensus {row['consensus']:.3f}  flow EPE3D {row['train_flow_EPE3D']:.4f}  ({time.time() - t0:.0f} s)")


cfg = TrainerConfig(epochs=epochs, learning_rate=5e-3)
_, record, flows = train(train_set, cfg, model, progress=show)

rows, agg = evaluate(model, test_set)
print("\ntest set:")
for k in ("AP", "PQ", "F1", "Pre", "Rec", "mIoU", "RI", "EPE3D", "angular_error"):
    print(f"  {k:14s} {agg[k]:.4f}")
initial = np.mean([epe3d(s.flow_noisy, s.flow_clean) for s in train_set])
print(f"\ntraining flow EPE3D: {initial:.4f} (noisy input) -> {record.epochs[-1]['train_flow_EPE3D']:.4f} (updated)")
