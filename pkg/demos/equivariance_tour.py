"""A short walk through the symmetry properties of the feature extractor.

    PYTHONPATH=src python demos/equivariance_tour.py
"""
import numpy as np

from mbse3.backbone import BackboneConfig, extract_features, rotate_feature
from mbse3.geom import geodesic_angles, icosahedral_group
from mbse3.trainer import Model

G = icosahedral_group()
ang = np.round(geodesic_angles(G, np.eye(3)), 3)
vals, counts = np.unique(ang, return_counts=True)
print("icosahedral group:", len(G), "rotations")
for v, c in zip(vals, counts):
    print(f"  {c:2d} at {v:6.1f} deg")

rng = np.random.default_rng(0)
X = rng.uniform(-0.5, 0.5, (128, 3))
model = Model.create(seed=0)
cfg = BackboneConfig()
F = extract_features(X, cfg, model.params)
print("\nfeature shapes:", [f.values.shape for f in F])

# rotating the cloud by a group element permutes the group axis of the features
g = 17
Fg = extract_features(X @ G.elements[g].T, cfg, model.params)
err = max(np.abs(a.values - rotate_feature(b, g).values).max() / np.abs(b.values).max() for a, b in zip(Fg, F))
print(f"rotate by g_{g}: features match the permuted originals to {err:.1e} (relative)")

# translations leave them alone
Ft = extract_features(X + np.array([1.0, -2.0, 0.5]), cfg, model.params)
print(f"translate: max change {max(np.abs(a.values - b.values).max() for a, b in zip(Ft, F)):.1e}")

# and the soft segmentation, built on pooled invariant features, is unchanged
M = model.predict(X)
worst = max(np.abs(model.predict(X @ G.elements[k].T) - M).max() for k in range(60))
print(f"segmentation under all 60 rotations: max mask change {worst:.1e}")

# an off-group rotation is only approximately equivariant
R = np.linalg.qr(rng.normal(size=(3, 3)))[0]
R *= np.sign(np.linalg.det(R))
off = np.abs(model.predict(X @ R.T) - M).max()
print(f"arbitrary rotation: max mask change {off:.2e} (no exact guarantee)")
