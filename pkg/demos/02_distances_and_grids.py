"""The numeric kernels behind the loss and the feature grid.

Run: python3 demos/02_distances_and_grids.py
"""

import itertools

import numpy as np

from partmotion import geom, transport

rng = np.random.default_rng(1)

# Exact EMD is the mean matched distance under the best bijection.
A, B = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
brute = min(np.linalg.norm(A - B[list(p)], axis=1).mean() for p in itertools.permutations(range(6)))
print(f"assignment {transport.emd_exact(A, B).cost:.6f}  brute force {brute:.6f}")

# Shifting a cloud rigidly costs exactly the shift length.
v = np.array([0.3, -0.1, 0.2])
print(f"EMD(A, A+v) {transport.emd_exact(A, A + v).cost:.6f}  |v| {np.linalg.norm(v):.6f}")

# The entropic surrogate tracks the exact value on larger clouds.
A, B = rng.uniform(size=(64, 3)), rng.uniform(size=(64, 3))
print(f"exact {transport.emd_exact(A, B).cost:.4f}  sinkhorn {transport.emd_sinkhorn(A, B, 4e-3):.4f}")
print(f"chamfer {transport.chamfer(A, B):.4f}")

# Trilinear queries interpolate node features and reproduce affine fields.
grid = geom.Grid3D(np.zeros((5, 5, 5, 1)))
coef = np.array([1.0, -2.0, 0.5])
grid = geom.Grid3D((grid.node_positions() @ coef).reshape(5, 5, 5, 1))
p = rng.uniform(-0.5, 0.5, size=(4, 3))
print("query", geom.trilinear_query(grid, p)[:, 0].round(6), "exact", (p @ coef).round(6))

# Any pair of 3-vectors maps to a proper rotation.
R = geom.rotation_from_6d(rng.normal(size=6))
print("orthonormal:", np.allclose(R.T @ R, np.eye(3)), "det", round(np.linalg.det(R), 12))
