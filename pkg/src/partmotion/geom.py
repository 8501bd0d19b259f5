"""Geometric kernels shared by synthesis, the model and evaluation.

Point clouds are plain ``(N, 3)`` float arrays. Per-point transforms are
``(N, 3, 4)`` arrays holding a rotation block and a translation column.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

GRID_LO = -0.5
GRID_HI = 0.5
NORMALIZE_MARGIN = 0.1


@dataclass(frozen=True)
class RigidTransform:
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if R.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {R.shape}")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, M) -> RigidTransform:
        M = np.asarray(M, dtype=np.float64)
        return cls(M[:3, :3], M[:3, 3])

    def as_matrix(self) -> np.ndarray:
        return np.concatenate([self.R, self.t[:, None]], axis=1)

    def apply(self, points) -> np.ndarray:
        return np.asarray(points) @ self.R.T + self.t

    def compose(self, other: RigidTransform) -> RigidTransform:
        """``self ∘ other``: apply ``other`` first."""
        return RigidTransform(self.R @ other.R, self.R @ other.t + self.t)

    def inverse(self) -> RigidTransform:
        return RigidTransform(self.R.T, -self.R.T @ self.t)


def is_rotation(R, tol: float = 1e-6) -> bool:
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        return False
    return bool(np.abs(R.T @ R - np.eye(3)).max() < tol and np.linalg.det(R) > 0)


def axis_angle_matrix(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation about a unit axis."""
    k = np.asarray(axis, dtype=np.float64)
    k = k / np.linalg.norm(k)
    K = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


def identity_transforms(n: int) -> np.ndarray:
    T = np.zeros((n, 3, 4))
    T[:, :, :3] = np.eye(3)
    return T


def apply_point_transforms(T, cloud) -> np.ndarray:
    T = np.asarray(T)
    cloud = np.asarray(cloud)
    if T.ndim != 3 or T.shape[1:] != (3, 4):
        raise ValueError(f"transforms must have shape (N, 3, 4), got {T.shape}")
    if T.shape[0] != cloud.shape[0]:
        raise ValueError(f"{T.shape[0]} transforms for {cloud.shape[0]} points")
    return np.einsum("nij,nj->ni", T[:, :, :3], cloud) + T[:, :, 3]


# ---------------------------------------------------------------------------
# grids


@dataclass
class Grid3D:
    """Node-centred feature lattice ``data[ix, iy, iz, c]`` spanning ``[lo, hi]^3``.

    Node ``i`` along an axis sits at ``lo + i * (hi - lo) / (K - 1)``.
    """

    data: np.ndarray
    lo: float = GRID_LO
    hi: float = GRID_HI

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 4 or len(set(self.data.shape[:3])) != 1:
            raise ValueError(f"grid data must be (K, K, K, C), got {self.data.shape}")
        if self.data.shape[0] < 2:
            raise ValueError("grid needs at least 2 nodes per axis")
        if not self.hi > self.lo:
            raise ValueError("grid extent must have positive volume")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("grid data must be finite")

    @property
    def K(self) -> int:
        return self.data.shape[0]

    @property
    def C(self) -> int:
        return self.data.shape[3]

    def node_positions(self) -> np.ndarray:
        """(K^3, 3) node coordinates in C order of ``data``."""
        ax = np.linspace(self.lo, self.hi, self.K)
        g = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=-1)
        return g.reshape(-1, 3)


def trilinear_weights(K: int, points, lo: float = GRID_LO, hi: float = GRID_HI):
    """Corner indices ``(N, 8, 3)`` and weights ``(N, 8)`` for trilinear lookup.

    Queries outside ``[lo, hi]^3`` are clamped onto the boundary.
    """
    p = np.asarray(points, dtype=np.float64)
    u = np.clip((p - lo) / (hi - lo) * (K - 1), 0.0, K - 1)
    i0 = np.minimum(np.floor(u).astype(np.int64), K - 2)
    f = u - i0
    corners = np.array([[a, b, c] for a in (0, 1) for b in (0, 1) for c in (0, 1)])
    idx = i0[:, None, :] + corners[None]
    w = np.prod(np.where(corners[None] == 1, f[:, None, :], 1.0 - f[:, None, :]), axis=2)
    return idx, w


def trilinear_query(grid: Grid3D, points) -> np.ndarray:
    """Interpolate node features at ``points``; returns ``(N, C)``."""
    idx, w = trilinear_weights(grid.K, points, grid.lo, grid.hi)
    feats = grid.data[idx[..., 0], idx[..., 1], idx[..., 2]]
    return np.einsum("nk,nkc->nc", w, feats)


# ---------------------------------------------------------------------------
# rotations and registration


def rotation_from_6d(v) -> np.ndarray:
    """Gram-Schmidt two 3-vectors into a rotation; columns are (b1, b2, b1 x b2)."""
    v = np.asarray(v, dtype=np.float64).reshape(6)
    a1, a2 = v[:3], v[3:]
    n1 = np.linalg.norm(a1)
    if n1 < 1e-12:
        raise ValueError("first 6d column is zero")
    b1 = a1 / n1
    r = a2 - (b1 @ a2) * b1
    n2 = np.linalg.norm(r)
    if n2 < 1e-12:
        raise ValueError("6d columns are parallel")
    b2 = r / n2
    return np.stack([b1, b2, np.cross(b1, b2)], axis=1)


def rotation_angle(R) -> float:
    """Rotation angle in degrees, in [0, 180]."""
    if not is_rotation(R, 1e-5):
        raise ValueError("input is not a rotation matrix")
    c = (np.trace(R) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


def kabsch_fit(src, dst, weights=None) -> RigidTransform:
    """Weighted least-squares rigid transform with ``dst ≈ R @ src + t``."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValueError(f"shape mismatch: {src.shape} vs {dst.shape}")
    w = np.ones(len(src)) if weights is None else np.asarray(weights, dtype=np.float64)
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    if np.count_nonzero(w) < 3:
        raise ValueError("need at least 3 points with positive weight")
    w = w / w.sum()
    cs = w @ src
    cd = w @ dst
    xs = src - cs
    xd = dst - cd
    # degenerate when the weighted source spread is rank < 2
    sv = np.linalg.svd(np.sqrt(w)[:, None] * xs, compute_uv=False)
    if sv[0] < 1e-12 or sv[1] < 1e-9 * max(sv[0], 1.0):
        raise ValueError("degenerate point set (coincident or collinear)")
    H = (w[:, None] * xs).T @ xd
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    D = np.diag([1.0, 1.0, d if d != 0 else 1.0])
    R = Vt.T @ D @ U.T
    return RigidTransform(R, cd - R @ cs)


# ---------------------------------------------------------------------------
# normalisation and sampling


@dataclass(frozen=True)
class NormalizationMap:
    """``x_norm = (x - offset) * scale``."""

    scale: float
    offset: np.ndarray

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("scale must be positive")

    def apply(self, x) -> np.ndarray:
        return (np.asarray(x) - self.offset) * self.scale

    def invert(self, x) -> np.ndarray:
        return np.asarray(x) / self.scale + self.offset


def normalize_pair(I1, I2, margin: float = NORMALIZE_MARGIN):
    """Map the joint bounding box of two clouds isotropically into the grid cube.

    The longest side spans ``(1 - margin)`` of the cube edge, centred at 0.
    """
    I1 = np.asarray(I1, dtype=np.float64)
    I2 = np.asarray(I2, dtype=np.float64)
    both = np.concatenate([I1, I2])
    if not np.all(np.isfinite(both)):
        raise ValueError("clouds must be finite")
    lo, hi = both.min(0), both.max(0)
    extent = float((hi - lo).max())
    if extent <= 0:
        raise ValueError("zero-extent cloud")
    nm = NormalizationMap(scale=(1.0 - margin) * (GRID_HI - GRID_LO) / extent, offset=(lo + hi) / 2)
    return nm.apply(I1), nm.apply(I2), nm


def farthest_point_sample(cloud, M: int, start: int = 0) -> np.ndarray:
    """Greedy max-min subsample; deterministic for a fixed point ordering."""
    cloud = np.asarray(cloud, dtype=np.float64)
    N = len(cloud)
    if M > N:
        raise ValueError(f"cannot sample {M} of {N} points")
    idx = np.empty(M, dtype=np.int64)
    if M == 0:
        return idx
    dist = np.full(N, np.inf)
    far = start
    for i in range(M):
        idx[i] = far
        dist = np.minimum(dist, ((cloud - cloud[far]) ** 2).sum(1))
        far = int(np.argmax(dist))
    return idx
