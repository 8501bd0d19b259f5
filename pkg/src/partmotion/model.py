"""Transformation-grid network for generating articulated objects at new poses.

Two observed frames are encoded by a set-abstraction point encoder, fused by
cross-attention, splatted onto a K^3 lattice and refined by a small 3D U-Net.
Pose codes of both frames are appended to every lattice feature. Each point of
the first frame queries the lattice trilinearly and an MLP conditioned on the
target pose code decodes its rigid transform.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .geom import GRID_HI, GRID_LO, NORMALIZE_MARGIN, farthest_point_sample

IDENTITY_6D = (1.0, 0.0, 0.0, 0.0, 1.0, 0.0)
# leaky slope for point-wise MLPs; plain ReLU units died en masse in training
LEAK = 0.1


@dataclass(frozen=True)
class ModelConfig:
    n_points: int = 512
    n_subsampled: int = 128
    sa1_points: int = 256
    sa_radii: tuple = (0.1, 0.25)
    sa_neighbors: tuple = (16, 16)
    sa1_widths: tuple = (32, 32, 64)
    sa2_widths: tuple = (64, 128)
    feat_dim: int = 256
    per_point_dim: int = 64
    grid_size: int = 16
    grid_channels: int = 64
    splat_channels: int = 32
    unet_channels: tuple = (16, 32, 64)
    pose_widths: tuple = (64, 128, 256)
    decoder_hidden: tuple = (256, 128)
    rotation_param: str = "six_d"
    num_joints: int = 1
    variant: str = "nir"
    translation_scale: float = 0.1

    def __post_init__(self):
        for name in ("sa_radii", "sa_neighbors", "sa1_widths", "sa2_widths", "unet_channels", "pose_widths", "decoder_hidden"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.rotation_param not in ("six_d", "raw_affine"):
            raise ValueError(f"unknown rotation_param {self.rotation_param!r}")
        if self.variant not in ("nir", "no_nir"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.grid_size < 4 or self.grid_size % 4:
            raise ValueError("grid_size must be a multiple of 4 and at least 4")
        if not self.n_subsampled <= self.sa1_points <= self.n_points:
            raise ValueError("need n_subsampled <= sa1_points <= n_points")
        dims = (self.feat_dim, self.per_point_dim, self.grid_channels, self.num_joints, self.splat_channels)
        if min(dims) <= 0 or min(self.pose_widths) <= 0 or min(self.decoder_hidden) <= 0:
            raise ValueError("all dimensions must be positive")

    @property
    def pose_dim(self) -> int:
        return self.pose_widths[-1]

    @property
    def psi_dim(self) -> int:
        return self.grid_channels + 2 * self.pose_dim

    @property
    def out_dim(self) -> int:
        return 9 if self.rotation_param == "six_d" else 12

    @property
    def decoder_in(self) -> int:
        if self.variant == "nir":
            return self.psi_dim + self.pose_dim
        return self.per_point_dim + 3 * self.pose_dim

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d) -> ModelConfig:
        return cls(**d)


def desk_config(**kw) -> ModelConfig:
    return replace(ModelConfig(), **kw)


def full_config(**kw) -> ModelConfig:
    return replace(ModelConfig(n_points=8192, sa1_points=512, grid_size=32, unet_channels=(32, 64, 128)), **kw)


def micro_config(**kw) -> ModelConfig:
    base = ModelConfig(
        n_points=16,
        n_subsampled=8,
        sa1_points=12,
        sa_radii=(0.3, 0.6),
        sa_neighbors=(4, 4),
        sa1_widths=(8, 8),
        sa2_widths=(8,),
        feat_dim=16,
        per_point_dim=8,
        grid_size=4,
        grid_channels=8,
        splat_channels=4,
        unet_channels=(4, 4, 4),
        pose_widths=(4, 8, 8),
        decoder_hidden=(16,),
    )
    return replace(base, **kw)


PRESETS = {"desk": desk_config, "full": full_config, "micro": micro_config}


# ---------------------------------------------------------------------------
# point grouping (index-only, no gradients)


class CloudIndex(NamedTuple):
    """Subsampling and neighbourhood indices for one normalized cloud."""

    fps1: np.ndarray  # (M1,) into the cloud
    nbr1: np.ndarray  # (M1, k1) into the cloud
    fps2: np.ndarray  # (M2,) into the level-1 centres
    nbr2: np.ndarray  # (M2, k2) into the level-1 centres
    fp: np.ndarray  # (N, 3) level-2 centres nearest each point
    fp_w: np.ndarray  # (N, 3) inverse-distance weights


def _ball_knn(centres, points, k, radius):
    d2 = ((centres[:, None, :] - points[None, :, :]) ** 2).sum(-1)
    k = min(k, points.shape[0])
    nbr = np.argsort(d2, axis=1, kind="stable")[:, :k]
    # out-of-ball neighbours fall back to the nearest one
    far = np.take_along_axis(d2, nbr, 1) > radius * radius
    return np.where(far, nbr[:, :1], nbr)


def build_index(cloud, cfg: ModelConfig) -> CloudIndex:
    """Grouping indices for a normalized cloud.

    Farthest-point sampling starts from the point farthest from the centroid
    and neighbourhoods are k-nearest within a ball, so the encoder output does
    not depend on the input point order (up to exact distance ties).
    """
    x = np.asarray(cloud, dtype=np.float64)
    start = int(np.argmax(((x - x.mean(0)) ** 2).sum(1)))
    fps1 = farthest_point_sample(x, cfg.sa1_points, start=start)
    c1 = x[fps1]
    nbr1 = _ball_knn(c1, x, cfg.sa_neighbors[0], cfg.sa_radii[0])
    fps2 = farthest_point_sample(c1, cfg.n_subsampled, start=0)
    c2 = c1[fps2]
    nbr2 = _ball_knn(c2, c1, cfg.sa_neighbors[1], cfg.sa_radii[1])
    d2 = ((x[:, None, :] - c2[None, :, :]) ** 2).sum(-1)
    k = min(3, len(c2))
    fp = np.argsort(d2, axis=1, kind="stable")[:, :k]
    w = 1.0 / (np.take_along_axis(d2, fp, 1) + 1e-8)
    return CloudIndex(fps1, nbr1, fps2, nbr2, fp, w / w.sum(1, keepdims=True))


def stack_indices(indices) -> CloudIndex:
    return CloudIndex(*(torch.as_tensor(np.stack(f)) for f in zip(*indices)))


# ---------------------------------------------------------------------------
# torch kernels


def normalize_pair_torch(x1: torch.Tensor, x2: torch.Tensor, margin: float = NORMALIZE_MARGIN):
    """Batched counterpart of :func:`geom.normalize_pair`; returns (x1n, x2n, scale, offset)."""
    both = torch.cat([x1, x2], dim=1)
    lo = both.min(dim=1).values
    hi = both.max(dim=1).values
    extent = (hi - lo).max(dim=1).values
    if bool((extent <= 0).any()):
        raise ValueError("zero-extent cloud")
    scale = (1.0 - margin) * (GRID_HI - GRID_LO) / extent
    offset = (lo + hi) / 2
    s = scale[:, None, None]
    o = offset[:, None, :]
    return (x1 - o) * s, (x2 - o) * s, scale, offset


def _gather(x: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    """``x[b, idx[b, ...]]`` for x of shape (B, N, C)."""
    B = x.shape[0]
    flat = idx.reshape(B, -1)
    out = torch.gather(x, 1, flat[..., None].expand(-1, -1, x.shape[-1]))
    return out.reshape(*idx.shape, x.shape[-1])


def _corner_weights(points: torch.Tensor, K: int):
    """Flat node indices (B, N, 8) and trilinear weights (B, N, 8), clamped to the grid."""
    u = ((points - GRID_LO) / (GRID_HI - GRID_LO) * (K - 1)).clamp(0.0, K - 1)
    i0 = torch.floor(u).long().clamp(max=K - 2)
    f = u - i0.to(u.dtype)
    idx, w = [], []
    for a in (0, 1):
        for b in (0, 1):
            for c in (0, 1):
                ix, iy, iz = i0[..., 0] + a, i0[..., 1] + b, i0[..., 2] + c
                idx.append((ix * K + iy) * K + iz)
                wx = f[..., 0] if a else 1 - f[..., 0]
                wy = f[..., 1] if b else 1 - f[..., 1]
                wz = f[..., 2] if c else 1 - f[..., 2]
                w.append(wx * wy * wz)
    return torch.stack(idx, -1), torch.stack(w, -1)


def trilinear_query_torch(grid: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
    """Query a (B, C, K, K, K) lattice at (B, N, 3) points -> (B, N, C)."""
    B, C, K = grid.shape[:3]
    idx, w = _corner_weights(points, K)
    flat = grid.reshape(B, C, -1).transpose(1, 2)  # (B, K^3, C)
    feats = _gather(flat, idx)  # (B, N, 8, C)
    return (w[..., None] * feats).sum(2)


def trilinear_splat_torch(feats: torch.Tensor, points: torch.Tensor, K: int) -> torch.Tensor:
    """Adjoint of the query: scatter (B, M, C) features onto a (B, C, K, K, K) lattice."""
    B, M, C = feats.shape
    idx, w = _corner_weights(points, K)
    contrib = (w[..., None] * feats[:, :, None, :]).reshape(B, M * 8, C)
    out = feats.new_zeros(B, K**3, C)
    out = out.scatter_add(1, idx.reshape(B, M * 8, 1).expand(-1, -1, C), contrib)
    return out.transpose(1, 2).reshape(B, C, K, K, K)


def rotation_from_6d_torch(v: torch.Tensor) -> torch.Tensor:
    a1, a2 = v[..., :3], v[..., 3:6]
    b1 = F.normalize(a1, dim=-1, eps=1e-12)
    b2 = F.normalize(a2 - (b1 * a2).sum(-1, keepdim=True) * b1, dim=-1, eps=1e-12)
    b3 = torch.cross(b1, b2, dim=-1)
    return torch.stack([b1, b2, b3], dim=-1)


def apply_transforms_torch(T: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    return torch.einsum("bnij,bnj->bni", T[..., :3], x) + T[..., 3]


def _mlp(widths, last_act=True) -> nn.Sequential:
    layers = []
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        layers.append(nn.Linear(a, b))
        if last_act or i < len(widths) - 2:
            layers.append(nn.LeakyReLU(LEAK))
    return nn.Sequential(*layers)


# ---------------------------------------------------------------------------
# modules


class SetAbstractionEncoder(nn.Module):
    """Two-level set abstraction: grouped relative coordinates, shared MLP, max-pool."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.sa1 = _mlp((3,) + cfg.sa1_widths)
        self.sa2 = _mlp((6 + cfg.sa1_widths[-1],) + cfg.sa2_widths + (cfg.feat_dim,))

    def forward(self, x: torch.Tensor, index: CloudIndex):
        r1, r2 = self.cfg.sa_radii
        c1 = _gather(x, index.fps1)
        rel1 = (_gather(x, index.nbr1) - c1[:, :, None, :]) / r1
        f1 = self.sa1(rel1).max(dim=2).values
        c2 = _gather(c1, index.fps2)
        rel2 = (_gather(c1, index.nbr2) - c2[:, :, None, :]) / r2
        absolute = c2[:, :, None, :].expand_as(rel2)
        g2 = torch.cat([rel2, absolute, _gather(f1, index.nbr2)], dim=-1)
        return c2, self.sa2(g2).max(dim=2).values


def _conv(c_in: int, c_out: int) -> nn.Sequential:
    # narrow layers share one group so coarse levels never normalize single values
    groups = math.gcd(c_out, 8) if c_out >= 16 else 1
    return nn.Sequential(nn.Conv3d(c_in, c_out, 3, padding=1), nn.GroupNorm(groups, c_out), nn.ReLU())


class UNet3D(nn.Module):
    """Three-level volumetric encoder-decoder."""

    def __init__(self, c_in: int, channels, c_out: int):
        super().__init__()
        a, b, c = channels
        self.enc1 = nn.Sequential(_conv(c_in, a), _conv(a, a))
        self.enc2 = _conv(a, b)
        self.bottleneck = _conv(b, c)
        self.dec2 = _conv(c + b, b)
        self.dec1 = _conv(b + a, a)
        self.head = nn.Conv3d(a, c_out, 1)

    def forward(self, x):
        e1 = self.enc1(x)
        e2 = self.enc2(F.max_pool3d(e1, 2))
        z = self.bottleneck(F.max_pool3d(e2, 2))
        d2 = self.dec2(torch.cat([F.interpolate(z, scale_factor=2, mode="nearest"), e2], 1))
        d1 = self.dec1(torch.cat([F.interpolate(d2, scale_factor=2, mode="nearest"), e1], 1))
        return self.head(d1)


class TransformDecoder(nn.Module):
    """Per-point MLP from a feature plus a per-sample condition to a rigid transform.

    The first layer is a single linear map over ``[point_feature, condition]``;
    the condition part is evaluated once per sample and broadcast.
    """

    def __init__(self, cfg: ModelConfig, point_dim: int, cond_dim: int):
        super().__init__()
        self.cfg = cfg
        self.point_dim = point_dim
        widths = (point_dim + cond_dim,) + cfg.decoder_hidden
        self.inp = nn.Linear(widths[0], widths[1])
        self.hidden = _mlp(widths[1:])
        self.out = nn.Linear(widths[-1], cfg.out_dim)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, point_feat: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        W = self.inp.weight
        h = point_feat @ W[:, : self.point_dim].T + (cond @ W[:, self.point_dim :].T + self.inp.bias)[:, None, :]
        y = self.out(self.hidden(F.leaky_relu(h, LEAK)))
        return self.to_transform(y)

    def to_transform(self, y: torch.Tensor) -> torch.Tensor:
        s = self.cfg.translation_scale
        if self.cfg.rotation_param == "six_d":
            R = rotation_from_6d_torch(y[..., :6] + y.new_tensor(IDENTITY_6D))
            t = s * y[..., 6:9]
        else:
            R = y[..., :9].reshape(*y.shape[:-1], 3, 3) + torch.eye(3, dtype=y.dtype)
            t = s * y[..., 9:12]
        return torch.cat([R, t[..., None]], dim=-1)


class EncoderOutput(NamedTuple):
    h1: torch.Tensor  # (B, N', d)
    h2: torch.Tensor  # (B, N', d)
    h: torch.Tensor  # (B, N', 2d)
    per_point: torch.Tensor | None  # (B, N, per_point_dim), aligned with frame 1
    attention: torch.Tensor  # (B, N', N')
    centres: torch.Tensor  # (B, N', 3) frame-1 subsample positions


def build_transformation_grid(G_geo: torch.Tensor, mu1: torch.Tensor, mu2: torch.Tensor) -> torch.Tensor:
    """Append ``[mu1, mu2]`` to every lattice feature: (B, C_geo + 2 d_mu, K, K, K)."""
    if mu1.shape != mu2.shape or mu1.shape[0] != G_geo.shape[0]:
        raise ValueError("pose feature widths/batches disagree")
    z = torch.cat([mu1, mu2], dim=-1)
    K = G_geo.shape[-1]
    return torch.cat([G_geo, z[:, :, None, None, None].expand(-1, -1, K, K, K)], dim=1)


class PartMotionNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.feat_dim
        self.geometry = SetAbstractionEncoder(cfg)
        self.splat = nn.Linear(2 * d, cfg.splat_channels)
        self.unet = UNet3D(cfg.splat_channels + 1, cfg.unet_channels, cfg.grid_channels)
        self.propagate = _mlp((2 * d + 3, 128, cfg.per_point_dim))
        self.pose = _mlp((cfg.num_joints,) + cfg.pose_widths)
        if cfg.variant == "nir":
            self.decoder = TransformDecoder(cfg, cfg.grid_channels, 3 * cfg.pose_dim)
        else:
            self.decoder = TransformDecoder(cfg, cfg.per_point_dim, 3 * cfg.pose_dim)

    # -- stages -------------------------------------------------------------

    def _indices(self, x1n, x2n, idx1, idx2):
        if idx1 is None:
            idx1 = stack_indices([build_index(c, self.cfg) for c in x1n.detach().cpu().numpy()])
        if idx2 is None:
            idx2 = stack_indices([build_index(c, self.cfg) for c in x2n.detach().cpu().numpy()])
        return idx1, idx2

    def encode_geometry(self, x1n, x2n, idx1: CloudIndex | None = None, idx2: CloudIndex | None = None, with_grid: bool = True, with_dense: bool = True):
        """Returns (EncoderOutput, G_geo) for normalized frames of shape (B, N, 3).

        ``with_grid``/``with_dense`` skip the lattice or the dense per-point
        features when a caller does not need them.
        """
        lim = 0.5 * (GRID_HI - GRID_LO) + 1e-6
        if x1n.abs().max() > lim or x2n.abs().max() > lim:
            raise ValueError("frames must be normalized into the grid cube")
        idx1, idx2 = self._indices(x1n, x2n, idx1, idx2)
        c1, h1 = self.geometry(x1n, idx1)
        _, h2 = self.geometry(x2n, idx2)
        attn = torch.softmax(h1 @ h2.transpose(1, 2) / math.sqrt(self.cfg.feat_dim), dim=-1)
        h = torch.cat([h1, attn @ h2], dim=-1)

        per_point = None
        if with_dense:
            nb = _gather(h, idx1.fp)  # (B, N, 3, 2d)
            interp = (idx1.fp_w.to(h.dtype)[..., None] * nb).sum(2)
            per_point = self.propagate(torch.cat([interp, x1n], dim=-1))
        enc = EncoderOutput(h1, h2, h, per_point, attn, c1)
        if not with_grid:
            return enc, None
        K = self.cfg.grid_size
        src = torch.cat([self.splat(h), torch.ones_like(h[..., :1])], dim=-1)
        G_geo = self.unet(trilinear_splat_torch(src, c1, K))
        return enc, G_geo

    def encode_pose(self, phi: torch.Tensor) -> torch.Tensor:
        if phi.shape[-1] != self.cfg.num_joints:
            raise ValueError(f"pose has {phi.shape[-1]} entries, model expects {self.cfg.num_joints}")
        return self.pose(phi)

    def decode_transforms(self, G: torch.Tensor, x1n: torch.Tensor, mu3: torch.Tensor) -> torch.Tensor:
        """Per-point (B, N, 3, 4) transforms in the normalized frame from the full grid G."""
        if G.shape[1] != self.cfg.psi_dim:
            raise ValueError(f"grid has {G.shape[1]} channels, expected {self.cfg.psi_dim}")
        psi = trilinear_query_torch(G, x1n)
        Cg = self.cfg.grid_channels
        # z_art channels are constant in space, so their query is exact at any point
        return self.decoder(psi[..., :Cg], torch.cat([psi[:, 0, Cg:], mu3], dim=-1))

    def _decode_nir(self, G_geo, x1n, mu1, mu2, mu3):
        psi_geo = trilinear_query_torch(G_geo, x1n)
        return self.decoder(psi_geo, torch.cat([mu1, mu2, mu3], dim=-1))

    def grid_point_transforms(self, G_geo, mu1, mu2, mu3):
        """Decode at every lattice node; returns node positions (K^3, 3) and displacements (B, K^3, 3)."""
        K = self.cfg.grid_size
        ax = torch.linspace(GRID_LO, GRID_HI, K, dtype=G_geo.dtype)
        nodes = torch.stack(torch.meshgrid(ax, ax, ax, indexing="ij"), -1).reshape(-1, 3)
        x = nodes[None].expand(G_geo.shape[0], -1, -1)
        T = self._decode_nir(G_geo, x, mu1, mu2, mu3)
        return nodes, apply_transforms_torch(T, x) - x

    # -- full passes --------------------------------------------------------

    def transforms(self, x1n, x2n, phi1, phi2, phi3, idx1=None, idx2=None) -> torch.Tensor:
        """Normalized-frame per-point transforms for the configured variant."""
        nir = self.cfg.variant == "nir"
        enc, G_geo = self.encode_geometry(x1n, x2n, idx1, idx2, with_grid=nir, with_dense=not nir)
        mu1, mu2, mu3 = self.encode_pose(phi1), self.encode_pose(phi2), self.encode_pose(phi3)
        if nir:
            return self._decode_nir(G_geo, x1n, mu1, mu2, mu3)
        return self.decoder(enc.per_point, torch.cat([mu1, mu2, mu3], dim=-1))

    def forward(self, x1, x2, phi1, phi2, phi3, idx1=None, idx2=None):
        """Predict the frame-1 cloud moved to pose ``phi3``; inputs in object units.

        Returns (prediction (B, N, 3), per-point transforms in the normalized frame).
        """
        x1n, x2n, scale, offset = normalize_pair_torch(x1, x2)
        T = self.transforms(x1n, x2n, phi1, phi2, phi3, idx1, idx2)
        pred = apply_transforms_torch(T, x1n) / scale[:, None, None] + offset[:, None, :]
        return pred, T


def init_model(cfg: ModelConfig, seed: int, dtype=torch.float32) -> PartMotionNet:
    """Deterministic initialisation; the decoder head starts at exactly the identity."""
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        model = PartMotionNet(cfg)
    finally:
        torch.random.set_rng_state(gen_state)
    return model.to(dtype)


def parameter_groups(model: nn.Module) -> dict[str, list[str]]:
    """Parameter names keyed by top-level component."""
    groups: dict[str, list[str]] = {}
    for name, _ in model.named_parameters():
        groups.setdefault(name.split(".")[0], []).append(name)
    return groups


def _tensor(x, dtype):
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def prepare_batch(tuples, cfg: ModelConfig, dtype=torch.float32, with_index: bool = True):
    """Stack TrainingTuples into tensors, plus grouping indices for both frames."""
    x1 = _tensor(np.stack([t.I1 for t in tuples]).astype(np.float64), dtype)
    x2 = _tensor(np.stack([t.I2 for t in tuples]).astype(np.float64), dtype)
    phis = [_tensor(np.stack([getattr(t, k) for t in tuples]).astype(np.float64), dtype) for k in ("phi1", "phi2", "phi3")]
    idx1 = idx2 = None
    if with_index:
        x1n, x2n, _, _ = normalize_pair_torch(x1.double(), x2.double())
        idx1 = stack_indices([build_index(c, cfg) for c in x1n.numpy()])
        idx2 = stack_indices([build_index(c, cfg) for c in x2n.numpy()])
    return x1, x2, *phis, idx1, idx2


@torch.no_grad()
def predict(model: PartMotionNet, tuples, phi3=None) -> np.ndarray:
    """Predicted target clouds (B, N, 3) as float64 numpy; ``phi3`` overrides the tuples' target poses."""
    dtype = next(model.parameters()).dtype
    x1, x2, p1, p2, p3, i1, i2 = prepare_batch(tuples, model.cfg, dtype)
    if phi3 is not None:
        p3 = _tensor(np.asarray(phi3, dtype=np.float64).reshape(len(tuples), -1), dtype)
    pred, _ = model(x1, x2, p1, p2, p3, i1, i2)
    return pred.double().numpy()


def forward_no_nir(model: PartMotionNet, x1, x2, phi1, phi2, phi3, idx1=None, idx2=None):
    """Ablation pass: decode from dense per-point features, bypassing the grid."""
    if model.cfg.variant != "no_nir":
        raise ValueError("forward_no_nir needs a model built with variant='no_nir'")
    return model(x1, x2, phi1, phi2, phi3, idx1, idx2)
