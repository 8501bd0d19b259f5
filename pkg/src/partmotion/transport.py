"""Point-cloud distances, pose errors and the training loss.

EMD follows the mean-matched-distance convention: for equal-size clouds it is
``min_sigma mean_i |a_i - b_sigma(i)|``, so values do not scale with N.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from .geom import RigidTransform, kabsch_fit, rotation_angle

EXACT_SIZE_CAP = 2048


class SinkhornNotConverged(RuntimeError):
    def __init__(self, violation: float, iters: int):
        super().__init__(f"Sinkhorn marginal violation {violation:.3g} after {iters} iterations")
        self.violation = violation


@dataclass(frozen=True)
class AssignmentResult:
    permutation: np.ndarray
    cost: float


@dataclass(frozen=True)
class LossConfig:
    mode: str = "exact_assignment"
    movable_weight: float = 2.0
    sinkhorn_epsilon: float = 4e-3
    sinkhorn_iters: int = 5000

    def __post_init__(self):
        if self.mode not in ("exact_assignment", "sinkhorn"):
            raise ValueError(f"unknown loss mode {self.mode!r}")
        if self.movable_weight < 0:
            raise ValueError("movable_weight must be nonnegative")
        if self.sinkhorn_epsilon <= 0 or self.sinkhorn_iters <= 0:
            raise ValueError("sinkhorn_epsilon and sinkhorn_iters must be positive")


def _as_cloud(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def _check_pair(A, B):
    if A.ndim != 2 or A.shape != B.shape:
        raise ValueError(f"clouds must have equal shape, got {A.shape} and {B.shape}")


def emd_exact(A, B, cap: int = EXACT_SIZE_CAP) -> AssignmentResult:
    """Optimal bijection between equal-size clouds under Euclidean cost."""
    A, B = _as_cloud(A), _as_cloud(B)
    _check_pair(A, B)
    if len(A) > cap:
        raise ValueError(f"N={len(A)} exceeds exact-assignment cap {cap}; use emd_sinkhorn")
    D = cdist(A, B)
    rows, cols = linear_sum_assignment(D)
    perm = np.empty(len(A), dtype=np.int64)
    perm[rows] = cols
    return AssignmentResult(perm, float(D[rows, cols].mean()) if len(A) else 0.0)


def _lse(x, axis):
    m = x.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def _sinkhorn_plan(C, epsilon, iters, tol):
    """Log-domain Sinkhorn with uniform marginals and epsilon annealing."""
    n, m = C.shape
    la, lb = np.full(n, -np.log(n)), np.full(m, -np.log(m))
    f, g = np.zeros(n), np.zeros(m)
    eps = max(float(C.max()), epsilon)
    it = 0
    while it < iters:
        it += 1
        eps = max(eps * 0.8, epsilon)
        f = -eps * _lse((g[None, :] - C) / eps + lb[None, :], axis=1)
        g = -eps * _lse((f[:, None] - C) / eps + la[:, None], axis=0)
        if eps == epsilon and it % 10 == 0:
            logP = (f[:, None] + g[None, :] - C) / eps + la[:, None] + lb[None, :]
            viol = np.abs(np.exp(_lse(logP, axis=1)) * n - 1.0).max()
            if viol < tol * 0.1:
                break
    logP = (f[:, None] + g[None, :] - C) / eps + la[:, None] + lb[None, :]
    P = np.exp(logP)
    viol = max(np.abs(P.sum(1) * n - 1.0).max(), np.abs(P.sum(0) * m - 1.0).max())
    if eps != epsilon or viol > tol:
        raise SinkhornNotConverged(float(viol), it)
    return P


def sinkhorn_plan(A, B, epsilon: float, iters: int = 5000, tol: float = 1e-3) -> np.ndarray:
    """Entropic transport plan on the squared-distance cost; rows sum to 1/N."""
    A, B = _as_cloud(A), _as_cloud(B)
    _check_pair(A, B)
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    return _sinkhorn_plan(cdist(A, B, "sqeuclidean"), epsilon, iters, tol)


def _plan_cost(A, B, epsilon, iters, tol):
    P = sinkhorn_plan(A, B, epsilon, iters, tol)
    return float((P * cdist(A, B)).sum())


def emd_sinkhorn(A, B, epsilon: float, iters: int = 5000, tol: float = 1e-3) -> float:
    """Debiased entropic EMD surrogate, reported as a mean matched distance.

    The plan comes from the squared-distance kernel; its Euclidean transport
    cost has the self-transport blur of each cloud subtracted, and the two
    argument orders are averaged so the result is exactly symmetric.
    """
    A, B = _as_cloud(A), _as_cloud(B)
    _check_pair(A, B)
    cross = 0.5 * (_plan_cost(A, B, epsilon, iters, tol) + _plan_cost(B, A, epsilon, iters, tol))
    self_a = _plan_cost(A, A, epsilon, iters, tol)
    self_b = _plan_cost(B, B, epsilon, iters, tol)
    return max(cross - 0.5 * (self_a + self_b), 0.0)


def chamfer(A, B) -> float:
    """Symmetric mean nearest-neighbour distance (sum of both directions)."""
    A, B = _as_cloud(A), _as_cloud(B)
    if len(A) == 0 or len(B) == 0:
        raise ValueError("chamfer distance of an empty cloud")
    dab, _ = cKDTree(B).query(A)
    dba, _ = cKDTree(A).query(B)
    return float(dab.mean() + dba.mean())


def pae(pred, I1, mask, gt: RigidTransform, kind: str = "revolute") -> float:
    """Pose error of the movable part: degrees for revolute, length for prismatic."""
    pred, I1 = _as_cloud(pred), _as_cloud(I1)
    mask = np.asarray(mask, dtype=bool)
    if mask.sum() < 3:
        raise ValueError("PAE needs at least 3 movable points")
    if kind == "revolute":
        fit = kabsch_fit(I1[mask], pred[mask])
        return rotation_angle(fit.R @ gt.R.T)
    if kind == "prismatic":
        t_fit = (pred[mask] - I1[mask]).mean(0)
        return float(np.linalg.norm(t_fit - gt.t))
    raise ValueError(f"unknown joint kind {kind!r}")


# ---------------------------------------------------------------------------
# differentiable loss


def _safe_norm(x: torch.Tensor) -> torch.Tensor:
    # zero gradient at coincident pairs (subgradient convention)
    return torch.sqrt(torch.clamp((x * x).sum(-1), min=1e-24))


def matched_distance(pred: torch.Tensor, target: torch.Tensor, perm) -> torch.Tensor:
    """Mean ``|pred_i - target_perm(i)|`` with the assignment held fixed."""
    perm = torch.as_tensor(perm, dtype=torch.long)
    return _safe_norm(pred - target[perm]).mean()


def _plan_distance(pred, target, P):
    d = _safe_norm(pred[:, None, :] - target[None, :, :])
    return (torch.as_tensor(P, dtype=pred.dtype) * d).sum()


def _emd_term(pred: torch.Tensor, target: torch.Tensor, cfg: LossConfig) -> torch.Tensor:
    if cfg.mode == "exact_assignment":
        return matched_distance(pred, target, emd_exact(pred, target).permutation)
    P = sinkhorn_plan(pred, target, cfg.sinkhorn_epsilon, cfg.sinkhorn_iters)
    Ps = sinkhorn_plan(pred, pred, cfg.sinkhorn_epsilon, cfg.sinkhorn_iters)
    Pt = sinkhorn_plan(target, target, cfg.sinkhorn_epsilon, cfg.sinkhorn_iters)
    return _plan_distance(pred, target, P) - 0.5 * (_plan_distance(pred, pred, Ps) + _plan_distance(target, target, Pt))


def training_loss(pred, target, mask, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    """``EMD(pred, target) + movable_weight * EMD(pred[mask], target[mask])``.

    ``pred`` is a tensor; the returned scalar back-propagates into it with the
    transport plan held fixed.
    """
    if not isinstance(pred, torch.Tensor):
        pred = torch.as_tensor(np.asarray(pred, dtype=np.float64))
    target = torch.as_tensor(_as_cloud(target), dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ValueError(f"pred {tuple(pred.shape)} and target {tuple(target.shape)} differ")
    loss = _emd_term(pred, target, cfg)
    mask = torch.as_tensor(np.asarray(mask, dtype=bool))
    if cfg.movable_weight > 0 and bool(mask.any()):
        loss = loss + cfg.movable_weight * _emd_term(pred[mask], target[mask], cfg)
    return loss
