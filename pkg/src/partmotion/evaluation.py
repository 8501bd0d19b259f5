"""Evaluation harness: metrics reports, pose sweeps and grid-field analysis."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import synthgen
from .geom import apply_point_transforms
from .model import PartMotionNet, normalize_pair_torch, predict
from .train import config_hash
from .transport import chamfer, emd_exact, pae

REPORT_VERSION = 1
METRICS = ("emd", "chamfer", "pae")

Predictor = Callable[[list], np.ndarray]


def model_predictor(model: PartMotionNet, batch_size: int = 16) -> Predictor:
    def run(tuples):
        model.eval()
        out = [predict(model, tuples[i : i + batch_size]) for i in range(0, len(tuples), batch_size)]
        return np.concatenate(out) if out else np.zeros((0, 0, 3))

    return run


def oracle_predictor(tuples) -> np.ndarray:
    """Ground-truth transforms applied to frame 1."""
    return np.stack([apply_point_transforms(t.gt_transforms_1to3, np.asarray(t.I1, np.float64)) for t in tuples])


def identity_predictor(tuples) -> np.ndarray:
    return np.stack([np.asarray(t.I1, np.float64) for t in tuples])


def _labelled(dataset):
    """Yield (object, object index, tuple) for a Dataset or a list of (object, tuple) pairs."""
    if isinstance(dataset, synthgen.Dataset):
        for i, obj in enumerate(dataset.objects):
            for t in dataset.tuples[i]:
                yield obj, i, t
    else:
        for i, (obj, t) in enumerate(dataset):
            yield obj, i, t


def tuple_metrics(obj: synthgen.ArticulatedObject, t: synthgen.TrainingTuple, pred, per_joint: bool = False) -> dict:
    I1 = np.asarray(t.I1, np.float64)
    I3 = np.asarray(t.I3, np.float64)
    p1 = np.asarray(t.phi1, np.float64)
    p3 = np.asarray(t.phi3, np.float64)
    out = {"emd": emd_exact(pred, I3).cost, "chamfer": chamfer(pred, I3)}
    pae_j = []
    for j, joint in enumerate(obj.joints):
        gt = synthgen.joint_transform_between(obj, j, p1, p3)
        pae_j.append(pae(pred, I1, obj.part_labels == j, gt, joint.kind))
    out["pae"] = pae_j[obj.dominant_joint()]
    if per_joint:
        out["pae_per_joint"] = pae_j
    return out


def _summary(values) -> dict:
    v = np.asarray(values, dtype=np.float64)
    if len(v) == 0:
        return {"median": None, "mean": None}
    return {"median": float(np.median(v)), "mean": float(np.mean(v))}


def _aggregate(rows, prefix: str = "") -> dict:
    cats = sorted({r["category"] for r in rows})
    agg = {"all": {m: _summary([r[prefix + m] for r in rows]) for m in METRICS}}
    for c in cats:
        agg[c] = {m: _summary([r[prefix + m] for r in rows if r["category"] == c]) for m in METRICS}
    return agg


@dataclass
class EvalOptions:
    min_pose_delta: float = 0.0  # on the dominant joint, |phi3 - phi1|
    ablation: Predictor | None = None
    per_joint_pae: bool = False
    max_tuples: int | None = None


def evaluate(predictor: Predictor | PartMotionNet, dataset, options: EvalOptions | None = None, tag: str = "") -> dict:
    """Per-tuple EMD / Chamfer / PAE with identity baseline and optional ablation block."""
    options = options or EvalOptions()
    if isinstance(predictor, PartMotionNet):
        hash_src = predictor.cfg.to_dict()
        predictor = model_predictor(predictor)
    else:
        hash_src = getattr(predictor, "__name__", "predictor")
    items = []
    for obj, i, t in _labelled(dataset):
        d = obj.dominant_joint()
        delta = abs(float(t.phi3[d]) - float(t.phi1[d]))
        if delta >= options.min_pose_delta:
            items.append((obj, i, t, delta))
    if options.max_tuples is not None:
        items = items[: options.max_tuples]
    if not items:
        raise ValueError("no tuples to evaluate")
    tuples = [it[2] for it in items]
    preds = predictor(tuples)
    base = identity_predictor(tuples)
    abl = options.ablation(tuples) if options.ablation is not None else None
    rows = []
    for k, (obj, i, t, delta) in enumerate(items):
        row = {
            "category": obj.category,
            "object": i,
            "seed": obj.seed,
            "phi1": np.asarray(t.phi1, np.float64).tolist(),
            "phi2": np.asarray(t.phi2, np.float64).tolist(),
            "phi3": np.asarray(t.phi3, np.float64).tolist(),
            "pose_delta": delta,
        }
        row.update(tuple_metrics(obj, t, preds[k], options.per_joint_pae))
        row.update({"baseline_" + m: v for m, v in tuple_metrics(obj, t, base[k]).items() if m in METRICS})
        if abl is not None:
            row.update({"ablation_" + m: v for m, v in tuple_metrics(obj, t, abl[k]).items() if m in METRICS})
        rows.append(row)
    report = {
        "version": REPORT_VERSION,
        "config_hash": config_hash(hash_src, tag, options.min_pose_delta),
        "counts": {"tuples": len(rows), "objects": len({(r["category"], r["object"]) for r in rows})},
        "per_tuple": rows,
        "aggregates": _aggregate(rows),
        "baselines": {"identity": _aggregate(rows, "baseline_")},
    }
    if abl is not None:
        nir = report["aggregates"]["all"]["emd"]["median"]
        no_nir = _aggregate(rows, "ablation_")
        report["ablation"] = {
            "no_nir": no_nir,
            "nir_lower_emd": bool(nir < no_nir["all"]["emd"]["median"]),
        }
    return report


def recompute_aggregates(report: dict) -> dict:
    return _aggregate(report["per_tuple"])


# ---------------------------------------------------------------------------
# sweeps


@dataclass
class SweepCurve:
    phi1: float
    phi2: float
    joint: int
    phi3: list = field(default_factory=list)
    emd: list = field(default_factory=list)
    interpolation: list = field(default_factory=list)
    within_limits: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def default_sweep_grid(phi1: float, phi2: float, n_interp: int = 5, beyond: float = 0.25) -> np.ndarray:
    """``n_interp`` evenly spaced interior poses plus the endpoints and +/- ``beyond`` of the gap."""
    lo, hi = min(phi1, phi2), max(phi1, phi2)
    gap = hi - lo
    inner = np.linspace(lo, hi, n_interp + 2)
    return np.concatenate([[lo - beyond * gap], inner, [hi + beyond * gap]])


def interp_extrap(model: PartMotionNet, obj: synthgen.ArticulatedObject, phi1, phi2, phi_grid, joint: int | None = None) -> SweepCurve:
    """EMD of the prediction against ground truth for each target pose in ``phi_grid``.

    Only the swept joint varies; other joints stay at ``phi1``.
    """
    phi1 = np.atleast_1d(np.asarray(phi1, np.float64))
    phi2 = np.atleast_1d(np.asarray(phi2, np.float64))
    j = obj.dominant_joint() if joint is None else joint
    grid = np.sort(np.asarray(phi_grid, np.float64))
    targets = np.repeat(phi1[None], len(grid), 0)
    targets[:, j] = grid
    base = synthgen.make_tuple(obj, phi1, phi2, phi1)
    preds = predict(model, [base] * len(grid), phi3=targets)
    lo, hi = min(phi1[j], phi2[j]), max(phi1[j], phi2[j])
    jt = obj.joints[j]
    curve = SweepCurve(float(phi1[j]), float(phi2[j]), j)
    for g, tgt, pred in zip(grid, targets, preds):
        curve.phi3.append(float(g))
        curve.emd.append(emd_exact(pred, synthgen.pose_cloud(obj, tgt)).cost)
        curve.interpolation.append(bool(lo <= g <= hi))
        curve.within_limits.append(bool(jt.pose_min <= g <= jt.pose_max))
    return curve


# ---------------------------------------------------------------------------
# grid field


def fit_rotation_axis(displacements, weights=None):
    """Axis most orthogonal to all displacement vectors (magnitude-weighted); None if degenerate."""
    d = np.asarray(displacements, np.float64)
    mag = np.linalg.norm(d, axis=1)
    keep = mag > 1e-9
    if keep.sum() < 2:
        return None
    w = mag[keep] if weights is None else np.asarray(weights, np.float64)[keep]
    u = d[keep] / mag[keep, None]
    S = (w[:, None, None] * u[:, :, None] * u[:, None, :]).sum(0)
    evals, evecs = np.linalg.eigh(S)
    if evals[1] <= 1e-9 * evals[2]:
        return None
    return evecs[:, 0]


def line_angle_deg(a, b) -> float:
    c = abs(float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b))))
    return float(np.degrees(np.arccos(min(c, 1.0))))


@torch.no_grad()
def grid_field_report(model: PartMotionNet, obj: synthgen.ArticulatedObject, t: synthgen.TrainingTuple, margin: float = 0.05) -> dict:
    """Decode displacements at every lattice node and fit the rotation axis in the movable region."""
    dtype = next(model.parameters()).dtype
    x1 = torch.as_tensor(np.asarray(t.I1, np.float64), dtype=dtype)[None]
    x2 = torch.as_tensor(np.asarray(t.I2, np.float64), dtype=dtype)[None]
    ph = [torch.as_tensor(np.atleast_1d(np.asarray(p, np.float64)), dtype=dtype)[None] for p in (t.phi1, t.phi2, t.phi3)]
    x1n, x2n, scale, offset = normalize_pair_torch(x1, x2)
    _, G_geo = model.encode_geometry(x1n, x2n, with_dense=False)
    mus = [model.encode_pose(p) for p in ph]
    nodes, disp = model.grid_point_transforms(G_geo, *mus)
    s = float(scale[0])
    nodes_obj = nodes.double().numpy() / s + offset[0].double().numpy()
    disp_obj = disp[0].double().numpy() / s

    j = obj.dominant_joint()
    m = obj.part_labels == j
    part = np.asarray(t.I1, np.float64)[m]
    lo, hi = part.min(0) - margin, part.max(0) + margin
    inside = np.all((nodes_obj >= lo) & (nodes_obj <= hi), axis=1)
    joint = obj.joints[j]
    out = {
        "K": model.cfg.grid_size,
        "nodes": nodes_obj,
        "displacements": disp_obj,
        "region_nodes": int(inside.sum()),
        "joint_kind": joint.kind,
        "gt_axis": joint.axis.tolist(),
        "fittable": False,
        "fitted_axis": None,
        "axis_error_deg": None,
    }
    axis = fit_rotation_axis(disp_obj[inside]) if inside.any() else None
    if axis is not None:
        out.update(fittable=True, fitted_axis=axis.tolist(), axis_error_deg=line_angle_deg(axis, joint.axis))
    return out


def field_csv(field_report: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["x", "y", "z", "dx", "dy", "dz"])
    for p, d in zip(field_report["nodes"], field_report["displacements"]):
        w.writerow([repr(float(v)) for v in (*p, *d)])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# rendering


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, np.integer, np.bool_)):
        return x.item()
    return x


def dumps(obj) -> str:
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True)


def _figure_setup():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "partmotion"
    return plt


def _save_svg(fig, path):
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})


def field_slices(field_report: dict) -> dict:
    """Top-down (fixed z) and side (fixed x) lattice slices through the busiest layer."""
    K = field_report["K"]
    nodes = np.asarray(field_report["nodes"]).reshape(K, K, K, 3)
    disp = np.asarray(field_report["displacements"]).reshape(K, K, K, 3)
    mag = np.linalg.norm(disp, axis=-1)
    iz = int(np.argmax(mag.sum(axis=(0, 1))))
    ix = int(np.argmax(mag.sum(axis=(1, 2))))
    return {
        "top": (nodes[:, :, iz][..., [0, 1]].reshape(-1, 2), disp[:, :, iz][..., [0, 1]].reshape(-1, 2)),
        "side": (nodes[ix][..., [1, 2]].reshape(-1, 2), disp[ix][..., [1, 2]].reshape(-1, 2)),
    }


def render_report(obj, out_path, kind: str | None = None) -> list[Path]:
    """Write ``obj`` as deterministic JSON plus SVG figures next to it.

    ``kind`` is one of "report", "curve", "field", "losses" (inferred if None).
    """
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(obj, SweepCurve):
        kind, data = kind or "curve", obj.to_dict()
    else:
        data = obj
        if kind is None:
            kind = "field" if "displacements" in data else "report" if "per_tuple" in data else "losses"
    written = []
    if kind == "field":
        out_path.with_suffix(".csv").write_text(field_csv(data), encoding="utf-8")
        written.append(out_path.with_suffix(".csv"))
        summary = {k: v for k, v in data.items() if k not in ("nodes", "displacements")}
        out_path.write_text(dumps(summary), encoding="utf-8")
    else:
        out_path.write_text(dumps(data), encoding="utf-8")
    written.append(out_path)

    plt = _figure_setup()
    if kind == "field":
        for view, (xy, uv) in field_slices(data).items():
            fig, ax = plt.subplots(figsize=(5, 5))
            ax.quiver(xy[:, 0], xy[:, 1], uv[:, 0], uv[:, 1], angles="xy", scale_units="xy", scale=1.0, width=0.003)
            ax.set_aspect("equal")
            ax.set_title(f"{view} view")
            p = out_path.with_name(f"{out_path.stem}_{view}.svg")
            _save_svg(fig, p)
            plt.close(fig)
            written.append(p)
    elif kind == "curve":
        fig, ax = plt.subplots(figsize=(5, 3.5))
        phi, emd = np.array(data["phi3"]), np.array(data["emd"])
        inter = np.array(data["interpolation"], dtype=bool)
        ax.plot(phi, emd, color="0.6")
        ax.scatter(phi[inter], emd[inter], label="interpolation")
        ax.scatter(phi[~inter], emd[~inter], marker="x", label="extrapolation")
        ax.set_xlabel("target pose")
        ax.set_ylabel("EMD")
        ax.legend()
        p = out_path.with_suffix(".svg")
        _save_svg(fig, p)
        plt.close(fig)
        written.append(p)
    elif kind == "losses":
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.plot(np.asarray(data["losses"]))
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.set_yscale("log")
        p = out_path.with_suffix(".svg")
        _save_svg(fig, p)
        plt.close(fig)
        written.append(p)
    elif kind == "report":
        rows = data["per_tuple"]
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.scatter([r["pose_delta"] for r in rows], [r["baseline_emd"] for r in rows], label="identity", marker="x")
        ax.scatter([r["pose_delta"] for r in rows], [r["emd"] for r in rows], label="model")
        ax.set_xlabel("|target - frame 1| pose")
        ax.set_ylabel("EMD")
        ax.legend()
        p = out_path.with_suffix(".svg")
        _save_svg(fig, p)
        plt.close(fig)
        written.append(p)
    return written
