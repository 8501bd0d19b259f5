"""Command-line entry point: gen-data, train, finetune, eval, interp, gridviz.

Exit codes: 0 success, 2 usage error or missing input, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
import torch

from . import evaluation, synthgen
from .model import PRESETS, ModelConfig
from .train import CheckpointError, TrainConfig, TrainingDiverged, finetune, load_checkpoint, train
from .transport import LossConfig

EXIT_USAGE = 2
EXIT_NUMERIC = 3

SECTIONS = {
    "model": {f.name for f in fields(ModelConfig)},
    "train": {f.name for f in fields(TrainConfig)} - {"loss"},
    "loss": {f.name for f in fields(LossConfig)},
    "experiment": {"seed", "jobs", "min_pose_delta_deg", "eval_tuples"},
}


class UsageError(Exception):
    pass


def default_config() -> dict:
    return {"preset": "desk", "model": {}, "train": {}, "loss": {}, "experiment": {}}


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def set_dotted(cfg: dict, key: str, value):
    parts = key.split(".")
    if parts == ["preset"]:
        if value not in PRESETS:
            raise UsageError(f"unknown preset {value!r}")
        cfg["preset"] = value
        return
    if len(parts) != 2 or parts[0] not in SECTIONS:
        raise UsageError(f"unknown config key {key!r}")
    if parts[1] not in SECTIONS[parts[0]]:
        raise UsageError(f"unknown config key {key!r}")
    cfg[parts[0]][parts[1]] = value


def load_config(path=None, overrides=()) -> dict:
    """Merge a JSON config file and ``key=value`` overrides; unknown keys are rejected."""
    cfg = default_config()
    if path is not None:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise UsageError(f"config file not found: {path}") from None
        except json.JSONDecodeError as e:
            raise UsageError(f"malformed config {path}: {e}") from None
        for key, value in data.items():
            if key == "preset":
                set_dotted(cfg, key, value)
            elif key in SECTIONS and isinstance(value, dict):
                for k, v in value.items():
                    set_dotted(cfg, f"{key}.{k}", v)
            else:
                raise UsageError(f"unknown config key {key!r}")
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"override must be key=value, got {item!r}")
        k, v = item.split("=", 1)
        set_dotted(cfg, k.strip(), _parse_value(v))
    return cfg


def resolve_seed(arg_seed, cfg) -> int:
    if arg_seed is not None:
        return int(arg_seed)
    if "seed" in cfg["experiment"]:
        return int(cfg["experiment"]["seed"])
    return int(os.environ.get("PARTMOTION_SEED", "0"))


def model_config(cfg: dict, **kw) -> ModelConfig:
    try:
        return PRESETS[cfg["preset"]](**{**cfg["model"], **kw})
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid model config: {e}") from None


def train_config(cfg: dict, **kw) -> TrainConfig:
    try:
        return TrainConfig(**{**cfg["train"], **kw, "loss": LossConfig(**cfg["loss"])})
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid train config: {e}") from None


def _write_json(path: Path, data):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(evaluation.dumps(data), encoding="utf-8")


def _open_dataset(path, split: str | None = None) -> synthgen.Dataset:
    p = Path(path)
    if split and (p / split / "meta.json").exists():
        p = p / split
    if not (p / "meta.json").exists():
        raise UsageError(f"no dataset at {p}")
    return synthgen.read_dataset(p)


def _open_checkpoint(path):
    p = Path(path)
    for cand in (p, p / "final"):
        if (cand / "manifest.json").exists():
            return load_checkpoint(cand), cand
    raise UsageError(f"no checkpoint at {p}")


def _pick_tuple(ds: synthgen.Dataset, obj_i: int, tup_i: int):
    try:
        return ds.objects[obj_i], ds.tuples[obj_i][tup_i]
    except IndexError:
        raise UsageError(f"no tuple {tup_i} of object {obj_i}") from None


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args, cfg) -> int:
    out = Path(args.out or f"data/{args.category}")
    if synthgen.is_nonempty_dir(out) and not args.force:
        raise UsageError(f"{out} exists and is not empty (use --force)")
    seed = resolve_seed(args.seed, cfg)
    if out.exists() and args.force:
        import shutil

        shutil.rmtree(out)
    try:
        train_ds, test_ds = synthgen.generate_split(args.category, args.objects, args.tuples, args.points, seed, out)
    except ValueError as e:
        raise UsageError(str(e)) from None
    resolved = {**cfg, "experiment": {**cfg["experiment"], "seed": seed}, "data": vars(args) | {"seed": seed, "func": None}}
    _write_json(out / "resolved_config.json", resolved)
    n_test = len(test_ds.objects) if test_ds else 0
    print(f"wrote {len(train_ds.objects)} train / {n_test} test objects to {out}")
    return 0


def _eval_fn(test_ds, n):
    if test_ds is None:
        return None
    flat = [(o, t) for o, ts in zip(test_ds.objects, test_ds.tuples) for t in ts][:n]

    def run(model):
        rep = evaluation.evaluate(model, flat)
        return {"emd": rep["aggregates"]["all"]["emd"]["median"], "baseline_emd": rep["baselines"]["identity"]["all"]["emd"]["median"]}

    return run


def _finish_run(out: Path, result, cfg) -> int:
    rec = result.record
    _write_json(out / "run_record.json", {"config_hash": rec.config_hash, "losses": rec.losses, "evals": rec.evals, "wall_clock": rec.wall_clock})
    _write_json(out / "config.json", cfg)
    if rec.losses:
        evaluation.render_report({"losses": rec.losses}, out / "losses.json", kind="losses")
    if rec.losses and not math.isfinite(rec.losses[-1]):
        print(f"numerical failure: final loss {rec.losses[-1]}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"run written to {out}")
    return 0


def cmd_train(args, cfg) -> int:
    seed = resolve_seed(args.seed, cfg)
    kw = {"seed": seed}
    if args.steps is not None:
        kw["steps"] = args.steps
    ds = _open_dataset(args.data, "train")
    test = None
    try:
        test = _open_dataset(args.data, "test") if (Path(args.data) / "test").exists() else None
    except UsageError:
        pass
    mkw = {"n_points": ds.n_points, "num_joints": ds.n_joints}
    if args.ablation:
        mkw["variant"] = args.ablation
    mcfg = model_config(cfg, **mkw)
    tcfg = train_config(cfg, **kw)
    out = Path(args.out or "runs/train")
    resolved = {**cfg, "model": mcfg.to_dict(), "train": tcfg.to_dict(), "experiment": {**cfg["experiment"], "seed": seed}}
    n_eval = int(cfg["experiment"].get("eval_tuples", 32))
    try:
        result = train(ds, mcfg, tcfg, out, _eval_fn(test, n_eval))
    except TrainingDiverged as e:
        print(f"numerical failure at step {e.step}", file=sys.stderr)
        return EXIT_NUMERIC
    return _finish_run(out, result, resolved)


def cmd_finetune(args, cfg) -> int:
    (model, manifest), ck = _open_checkpoint(args.ckpt)
    ds = _open_dataset(args.data, "train")
    out = Path(args.out or "runs/finetune")
    seed = resolve_seed(args.seed, cfg) if args.seed is not None or "seed" in cfg["experiment"] else None
    try:
        result = finetune((model, manifest), ds, args.fraction, out_dir=out, seed=seed)
    except TrainingDiverged as e:
        print(f"numerical failure at step {e.step}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        raise UsageError(str(e)) from None
    resolved = {**cfg, "model": model.cfg.to_dict(), "train": result.train_config.to_dict(), "finetune": {"from": str(ck), "fraction": args.fraction}}
    return _finish_run(out, result, resolved)


def cmd_eval(args, cfg) -> int:
    (model, _), ck = _open_checkpoint(args.ckpt)
    ds = _open_dataset(args.data, "test")
    ablation = None
    if args.ablation_ckpt:
        (abl_model, _), _ = _open_checkpoint(args.ablation_ckpt)
        ablation = evaluation.model_predictor(abl_model)
    if args.ablation == "no_nir" and model.cfg.variant != "no_nir":
        raise UsageError("--ablation no_nir needs a checkpoint trained with --ablation no_nir")
    min_delta = math.radians(float(cfg["experiment"].get("min_pose_delta_deg", args.min_delta_deg)))
    opts = evaluation.EvalOptions(min_pose_delta=min_delta, ablation=ablation, per_joint_pae=args.per_joint_pae)
    try:
        report = evaluation.evaluate(model, ds, opts, tag=str(ck.name))
    except ValueError as e:
        raise UsageError(str(e)) from None
    out = Path(args.out or "reports")
    evaluation.render_report(report, out / "report.json", kind="report")
    agg = report["aggregates"]["all"]
    print(f"median EMD {agg['emd']['median']:.5f} (identity {report['baselines']['identity']['all']['emd']['median']:.5f}), median PAE {agg['pae']['median']:.3f}")
    return 0


def cmd_interp(args, cfg) -> int:
    (model, _), _ = _open_checkpoint(args.ckpt)
    ds = _open_dataset(args.data, "test")
    obj, t = _pick_tuple(ds, args.object, args.tuple)
    j = obj.dominant_joint()
    p1, p2 = float(t.phi1[j]), float(t.phi2[j])
    lo, hi = min(p1, p2), max(p1, p2)
    gap = hi - lo
    grid = np.linspace(lo - args.beyond * gap, hi + args.beyond * gap, args.steps)
    curve = evaluation.interp_extrap(model, obj, np.asarray(t.phi1, np.float64), np.asarray(t.phi2, np.float64), grid)
    out = Path(args.out or "reports")
    evaluation.render_report(curve, out / "curve.json")
    print(f"{len(curve.phi3)} curve points written to {out}")
    return 0


def cmd_gridviz(args, cfg) -> int:
    (model, _), _ = _open_checkpoint(args.ckpt)
    ds = _open_dataset(args.data, "test")
    obj, t = _pick_tuple(ds, args.object, args.tuple)
    rep = evaluation.grid_field_report(model, obj, t)
    out = Path(args.out or "reports")
    evaluation.render_report(rep, out / "field.json", kind="field")
    if rep["fittable"]:
        print(f"fitted axis error {rep['axis_error_deg']:.2f} deg")
    else:
        print("field not fittable (no displacement in the movable region)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="partmotion", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="dotted-path override, e.g. loss.movable_weight=0")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--jobs", type=int, default=1, help="intra-command threads (1 keeps results deterministic)")
        if seed:
            sp.add_argument("--seed", type=int)

    g = sub.add_parser("gen-data", help="synthesize train/test datasets")
    g.add_argument("--category", required=True, choices=synthgen.CATEGORIES)
    g.add_argument("--objects", type=int, default=16)
    g.add_argument("--tuples", type=int, default=32)
    g.add_argument("--points", type=int, default=512)
    g.add_argument("--force", action="store_true")
    common(g)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train from scratch")
    t.add_argument("--data", required=True)
    t.add_argument("--steps", type=int)
    t.add_argument("--ablation", choices=["no_nir"])
    common(t)
    t.set_defaults(func=cmd_train)

    f = sub.add_parser("finetune", help="finetune a checkpoint on a small dataset")
    f.add_argument("--ckpt", required=True)
    f.add_argument("--data", required=True)
    f.add_argument("--fraction", type=float, default=0.05)
    common(f)
    f.set_defaults(func=cmd_finetune)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--ablation", choices=["no_nir"])
    e.add_argument("--ablation-ckpt")
    e.add_argument("--min-delta-deg", type=float, default=0.0)
    e.add_argument("--per-joint-pae", action="store_true")
    common(e, seed=False)
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("interp", help="sweep target poses between and beyond the two frames")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--data", required=True)
    i.add_argument("--object", type=int, default=0)
    i.add_argument("--tuple", type=int, default=0)
    i.add_argument("--steps", type=int, default=7)
    i.add_argument("--beyond", type=float, default=0.25)
    common(i, seed=False)
    i.set_defaults(func=cmd_interp)

    v = sub.add_parser("gridviz", help="export and fit the decoded grid displacement field")
    v.add_argument("--ckpt", required=True)
    v.add_argument("--data", required=True)
    v.add_argument("--object", type=int, default=0)
    v.add_argument("--tuple", type=int, default=0)
    common(v, seed=False)
    v.set_defaults(func=cmd_gridviz)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    torch.set_num_threads(max(1, args.jobs))
    try:
        cfg = load_config(args.config, args.set)
        return args.func(args, cfg)
    except (UsageError, CheckpointError, synthgen.DatasetError) as e:
        print(f"partmotion: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
