"""Training loop, finetuning, gradient checking and checkpoint files."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import synthgen
from .model import ModelConfig, PartMotionNet, build_index, init_model, micro_config, parameter_groups, stack_indices
from .model import normalize_pair_torch
from .transport import LossConfig, training_loss

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step


class CheckpointError(ValueError):
    pass


class CheckpointDigestError(CheckpointError):
    pass


class CheckpointMissingBlob(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1500
    batch_size: int = 8
    learning_rate: float = 2e-3
    lr_schedule: str = "cosine"
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    eval_every: int = 0
    checkpoint_every: int = 0
    grad_clip: float = 0.0
    mirror_augment: bool = False

    def __post_init__(self):
        if isinstance(self.loss, dict):
            object.__setattr__(self, "loss", LossConfig(**self.loss))
        if self.steps < 0 or self.batch_size <= 0 or self.learning_rate <= 0:
            raise ValueError("steps must be >= 0, batch_size and learning_rate > 0")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> TrainConfig:
        return cls(**d)


def config_hash(*dicts) -> str:
    blob = json.dumps(list(dicts), sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class RunRecord:
    config_hash: str
    losses: list = field(default_factory=list)
    evals: list = field(default_factory=list)
    wall_clock: float = 0.0
    events_path: Path | None = None

    def log(self, event: dict):
        if self.events_path is not None:
            with open(self.events_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(event, sort_keys=True) + "\n")

    def add_loss(self, step: int, loss: float):
        self.losses.append(loss)
        self.log({"step": step, "loss": loss})

    def add_eval(self, step: int, metrics: dict):
        self.evals.append({"step": step, **metrics})
        self.log({"step": step, "eval": metrics})


@dataclass
class TrainResult:
    model: PartMotionNet
    record: RunRecord
    train_config: TrainConfig


# ---------------------------------------------------------------------------
# checkpoints


def _sha(b: bytes) -> str:
    return hashlib.sha256(b).hexdigest()


def save_checkpoint(model: PartMotionNet, path, train_cfg: TrainConfig | None = None, extra: dict | None = None) -> Path:
    """Write ``manifest.json`` plus one little-endian float32 blob per parameter."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, p in model.state_dict().items():
        blob = p.detach().cpu().to(torch.float32).numpy().astype("<f4").tobytes()
        fname = f"{name}.bin"
        (path / fname).write_bytes(blob)
        entries.append({"name": name, "shape": list(p.shape), "dtype": "<f4", "file": fname, "sha256": _sha(blob)})
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": model.cfg.to_dict(),
        "train_config": train_cfg.to_dict() if train_cfg is not None else None,
        "groups": parameter_groups(model),
        "params": entries,
        "digest": _sha("".join(e["sha256"] for e in entries).encode()),
        "extra": extra or {},
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    return path


def load_checkpoint(path):
    """Returns (model, manifest); verifies every blob digest."""
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CheckpointMissingBlob(f"{path}: missing manifest.json") from None
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: checkpoint version {manifest.get('format_version')}, expected {CHECKPOINT_VERSION}")
    cfg = ModelConfig.from_dict(manifest["model_config"])
    model = PartMotionNet(cfg)
    state = {}
    for e in manifest["params"]:
        f = path / e["file"]
        if not f.exists():
            raise CheckpointMissingBlob(f"{path}: missing blob {e['file']}")
        blob = f.read_bytes()
        if _sha(blob) != e["sha256"]:
            raise CheckpointDigestError(f"{path}: digest mismatch for {e['name']}")
        state[e["name"]] = torch.from_numpy(np.frombuffer(blob, dtype="<f4").copy()).reshape(e["shape"])
    if _sha("".join(e["sha256"] for e in manifest["params"]).encode()) != manifest["digest"]:
        raise CheckpointDigestError(f"{path}: manifest digest mismatch")
    model.load_state_dict(state)
    return model, manifest


# ---------------------------------------------------------------------------
# training


class _Batcher:
    """Pre-stacked tensors and grouping indices for a fixed tuple list."""

    def __init__(self, tuples, cfg: ModelConfig, dtype=torch.float32):
        if not tuples:
            raise ValueError("empty dataset")
        n = tuples[0].I1.shape[0]
        if n != cfg.n_points:
            raise ValueError(f"dataset has N={n}, model expects N={cfg.n_points}")
        if np.atleast_1d(tuples[0].phi1).shape[0] != cfg.num_joints:
            raise ValueError("dataset joint count does not match model")
        self.tuples = tuples
        f64 = lambda k: torch.as_tensor(np.stack([np.asarray(getattr(t, k), dtype=np.float64) for t in tuples]))
        self.x1, self.x2 = f64("I1"), f64("I2")
        self.phi = [f64(k).reshape(len(tuples), -1) for k in ("phi1", "phi2", "phi3")]
        self.I3 = f64("I3")
        self.mask = np.stack([t.movable_mask for t in tuples])
        x1n, x2n, _, _ = normalize_pair_torch(self.x1, self.x2)
        self.idx1 = [build_index(c, cfg) for c in x1n.numpy()]
        self.idx2 = [build_index(c, cfg) for c in x2n.numpy()]
        self.dtype = dtype

    def __len__(self):
        return len(self.tuples)

    def batch(self, sel, flips=None):
        """Inputs for ``sel``; ``flips`` (len(sel), 3) of +-1 mirrors each sample's axes.

        Normalization, farthest-point sampling and ball grouping all commute
        with axis reflections, so the cached indices stay valid.
        """
        d = self.dtype
        f = torch.ones(len(sel), 1, 3, dtype=torch.float64) if flips is None else torch.as_tensor(flips, dtype=torch.float64)[:, None, :]
        return (
            (self.x1[sel] * f).to(d),
            (self.x2[sel] * f).to(d),
            *(p[sel].to(d) for p in self.phi),
            stack_indices([self.idx1[i] for i in sel]),
            stack_indices([self.idx2[i] for i in sel]),
        )


def _batch_loss(model, batcher: _Batcher, sel, loss_cfg: LossConfig, flips=None):
    pred, _ = model(*batcher.batch(sel, flips))
    f = np.ones((len(sel), 3)) if flips is None else np.asarray(flips, dtype=np.float64)
    losses = [training_loss(pred[k], batcher.I3[i] * torch.as_tensor(f[k]), batcher.mask[i], loss_cfg) for k, i in enumerate(sel)]
    return torch.stack(losses).mean()


def _mirror_flips(rng, n):
    """Random reflections of the two horizontal axes; the vertical axis is kept."""
    f = np.ones((n, 3))
    f[:, :2] = rng.choice([-1.0, 1.0], size=(n, 2))
    return f


def _lr_at(cfg: TrainConfig, step: int) -> float:
    if cfg.lr_schedule == "constant" or cfg.steps == 0:
        return cfg.learning_rate
    return cfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * step / cfg.steps))


def _flatten(dataset) -> list:
    if isinstance(dataset, synthgen.Dataset):
        return [t for _, t in dataset.flat()]
    return list(dataset)


def fit(model: PartMotionNet, dataset, train_cfg: TrainConfig, out_dir=None, eval_fn=None) -> TrainResult:
    """Optimise ``model`` in place with Adam on the movable-weighted EMD loss.

    ``eval_fn(model) -> dict`` is called every ``eval_every`` steps; its
    ``"emd"`` entry selects the best checkpoint when ``out_dir`` is given.
    """
    tuples = _flatten(dataset)
    batcher = _Batcher(tuples, model.cfg, next(model.parameters()).dtype)
    record = RunRecord(config_hash(model.cfg.to_dict(), train_cfg.to_dict(), len(tuples)))
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        record.events_path = out_dir / "events.jsonl"
        record.events_path.write_text("", encoding="utf-8")
        (out_dir / "resolved_config.json").write_text(
            json.dumps({"model": model.cfg.to_dict(), "train": train_cfg.to_dict()}, indent=2, sort_keys=True), encoding="utf-8"
        )
    rng = np.random.default_rng(train_cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=train_cfg.learning_rate)
    best = math.inf
    t0 = time.perf_counter()
    bs = min(train_cfg.batch_size, len(batcher))
    for step in range(train_cfg.steps):
        for g in opt.param_groups:
            g["lr"] = _lr_at(train_cfg, step)
        sel = rng.choice(len(batcher), size=bs, replace=False)
        flips = _mirror_flips(rng, bs) if train_cfg.mirror_augment else None
        loss = _batch_loss(model, batcher, sel, train_cfg.loss, flips)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise TrainingDiverged(step)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if train_cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(model.parameters(), train_cfg.grad_clip)
        opt.step()
        record.add_loss(step, value)
        done = step + 1
        if eval_fn is not None and train_cfg.eval_every and (done % train_cfg.eval_every == 0 or done == train_cfg.steps):
            metrics = eval_fn(model)
            record.add_eval(done, metrics)
            logger.info("step %d loss %.5f eval %s", done, value, metrics)
            if out_dir is not None and metrics.get("emd", math.inf) < best:
                best = metrics["emd"]
                save_checkpoint(model, out_dir / "best", train_cfg, {"step": done})
        if out_dir is not None and train_cfg.checkpoint_every and done % train_cfg.checkpoint_every == 0:
            save_checkpoint(model, out_dir / f"step_{done}", train_cfg, {"step": done})
    record.wall_clock = time.perf_counter() - t0
    if out_dir is not None:
        save_checkpoint(model, out_dir / "final", train_cfg, {"step": train_cfg.steps})
        if not (out_dir / "best").exists():
            save_checkpoint(model, out_dir / "best", train_cfg, {"step": train_cfg.steps})
    return TrainResult(model, record, train_cfg)


def train(dataset, model_cfg: ModelConfig, train_cfg: TrainConfig, out_dir=None, eval_fn=None) -> TrainResult:
    """Initialise from ``train_cfg.seed`` and fit; with ``steps=0`` the init params come back unchanged."""
    torch.manual_seed(train_cfg.seed)
    model = init_model(model_cfg, train_cfg.seed)
    return fit(model, dataset, train_cfg, out_dir, eval_fn)


def finetune(checkpoint, small_dataset, fraction: float = 0.05, original_steps: int | None = None, out_dir=None, eval_fn=None, seed: int | None = None) -> TrainResult:
    """Continue training all parameters for ``ceil(fraction * original_steps)`` steps.

    ``checkpoint`` is a checkpoint directory or a ``(model, manifest)`` pair;
    learning rate and loss settings are inherited from its training config.
    """
    model, manifest = load_checkpoint(checkpoint) if isinstance(checkpoint, (str, Path)) else checkpoint
    base = TrainConfig.from_dict(manifest["train_config"]) if manifest.get("train_config") else TrainConfig()
    if original_steps is None:
        original_steps = base.steps
    if not 0 <= fraction <= 1:
        raise ValueError("fraction must lie in [0, 1]")
    tuples = _flatten(small_dataset)
    if tuples and tuples[0].I1.shape[0] != model.cfg.n_points:
        raise ValueError("checkpoint point count does not match dataset")
    if tuples and np.atleast_1d(tuples[0].phi1).shape[0] != model.cfg.num_joints:
        raise ValueError("checkpoint joint count does not match dataset")
    steps = math.ceil(fraction * original_steps)
    cfg = replace(base, steps=steps, seed=base.seed if seed is None else seed, eval_every=min(base.eval_every, steps))
    return fit(model, tuples, cfg, out_dir, eval_fn)


# ---------------------------------------------------------------------------
# gradient check


def micro_tuple(seed: int, cfg: ModelConfig, category: str = "door"):
    """A tuple subsampled to ``cfg.n_points`` points (same rows in every frame)."""
    obj = synthgen.make_object(category, seed, max(64, cfg.n_points))
    rng = np.random.default_rng(seed)
    t = synthgen.sample_tuple(obj, rng)
    movable = np.flatnonzero(obj.movable_mask)
    base = np.flatnonzero(~obj.movable_mask)
    k = cfg.n_points // 2
    rows = np.sort(np.concatenate([rng.choice(movable, k, replace=False), rng.choice(base, cfg.n_points - k, replace=False)]))
    return synthgen.TrainingTuple(
        t.I1[rows], t.I2[rows], t.I3[rows], t.phi1, t.phi2, t.phi3, t.movable_mask[rows], t.gt_transforms_1to3[rows], t.part_labels[rows]
    )


def grad_check(model_cfg: ModelConfig | None = None, seed: int = 0, n_probe: int = 4, h: float = 1e-5, loss_cfg: LossConfig = LossConfig()) -> dict:
    """Compare autograd against central differences per parameter group (float64).

    Each group is probed along one random direction spanning all its
    parameters, plus ``n_probe`` single coordinates. Returns ``{group: relative
    error}`` where the error is ``|g - g_fd| / max(|g|, |g_fd|)`` over the probes
    (0 when both vanish).
    """
    cfg = model_cfg or micro_config()
    model = init_model(cfg, seed, dtype=torch.float64)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        # a zero head would zero every upstream gradient
        model.decoder.out.weight.normal_(0.0, 0.1, generator=gen)
        model.decoder.out.bias.normal_(0.0, 0.1, generator=gen)
    t = micro_tuple(seed, cfg)
    batch = _Batcher([t], cfg, torch.float64)

    def loss_fn():
        return _batch_loss(model, batch, [0], loss_cfg)

    model.zero_grad()
    loss_fn().backward()
    params = dict(model.named_parameters())
    rng = np.random.default_rng(seed)

    def central(plist, dirs):
        with torch.no_grad():
            for p, d in zip(plist, dirs):
                p.add_(h * d)
            lp = float(loss_fn())
            for p, d in zip(plist, dirs):
                p.sub_(2 * h * d)
            lm = float(loss_fn())
            for p, d in zip(plist, dirs):
                p.add_(h * d)
        return (lp - lm) / (2 * h)

    report = {}
    for group, names in parameter_groups(model).items():
        plist = [params[n] for n in names]
        grads = [p.grad if p.grad is not None else torch.zeros_like(p) for p in plist]
        dirs = [torch.as_tensor(rng.normal(size=p.shape)) for p in plist]
        norm = math.sqrt(sum(float((d * d).sum()) for d in dirs))
        dirs = [d / norm for d in dirs]
        ga = [sum(float((g * d).sum()) for g, d in zip(grads, dirs))]
        gf = [central(plist, dirs)]
        sizes = np.cumsum([p.numel() for p in plist])
        picks = rng.choice(sizes[-1], size=min(n_probe, int(sizes[-1])), replace=False) if n_probe > 0 else []
        for flat in picks:
            k = int(np.searchsorted(sizes, flat, side="right"))
            off = int(flat - (sizes[k - 1] if k else 0))
            unit = [torch.zeros_like(p) for p in plist]
            unit[k].view(-1)[off] = 1.0
            ga.append(float(grads[k].view(-1)[off]))
            gf.append(central(plist, unit))
        ga, gf = np.array(ga), np.array(gf)
        denom = max(np.linalg.norm(ga), np.linalg.norm(gf))
        report[group] = float(np.linalg.norm(ga - gf) / denom) if denom > 0 else 0.0
    return report
