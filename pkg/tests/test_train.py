import json
import math

import numpy as np
import pytest
import torch

from partmotion import model as M
from partmotion import synthgen as sg
from partmotion import train as T
from partmotion import transport as tr

SMALL = M.micro_config(n_points=64, n_subsampled=16, sa1_points=32, grid_size=8, feat_dim=16, decoder_hidden=(32, 32), pose_widths=(16, 16, 16), unet_channels=(16, 16, 16))


@pytest.fixture(scope="module")
def door_set():
    obj = sg.make_object("door", 2, 64)
    rng = np.random.default_rng(1)
    return [sg.sample_tuple(obj, rng) for _ in range(8)]


def test_grad_check_micro():
    report = T.grad_check()
    assert set(report) == set(M.parameter_groups(M.init_model(M.micro_config(), 0)))
    assert max(report.values()) < 1e-3


def test_step_zero_loss_is_identity_loss(door_set):
    cfg = T.TrainConfig(steps=1, batch_size=8, learning_rate=1e-3)
    res = T.train(door_set, SMALL, cfg)
    want = np.mean([tr.training_loss(t.I1, t.I3, t.movable_mask).item() for t in door_set])
    assert res.record.losses[0] == pytest.approx(want, abs=1e-5)


def test_training_reduces_loss_and_keeps_data(door_set):
    before = [t.I1.copy() for t in door_set]
    cfg = T.TrainConfig(steps=200, batch_size=4, learning_rate=2e-3, grad_clip=0.0)
    res = T.train(door_set[:1], SMALL, cfg)
    losses = res.record.losses
    assert all(math.isfinite(x) for x in losses)
    assert np.mean(losses[-10:]) < 0.5 * losses[0]
    for b, t in zip(before, door_set):
        np.testing.assert_array_equal(b, t.I1)


def test_runs_are_reproducible(door_set, tmp_path):
    cfg = T.TrainConfig(steps=5, batch_size=4)
    a = T.train(door_set, SMALL, cfg, tmp_path / "a")
    b = T.train(door_set, SMALL, cfg, tmp_path / "b")
    assert a.record.losses == b.record.losses
    assert (tmp_path / "a" / "events.jsonl").read_bytes() == (tmp_path / "b" / "events.jsonl").read_bytes()
    events = [json.loads(line) for line in (tmp_path / "a" / "events.jsonl").read_text().splitlines()]
    assert [e["step"] for e in events] == list(range(5))


def test_checkpoint_roundtrip(door_set, tmp_path):
    model = M.init_model(SMALL, 3)
    with torch.no_grad():
        model.decoder.out.weight.normal_(0, 0.1)
    T.save_checkpoint(model, tmp_path / "ck", T.TrainConfig(steps=7))
    loaded, manifest = T.load_checkpoint(tmp_path / "ck")
    assert manifest["model_config"] == SMALL.to_dict()
    assert manifest["train_config"]["steps"] == 7
    a = M.predict(model, door_set[:2])
    b = M.predict(loaded, door_set[:2])
    assert a.tobytes() == b.tobytes()


def test_checkpoint_errors(tmp_path):
    model = M.init_model(SMALL, 0)
    ck = T.save_checkpoint(model, tmp_path / "ck")
    blob = ck / "pose.0.weight.bin"
    raw = bytearray(blob.read_bytes())
    raw[0] ^= 0xFF
    blob.write_bytes(bytes(raw))
    with pytest.raises(T.CheckpointDigestError):
        T.load_checkpoint(ck)
    blob.unlink()
    with pytest.raises(T.CheckpointMissingBlob):
        T.load_checkpoint(ck)
    ck2 = T.save_checkpoint(model, tmp_path / "ck2")
    m = json.loads((ck2 / "manifest.json").read_text())
    m["format_version"] = 99
    (ck2 / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(T.CheckpointVersionError):
        T.load_checkpoint(ck2)
    with pytest.raises(T.CheckpointMissingBlob):
        T.load_checkpoint(tmp_path / "none")


def test_finetune_step_budget(door_set, tmp_path):
    res = T.train(door_set, SMALL, T.TrainConfig(steps=20, batch_size=2), tmp_path / "pre")
    ft = T.finetune(tmp_path / "pre" / "final", door_set[:4], fraction=0.05)
    assert len(ft.record.losses) == math.ceil(0.05 * 20)
    ft = T.finetune(tmp_path / "pre" / "final", door_set[:4], fraction=0.2, original_steps=30)
    assert len(ft.record.losses) == 6
    with pytest.raises(ValueError):
        T.finetune(tmp_path / "pre" / "final", door_set, fraction=2.0)
    assert res.model is not None


def test_mismatched_dataset(door_set):
    with pytest.raises(ValueError):
        T.train(door_set, M.micro_config(), T.TrainConfig(steps=1))
    with pytest.raises(ValueError):
        T.train([], SMALL, T.TrainConfig(steps=1))


def test_divergence_is_reported(door_set, monkeypatch):
    monkeypatch.setattr(T, "training_loss", lambda *a, **k: torch.tensor(float("nan"), requires_grad=True))
    with pytest.raises(T.TrainingDiverged) as err:
        T.train(door_set, SMALL, T.TrainConfig(steps=3))
    assert err.value.step == 0


def test_train_config_roundtrip_and_validation():
    cfg = T.TrainConfig(steps=3, loss=tr.LossConfig(movable_weight=1.0))
    assert T.TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    with pytest.raises(ValueError):
        T.TrainConfig(lr_schedule="step")
    with pytest.raises(ValueError):
        T.TrainConfig(batch_size=0)


def test_zero_steps_equal_init(door_set, tmp_path):
    res = T.train(door_set, SMALL, T.TrainConfig(steps=0, seed=4), tmp_path / "r")
    loaded, _ = T.load_checkpoint(tmp_path / "r" / "final")
    init = M.init_model(SMALL, 4)
    for (n, a), b in zip(init.state_dict().items(), loaded.state_dict().values()):
        assert torch.equal(a, b), n
    assert res.record.losses == []


def test_finetune_fraction_zero_keeps_params(door_set, tmp_path):
    T.train(door_set, SMALL, T.TrainConfig(steps=3), tmp_path / "pre")
    before, _ = T.load_checkpoint(tmp_path / "pre" / "final")
    ft = T.finetune(tmp_path / "pre" / "final", door_set, fraction=0.0)
    for a, b in zip(before.state_dict().values(), ft.model.state_dict().values()):
        assert torch.equal(a, b)


def test_mirror_batches_are_consistent(door_set):
    model = M.init_model(SMALL, 0, torch.float64)
    batch = T._Batcher(door_set, SMALL, torch.float64)
    sel = [0, 1, 2]
    flips = np.array([[-1.0, 1, 1], [1, -1, 1], [-1, -1, 1]])
    # the identity map commutes with reflections, so the loss cannot change
    plain = T._batch_loss(model, batch, sel, tr.LossConfig()).item()
    mirrored = T._batch_loss(model, batch, sel, tr.LossConfig(), flips).item()
    assert mirrored == pytest.approx(plain, abs=1e-9)
    x1, *_ = batch.batch(sel, flips)
    np.testing.assert_array_equal(x1[0, :, 0].numpy(), -batch.x1[0, :, 0].numpy())


def test_mirror_augmented_run_is_reproducible(door_set):
    cfg = T.TrainConfig(steps=4, batch_size=4, mirror_augment=True)
    a = T.train(door_set, SMALL, cfg).record.losses
    b = T.train(door_set, SMALL, cfg).record.losses
    assert a == b
