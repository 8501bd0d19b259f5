import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from partmotion import geom
from partmotion import transport as tr


def brute_emd(A, B):
    n = len(A)
    return min(np.mean([np.linalg.norm(A[i] - B[p[i]]) for i in range(n)]) for p in itertools.permutations(range(n)))


def test_exact_matches_brute_force():
    rng = np.random.default_rng(0)
    for trial in range(200):
        n = 1 + trial % 6
        A, B = rng.normal(size=(n, 3)), rng.normal(size=(n, 3))
        res = tr.emd_exact(A, B)
        assert res.cost == pytest.approx(brute_emd(A, B), abs=1e-12)
        assert sorted(res.permutation) == list(range(n))
        assert res.cost == pytest.approx(np.linalg.norm(A - B[res.permutation], axis=1).mean(), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (10, 3), elements=st.floats(-2, 2)), arrays(np.float64, 3, elements=st.floats(-5, 5)))
def test_translation_identity(A, v):
    assert tr.emd_exact(A, A + v).cost == pytest.approx(np.linalg.norm(v), abs=1e-6)


def test_metric_properties():
    rng = np.random.default_rng(1)
    for _ in range(50):
        A, B, C = (rng.normal(size=(7, 3)) for _ in range(3))
        ab, ba = tr.emd_exact(A, B).cost, tr.emd_exact(B, A).cost
        assert ab >= 0 and ab == pytest.approx(ba, abs=1e-9)
        assert ab <= tr.emd_exact(A, C).cost + tr.emd_exact(C, B).cost + 1e-9
        assert tr.emd_exact(A, A[rng.permutation(7)]).cost == 0.0


def test_permutation_and_scale():
    rng = np.random.default_rng(2)
    A, B = rng.normal(size=(40, 3)), rng.normal(size=(40, 3))
    base = tr.emd_exact(A, B).cost
    assert tr.emd_exact(A, B[rng.permutation(40)]).cost == pytest.approx(base, abs=1e-12)
    assert tr.emd_exact(3.5 * A, 3.5 * B).cost == pytest.approx(3.5 * base, abs=1e-9)


def test_exact_errors():
    with pytest.raises(ValueError):
        tr.emd_exact(np.zeros((3, 3)), np.zeros((4, 3)))
    with pytest.raises(ValueError):
        tr.emd_exact(np.zeros((10, 3)), np.zeros((10, 3)), cap=8)


def test_tie_break_is_deterministic():
    A = np.zeros((4, 3))
    r1 = tr.emd_exact(A, A).permutation
    np.testing.assert_array_equal(r1, tr.emd_exact(A, A).permutation)
    np.testing.assert_array_equal(r1, np.arange(4))


def test_sinkhorn_close_to_exact():
    rng = np.random.default_rng(3)
    for _ in range(3):
        A, B = rng.uniform(size=(64, 3)), rng.uniform(size=(64, 3))
        exact = tr.emd_exact(A, B).cost
        assert abs(tr.emd_sinkhorn(A, B, 4e-3) - exact) <= 0.05 * exact


def test_sinkhorn_plan_marginals_and_symmetry():
    rng = np.random.default_rng(4)
    A, B = rng.uniform(size=(30, 3)), rng.uniform(size=(30, 3))
    P = tr.sinkhorn_plan(A, B, 1e-2)
    np.testing.assert_allclose(P.sum(1) * 30, 1.0, atol=1e-3)
    np.testing.assert_allclose(P.sum(0) * 30, 1.0, atol=1e-3)
    assert tr.emd_sinkhorn(A, B, 1e-2) == tr.emd_sinkhorn(B, A, 1e-2)
    assert tr.emd_sinkhorn(A, A, 1e-2) == 0.0


def test_sinkhorn_non_convergence():
    rng = np.random.default_rng(5)
    A, B = rng.uniform(size=(30, 3)), rng.uniform(size=(30, 3))
    with pytest.raises(tr.SinkhornNotConverged):
        tr.sinkhorn_plan(A, B, 1e-4, iters=20)
    with pytest.raises(ValueError):
        tr.sinkhorn_plan(A, B, 0.0)


def test_chamfer():
    rng = np.random.default_rng(6)
    A = rng.normal(size=(20, 3))
    assert tr.chamfer(A, A) == 0.0
    v = np.array([0.0, 0.0, 100.0])
    # far translate: nearest neighbours are the translated copies only if spread is small
    B = 1e-3 * A
    assert tr.chamfer(B, B + v) == pytest.approx(200.0, rel=1e-4)
    with pytest.raises(ValueError):
        tr.chamfer(np.zeros((0, 3)), A)


def test_pae_revolute_and_prismatic():
    rng = np.random.default_rng(7)
    I1 = rng.normal(size=(50, 3))
    mask = np.zeros(50, bool)
    mask[:20] = True
    gt = geom.RigidTransform(geom.axis_angle_matrix([0, 0, 1], np.radians(40)), np.zeros(3))
    pred = I1.copy()
    pred[mask] = geom.RigidTransform(geom.axis_angle_matrix([0, 0, 1], np.radians(33)), [0.1, 0, 0]).apply(I1[mask])
    assert tr.pae(pred, I1, mask, gt) == pytest.approx(7.0, abs=1e-9)
    shift = geom.RigidTransform(np.eye(3), [0, 0.3, 0])
    pred = I1.copy()
    pred[mask] += [0, 0.25, 0]
    assert tr.pae(pred, I1, mask, shift, "prismatic") == pytest.approx(0.05)
    with pytest.raises(ValueError):
        tr.pae(pred, I1, np.zeros(50, bool), gt)
    with pytest.raises(ValueError):
        tr.pae(pred, I1, mask, gt, "screw")


def test_loss_config_validation():
    with pytest.raises(ValueError):
        tr.LossConfig(mode="chamfer")
    with pytest.raises(ValueError):
        tr.LossConfig(movable_weight=-1)


def test_loss_zero_at_target_with_zero_gradient():
    rng = np.random.default_rng(8)
    tgt = rng.normal(size=(12, 3))
    pred = torch.tensor(tgt, requires_grad=True)
    mask = rng.random(12) < 0.5
    loss = tr.training_loss(pred, tgt, mask)
    loss.backward()
    assert loss.item() == pytest.approx(0.0, abs=1e-10)
    assert torch.all(pred.grad == 0)


def test_loss_lambda_zero_is_plain_emd():
    rng = np.random.default_rng(9)
    a, b = rng.normal(size=(15, 3)), rng.normal(size=(15, 3))
    loss = tr.training_loss(a, b, np.ones(15, bool), tr.LossConfig(movable_weight=0.0))
    assert loss.item() == pytest.approx(tr.emd_exact(a, b).cost, abs=1e-12)


def test_loss_decomposition():
    rng = np.random.default_rng(10)
    a, b = rng.normal(size=(15, 3)), rng.normal(size=(15, 3))
    m = np.arange(15) < 6
    want = tr.emd_exact(a, b).cost + 2.0 * tr.emd_exact(a[m], b[m]).cost
    assert tr.training_loss(a, b, m).item() == pytest.approx(want, abs=1e-12)


def test_loss_gradient_matches_finite_difference():
    rng = np.random.default_rng(11)
    a, b = rng.normal(size=(10, 3)), rng.normal(size=(10, 3))
    m = np.arange(10) < 4
    pred = torch.tensor(a, requires_grad=True)
    tr.training_loss(pred, b, m).backward()
    h = 1e-5
    for i, k in [(0, 0), (3, 2), (7, 1)]:
        ap, am = a.copy(), a.copy()
        ap[i, k] += h
        am[i, k] -= h
        fd = (tr.training_loss(ap, b, m).item() - tr.training_loss(am, b, m).item()) / (2 * h)
        assert pred.grad[i, k].item() == pytest.approx(fd, rel=1e-4)


def test_sinkhorn_loss_runs_and_backprops():
    rng = np.random.default_rng(12)
    a, b = rng.uniform(size=(24, 3)), rng.uniform(size=(24, 3))
    pred = torch.tensor(a, requires_grad=True)
    loss = tr.training_loss(pred, b, np.ones(24, bool), tr.LossConfig(mode="sinkhorn", sinkhorn_epsilon=1e-2))
    loss.backward()
    exact = 3 * tr.emd_exact(a, b).cost
    assert abs(loss.item() - exact) < 0.15 * exact
    assert torch.isfinite(pred.grad).all()


def test_loss_shape_mismatch():
    with pytest.raises(ValueError):
        tr.training_loss(np.zeros((4, 3)), np.zeros((5, 3)), np.ones(4, bool))
