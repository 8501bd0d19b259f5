import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from partmotion import geom
from partmotion import model as M
from partmotion import synthgen as sg
from partmotion import transport as tr


@pytest.fixture(scope="module")
def small_cfg():
    return M.desk_config(n_points=128, n_subsampled=32, sa1_points=64, feat_dim=32, grid_size=8, grid_channels=16, unet_channels=(16, 16, 16), decoder_hidden=(32, 32))


@pytest.fixture(scope="module")
def door_tuples():
    obj = sg.make_object("door", 3, 128)
    rng = np.random.default_rng(0)
    return [sg.sample_tuple(obj, rng) for _ in range(4)]


def test_config_validation():
    with pytest.raises(ValueError):
        M.ModelConfig(grid_size=6)
    with pytest.raises(ValueError):
        M.ModelConfig(rotation_param="quat")
    with pytest.raises(ValueError):
        M.ModelConfig(n_subsampled=600)
    with pytest.raises(ValueError):
        M.ModelConfig(feat_dim=0)
    cfg = M.full_config()
    assert (cfg.n_points, cfg.grid_size) == (8192, 32)
    assert M.ModelConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.psi_dim == cfg.grid_channels + 2 * cfg.pose_dim


def test_seeded_init(small_cfg):
    a, b, c = M.init_model(small_cfg, 1), M.init_model(small_cfg, 1), M.init_model(small_cfg, 2)
    for (n, p), (_, q), (_, r) in zip(a.named_parameters(), b.named_parameters(), c.named_parameters()):
        assert torch.equal(p, q), n
    assert any(not torch.equal(p, r) for p, r in zip(a.parameters(), c.parameters()) if p.numel() > 1 and p.abs().sum() > 0)


def test_identity_at_init(small_cfg, door_tuples):
    model = M.init_model(small_cfg, 0)
    pred = M.predict(model, door_tuples)
    for p, t in zip(pred, door_tuples):
        assert tr.emd_exact(p, t.I1).cost < 1e-5


def test_shapes_and_attention(small_cfg, door_tuples):
    model = M.init_model(small_cfg, 0, torch.float64)
    x1, x2, p1, p2, p3, i1, i2 = M.prepare_batch(door_tuples, small_cfg, torch.float64)
    x1n, x2n, _, _ = M.normalize_pair_torch(x1, x2)
    enc, G_geo = model.encode_geometry(x1n, x2n, i1, i2)
    B, Np, d = 4, small_cfg.n_subsampled, small_cfg.feat_dim
    assert enc.h1.shape == enc.h2.shape == (B, Np, d)
    assert enc.h.shape == (B, Np, 2 * d)
    assert enc.per_point.shape == (B, 128, small_cfg.per_point_dim)
    assert G_geo.shape == (B, small_cfg.grid_channels) + (small_cfg.grid_size,) * 3
    torch.testing.assert_close(enc.attention.sum(-1), torch.ones(B, Np, dtype=torch.float64), atol=1e-6, rtol=0)
    mu = model.encode_pose(p1)
    assert mu.shape == (B, small_cfg.pose_dim)
    G = M.build_transformation_grid(G_geo, mu, model.encode_pose(p2))
    assert G.shape[1] == small_cfg.psi_dim
    T = model.decode_transforms(G, x1n, model.encode_pose(p3))
    assert T.shape == (B, 128, 3, 4)


def test_decode_paths_agree(small_cfg, door_tuples):
    model = M.init_model(small_cfg, 0, torch.float64)
    with torch.no_grad():
        model.decoder.out.weight.normal_(0, 0.1)
    x1, x2, p1, p2, p3, i1, i2 = M.prepare_batch(door_tuples, small_cfg, torch.float64)
    x1n, x2n, _, _ = M.normalize_pair_torch(x1, x2)
    _, G_geo = model.encode_geometry(x1n, x2n, i1, i2)
    mu1, mu2, mu3 = (model.encode_pose(p) for p in (p1, p2, p3))
    full = model.decode_transforms(M.build_transformation_grid(G_geo, mu1, mu2), x1n, mu3)
    fast = model.transforms(x1n, x2n, p1, p2, p3, i1, i2)
    torch.testing.assert_close(full, fast, atol=1e-12, rtol=0)


def test_frame2_permutation_invariance(small_cfg, door_tuples):
    model = M.init_model(small_cfg, 0, torch.float64)
    x1, x2, *_ = M.prepare_batch(door_tuples[:2], small_cfg, torch.float64, with_index=False)
    x1n, x2n, _, _ = M.normalize_pair_torch(x1, x2)
    perm = torch.as_tensor(np.random.default_rng(5).permutation(128))
    a, Ga = model.encode_geometry(x1n, x2n)
    b, Gb = model.encode_geometry(x1n, x2n[:, perm])
    torch.testing.assert_close(a.h, b.h, atol=1e-5, rtol=0)
    torch.testing.assert_close(Ga, Gb, atol=1e-5, rtol=0)


def test_unnormalized_input_rejected(small_cfg):
    model = M.init_model(small_cfg, 0)
    x = torch.rand(1, 128, 3) * 3
    with pytest.raises(ValueError):
        model.encode_geometry(x, x)


def test_pose_width_mismatch(small_cfg):
    model = M.init_model(small_cfg, 0)
    with pytest.raises(ValueError):
        model.encode_pose(torch.zeros(2, 3))
    out = model.encode_pose(torch.full((2, 1), 0.3))
    assert out.shape == (2, 256)
    torch.testing.assert_close(out, model.encode_pose(torch.full((2, 1), 0.3)))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_six_d_torch_rigid(seed):
    g = torch.Generator().manual_seed(seed)
    v = torch.randn(64, 6, generator=g, dtype=torch.float64) * 10
    R = M.rotation_from_6d_torch(v)
    err = (R.transpose(-1, -2) @ R - torch.eye(3, dtype=torch.float64)).abs().amax()
    assert err < 1e-5
    assert torch.all(torch.linalg.det(R) > 0)
    np.testing.assert_allclose(R[0].numpy(), geom.rotation_from_6d(v[0].numpy()), atol=1e-12)


def test_trilinear_torch_matches_numpy():
    rng = np.random.default_rng(0)
    data = rng.normal(size=(6, 6, 6, 3))
    pts = rng.uniform(-0.6, 0.6, size=(40, 3))
    want = geom.trilinear_query(geom.Grid3D(data), pts)
    grid = torch.as_tensor(data).permute(3, 0, 1, 2)[None]
    got = M.trilinear_query_torch(grid, torch.as_tensor(pts)[None])[0]
    np.testing.assert_allclose(got.numpy(), want, atol=1e-12)


def test_splat_is_adjoint_of_query():
    rng = np.random.default_rng(1)
    G = torch.as_tensor(rng.normal(size=(1, 2, 5, 5, 5)))
    f = torch.as_tensor(rng.normal(size=(1, 30, 2)))
    p = torch.as_tensor(rng.uniform(-0.5, 0.5, size=(1, 30, 3)))
    lhs = (M.trilinear_splat_torch(f, p, 5) * G).sum()
    rhs = (f * M.trilinear_query_torch(G, p)).sum()
    assert lhs.item() == pytest.approx(rhs.item(), abs=1e-10)


def test_normalize_torch_matches_numpy():
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(20, 3)), rng.normal(size=(20, 3)) + 1
    na, nb, nm = geom.normalize_pair(a, b)
    ta, tb, s, o = M.normalize_pair_torch(torch.as_tensor(a)[None], torch.as_tensor(b)[None])
    np.testing.assert_allclose(ta[0].numpy(), na, atol=1e-12)
    assert s.item() == pytest.approx(nm.scale)


def test_grid_field_zero_at_init(small_cfg, door_tuples):
    model = M.init_model(small_cfg, 0, torch.float64)
    x1, x2, p1, p2, p3, i1, i2 = M.prepare_batch(door_tuples[:1], small_cfg, torch.float64)
    x1n, x2n, _, _ = M.normalize_pair_torch(x1, x2)
    _, G_geo = model.encode_geometry(x1n, x2n, i1, i2)
    nodes, disp = model.grid_point_transforms(G_geo, model.encode_pose(p1), model.encode_pose(p2), model.encode_pose(p3))
    assert nodes.shape == (small_cfg.grid_size**3, 3)
    assert disp.abs().max() == 0


def test_no_nir_variant(small_cfg, door_tuples):
    cfg = M.ModelConfig.from_dict({**small_cfg.to_dict(), "variant": "no_nir"})
    model = M.init_model(cfg, 0)
    x1, x2, p1, p2, p3, i1, i2 = M.prepare_batch(door_tuples, cfg)
    pred, T = M.forward_no_nir(model, x1, x2, p1, p2, p3, i1, i2)
    torch.testing.assert_close(pred, x1, atol=1e-5, rtol=0)
    with pytest.raises(ValueError):
        M.forward_no_nir(M.init_model(small_cfg, 0), x1, x2, p1, p2, p3, i1, i2)


def test_raw_affine_identity(small_cfg, door_tuples):
    cfg = M.ModelConfig.from_dict({**small_cfg.to_dict(), "rotation_param": "raw_affine"})
    pred = M.predict(M.init_model(cfg, 0), door_tuples[:2])
    np.testing.assert_allclose(pred, np.stack([t.I1 for t in door_tuples[:2]]), atol=1e-5)


def test_trained_rotations_stay_rigid(small_cfg, door_tuples):
    model = M.init_model(small_cfg, 0, torch.float64)
    with torch.no_grad():
        model.decoder.out.weight.normal_(0, 1.0)
        model.decoder.out.bias.normal_(0, 1.0)
    x1, x2, p1, p2, p3, i1, i2 = M.prepare_batch(door_tuples, small_cfg, torch.float64)
    _, T = model(x1, x2, p1, p2, p3, i1, i2)
    R = T[..., :3]
    err = (R.transpose(-1, -2) @ R - torch.eye(3, dtype=torch.float64)).abs().amax()
    assert err < 1e-5
