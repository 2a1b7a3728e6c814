import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from gsq.gauss import Camera
from gsq.grid import GridScene
from gsq.imgcond import (
    N_FIXED, Conditioning, FeatureExtractor, ViewObservation, aggregate_grid_image_features, aggregate_samples,
    bilinear_sample, combine_observations, estimate_visibility, extract_feature_pyramid, fixed_features,
    pool_block_image_features, project_conditioning, project_point, project_points, propagate_block_visibility,
    sphere_visibility,
)
from gsq.nn import grad_check


def axis_cam(w=32, h=32, f=20.0):
    # identity pose: camera at the origin looking down +z
    return Camera(np.eye(3), np.zeros(3), f, f, w / 2, h / 2, w, h)


def grid(cells, G=8, logit=10.0):
    cells = np.asarray(cells, dtype=np.int64)
    n = len(cells)
    return GridScene(G, cells, np.zeros((n, 3)), np.tile([1.0, 0, 0, 0], (n, 1)), np.full((n, 3), 0.02),
                     np.full(n, logit))


# -- features --------------------------------------------------------------------

def test_constant_image_has_zero_gradients():
    for f in fixed_features(np.full((16, 16, 3), 0.3)):
        assert np.all(f[..., 3:9] == 0)
        assert np.allclose(f[..., :3], 0.3) and np.allclose(f[..., 9:], 0.3)


def test_pyramid_level_extents():
    feats = fixed_features(np.zeros((64, 64, 3)))
    assert [f.shape for f in feats] == [(64, 64, N_FIXED), (32, 32, N_FIXED), (16, 16, N_FIXED)]
    pyr = extract_feature_pyramid(np.zeros((64, 64, 3)), FeatureExtractor(16))
    assert [(s, tuple(t.shape)) for s, t in pyr.levels] == [(1, (64, 64, 16)), (2, (32, 32, 16)), (4, (16, 16, 16))]


def test_gradient_feature_oracle():
    # horizontal ramp: central difference of 0.1 per pixel away from the clamped border
    img = np.repeat((0.1 * np.arange(8))[None, :, None], 8, axis=0).repeat(3, axis=2)
    f = fixed_features(img, levels=1)[0]
    assert np.allclose(f[:, 1:-1, 3:6], 0.1)
    assert np.allclose(f[:, 1:-1, 6:9], 0.0)
    assert np.allclose(f[:, 0, 3:6], 0.05)


def test_fixed_features_reject_bad_input():
    with pytest.raises(ValueError):
        fixed_features(np.zeros((0, 4, 3)))
    with pytest.raises(ValueError):
        fixed_features(np.zeros((4, 4)))


def test_extractor_gradcheck(rng):
    ex = FeatureExtractor(5).double()
    feats = torch.as_tensor(rng.normal(size=(6, N_FIXED)))
    rep = grad_check(lambda x, w, b: torch.nn.functional.linear(x, w, b),
                     [feats, ex.proj.weight.detach(), ex.proj.bias.detach()])
    assert rep.passed, rep.failures
    rep = grad_check(ex, [feats])
    assert rep.passed, rep.failures


# -- projection ------------------------------------------------------------------

def test_project_point_on_axis():
    cam = axis_cam()
    (uv, z) = project_point((0.0, 0.0, 1.0), cam)
    assert np.allclose(uv, (cam.cx, cam.cy)) and z == 1.0
    assert project_point((0.0, 0.0, -1.0), cam) is None
    assert project_point((10.0, 0.0, 1.0), cam) is None


def test_project_point_hand_computed():
    # rotate 90 degrees about y, then shift; computed by hand below
    R = np.array([[0.0, 0, -1], [0, 1, 0], [1, 0, 0]])
    cam = Camera(R, np.array([0.1, -0.2, 2.0]), 30.0, 25.0, 16.0, 12.0, 32, 24)
    p = np.array([0.5, 0.3, -0.4])
    # camera coords: (0.4 + 0.1, 0.3 - 0.2, 0.5 + 2.0) = (0.5, 0.1, 2.5)
    (u, v), z = project_point(p, cam)
    assert np.isclose(z, 2.5)
    assert np.isclose(u, 30 * 0.5 / 2.5 + 16) and np.isclose(v, 25 * 0.1 / 2.5 + 12)


def test_project_points_matches_single(rng):
    cam = axis_cam()
    P = rng.uniform([-0.5, -0.5, -0.2], [0.5, 0.5, 2.0], size=(50, 3))
    uv, z, ok = project_points(P, cam)
    for i, p in enumerate(P):
        r = project_point(p, cam)
        assert (r is not None) == ok[i]
        if r is not None:
            assert np.allclose(r[0], uv[i]) and np.isclose(r[1], z[i])


def test_bilinear_sample_oracle(rng):
    fmap = rng.normal(size=(5, 7, 2))
    # pixel centres reproduce the stored values
    ys, xs = np.mgrid[0:5, 0:7]
    uv = np.stack([xs.ravel() + 0.5, ys.ravel() + 0.5], 1)
    assert np.allclose(bilinear_sample(fmap, uv), fmap.reshape(-1, 2))
    # halfway between two centres is the average
    mid = bilinear_sample(fmap, np.array([[2.0, 1.5]]))
    assert np.allclose(mid[0], 0.5 * (fmap[1, 1] + fmap[1, 2]))
    # torch and numpy agree, and scale maps coarse pixels
    t = bilinear_sample(torch.as_tensor(fmap), np.array([[4.0, 3.0]]), 2.0)
    assert np.allclose(t.numpy(), bilinear_sample(fmap, np.array([[2.0, 1.5]])))


# -- visibility ------------------------------------------------------------------

def test_single_cell_fully_visible():
    vis = estimate_visibility(grid([[3, 3, 3]]), [axis_cam()], K=4)
    assert vis.shape == (1, 1) and vis[0, 0] == 1.0


def test_cell_behind_opaque_cell_is_hidden():
    eye = np.zeros(3)
    pts = np.array([[0.0, 0, 1.0], [0.0, 0, 2.0]])
    v = sphere_visibility(pts, pts, np.array([1 - 1e-15, 1 - 1e-15]), 0.1, eye, own=np.array([0, 1]))
    assert v[0] == 1.0 and v[1] < 1e-9
    # half-opaque occluder halves the transmittance; off-ray occluders do nothing
    v = sphere_visibility(pts[1:], np.array([[0.0, 0, 1.0], [0.5, 0, 1.0]]), np.array([0.5, 0.9]), 0.1, eye)
    assert np.isclose(v[0], 0.5)


def test_occluder_beyond_point_is_ignored():
    v = sphere_visibility(np.array([[0.0, 0, 1.0]]), np.array([[0.0, 0, 3.0]]), np.array([0.99]), 0.1,
                          np.zeros(3))
    assert v[0] == 1.0


def test_block_propagation():
    vis = np.array([0.9, 0.0, 0.3, 0.2])
    block = np.array([0, 0, 1, 1])
    out = propagate_block_visibility(vis, block, 2, 0.5)
    assert np.allclose(out, [0.9, 0.9, 0.3, 0.2])


def test_visibility_block_max_in_scene():
    # camera on +z looking down; the cell at z=6 hides the cell at z=5 in the same block column
    cam = Camera(np.diag([1.0, -1.0, -1.0]), np.array([-0.5625, 0.5625, 3.0]), 20, 20, 16, 16, 32, 32)
    gs = grid([[4, 4, 5], [4, 4, 6]], G=8)
    vis = estimate_visibility(gs, [cam], K=4)
    assert np.allclose(vis, 1.0)
    raw = sphere_visibility(gs.centers(), gs.centers(), np.full(2, 1 - 1e-9), 1 / 8, cam.position, np.arange(2))
    assert raw[0] < 1e-6 and raw[1] == 1.0


# -- aggregation -----------------------------------------------------------------

def test_aggregate_one_and_two_views(rng):
    f1, f2 = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    one = aggregate_samples(f1[None], np.ones((1, 3)))
    assert np.allclose(one[:, :4], f1) and np.all(one[:, 4] == 0)
    two = aggregate_samples(np.stack([f1, f2]), np.full((2, 3), 0.7))
    assert np.allclose(two[:, :4], (f1 + f2) / 2)


def test_aggregate_unseen_rows_flagged(rng):
    out = aggregate_samples(rng.normal(size=(2, 3, 4)), np.array([[0.0, 1, 0], [0, 0.5, 0]]))
    assert np.all(out[[0, 2], :4] == 0) and np.all(out[[0, 2], 4] == 1) and out[1, 4] == 0
    empty = aggregate_samples(np.zeros((0, 3, 4)), np.zeros((0, 3)))
    assert empty.shape == (3, 5) and np.all(empty[:, 4] == 1)


@given(st.integers(1, 4), st.integers(1, 6))
def test_aggregate_torch_matches_numpy(V, P):
    r = np.random.default_rng(V * 10 + P)
    s, w = r.normal(size=(V, P, 3)), r.uniform(size=(V, P)) * (r.uniform(size=(V, P)) > 0.3)
    assert np.allclose(aggregate_samples(torch.as_tensor(s), w).numpy(), aggregate_samples(s, w))


def test_grid_feature_aggregation_out_of_view():
    gs = grid([[1, 1, 1]])
    cam = axis_cam()
    pyr = extract_feature_pyramid(np.ones((32, 32, 3)), FeatureExtractor(4), cam)
    # the cell centre sits behind this camera (z < 0 after flipping)
    back = Camera(np.diag([1.0, -1.0, -1.0]), np.array([0.0, 0.0, -2.0]), 20, 20, 16, 16, 32, 32)
    out = aggregate_grid_image_features(gs, [pyr], np.ones((1, 1)), [back])
    assert np.all(out[:, :-1].detach().numpy() == 0) and out[0, -1] == 1
    assert cam is pyr.camera


def test_pool_examples(rng):
    f = rng.normal(size=4)
    cells = np.array([np.r_[f, 0], np.r_[-f, 0], np.r_[f, 1]])
    out = pool_block_image_features(cells, np.array([0, 0, 1]), 2)
    assert np.allclose(out[0], np.r_[np.zeros(4), 0])
    assert np.allclose(out[1], np.r_[np.zeros(4), 1])
    one = pool_block_image_features(cells[:1], np.array([0]), 1)
    assert np.allclose(one[0, :4], f)
    t = pool_block_image_features(torch.as_tensor(cells), np.array([0, 0, 1]), 2)
    assert np.allclose(t.numpy(), out)


def test_null_conditioning_projects_to_flags():
    cond = Conditioning.null(5, 2)
    cell, block = project_conditioning(cond, FeatureExtractor(3))
    assert cell.shape == (5, 4) and block.shape == (2, 8)
    assert torch.all(cell[:, :3] == 0) and torch.all(cell[:, 3] == 1)
    assert torch.all(block[:, [3, 7]] == 1) and torch.all(block[:, [0, 1, 2, 4, 5, 6]] == 0)


def test_combine_pools_occupied_cells_only(rng):
    cf = rng.normal(size=(4, N_FIXED))
    obs = [ViewObservation(cf, np.ones(4), rng.normal(size=(1, N_FIXED)), np.ones(1))]
    cond = combine_observations(obs, np.zeros(4, dtype=int), np.array([True, False, False, True]), 1)
    assert np.allclose(cond.block_pool[0, :-1], (cf[0] + cf[3]) / 2)
    assert np.allclose(cond.cell[:, :-1], cf)
    assert combine_observations([], np.zeros(4, dtype=int), np.ones(4, bool), 1).cell[:, -1].all()
