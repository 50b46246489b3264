import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clamp import geometry as g


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return q


def random_pose(rng):
    return g.Pose(random_rotation(rng), rng.normal(size=3))


def cam(width=8, height=6, f=5.0, pose=None):
    return g.CameraModel(f, f, width // 2, height // 2, width, height, pose or g.Pose.identity())


BOX = g.WorkspaceAABB((0.1, 0.1, 0.1), (1.0, 1.0, 1.0))


# ---------------------------------------------------------------- types


def test_camera_validation():
    with pytest.raises(g.GeometryError):
        g.CameraModel(-1.0, 1.0, 0, 0, 4, 4, g.Pose.identity())
    bad = g.Pose.__new__(g.Pose)
    object.__setattr__(bad, "rotation", np.diag([1.0, 1.0, -1.0]))
    object.__setattr__(bad, "translation", np.zeros(3))
    with pytest.raises(g.GeometryError):
        g.CameraModel(1.0, 1.0, 0, 0, 4, 4, bad)


def test_workspace_box_rules():
    with pytest.raises(g.GeometryError):
        g.WorkspaceAABB((0, 0, 1), (1, 1, 0.5))
    with pytest.raises(g.GeometryError):
        g.WorkspaceAABB((-1, -1, -1), (1, 1, 1))
    assert g.WorkspaceAABB((-1, -1, 0.0), (1, 1, 1)).contains(np.zeros(3)) == False  # noqa: E712


# ---------------------------------------------------------------- unproject / merge / crop


def test_unproject_principal_ray():
    depth = np.zeros((6, 8))
    depth[3, 4] = 2.5
    cloud = g.unproject(depth, cam())
    assert np.array_equal(cloud.points, [[0.0, 0.0, 2.5]])


def test_unproject_empty():
    assert len(g.unproject(np.zeros((6, 8)), cam())) == 0


def test_unproject_2x2_closed_form():
    rng = np.random.default_rng(0)
    pose = random_pose(rng)
    c = g.CameraModel(1.0, 1.0, 0.5, 0.5, 2, 2, pose)
    depth = rng.uniform(0.5, 2.0, size=(2, 2))
    cloud = g.unproject(depth, c)
    expected = []
    for r in range(2):
        for col in range(2):
            d = depth[r, col]
            local = np.array([(col - 0.5) * d, (r - 0.5) * d, d])
            expected.append(pose.rotation @ local + pose.translation)
    assert np.allclose(cloud.points, expected, atol=1e-14)


def test_unproject_shape_mismatch():
    with pytest.raises(g.GeometryError):
        g.unproject(np.zeros((3, 3)), cam())


def test_merge():
    a = g.PointCloud.of([[1, 2, 3]])
    b = g.PointCloud.of([[4, 5, 6]])
    m = g.merge([a, b])
    assert np.array_equal(m.points, [[1, 2, 3], [4, 5, 6]])
    same = g.merge([a, g.PointCloud.empty()])
    assert np.array_equal(same.points, a.points) and np.array_equal(same.valid, a.valid)


def test_crop_strict_boundary_and_brute_force():
    assert len(g.crop_aabb(g.PointCloud.of([BOX.lo]), BOX)) == 0
    rng = np.random.default_rng(1)
    pts = rng.uniform(0, 1.1, size=(500, 3))
    out = g.crop_aabb(g.PointCloud.of(pts), BOX)
    expected = [p for p in pts if all(BOX.lo[i] < p[i] < BOX.hi[i] for i in range(3))]
    assert np.array_equal(out.points, np.array(expected).reshape(-1, 3))
    inside = g.PointCloud.of(rng.uniform(0.2, 0.9, size=(20, 3)))
    assert np.array_equal(g.crop_aabb(inside, BOX).points, inside.points)


# ---------------------------------------------------------------- voxels / fix_count


def voxel_oracle(points, voxel):
    buckets = {}
    for p in points:
        key = tuple(int(np.floor(c / voxel)) for c in p)
        buckets.setdefault(key, []).append(p)
    return {k: np.mean(v, axis=0) for k, v in buckets.items()}


def test_voxel_downsample_matches_bucket_oracle():
    rng = np.random.default_rng(2)
    pts = rng.uniform(-1, 1, size=(1000, 3))
    out = g.voxel_downsample(g.PointCloud.of(pts), 0.1)
    oracle = voxel_oracle(pts, 0.1)
    assert len(out) == len(oracle)
    for p in out.points:
        key = tuple(int(np.floor(c / 0.1)) for c in p)
        assert np.allclose(p, oracle[key], atol=1e-12)


def test_voxel_simple_cases():
    assert len(g.voxel_downsample(g.PointCloud.of([[0.5, 0.5, 0.5]] * 2), 0.1)) == 1
    line = g.PointCloud.of([[0.05 + 0.2 * i, 0.05, 0.05] for i in range(10)])
    assert len(g.voxel_downsample(line, 0.1)) == 10
    with pytest.raises(g.GeometryError):
        g.voxel_downsample(line, 0.0)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), voxel=st.floats(0.01, 0.5))
def test_voxel_output_has_one_point_per_cell(seed, voxel):
    pts = np.random.default_rng(seed).uniform(-1, 1, size=(200, 3))
    out = g.voxel_downsample(g.PointCloud.of(pts), voxel)
    keys = g.voxel_keys(out.points, voxel)
    assert len(np.unique(keys, axis=0)) == len(keys)


def test_fix_count_cases():
    pts = np.random.default_rng(3).uniform(0.2, 0.8, size=(10, 3))
    same = g.fix_count(g.PointCloud.of(pts), 10, seed=0)
    assert np.array_equal(same.points, pts) and same.valid.all()
    padded = g.fix_count(g.PointCloud.of(pts[:7]), 10, seed=0)
    assert np.array_equal(padded.points[7:], np.zeros((3, 3))) and not padded.valid[7:].any()
    big = g.PointCloud.of(np.random.default_rng(4).uniform(size=(15, 3)))
    a, b = g.fix_count(big, 10, seed=5), g.fix_count(big, 10, seed=5)
    assert np.array_equal(a.points, b.points) and len(a) == 10
    assert not np.array_equal(a.points, g.fix_count(big, 10, seed=6).points)


@settings(max_examples=30, deadline=None)
@given(m=st.integers(0, 50), n=st.integers(1, 40))
def test_fix_count_length_and_padding(m, n):
    pts = np.random.default_rng(m).uniform(0.2, 0.8, size=(m, 3))
    out = g.fix_count(g.PointCloud.of(pts), n, seed=1)
    assert len(out) == n
    assert np.all(out.points[~out.valid] == 0)


# ---------------------------------------------------------------- poses


def test_wrist_pose_composition():
    rng = np.random.default_rng(5)
    a, b = random_pose(rng), random_pose(rng)
    assert np.allclose(g.wrist_camera_pose(a, g.Pose.identity()).matrix(), a.matrix(), atol=1e-15)
    assert np.allclose(g.wrist_camera_pose(g.Pose.identity(), b).matrix(), b.matrix(), atol=1e-15)
    assert np.allclose(g.wrist_camera_pose(a, b).matrix(), a.matrix() @ b.matrix(), atol=1e-12)
    bad = g.Pose.__new__(g.Pose)
    object.__setattr__(bad, "rotation", np.eye(3) * 2)
    object.__setattr__(bad, "translation", np.zeros(3))
    with pytest.raises(g.GeometryError):
        g.wrist_camera_pose(a, bad)


def test_look_at_points_forward_axis():
    pose = g.look_at([1.0, 2.0, 3.0], [1.0, 2.0, 0.0])
    assert np.allclose(pose.rotation[:, 2], [0, 0, -1])


# ---------------------------------------------------------------- rendering


def test_render_empty_and_invalid():
    assert not g.render_view(g.PointCloud.empty(), cam()).any()
    cloud = g.PointCloud(np.zeros((3, 3)), np.zeros(3, bool))
    assert not g.render_view(cloud, cam()).any()


def test_render_single_point_on_axis():
    rng = np.random.default_rng(6)
    pose = random_pose(rng)
    c = cam(pose=pose)
    point = pose.apply(np.array([0.0, 0.0, 1.0]))
    img = g.render_view(g.PointCloud.of([point]), c)
    nz = np.argwhere(img[..., 0] > 0)
    assert nz.tolist() == [[3, 4]]
    assert np.allclose(img[3, 4], [1.0, *point], atol=1e-12)


def test_render_skips_points_behind_camera():
    assert not g.render_view(g.PointCloud.of([[0.0, 0.0, -1.0]]), cam()).any()


def zbuffer_oracle(points, c):
    img = np.zeros((c.height, c.width, 4))
    for p in points:
        local = c.pose.rotation.T @ (p - c.pose.translation)
        if local[2] <= 0:
            continue
        col = int(np.floor(c.fx * local[0] / local[2] + c.cx + 0.5))
        row = int(np.floor(c.fy * local[1] / local[2] + c.cy + 0.5))
        if 0 <= col < c.width and 0 <= row < c.height:
            if img[row, col, 0] == 0 or local[2] < img[row, col, 0]:
                img[row, col] = [local[2], *p]
    return img


def test_render_matches_zbuffer_oracle():
    rng = np.random.default_rng(7)
    pts = np.concatenate([rng.uniform([-1, -1, 0.5], [1, 1, 3], size=(300, 3)),
                          [[0, 0, 2.0], [0, 0, 1.0]]])  # same pixel, nearer wins
    c = cam(16, 12, 6.0)
    assert np.allclose(g.render_view(g.PointCloud.of(pts), c), zbuffer_oracle(pts, c), atol=1e-12)
    img = g.render_view(g.PointCloud.of([[0, 0, 2.0], [0, 0, 1.0]]), c)
    assert img[6, 8, 0] == 1.0


def test_render_unproject_round_trip():
    rng = np.random.default_rng(8)
    c = cam(16, 12, 8.0, random_pose(rng))
    depth = rng.uniform(0.5, 2.0, size=(12, 16))
    depth[rng.uniform(size=depth.shape) < 0.3] = 0
    img = g.render_view(g.unproject(depth, c), c)
    assert np.max(np.abs(img[..., 0] - depth)) < 1e-9


def test_rigid_equivariance():
    rng = np.random.default_rng(9)
    pts = rng.uniform([-1, -1, 1], [1, 1, 3], size=(200, 3))
    c = cam(16, 12, 6.0)
    G = random_pose(rng)
    a = g.render_view(g.PointCloud.of(pts), c)
    b = g.render_view(g.PointCloud.of(pts).transformed(G), c.with_pose(G.compose(c.pose)))
    assert np.allclose(a[..., 0], b[..., 0], atol=1e-9)
    fg = a[..., 0] > 0
    assert np.allclose(G.apply(a[fg][:, 1:]), b[fg][:, 1:], atol=1e-9)


def test_dxyz_background_invariant():
    rng = np.random.default_rng(10)
    img = g.render_view(g.PointCloud.of(rng.uniform([-1, -1, 1], [1, 1, 3], size=(50, 3))), cam(16, 12))
    bg = img[..., 0] == 0
    assert np.all(img[bg] == 0) and np.all(img[..., 0] >= 0)


# ---------------------------------------------------------------- tiling / patches


def test_tile_views_index_map_and_shape():
    rng = np.random.default_rng(11)
    views = [rng.uniform(size=(64, 64, 4)) for _ in range(5)]
    obs = g.tile_views(views, patch=8)
    assert obs.image.shape == (64, 320, 4)
    assert obs.patch_coords.shape == (320, 3) and obs.grid == (8, 40)
    for i in range(5):
        assert np.array_equal(obs.image[10, i * 64 + 7], views[i][10, 7])
    single = g.tile_views(views[:1], patch=8)
    assert np.array_equal(single.image, views[0])


def test_tile_views_dim_mismatch():
    with pytest.raises(g.GeometryError):
        g.tile_views([np.zeros((8, 8, 4)), np.zeros((8, 16, 4))])


def test_patch_coords_cases():
    img = np.zeros((4, 8, 4))
    img[0, 0] = [1.0, 1.0, 2.0, 3.0]
    img[1, 5] = [1.0, 2.0, 0.0, 0.0]
    img[2, 6] = [2.0, 4.0, 2.0, 2.0]
    coords, valid = g.patch_coords(img, 4)
    assert np.array_equal(coords[0], [1.0, 2.0, 3.0]) and valid[0]
    assert np.allclose(coords[1], [3.0, 1.0, 1.0]) and valid[1]
    assert valid.tolist() == [True, True]
    coords, valid = g.patch_coords(np.zeros((4, 8, 4)), 4)
    assert not valid.any() and not coords.any()
    with pytest.raises(g.GeometryError):
        g.patch_coords(img, 3)


def test_wrist_views_move_fixed_views_do_not():
    rng = np.random.default_rng(12)
    cloud = g.PointCloud.of(rng.uniform([-0.4, -0.3, 0.76], [0.4, 0.3, 0.9], size=(3000, 3)))
    box = g.WorkspaceAABB((-0.45, -0.35, 0.745), (0.45, 0.35, 1.3))
    cfg = g.RenderConfig()
    down = g.Pose(g.rot_x(np.pi), np.array([0.0, 0.0, 1.1]))
    moved = g.Pose(g.rot_x(np.pi), np.array([0.1, 0.05, 1.0]))
    a = g.render_observation(cloud, [down, down], box, cfg)
    b = g.render_observation(cloud, [moved, down], box, cfg)
    assert np.array_equal(a.image[:, :192], b.image[:, :192])
    assert not np.array_equal(a.image[:, 192:256], b.image[:, 192:256])
    assert np.array_equal(a.image[:, 256:], b.image[:, 256:])


def test_wrist_views_off_gives_three_views():
    cloud = g.PointCloud.of([[0.0, 0.0, 0.8]])
    box = g.WorkspaceAABB((-0.45, -0.35, 0.745), (0.45, 0.35, 1.3))
    obs = g.render_observation(cloud, [g.Pose.identity()] * 2, box, g.RenderConfig(wrist_views=False))
    assert obs.image.shape == (64, 192, 4) and g.n_views(g.RenderConfig(wrist_views=False)) == 3
