"""Point clouds from RGB-D, workspace filtering, and DXYZ virtual-view rendering.

Camera frames follow the pinhole convention x right, y down, z forward.
Pixel ``(row, col)`` has its center at ``(u=col, v=row)``; a camera-frame
point projects to ``u = fx*x/z + cx``, ``v = fy*y/z + cy`` and lands in the
pixel obtained by rounding half up.  Poses are camera-to-world.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffcore import stream_rng

VIEW_ORDER = ("overhead", "front_left", "back_right", "wrist_left", "wrist_right")

_ORTHO_TOL = 1e-9


class GeometryError(ValueError):
    pass


def check_rotation(rotation: np.ndarray, what: str = "rotation") -> None:
    rotation = np.asarray(rotation, dtype=np.float64)
    if rotation.shape != (3, 3):
        raise GeometryError(f"{what}: expected 3x3, got {rotation.shape}")
    if np.max(np.abs(rotation.T @ rotation - np.eye(3))) > _ORTHO_TOL:
        raise GeometryError(f"{what}: not orthonormal")
    if abs(np.linalg.det(rotation) - 1.0) > _ORTHO_TOL:
        raise GeometryError(f"{what}: determinant is not +1")


@dataclass(frozen=True)
class Pose:
    """Rigid transform mapping local coordinates into the parent frame."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def compose(self, other: "Pose") -> "Pose":
        """``self ∘ other``: apply ``other`` first, then ``self``."""
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation


def rot_x(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """Camera pose at ``eye`` whose optical (+z) axis points at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(forward, up)
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(forward, np.array([1.0, 0.0, 0.0]))
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    return Pose(np.stack([right, down, forward], axis=1), eye)


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    pose: Pose = field(default_factory=Pose.identity)

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise GeometryError("camera focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise GeometryError("camera resolution must be positive")
        check_rotation(self.pose.rotation, "camera rotation")

    @classmethod
    def from_fov(cls, fov_deg: float, width: int, height: int, pose: Pose) -> "CameraModel":
        f = (width / 2.0) / np.tan(np.deg2rad(fov_deg) / 2.0)
        # principal point on a pixel center so the optical axis hits exactly one pixel
        return cls(f, f, float(width // 2), float(height // 2), width, height, pose)

    def with_pose(self, pose: Pose) -> "CameraModel":
        return CameraModel(self.fx, self.fy, self.cx, self.cy, self.width, self.height, pose)

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "rotation": self.pose.rotation.tolist(), "translation": self.pose.translation.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        return cls(d["fx"], d["fy"], d["cx"], d["cy"], int(d["width"]), int(d["height"]),
                   Pose(np.array(d["rotation"]), np.array(d["translation"])))


@dataclass
class PointCloud:
    points: np.ndarray  # (N, 3) float64, world frame
    valid: np.ndarray  # (N,) bool

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.valid = np.asarray(self.valid, dtype=bool).reshape(-1)
        if len(self.points) != len(self.valid):
            raise GeometryError("points and valid mask differ in length")

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls(np.zeros((0, 3)), np.zeros(0, dtype=bool))

    @classmethod
    def of(cls, points) -> "PointCloud":
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return cls(points, np.ones(len(points), dtype=bool))

    def __len__(self) -> int:
        return len(self.points)

    def valid_points(self) -> np.ndarray:
        return self.points[self.valid]

    def transformed(self, pose: Pose) -> "PointCloud":
        pts = self.points.copy()
        pts[self.valid] = pose.apply(pts[self.valid])
        return PointCloud(pts, self.valid.copy())


@dataclass(frozen=True)
class WorkspaceAABB:
    lo: tuple
    hi: tuple

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=np.float64)
        hi = np.asarray(self.hi, dtype=np.float64)
        if lo.shape != (3,) or hi.shape != (3,) or np.any(lo >= hi):
            raise GeometryError("workspace box needs min < max on every axis")
        if np.all(lo < 0) and np.all(hi > 0):
            raise GeometryError("workspace box must exclude the world origin")

    @property
    def lo_arr(self) -> np.ndarray:
        return np.asarray(self.lo, dtype=np.float64)

    @property
    def hi_arr(self) -> np.ndarray:
        return np.asarray(self.hi, dtype=np.float64)

    def contains(self, points: np.ndarray) -> np.ndarray:
        return np.all((points > self.lo_arr) & (points < self.hi_arr), axis=-1)

    def normalize(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points) - self.lo_arr) / (self.hi_arr - self.lo_arr)

    def center(self) -> np.ndarray:
        return (self.lo_arr + self.hi_arr) / 2.0


# ---------------------------------------------------------------- cloud construction


def unproject(depth: np.ndarray, cam: CameraModel) -> PointCloud:
    """One world-frame point per pixel with positive depth (row-major order)."""
    depth = np.asarray(depth, dtype=np.float64)
    if depth.shape != (cam.height, cam.width):
        raise GeometryError(f"unproject: depth shape {depth.shape} != camera {(cam.height, cam.width)}")
    rows, cols = np.nonzero(depth > 0)
    d = depth[rows, cols]
    local = np.stack([(cols - cam.cx) * d / cam.fx, (rows - cam.cy) * d / cam.fy, d], axis=1)
    return PointCloud.of(cam.pose.apply(local))


def merge(clouds) -> PointCloud:
    clouds = list(clouds)
    if not clouds:
        return PointCloud.empty()
    return PointCloud(np.concatenate([c.points for c in clouds]), np.concatenate([c.valid for c in clouds]))


def crop_aabb(cloud: PointCloud, box: WorkspaceAABB) -> PointCloud:
    """Keep valid points strictly inside the box."""
    keep = cloud.valid & box.contains(cloud.points)
    return PointCloud(cloud.points[keep], np.ones(int(keep.sum()), dtype=bool))


def voxel_keys(points: np.ndarray, voxel: float) -> np.ndarray:
    return np.floor(points / voxel).astype(np.int64)


def voxel_downsample(cloud: PointCloud, voxel: float) -> PointCloud:
    """Replace the valid points of each occupied voxel by their centroid.

    Output is ordered by voxel index (lexicographic on the integer cell).
    """
    if not voxel > 0:
        raise GeometryError(f"voxel_downsample: voxel size must be positive, got {voxel}")
    pts = cloud.valid_points()
    if len(pts) == 0:
        return PointCloud.empty()
    keys = voxel_keys(pts, voxel)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    sums = np.zeros((len(counts), 3))
    np.add.at(sums, inverse, pts)
    return PointCloud.of(sums / counts[:, None])


def fix_count(cloud: PointCloud, n: int, seed: int) -> PointCloud:
    """Exactly ``n`` points: seeded subsample of valid points, or origin padding."""
    if n <= 0:
        raise GeometryError("fix_count: n must be positive")
    pts = cloud.valid_points()
    if len(pts) > n:
        keep = np.sort(stream_rng(seed, "fix_count").choice(len(pts), n, replace=False))
        return PointCloud.of(pts[keep])
    pad = n - len(pts)
    return PointCloud(
        np.concatenate([pts, np.zeros((pad, 3))]),
        np.concatenate([np.ones(len(pts), dtype=bool), np.zeros(pad, dtype=bool)]),
    )


def wrist_camera_pose(gripper_pose: Pose, offset: Pose) -> Pose:
    check_rotation(gripper_pose.rotation, "gripper rotation")
    check_rotation(offset.rotation, "offset rotation")
    return gripper_pose.compose(offset)


def default_wrist_offset(back: float = 0.08, pitch_deg: float = 15.0) -> Pose:
    """Camera 8 cm behind the tool frame along its approach (+z) axis, pitched 15°."""
    return Pose(rot_x(np.deg2rad(pitch_deg)), np.array([0.0, 0.0, -back]))


# ---------------------------------------------------------------- rendering


def render_view(cloud: PointCloud, cam: CameraModel) -> np.ndarray:
    """Z-buffered 1-pixel splat; returns ``(H, W, 4)`` DXYZ, background zero."""
    image = np.zeros((cam.height, cam.width, 4))
    world = cloud.valid_points()
    if len(world) == 0:
        return image
    local = (world - cam.pose.translation) @ cam.pose.rotation
    z = local[:, 2]
    front = z > 0
    world, local, z = world[front], local[front], z[front]
    col = np.floor(cam.fx * local[:, 0] / z + cam.cx + 0.5).astype(np.int64)
    row = np.floor(cam.fy * local[:, 1] / z + cam.cy + 0.5).astype(np.int64)
    inside = (col >= 0) & (col < cam.width) & (row >= 0) & (row < cam.height)
    if not inside.any():
        return image
    world, z, col, row = world[inside], z[inside], col[inside], row[inside]
    pixel = row * cam.width + col
    # nearest point per pixel; lexsort is stable so depth ties keep input order
    order = np.lexsort((z, pixel))
    first = np.ones(len(order), dtype=bool)
    first[1:] = pixel[order][1:] != pixel[order][:-1]
    win = order[first]
    flat = image.reshape(-1, 4)
    flat[pixel[win], 0] = z[win]
    flat[pixel[win], 1:] = world[win]
    return image


@dataclass
class MultiViewObservation:
    image: np.ndarray  # (V_H, n_views * V_W, 4)
    patch: int
    patch_coords: np.ndarray  # (P, 3)
    patch_valid: np.ndarray  # (P,)
    views: tuple = VIEW_ORDER

    @property
    def grid(self) -> tuple[int, int]:
        return self.image.shape[0] // self.patch, self.image.shape[1] // self.patch


def tile_views(views, patch: int = 8, names=VIEW_ORDER) -> MultiViewObservation:
    views = [np.asarray(v, dtype=np.float64) for v in views]
    if not views:
        raise GeometryError("tile_views: no views")
    shape = views[0].shape
    for i, v in enumerate(views):
        if v.shape != shape or v.ndim != 3 or v.shape[2] != 4:
            raise GeometryError(f"tile_views: view {i} has shape {v.shape}, expected {shape} with 4 channels")
    image = np.concatenate(views, axis=1)
    coords, valid = patch_coords(image, patch)
    return MultiViewObservation(image, patch, coords, valid, tuple(names[: len(views)]))


def patch_coords(image, patch: int) -> tuple[np.ndarray, np.ndarray]:
    """Mean global XYZ of foreground pixels in each patch, row-major over the grid."""
    if isinstance(image, MultiViewObservation):
        image = image.image
    h, w, _ = image.shape
    if patch <= 0 or h % patch or w % patch:
        raise GeometryError(f"patch_coords: patch {patch} does not divide image {h}x{w}")
    blocks = image.reshape(h // patch, patch, w // patch, patch, 4).transpose(0, 2, 1, 3, 4)
    blocks = blocks.reshape(-1, patch * patch, 4)
    mask = blocks[..., 0] > 0
    counts = mask.sum(axis=1)
    sums = (blocks[..., 1:] * mask[..., None]).sum(axis=1)
    valid = counts > 0
    coords = np.zeros_like(sums)
    coords[valid] = sums[valid] / counts[valid, None]
    return coords, valid


# ---------------------------------------------------------------- scene-level pipeline


@dataclass(frozen=True)
class RenderConfig:
    view_size: int = 64
    patch: int = 8
    point_cap: int = 20_000
    voxel: float = 0.005
    wrist_views: bool = True
    fov_deg: float = 70.0
    wrist_fov_deg: float = 90.0


def fixed_virtual_cameras(box: WorkspaceAABB, size: int, fov_deg: float) -> list[CameraModel]:
    """Overhead, front-left and back-right views aimed at the table center."""
    lo, hi = box.lo_arr, box.hi_arr
    table = np.array([(lo[0] + hi[0]) / 2, (lo[1] + hi[1]) / 2, lo[2]])
    height = 0.7
    poses = [
        look_at(table + [0.0, 0.0, height + 0.3], table, up=(1.0, 0.0, 0.0)),
        look_at([hi[0] + 0.1, hi[1] + 0.1, table[2] + height], table),
        look_at([lo[0] - 0.1, lo[1] - 0.1, table[2] + height], table),
    ]
    return [CameraModel.from_fov(fov_deg, size, size, p) for p in poses]


def wrist_cameras(gripper_poses, size: int, fov_deg: float, offset: Pose | None = None) -> list[CameraModel]:
    offset = offset or default_wrist_offset()
    return [CameraModel.from_fov(fov_deg, size, size, wrist_camera_pose(g, offset)) for g in gripper_poses]


def scene_cloud(depths, cams, box: WorkspaceAABB, cfg: RenderConfig, seed: int) -> PointCloud:
    cloud = merge(unproject(d, c) for d, c in zip(depths, cams))
    cloud = crop_aabb(cloud, box)
    cloud = voxel_downsample(cloud, cfg.voxel)
    return fix_count(cloud, cfg.point_cap, seed)


def render_observation(cloud: PointCloud, gripper_poses, box: WorkspaceAABB, cfg: RenderConfig) -> MultiViewObservation:
    """DXYZ views tiled in canonical order; three views when wrist views are off."""
    fixed = fixed_virtual_cameras(box, cfg.view_size, cfg.fov_deg)
    views = [render_view(cloud, c) for c in fixed]
    if cfg.wrist_views:
        views += [render_view(cloud, c) for c in wrist_cameras(gripper_poses, cfg.view_size, cfg.wrist_fov_deg)]
    return tile_views(views, cfg.patch)


def n_views(cfg: RenderConfig) -> int:
    return 5 if cfg.wrist_views else 3
