"""Procedural tabletop world: scenes, a kinematic two-arm robot, scripted
experts, analytic RGB-D sensors and privileged text.

Each arm is a gantry with seven joints ``(x, y, z, yaw, pitch, roll, grip)``:
the palm position in the world frame, its orientation relative to a
downward-pointing tool frame, and the gripper opening in ``[0, 1]``
(1 = open).  Actions are absolute joint targets for both arms and are
reached exactly in one step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .diffcore import stream_rng
from .geometry import CameraModel, Pose, WorkspaceAABB, look_at, rot_x, rot_y, rot_z

TABLE_Z = 0.75
TABLE_HALF = (0.45, 0.35)
WORKSPACE = WorkspaceAABB((-0.45, -0.35, TABLE_Z - 0.005), (0.45, 0.35, 1.3))

GRID_COLS = (-0.24, 0.0, 0.24)  # x centers
GRID_ROWS = (-0.12, 0.12)  # y centers
CELL_HALF = 0.12
JITTER = 0.06

TIP = 0.05  # palm-to-fingertip distance along the tool axis
ARM_DOF = 7
ACTION_DIM = 2 * ARM_DOF
HOME = (
    np.array([-0.4, 0.3, 1.1, 0.0, 0.0, 0.0, 1.0]),
    np.array([-0.4, -0.3, 1.1, 0.0, 0.0, 0.0, 1.0]),
)
JOINT_LO = np.array([-0.45, -0.35, TABLE_Z + 0.01, -math.pi, -math.pi / 2, -math.pi / 2, 0.0])
JOINT_HI = np.array([0.45, 0.35, 1.3, math.pi, math.pi / 2, math.pi / 2, 1.0])
R_DOWN = rot_x(math.pi)
SUCCESS_RADIUS = 0.02
MAX_SPEED = 0.03  # meters per step


class WorldError(ValueError):
    pass


# ---------------------------------------------------------------- scenes


@dataclass(frozen=True)
class TaskSpec:
    name: str
    family: str  # "pick_place" | "slide"
    source: str
    target: str
    description: str


TASKS = {
    "cube_in_bin": TaskSpec("cube_in_bin", "pick_place", "red_cube", "blue_bin",
                            "pick the red_cube and place it in the blue_bin"),
    "ball_on_tray": TaskSpec("ball_on_tray", "pick_place", "green_ball", "yellow_tray",
                             "pick the green_ball and place it on the yellow_tray"),
    "slide_drawer": TaskSpec("slide_drawer", "slide", "grey_drawer", "white_pad",
                             "slide the grey_drawer along to the white_pad"),
}
PRETRAIN_TASKS = ("cube_in_bin", "ball_on_tray")
FINETUNE_TASKS = ("slide_drawer",)

# name: (kind, half extents or radius, rgb)
OBJECTS = {
    "red_cube": ("box", (0.02, 0.02, 0.02), (220, 40, 40)),
    "blue_bin": ("box", (0.05, 0.05, 0.015), (40, 70, 220)),
    "green_ball": ("sphere", (0.022, 0.022, 0.022), (40, 200, 60)),
    "yellow_tray": ("box", (0.055, 0.045, 0.01), (230, 210, 40)),
    "grey_drawer": ("box", (0.04, 0.03, 0.03), (130, 130, 130)),
    "white_pad": ("box", (0.05, 0.05, 0.003), (245, 245, 245)),
    "purple_block": ("box", (0.025, 0.015, 0.03), (140, 50, 170)),
    "orange_ball": ("sphere", (0.025, 0.025, 0.025), (250, 140, 30)),
    "cyan_box": ("box", (0.03, 0.03, 0.02), (40, 200, 210)),
    "pink_sphere": ("sphere", (0.018, 0.018, 0.018), (240, 120, 180)),
    "brown_crate": ("box", (0.035, 0.035, 0.025), (120, 80, 40)),
    "teal_block": ("box", (0.02, 0.03, 0.02), (30, 130, 120)),
    "black_ball": ("sphere", (0.02, 0.02, 0.02), (30, 30, 30)),
    "olive_box": ("box", (0.03, 0.02, 0.015), (120, 130, 40)),
}
DISTRACTORS = ("purple_block", "orange_ball", "cyan_box", "pink_sphere",
               "brown_crate", "teal_block", "black_ball", "olive_box")


@dataclass
class SceneObject:
    name: str
    kind: str
    half: np.ndarray  # half extents; spheres use half[0] as radius
    position: np.ndarray  # center, world frame
    yaw: float
    color: tuple

    @property
    def half_height(self) -> float:
        return float(self.half[2])

    def copy(self) -> "SceneObject":
        return replace(self, half=self.half.copy(), position=self.position.copy())


@dataclass
class Scene:
    task: TaskSpec
    objects: list
    seed: int
    cells: list = field(default_factory=list)  # (row, col) per object

    def object(self, name: str) -> SceneObject:
        for o in self.objects:
            if o.name == name:
                return o
        raise KeyError(name)

    def copy(self) -> "Scene":
        return Scene(self.task, [o.copy() for o in self.objects], self.seed, list(self.cells))


def _make_object(name: str, xy, yaw: float) -> SceneObject:
    kind, half, color = OBJECTS[name]
    half = np.array(half, dtype=np.float64)
    pos = np.array([xy[0], xy[1], TABLE_Z + half[2]])
    return SceneObject(name, kind, half, pos, float(yaw), color)


def gen_scene(seed: int, task: str, n_objects: int = 6) -> Scene:
    """Six objects on a 2x3 grid with bounded jitter; source and target listed first."""
    if task not in TASKS:
        raise WorldError(f"unknown task {task!r}")
    spec = TASKS[task]
    rng = stream_rng(seed, f"scene/{task}")
    cells = [(r, c) for r in range(len(GRID_ROWS)) for c in range(len(GRID_COLS))]
    if not 2 <= n_objects <= len(cells):
        raise WorldError(f"n_objects must be in [2, {len(cells)}]")
    if spec.family == "slide":
        # drawer and pad share a row so the slide is one-dimensional along x
        row = int(rng.integers(len(GRID_ROWS)))
        c_src, c_tgt = rng.choice(len(GRID_COLS), 2, replace=False)
        chosen = [(row, int(c_src)), (row, int(c_tgt))]
        rest = [c for c in cells if c not in chosen]
        order = rng.permutation(len(rest))
        chosen += [rest[i] for i in order[: n_objects - 2]]
    else:
        order = rng.permutation(len(cells))
        chosen = [cells[i] for i in order[:n_objects]]
    names = [spec.source, spec.target]
    names += [DISTRACTORS[i] for i in rng.choice(len(DISTRACTORS), n_objects - 2, replace=False)]
    objects = []
    for i, (name, (r, c)) in enumerate(zip(names, chosen)):
        jitter = rng.uniform(-JITTER, JITTER, size=2)
        xy = np.array([GRID_COLS[c], GRID_ROWS[r]]) + jitter
        if spec.family == "slide" and i == 1:
            xy[1] = objects[0].position[1]
        yaw = 0.0 if i < 2 or OBJECTS[name][0] == "sphere" else float(rng.uniform(-0.5, 0.5))
        objects.append(_make_object(name, xy, yaw))
    return Scene(spec, objects, int(seed), chosen)


# ---------------------------------------------------------------- robot


def gripper_pose(joints7: np.ndarray) -> Pose:
    """Palm frame of one arm; its +z axis is the approach direction."""
    x, y, z, yaw, pitch, roll = joints7[:6]
    return Pose(rot_z(yaw) @ rot_y(pitch) @ rot_x(roll) @ R_DOWN, np.array([x, y, z]))


def gripper_poses(joints14: np.ndarray) -> tuple[Pose, Pose]:
    return gripper_pose(joints14[:ARM_DOF]), gripper_pose(joints14[ARM_DOF:])


def tip_position(joints7: np.ndarray) -> np.ndarray:
    g = gripper_pose(joints7)
    return g.apply(np.array([0.0, 0.0, TIP]))


@dataclass
class RobotState:
    joints: np.ndarray  # (14,)

    def arm(self, i: int) -> np.ndarray:
        return self.joints[i * ARM_DOF:(i + 1) * ARM_DOF]

    def within_limits(self) -> bool:
        lo = np.concatenate([JOINT_LO, JOINT_LO]) - 1e-9
        hi = np.concatenate([JOINT_HI, JOINT_HI]) + 1e-9
        return bool(np.all((self.joints >= lo) & (self.joints <= hi)))


def home_joints() -> np.ndarray:
    return np.concatenate(HOME)


def start_joints(scene: Scene, jitter: float = 0.04) -> np.ndarray:
    """Home configuration with a seeded per-episode offset of the palm positions."""
    rng = stream_rng(scene.seed, f"start/{scene.task.name}")
    joints = home_joints()
    for arm in range(2):
        joints[arm * ARM_DOF:arm * ARM_DOF + 3] += rng.uniform(-jitter, jitter, size=3)
    return joints


class WorldSim:
    """Kinematic world: joints jump to their targets; grasped objects follow the palm."""

    def __init__(self, scene: Scene, joints: np.ndarray | None = None):
        self.scene = scene.copy()
        self.robot = RobotState(start_joints(scene) if joints is None else np.array(joints, dtype=np.float64))
        self.attached: dict[str, tuple[int, np.ndarray]] = {}
        self.limit_violation = False

    def step(self, action: np.ndarray) -> None:
        action = np.asarray(action, dtype=np.float64)
        if action.shape != (ACTION_DIM,):
            raise WorldError(f"action must have shape ({ACTION_DIM},), got {action.shape}")
        lo = np.concatenate([JOINT_LO, JOINT_LO])
        hi = np.concatenate([JOINT_HI, JOINT_HI])
        if np.any(action < lo - 1e-9) or np.any(action > hi + 1e-9):
            self.limit_violation = True
        prev = self.robot.joints.copy()
        self.robot = RobotState(np.clip(action, lo, hi))
        for arm in range(2):
            self._update_arm(arm, prev[arm * ARM_DOF:(arm + 1) * ARM_DOF])

    def _update_arm(self, arm: int, prev: np.ndarray) -> None:
        joints = self.robot.arm(arm)
        grip, prev_grip = joints[6], prev[6]
        held = [n for n, (a, _) in self.attached.items() if a == arm]
        for name in held:
            _, offset = self.attached[name]
            self.scene.object(name).position[:] = joints[:3] + offset
        if prev_grip >= 0.5 > grip and not held:
            tip = tip_position(joints)
            source = self.scene.object(self.scene.task.source)
            if np.linalg.norm(tip - source.position) < 0.025:
                self.attached[source.name] = (arm, source.position - joints[:3])
        elif prev_grip < 0.5 <= grip:
            for name in held:
                del self.attached[name]
                self._drop(self.scene.object(name))

    def _drop(self, obj: SceneObject) -> None:
        surface = TABLE_Z
        for other in self.scene.objects:
            if other is obj:
                continue
            if np.all(np.abs(obj.position[:2] - other.position[:2]) <= other.half[:2]):
                surface = max(surface, other.position[2] + other.half_height)
        obj.position[2] = surface + obj.half_height

    def success(self) -> bool:
        src = self.scene.object(self.scene.task.source)
        tgt = self.scene.object(self.scene.task.target)
        if self.attached:
            return False
        close = np.linalg.norm(src.position[:2] - tgt.position[:2]) < SUCCESS_RADIUS
        if self.scene.task.family == "pick_place":
            resting = abs(src.position[2] - (tgt.position[2] + tgt.half_height + src.half_height)) < 0.01
            return bool(close and resting)
        return bool(close)

    def object_poses(self) -> np.ndarray:
        return np.array([[*o.position, o.yaw] for o in self.scene.objects])


# ---------------------------------------------------------------- scripted expert


def _segment(start: np.ndarray, end: np.ndarray, min_steps: int) -> list[np.ndarray]:
    dist = float(np.linalg.norm(end[:3] - start[:3]))
    n = max(min_steps, int(math.ceil(dist / MAX_SPEED - 1e-9)))
    return [start + (end - start) * (s / n) for s in range(1, n + 1)]


def expert_waypoints(scene: Scene) -> tuple[int, list[tuple[str, np.ndarray, int]]]:
    """Active arm and the phase list ``(name, arm joint target, min steps)``."""
    spec = scene.task
    src = scene.object(spec.source)
    tgt = scene.object(spec.target)
    arm = 0 if src.position[1] >= 0 else 1

    def at(p, grip):
        return np.array([p[0], p[1], p[2], 0.0, 0.0, 0.0, grip])

    grasp =np.array([src.position[0], src.position[1], src.position[2] + TIP])
    above = grasp + [0.0, 0.0, 0.10]
    if spec.family == "pick_place":
        place = np.array([tgt.position[0], tgt.position[1],
                          tgt.position[2] + tgt.half_height + src.half_height + TIP])
        phases = [
            ("approach", at(above, 1.0), 4),
            ("descend", at(grasp, 1.0), 3),
            ("grasp", at(grasp, 0.0), 3),
            ("lift", at(grasp + [0.0, 0.0, 0.12], 0.0), 3),
            ("transport", at(place + [0.0, 0.0, 0.12], 0.0), 4),
            ("lower", at(place, 0.0), 3),
            ("release", at(place, 1.0), 2),
            ("retreat", at(place + [0.0, 0.0, 0.10], 1.0), 3),
        ]
    elif spec.family == "slide":
        goal = np.array([tgt.position[0], src.position[1], grasp[2]])
        phases = [
            ("approach", at(above, 1.0), 4),
            ("descend", at(grasp, 1.0), 3),
            ("grasp", at(grasp, 0.0), 3),
            ("slide", at(goal, 0.0), 4),
            ("release", at(goal, 1.0), 2),
            ("retreat", at(goal + [0.0, 0.0, 0.10], 1.0), 3),
        ]
    else:
        raise WorldError(f"unknown family {spec.family!r}")
    return arm, phases


def scripted_expert(scene: Scene):
    """Open-loop joint targets and the phase index (task progress) per step.

    Returns ``(actions (T, 14), progress (T,), reachable)``.
    """
    arm, phases = expert_waypoints(scene)
    joints = start_joints(scene)
    current = joints[arm * ARM_DOF:(arm + 1) * ARM_DOF].copy()
    actions, progress = [], []
    reachable = True
    for phase, (_, target, min_steps) in enumerate(phases):
        if np.any(target < JOINT_LO - 1e-9) or np.any(target > JOINT_HI + 1e-9):
            reachable = False
        for arm_joints in _segment(current, target, min_steps):
            full = joints.copy()
            full[arm * ARM_DOF:(arm + 1) * ARM_DOF] = arm_joints
            actions.append(full)
            progress.append(phase)
        current = target
    return np.array(actions), np.array(progress, dtype=np.int32), reachable


# ---------------------------------------------------------------- sensors


@dataclass
class _Primitives:
    sphere_c: list = field(default_factory=list)
    sphere_r: list = field(default_factory=list)
    sphere_rgb: list = field(default_factory=list)
    box_c: list = field(default_factory=list)
    box_R: list = field(default_factory=list)
    box_h: list = field(default_factory=list)
    box_rgb: list = field(default_factory=list)

    def box(self, center, R, half, rgb):
        self.box_c.append(np.asarray(center, dtype=np.float64))
        self.box_R.append(np.asarray(R, dtype=np.float64))
        self.box_h.append(np.asarray(half, dtype=np.float64))
        self.box_rgb.append(rgb)

    def sphere(self, center, radius, rgb):
        self.sphere_c.append(np.asarray(center, dtype=np.float64))
        self.sphere_r.append(float(radius))
        self.sphere_rgb.append(rgb)


def table_box():
    half = np.array([TABLE_HALF[0], TABLE_HALF[1], 0.02])
    return np.array([0.0, 0.0, TABLE_Z - half[2]]), np.eye(3), half


def scene_primitives(objects, joints: np.ndarray | None, table: bool = True) -> _Primitives:
    prims = _Primitives()
    if table:
        c, R, h = table_box()
        prims.box(c, R, h, (160, 120, 90))
    for o in objects:
        if o.kind == "sphere":
            prims.sphere(o.position, o.half[0], o.color)
        else:
            prims.box(o.position, rot_z(o.yaw), o.half, o.color)
    if joints is not None:
        for arm in range(2):
            j = joints[arm * ARM_DOF:(arm + 1) * ARM_DOF]
            g = gripper_pose(j)
            width = 0.02 + 0.06 * float(j[6])
            prims.box(g.translation, g.rotation, (0.015, 0.04, 0.01), (70, 70, 80))
            for side in (-1.0, 1.0):
                center = g.apply(np.array([0.0, side * (width / 2 + 0.006), 0.035]))
                prims.box(center, g.rotation, (0.006, 0.006, 0.025), (90, 90, 100))
    return prims


def cast_rays(origin: np.ndarray, dirs: np.ndarray, prims: _Primitives):
    """Nearest hit parameter, hit normal and color for rays ``origin + t * dirs``."""
    n = len(dirs)
    best = np.full(n, np.inf)
    normal = np.zeros((n, 3))
    color = np.zeros((n, 3))
    for c, r, rgb in zip(prims.sphere_c, prims.sphere_r, prims.sphere_rgb):
        oc = origin - c
        a = np.einsum("ij,ij->i", dirs, dirs)
        b = 2.0 * dirs @ oc
        cc = oc @ oc - r * r
        disc = b * b - 4 * a * cc
        hit = disc >= 0
        sq = np.sqrt(np.where(hit, disc, 0.0))
        t0 = (-b - sq) / (2 * a)
        t1 = (-b + sq) / (2 * a)
        t = np.where(t0 > 0, t0, t1)
        hit &= t > 0
        better = hit & (t < best)
        best = np.where(better, t, best)
        p = origin + t[:, None] * dirs
        normal[better] = (p[better] - c) / r
        color[better] = rgb
    for c, R, h, rgb in zip(prims.box_c, prims.box_R, prims.box_h, prims.box_rgb):
        o = R.T @ (origin - c)
        d = dirs @ R
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t_lo = (-h - o) * inv
            t_hi = (h - o) * inv
        t_min = np.minimum(t_lo, t_hi)
        t_max = np.maximum(t_lo, t_hi)
        t_min = np.where(np.isnan(t_min), -np.inf, t_min)
        t_max = np.where(np.isnan(t_max), np.inf, t_max)
        near = t_min.max(axis=1)
        far = t_max.min(axis=1)
        axis = t_min.argmax(axis=1)
        hit = (near <= far) & (far > 0) & (near > 0)
        better = hit & (near < best)
        best = np.where(better, near, best)
        local_n = np.zeros((n, 3))
        local_n[np.arange(n), axis] = -np.sign(d[np.arange(n), axis])
        normal[better] = local_n[better] @ R.T
        color[better] = rgb
    return best, normal, color


_LIGHT = np.array([0.3, 0.2, 1.0]) / np.linalg.norm([0.3, 0.2, 1.0])


def render_sensors(objects, joints: np.ndarray | None, cams, table: bool = True):
    """Analytic RGB-D for each camera: list of ``(rgb uint8 (H,W,3), depth (H,W))``.

    Depth is the camera-frame z of the nearest surface, 0 where nothing is hit.
    """
    prims = scene_primitives(objects, joints, table)
    out = []
    for cam in cams:
        rows, cols = np.mgrid[0:cam.height, 0:cam.width]
        local = np.stack([(cols - cam.cx) / cam.fx, (rows - cam.cy) / cam.fy,
                          np.ones_like(cols, dtype=np.float64)], axis=-1).reshape(-1, 3)
        dirs = local @ cam.pose.rotation.T
        t, normal, color = cast_rays(cam.pose.translation, dirs, prims)
        hit = np.isfinite(t)
        depth = np.where(hit, t, 0.0).reshape(cam.height, cam.width)
        shade = 0.4 + 0.6 * np.abs(normal @ _LIGHT)
        rgb = np.where(hit[:, None], color * shade[:, None], 0.0)
        out.append((np.clip(np.round(rgb), 0, 255).astype(np.uint8).reshape(cam.height, cam.width, 3), depth))
    return out


def sensor_cameras(size: int = 64, fov_deg: float = 70.0) -> list[CameraModel]:
    """Two fixed cameras at opposite table corners, 70 cm above the surface."""
    center = np.array([0.0, 0.0, TABLE_Z])
    poses = [
        look_at([TABLE_HALF[0], TABLE_HALF[1], TABLE_Z + 0.7], center),
        look_at([-TABLE_HALF[0], -TABLE_HALF[1], TABLE_Z + 0.7], center),
    ]
    return [CameraModel.from_fov(fov_deg, size, size, p) for p in poses]


# ---------------------------------------------------------------- text


def make_text(task: TaskSpec, objects, progress: int) -> str:
    """``task: <desc>. objects: <name> at (x,y,z); .... progress: <n>``.

    Positions are normalized to ``[0, 1]`` by the workspace box.
    """
    if progress < 0:
        raise WorldError("progress must be non-negative")
    if objects:
        parts = []
        for o in objects:
            x, y, z = WORKSPACE.normalize(o.position)
            parts.append(f"{o.name} at ({x:.2f},{y:.2f},{z:.2f})")
        listing = "; ".join(parts)
    else:
        listing = "none"
    return f"task: {task.description}. objects: {listing}. progress: {progress}"
